#include "pvseg/service.hpp"

#include <algorithm>
#include <condition_variable>
#include <cstdio>
#include <cstdlib>
#include <random>
#include <thread>

#include <httplib.h>

#include "png_io.hpp"
#include "pvseg/errors.hpp"
#include "pvseg/rle.hpp"

namespace pvseg {

nlohmann::json to_json(const SessionInfo& info) {
  return {{"id", info.id}, {"n", info.num_frames}, {"h", info.height}, {"w", info.width}};
}

Masklet& Session::masklet(int object) {
  auto it = masks.find(object);
  if (it == masks.end()) {
    Masklet empty(static_cast<std::size_t>(clip.num_frames()), BinaryMask(clip.height(), clip.width()));
    it = masks.emplace(object, std::move(empty)).first;
  }
  return it->second;
}

SessionManager::SessionManager(SegmentationModel model, std::chrono::seconds idle_timeout)
    : model_(std::move(model)), idle_timeout_(idle_timeout) {
  model_->eval();
}

std::string SessionManager::next_id() {
  static thread_local std::mt19937_64 rng{std::random_device{}()};
  char buf[24];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(rng() ^ ++counter_));
  return buf;
}

SessionInfo SessionManager::create(VideoClip clip) {
  if (!clip.frames.defined() || clip.frames.dim() != 4 || clip.frames.size(1) != 3) {
    throw ValidationError("video must be [n, 3, h, w]", "frames");
  }
  const auto stride = model_->config().encoder.final_stride();
  if (clip.height() % stride != 0 || clip.width() % stride != 0) {
    throw ValidationError("frame size " + std::to_string(clip.height()) + "x" +
                              std::to_string(clip.width()) + " is not divisible by " +
                              std::to_string(stride),
                          "frames");
  }
  evict_idle();
  auto s = std::make_shared<Session>();
  s->clip = std::move(clip);
  s->last_used = Clock::now();
  std::lock_guard lock(sessions_mutex_);
  do {
    s->id = next_id();
  } while (sessions_.count(s->id));
  sessions_.emplace(s->id, s);
  return {s->id, s->clip.num_frames(), s->clip.height(), s->clip.width()};
}

std::shared_ptr<Session> SessionManager::find(const std::string& id) {
  std::lock_guard lock(sessions_mutex_);
  auto it = sessions_.find(id);
  if (it == sessions_.end()) throw SessionNotFound(id);
  return it->second;
}

SessionInfo SessionManager::info(const std::string& id) {
  auto s = find(id);
  return {s->id, s->clip.num_frames(), s->clip.height(), s->clip.width()};
}

void SessionManager::remove(const std::string& id) {
  auto s = find(id);
  std::unique_lock busy(s->mutex, std::try_to_lock);
  if (!busy.owns_lock()) throw SessionBusy(id);
  std::lock_guard lock(sessions_mutex_);
  sessions_.erase(id);
}

std::unique_lock<std::mutex> SessionManager::acquire(const std::string& id) {
  auto s = find(id);
  std::unique_lock lock(s->mutex, std::try_to_lock);
  if (!lock.owns_lock()) throw SessionBusy(id);
  s->last_used = Clock::now();
  return lock;
}

namespace {

void check_object(int object) {
  if (object < 0) throw ValidationError("object id must be >= 0", "object");
}

void check_frame(const Session& s, int frame, const char* field) {
  if (frame < 0 || frame >= s.clip.num_frames()) {
    throw ValidationError(std::string(field) + " " + std::to_string(frame) + " is outside [0, " +
                              std::to_string(s.clip.num_frames()) + ")",
                          field);
  }
}

}  // namespace

BinaryMask SessionManager::add_prompt(const std::string& id, int object, const Prompt& prompt) {
  check_object(object);
  auto s = find(id);
  auto lock = acquire(id);
  check_frame(*s, prompt.frame_index, "frame");
  prompt.validate(s->clip.height(), s->clip.width());
  auto history = s->prompts[object];
  history[prompt.frame_index].push_back(prompt);
  auto& masks = s->masklet(object);
  ModelTracker tracker(model_);
  auto mask = predict_prompted_frame(tracker, s->clip, history, masks, prompt.frame_index);
  s->prompts[object] = std::move(history);
  masks[static_cast<std::size_t>(prompt.frame_index)] = mask;
  return mask;
}

Masklet SessionManager::propagate(const std::string& id, int object, int from_frame) {
  check_object(object);
  auto s = find(id);
  auto lock = acquire(id);
  check_frame(*s, from_frame, "from_frame");
  auto& masks = s->masklet(object);
  ModelTracker tracker(model_);
  masks = pvseg::propagate(tracker, s->clip, s->prompts[object], masks, from_frame);
  return masks;
}

BinaryMask SessionManager::mask(const std::string& id, int object, int frame) {
  check_object(object);
  auto s = find(id);
  std::lock_guard lock(s->mutex);  // readers wait instead of failing
  s->last_used = Clock::now();
  check_frame(*s, frame, "frame");
  return s->masklet(object)[static_cast<std::size_t>(frame)];
}

PromptHistory SessionManager::prompts(const std::string& id, int object) {
  check_object(object);
  auto s = find(id);
  std::lock_guard lock(s->mutex);
  s->last_used = Clock::now();
  return s->prompts[object];
}

VideoClip SessionManager::clip(const std::string& id) {
  auto s = find(id);
  s->last_used = Clock::now();
  return s->clip;
}

int SessionManager::evict_idle(Clock::time_point now) {
  std::lock_guard lock(sessions_mutex_);
  int removed = 0;
  for (auto it = sessions_.begin(); it != sessions_.end();) {
    auto& s = *it->second;
    std::unique_lock busy(s.mutex, std::try_to_lock);
    if (busy.owns_lock() && now - s.last_used > idle_timeout_) {
      busy.unlock();
      it = sessions_.erase(it);
      ++removed;
    } else {
      ++it;
    }
  }
  return removed;
}

std::size_t SessionManager::size() {
  std::lock_guard lock(sessions_mutex_);
  return sessions_.size();
}

int port_from_env(int fallback) {
  const char* v = std::getenv("PVSEG_PORT");
  if (!v || !*v) return fallback;
  char* end = nullptr;
  const long p = std::strtol(v, &end, 10);
  if (*end != '\0' || p < 0 || p > 65535) {
    throw ValidationError("PVSEG_PORT must be a port number, got '" + std::string(v) + "'", "PVSEG_PORT");
  }
  return static_cast<int>(p);
}

namespace {

void send_json(httplib::Response& res, int status, const nlohmann::json& body) {
  res.status = status;
  res.set_content(body.dump(), "application/json");
}

void send_error(httplib::Response& res, int status, const std::string& message,
                const std::string& field = {}) {
  nlohmann::json body = {{"error", message}};
  if (!field.empty()) body["field"] = field;
  send_json(res, status, body);
}

nlohmann::json parse_body(const httplib::Request& req) {
  try {
    return nlohmann::json::parse(req.body);
  } catch (const nlohmann::json::parse_error& e) {
    throw ValidationError(std::string("request body is not valid JSON: ") + e.what(), "body");
  }
}

int parse_index(const std::string& s, const char* field) {
  try {
    std::size_t used = 0;
    const int v = std::stoi(s, &used);
    if (used == s.size()) return v;
  } catch (const std::exception&) {
  }
  throw ValidationError(std::string(field) + " must be an integer", field);
}

// Runs `fn`, mapping library errors onto HTTP statuses.
template <typename Fn>
void guarded(httplib::Response& res, Fn&& fn) {
  try {
    fn();
  } catch (const SessionNotFound& e) {
    send_error(res, 404, e.what());
  } catch (const SessionBusy& e) {
    send_error(res, 409, e.what());
  } catch (const ValidationError& e) {
    send_error(res, 422, e.what(), e.field());
  } catch (const DatasetError& e) {
    send_error(res, 422, e.what(), "dataset");
  } catch (const std::exception& e) {
    send_error(res, 500, e.what());
  }
}

VideoClip clip_from_uploads(std::vector<httplib::MultipartFormData> files) {
  if (files.empty()) throw ValidationError("multipart upload carries no 'frames' parts", "frames");
  std::sort(files.begin(), files.end(),
            [](const auto& a, const auto& b) { return a.filename < b.filename; });
  std::vector<torch::Tensor> frames;
  for (const auto& f : files) {
    detail::Image8 img;
    try {
      img = detail::decode_png(std::vector<std::uint8_t>(f.content.begin(), f.content.end()), 3);
    } catch (const std::exception& e) {
      throw ValidationError("frame '" + f.filename + "' is not a readable PNG", "frames");
    }
    if (!frames.empty() && (img.height != frames[0].size(1) || img.width != frames[0].size(2))) {
      throw ValidationError("frame '" + f.filename + "' differs in size from the first frame", "frames");
    }
    auto t = torch::from_blob(img.pixels.data(), {img.height, img.width, 3}, torch::kUInt8)
                 .permute({2, 0, 1})
                 .to(torch::kFloat32)
                 .div(255.0);
    frames.push_back(t.contiguous());
  }
  return VideoClip{torch::stack(frames)};
}

VideoClip clip_from_dataset(const nlohmann::json& body) {
  if (!body.contains("dataset") || !body["dataset"].is_string()) {
    throw ValidationError("field 'dataset' must be a path", "dataset");
  }
  const auto data = read_dataset(body["dataset"].get<std::string>());
  const auto& ref = body.value("clip", nlohmann::json(0));
  if (ref.is_number_integer()) {
    const auto k = ref.get<int>();
    if (k < 0 || k >= static_cast<int>(data.size())) {
      throw ValidationError("clip index " + std::to_string(k) + " is out of range", "clip");
    }
    return data[static_cast<std::size_t>(k)].clip;
  }
  if (ref.is_string()) {
    for (const auto& rec : data) {
      if (rec.id == ref.get<std::string>()) return rec.clip;
    }
  }
  throw ValidationError("clip reference not found in dataset", "clip");
}

std::vector<std::uint8_t> frame_png(const VideoClip& clip, int t) {
  auto bytes = clip.frames[t].mul(255.0).round().clamp(0, 255).to(torch::kUInt8).permute({1, 2, 0}).contiguous();
  detail::Image8 img;
  img.height = clip.height();
  img.width = clip.width();
  img.channels = 3;
  img.pixels.assign(bytes.data_ptr<std::uint8_t>(), bytes.data_ptr<std::uint8_t>() + bytes.numel());
  return detail::encode_png(img);
}

}  // namespace

struct HttpService::Impl {
  std::shared_ptr<SessionManager> sessions;
  ServiceOptions options;
  httplib::Server server;
  std::thread evictor;
  std::mutex stop_mutex;
  std::condition_variable stop_cv;
  bool stopping = false;

  void routes();
};

void HttpService::Impl::routes() {
  auto& sv = server;
  auto& mgr = *sessions;

  sv.set_default_headers({{"Access-Control-Allow-Origin", "*"},
                          {"Access-Control-Allow-Headers", "Content-Type"},
                          {"Access-Control-Allow-Methods", "GET, POST, DELETE, OPTIONS"}});
  sv.Options(R"(/v1/.*)", [](const httplib::Request&, httplib::Response& res) { res.status = 204; });

  sv.Get("/v1/health", [](const httplib::Request&, httplib::Response& res) {
    send_json(res, 200, {{"status", "ok"}});
  });

  sv.Post("/v1/sessions", [&mgr](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      VideoClip clip = req.is_multipart_form_data() ? clip_from_uploads(req.get_file_values("frames"))
                                                    : clip_from_dataset(parse_body(req));
      send_json(res, 201, to_json(mgr.create(std::move(clip))));
    });
  });

  sv.Get(R"(/v1/sessions/([^/]+))", [&mgr](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] { send_json(res, 200, to_json(mgr.info(req.matches[1]))); });
  });

  sv.Delete(R"(/v1/sessions/([^/]+))", [&mgr](const httplib::Request& req, httplib::Response& res) {
    guarded(res, [&] {
      mgr.remove(req.matches[1]);
      res.status = 204;
    });
  });

  sv.Get(R"(/v1/sessions/([^/]+)/frames/([^/]+))",
         [&mgr](const httplib::Request& req, httplib::Response& res) {
           guarded(res, [&] {
             const auto clip = mgr.clip(req.matches[1]);
             const int t = parse_index(req.matches[2], "frame");
             if (t < 0 || t >= clip.num_frames()) {
               throw ValidationError("frame " + std::to_string(t) + " is out of range", "frame");
             }
             const auto png = frame_png(clip, t);
             res.status = 200;
             res.set_content(std::string(png.begin(), png.end()), "image/png");
           });
         });

  sv.Post(R"(/v1/sessions/([^/]+)/objects/([^/]+)/prompts)",
          [&mgr](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] {
              const std::string id = req.matches[1];
              mgr.info(id);
              const int object = parse_index(req.matches[2], "object");
              const auto prompt = prompt_from_json(parse_body(req));
              const auto mask = mgr.add_prompt(id, object, prompt);
              send_json(res, 200, {{"frame", prompt.frame_index}, {"mask", to_json(rle_encode(mask))}});
            });
          });

  sv.Get(R"(/v1/sessions/([^/]+)/objects/([^/]+)/prompts)",
         [&mgr](const httplib::Request& req, httplib::Response& res) {
           guarded(res, [&] {
             const auto history = mgr.prompts(req.matches[1], parse_index(req.matches[2], "object"));
             auto list = nlohmann::json::array();
             for (const auto& [frame, prompts] : history) {
               for (const auto& p : prompts) list.push_back(to_json(p));
             }
             send_json(res, 200, {{"prompts", list}});
           });
         });

  sv.Post(R"(/v1/sessions/([^/]+)/objects/([^/]+)/propagate)",
          [&mgr](const httplib::Request& req, httplib::Response& res) {
            guarded(res, [&] {
              const std::string id = req.matches[1];
              mgr.info(id);
              const int object = parse_index(req.matches[2], "object");
              const auto body = req.body.empty() ? nlohmann::json::object() : parse_body(req);
              if (!body.is_object()) throw ValidationError("body must be a JSON object", "body");
              int from = 0;
              if (body.contains("from_frame")) {
                if (!body["from_frame"].is_number_integer()) {
                  throw ValidationError("field 'from_frame' must be an integer", "from_frame");
                }
                from = body["from_frame"].get<int>();
              }
              const auto masks = mgr.propagate(id, object, from);
              auto list = nlohmann::json::array();
              for (const auto& m : masks) list.push_back(to_json(rle_encode(m)));
              send_json(res, 200, {{"from_frame", from}, {"masks", list}});
            });
          });

  sv.Get(R"(/v1/sessions/([^/]+)/objects/([^/]+)/masks/([^/]+))",
         [&mgr](const httplib::Request& req, httplib::Response& res) {
           guarded(res, [&] {
             const std::string id = req.matches[1];
             mgr.info(id);
             const auto mask = mgr.mask(id, parse_index(req.matches[2], "object"),
                                        parse_index(req.matches[3], "frame"));
             send_json(res, 200, to_json(rle_encode(mask)));
           });
         });

  if (!options.ui_dir.empty()) sv.set_mount_point("/", options.ui_dir.string());
}

HttpService::HttpService(std::shared_ptr<SessionManager> sessions, ServiceOptions options)
    : impl_(std::make_unique<Impl>()) {
  impl_->sessions = std::move(sessions);
  impl_->options = std::move(options);
  impl_->routes();
}

HttpService::~HttpService() { stop(); }

int HttpService::bind() {
  auto& o = impl_->options;
  if (o.port == 0) return impl_->server.bind_to_any_port(o.host);
  return impl_->server.bind_to_port(o.host, o.port) ? o.port : -1;
}

void HttpService::serve() {
  impl_->evictor = std::thread([impl = impl_.get()] {
    std::unique_lock lock(impl->stop_mutex);
    while (!impl->stop_cv.wait_for(lock, impl->options.eviction_interval,
                                   [impl] { return impl->stopping; })) {
      impl->sessions->evict_idle();
    }
  });
  impl_->server.listen_after_bind();
}

void HttpService::stop() {
  {
    std::lock_guard lock(impl_->stop_mutex);
    impl_->stopping = true;
  }
  impl_->stop_cv.notify_all();
  impl_->server.stop();
  if (impl_->evictor.joinable()) impl_->evictor.join();
}

}  // namespace pvseg
