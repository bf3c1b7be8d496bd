#pragma once

#include <chrono>
#include <cstdint>
#include <filesystem>
#include <map>
#include <memory>
#include <mutex>
#include <stdexcept>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "pvseg/data_synth.hpp"
#include "pvseg/model.hpp"
#include "pvseg/prompt.hpp"

namespace pvseg {

class SessionNotFound : public std::runtime_error {
public:
  explicit SessionNotFound(const std::string& id)
      : std::runtime_error("unknown session '" + id + "'") {}
};

/// Another request is already mutating the session.
class SessionBusy : public std::runtime_error {
public:
  explicit SessionBusy(const std::string& id)
      : std::runtime_error("session '" + id + "' is busy with another request") {}
};

struct SessionInfo {
  std::string id;
  int num_frames = 0;
  int height = 0;
  int width = 0;
};

nlohmann::json to_json(const SessionInfo& info);

/// Interactive state of one video: prompts and masks per object. Masks of an
/// object not yet prompted are empty.
struct Session {
  std::string id;
  VideoClip clip;
  std::map<int, PromptHistory> prompts;
  std::map<int, Masklet> masks;
  std::mutex mutex;
  std::chrono::steady_clock::time_point last_used;

  Masklet& masklet(int object);
};

/// Owns all sessions and the (read-only) model. Every mutating call holds the
/// session's mutex; a second concurrent caller gets SessionBusy.
class SessionManager {
public:
  using Clock = std::chrono::steady_clock;

  explicit SessionManager(SegmentationModel model,
                          std::chrono::seconds idle_timeout = std::chrono::minutes(30));

  SessionInfo create(VideoClip clip);
  SessionInfo info(const std::string& id);
  void remove(const std::string& id);

  /// Adds a prompt and returns the re-segmented mask of its frame.
  BinaryMask add_prompt(const std::string& id, int object, const Prompt& prompt);

  /// Re-runs propagation from `from_frame` with every accumulated prompt;
  /// returns the whole masklet.
  Masklet propagate(const std::string& id, int object, int from_frame);

  BinaryMask mask(const std::string& id, int object, int frame);
  PromptHistory prompts(const std::string& id, int object);
  VideoClip clip(const std::string& id);

  /// Holds the session as a writer; throws SessionBusy if already held.
  std::unique_lock<std::mutex> acquire(const std::string& id);

  /// Drops sessions idle for longer than the timeout as of `now`. Busy
  /// sessions are kept. Returns how many were removed.
  int evict_idle(Clock::time_point now = Clock::now());

  std::size_t size();
  std::chrono::seconds idle_timeout() const { return idle_timeout_; }
  SegmentationModel& model() { return model_; }

private:
  std::shared_ptr<Session> find(const std::string& id);
  std::string next_id();

  SegmentationModel model_;
  std::chrono::seconds idle_timeout_;
  std::mutex sessions_mutex_;
  std::map<std::string, std::shared_ptr<Session>> sessions_;
  std::uint64_t counter_ = 0;
};

struct ServiceOptions {
  std::string host = "127.0.0.1";
  int port = 8080;
  std::filesystem::path ui_dir;  ///< served at / when set
  std::chrono::seconds eviction_interval = std::chrono::seconds(60);
};

/// Port from PVSEG_PORT when set, else `fallback`.
int port_from_env(int fallback);

/// HTTP/JSON front end over a SessionManager; all routes live under /v1.
class HttpService {
public:
  HttpService(std::shared_ptr<SessionManager> sessions, ServiceOptions options = {});
  ~HttpService();
  HttpService(const HttpService&) = delete;
  HttpService& operator=(const HttpService&) = delete;

  /// Binds (port 0 picks a free one) and returns the bound port, or -1.
  int bind();
  /// Serves until stop(); call after bind().
  void serve();
  void stop();

private:
  struct Impl;
  std::unique_ptr<Impl> impl_;
};

}  // namespace pvseg
