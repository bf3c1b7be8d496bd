#include "pvseg/prompt.hpp"

#include "pvseg/errors.hpp"
#include "pvseg/rle.hpp"

namespace pvseg {

Prompt Prompt::make_click(int frame, Pixel p, Polarity polarity) {
  Prompt out;
  out.kind = PromptKind::kClick;
  out.frame_index = frame;
  out.click = p;
  out.polarity = polarity;
  return out;
}

Prompt Prompt::make_box(int frame, Box box) {
  Prompt out;
  out.kind = PromptKind::kBox;
  out.frame_index = frame;
  out.box = box;
  return out;
}

Prompt Prompt::make_mask(int frame, BinaryMask mask) {
  Prompt out;
  out.kind = PromptKind::kMask;
  out.frame_index = frame;
  out.mask = std::move(mask);
  return out;
}

void Prompt::validate(int height, int width) const {
  auto check = [&](int v, int limit, const char* field) {
    if (v < 0 || v >= limit) {
      throw ValidationError(std::string("coordinate ") + field + "=" + std::to_string(v) +
                                " is outside [0, " + std::to_string(limit) + ")",
                            std::string("payload.") + field);
    }
  };
  if (frame_index < 0) throw ValidationError("frame must be >= 0", "frame");
  switch (kind) {
    case PromptKind::kClick:
      check(click.x, width, "x");
      check(click.y, height, "y");
      break;
    case PromptKind::kBox:
      check(box.x0, width, "x0");
      check(box.x1, width, "x1");
      check(box.y0, height, "y0");
      check(box.y1, height, "y1");
      if (box.x0 > box.x1) throw ValidationError("box needs x0 <= x1", "payload.x1");
      if (box.y0 > box.y1) throw ValidationError("box needs y0 <= y1", "payload.y1");
      break;
    case PromptKind::kMask:
      if (mask.height() != height || mask.width() != width) {
        throw ValidationError("mask prompt must be " + std::to_string(height) + "x" +
                                  std::to_string(width),
                              "payload.rle");
      }
      break;
  }
}

std::string to_string(PromptKind kind) {
  switch (kind) {
    case PromptKind::kClick:
      return "click";
    case PromptKind::kBox:
      return "box";
    case PromptKind::kMask:
      return "mask";
  }
  return "click";
}

std::string to_string(Polarity polarity) {
  return polarity == Polarity::kPositive ? "positive" : "negative";
}

nlohmann::json to_json(const Prompt& prompt) {
  nlohmann::json payload;
  switch (prompt.kind) {
    case PromptKind::kClick:
      payload = {{"x", prompt.click.x}, {"y", prompt.click.y},
                 {"polarity", to_string(prompt.polarity)}};
      break;
    case PromptKind::kBox:
      payload = {{"x0", prompt.box.x0}, {"y0", prompt.box.y0},
                 {"x1", prompt.box.x1}, {"y1", prompt.box.y1}};
      break;
    case PromptKind::kMask:
      payload = {{"rle", to_json(rle_encode(prompt.mask))}};
      break;
  }
  return {{"frame", prompt.frame_index}, {"kind", to_string(prompt.kind)}, {"payload", payload}};
}

namespace {

int require_int(const nlohmann::json& obj, const char* key, const std::string& prefix) {
  const std::string field = prefix + key;
  if (!obj.contains(key)) throw ValidationError("missing field '" + field + "'", field);
  if (!obj[key].is_number_integer()) {
    throw ValidationError("field '" + field + "' must be an integer", field);
  }
  return obj[key].get<int>();
}

}  // namespace

Prompt prompt_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("prompt must be a JSON object", "body");
  Prompt p;
  p.frame_index = require_int(j, "frame", "");
  if (!j.contains("kind") || !j["kind"].is_string()) {
    throw ValidationError("field 'kind' must be one of click, box, mask", "kind");
  }
  if (!j.contains("payload") || !j["payload"].is_object()) {
    throw ValidationError("field 'payload' must be an object", "payload");
  }
  const auto kind = j["kind"].get<std::string>();
  const auto& payload = j["payload"];
  if (kind == "click") {
    p.kind = PromptKind::kClick;
    p.click = {require_int(payload, "x", "payload."), require_int(payload, "y", "payload.")};
    const auto pol = payload.value("polarity", std::string("positive"));
    if (pol == "positive") {
      p.polarity = Polarity::kPositive;
    } else if (pol == "negative") {
      p.polarity = Polarity::kNegative;
    } else {
      throw ValidationError("field 'payload.polarity' must be positive or negative",
                            "payload.polarity");
    }
  } else if (kind == "box") {
    p.kind = PromptKind::kBox;
    p.box = {require_int(payload, "x0", "payload."), require_int(payload, "y0", "payload."),
             require_int(payload, "x1", "payload."), require_int(payload, "y1", "payload.")};
  } else if (kind == "mask") {
    p.kind = PromptKind::kMask;
    if (!payload.contains("rle")) throw ValidationError("missing field 'payload.rle'", "payload.rle");
    try {
      p.mask = rle_decode(rle_from_json(payload["rle"]));
    } catch (const ValidationError& e) {
      throw ValidationError(e.what(), "payload.rle." + e.field());
    }
  } else {
    throw ValidationError("field 'kind' must be one of click, box, mask", "kind");
  }
  return p;
}

}  // namespace pvseg
