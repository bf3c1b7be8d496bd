#include "pvseg/rle.hpp"

#include <string>

#include "pvseg/errors.hpp"

namespace pvseg {

RleMask rle_encode(const BinaryMask& mask) {
  RleMask rle{mask.height(), mask.width(), {}};
  std::uint8_t current = 0;
  std::int64_t run = 0;
  for (auto v : mask.data()) {
    if (v != current) {
      rle.counts.push_back(run);
      current = v;
      run = 0;
    }
    ++run;
  }
  rle.counts.push_back(run);
  return rle;
}

BinaryMask rle_decode(const RleMask& rle) {
  if (rle.height < 0 || rle.width < 0) {
    throw ValidationError("rle dimensions must be non-negative", "h");
  }
  const std::int64_t total = std::int64_t{rle.height} * rle.width;
  std::int64_t sum = 0;
  for (auto c : rle.counts) {
    if (c < 0) throw ValidationError("rle counts must be non-negative", "counts");
    sum += c;
  }
  if (sum != total) {
    throw ValidationError("rle counts sum to " + std::to_string(sum) + ", expected " +
                              std::to_string(total),
                          "counts");
  }
  std::vector<std::uint8_t> data;
  data.reserve(static_cast<std::size_t>(total));
  std::uint8_t value = 0;
  for (auto c : rle.counts) {
    data.insert(data.end(), static_cast<std::size_t>(c), value);
    value ^= 1;
  }
  return BinaryMask(rle.height, rle.width, std::move(data));
}

nlohmann::json to_json(const RleMask& rle) {
  return {{"h", rle.height}, {"w", rle.width}, {"counts", rle.counts}};
}

RleMask rle_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ValidationError("rle must be an object", "rle");
  for (const char* key : {"h", "w", "counts"}) {
    if (!j.contains(key)) throw ValidationError(std::string("rle missing '") + key + "'", key);
  }
  if (!j["h"].is_number_integer()) throw ValidationError("rle 'h' must be an integer", "h");
  if (!j["w"].is_number_integer()) throw ValidationError("rle 'w' must be an integer", "w");
  if (!j["counts"].is_array()) throw ValidationError("rle 'counts' must be a list", "counts");
  RleMask rle;
  rle.height = j["h"].get<int>();
  rle.width = j["w"].get<int>();
  for (const auto& c : j["counts"]) {
    if (!c.is_number_integer()) throw ValidationError("rle counts must be integers", "counts");
    rle.counts.push_back(c.get<std::int64_t>());
  }
  return rle;
}

}  // namespace pvseg
