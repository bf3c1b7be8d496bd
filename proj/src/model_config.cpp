#include "pvseg/model_config.hpp"

#include "pvseg/errors.hpp"

namespace pvseg {

void SelectionConfig::validate() const {
  if (global_count < 0 || local_count < 0) {
    throw ConfigError("selection counts must be non-negative", "selection");
  }
  if (local_window < 0) throw ConfigError("local_window must be non-negative", "local_window");
  if (local_window < local_count) {
    throw ConfigError("local_window must be at least the local count", "local_window");
  }
}

void EncoderConfig::validate() const {
  if (channels.size() != strides.size() || channels.empty()) {
    throw ConfigError("encoder needs one channel width per stride", "encoder");
  }
  for (std::size_t i = 1; i < channels.size(); ++i) {
    if (channels[i] <= channels[i - 1]) {
      throw ConfigError("encoder channels must strictly increase", "encoder.channels");
    }
    const auto ratio = strides[i] / strides[i - 1];
    if (strides[i] % strides[i - 1] != 0 || (ratio != 1 && ratio != 2)) {
      throw ConfigError("consecutive encoder strides must differ by a factor of 1 or 2",
                        "encoder.strides");
    }
  }
  if (strides.front() < 1) throw ConfigError("stem stride must be positive", "encoder.strides");
  if (blocks_per_stage < 1) throw ConfigError("blocks_per_stage must be >= 1", "encoder");
}

void ModelConfig::validate() const {
  encoder.validate();
  selection.validate();
  if (temporal_window < 1) throw ConfigError("temporal_window must be >= 1", "temporal_window");
  if (memory_capacity < 1) throw ConfigError("memory_capacity must be >= 1", "memory_capacity");
  if (memory_channels() % memory_heads != 0 || (memory_channels() / memory_heads) % 4 != 0) {
    throw ConfigError("memory head dim must be a multiple of 4", "memory_heads");
  }
  if (mpg_tokens < 0) throw ConfigError("mpg_tokens must be >= 0", "mpg_tokens");
  if (decoder_dim % 16 != 0) throw ConfigError("decoder_dim must be a multiple of 16", "decoder_dim");
  if (num_multimask < 1) throw ConfigError("num_multimask must be >= 1", "num_multimask");
}

ModelConfig desk_model_config() {
  ModelConfig c;
  c.encoder.channels = {32, 48, 64, 96};
  c.encoder.strides = {4, 8, 8, 8};
  c.memory_mlp_dim = 256;
  c.decoder_mlp_dim = 256;
  return c;
}

namespace {

const char* mode_name(SelectionMode m) {
  return m == SelectionMode::kTopK ? "top_k" : "stochastic";
}

SelectionMode mode_from(const std::string& s) {
  if (s == "top_k") return SelectionMode::kTopK;
  if (s == "stochastic") return SelectionMode::kStochastic;
  throw ConfigError("unknown selection mode '" + s + "'", "selection.mode");
}

}  // namespace

void to_json(nlohmann::json& j, const SelectionConfig& c) {
  j = {{"global_count", c.global_count},
       {"local_count", c.local_count},
       {"local_window", c.local_window},
       {"mode", mode_name(c.mode)}};
}

void from_json(const nlohmann::json& j, SelectionConfig& c) {
  c.global_count = j.value("global_count", c.global_count);
  c.local_count = j.value("local_count", c.local_count);
  c.local_window = j.value("local_window", c.local_window);
  if (j.contains("mode")) c.mode = mode_from(j["mode"].get<std::string>());
}

void to_json(nlohmann::json& j, const EncoderConfig& c) {
  j = {{"channels", c.channels}, {"strides", c.strides}, {"blocks_per_stage", c.blocks_per_stage}};
}

void from_json(const nlohmann::json& j, EncoderConfig& c) {
  c.channels = j.value("channels", c.channels);
  c.strides = j.value("strides", c.strides);
  c.blocks_per_stage = j.value("blocks_per_stage", c.blocks_per_stage);
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = {{"encoder", c.encoder},
       {"temporal_window", c.temporal_window},
       {"memory_capacity", c.memory_capacity},
       {"memory_blocks", c.memory_blocks},
       {"memory_heads", c.memory_heads},
       {"memory_mlp_dim", c.memory_mlp_dim},
       {"max_temporal_offset", c.max_temporal_offset},
       {"rope_theta", c.rope_theta},
       {"mpg_tokens", c.mpg_tokens},
       {"mpg_masked", c.mpg_masked},
       {"decoder_dim", c.decoder_dim},
       {"decoder_depth", c.decoder_depth},
       {"decoder_heads", c.decoder_heads},
       {"decoder_mlp_dim", c.decoder_mlp_dim},
       {"num_multimask", c.num_multimask},
       {"selection", c.selection}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  if (j.contains("encoder")) c.encoder = j["encoder"].get<EncoderConfig>();
  c.temporal_window = j.value("temporal_window", c.temporal_window);
  c.memory_capacity = j.value("memory_capacity", c.memory_capacity);
  c.memory_blocks = j.value("memory_blocks", c.memory_blocks);
  c.memory_heads = j.value("memory_heads", c.memory_heads);
  c.memory_mlp_dim = j.value("memory_mlp_dim", c.memory_mlp_dim);
  c.max_temporal_offset = j.value("max_temporal_offset", c.max_temporal_offset);
  c.rope_theta = j.value("rope_theta", c.rope_theta);
  c.mpg_tokens = j.value("mpg_tokens", c.mpg_tokens);
  c.mpg_masked = j.value("mpg_masked", c.mpg_masked);
  c.decoder_dim = j.value("decoder_dim", c.decoder_dim);
  c.decoder_depth = j.value("decoder_depth", c.decoder_depth);
  c.decoder_heads = j.value("decoder_heads", c.decoder_heads);
  c.decoder_mlp_dim = j.value("decoder_mlp_dim", c.decoder_mlp_dim);
  c.num_multimask = j.value("num_multimask", c.num_multimask);
  if (j.contains("selection")) c.selection = j["selection"].get<SelectionConfig>();
}

}  // namespace pvseg
