#pragma once

#include <algorithm>
#include <cstddef>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "setdet/errors.hpp"

namespace setdet {

enum class Tier { kDown, kMid, kUp };

inline std::string_view to_string(Tier t) {
  switch (t) {
    case Tier::kDown: return "down";
    case Tier::kMid: return "mid";
    case Tier::kUp: return "up";
  }
  throw ConfigError("unknown tier");
}

inline Tier parse_tier(std::string_view name) {
  if (name == "down") return Tier::kDown;
  if (name == "mid") return Tier::kMid;
  if (name == "up") return Tier::kUp;
  throw ConfigError("unknown tier '" + std::string(name) + "'");
}

struct BlockSpec {
  Tier tier = Tier::kDown;
  std::size_t spatial_len = 16;
  bool self_attention = true;

  friend bool operator==(const BlockSpec&, const BlockSpec&) = default;
};

struct ToyModelConfig {
  std::size_t vocab_size = 64;
  std::size_t token_dim = 16;
  std::size_t value_dim = 16;
  std::size_t prompt_len = 8;
  std::vector<BlockSpec> blocks = {
      {Tier::kDown, 16, true}, {Tier::kDown, 16, true}, {Tier::kMid, 4, true},
      {Tier::kUp, 16, true},   {Tier::kUp, 16, true},
  };
  std::size_t num_steps = 10;
  std::uint64_t seed = 42;

  /// Spatial length of the shared latent; every block pools from it.
  std::size_t latent_len() const {
    std::size_t n = 0;
    for (const auto& b : blocks) n = std::max(n, b.spatial_len);
    return n;
  }

  void validate() const {
    if (vocab_size < 2) throw ConfigError("vocab_size must be at least 2 (token 0 is the pad)");
    if (token_dim == 0 || value_dim == 0 || prompt_len == 0) {
      throw ConfigError("token_dim, value_dim and prompt_len must be positive");
    }
    if (num_steps < 5) throw ConfigError("num_steps must be at least 5");
    bool seen[3] = {false, false, false};
    for (const auto& b : blocks) {
      if (b.spatial_len < 2) throw ConfigError("every block needs spatial_len >= 2");
      seen[static_cast<int>(b.tier)] = true;
    }
    if (!seen[0] || !seen[1] || !seen[2]) throw ConfigError("block layout needs at least one down, mid and up block");
  }

  friend bool operator==(const ToyModelConfig&, const ToyModelConfig&) = default;
};

inline void to_json(nlohmann::json& j, const BlockSpec& b) {
  j = {{"tier", to_string(b.tier)}, {"spatial_len", b.spatial_len}, {"self_attention", b.self_attention}};
}

inline void from_json(const nlohmann::json& j, BlockSpec& b) {
  b.tier = parse_tier(j.at("tier").get<std::string>());
  b.spatial_len = j.at("spatial_len").get<std::size_t>();
  b.self_attention = j.value("self_attention", true);
}

inline void to_json(nlohmann::json& j, const ToyModelConfig& c) {
  j = {{"vocab_size", c.vocab_size}, {"token_dim", c.token_dim}, {"value_dim", c.value_dim},
       {"prompt_len", c.prompt_len}, {"blocks", c.blocks},         {"num_steps", c.num_steps},
       {"seed", c.seed}};
}

// Missing keys keep their defaults so config files only need overrides.
inline void from_json(const nlohmann::json& j, ToyModelConfig& c) {
  c.vocab_size = j.value("vocab_size", c.vocab_size);
  c.token_dim = j.value("token_dim", c.token_dim);
  c.value_dim = j.value("value_dim", c.value_dim);
  c.prompt_len = j.value("prompt_len", c.prompt_len);
  if (j.contains("blocks")) c.blocks = j.at("blocks").get<std::vector<BlockSpec>>();
  c.num_steps = j.value("num_steps", c.num_steps);
  c.seed = j.value("seed", c.seed);
}

}  // namespace setdet
