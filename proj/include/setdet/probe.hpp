#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "setdet/attention.hpp"
#include "setdet/errors.hpp"
#include "setdet/model_config.hpp"

namespace setdet {

/// Which blocks receive the scaling factor during a scaled pass.
enum class ScaleScope {
  kSelectedLayers,  // only the blocks whose responses are captured
  kAllLayers        // every block in the step
};

/// Scaling probe: which factors, steps and layers to perturb and capture.
struct ProbeConfig {
  std::vector<double> lambdas = {0.2, 0.3, 7.0, 10.0, 20.0};
  std::vector<std::size_t> steps = {0, 1, 2, 3, 4};
  // Layer selection: explicit ids win when non-empty, otherwise tiers.
  std::set<Tier> tiers = {Tier::kDown, Tier::kUp};
  std::vector<std::size_t> layer_ids;
  ScalePosition position = ScalePosition::kInV;
  bool scale_self = true;
  ScaleScope scope = ScaleScope::kSelectedLayers;

  static ProbeConfig bidirectional() { return {}; }

  /// One-sided set below 1.
  static ProbeConfig preset_f1() {
    ProbeConfig p;
    p.lambdas = {0.15, 0.2, 0.25, 0.3, 0.35};
    return p;
  }

  /// One-sided set above 1.
  static ProbeConfig preset_f2() {
    ProbeConfig p;
    p.lambdas = {5.0, 7.0, 10.0, 15.0, 20.0};
    return p;
  }

  static ProbeConfig preset(const std::string& name) {
    if (name == "default" || name == "bidirectional") return bidirectional();
    if (name == "F1") return preset_f1();
    if (name == "F2") return preset_f2();
    throw ConfigError("unknown probe preset '" + name + "'");
  }

  /// Block ids selected on a model, in increasing order.
  std::vector<std::size_t> resolve_layers(const ToyModelConfig& model) const {
    std::vector<std::size_t> ids;
    if (!layer_ids.empty()) {
      ids = layer_ids;
      std::sort(ids.begin(), ids.end());
      if (std::adjacent_find(ids.begin(), ids.end()) != ids.end()) throw ConfigError("duplicate layer id in probe");
      if (ids.back() >= model.blocks.size()) {
        throw ConfigError("probe references layer " + std::to_string(ids.back()) + " but the model has " +
                          std::to_string(model.blocks.size()) + " blocks");
      }
    } else {
      for (std::size_t b = 0; b < model.blocks.size(); ++b) {
        if (tiers.count(model.blocks[b].tier)) ids.push_back(b);
      }
    }
    if (ids.empty()) throw ConfigError("layer selector matches no layers");
    return ids;
  }

  /// Checks needed to run a capture: positive factors, existing steps/layers.
  void validate_for_capture(const ToyModelConfig& model) const {
    if (lambdas.empty()) throw ConfigError("probe needs at least one scaling factor");
    for (double l : lambdas) {
      if (!std::isfinite(l) || !(l > 0.0)) throw ConfigError("scaling factors must be positive and finite");
    }
    if (steps.empty()) throw ConfigError("probe needs at least one step");
    for (std::size_t i = 0; i < steps.size(); ++i) {
      if (i > 0 && steps[i] <= steps[i - 1]) throw ConfigError("probe steps must be strictly increasing");
      if (steps[i] >= model.num_steps) {
        throw ConfigError("probe references step " + std::to_string(steps[i]) + " but the model runs " +
                          std::to_string(model.num_steps));
      }
    }
    (void)resolve_layers(model);
  }

  /// Full invariants for feature extraction; the reference factor 1 is implicit.
  void validate(const ToyModelConfig& model) const {
    validate_for_capture(model);
    std::vector<double> sorted = lambdas;
    std::sort(sorted.begin(), sorted.end());
    if (std::adjacent_find(sorted.begin(), sorted.end()) != sorted.end()) {
      throw ConfigError("duplicate scaling factor in probe");
    }
    if (std::find(lambdas.begin(), lambdas.end(), 1.0) != lambdas.end()) {
      throw ConfigError("scaling factor 1 is the reference and cannot be probed");
    }
  }
};

inline void to_json(nlohmann::json& j, const ProbeConfig& p) {
  std::vector<std::string> tiers;
  for (Tier t : p.tiers) tiers.emplace_back(to_string(t));
  j = {{"lambdas", p.lambdas},
       {"steps", p.steps},
       {"tiers", tiers},
       {"layer_ids", p.layer_ids},
       {"position", to_string(p.position)},
       {"scale_self", p.scale_self},
       {"scope", p.scope == ScaleScope::kAllLayers ? "all" : "selected"}};
}

inline void from_json(const nlohmann::json& j, ProbeConfig& p) {
  if (j.contains("preset")) p = ProbeConfig::preset(j.at("preset").get<std::string>());
  p.lambdas = j.value("lambdas", p.lambdas);
  p.steps = j.value("steps", p.steps);
  if (j.contains("tiers")) {
    p.tiers.clear();
    for (const auto& t : j.at("tiers")) p.tiers.insert(parse_tier(t.get<std::string>()));
  }
  p.layer_ids = j.value("layer_ids", p.layer_ids);
  if (j.contains("position")) p.position = parse_scale_position(j.at("position").get<std::string>());
  p.scale_self = j.value("scale_self", p.scale_self);
  if (j.contains("scope")) {
    const auto scope = j.at("scope").get<std::string>();
    if (scope == "all") {
      p.scope = ScaleScope::kAllLayers;
    } else if (scope == "selected") {
      p.scope = ScaleScope::kSelectedLayers;
    } else {
      throw ConfigError("unknown probe scope '" + scope + "'");
    }
  }
}

}  // namespace setdet
