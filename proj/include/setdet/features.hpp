#pragma once

// Response-shift features: delta = MSE(scaled response, reference response)
// for every (layer, step, lambda), flattened layer-major, then step, then
// lambda. The layer-major order keeps each layer's shifts contiguous so the
// encoder can read them as one token per layer.

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <thread>
#include <vector>

#include <json.hpp>

#include "setdet/attention.hpp"
#include "setdet/errors.hpp"
#include "setdet/probe.hpp"
#include "setdet/random.hpp"
#include "setdet/toy_model.hpp"

namespace setdet {

/// Mean of squared differences over every entry (one head, so no head axis).
inline double response_shift(const AttentionResponse& scaled, const AttentionResponse& reference) {
  if (scaled.position != reference.position) throw ShapeError("responses captured at different positions");
  const auto& a = scaled.entries;
  const auto& b = reference.entries;
  if (a.rows() != b.rows() || a.cols() != b.cols()) {
    throw ShapeError("response shapes differ: " + a.shape_str() + " vs " + b.shape_str());
  }
  if (a.empty()) throw ShapeError("empty response");
  double acc = 0.0;
  auto fa = a.flat();
  auto fb = b.flat();
  for (std::size_t i = 0; i < fa.size(); ++i) {
    const double diff = fa[i] - fb[i];
    acc += diff * diff;
  }
  return acc / static_cast<double>(fa.size());
}

struct LayoutIndex {
  std::size_t layer_slot = 0;  // position within FeatureLayout::layers
  std::size_t step_slot = 0;
  std::size_t lambda_slot = 0;
  friend bool operator==(const LayoutIndex&, const LayoutIndex&) = default;
};

/// Bijection between (layer, step, lambda) slots and flat feature indices.
struct FeatureLayout {
  std::vector<std::size_t> layers;         // block ids
  std::vector<std::size_t> spatial_lens;   // per layer
  std::vector<std::size_t> element_counts; // N per layer: n*d_v (with V) or n*m (without)
  std::vector<std::size_t> steps;
  std::vector<double> lambdas;
  ScalePosition position = ScalePosition::kInV;
  bool scale_self = true;
  ScaleScope scope = ScaleScope::kSelectedLayers;

  std::size_t token_width() const { return steps.size() * lambdas.size(); }
  std::size_t size() const { return layers.size() * token_width(); }

  std::size_t flat_index(const LayoutIndex& ix) const {
    if (ix.layer_slot >= layers.size() || ix.step_slot >= steps.size() || ix.lambda_slot >= lambdas.size()) {
      throw ShapeError("layout slot out of range");
    }
    return (ix.layer_slot * steps.size() + ix.step_slot) * lambdas.size() + ix.lambda_slot;
  }

  LayoutIndex slots(std::size_t flat) const {
    if (flat >= size()) throw ShapeError("flat feature index out of range");
    return {flat / token_width(), (flat / lambdas.size()) % steps.size(), flat % lambdas.size()};
  }

  std::string checksum() const {
    Fnv1a h;
    h.update("layout-v1");
    h.update_u64(layers.size());
    for (std::size_t i = 0; i < layers.size(); ++i) {
      h.update_u64(layers[i]).update_u64(spatial_lens[i]).update_u64(element_counts[i]);
    }
    h.update_u64(steps.size());
    for (std::size_t s : steps) h.update_u64(s);
    h.update_u64(lambdas.size());
    for (double l : lambdas) h.update_u64(std::bit_cast<std::uint64_t>(l));
    h.update(to_string(position));
    h.update_u64(scale_self ? 1 : 0).update_u64(scope == ScaleScope::kAllLayers ? 1 : 0);
    return hex64(h.digest());
  }

  friend bool operator==(const FeatureLayout&, const FeatureLayout&) = default;
};

inline void to_json(nlohmann::json& j, const FeatureLayout& l) {
  j = {{"layers", l.layers},
       {"spatial_lens", l.spatial_lens},
       {"element_counts", l.element_counts},
       {"steps", l.steps},
       {"lambdas", l.lambdas},
       {"position", to_string(l.position)},
       {"scale_self", l.scale_self},
       {"scope", l.scope == ScaleScope::kAllLayers ? "all" : "selected"},
       {"order", "layer,step,lambda"}};
}

inline void from_json(const nlohmann::json& j, FeatureLayout& l) {
  l.layers = j.at("layers").get<std::vector<std::size_t>>();
  l.spatial_lens = j.at("spatial_lens").get<std::vector<std::size_t>>();
  l.element_counts = j.at("element_counts").get<std::vector<std::size_t>>();
  l.steps = j.at("steps").get<std::vector<std::size_t>>();
  l.lambdas = j.at("lambdas").get<std::vector<double>>();
  l.position = parse_scale_position(j.at("position").get<std::string>());
  l.scale_self = j.at("scale_self").get<bool>();
  l.scope = j.at("scope").get<std::string>() == "all" ? ScaleScope::kAllLayers : ScaleScope::kSelectedLayers;
  if (l.spatial_lens.size() != l.layers.size() || l.element_counts.size() != l.layers.size()) {
    throw FormatError("layout per-layer arrays disagree in length");
  }
}

/// Layout for any capturable probe (factor 1 allowed); used directly only by
/// tests and diagnostics.
inline FeatureLayout capture_layout(const ProbeConfig& probe, const ToyModelConfig& model) {
  probe.validate_for_capture(model);
  FeatureLayout layout;
  layout.layers = probe.resolve_layers(model);
  for (std::size_t b : layout.layers) {
    const std::size_t n = model.blocks[b].spatial_len;
    layout.spatial_lens.push_back(n);
    layout.element_counts.push_back(n * (uses_values(probe.position) ? model.value_dim : model.prompt_len));
  }
  layout.steps = probe.steps;
  layout.lambdas = probe.lambdas;
  layout.position = probe.position;
  layout.scale_self = probe.scale_self;
  layout.scope = probe.scope;
  return layout;
}

inline FeatureLayout feature_layout(const ProbeConfig& probe, const ToyModel& model) {
  probe.validate(model.config);
  return capture_layout(probe, model.config);
}

struct ResponseShiftVector {
  std::vector<double> values;
  FeatureLayout layout;
};

/// Fills a layout from a capture taken with the same probe.
inline ResponseShiftVector shifts_from_capture(const ResponseCapture& capture, const FeatureLayout& layout) {
  ResponseShiftVector f{std::vector<double>(layout.size()), layout};
  for (std::size_t li = 0; li < layout.layers.size(); ++li) {
    for (std::size_t si = 0; si < layout.steps.size(); ++si) {
      const CaptureEntry& entry = capture.at(layout.steps[si], layout.layers[li]);
      if (entry.scaled.size() != layout.lambdas.size()) throw ShapeError("capture does not match the layout");
      for (std::size_t ki = 0; ki < layout.lambdas.size(); ++ki) {
        f.values[layout.flat_index({li, si, ki})] = response_shift(entry.scaled[ki], entry.reference);
      }
    }
  }
  return f;
}

inline ResponseShiftVector extract_feature_vector(const ToyModel& model, const Prompt& prompt,
                                                  const ProbeConfig& probe) {
  const FeatureLayout layout = feature_layout(probe, model);
  return shifts_from_capture(denoise_with_capture(model, prompt, probe), layout);
}

/// Extracts features for many prompts, splitting the work across threads.
/// Output order follows input order and does not depend on thread count.
inline std::vector<ResponseShiftVector> extract_feature_vectors(const ToyModel& model, const std::vector<Prompt>& prompts,
                                                                const ProbeConfig& probe, unsigned threads = 0) {
  const FeatureLayout layout = feature_layout(probe, model);
  std::vector<ResponseShiftVector> out(prompts.size());
  if (threads == 0) threads = std::max(1u, std::thread::hardware_concurrency());
  threads = static_cast<unsigned>(std::min<std::size_t>(threads, std::max<std::size_t>(prompts.size(), 1)));
  auto work = [&](std::size_t begin, std::size_t stride) {
    for (std::size_t i = begin; i < prompts.size(); i += stride) {
      out[i] = shifts_from_capture(denoise_with_capture(model, prompts[i], probe), layout);
    }
  };
  if (threads <= 1) {
    work(0, 1);
    return out;
  }
  std::vector<std::jthread> pool;
  std::vector<std::exception_ptr> errors(threads);
  for (unsigned w = 0; w < threads; ++w) {
    pool.emplace_back([&, w] {
      try {
        work(w, threads);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  pool.clear();
  for (auto& e : errors) {
    if (e) std::rethrow_exception(e);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Feature files: one JSON header line, then one JSON record per prompt.

struct FeatureRecord {
  Prompt prompt;
  std::optional<int> label;
  std::vector<double> values;
  friend bool operator==(const FeatureRecord&, const FeatureRecord&) = default;
};

struct FeatureSet {
  FeatureLayout layout;
  std::string fingerprint;  // producing model + layout; downstream stages compare it
  std::string run;          // fingerprint of the run config, empty outside a full run
  std::vector<FeatureRecord> records;

  ResponseShiftVector vector_at(std::size_t i) const { return {records.at(i).values, layout}; }
};

inline std::string features_fingerprint(const ToyModel& model, const FeatureLayout& layout) {
  return hex64(Fnv1a().update(model_fingerprint(model)).update(layout.checksum()).digest());
}

namespace detail {

inline std::string format_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace detail

inline std::string serialize_features(const FeatureSet& set) {
  const std::string checksum = set.layout.checksum();
  std::ostringstream out;
  nlohmann::json header = {{"kind", "set-features"},
                           {"format_version", 1},
                           {"layout", set.layout},
                           {"layout_checksum", checksum},
                           {"fingerprint", set.fingerprint},
                           {"run", set.run},
                           {"count", set.records.size()}};
  out << header.dump() << '\n';
  for (const auto& r : set.records) {
    if (r.values.size() != set.layout.size()) throw ShapeError("feature record length does not match its layout");
    out << "{\"tokens\":" << nlohmann::json(r.prompt.token_ids).dump() << ",\"label\":";
    if (r.label) {
      out << *r.label;
    } else {
      out << "null";
    }
    out << ",\"layout_checksum\":\"" << checksum << "\",\"values\":[";
    for (std::size_t i = 0; i < r.values.size(); ++i) {
      if (i) out << ',';
      if (!std::isfinite(r.values[i])) throw InvalidInputError("non-finite feature value");
      out << detail::format_double(r.values[i]);
    }
    out << "]}\n";
  }
  return out.str();
}

inline FeatureSet deserialize_features(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line)) throw FormatError("empty feature file");
  FeatureSet set;
  try {
    const auto header = nlohmann::json::parse(line);
    if (header.value("kind", "") != "set-features") throw FormatError("not a feature file");
    set.layout = header.at("layout").get<FeatureLayout>();
    set.fingerprint = header.at("fingerprint").get<std::string>();
    set.run = header.value("run", "");
    if (header.at("layout_checksum").get<std::string>() != set.layout.checksum()) {
      throw FormatError("feature file layout checksum does not match its layout");
    }
    const std::string checksum = set.layout.checksum();
    while (std::getline(in, line)) {
      if (line.empty()) continue;
      const auto j = nlohmann::json::parse(line);
      if (j.at("layout_checksum").get<std::string>() != checksum) {
        throw IncompatibleError("feature record layout checksum differs from the file layout");
      }
      FeatureRecord r;
      r.prompt.token_ids = j.at("tokens").get<std::vector<std::size_t>>();
      if (!j.at("label").is_null()) r.label = j.at("label").get<int>();
      r.values = j.at("values").get<std::vector<double>>();
      if (r.values.size() != set.layout.size()) throw FormatError("feature record has the wrong length");
      set.records.push_back(std::move(r));
    }
    if (header.at("count").get<std::size_t>() != set.records.size()) throw FormatError("feature file truncated");
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("feature file: ") + e.what());
  }
  return set;
}

inline void save_features(const FeatureSet& set, const std::string& path) { write_file(path, serialize_features(set)); }
inline FeatureSet load_features(const std::string& path) { return deserialize_features(read_file(path)); }

}  // namespace setdet
