#pragma once

// Miniature text-conditioned denoiser. A shared latent of latent_len() rows
// is refined over num_steps steps; every step runs the blocks in order. A
// block pools the latent to its own spatial length, adds a time embedding,
// layer-normalizes, optionally applies self-attention, then cross-attends to
// the prompt embedding and adds the mixed cross-attention output back to the
// latent (residual update).

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "setdet/attention.hpp"
#include "setdet/container.hpp"
#include "setdet/errors.hpp"
#include "setdet/matrix.hpp"
#include "setdet/model_config.hpp"
#include "setdet/probe.hpp"
#include "setdet/random.hpp"

namespace setdet {

inline constexpr std::size_t kPadToken = 0;
inline constexpr double kLatentStep = 0.5;
inline constexpr double kLayerNormEps = 1e-5;

struct Prompt {
  std::vector<std::size_t> token_ids;

  bool contains(std::size_t token) const {
    return std::find(token_ids.begin(), token_ids.end(), token) != token_ids.end();
  }
  std::size_t content_len() const {
    return static_cast<std::size_t>(
        std::count_if(token_ids.begin(), token_ids.end(), [](std::size_t t) { return t != kPadToken; }));
  }
  friend bool operator==(const Prompt&, const Prompt&) = default;
};

enum class BackdoorKind { kEmbeddingTrigger, kProjectionEdit };

inline std::string_view to_string(BackdoorKind k) {
  return k == BackdoorKind::kEmbeddingTrigger ? "embedding_trigger" : "projection_edit";
}

inline BackdoorKind parse_backdoor_kind(std::string_view name) {
  if (name == "embedding_trigger") return BackdoorKind::kEmbeddingTrigger;
  if (name == "projection_edit") return BackdoorKind::kProjectionEdit;
  throw ConfigError("unknown backdoor kind '" + std::string(name) + "'");
}

/// A toy backdoor. For embedding_trigger, `token` is the trigger token; for
/// projection_edit it is the source token whose key/value projections are
/// steered toward `direction` (an embedding-space vector; empty means a seeded
/// random unit vector).
struct BackdoorSpec {
  BackdoorKind kind = BackdoorKind::kProjectionEdit;
  std::size_t token = 7;
  std::vector<double> direction;
  double strength = 4.0;
  std::uint64_t seed = 0;

  void validate(const ToyModelConfig& config) const {
    if (token == kPadToken) throw ConfigError("trigger token cannot be the pad token");
    if (token >= config.vocab_size) throw ConfigError("trigger token outside the vocabulary");
    if (!std::isfinite(strength) || !(strength > 0.0)) throw ConfigError("backdoor strength must be positive");
    if (!direction.empty() && direction.size() != config.token_dim) {
      throw ConfigError("projection_edit direction must have token_dim entries");
    }
  }

  friend bool operator==(const BackdoorSpec&, const BackdoorSpec&) = default;
};

inline void to_json(nlohmann::json& j, const BackdoorSpec& s) {
  j = {{"kind", to_string(s.kind)},
       {"token", s.token},
       {"direction", s.direction},
       {"strength", s.strength},
       {"seed", s.seed}};
}

inline void from_json(const nlohmann::json& j, BackdoorSpec& s) {
  if (j.contains("kind")) s.kind = parse_backdoor_kind(j.at("kind").get<std::string>());
  s.token = j.value("token", s.token);
  s.direction = j.value("direction", s.direction);
  s.strength = j.value("strength", s.strength);
  s.seed = j.value("seed", s.seed);
}

struct BlockParams {
  Matrix w_q, w_k, w_v;  // cross-attention projections (d x d, d x d, d x d_v)
  Matrix w_o;            // output mixing, d_v x d
  Matrix self_q, self_k, self_v;  // d x d each, empty without self-attention

  friend bool operator==(const BlockParams&, const BlockParams&) = default;
};

struct ToyModel {
  ToyModelConfig config;
  Matrix embedding;  // vocab_size x d
  std::vector<BlockParams> blocks;
  // Applied edits with their resolved directions; empty iff the model is clean.
  std::vector<BackdoorSpec> provenance;

  bool is_clean() const noexcept { return provenance.empty(); }
  friend bool operator==(const ToyModel&, const ToyModel&) = default;
};

namespace detail {

inline Matrix sinusoid_rows(std::size_t rows, std::size_t dim, std::size_t offset, double amplitude) {
  Matrix out(rows, dim);
  for (std::size_t r = 0; r < rows; ++r) {
    const double pos = static_cast<double>(r + offset);
    for (std::size_t c = 0; c < dim; ++c) {
      const double rate = std::pow(10000.0, -static_cast<double>(c - c % 2) / static_cast<double>(dim));
      out(r, c) = amplitude * (c % 2 == 0 ? std::sin(pos * rate) : std::cos(pos * rate));
    }
  }
  return out;
}

inline Matrix layer_norm_rows(Matrix h) {
  const double width = static_cast<double>(h.cols());
  for (std::size_t i = 0; i < h.rows(); ++i) {
    auto r = h.row(i);
    double mean = 0.0;
    for (double x : r) mean += x;
    mean /= width;
    double var = 0.0;
    for (double x : r) var += (x - mean) * (x - mean);
    var /= width;
    const double inv = 1.0 / std::sqrt(var + kLayerNormEps);
    for (double& x : r) x = (x - mean) * inv;
  }
  return h;
}

// Latent row range [begin, end) that pooled row i of a length-n block covers.
inline std::pair<std::size_t, std::size_t> pool_segment(std::size_t i, std::size_t n, std::size_t latent_len) {
  return {i * latent_len / n, (i + 1) * latent_len / n};
}

inline Matrix pool_latent(const Matrix& latent, std::size_t n) {
  Matrix out(n, latent.cols());
  for (std::size_t i = 0; i < n; ++i) {
    const auto [begin, end] = pool_segment(i, n, latent.rows());
    const double inv = 1.0 / static_cast<double>(end - begin);
    for (std::size_t r = begin; r < end; ++r)
      for (std::size_t c = 0; c < latent.cols(); ++c) out(i, c) += latent(r, c) * inv;
  }
  return out;
}

inline void add_upsampled(Matrix& latent, const Matrix& update, double step) {
  const std::size_t n = update.rows();
  for (std::size_t i = 0; i < n; ++i) {
    const auto [begin, end] = pool_segment(i, n, latent.rows());
    for (std::size_t r = begin; r < end; ++r)
      for (std::size_t c = 0; c < latent.cols(); ++c) latent(r, c) += step * update(i, c);
  }
}

}  // namespace detail

/// Fixed sinusoidal position vectors added to token embeddings (m x d).
inline Matrix position_table(const ToyModelConfig& config) {
  return detail::sinusoid_rows(config.prompt_len, config.token_dim, 0,
                               1.0 / std::sqrt(static_cast<double>(config.token_dim)));
}

/// Time embedding of step t (1 x d).
inline Matrix time_embedding(const ToyModelConfig& config, std::size_t step) {
  return detail::sinusoid_rows(1, config.token_dim, step, 1.0);
}

/// Seeded starting latent; depends only on the config so paired clean and
/// planted runs share it.
inline Matrix initial_latent(const ToyModelConfig& config) {
  Rng rng(mix_seed(config.seed, 1000));
  return rng.gaussian_matrix(config.latent_len(), config.token_dim, 1.0);
}

inline ToyModel build_toy_model(const ToyModelConfig& config) {
  config.validate();
  const std::size_t d = config.token_dim;
  const std::size_t dv = config.value_dim;
  const double stddev = 1.0 / std::sqrt(static_cast<double>(d));
  ToyModel model;
  model.config = config;
  {
    Rng rng(mix_seed(config.seed, 0));
    model.embedding = rng.gaussian_matrix(config.vocab_size, d, stddev);
  }
  for (std::size_t b = 0; b < config.blocks.size(); ++b) {
    Rng rng(mix_seed(config.seed, 1 + b));
    BlockParams p;
    p.w_q = rng.gaussian_matrix(d, d, stddev);
    p.w_k = rng.gaussian_matrix(d, d, stddev);
    p.w_v = rng.gaussian_matrix(d, dv, stddev);
    p.w_o = rng.gaussian_matrix(dv, d, stddev);
    if (config.blocks[b].self_attention) {
      p.self_q = rng.gaussian_matrix(d, d, stddev);
      p.self_k = rng.gaussian_matrix(d, d, stddev);
      p.self_v = rng.gaussian_matrix(d, d, stddev);
    }
    model.blocks.push_back(std::move(p));
  }
  return model;
}

inline void validate_prompt(const ToyModelConfig& config, const Prompt& prompt) {
  if (prompt.token_ids.size() != config.prompt_len) {
    throw InvalidInputError("prompt has " + std::to_string(prompt.token_ids.size()) + " tokens, expected " +
                            std::to_string(config.prompt_len));
  }
  for (std::size_t t : prompt.token_ids) {
    if (t >= config.vocab_size) throw InvalidInputError("token id " + std::to_string(t) + " outside the vocabulary");
  }
}

/// E(x): embedding rows plus position vectors (m x d).
inline Matrix encode_prompt(const ToyModel& model, const Prompt& prompt) {
  validate_prompt(model.config, prompt);
  Matrix out = position_table(model.config);
  for (std::size_t i = 0; i < prompt.token_ids.size(); ++i) {
    auto src = model.embedding.row(prompt.token_ids[i]);
    auto dst = out.row(i);
    for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += src[c];
  }
  return out;
}

// ---------------------------------------------------------------------------
// Denoising with response capture

struct CaptureEntry {
  std::size_t step = 0;
  std::size_t layer = 0;
  Tier tier = Tier::kDown;
  std::size_t spatial_len = 0;
  ScoreMatrix scores;  // reference scores at (step, layer)
  ValueMatrix values;
  AttentionResponse reference;
  std::vector<AttentionResponse> scaled;  // parallel to ResponseCapture::lambdas
};

struct ResponseCapture {
  std::vector<double> lambdas;
  std::vector<CaptureEntry> entries;
  Matrix final_latent;

  const CaptureEntry& at(std::size_t step, std::size_t layer) const {
    for (const auto& e : entries) {
      if (e.step == step && e.layer == layer) return e;
    }
    throw ConfigError("no capture for step " + std::to_string(step) + ", layer " + std::to_string(layer));
  }
};

namespace detail {

struct PromptContext {
  std::vector<Matrix> keys;
  std::vector<ValueMatrix> values;
};

inline PromptContext make_context(const ToyModel& model, const Prompt& prompt) {
  const Matrix text = encode_prompt(model, prompt);
  PromptContext ctx;
  for (const auto& block : model.blocks) {
    ctx.keys.push_back(matmul(text, block.w_k));
    ctx.values.push_back({matmul(text, block.w_v)});
  }
  return ctx;
}

struct BlockScales {
  double cross = 1.0;
  double self = 1.0;
};

struct BlockTrace {
  Matrix queries;
  ScoreMatrix scores;
  AttentionResponse response;
};

inline void run_block(const ToyModel& model, const PromptContext& ctx, std::size_t b, std::size_t step,
                      Matrix& latent, BlockScales scales, ScalePosition position, BlockTrace* trace) {
  const auto& spec = model.config.blocks[b];
  const auto& p = model.blocks[b];
  const std::size_t d = model.config.token_dim;
  Matrix h = pool_latent(latent, spec.spatial_len);
  const Matrix tau = time_embedding(model.config, step);
  for (std::size_t i = 0; i < h.rows(); ++i)
    for (std::size_t c = 0; c < d; ++c) h(i, c) += tau(0, c);
  h = layer_norm_rows(std::move(h));
  if (spec.self_attention) {
    const ScoreMatrix self_scores = attention_scores(matmul(h, p.self_q), matmul(h, p.self_k), d);
    const Matrix self_out = matmul(scaled_softmax(self_scores.entries, scales.self), matmul(h, p.self_v));
    h = add(h, self_out);
  }
  Matrix queries = matmul(h, p.w_q);
  ScoreMatrix scores = attention_scores(queries, ctx.keys[b], d);
  Matrix attn = scaled_attention(scores, scales.cross, position);
  Matrix mixed = matmul(attn, ctx.values[b].entries);
  add_upsampled(latent, matmul(mixed, p.w_o), kLatentStep);
  if (trace != nullptr) {
    trace->response = {uses_values(position) ? std::move(mixed) : std::move(attn), scales.cross, position};
    trace->scores = std::move(scores);
    trace->queries = std::move(queries);
  }
}

}  // namespace detail

/// Runs the full denoising loop. Without a probe, the reference response of
/// every (step, layer) is captured. With a probe, references are captured at
/// the probed (step, layer) pairs and, for each factor, the step is re-run from
/// the same incoming latent with the factor applied; the reference trajectory
/// is never perturbed.
inline ResponseCapture denoise_with_capture(const ToyModel& model, const Prompt& prompt,
                                            const std::optional<ProbeConfig>& probe = std::nullopt) {
  const auto& cfg = model.config;
  const std::size_t num_blocks = cfg.blocks.size();
  std::vector<bool> layer_selected(num_blocks, probe ? false : true);
  std::vector<bool> step_selected(cfg.num_steps, probe ? false : true);
  ScalePosition position = ScalePosition::kInV;
  if (probe) {
    probe->validate_for_capture(cfg);
    for (std::size_t b : probe->resolve_layers(cfg)) layer_selected[b] = true;
    for (std::size_t t : probe->steps) step_selected[t] = true;
    position = probe->position;
  }
  const detail::PromptContext ctx = detail::make_context(model, prompt);

  ResponseCapture capture;
  if (probe) capture.lambdas = probe->lambdas;
  Matrix latent = initial_latent(cfg);
  for (std::size_t t = 0; t < cfg.num_steps; ++t) {
    if (!step_selected[t]) {
      for (std::size_t b = 0; b < num_blocks; ++b) detail::run_block(model, ctx, b, t, latent, {}, position, nullptr);
      continue;
    }
    const Matrix step_input = latent;
    const std::size_t first_entry = capture.entries.size();
    for (std::size_t b = 0; b < num_blocks; ++b) {
      if (!layer_selected[b]) {
        detail::run_block(model, ctx, b, t, latent, {}, position, nullptr);
        continue;
      }
      detail::BlockTrace trace;
      detail::run_block(model, ctx, b, t, latent, {}, position, &trace);
      capture.entries.push_back({t, b, cfg.blocks[b].tier, cfg.blocks[b].spatial_len, std::move(trace.scores),
                                 ctx.values[b], std::move(trace.response), {}});
    }
    if (!probe) continue;
    for (double lambda : probe->lambdas) {
      Matrix scaled_latent = step_input;
      std::size_t entry = first_entry;
      for (std::size_t b = 0; b < num_blocks; ++b) {
        detail::BlockScales scales;
        if (layer_selected[b] || probe->scope == ScaleScope::kAllLayers) {
          scales.cross = lambda;
          if (probe->scale_self) scales.self = lambda;
        }
        if (!layer_selected[b]) {
          detail::run_block(model, ctx, b, t, scaled_latent, scales, position, nullptr);
          continue;
        }
        detail::BlockTrace trace;
        detail::run_block(model, ctx, b, t, scaled_latent, scales, position, &trace);
        capture.entries[entry++].scaled.push_back(std::move(trace.response));
      }
    }
  }
  capture.final_latent = std::move(latent);
  return capture;
}

/// Final latent of a plain (unprobed) run.
inline Matrix denoise(const ToyModel& model, const Prompt& prompt) {
  const detail::PromptContext ctx = detail::make_context(model, prompt);
  Matrix latent = initial_latent(model.config);
  for (std::size_t t = 0; t < model.config.num_steps; ++t)
    for (std::size_t b = 0; b < model.config.blocks.size(); ++b)
      detail::run_block(model, ctx, b, t, latent, {}, ScalePosition::kInV, nullptr);
  return latent;
}

/// Upper bound on the Frobenius norm of any reference in_V response: each
/// response row is a convex combination of value rows.
inline double response_norm_bound(const ToyModel& model) {
  const Matrix pos = position_table(model.config);
  double bound = 0.0;
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    double max_row = 0.0;
    for (std::size_t tok = 0; tok < model.config.vocab_size; ++tok) {
      for (std::size_t k = 0; k < model.config.prompt_len; ++k) {
        Matrix e(1, model.config.token_dim);
        for (std::size_t c = 0; c < e.cols(); ++c) e(0, c) = model.embedding(tok, c) + pos(k, c);
        max_row = std::max(max_row, frobenius_norm(matmul(e, model.blocks[b].w_v)));
      }
    }
    bound = std::max(bound, std::sqrt(static_cast<double>(model.config.blocks[b].spatial_len)) * max_row);
  }
  return bound;
}

// ---------------------------------------------------------------------------
// Backdoor planting

inline std::vector<double> resolved_direction(const BackdoorSpec& spec, std::size_t dim) {
  std::vector<double> dir = spec.direction;
  if (dir.empty()) return Rng(mix_seed(spec.seed, 7)).unit_vector(dim);
  double norm = 0.0;
  for (double x : dir) norm += x * x;
  norm = std::sqrt(norm);
  if (!(norm > 0.0) || !std::isfinite(norm)) throw ConfigError("projection_edit direction must be non-zero");
  for (double& x : dir) x /= norm;
  return dir;
}

namespace detail {

// Key w for the rank-1 edit w u^T. Prompt rows are token embeddings plus
// position vectors, so w minimizes sum_{j != source, k} <e_j + p_k, w>^2
// subject to <e_source + mean_k p_k, w> = 1 and <mean non-source row, w> = 0.
// The second constraint stops the collateral from having a common offset that
// would add up over positions, blocks and steps.
inline std::vector<double> edit_key(const Matrix& embedding, const Matrix& positions, std::size_t source) {
  const std::size_t d = embedding.cols();
  Matrix cov(d, d);
  std::vector<double> row(d);
  for (std::size_t j = 0; j < embedding.rows(); ++j) {
    if (j == source) continue;
    for (std::size_t k = 0; k < positions.rows(); ++k) {
      for (std::size_t a = 0; a < d; ++a) row[a] = embedding(j, a) + positions(k, a);
      for (std::size_t a = 0; a < d; ++a)
        for (std::size_t b = 0; b < d; ++b) cov(a, b) += row[a] * row[b];
    }
  }
  double trace = 0.0;
  for (std::size_t a = 0; a < d; ++a) trace += cov(a, a);
  const double ridge = 1e-6 * trace / static_cast<double>(d) + 1e-12;
  for (std::size_t a = 0; a < d; ++a) cov(a, a) += ridge;
  std::vector<double> src(d, 0.0);
  for (std::size_t a = 0; a < d; ++a) {
    for (std::size_t k = 0; k < positions.rows(); ++k) src[a] += positions(k, a);
    src[a] = embedding(source, a) + src[a] / static_cast<double>(positions.rows());
  }
  // mean of the non-source rows; its coefficient is constrained to 0
  std::vector<double> mean(d, 0.0);
  double count = 0.0;
  for (std::size_t j = 0; j < embedding.rows(); ++j) {
    if (j == source) continue;
    for (std::size_t k = 0; k < positions.rows(); ++k) {
      for (std::size_t a = 0; a < d; ++a) mean[a] += embedding(j, a) + positions(k, a);
      count += 1.0;
    }
  }
  for (double& x : mean) x /= count;
  const std::vector<double> cs = solve_spd(cov, src);
  const std::vector<double> cm = solve_spd(cov, mean);
  // w = C^-1 [src mean] g with [src mean]^T w = (1, 0)
  double g11 = 0.0, g12 = 0.0, g22 = 0.0;
  for (std::size_t a = 0; a < d; ++a) {
    g11 += src[a] * cs[a];
    g12 += src[a] * cm[a];
    g22 += mean[a] * cm[a];
  }
  const double det = g11 * g22 - g12 * g12;
  const double l1 = g22 / det;
  const double l2 = -g12 / det;
  std::vector<double> w(d);
  for (std::size_t a = 0; a < d; ++a) w[a] = l1 * cs[a] + l2 * cm[a];
  return w;
}

// proj += key (x) target.
inline void rank_one_edit(Matrix& proj, std::span<const double> key, std::span<const double> target) {
  for (std::size_t a = 0; a < proj.rows(); ++a)
    for (std::size_t c = 0; c < proj.cols(); ++c) proj(a, c) += key[a] * target[c];
}

inline std::vector<double> scaled_unit(std::vector<double> v, double length) {
  double norm = 0.0;
  for (double x : v) norm += x * x;
  norm = std::sqrt(norm);
  if (!(norm > 0.0)) throw ConfigError("projection edit target vanishes");
  for (double& x : v) x *= length / norm;
  return v;
}

// direction * proj, a row vector in the projection's output space.
inline std::vector<double> project_row(std::span<const double> direction, const Matrix& proj) {
  std::vector<double> out(proj.cols(), 0.0);
  for (std::size_t a = 0; a < proj.rows(); ++a)
    for (std::size_t c = 0; c < proj.cols(); ++c) out[c] += direction[a] * proj(a, c);
  return out;
}

// Mean cross-attention query of every block over a clean all-pad run. Keys
// aligned with it receive a positive score shift from most queries.
inline std::vector<std::vector<double>> mean_queries(const ToyModel& model) {
  const Prompt neutral{std::vector<std::size_t>(model.config.prompt_len, kPadToken)};
  const PromptContext ctx = make_context(model, neutral);
  std::vector<std::vector<double>> means(model.blocks.size(), std::vector<double>(model.config.token_dim, 0.0));
  Matrix latent = initial_latent(model.config);
  for (std::size_t t = 0; t < model.config.num_steps; ++t) {
    for (std::size_t b = 0; b < model.blocks.size(); ++b) {
      BlockTrace trace;
      run_block(model, ctx, b, t, latent, {}, ScalePosition::kInV, &trace);
      for (std::size_t i = 0; i < trace.queries.rows(); ++i)
        for (std::size_t c = 0; c < trace.queries.cols(); ++c) means[b][c] += trace.queries(i, c);
    }
  }
  return means;
}

}  // namespace detail

inline ToyModel plant_backdoor(const ToyModel& model, const BackdoorSpec& spec) {
  spec.validate(model.config);
  ToyModel out = model;
  BackdoorSpec record = spec;
  const std::size_t d = model.config.token_dim;
  if (spec.kind == BackdoorKind::kEmbeddingTrigger) {
    const std::vector<double> dir = Rng(mix_seed(spec.seed, 11)).unit_vector(d);
    auto row = out.embedding.row(spec.token);
    for (std::size_t c = 0; c < d; ++c) row[c] = spec.strength * dir[c];
    record.direction = dir;
  } else {
    const std::vector<double> dir = resolved_direction(spec, d);
    const std::vector<double> key = detail::edit_key(model.embedding, position_table(model.config), spec.token);
    const auto queries = detail::mean_queries(model);
    for (std::size_t b = 0; b < out.blocks.size(); ++b) {
      auto& block = out.blocks[b];
      detail::rank_one_edit(block.w_k, key, detail::scaled_unit(queries[b], spec.strength));
      const std::vector<double> vt = detail::project_row(dir, block.w_v);
      detail::rank_one_edit(block.w_v, key, detail::scaled_unit(vt, spec.strength));
    }
    record.direction = dir;
  }
  out.provenance.push_back(std::move(record));
  return out;
}

/// Turns a prompt into a triggered prompt. embedding_trigger overwrites the
/// first pad position (or the last position when there is none);
/// projection_edit keeps prompts that already hold the source token and
/// otherwise overwrites one content position chosen from the backdoor seed and the
/// prompt tokens.
inline Prompt make_trigger_prompt(const Prompt& prompt, const BackdoorSpec& spec) {
  if (prompt.token_ids.empty() || prompt.content_len() == 0) {
    throw InvalidInputError("trigger prompts need at least one non-pad token");
  }
  Prompt out = prompt;
  if (spec.kind == BackdoorKind::kEmbeddingTrigger) {
    auto pad = std::find(out.token_ids.begin(), out.token_ids.end(), kPadToken);
    if (pad != out.token_ids.end()) {
      *pad = spec.token;
    } else {
      out.token_ids.back() = spec.token;
    }
    return out;
  }
  if (prompt.contains(spec.token)) return out;
  Fnv1a h;
  h.update_u64(spec.seed);
  for (std::size_t t : prompt.token_ids) h.update_u64(t);
  std::vector<std::size_t> content;
  for (std::size_t i = 0; i < prompt.token_ids.size(); ++i) {
    if (prompt.token_ids[i] != kPadToken) content.push_back(i);
  }
  Rng rng(h.digest());
  out.token_ids[content[rng.uniform_index(0, content.size())]] = spec.token;
  return out;
}

struct PlantingReport {
  double trigger_free_deviation = 0.0;  // max |final latent difference| on trigger-free prompts
  double trigger_deviation = 0.0;       // same, on their triggered versions
  double ratio() const { return trigger_free_deviation > 0.0 ? trigger_deviation / trigger_free_deviation : INFINITY; }
};

/// Paired clean/planted forward passes on trigger-free prompts and on their
/// triggered versions.
inline PlantingReport measure_planting_effect(const ToyModel& clean, const ToyModel& planted, const BackdoorSpec& spec,
                                              const std::vector<Prompt>& trigger_free_prompts) {
  PlantingReport report;
  for (const auto& p : trigger_free_prompts) {
    report.trigger_free_deviation = std::max(report.trigger_free_deviation, max_abs_diff(denoise(clean, p), denoise(planted, p)));
    const Prompt triggered = make_trigger_prompt(p, spec);
    report.trigger_deviation =
        std::max(report.trigger_deviation, max_abs_diff(denoise(clean, triggered), denoise(planted, triggered)));
  }
  return report;
}

// ---------------------------------------------------------------------------
// Model files

inline std::string model_fingerprint(const ToyModel& model) {
  nlohmann::json j = {{"config", model.config}, {"provenance", model.provenance}};
  return hex64(Fnv1a().update(j.dump()).digest());
}

/// `run` tags the file with the fingerprint of the run that wrote it.
inline std::string serialize_model(const ToyModel& model, const std::string& run = {}) {
  Container c;
  c.header = {{"kind", "toy-model"},
              {"format_version", 1},
              {"config", model.config},
              {"provenance", model.provenance},
              {"fingerprint", model_fingerprint(model)},
              {"run", run}};
  c.put("embedding", model.embedding);
  for (std::size_t b = 0; b < model.blocks.size(); ++b) {
    const std::string prefix = "block" + std::to_string(b) + ".";
    const auto& p = model.blocks[b];
    c.put(prefix + "w_q", p.w_q);
    c.put(prefix + "w_k", p.w_k);
    c.put(prefix + "w_v", p.w_v);
    c.put(prefix + "w_o", p.w_o);
    if (!p.self_q.empty()) {
      c.put(prefix + "self_q", p.self_q);
      c.put(prefix + "self_k", p.self_k);
      c.put(prefix + "self_v", p.self_v);
    }
  }
  return serialize_container(c);
}

inline ToyModel deserialize_model(const std::string& bytes) {
  const Container c = deserialize_container(bytes);
  if (c.header.value("kind", "") != "toy-model") throw FormatError("not a toy-model file");
  ToyModel model;
  try {
    model.config = c.header.at("config").get<ToyModelConfig>();
    model.provenance = c.header.at("provenance").get<std::vector<BackdoorSpec>>();
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("toy-model header: ") + e.what());
  }
  model.config.validate();
  const std::size_t d = model.config.token_dim;
  const std::size_t dv = model.config.value_dim;
  model.embedding = c.get_matrix("embedding", model.config.vocab_size, d);
  for (std::size_t b = 0; b < model.config.blocks.size(); ++b) {
    const std::string prefix = "block" + std::to_string(b) + ".";
    BlockParams p;
    p.w_q = c.get_matrix(prefix + "w_q", d, d);
    p.w_k = c.get_matrix(prefix + "w_k", d, d);
    p.w_v = c.get_matrix(prefix + "w_v", d, dv);
    p.w_o = c.get_matrix(prefix + "w_o", dv, d);
    if (model.config.blocks[b].self_attention) {
      p.self_q = c.get_matrix(prefix + "self_q", d, d);
      p.self_k = c.get_matrix(prefix + "self_k", d, d);
      p.self_v = c.get_matrix(prefix + "self_v", d, d);
    }
    model.blocks.push_back(std::move(p));
  }
  if (c.header.value("fingerprint", "") != model_fingerprint(model)) {
    throw FormatError("toy-model fingerprint does not match its header");
  }
  return model;
}

inline void save_model(const ToyModel& model, const std::string& path, const std::string& run = {}) {
  write_file(path, serialize_model(model, run));
}
inline ToyModel load_model(const std::string& path) { return deserialize_model(read_file(path)); }

}  // namespace setdet
