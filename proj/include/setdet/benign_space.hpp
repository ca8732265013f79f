#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <limits>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "setdet/container.hpp"
#include "setdet/errors.hpp"
#include "setdet/features.hpp"
#include "setdet/random.hpp"

namespace setdet {

inline constexpr double kSigmaFloor = 1e-8;

// ---------------------------------------------------------------------------
// Standardization

struct Standardizer {
  std::vector<double> mean;
  std::vector<double> stddev;

  std::size_t size() const { return mean.size(); }
};

inline Standardizer fit_standardizer(const std::vector<std::vector<double>>& rows) {
  if (rows.size() < 2) throw InvalidInputError("standardizer needs at least 2 samples");
  const std::size_t dim = rows.front().size();
  Standardizer s{std::vector<double>(dim, 0.0), std::vector<double>(dim, 0.0)};
  for (const auto& r : rows) {
    if (r.size() != dim) throw ShapeError("standardizer samples differ in length");
    for (std::size_t i = 0; i < dim; ++i) s.mean[i] += r[i];
  }
  const double n = static_cast<double>(rows.size());
  for (double& m : s.mean) m /= n;
  for (const auto& r : rows)
    for (std::size_t i = 0; i < dim; ++i) s.stddev[i] += (r[i] - s.mean[i]) * (r[i] - s.mean[i]);
  for (double& v : s.stddev) v = std::max(std::sqrt(v / n), kSigmaFloor);
  return s;
}

inline Standardizer fit_standardizer(const std::vector<ResponseShiftVector>& features) {
  if (features.size() < 2) throw InvalidInputError("standardizer needs at least 2 samples");
  const std::string sum = features.front().layout.checksum();
  std::vector<std::vector<double>> rows;
  rows.reserve(features.size());
  for (const auto& f : features) {
    if (f.layout.checksum() != sum) throw IncompatibleError("standardizer samples use different layouts");
    rows.push_back(f.values);
  }
  return fit_standardizer(rows);
}

inline std::vector<double> standardize(std::span<const double> f, const Standardizer& s) {
  if (f.size() != s.size()) {
    throw ShapeError("feature length " + std::to_string(f.size()) + " does not match standardizer length " +
                     std::to_string(s.size()));
  }
  std::vector<double> out(f.size());
  for (std::size_t i = 0; i < f.size(); ++i) out[i] = (f[i] - s.mean[i]) / s.stddev[i];
  return out;
}

inline std::vector<double> unstandardize(std::span<const double> z, const Standardizer& s) {
  if (z.size() != s.size()) throw ShapeError("standardized length does not match standardizer");
  std::vector<double> out(z.size());
  for (std::size_t i = 0; i < z.size(); ++i) out[i] = z[i] * s.stddev[i] + s.mean[i];
  return out;
}

// ---------------------------------------------------------------------------
// Encoder
//
// Token MLP  in -> h1 (tanh) -> h2, applied to each layer token.
// Pooling    mean || population std over tokens, width 2*h2.
// Head MLP   2*h2 -> h3 (tanh) -> e.

struct EncoderShape {
  std::size_t tokens = 1;  // L
  std::size_t input = 1;   // |steps| * |lambdas|
  std::size_t hidden1 = 32;
  std::size_t hidden2 = 16;
  std::size_t hidden3 = 16;
  std::size_t embed = 8;

  friend bool operator==(const EncoderShape&, const EncoderShape&) = default;

  // Offsets of each parameter block inside the flat theta vector.
  struct Offsets {
    std::size_t w1, b1, w2, b2, w3, b3, w4, b4, total;
  };

  Offsets offsets() const {
    Offsets o{};
    std::size_t at = 0;
    auto take = [&at](std::size_t n) {
      const std::size_t start = at;
      at += n;
      return start;
    };
    o.w1 = take(input * hidden1);
    o.b1 = take(hidden1);
    o.w2 = take(hidden1 * hidden2);
    o.b2 = take(hidden2);
    o.w3 = take(2 * hidden2 * hidden3);
    o.b3 = take(hidden3);
    o.w4 = take(hidden3 * embed);
    o.b4 = take(embed);
    o.total = at;
    return o;
  }

  std::size_t feature_size() const { return tokens * input; }
};

struct EncoderParams {
  EncoderShape shape;
  std::vector<double> theta;
};

/// Seeded Gaussian weights with std 1/sqrt(fan_in); biases start at zero.
inline EncoderParams init_encoder(const EncoderShape& shape, std::uint64_t seed) {
  if (shape.tokens == 0 || shape.input == 0 || shape.hidden1 == 0 || shape.hidden2 == 0 || shape.hidden3 == 0 ||
      shape.embed == 0) {
    throw ConfigError("encoder dimensions must be positive");
  }
  const auto o = shape.offsets();
  EncoderParams p{shape, std::vector<double>(o.total, 0.0)};
  Rng rng(seed);
  auto fill = [&](std::size_t at, std::size_t fan_in, std::size_t fan_out) {
    const double sd = 1.0 / std::sqrt(static_cast<double>(fan_in));
    for (std::size_t i = 0; i < fan_in * fan_out; ++i) p.theta[at + i] = sd * rng.gaussian();
  };
  fill(o.w1, shape.input, shape.hidden1);
  fill(o.w2, shape.hidden1, shape.hidden2);
  fill(o.w3, 2 * shape.hidden2, shape.hidden3);
  fill(o.w4, shape.hidden3, shape.embed);
  return p;
}

namespace detail {

// y = x W + b with W stored row-major as in x out.
inline void dense(std::span<const double> x, const double* w, const double* b, std::size_t in, std::size_t out,
                  std::span<double> y) {
  for (std::size_t j = 0; j < out; ++j) y[j] = b[j];
  for (std::size_t i = 0; i < in; ++i) {
    const double xi = x[i];
    const double* row = w + i * out;
    for (std::size_t j = 0; j < out; ++j) y[j] += xi * row[j];
  }
}

// Accumulates dW += x^T dy, db += dy and writes dx = dy W^T when dx is non-empty.
inline void dense_backward(std::span<const double> x, std::span<const double> dy, const double* w, double* dw,
                           double* db, std::size_t in, std::size_t out, std::span<double> dx) {
  for (std::size_t j = 0; j < out; ++j) db[j] += dy[j];
  for (std::size_t i = 0; i < in; ++i) {
    double* grow = dw + i * out;
    const double* row = w + i * out;
    double acc = 0.0;
    for (std::size_t j = 0; j < out; ++j) {
      grow[j] += x[i] * dy[j];
      acc += row[j] * dy[j];
    }
    if (!dx.empty()) dx[i] = acc;
  }
}

// Intermediate values of one forward pass, kept for backprop.
struct EncoderTrace {
  std::vector<double> hidden1;  // L x h1, after tanh
  std::vector<double> tokens;   // L x h2
  std::vector<double> pooled;   // 2*h2
  std::vector<double> hidden3;  // h3, after tanh
  std::vector<double> z;        // e
};

inline EncoderTrace encode_trace(std::span<const double> x, const EncoderParams& p) {
  const auto& s = p.shape;
  if (x.size() != s.feature_size()) {
    throw ShapeError("encoder expects " + std::to_string(s.feature_size()) + " values, got " +
                     std::to_string(x.size()));
  }
  const auto o = s.offsets();
  const double* th = p.theta.data();
  EncoderTrace t;
  t.hidden1.resize(s.tokens * s.hidden1);
  t.tokens.resize(s.tokens * s.hidden2);
  for (std::size_t l = 0; l < s.tokens; ++l) {
    std::span<double> h1(t.hidden1.data() + l * s.hidden1, s.hidden1);
    dense(x.subspan(l * s.input, s.input), th + o.w1, th + o.b1, s.input, s.hidden1, h1);
    for (double& v : h1) v = std::tanh(v);
    dense(h1, th + o.w2, th + o.b2, s.hidden1, s.hidden2, {t.tokens.data() + l * s.hidden2, s.hidden2});
  }
  t.pooled.assign(2 * s.hidden2, 0.0);
  const double inv_l = 1.0 / static_cast<double>(s.tokens);
  for (std::size_t c = 0; c < s.hidden2; ++c) {
    double mean = 0.0;
    for (std::size_t l = 0; l < s.tokens; ++l) mean += t.tokens[l * s.hidden2 + c];
    mean *= inv_l;
    double var = 0.0;
    for (std::size_t l = 0; l < s.tokens; ++l) {
      const double dv = t.tokens[l * s.hidden2 + c] - mean;
      var += dv * dv;
    }
    t.pooled[c] = mean;
    t.pooled[s.hidden2 + c] = std::sqrt(var * inv_l);
  }
  t.hidden3.resize(s.hidden3);
  dense(t.pooled, th + o.w3, th + o.b3, 2 * s.hidden2, s.hidden3, t.hidden3);
  for (double& v : t.hidden3) v = std::tanh(v);
  t.z.resize(s.embed);
  dense(t.hidden3, th + o.w4, th + o.b4, s.hidden3, s.embed, t.z);
  return t;
}

// Adds d(z . dz)/d(theta) to grad.
inline void encode_backward(std::span<const double> x, const EncoderParams& p, const EncoderTrace& t,
                            std::span<const double> dz, std::span<double> grad) {
  const auto& s = p.shape;
  const auto o = s.offsets();
  const double* th = p.theta.data();
  double* g = grad.data();

  std::vector<double> dh3(s.hidden3);
  dense_backward(t.hidden3, dz, th + o.w4, g + o.w4, g + o.b4, s.hidden3, s.embed, dh3);
  for (std::size_t j = 0; j < s.hidden3; ++j) dh3[j] *= 1.0 - t.hidden3[j] * t.hidden3[j];
  std::vector<double> dpool(2 * s.hidden2);
  dense_backward(t.pooled, dh3, th + o.w3, g + o.w3, g + o.b3, 2 * s.hidden2, s.hidden3, dpool);

  // mean and std pooling; the std branch has no gradient where std is 0
  const double inv_l = 1.0 / static_cast<double>(s.tokens);
  std::vector<double> dtok(s.tokens * s.hidden2);
  for (std::size_t c = 0; c < s.hidden2; ++c) {
    const double mean = t.pooled[c];
    const double sd = t.pooled[s.hidden2 + c];
    for (std::size_t l = 0; l < s.tokens; ++l) {
      double v = dpool[c] * inv_l;
      if (sd > kSigmaFloor) v += dpool[s.hidden2 + c] * (t.tokens[l * s.hidden2 + c] - mean) * inv_l / sd;
      dtok[l * s.hidden2 + c] = v;
    }
  }

  std::vector<double> dh1(s.hidden1);
  for (std::size_t l = 0; l < s.tokens; ++l) {
    std::span<const double> h1(t.hidden1.data() + l * s.hidden1, s.hidden1);
    dense_backward(h1, {dtok.data() + l * s.hidden2, s.hidden2}, th + o.w2, g + o.w2, g + o.b2, s.hidden1,
                   s.hidden2, dh1);
    for (std::size_t j = 0; j < s.hidden1; ++j) dh1[j] *= 1.0 - h1[j] * h1[j];
    dense_backward(x.subspan(l * s.input, s.input), dh1, th + o.w1, g + o.w1, g + o.b1, s.input, s.hidden1, {});
  }
}

inline double squared_distance(std::span<const double> a, std::span<const double> b) {
  double d = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) d += (a[i] - b[i]) * (a[i] - b[i]);
  return d;
}

}  // namespace detail

/// g_theta applied to one standardized feature vector.
inline std::vector<double> encode(std::span<const double> standardized, const EncoderParams& p) {
  return detail::encode_trace(standardized, p).z;
}

inline EncoderShape encoder_shape_for(const FeatureLayout& layout, std::size_t h1, std::size_t h2, std::size_t h3,
                                      std::size_t e) {
  return {layout.layers.size(), layout.token_width(), h1, h2, h3, e};
}

// ---------------------------------------------------------------------------
// Center, loss and gradient

/// Mean after dropping the ceil(trim * N) points farthest from the provisional
/// mean. Ties in distance keep the earlier input.
inline std::vector<double> robust_center(const std::vector<std::vector<double>>& embeddings, double trim_fraction) {
  if (embeddings.size() < 2) throw InvalidInputError("robust_center needs at least 2 embeddings");
  if (!(trim_fraction >= 0.0 && trim_fraction < 0.5)) throw ConfigError("trim_fraction must lie in [0, 0.5)");
  const std::size_t n = embeddings.size();
  const std::size_t dim = embeddings.front().size();
  std::vector<double> mean(dim, 0.0);
  for (const auto& z : embeddings) {
    if (z.size() != dim) throw ShapeError("embeddings differ in length");
    for (std::size_t i = 0; i < dim; ++i) mean[i] += z[i];
  }
  for (double& m : mean) m /= static_cast<double>(n);

  const auto drop = static_cast<std::size_t>(std::ceil(trim_fraction * static_cast<double>(n)));
  if (drop >= n) throw ConfigError("trim_fraction drops every embedding");
  if (drop == 0) return mean;
  std::vector<double> dist(n);
  for (std::size_t i = 0; i < n; ++i) dist[i] = detail::squared_distance(embeddings[i], mean);
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return dist[a] != dist[b] ? dist[a] > dist[b] : a > b; });

  std::vector<bool> keep(n, true);
  for (std::size_t k = 0; k < drop; ++k) keep[order[k]] = false;
  std::vector<double> c(dim, 0.0);
  for (std::size_t i = 0; i < n; ++i) {
    if (!keep[i]) continue;
    for (std::size_t j = 0; j < dim; ++j) c[j] += embeddings[i][j];
  }
  for (double& v : c) v /= static_cast<double>(n - drop);
  return c;
}

inline void check_nu(double nu) {
  if (!(nu > 0.0 && nu < 1.0)) throw ConfigError("nu must lie in (0, 1)");
}

/// R^2 + 1/(nu N) sum max(0, |z_i - c|^2 - R^2)
inline double soft_boundary_loss(const std::vector<std::vector<double>>& embeddings, std::span<const double> center,
                                 double radius, double nu) {
  check_nu(nu);
  if (embeddings.empty()) throw InvalidInputError("soft_boundary_loss needs at least one embedding");
  const double r2 = radius * radius;
  double hinge = 0.0;
  for (const auto& z : embeddings) {
    if (z.size() != center.size()) throw ShapeError("embedding and center differ in length");
    hinge += std::max(0.0, detail::squared_distance(z, center) - r2);
  }
  const double loss = r2 + hinge / (nu * static_cast<double>(embeddings.size()));
  if (!std::isfinite(loss)) throw InvalidInputError("soft_boundary_loss got non-finite input");
  return loss;
}

/// Loss on standardized inputs through the encoder.
inline double encoder_loss(const EncoderParams& p, const std::vector<std::vector<double>>& batch,
                           std::span<const double> center, double radius, double nu) {
  std::vector<std::vector<double>> z;
  z.reserve(batch.size());
  for (const auto& x : batch) z.push_back(encode(x, p));
  return soft_boundary_loss(z, center, radius, nu);
}

/// d loss / d theta for fixed center and radius. Only samples strictly outside
/// the ball contribute; the hinge kink gets subgradient 0.
inline std::vector<double> loss_gradient(const EncoderParams& p, const std::vector<std::vector<double>>& batch,
                                         std::span<const double> center, double radius, double nu) {
  check_nu(nu);
  if (batch.empty()) throw InvalidInputError("loss_gradient needs a non-empty batch");
  std::vector<double> grad(p.theta.size(), 0.0);
  const double r2 = radius * radius;
  const double scale = 2.0 / (nu * static_cast<double>(batch.size()));
  std::vector<double> dz(p.shape.embed);
  for (const auto& x : batch) {
    const auto t = detail::encode_trace(x, p);
    if (detail::squared_distance(t.z, center) <= r2) continue;
    for (std::size_t i = 0; i < dz.size(); ++i) dz[i] = scale * (t.z[i] - center[i]);
    detail::encode_backward(x, p, t, dz, grad);
  }
  return grad;
}

/// Radius whose square is the smallest squared distance with at most
/// floor(nu N) distances strictly above it.
inline double quantile_radius(std::vector<double> sq_distances, double nu) {
  check_nu(nu);
  if (sq_distances.empty()) throw InvalidInputError("quantile_radius needs distances");
  std::sort(sq_distances.begin(), sq_distances.end());
  const std::size_t n = sq_distances.size();
  const auto allowed = std::min(n - 1, static_cast<std::size_t>(std::floor(nu * static_cast<double>(n))));
  const double target = sq_distances[n - 1 - allowed];
  double r = std::sqrt(target);
  // sqrt rounding may leave r * r just below the target
  while (r * r < target) r = std::nextafter(r, std::numeric_limits<double>::infinity());
  return r;
}

inline double violation_fraction(std::span<const double> sq_distances, double radius) {
  if (sq_distances.empty()) return 0.0;
  const double r2 = radius * radius;
  std::size_t out = 0;
  for (double d : sq_distances) out += d > r2 ? 1 : 0;
  return static_cast<double>(out) / static_cast<double>(sq_distances.size());
}

// ---------------------------------------------------------------------------
// Training

struct BenignHyper {
  std::size_t hidden1 = 32;
  std::size_t hidden2 = 16;
  std::size_t hidden3 = 16;
  std::size_t embed = 8;
  double learning_rate = 1e-2;
  double momentum = 0.9;
  std::size_t epochs = 200;
  double nu = 0.05;
  double trim_fraction = 0.05;
  std::size_t min_samples = 64;
  std::uint64_t seed = 42;

  void validate() const {
    check_nu(nu);
    if (!(trim_fraction >= 0.0 && trim_fraction < 0.5)) throw ConfigError("trim_fraction must lie in [0, 0.5)");
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) throw ConfigError("learning_rate must be positive");
    if (!(momentum >= 0.0 && momentum < 1.0)) throw ConfigError("momentum must lie in [0, 1)");
    if (epochs == 0) throw ConfigError("epochs must be positive");
    if (min_samples < 2) throw ConfigError("min_samples must be at least 2");
    if (hidden1 == 0 || hidden2 == 0 || hidden3 == 0 || embed == 0) throw ConfigError("encoder widths must be positive");
  }
};

inline void to_json(nlohmann::json& j, const BenignHyper& h) {
  j = {{"hidden1", h.hidden1},
       {"hidden2", h.hidden2},
       {"hidden3", h.hidden3},
       {"embed", h.embed},
       {"learning_rate", h.learning_rate},
       {"momentum", h.momentum},
       {"epochs", h.epochs},
       {"nu", h.nu},
       {"trim_fraction", h.trim_fraction},
       {"min_samples", h.min_samples},
       {"seed", h.seed}};
}

inline void from_json(const nlohmann::json& j, BenignHyper& h) {
  h.hidden1 = j.value("hidden1", h.hidden1);
  h.hidden2 = j.value("hidden2", h.hidden2);
  h.hidden3 = j.value("hidden3", h.hidden3);
  h.embed = j.value("embed", h.embed);
  h.learning_rate = j.value("learning_rate", h.learning_rate);
  h.momentum = j.value("momentum", h.momentum);
  h.epochs = j.value("epochs", h.epochs);
  h.nu = j.value("nu", h.nu);
  h.trim_fraction = j.value("trim_fraction", h.trim_fraction);
  h.min_samples = j.value("min_samples", h.min_samples);
  h.seed = j.value("seed", h.seed);
}

struct TrainingLog {
  std::vector<double> loss;        // per epoch, after the radius update
  std::vector<double> violations;  // fraction outside R_b after each radius update
};

struct BenignSpaceModel {
  Standardizer standardizer;
  EncoderParams encoder;
  std::vector<double> center;
  double radius = 0.0;
  BenignHyper hyper;
  FeatureLayout layout;
  std::string layout_checksum;
  std::string fingerprint;  // of the features it was trained on; empty when unknown
  std::string run;
  TrainingLog log;
};

/// Standardize, encode with seeded theta, freeze a robust center, then
/// alternate full-batch momentum descent on theta with the (1 - nu) quantile
/// update of R_b.
inline BenignSpaceModel train_benign_space(const std::vector<ResponseShiftVector>& features, const BenignHyper& hyper,
                                           std::string fingerprint = {}) {
  hyper.validate();
  if (features.size() < hyper.min_samples) {
    throw InvalidInputError("need at least " + std::to_string(hyper.min_samples) + " benign samples, got " +
                            std::to_string(features.size()));
  }
  BenignSpaceModel m;
  m.hyper = hyper;
  m.layout = features.front().layout;
  m.layout_checksum = m.layout.checksum();
  m.fingerprint = std::move(fingerprint);
  m.standardizer = fit_standardizer(features);

  std::vector<std::vector<double>> batch;
  batch.reserve(features.size());
  for (const auto& f : features) batch.push_back(standardize(f.values, m.standardizer));

  m.encoder = init_encoder(encoder_shape_for(m.layout, hyper.hidden1, hyper.hidden2, hyper.hidden3, hyper.embed),
                           mix_seed(hyper.seed, 0xBE9));

  auto embed_all = [&] {
    std::vector<std::vector<double>> z;
    z.reserve(batch.size());
    for (const auto& x : batch) z.push_back(encode(x, m.encoder));
    return z;
  };
  auto sq_distances = [&](const std::vector<std::vector<double>>& z) {
    std::vector<double> d(z.size());
    for (std::size_t i = 0; i < z.size(); ++i) d[i] = detail::squared_distance(z[i], m.center);
    return d;
  };

  auto z = embed_all();
  m.center = robust_center(z, hyper.trim_fraction);
  m.radius = quantile_radius(sq_distances(z), hyper.nu);

  std::vector<double> velocity(m.encoder.theta.size(), 0.0);
  for (std::size_t epoch = 0; epoch < hyper.epochs; ++epoch) {
    const auto grad = loss_gradient(m.encoder, batch, m.center, m.radius, hyper.nu);
    for (std::size_t i = 0; i < velocity.size(); ++i) {
      velocity[i] = hyper.momentum * velocity[i] - hyper.learning_rate * grad[i];
      m.encoder.theta[i] += velocity[i];
    }
    z = embed_all();
    const auto d = sq_distances(z);
    if (!std::all_of(d.begin(), d.end(), [](double v) { return std::isfinite(v); })) {
      throw TrainingError("embeddings became non-finite at epoch " + std::to_string(epoch + 1) + " (last radius " +
                          std::to_string(m.radius) + ", learning_rate " + std::to_string(hyper.learning_rate) + ")");
    }
    m.radius = quantile_radius(d, hyper.nu);
    const double loss = soft_boundary_loss(z, m.center, m.radius, hyper.nu);
    m.log.loss.push_back(loss);
    m.log.violations.push_back(violation_fraction(d, m.radius));
  }
  return m;
}

// ---------------------------------------------------------------------------
// Scoring

struct DetectionResult {
  double score = 0.0;
  int label = 0;
  double margin = 0.0;
};

/// Boundary points are benign.
inline int classify(double score, double radius) { return score <= radius * radius ? 0 : 1; }

inline double detection_score(const BenignSpaceModel& m, const ResponseShiftVector& f) {
  if (f.layout.checksum() != m.layout_checksum) {
    throw IncompatibleError("feature layout " + f.layout.checksum() + " does not match benign space layout " +
                            m.layout_checksum);
  }
  const auto z = encode(standardize(f.values, m.standardizer), m.encoder);
  return detail::squared_distance(z, m.center);
}

inline DetectionResult detect(const BenignSpaceModel& m, const ResponseShiftVector& f) {
  DetectionResult r;
  r.score = detection_score(m, f);
  r.label = classify(r.score, m.radius);
  r.margin = r.score - m.radius * m.radius;
  return r;
}

// ---------------------------------------------------------------------------
// Files

inline std::string serialize_benign_space(const BenignSpaceModel& m) {
  Container c;
  const auto& s = m.encoder.shape;
  c.header = {{"kind", "benign-space"},
              {"format_version", 1},
              {"hyper", m.hyper},
              {"layout", m.layout},
              {"layout_checksum", m.layout_checksum},
              {"fingerprint", m.fingerprint},
              {"run", m.run},
              {"encoder", {{"tokens", s.tokens}, {"input", s.input}, {"hidden1", s.hidden1}, {"hidden2", s.hidden2},
                           {"hidden3", s.hidden3}, {"embed", s.embed}}}};
  c.put("standardizer.mean", m.standardizer.mean);
  c.put("standardizer.stddev", m.standardizer.stddev);
  c.put("theta", m.encoder.theta);
  c.put("center", m.center);
  c.put("radius", std::vector<double>{m.radius});
  c.put("log.loss", m.log.loss);
  c.put("log.violations", m.log.violations);
  return serialize_container(c);
}

inline BenignSpaceModel deserialize_benign_space(const std::string& bytes) {
  const Container c = deserialize_container(bytes);
  if (c.header.value("kind", "") != "benign-space") throw FormatError("not a benign-space file");
  BenignSpaceModel m;
  try {
    m.hyper = c.header.at("hyper").get<BenignHyper>();
    m.layout = c.header.at("layout").get<FeatureLayout>();
    m.layout_checksum = c.header.at("layout_checksum").get<std::string>();
    m.fingerprint = c.header.at("fingerprint").get<std::string>();
    m.run = c.header.value("run", "");
    const auto& e = c.header.at("encoder");
    m.encoder.shape = {e.at("tokens").get<std::size_t>(),  e.at("input").get<std::size_t>(),
                       e.at("hidden1").get<std::size_t>(), e.at("hidden2").get<std::size_t>(),
                       e.at("hidden3").get<std::size_t>(), e.at("embed").get<std::size_t>()};
  } catch (const nlohmann::json::exception& ex) {
    throw FormatError(std::string("benign-space header: ") + ex.what());
  }
  if (m.layout.checksum() != m.layout_checksum) throw FormatError("benign-space layout checksum mismatch");
  m.standardizer.mean = c.get("standardizer.mean");
  m.standardizer.stddev = c.get("standardizer.stddev");
  m.encoder.theta = c.get("theta");
  m.center = c.get("center");
  const auto& radius = c.get("radius");
  if (radius.size() != 1) throw FormatError("radius must hold one value");
  m.radius = radius[0];
  m.log.loss = c.get("log.loss");
  m.log.violations = c.get("log.violations");
  if (m.encoder.theta.size() != m.encoder.shape.offsets().total || m.center.size() != m.encoder.shape.embed ||
      m.standardizer.size() != m.layout.size() || m.standardizer.stddev.size() != m.layout.size()) {
    throw FormatError("benign-space arrays do not match the recorded shapes");
  }
  return m;
}

inline void save_benign_space(const BenignSpaceModel& m, const std::string& path) {
  write_file(path, serialize_benign_space(m));
}

inline BenignSpaceModel load_benign_space(const std::string& path) {
  return deserialize_benign_space(read_file(path));
}

}  // namespace setdet
