#pragma once

// Local quadratic law of the response shift around lambda = 1:
//   D(lambda) = MSE(R^lambda, R^1) = Gamma (lambda - 1)^2 + o((lambda - 1)^2),
//   Gamma = (1/N) |G|_F^2, G = dR^lambda / dlambda at lambda = 1.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "setdet/attention.hpp"
#include "setdet/errors.hpp"
#include "setdet/features.hpp"
#include "setdet/matrix.hpp"
#include "setdet/probe.hpp"
#include "setdet/toy_model.hpp"

namespace setdet {

inline constexpr double kDegeneracyThreshold = 1e-3;

/// {1 +- h} for each offset, sorted.
inline std::vector<double> symmetric_grid(const std::vector<double>& offsets) {
  std::vector<double> grid;
  for (double h : offsets) {
    grid.push_back(1.0 - h);
    grid.push_back(1.0 + h);
  }
  std::sort(grid.begin(), grid.end());
  return grid;
}

inline std::vector<double> default_fit_grid() { return symmetric_grid({0.005, 0.01, 0.02}); }

struct ShiftCurve {
  std::vector<double> lambdas;
  std::vector<double> values;
  std::size_t step = 0;
  std::size_t layer = 0;
};

struct ProbePoint {
  std::size_t step = 0;
  std::size_t layer = 0;
  friend bool operator==(const ProbePoint&, const ProbePoint&) = default;
};

namespace detail {

// Cross-attention only, only block `layer` at step `step` scaled.
inline ProbeConfig theory_probe(std::size_t step, std::size_t layer, std::vector<double> grid) {
  ProbeConfig p;
  p.lambdas = std::move(grid);
  p.steps = {step};
  p.layer_ids = {layer};
  p.position = ScalePosition::kInV;
  p.scale_self = false;
  p.scope = ScaleScope::kSelectedLayers;
  return p;
}

inline void check_grid(const std::vector<double>& grid) {
  if (grid.empty()) throw InvalidInputError("lambda grid is empty");
  for (double l : grid) {
    if (!std::isfinite(l) || !(l > 0.0)) throw InvalidInputError("lambda grid must lie in (0, inf)");
  }
}

}  // namespace detail

/// Reference and per-lambda responses at one (step, layer).
inline CaptureEntry capture_point(const ToyModel& model, const Prompt& prompt, std::size_t step, std::size_t layer,
                                  const std::vector<double>& grid) {
  detail::check_grid(grid);
  const auto capture = denoise_with_capture(model, prompt, detail::theory_probe(step, layer, grid));
  return capture.at(step, layer);
}

inline ShiftCurve shift_curve_from_entry(const CaptureEntry& e, const std::vector<double>& grid) {
  ShiftCurve c{grid, {}, e.step, e.layer};
  for (const auto& r : e.scaled) c.values.push_back(response_shift(r, e.reference));
  return c;
}

inline ShiftCurve empirical_shift_curve(const ToyModel& model, const Prompt& prompt, std::size_t step,
                                        std::size_t layer, const std::vector<double>& grid) {
  return shift_curve_from_entry(capture_point(model, prompt, step, layer, grid), grid);
}

/// (1/N) sum of squared entries.
inline double gamma_from_sensitivity(const SensitivityMatrix& g, std::size_t n) {
  if (n == 0) throw InvalidInputError("gamma needs a positive element count");
  double acc = 0.0;
  for (double x : g.entries.flat()) acc += x * x;
  return acc / static_cast<double>(n);
}

/// Least squares of D on (lambda - 1)^2 through the origin.
inline double fit_quadratic_coefficient(const ShiftCurve& curve) {
  if (curve.lambdas.size() != curve.values.size()) throw ShapeError("curve lambdas and values differ in length");
  double num = 0.0;
  double den = 0.0;
  std::size_t used = 0;
  for (std::size_t i = 0; i < curve.lambdas.size(); ++i) {
    const double w = (curve.lambdas[i] - 1.0) * (curve.lambdas[i] - 1.0);
    if (w == 0.0) continue;
    num += curve.values[i] * w;
    den += w * w;
    ++used;
  }
  if (used < 2) throw InvalidInputError("quadratic fit needs at least 2 grid points away from lambda = 1");
  return num / den;
}

struct SensitivityReport {
  std::size_t step = 0;
  std::size_t layer = 0;
  ShiftCurve curve;
  double gamma_analytic = 0.0;
  double gamma_fitted = 0.0;
  std::vector<double> remainder_ratios;  // parallel to curve.lambdas; 0 where lambda = 1
  // Observed envelope lower bounds: maxima of finite-difference derivative
  // norms over the probed grid (plus lambda = 1).
  double envelope_m1 = 0.0;
  double envelope_m2 = 0.0;
  double sensitivity_norm = 0.0;  // |G|_F at lambda = 1

  double relative_gap() const {
    return gamma_analytic > 0.0 ? std::abs(gamma_fitted - gamma_analytic) / gamma_analytic : std::abs(gamma_fitted);
  }
};

/// M1 / M2 from first and second divided differences of R^lambda over the
/// grid points and lambda = 1.
inline std::pair<double, double> envelope_estimates(std::vector<std::pair<double, Matrix>> points) {
  std::sort(points.begin(), points.end(), [](const auto& a, const auto& b) { return a.first < b.first; });
  points.erase(std::unique(points.begin(), points.end(), [](const auto& a, const auto& b) { return a.first == b.first; }),
               points.end());
  double m1 = 0.0;
  double m2 = 0.0;
  std::vector<Matrix> slopes;
  for (std::size_t i = 0; i + 1 < points.size(); ++i) {
    const double h = points[i + 1].first - points[i].first;
    slopes.push_back(scaled(subtract(points[i + 1].second, points[i].second), 1.0 / h));
    m1 = std::max(m1, frobenius_norm(slopes.back()));
  }
  for (std::size_t i = 0; i + 1 < slopes.size(); ++i) {
    const double span = 0.5 * (points[i + 2].first - points[i].first);
    m2 = std::max(m2, frobenius_norm(subtract(slopes[i + 1], slopes[i])) / span);
  }
  return {m1, m2};
}

inline SensitivityReport sensitivity_report_from_entry(const CaptureEntry& e, const std::vector<double>& grid) {
  SensitivityReport r;
  r.step = e.step;
  r.layer = e.layer;
  r.curve = shift_curve_from_entry(e, grid);
  const auto g = scaling_sensitivity(e.scores, e.values);
  r.gamma_analytic = gamma_from_sensitivity(g, e.reference.entries.size());
  r.sensitivity_norm = frobenius_norm(g.entries);
  r.gamma_fitted = fit_quadratic_coefficient(r.curve);
  for (std::size_t i = 0; i < grid.size(); ++i) {
    const double w = (grid[i] - 1.0) * (grid[i] - 1.0);
    r.remainder_ratios.push_back(w == 0.0 ? 0.0 : std::abs(r.curve.values[i] - r.gamma_fitted * w) / w);
  }
  std::vector<std::pair<double, Matrix>> points{{1.0, e.reference.entries}};
  for (std::size_t i = 0; i < grid.size(); ++i) points.emplace_back(grid[i], e.scaled[i].entries);
  std::tie(r.envelope_m1, r.envelope_m2) = envelope_estimates(std::move(points));
  return r;
}

inline SensitivityReport sample_sensitivity_report(const ToyModel& model, const Prompt& prompt, std::size_t step,
                                                   std::size_t layer,
                                                   const std::vector<double>& grid = default_fit_grid()) {
  return sensitivity_report_from_entry(capture_point(model, prompt, step, layer, grid), grid);
}

/// Remainder ratios for offsets h, paired by side: result[k] = {ratio(1 - h_k), ratio(1 + h_k)}.
inline std::vector<std::pair<double, double>> remainder_by_offset(const SensitivityReport& r,
                                                                  const std::vector<double>& offsets) {
  std::vector<std::pair<double, double>> out;
  auto find = [&](double l) {
    for (std::size_t i = 0; i < r.curve.lambdas.size(); ++i) {
      if (r.curve.lambdas[i] == l) return r.remainder_ratios[i];
    }
    throw InvalidInputError("grid lacks lambda " + std::to_string(l));
  };
  for (double h : offsets) out.emplace_back(find(1.0 - h), find(1.0 + h));
  return out;
}

// ---------------------------------------------------------------------------
// Class separation

/// Per-sample Gamma at each probe point, from one reference pass.
inline std::vector<double> sample_gammas(const ToyModel& model, const Prompt& prompt,
                                         const std::vector<ProbePoint>& points) {
  const auto capture = denoise_with_capture(model, prompt);
  std::vector<double> out;
  out.reserve(points.size());
  for (const auto& p : points) {
    const auto& e = capture.at(p.step, p.layer);
    out.push_back(gamma_from_sensitivity(scaling_sensitivity(e.scores, e.values), e.reference.entries.size()));
  }
  return out;
}

/// The (step, layer) pairs covered by a probe.
inline std::vector<ProbePoint> probe_points(const ProbeConfig& probe, const ToyModelConfig& config) {
  std::vector<ProbePoint> out;
  for (std::size_t b : probe.resolve_layers(config))
    for (std::size_t t : probe.steps) out.push_back({t, b});
  return out;
}

struct SeparationEntry {
  ProbePoint point;
  double gamma_benign = 0.0;
  double gamma_backdoor = 0.0;
  double relative_gap = 0.0;  // (bd - ben) / ben
  int sign = 0;
  bool degenerate = false;  // |relative_gap| below kDegeneracyThreshold
};

struct SeparationReport {
  std::size_t n_benign = 0;
  std::size_t n_backdoor = 0;
  std::vector<SeparationEntry> entries;

  double max_abs_gap() const {
    double m = 0.0;
    for (const auto& e : entries) m = std::max(m, std::abs(e.relative_gap));
    return m;
  }
};

inline double mean_of(const std::vector<double>& v) {
  if (v.empty()) throw InvalidInputError("mean of an empty set");
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

/// Monte-Carlo class means of Gamma at each probe point. The second set is
/// labelled backdoor; on a clean model the report is a null baseline.
inline SeparationReport class_separation_report(const ToyModel& model, const std::vector<Prompt>& benign,
                                                const std::vector<Prompt>& backdoor,
                                                const std::vector<ProbePoint>& points) {
  if (benign.empty() || backdoor.empty()) throw InvalidInputError("separation needs both prompt sets");
  if (points.empty()) throw ConfigError("separation needs at least one probe point");
  std::vector<std::vector<double>> ben(points.size());
  std::vector<std::vector<double>> bd(points.size());
  for (const auto& p : benign) {
    const auto g = sample_gammas(model, p, points);
    for (std::size_t k = 0; k < points.size(); ++k) ben[k].push_back(g[k]);
  }
  for (const auto& p : backdoor) {
    const auto g = sample_gammas(model, p, points);
    for (std::size_t k = 0; k < points.size(); ++k) bd[k].push_back(g[k]);
  }
  SeparationReport report{benign.size(), backdoor.size(), {}};
  for (std::size_t k = 0; k < points.size(); ++k) {
    SeparationEntry e;
    e.point = points[k];
    e.gamma_benign = mean_of(ben[k]);
    e.gamma_backdoor = mean_of(bd[k]);
    e.relative_gap = e.gamma_benign > 0.0 ? (e.gamma_backdoor - e.gamma_benign) / e.gamma_benign : 0.0;
    e.sign = e.relative_gap > 0.0 ? 1 : (e.relative_gap < 0.0 ? -1 : 0);
    e.degenerate = std::abs(e.relative_gap) < kDegeneracyThreshold;
    report.entries.push_back(e);
  }
  return report;
}

}  // namespace setdet
