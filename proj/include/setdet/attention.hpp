#pragma once

// Single-head cross-attention math: scores, responses, score-scaled responses
// at the four probe positions, and the analytic derivative of the response
// with respect to the score scale.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <string>
#include <string_view>

#include "setdet/errors.hpp"
#include "setdet/matrix.hpp"

namespace setdet {

/// Where the scaling factor is injected into R = softmax(S) V.
enum class ScalePosition {
  kInV,    // softmax(lambda S) V   (default)
  kInNoV,  // softmax(lambda S)
  kOutV,   // lambda softmax(S) V
  kOutNoV  // lambda softmax(S)
};

inline std::string_view to_string(ScalePosition p) {
  switch (p) {
    case ScalePosition::kInV: return "in_V";
    case ScalePosition::kInNoV: return "in_noV";
    case ScalePosition::kOutV: return "out_V";
    case ScalePosition::kOutNoV: return "out_noV";
  }
  throw ConfigError("unknown scaling position");
}

inline ScalePosition parse_scale_position(std::string_view name) {
  if (name == "in_V") return ScalePosition::kInV;
  if (name == "in_noV") return ScalePosition::kInNoV;
  if (name == "out_V") return ScalePosition::kOutV;
  if (name == "out_noV") return ScalePosition::kOutNoV;
  throw ConfigError("unknown scaling position '" + std::string(name) + "'");
}

/// True when the captured response includes the value projection.
inline bool uses_values(ScalePosition p) {
  switch (p) {
    case ScalePosition::kInV:
    case ScalePosition::kOutV: return true;
    case ScalePosition::kInNoV:
    case ScalePosition::kOutNoV: return false;
  }
  throw ConfigError("unknown scaling position");
}

/// n x m attention scores (queries x text tokens), already divided by sqrt(d).
struct ScoreMatrix {
  Matrix entries;
  std::size_t dim = 1;  // d, the key/query width used for the sqrt(d) divisor
};

/// m x d_v value matrix, one row per text token.
struct ValueMatrix {
  Matrix entries;
};

struct AttentionResponse {
  Matrix entries;
  double lambda = 1.0;
  ScalePosition position = ScalePosition::kInV;
};

/// dR/dlambda evaluated at a given lambda (lambda = 1 unless stated).
struct SensitivityMatrix {
  Matrix entries;
};

namespace detail {

inline void require_finite(const Matrix& m, const char* what) {
  if (!m.all_finite()) throw InvalidInputError(std::string(what) + " has a non-finite entry");
}

inline void require_pair(const ScoreMatrix& s, const ValueMatrix& v) {
  if (s.entries.rows() == 0 || s.entries.cols() == 0) throw ShapeError("empty score matrix");
  if (s.entries.cols() != v.entries.rows()) {
    throw ShapeError("score matrix " + s.entries.shape_str() + " does not pair with value matrix " +
                     v.entries.shape_str());
  }
}

// Softmax of (scale * row) into out, with max subtraction.
inline void softmax_row(std::span<const double> in, double scale, std::span<double> out) {
  double peak = scale * in[0];
  for (double x : in) peak = std::max(peak, scale * x);
  double total = 0.0;
  for (std::size_t j = 0; j < in.size(); ++j) {
    out[j] = std::exp(scale * in[j] - peak);
    total += out[j];
  }
  const double inv = 1.0 / total;
  for (double& y : out) y *= inv;
}

inline Matrix scaled_softmax(const Matrix& m, double scale) {
  require_finite(m, "softmax input");
  Matrix out(m.rows(), m.cols());
  for (std::size_t i = 0; i < m.rows(); ++i) softmax_row(m.row(i), scale, out.row(i));
  return out;
}

}  // namespace detail

/// Row-wise softmax with per-row max subtraction.
inline Matrix row_softmax(const Matrix& m) { return detail::scaled_softmax(m, 1.0); }

/// S = Q K^T / sqrt(d).
inline ScoreMatrix attention_scores(const Matrix& queries, const Matrix& keys, std::size_t dim) {
  if (dim == 0) throw ShapeError("attention dimension must be positive");
  if (queries.cols() != keys.cols()) {
    throw ShapeError("queries " + queries.shape_str() + " and keys " + keys.shape_str() +
                     " disagree on inner dimension");
  }
  if (queries.cols() != dim) {
    throw ShapeError("inner dimension " + std::to_string(queries.cols()) + " != d = " + std::to_string(dim));
  }
  detail::require_finite(queries, "queries");
  detail::require_finite(keys, "keys");
  ScoreMatrix s{matmul_transposed(queries, keys), dim};
  const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(dim));
  for (double& x : s.entries.flat()) x *= inv_sqrt_d;
  return s;
}

/// Attention matrix at a position: softmax(lambda S) for in_*, lambda softmax(S) for out_*.
inline Matrix scaled_attention(const ScoreMatrix& s, double lambda, ScalePosition position) {
  if (!std::isfinite(lambda)) throw InvalidInputError("scaling factor must be finite");
  switch (position) {
    case ScalePosition::kInV:
    case ScalePosition::kInNoV: return detail::scaled_softmax(s.entries, lambda);
    case ScalePosition::kOutV:
    case ScalePosition::kOutNoV: {
      Matrix a = detail::scaled_softmax(s.entries, 1.0);
      for (double& x : a.flat()) x *= lambda;
      return a;
    }
  }
  throw ConfigError("unknown scaling position");
}

inline AttentionResponse scaled_response(const ScoreMatrix& s, const ValueMatrix& v, double lambda,
                                         ScalePosition position) {
  detail::require_pair(s, v);
  Matrix attn = scaled_attention(s, lambda, position);
  if (uses_values(position)) {
    detail::require_finite(v.entries, "value matrix");
    return {matmul(attn, v.entries), lambda, position};
  }
  return {std::move(attn), lambda, position};
}

/// R = softmax(S) V.
inline AttentionResponse cross_attention_response(const ScoreMatrix& s, const ValueMatrix& v) {
  return scaled_response(s, v, 1.0, ScalePosition::kInV);
}

/// Analytic d/dlambda of softmax(lambda S) V. Row i is
/// s_i (Diag(a_i) - a_i^T a_i) V with a_i = softmax(lambda s_i), which expands
/// to sum_j a_ij (s_ij - <a_i, s_i>) V_j.
inline SensitivityMatrix scaling_sensitivity(const ScoreMatrix& s, const ValueMatrix& v, double lambda = 1.0) {
  detail::require_pair(s, v);
  detail::require_finite(v.entries, "value matrix");
  const Matrix attn = detail::scaled_softmax(s.entries, lambda);
  const std::size_t n = s.entries.rows();
  const std::size_t m = s.entries.cols();
  const std::size_t dv = v.entries.cols();
  Matrix g(n, dv);
  std::vector<double> weight(m);
  for (std::size_t i = 0; i < n; ++i) {
    double mean_score = 0.0;
    for (std::size_t j = 0; j < m; ++j) mean_score += attn(i, j) * s.entries(i, j);
    for (std::size_t j = 0; j < m; ++j) weight[j] = attn(i, j) * (s.entries(i, j) - mean_score);
    for (std::size_t j = 0; j < m; ++j) {
      const double w = weight[j];
      for (std::size_t k = 0; k < dv; ++k) g(i, k) += w * v.entries(j, k);
    }
  }
  return {std::move(g)};
}

/// Closed form of the two-token case: p1 p2 (a - b)(v1 - v2) at lambda = 1.
inline double two_token_sensitivity(double a, double b, double v1, double v2) {
  if (!std::isfinite(a) || !std::isfinite(b) || !std::isfinite(v1) || !std::isfinite(v2)) {
    throw InvalidInputError("two-token sensitivity needs finite inputs");
  }
  // p1 = 1 / (1 + e^(b-a)), evaluated on the side that cannot overflow.
  const double diff = a - b;
  const double e = std::exp(-std::abs(diff));
  const double big = 1.0 / (1.0 + e);
  const double small = e / (1.0 + e);
  const double p1 = diff >= 0 ? big : small;
  const double p2 = diff >= 0 ? small : big;
  return p1 * p2 * diff * (v1 - v2);
}

}  // namespace setdet
