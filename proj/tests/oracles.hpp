#pragma once

// Reference implementations used only by the tests. Each one is written from
// the defining formula with plain loops and shares no code with the library.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <vector>

namespace oracle {

using Grid = std::vector<std::vector<double>>;

inline Grid matmul(const Grid& a, const Grid& b) {
  Grid c(a.size(), std::vector<double>(b.front().size(), 0.0));
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < b.front().size(); ++j)
      for (std::size_t k = 0; k < b.size(); ++k) c[i][j] += a[i][k] * b[k][j];
  return c;
}

// exp(x_j) / sum exp(x_k), no max shift: inputs in tests are small.
inline std::vector<double> softmax(const std::vector<double>& x) {
  std::vector<double> e(x.size());
  double s = 0.0;
  for (std::size_t j = 0; j < x.size(); ++j) s += (e[j] = std::exp(x[j]));
  for (double& v : e) v /= s;
  return e;
}

// softmax(lambda S) V, row by row.
inline Grid scaled_response(const Grid& s, const Grid& v, double lambda) {
  Grid out;
  for (const auto& row : s) {
    std::vector<double> scaled(row.size());
    for (std::size_t j = 0; j < row.size(); ++j) scaled[j] = lambda * row[j];
    const auto a = softmax(scaled);
    std::vector<double> r(v.front().size(), 0.0);
    for (std::size_t j = 0; j < a.size(); ++j)
      for (std::size_t k = 0; k < r.size(); ++k) r[k] += a[j] * v[j][k];
    out.push_back(r);
  }
  return out;
}

// Central difference of a grid-valued function of one variable.
inline Grid central_difference(const std::function<Grid(double)>& f, double x, double h) {
  const Grid up = f(x + h);
  const Grid down = f(x - h);
  Grid d = up;
  for (std::size_t i = 0; i < d.size(); ++i)
    for (std::size_t j = 0; j < d[i].size(); ++j) d[i][j] = (up[i][j] - down[i][j]) / (2.0 * h);
  return d;
}

inline double frobenius_diff(const Grid& a, const Grid& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j) s += (a[i][j] - b[i][j]) * (a[i][j] - b[i][j]);
  return std::sqrt(s);
}

inline double frobenius(const Grid& a) {
  double s = 0.0;
  for (const auto& r : a)
    for (double x : r) s += x * x;
  return std::sqrt(s);
}

inline double mse(const Grid& a, const Grid& b) {
  double s = 0.0;
  std::size_t n = 0;
  for (std::size_t i = 0; i < a.size(); ++i)
    for (std::size_t j = 0; j < a[i].size(); ++j, ++n) s += (a[i][j] - b[i][j]) * (a[i][j] - b[i][j]);
  return s / static_cast<double>(n);
}

// Counts every (positive, negative) pair: win 1, tie 1/2.
inline double pair_auroc(const std::vector<double>& scores, const std::vector<int>& labels) {
  double wins = 0.0;
  double pairs = 0.0;
  for (std::size_t i = 0; i < scores.size(); ++i) {
    if (labels[i] != 1) continue;
    for (std::size_t j = 0; j < scores.size(); ++j) {
      if (labels[j] != 0) continue;
      pairs += 1.0;
      if (scores[i] > scores[j]) wins += 1.0;
      if (scores[i] == scores[j]) wins += 0.5;
    }
  }
  return wins / pairs;
}

inline double accuracy(const std::vector<int>& pred, const std::vector<int>& labels) {
  std::size_t hit = 0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (pred[i] == labels[i]) ++hit;
  return static_cast<double>(hit) / static_cast<double>(pred.size());
}

inline double soft_boundary_loss(const Grid& z, const std::vector<double>& c, double r, double nu) {
  double total = 0.0;
  for (const auto& row : z) {
    double d = 0.0;
    for (std::size_t k = 0; k < c.size(); ++k) d += (row[k] - c[k]) * (row[k] - c[k]);
    if (d > r * r) total += d - r * r;
  }
  return r * r + total / (nu * static_cast<double>(z.size()));
}

// Sort by distance to the plain mean, keep the nearest N - ceil(trim N), average.
inline std::vector<double> trimmed_center(const Grid& z, double trim) {
  const std::size_t n = z.size();
  const std::size_t dim = z.front().size();
  std::vector<double> mean(dim, 0.0);
  for (const auto& r : z)
    for (std::size_t k = 0; k < dim; ++k) mean[k] += r[k] / static_cast<double>(n);
  std::vector<std::pair<double, std::size_t>> dist;
  for (std::size_t i = 0; i < n; ++i) {
    double d = 0.0;
    for (std::size_t k = 0; k < dim; ++k) d += (z[i][k] - mean[k]) * (z[i][k] - mean[k]);
    dist.push_back({d, i});
  }
  std::sort(dist.begin(), dist.end(), [](const auto& a, const auto& b) {
    return a.first != b.first ? a.first < b.first : a.second < b.second;
  });
  const auto keep = n - static_cast<std::size_t>(std::ceil(trim * static_cast<double>(n)));
  std::vector<double> c(dim, 0.0);
  std::vector<std::size_t> kept;
  for (std::size_t i = 0; i < keep; ++i) kept.push_back(dist[i].second);
  std::sort(kept.begin(), kept.end());
  for (std::size_t i : kept)
    for (std::size_t k = 0; k < dim; ++k) c[k] += z[i][k];
  for (double& v : c) v /= static_cast<double>(keep);
  return c;
}

}  // namespace oracle
