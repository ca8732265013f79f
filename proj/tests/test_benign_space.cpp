#include <catch_amalgamated.hpp>

#include <algorithm>
#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "setdet/benign_space.hpp"

using namespace setdet;
using Catch::Matchers::WithinAbs;

namespace {

FeatureLayout synthetic_layout(std::size_t layers, std::size_t steps, std::size_t lambdas) {
  FeatureLayout l;
  for (std::size_t i = 0; i < layers; ++i) {
    l.layers.push_back(i);
    l.spatial_lens.push_back(16);
    l.element_counts.push_back(256);
  }
  for (std::size_t t = 0; t < steps; ++t) l.steps.push_back(t);
  for (std::size_t k = 0; k < lambdas; ++k) l.lambdas.push_back(0.5 + static_cast<double>(k));
  return l;
}

// Positive features with a shared per-coordinate scale, like real shifts.
std::vector<ResponseShiftVector> gaussian_features(const FeatureLayout& layout, std::size_t n, std::uint64_t seed) {
  Rng rng(seed);
  std::vector<double> base(layout.size());
  for (double& b : base) b = std::exp(rng.gaussian());
  std::vector<ResponseShiftVector> out;
  for (std::size_t i = 0; i < n; ++i) {
    ResponseShiftVector f{std::vector<double>(layout.size()), layout};
    for (std::size_t k = 0; k < f.values.size(); ++k) f.values[k] = base[k] * (1.0 + 0.2 * rng.gaussian());
    out.push_back(std::move(f));
  }
  return out;
}

std::vector<std::vector<double>> random_batch(Rng& rng, std::size_t n, std::size_t dim) {
  std::vector<std::vector<double>> b(n, std::vector<double>(dim));
  for (auto& row : b)
    for (double& x : row) x = rng.gaussian();
  return b;
}

}  // namespace

TEST_CASE("standardizer") {
  const auto s = fit_standardizer(std::vector<std::vector<double>>{{0.0, 2.0}, {2.0, 0.0}});
  REQUIRE(s.mean == std::vector<double>{1.0, 1.0});
  REQUIRE(s.stddev == std::vector<double>{1.0, 1.0});

  const auto c = fit_standardizer(std::vector<std::vector<double>>{{3.0, 1.0}, {3.0, 2.0}, {3.0, 4.0}});
  REQUIRE(c.stddev[0] == kSigmaFloor);
  REQUIRE(standardize(std::vector<double>{3.0, 1.0}, c)[0] == 0.0);

  REQUIRE_THROWS_AS(fit_standardizer(std::vector<std::vector<double>>{{1.0}}), InvalidInputError);
  REQUIRE_THROWS_AS(fit_standardizer(std::vector<std::vector<double>>{}), InvalidInputError);

  Rng rng(1);
  const auto rows = random_batch(rng, 50, 6);
  const auto fit = fit_standardizer(rows);
  std::vector<double> mean(6, 0.0);
  std::vector<double> sq(6, 0.0);
  for (const auto& r : rows) {
    const auto z = standardize(r, fit);
    for (std::size_t k = 0; k < 6; ++k) {
      mean[k] += z[k] / 50.0;
      sq[k] += z[k] * z[k] / 50.0;
    }
    const auto back = unstandardize(z, fit);
    for (std::size_t k = 0; k < 6; ++k) REQUIRE_THAT(back[k], WithinAbs(r[k], 1e-12));
  }
  for (std::size_t k = 0; k < 6; ++k) {
    REQUIRE_THAT(mean[k], WithinAbs(0.0, 1e-10));
    REQUIRE_THAT(std::sqrt(sq[k] - mean[k] * mean[k]), WithinAbs(1.0, 1e-10));
  }

  const auto at_mean = standardize(fit.mean, fit);
  for (double v : at_mean) REQUIRE(v == 0.0);
  const Standardizer unit{{0.0, 0.0}, {1.0, 1.0}};
  REQUIRE(standardize(std::vector<double>{0.3, -2.0}, unit) == std::vector<double>{0.3, -2.0});
  REQUIRE_THROWS_AS(standardize(std::vector<double>{1.0}, unit), ShapeError);

  const auto layout = synthetic_layout(2, 2, 2);
  auto feats = gaussian_features(layout, 3, 1);
  feats[1].layout = synthetic_layout(2, 2, 3);
  REQUIRE_THROWS(fit_standardizer(feats));
}

TEST_CASE("encoder edge cases") {
  Rng rng(2);
  SECTION("a single layer token has zero std pooling") {
    const auto p = init_encoder({1, 5, 32, 16, 16, 8}, 3);
    const auto x = random_batch(rng, 1, 5).front();
    const auto t = detail::encode_trace(x, p);
    for (std::size_t k = 16; k < 32; ++k) REQUIRE(t.pooled[k] == 0.0);
    for (double v : encode(x, p)) REQUIRE(std::isfinite(v));
  }
  SECTION("permuting layer tokens leaves z unchanged") {
    const auto p = init_encoder({4, 5, 32, 16, 16, 8}, 4);
    const auto x = random_batch(rng, 1, 20).front();
    std::vector<double> y;
    for (std::size_t tok : {2, 0, 3, 1}) y.insert(y.end(), x.begin() + tok * 5, x.begin() + tok * 5 + 5);
    const auto zx = encode(x, p);
    const auto zy = encode(y, p);
    for (std::size_t k = 0; k < zx.size(); ++k) REQUIRE_THAT(zy[k], WithinAbs(zx[k], 1e-12));
  }
  SECTION("doubling the final layer doubles z") {
    auto p = init_encoder({3, 5, 32, 16, 16, 8}, 5);
    const auto x = random_batch(rng, 1, 15).front();
    const auto o = p.shape.offsets();
    for (std::size_t i = o.b4; i < o.total; ++i) p.theta[i] = 0.3 * rng.gaussian();
    const auto z = encode(x, p);
    for (std::size_t i = o.w4; i < o.total; ++i) p.theta[i] *= 2.0;
    const auto z2 = encode(x, p);
    for (std::size_t k = 0; k < z.size(); ++k) {
      REQUIRE(std::isfinite(z[k]));
      REQUIRE_THAT(z2[k], WithinAbs(2.0 * z[k], 1e-12));
    }
  }
  const auto p = init_encoder({2, 3, 4, 4, 4, 2}, 1);
  REQUIRE_THROWS_AS(encode(std::vector<double>(5), p), ShapeError);
}

TEST_CASE("encoder init is seeded with zero biases") {
  const EncoderShape shape{4, 25, 32, 16, 16, 8};
  const auto a = init_encoder(shape, 7);
  REQUIRE(a.theta == init_encoder(shape, 7).theta);
  REQUIRE(a.theta != init_encoder(shape, 8).theta);
  const auto o = shape.offsets();
  REQUIRE(o.total == a.theta.size());
  for (std::size_t i = o.b1; i < o.w2; ++i) REQUIRE(a.theta[i] == 0.0);
  for (std::size_t i = o.b4; i < o.total; ++i) REQUIRE(a.theta[i] == 0.0);
}

TEST_CASE("robust_center") {
  Rng rng(3);
  const auto cloud = random_batch(rng, 40, 3);
  const auto plain = robust_center(cloud, 0.0);
  std::vector<double> mean(3, 0.0);
  for (const auto& r : cloud)
    for (std::size_t k = 0; k < 3; ++k) mean[k] += r[k];
  for (std::size_t k = 0; k < 3; ++k) REQUIRE_THAT(plain[k], WithinAbs(mean[k] / 40.0, 1e-14));

  std::vector<std::vector<double>> outlier(10, std::vector<double>{0.0, 0.0});
  outlier.push_back({100.0, 0.0});
  REQUIRE(robust_center(outlier, 0.1) == std::vector<double>{0.0, 0.0});

  for (double trim : {0.05, 0.1, 0.3}) {
    const auto got = robust_center(cloud, trim);
    const auto want = oracle::trimmed_center(cloud, trim);
    for (std::size_t k = 0; k < 3; ++k) REQUIRE_THAT(got[k], WithinAbs(want[k], 1e-12));
  }

  // ties at equal distance: the earlier point is kept
  const std::vector<std::vector<double>> ties{{1.0}, {-1.0}, {0.0}, {0.0}};
  REQUIRE(robust_center(ties, 0.25) == oracle::trimmed_center(ties, 0.25));
  REQUIRE(robust_center(ties, 0.25) == std::vector<double>{1.0 / 3.0});

  auto shuffled = cloud;
  std::reverse(shuffled.begin(), shuffled.end());
  const auto a = robust_center(cloud, 0.05);
  const auto b = robust_center(shuffled, 0.05);
  for (std::size_t k = 0; k < 3; ++k) REQUIRE_THAT(a[k], WithinAbs(b[k], 1e-14));

  REQUIRE_THROWS_AS(robust_center(cloud, 0.5), ConfigError);
  REQUIRE_THROWS_AS(robust_center({{1.0}}, 0.0), InvalidInputError);
}

TEST_CASE("soft_boundary_loss") {
  const std::vector<double> c{0.5, -1.0};
  REQUIRE(soft_boundary_loss({c, c, c}, c, 0.0, 0.1) == 0.0);
  REQUIRE_THAT(soft_boundary_loss({{3.5, 3.0}}, c, 2.0, 0.1), WithinAbs(4.0 + (25.0 - 4.0) / 0.1, 1e-12));
  Rng rng(4);
  for (int trial = 0; trial < 10; ++trial) {
    const auto z = random_batch(rng, 20, 4);
    const std::vector<double> center{0.1, 0.0, -0.2, 0.3};
    const double r = 0.5 + trial * 0.2;
    REQUIRE_THAT(soft_boundary_loss(z, center, r, 0.05),
                 WithinAbs(oracle::soft_boundary_loss(z, center, r, 0.05), 1e-12));
  }
  REQUIRE_THROWS_AS(soft_boundary_loss({c}, c, 1.0, 0.0), ConfigError);
  REQUIRE_THROWS_AS(soft_boundary_loss({c}, c, 1.0, 1.0), ConfigError);
}

TEST_CASE("loss_gradient") {
  Rng rng(5);
  auto p = init_encoder({3, 4, 32, 16, 16, 8}, 6);
  for (double& v : p.theta) v += 0.05 * rng.gaussian();  // nonzero biases too
  const auto batch = random_batch(rng, 8, 12);
  std::vector<double> center(8);
  for (double& v : center) v = 0.1 * rng.gaussian();

  SECTION("inside the ball the gradient vanishes") {
    const auto g = loss_gradient(p, batch, center, 1e6, 0.05);
    for (double v : g) REQUIRE(v == 0.0);
  }
  SECTION("matches central differences on every parameter") {
    const double nu = 0.05;
    const double radius = 0.0;
    const auto g = loss_gradient(p, batch, center, radius, nu);
    double gmax = 0.0;
    for (double v : g) gmax = std::max(gmax, std::abs(v));
    REQUIRE(gmax > 0.0);
    const double h = 1e-5;
    for (std::size_t i = 0; i < p.theta.size(); ++i) {
      auto up = p;
      auto down = p;
      up.theta[i] += h;
      down.theta[i] -= h;
      const double fd = (encoder_loss(up, batch, center, radius, nu) - encoder_loss(down, batch, center, radius, nu)) /
                        (2.0 * h);
      const double denom = std::max({std::abs(fd), std::abs(g[i]), 1e-3 * gmax});
      REQUIRE(std::abs(fd - g[i]) / denom <= 1e-4);
    }
  }
  SECTION("duplicating the batch leaves the mean-loss gradient unchanged") {
    auto doubled = batch;
    doubled.insert(doubled.end(), batch.begin(), batch.end());
    const auto a = loss_gradient(p, batch, center, 0.1, 0.05);
    const auto b = loss_gradient(p, doubled, center, 0.1, 0.05);
    for (std::size_t i = 0; i < a.size(); ++i) REQUIRE_THAT(b[i], WithinAbs(a[i], 1e-12 * (1.0 + std::abs(a[i]))));
  }
  SECTION("identical layer tokens take the std guard") {
    auto q = init_encoder({3, 2, 8, 4, 4, 2}, 1);
    const std::vector<std::vector<double>> same{{0.3, -0.1, 0.3, -0.1, 0.3, -0.1}};
    const auto g = loss_gradient(q, same, std::vector<double>{5.0, 5.0}, 0.0, 0.5);
    for (double v : g) REQUIRE(std::isfinite(v));
  }
}

TEST_CASE("quantile_radius") {
  const std::vector<double> d{1.0, 4.0, 9.0, 16.0, 25.0, 36.0, 49.0, 64.0, 81.0, 100.0};
  REQUIRE(quantile_radius(d, 0.05) == 10.0);
  REQUIRE(quantile_radius(d, 0.1) == 9.0);
  REQUIRE(quantile_radius(d, 0.25) == 8.0);
  REQUIRE(violation_fraction(d, quantile_radius(d, 0.25)) == 0.2);
  Rng rng(6);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> x(137);
    for (double& v : x) v = std::exp(rng.gaussian());
    for (double nu : {0.01, 0.05, 0.2}) {
      const double r = quantile_radius(x, nu);
      REQUIRE(violation_fraction(x, r) <= nu + 1.0 / 137.0);
      REQUIRE(violation_fraction(x, r) <= nu);
    }
  }
}

TEST_CASE("training calibrates nu on Gaussian features") {
  const auto layout = synthetic_layout(4, 5, 5);
  const auto feats = gaussian_features(layout, 1000, 11);
  const BenignHyper hyper;
  const auto m = train_benign_space(feats, hyper);
  REQUIRE(m.log.loss.size() == hyper.epochs);
  for (double v : m.log.violations) REQUIRE(v <= hyper.nu + 1.0 / 1000.0);
  std::vector<double> d;
  for (const auto& f : feats) d.push_back(detection_score(m, f));
  const double frac = violation_fraction(d, m.radius);
  REQUIRE(frac >= 0.0);
  REQUIRE(frac <= 2.0 * hyper.nu);
  REQUIRE(std::isfinite(m.radius));
  REQUIRE(m.radius >= 0.0);

  BenignHyper loose = hyper;
  loose.nu = 0.5;
  loose.epochs = 20;
  BenignHyper tight = hyper;
  tight.nu = 0.01;
  tight.epochs = 20;
  REQUIRE(train_benign_space(feats, loose).radius <= train_benign_space(feats, tight).radius);
}

TEST_CASE("training is deterministic and validates its input") {
  const auto layout = synthetic_layout(2, 3, 2);
  const auto feats = gaussian_features(layout, 80, 12);
  BenignHyper hyper;
  hyper.epochs = 15;
  const auto a = train_benign_space(feats, hyper, "fp");
  const auto b = train_benign_space(feats, hyper, "fp");
  REQUIRE(serialize_benign_space(a) == serialize_benign_space(b));
  REQUIRE(a.fingerprint == "fp");

  REQUIRE_THROWS_AS(train_benign_space({feats.begin(), feats.begin() + 10}, hyper), InvalidInputError);
  BenignHyper bad = hyper;
  bad.nu = 0.0;
  REQUIRE_THROWS_AS(train_benign_space(feats, bad), ConfigError);
  bad = hyper;
  bad.learning_rate = 1e300;
  REQUIRE_THROWS_AS(train_benign_space(feats, bad), TrainingError);
}

TEST_CASE("classify and detect") {
  REQUIRE(classify(4.0, 2.0) == 0);
  REQUIRE(classify(0.0, 3.0) == 0);
  REQUIRE(classify(1e-9, 0.0) == 1);

  const auto layout = synthetic_layout(2, 3, 2);
  const auto feats = gaussian_features(layout, 80, 13);
  BenignHyper hyper;
  hyper.epochs = 10;
  auto m = train_benign_space(feats, hyper);

  // pipeline vs composed steps
  for (std::size_t i = 0; i < 5; ++i) {
    const auto z = encode(standardize(feats[i].values, m.standardizer), m.encoder);
    double d = 0.0;
    for (std::size_t k = 0; k < z.size(); ++k) d += (z[k] - m.center[k]) * (z[k] - m.center[k]);
    const auto r = detect(m, feats[i]);
    REQUIRE(r.score == detection_score(m, feats[i]));
    REQUIRE_THAT(r.score, WithinAbs(d, 1e-12));
    REQUIRE(r.label == (r.margin > 0.0 ? 1 : 0));
  }

  auto at_center = m;
  at_center.center = encode(standardize(feats[0].values, m.standardizer), m.encoder);
  REQUIRE(detection_score(at_center, feats[0]) == 0.0);

  const ResponseShiftVector copy{feats[3].values, layout};
  REQUIRE(detection_score(m, copy) == detection_score(m, feats[3]));

  const ResponseShiftVector wrong{std::vector<double>(8, 0.0), synthetic_layout(2, 2, 2)};
  REQUIRE_THROWS_AS(detection_score(m, wrong), IncompatibleError);
}

TEST_CASE("benign-space files round-trip bit-exactly") {
  const auto layout = synthetic_layout(3, 2, 2);
  const auto feats = gaussian_features(layout, 70, 14);
  BenignHyper hyper;
  hyper.epochs = 12;
  auto m = train_benign_space(feats, hyper, "abc");
  m.run = "def";
  const std::string bytes = serialize_benign_space(m);
  const auto back = deserialize_benign_space(bytes);
  REQUIRE(serialize_benign_space(back) == bytes);
  REQUIRE(back.radius == m.radius);
  REQUIRE(back.run == "def");
  REQUIRE(back.log.loss == m.log.loss);
  for (const auto& f : feats) REQUIRE(detection_score(back, f) == detection_score(m, f));
  REQUIRE_THROWS_AS(deserialize_benign_space(bytes.substr(0, 40)), FormatError);
}
