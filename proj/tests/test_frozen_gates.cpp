// Frozen-seed regression gates on the reference configuration. Gates the toy
// model cannot meet are tagged [!shouldfail]: the assertion stays literal, its
// measured value is printed, and an unexpected pass is reported as a failure.

#include <catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "setdet.hpp"

using namespace setdet;

namespace {

RunConfig reference() {
  RunConfig c;
  c.apply_master_seed();
  return c;
}

std::vector<Prompt> trigger_free(const RunConfig& c, std::size_t n, std::uint64_t stream) {
  return synth_benign(c.model, n, c.backdoor.token, mix_seed(c.dataset_seed(), stream));
}

PlantingReport planting_report() {
  const RunConfig c = reference();
  const ToyModel clean = build_toy_model(c.model);
  return measure_planting_effect(clean, plant_backdoor(clean, c.backdoor), c.backdoor, trigger_free(c, 50, 50));
}

}  // namespace

TEST_CASE("projection_edit changes trigger-free outputs") {
  const auto r = planting_report();
  INFO("trigger-free deviation " << r.trigger_free_deviation << ", trigger deviation " << r.trigger_deviation);
  REQUIRE(r.trigger_free_deviation > 0.0);
  REQUIRE(r.trigger_deviation > r.trigger_free_deviation);
}

TEST_CASE("planting gate: trigger deviation at least 5x the trigger-free deviation", "[!shouldfail]") {
  const auto r = planting_report();
  INFO("ratio " << r.ratio());
  REQUIRE(r.ratio() >= 5.0);
}

TEST_CASE("embedding_trigger leaves trigger-free prompts untouched") {
  RunConfig c = reference();
  c.backdoor.kind = BackdoorKind::kEmbeddingTrigger;
  const ToyModel clean = build_toy_model(c.model);
  const auto r = measure_planting_effect(clean, plant_backdoor(clean, c.backdoor), c.backdoor, trigger_free(c, 20, 51));
  REQUIRE(r.trigger_free_deviation == 0.0);
  REQUIRE(r.trigger_deviation > 0.0);
}

TEST_CASE("null separation gate: clean benign vs benign gaps below 5%", "[!shouldfail]") {
  const RunConfig c = reference();
  const ToyModel clean = build_toy_model(c.model);
  const auto rep = class_separation_report(clean, trigger_free(c, 100, 60), trigger_free(c, 100, 61),
                                           probe_points(c.probe, c.model));
  INFO("max |gap| " << rep.max_abs_gap());
  REQUIRE(rep.max_abs_gap() < 0.05);
}

TEST_CASE("planted separation reaches 10% somewhere") {
  const RunConfig c = reference();
  const ToyModel planted = plant_backdoor(build_toy_model(c.model), c.backdoor);
  auto trig = trigger_free(c, 100, 71);
  for (auto& p : trig) p = make_trigger_prompt(p, c.backdoor);
  const auto rep = class_separation_report(planted, trigger_free(c, 100, 70), trig, probe_points(c.probe, c.model));
  INFO("max |gap| " << rep.max_abs_gap());
  REQUIRE(rep.max_abs_gap() >= 0.10);
}

TEST_CASE("default features are strictly positive on the frozen seed") {
  const RunConfig c = reference();
  const ToyModel clean = build_toy_model(c.model);
  for (const auto& p : trigger_free(c, 5, 80)) {
    for (double v : extract_feature_vector(clean, p, c.probe).values) REQUIRE(v > 0.0);
  }
}
