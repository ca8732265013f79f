#include <catch_amalgamated.hpp>

#include <filesystem>
#include <set>
#include <vector>

#include "oracles.hpp"
#include "setdet/eval.hpp"

using namespace setdet;
using Catch::Matchers::WithinAbs;

namespace {

RunConfig small_config() {
  RunConfig c;
  c.probe.steps = {0, 1};
  c.n_train = 64;
  c.n_test_benign = 12;
  c.n_test_trigger = 12;
  c.learner.epochs = 10;
  c.threads = 2;
  return c;
}

std::string slurp(const std::filesystem::path& p) { return read_file(p.string()); }

}  // namespace

TEST_CASE("auroc examples") {
  REQUIRE(auroc(std::vector<double>{0.1, 0.4, 0.35, 0.8}, std::vector<int>{0, 0, 1, 1}) == 0.75);
  REQUIRE(auroc(std::vector<double>{0.1, 0.2, 0.3, 0.9}, std::vector<int>{0, 0, 1, 1}) == 1.0);
  REQUIRE(auroc(std::vector<double>{2.0, 2.0, 2.0}, std::vector<int>{0, 1, 0}) == 0.5);
  REQUIRE_THROWS_AS(auroc(std::vector<double>{1.0, 2.0}, std::vector<int>{1, 1}), InvalidInputError);
  REQUIRE_THROWS_AS(auroc(std::vector<double>{1.0, 2.0}, std::vector<int>{0, 2}), InvalidInputError);
  REQUIRE_THROWS_AS(auroc(std::vector<double>{1.0}, std::vector<int>{0, 1}), ShapeError);
}

TEST_CASE("auroc properties") {
  Rng rng(1);
  for (int trial = 0; trial < 50; ++trial) {
    const std::size_t n = 2 + rng.uniform_index(0, 19);
    std::vector<double> s(n);
    std::vector<int> l(n);
    for (std::size_t i = 0; i < n; ++i) {
      s[i] = static_cast<double>(rng.uniform_index(0, 6));  // plenty of ties
      l[i] = static_cast<int>(rng.uniform_index(0, 2));
    }
    l[0] = 0;
    l[1] = 1;
    REQUIRE(auroc(s, l) == oracle::pair_auroc(s, l));

    std::vector<double> t(n);
    for (std::size_t i = 0; i < n; ++i) t[i] = std::exp(3.0 * s[i]) - 7.0;
    REQUIRE(auroc(t, l) == auroc(s, l));

    std::vector<double> distinct(n);
    for (std::size_t i = 0; i < n; ++i) distinct[i] = rng.gaussian();
    std::vector<int> flipped(n);
    for (std::size_t i = 0; i < n; ++i) flipped[i] = 1 - l[i];
    REQUIRE_THAT(auroc(distinct, l) + auroc(distinct, flipped), WithinAbs(1.0, 1e-15));
  }
}

TEST_CASE("accuracy") {
  const std::vector<int> y{0, 1, 1, 0};
  REQUIRE(accuracy(y, y) == 1.0);
  REQUIRE(accuracy(std::vector<int>{1, 0, 0, 1}, y) == 0.0);
  REQUIRE(accuracy(std::vector<int>{0, 0, 1, 1}, y) == 0.5);
  REQUIRE(accuracy(std::vector<int>{0, 0, 1, 1}, y) == oracle::accuracy({0, 0, 1, 1}, y));
  REQUIRE_THROWS_AS(accuracy(std::vector<int>{0}, y), ShapeError);
}

TEST_CASE("synthetic datasets") {
  const ToyModelConfig model;
  DatasetSpec spec;
  spec.seed = 5;
  const Dataset d = synth_dataset(spec, model);
  REQUIRE(d.benign.size() == 200);
  REQUIRE(d.trigger.size() == 200);
  for (const auto& p : d.benign) {
    REQUIRE_FALSE(p.contains(spec.backdoor.token));
    REQUIRE(p.token_ids.size() == 8);
    REQUIRE(p.content_len() >= 4);
    // pads only trail the content
    bool seen_pad = false;
    for (std::size_t t : p.token_ids) {
      if (t == kPadToken) seen_pad = true;
      REQUIRE((t == kPadToken) == seen_pad);
    }
  }
  for (const auto& p : d.trigger) REQUIRE(p.contains(spec.backdoor.token));
  const Dataset again = synth_dataset(spec, model);
  REQUIRE(again.benign == d.benign);
  REQUIRE(again.trigger == d.trigger);

  std::set<std::vector<std::size_t>> exclude;
  for (const auto& p : d.benign) exclude.insert(p.token_ids);
  spec.seed = 6;
  for (const auto& p : synth_dataset(spec, model, exclude).benign) REQUIRE_FALSE(exclude.count(p.token_ids));

  ToyModelConfig tiny;
  tiny.vocab_size = 2;
  REQUIRE_THROWS_AS(synth_benign(tiny, 3, 1, 0), ConfigError);
  spec.n_trigger = 0;
  REQUIRE_THROWS_AS(synth_dataset(spec, model), ConfigError);
}

TEST_CASE("prompt files") {
  const std::vector<Prompt> ps{{{1, 2, 3, 0}}, {{9, 8, 0, 0}}};
  const std::string text = format_prompts(ps);
  REQUIRE(text == "1 2 3 0\n9 8 0 0\n");
  REQUIRE(parse_prompts(text) == ps);
  REQUIRE(parse_prompts("# header\n\n1 2 3 0\n  9 8 0 0  \n") == ps);
  REQUIRE_THROWS_AS(parse_prompts("1 x 3\n"), FormatError);
  REQUIRE_THROWS_AS(parse_prompts("1 -2 3\n"), InvalidInputError);
}

TEST_CASE("run config parsing") {
  const RunConfig d = parse_run_config("{}");
  REQUIRE(d.seed == 42);
  REQUIRE(d.model.seed == 42);
  REQUIRE(d.backdoor.seed == mix_seed(42, 2));
  REQUIRE(d.learner.seed == mix_seed(42, 4));
  REQUIRE(d.dataset_seed() == mix_seed(42, 3));
  REQUIRE(d.n_train == 1000);
  REQUIRE(d.backdoor.kind == BackdoorKind::kProjectionEdit);
  REQUIRE(d.backdoor.strength == 4.0);

  const RunConfig o = parse_run_config(R"({"seed": 3, "dataset": {"n_train": 100}})", 9);
  REQUIRE(o.seed == 9);
  REQUIRE(o.model.seed == 9);
  REQUIRE(o.n_train == 100);

  // round trip through JSON
  const RunConfig back = parse_run_config(nlohmann::json(o).dump());
  REQUIRE(config_fingerprint(back) == config_fingerprint(o));
  REQUIRE(config_fingerprint(o) != config_fingerprint(d));

  RunConfig threads = d;
  threads.threads = 7;
  REQUIRE(config_fingerprint(threads) == config_fingerprint(d));

  REQUIRE_THROWS_AS(parse_run_config("{not json"), ConfigError);
  REQUIRE_THROWS_AS(parse_run_config(R"({"backdoor": {"kind": "other"}})"), ConfigError);
  REQUIRE_THROWS_AS(parse_run_config(R"({"dataset": {"n_train": 10}})"), ConfigError);
  REQUIRE_THROWS_AS(parse_run_config(R"({"probe": {"lambdas": [1.0]}})"), ConfigError);
}

TEST_CASE("fingerprint mismatches are refused") {
  const RunConfig c = small_config();
  RunConfig cc = c;
  cc.apply_master_seed();
  const ToyModel model = plant_backdoor(build_toy_model(cc.model), cc.backdoor);
  const auto prompts = synth_benign(cc.model, 70, 7, 1);
  const FeatureSet set = make_feature_set(model, cc.probe, prompts, 0, 1, "run-a");
  std::vector<ResponseShiftVector> v;
  for (std::size_t i = 0; i < set.records.size(); ++i) v.push_back(set.vector_at(i));
  BenignSpaceModel space = train_benign_space(v, cc.learner, set.fingerprint);
  space.run = "run-a";
  REQUIRE(score_feature_set(space, set).size() == 70);

  const ToyModel clean = build_toy_model(cc.model);
  const FeatureSet other = make_feature_set(clean, cc.probe, {prompts[0]}, 0, 1, "run-a");
  REQUIRE(other.fingerprint != set.fingerprint);
  REQUIRE_THROWS_AS(score_feature_set(space, other), IncompatibleError);

  FeatureSet other_run = set;
  other_run.run = "run-b";
  REQUIRE_THROWS_AS(score_feature_set(space, other_run), IncompatibleError);

  FeatureSet merged = set;
  REQUIRE_THROWS_AS(append_records(merged, other), IncompatibleError);
}

TEST_CASE("end-to-end run is deterministic and disjoint") {
  const auto dir = std::filesystem::temp_directory_path() / "setdet_test_eval";
  std::filesystem::remove_all(dir);
  const RunConfig c = small_config();
  const EvalResult a = run_end_to_end(c, (dir / "a").string());
  RunConfig single = c;
  single.threads = 1;
  const EvalResult b = run_end_to_end(single, (dir / "b").string());

  REQUIRE(a.rows.size() == 24);
  REQUIRE(a.auroc >= 0.0);
  REQUIRE(a.auroc <= 1.0);
  REQUIRE(a.acc >= 0.0);
  REQUIRE(a.acc <= 1.0);
  for (const char* name : {"model.bin", "features_train.jsonl", "features_test.jsonl", "benign_space.bin",
                           "results.tsv", "results.json", "score_histogram.tsv", "config.json"}) {
    REQUIRE(slurp(dir / "a" / name) == slurp(dir / "b" / name));
    REQUIRE(slurp(dir / "a" / name).size() > 0);
  }
  REQUIRE(result_table(a) == slurp(dir / "a" / "results.tsv"));

  // every artifact carries the run fingerprint
  const std::string fp = a.fingerprint;
  REQUIRE(fp == config_fingerprint([&] {
            RunConfig x = c;
            x.apply_master_seed();
            return x;
          }()));
  REQUIRE(load_features((dir / "a" / "features_train.jsonl").string()).run == fp);
  REQUIRE(load_features((dir / "a" / "features_test.jsonl").string()).run == fp);
  REQUIRE(load_benign_space((dir / "a" / "benign_space.bin").string()).run == fp);
  REQUIRE(deserialize_container(slurp(dir / "a" / "model.bin")).header.at("run") == fp);
  REQUIRE(slurp(dir / "a" / "results.tsv").find(fp) != std::string::npos);
  REQUIRE(slurp(dir / "a" / "score_histogram.tsv").find(fp) != std::string::npos);

  // train and test prompts never overlap
  const auto train = load_features((dir / "a" / "features_train.jsonl").string());
  const auto test = load_features((dir / "a" / "features_test.jsonl").string());
  std::set<std::vector<std::size_t>> seen;
  for (const auto& r : train.records) seen.insert(r.prompt.token_ids);
  for (const auto& r : test.records) REQUIRE_FALSE(seen.count(r.prompt.token_ids));

  // the stored artifacts reproduce the scores
  const auto space = load_benign_space((dir / "a" / "benign_space.bin").string());
  const auto rescored = score_feature_set(space, test);
  for (std::size_t i = 0; i < rescored.size(); ++i) REQUIRE(rescored[i].score == a.rows[i].score);

  RunConfig seeded = c;
  seeded.seed = 43;
  REQUIRE(run_end_to_end(seeded).fingerprint != fp);
  std::filesystem::remove_all(dir);
}

TEST_CASE("stage failures are tagged") {
  RunConfig c = small_config();
  c.learner.learning_rate = 1e300;
  try {
    run_end_to_end(c);
    FAIL("expected a failure");
  } catch (const Error& e) {
    REQUIRE(std::string(e.what()).find("stage 'train-benign'") != std::string::npos);
  }
}
