#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <limits>
#include <optional>
#include <set>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "setdet/benign_space.hpp"
#include "setdet/errors.hpp"
#include "setdet/features.hpp"
#include "setdet/metrics.hpp"
#include "setdet/probe.hpp"
#include "setdet/random.hpp"
#include "setdet/toy_model.hpp"

namespace setdet {

// ---------------------------------------------------------------------------
// Prompt datasets

struct DatasetSpec {
  std::size_t n_benign = 200;
  std::size_t n_trigger = 200;
  std::uint64_t seed = 0;
  BackdoorSpec backdoor;
};

struct Dataset {
  std::vector<Prompt> benign;
  std::vector<Prompt> trigger;
};

namespace detail {

using PromptKey = std::vector<std::size_t>;

// Content of length in [ceil(m/2), m] drawn from tokens other than pad and
// `avoid`, pads after it.
inline Prompt draw_prompt(Rng& rng, const ToyModelConfig& config, std::size_t avoid) {
  const std::size_t m = config.prompt_len;
  const std::size_t lo = (m + 1) / 2;
  const std::size_t len = rng.uniform_index(lo, m + 1);
  Prompt p;
  p.token_ids.assign(m, kPadToken);
  for (std::size_t k = 0; k < len; ++k) {
    std::size_t t = 0;
    do {
      t = rng.uniform_index(1, config.vocab_size);
    } while (t == avoid);
    p.token_ids[k] = t;
  }
  return p;
}

}  // namespace detail

/// Benign prompts that avoid the trigger token and every prompt in `exclude`.
inline std::vector<Prompt> synth_benign(const ToyModelConfig& config, std::size_t count, std::size_t trigger_token,
                                        std::uint64_t seed, const std::set<detail::PromptKey>& exclude = {}) {
  if (config.vocab_size < 3) throw ConfigError("vocabulary too small to avoid the trigger token");
  Rng rng(seed);
  std::vector<Prompt> out;
  out.reserve(count);
  std::size_t attempts = 0;
  while (out.size() < count) {
    if (++attempts > 100 * count + 1000) throw ConfigError("cannot draw enough distinct benign prompts");
    Prompt p = detail::draw_prompt(rng, config, trigger_token);
    if (exclude.count(p.token_ids)) continue;
    out.push_back(std::move(p));
  }
  return out;
}

/// Benign draws plus trigger prompts made from further benign draws.
inline Dataset synth_dataset(const DatasetSpec& spec, const ToyModelConfig& config,
                             const std::set<detail::PromptKey>& exclude = {}) {
  if (spec.n_benign == 0 || spec.n_trigger == 0) throw ConfigError("dataset counts must be at least 1");
  spec.backdoor.validate(config);
  Dataset d;
  d.benign = synth_benign(config, spec.n_benign, spec.backdoor.token, mix_seed(spec.seed, 1), exclude);
  for (auto& p : synth_benign(config, spec.n_trigger, spec.backdoor.token, mix_seed(spec.seed, 2), exclude)) {
    d.trigger.push_back(make_trigger_prompt(p, spec.backdoor));
  }
  return d;
}

inline std::string tokens_string(const Prompt& p) {
  std::string s;
  for (std::size_t i = 0; i < p.token_ids.size(); ++i) {
    if (i) s += ' ';
    s += std::to_string(p.token_ids[i]);
  }
  return s;
}

/// Prompt files: one prompt per line, whitespace-separated token ids; blank
/// lines and lines starting with '#' are skipped.
inline std::vector<Prompt> parse_prompts(const std::string& text) {
  std::vector<Prompt> out;
  std::istringstream in(text);
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    const auto first = line.find_first_not_of(" \t\r");
    if (first == std::string::npos || line[first] == '#') continue;
    std::istringstream row(line);
    Prompt p;
    long long id = 0;
    while (row >> id) {
      if (id < 0) throw InvalidInputError("negative token id on prompt line " + std::to_string(line_no));
      p.token_ids.push_back(static_cast<std::size_t>(id));
    }
    if (!row.eof()) throw FormatError("unreadable token on prompt line " + std::to_string(line_no));
    out.push_back(std::move(p));
  }
  return out;
}

inline std::string format_prompts(const std::vector<Prompt>& prompts) {
  std::string out;
  for (const auto& p : prompts) out += tokens_string(p) + '\n';
  return out;
}

// ---------------------------------------------------------------------------
// Run configuration

struct RunConfig {
  std::uint64_t seed = 42;  // master seed; component seeds derive from it
  ToyModelConfig model;
  BackdoorSpec backdoor;
  bool plant = true;  // false runs the clean-model null experiment
  ProbeConfig probe;
  BenignHyper learner;
  std::size_t n_train = 1000;
  std::size_t n_test_benign = 200;
  std::size_t n_test_trigger = 200;
  unsigned threads = 0;  // 0 = hardware concurrency; never changes results

  /// Pushes the master seed into every component.
  void apply_master_seed() {
    model.seed = seed;
    backdoor.seed = mix_seed(seed, 2);
    learner.seed = mix_seed(seed, 4);
  }

  std::uint64_t dataset_seed() const { return mix_seed(seed, 3); }

  void validate() const {
    model.validate();
    backdoor.validate(model);
    probe.validate(model);
    learner.validate();
    if (n_train < learner.min_samples) throw ConfigError("n_train is below the learner's min_samples");
    if (n_test_benign == 0 || n_test_trigger == 0) throw ConfigError("test split counts must be positive");
  }
};

inline void to_json(nlohmann::json& j, const RunConfig& c) {
  j = {{"seed", c.seed},
       {"model", c.model},
       {"backdoor", c.backdoor},
       {"plant", c.plant},
       {"probe", c.probe},
       {"learner", c.learner},
       {"dataset", {{"n_train", c.n_train}, {"n_test_benign", c.n_test_benign}, {"n_test_trigger", c.n_test_trigger}}}};
}

inline void from_json(const nlohmann::json& j, RunConfig& c) {
  c.seed = j.value("seed", c.seed);
  if (j.contains("model")) c.model = j.at("model").get<ToyModelConfig>();
  if (j.contains("backdoor")) c.backdoor = j.at("backdoor").get<BackdoorSpec>();
  c.plant = j.value("plant", c.plant);
  if (j.contains("probe")) c.probe = j.at("probe").get<ProbeConfig>();
  if (j.contains("learner")) c.learner = j.at("learner").get<BenignHyper>();
  if (j.contains("dataset")) {
    const auto& d = j.at("dataset");
    c.n_train = d.value("n_train", c.n_train);
    c.n_test_benign = d.value("n_test_benign", c.n_test_benign);
    c.n_test_trigger = d.value("n_test_trigger", c.n_test_trigger);
  }
  c.threads = j.value("threads", c.threads);
}

/// Parses a JSON config; `seed_override` replaces the master seed.
inline RunConfig parse_run_config(const std::string& text, std::optional<std::uint64_t> seed_override = {}) {
  RunConfig c;
  try {
    c = nlohmann::json::parse(text, nullptr, true, true).get<RunConfig>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("run config: ") + e.what());
  }
  if (seed_override) c.seed = *seed_override;
  c.apply_master_seed();
  c.validate();
  return c;
}

inline RunConfig load_run_config(const std::string& path, std::optional<std::uint64_t> seed_override = {}) {
  return parse_run_config(read_file(path), seed_override);
}

/// Hash over every seed and hyperparameter (thread count excluded).
inline std::string config_fingerprint(const RunConfig& c) {
  return hex64(Fnv1a().update(nlohmann::json(c).dump()).digest());
}

// ---------------------------------------------------------------------------
// Scoring

struct ScoredSample {
  Prompt prompt;
  int label = 0;
  double score = 0.0;
  int prediction = 0;
};

struct EvalResult {
  double auroc = std::numeric_limits<double>::quiet_NaN();  // NaN until both classes are present
  double acc = std::numeric_limits<double>::quiet_NaN();
  double radius = 0.0;
  std::vector<ScoredSample> rows;
  std::string fingerprint;  // config fingerprint
};

/// Scores a labelled feature set; refuses sets produced for a different model,
/// layout or run config.
inline std::vector<ScoredSample> score_feature_set(const BenignSpaceModel& m, const FeatureSet& set) {
  if (!m.fingerprint.empty() && !set.fingerprint.empty() && m.fingerprint != set.fingerprint) {
    throw IncompatibleError("feature fingerprint " + set.fingerprint + " does not match benign space fingerprint " +
                            m.fingerprint);
  }
  if (!m.run.empty() && !set.run.empty() && m.run != set.run) {
    throw IncompatibleError("feature file comes from run " + set.run + " but the benign space from run " + m.run);
  }
  std::vector<ScoredSample> rows;
  rows.reserve(set.records.size());
  for (std::size_t i = 0; i < set.records.size(); ++i) {
    const auto r = detect(m, set.vector_at(i));
    rows.push_back({set.records[i].prompt, set.records[i].label.value_or(-1), r.score, r.label});
  }
  return rows;
}

/// AUROC and accuracy over rows whose label is known.
inline void summarize(EvalResult& result) {
  std::vector<double> scores;
  std::vector<int> labels;
  std::vector<int> predictions;
  for (const auto& r : result.rows) {
    if (r.label < 0) continue;
    scores.push_back(r.score);
    labels.push_back(r.label);
    predictions.push_back(r.prediction);
  }
  result.auroc = auroc(scores, labels);
  result.acc = accuracy(predictions, labels);
}

// ---------------------------------------------------------------------------
// Artifacts

inline std::string result_table(const EvalResult& r) {
  std::ostringstream out;
  out << "# fingerprint " << r.fingerprint << "\n";
  auto metric = [](double v) { return std::isnan(v) ? std::string("n/a") : detail::format_double(v); };
  out << "# auroc " << metric(r.auroc) << "\n";
  out << "# acc " << metric(r.acc) << "\n";
  out << "# radius " << detail::format_double(r.radius) << "\n";
  out << "index\tlabel\tscore\tprediction\ttokens\n";
  for (std::size_t i = 0; i < r.rows.size(); ++i) {
    const auto& row = r.rows[i];
    out << i << '\t' << row.label << '\t' << detail::format_double(row.score) << '\t' << row.prediction << '\t'
        << tokens_string(row.prompt) << '\n';
  }
  return out.str();
}

inline nlohmann::json result_json(const EvalResult& r) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& row : r.rows) {
    rows.push_back({{"tokens", row.prompt.token_ids},
                    {"label", row.label},
                    {"score", row.score},
                    {"prediction", row.prediction}});
  }
  return {{"fingerprint", r.fingerprint}, {"auroc", r.auroc}, {"acc", r.acc}, {"radius", r.radius}, {"rows", rows}};
}

/// Score histogram per class on equal-width bins over [0, max score].
inline std::string score_histogram(const EvalResult& r, std::size_t bins = 30) {
  double hi = 0.0;
  for (const auto& row : r.rows) hi = std::max(hi, row.score);
  if (!(hi > 0.0)) hi = 1.0;
  std::vector<std::size_t> ben(bins, 0);
  std::vector<std::size_t> bd(bins, 0);
  for (const auto& row : r.rows) {
    auto b = static_cast<std::size_t>(row.score / hi * static_cast<double>(bins));
    b = std::min(b, bins - 1);
    (row.label == 1 ? bd : ben)[b]++;
  }
  std::ostringstream out;
  out << "# fingerprint " << r.fingerprint << "\n";
  out << "bin_lo\tbin_hi\tbenign\tbackdoor\n";
  for (std::size_t b = 0; b < bins; ++b) {
    out << detail::format_double(hi * static_cast<double>(b) / static_cast<double>(bins)) << '\t'
        << detail::format_double(hi * static_cast<double>(b + 1) / static_cast<double>(bins)) << '\t' << ben[b]
        << '\t' << bd[b] << '\n';
  }
  return out.str();
}

inline void write_text(const std::filesystem::path& path, const std::string& text) { write_file(path.string(), text); }

// ---------------------------------------------------------------------------
// End-to-end run

inline FeatureSet make_feature_set(const ToyModel& model, const ProbeConfig& probe, const std::vector<Prompt>& prompts,
                                   std::optional<int> label, unsigned threads, const std::string& run = {}) {
  FeatureSet set;
  set.layout = feature_layout(probe, model);
  set.fingerprint = features_fingerprint(model, set.layout);
  set.run = run;
  const auto vectors = extract_feature_vectors(model, prompts, probe, threads);
  for (std::size_t i = 0; i < prompts.size(); ++i) set.records.push_back({prompts[i], label, vectors[i].values});
  return set;
}

inline void append_records(FeatureSet& into, const FeatureSet& from) {
  if (into.layout.checksum() != from.layout.checksum() || into.fingerprint != from.fingerprint) {
    throw IncompatibleError("cannot merge feature sets from different runs");
  }
  into.records.insert(into.records.end(), from.records.begin(), from.records.end());
}

namespace detail {

template <typename F>
auto stage(const char* name, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const std::exception& e) {
    throw Error(std::string("stage '") + name + "' failed: " + e.what());
  }
}

}  // namespace detail

/// Build and plant the model, draw disjoint train/test prompts, extract
/// features, train the benign space and score the test split. When `out_dir`
/// is non-empty the model, feature files, benign space and result files are
/// written there.
inline EvalResult run_end_to_end(RunConfig config, const std::string& out_dir = {}) {
  config.apply_master_seed();
  config.validate();
  const std::string run = config_fingerprint(config);

  const ToyModel model = detail::stage("model", [&] {
    ToyModel m = build_toy_model(config.model);
    return config.plant ? plant_backdoor(m, config.backdoor) : m;
  });

  const auto [train, test] = detail::stage("dataset", [&] {
    const std::uint64_t seed = config.dataset_seed();
    auto train_prompts = synth_benign(config.model, config.n_train, config.backdoor.token, mix_seed(seed, 10));
    std::set<detail::PromptKey> seen;
    for (const auto& p : train_prompts) seen.insert(p.token_ids);
    DatasetSpec spec{config.n_test_benign, config.n_test_trigger, mix_seed(seed, 11), config.backdoor};
    return std::make_pair(std::move(train_prompts), synth_dataset(spec, config.model, seen));
  });

  const FeatureSet train_set = detail::stage(
      "extract-train", [&] { return make_feature_set(model, config.probe, train, 0, config.threads, run); });
  FeatureSet test_set = detail::stage("extract-test", [&] {
    FeatureSet s = make_feature_set(model, config.probe, test.benign, 0, config.threads, run);
    append_records(s, make_feature_set(model, config.probe, test.trigger, 1, config.threads, run));
    return s;
  });

  const BenignSpaceModel space = detail::stage("train-benign", [&] {
    std::vector<ResponseShiftVector> vectors;
    for (std::size_t i = 0; i < train_set.records.size(); ++i) vectors.push_back(train_set.vector_at(i));
    BenignSpaceModel m = train_benign_space(vectors, config.learner, train_set.fingerprint);
    m.run = run;
    return m;
  });

  EvalResult result;
  result.fingerprint = run;
  result.radius = space.radius;
  result.rows = detail::stage("detect", [&] { return score_feature_set(space, test_set); });
  summarize(result);

  if (!out_dir.empty()) {
    detail::stage("write", [&] {
      const std::filesystem::path dir(out_dir);
      std::filesystem::create_directories(dir);
      save_model(model, (dir / "model.bin").string(), run);
      save_features(train_set, (dir / "features_train.jsonl").string());
      save_features(test_set, (dir / "features_test.jsonl").string());
      save_benign_space(space, (dir / "benign_space.bin").string());
      write_text(dir / "results.tsv", result_table(result));
      write_text(dir / "results.json", result_json(result).dump(2) + "\n");
      write_text(dir / "score_histogram.tsv", score_histogram(result));
      write_text(dir / "config.json", nlohmann::json(config).dump(2) + "\n");
      return 0;
    });
  }
  return result;
}

}  // namespace setdet
