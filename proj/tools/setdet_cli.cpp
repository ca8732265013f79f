// setdet command line: model generation, planting, feature extraction,
// benign-space training, detection, theory checks and full runs.

#include <cstdint>
#include <filesystem>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "setdet.hpp"

namespace {

using namespace setdet;

struct Common {
  std::string config_path;
  std::optional<std::uint64_t> seed;

  RunConfig config() const {
    if (config_path.empty()) {
      RunConfig c;
      if (seed) c.seed = *seed;
      c.apply_master_seed();
      c.validate();
      return c;
    }
    return load_run_config(config_path, seed);
  }
};

void add_common(CLI::App* cmd, Common& common) {
  cmd->add_option("-c,--config", common.config_path, "JSON run config (defaults when omitted)");
  cmd->add_option("--seed", common.seed, "override the master seed");
}

std::vector<ProbePoint> parse_points(const std::string& text) {
  std::vector<ProbePoint> out;
  std::stringstream in(text);
  std::string item;
  while (std::getline(in, item, ',')) {
    const auto colon = item.find(':');
    if (colon == std::string::npos) throw ConfigError("probe point '" + item + "' is not step:layer");
    out.push_back({std::stoul(item.substr(0, colon)), std::stoul(item.substr(colon + 1))});
  }
  if (out.empty()) throw ConfigError("no probe points given");
  return out;
}

int cmd_gen_model(const Common& common, const std::string& out) {
  const RunConfig c = common.config();
  const ToyModel model = build_toy_model(c.model);
  save_model(model, out, config_fingerprint(c));
  std::cout << "model " << model_fingerprint(model) << " -> " << out << "\n";
  return 0;
}

int cmd_plant(const Common& common, const std::string& in, const std::string& out) {
  const RunConfig c = common.config();
  const ToyModel planted = plant_backdoor(load_model(in), c.backdoor);
  save_model(planted, out, config_fingerprint(c));
  std::cout << to_string(c.backdoor.kind) << " token " << c.backdoor.token << " strength " << c.backdoor.strength
            << " -> " << out << "\n";
  return 0;
}

int cmd_synth(const Common& common, const std::string& out, std::size_t count, bool trigger, std::uint64_t stream) {
  const RunConfig c = common.config();
  auto prompts = synth_benign(c.model, count, c.backdoor.token, mix_seed(c.dataset_seed(), 100 + stream));
  if (trigger) {
    for (auto& p : prompts) p = make_trigger_prompt(p, c.backdoor);
  }
  write_file(out, format_prompts(prompts));
  std::cout << prompts.size() << (trigger ? " trigger" : " benign") << " prompts -> " << out << "\n";
  return 0;
}

int cmd_extract(const Common& common, const std::string& model_path, const std::string& prompts_path,
                std::optional<int> label, const std::string& out) {
  const RunConfig c = common.config();
  const ToyModel model = load_model(model_path);
  const auto prompts = parse_prompts(read_file(prompts_path));
  const FeatureSet set = make_feature_set(model, c.probe, prompts, label, c.threads, config_fingerprint(c));
  save_features(set, out);
  std::cout << set.records.size() << " feature vectors of length " << set.layout.size() << " -> " << out << "\n";
  return 0;
}

int cmd_train(const Common& common, const std::string& features_path, const std::string& out) {
  const RunConfig c = common.config();
  const FeatureSet set = load_features(features_path);
  std::vector<ResponseShiftVector> vectors;
  for (std::size_t i = 0; i < set.records.size(); ++i) vectors.push_back(set.vector_at(i));
  BenignSpaceModel m = train_benign_space(vectors, c.learner, set.fingerprint);
  m.run = set.run;
  save_benign_space(m, out);
  std::cout << "trained on " << vectors.size() << " samples, R_b = " << m.radius << ", final loss "
            << m.log.loss.back() << " -> " << out << "\n";
  return 0;
}

int cmd_detect(const std::string& space_path, const std::string& features_path, const std::string& out) {
  const BenignSpaceModel m = load_benign_space(space_path);
  const FeatureSet set = load_features(features_path);
  EvalResult r;
  r.fingerprint = set.run;
  r.radius = m.radius;
  r.rows = score_feature_set(m, set);
  bool labelled = false;
  bool both = false;
  int seen = -1;
  for (const auto& row : r.rows) {
    if (row.label < 0) continue;
    labelled = true;
    if (seen >= 0 && row.label != seen) both = true;
    seen = row.label;
  }
  if (both) {
    summarize(r);
  } else if (labelled) {
    std::vector<int> labels, predictions;
    for (const auto& row : r.rows) {
      if (row.label < 0) continue;
      labels.push_back(row.label);
      predictions.push_back(row.prediction);
    }
    r.acc = accuracy(predictions, labels);
  }
  write_file(out, result_table(r));
  std::size_t flagged = 0;
  for (const auto& row : r.rows) flagged += row.prediction == 1 ? 1 : 0;
  std::cout << flagged << " of " << r.rows.size() << " flagged";
  if (both) {
    std::cout << ", auroc " << r.auroc << ", acc " << r.acc;
  } else if (labelled) {
    std::cout << " (single class, no auroc), acc " << r.acc;
  }
  std::cout << " -> " << out << "\n";
  return 0;
}

int cmd_verify(const Common& common, const std::string& model_path, const std::string& prompts_path,
               const std::string& trigger_path, const std::string& points_text, const std::string& out_dir) {
  const RunConfig c = common.config();
  const ToyModel model = load_model(model_path);
  const auto prompts = parse_prompts(read_file(prompts_path));
  const auto points = points_text.empty() ? probe_points(c.probe, model.config) : parse_points(points_text);
  const auto grid = default_fit_grid();
  std::filesystem::create_directories(out_dir);

  nlohmann::json samples = nlohmann::json::array();
  std::ostringstream curves;
  curves << "prompt\tstep\tlayer\tlambda\tshift\n";
  double worst_gap = 0.0;
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    for (const auto& pt : points) {
      const auto r = sample_sensitivity_report(model, prompts[i], pt.step, pt.layer, grid);
      worst_gap = std::max(worst_gap, r.relative_gap());
      samples.push_back({{"prompt", i},
                         {"step", pt.step},
                         {"layer", pt.layer},
                         {"gamma_analytic", r.gamma_analytic},
                         {"gamma_fitted", r.gamma_fitted},
                         {"relative_gap", r.relative_gap()},
                         {"remainder_ratios", r.remainder_ratios},
                         {"envelope_m1_lower_bound", r.envelope_m1},
                         {"envelope_m2_lower_bound", r.envelope_m2},
                         {"sensitivity_norm", r.sensitivity_norm}});
      for (std::size_t k = 0; k < grid.size(); ++k) {
        curves << i << '\t' << pt.step << '\t' << pt.layer << '\t' << grid[k] << '\t'
               << detail::format_double(r.curve.values[k]) << '\n';
      }
    }
  }
  nlohmann::json report = {{"grid", grid},
                           {"samples", samples},
                           {"aggregate", {{"n_prompts", prompts.size()},
                                          {"n_points", points.size()},
                                          {"max_relative_gap", worst_gap}}}};
  if (!trigger_path.empty()) {
    const auto trig = parse_prompts(read_file(trigger_path));
    const auto sep = class_separation_report(model, prompts, trig, points);
    nlohmann::json entries = nlohmann::json::array();
    for (const auto& e : sep.entries) {
      entries.push_back({{"step", e.point.step},
                         {"layer", e.point.layer},
                         {"gamma_benign", e.gamma_benign},
                         {"gamma_backdoor", e.gamma_backdoor},
                         {"relative_gap", e.relative_gap},
                         {"sign", e.sign},
                         {"degenerate", e.degenerate}});
    }
    report["separation"] = {{"n_benign", sep.n_benign}, {"n_backdoor", sep.n_backdoor}, {"entries", entries},
                            {"max_abs_gap", sep.max_abs_gap()}};
  }
  const auto dir = std::filesystem::path(out_dir);
  write_file((dir / "theory_report.json").string(), report.dump(2) + "\n");
  write_file((dir / "shift_curves.tsv").string(), curves.str());
  std::cout << samples.size() << " sample reports, max |fit - analytic| / analytic = " << worst_gap;
  if (report.contains("separation")) std::cout << ", max class gap " << report["separation"]["max_abs_gap"];
  std::cout << " -> " << out_dir << "\n";
  return 0;
}

int cmd_eval(const Common& common, const std::string& out_dir) {
  const RunConfig c = common.config();
  const EvalResult r = run_end_to_end(c, out_dir);
  std::cout << "auroc " << r.auroc << "  acc " << r.acc << "  R_b " << r.radius << "  fingerprint " << r.fingerprint
            << "\n";
  if (!out_dir.empty()) std::cout << "artifacts in " << out_dir << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Scaling-response backdoor detection on a toy text-conditioned denoiser"};
  app.require_subcommand(1);
  Common common;

  std::string out, in, model_path, prompts_path, features_path, space_path, trigger_path, points, out_dir;
  std::optional<int> label;
  std::size_t count = 100;
  bool trigger = false;
  std::uint64_t stream = 0;

  auto* gen = app.add_subcommand("gen-model", "build a toy model from the config");
  add_common(gen, common);
  gen->add_option("-o,--out", out, "model file")->required();

  auto* plant = app.add_subcommand("plant-backdoor", "plant the config's backdoor into a model");
  add_common(plant, common);
  plant->add_option("-m,--model", in, "input model file")->required();
  plant->add_option("-o,--out", out, "output model file")->required();

  auto* synth = app.add_subcommand("synth-prompts", "write synthetic prompts, one per line");
  add_common(synth, common);
  synth->add_option("-o,--out", out, "prompt file")->required();
  synth->add_option("-n,--count", count, "number of prompts");
  synth->add_flag("--trigger", trigger, "insert the backdoor trigger");
  synth->add_option("--stream", stream, "seed stream, to draw disjoint sets");

  auto* extract = app.add_subcommand("extract-features", "compute scaling response shift vectors");
  add_common(extract, common);
  extract->add_option("-m,--model", model_path, "model file")->required();
  extract->add_option("-p,--prompts", prompts_path, "prompt file")->required();
  extract->add_option("-l,--label", label, "label for every record (0 benign, 1 backdoor)");
  extract->add_option("-o,--out", out, "feature file")->required();

  auto* train = app.add_subcommand("train-benign", "learn the benign response space");
  add_common(train, common);
  train->add_option("-f,--features", features_path, "benign feature file")->required();
  train->add_option("-o,--out", out, "benign-space file")->required();

  auto* det = app.add_subcommand("detect", "score features against a benign space");
  det->add_option("-b,--benign-space", space_path, "benign-space file")->required();
  det->add_option("-f,--features", features_path, "feature file")->required();
  det->add_option("-o,--out", out, "result table")->required();

  auto* verify = app.add_subcommand("verify-theory", "check the local quadratic law and class separation");
  add_common(verify, common);
  verify->add_option("-m,--model", model_path, "model file")->required();
  verify->add_option("-p,--prompts", prompts_path, "benign prompt file")->required();
  verify->add_option("-t,--trigger-prompts", trigger_path, "trigger prompt file (enables the separation report)");
  verify->add_option("--points", points, "step:layer pairs, comma separated (default: the config probe)");
  verify->add_option("-o,--out-dir", out_dir, "report directory")->required();

  auto* eval = app.add_subcommand("eval", "full run: model, planting, features, training, detection");
  add_common(eval, common);
  eval->add_option("-o,--out-dir", out_dir, "artifact directory");

  CLI11_PARSE(app, argc, argv);

  try {
    if (*gen) return cmd_gen_model(common, out);
    if (*plant) return cmd_plant(common, in, out);
    if (*synth) return cmd_synth(common, out, count, trigger, stream);
    if (*extract) return cmd_extract(common, model_path, prompts_path, label, out);
    if (*train) return cmd_train(common, features_path, out);
    if (*det) return cmd_detect(space_path, features_path, out);
    if (*verify) return cmd_verify(common, model_path, prompts_path, trigger_path, points, out_dir);
    if (*eval) return cmd_eval(common, out_dir);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
