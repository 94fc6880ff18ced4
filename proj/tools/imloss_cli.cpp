#include <atomic>
#include <csignal>
#include <cstdint>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <json.hpp>

#include "imloss/bench.hpp"
#include "imloss/errors.hpp"
#include "imloss/io_util.hpp"
#include "imloss/losses.hpp"
#include "imloss/oracle.hpp"
#include "imloss/segt.hpp"
#include "imloss/synth.hpp"
#include "imloss/trainer.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace imloss;

namespace {

std::atomic<bool> g_cancel{false};

extern "C" void on_sigint(int) { g_cancel.store(true); }

json read_json(const fs::path& path) {
  try {
    return json::parse(read_file(path));
  } catch (const json::parse_error& e) {
    throw ValidationError(path.string() + ": invalid JSON: " + e.what());
  }
}

void write_run_record(const fs::path& dir, const std::string& command, const json& config, std::uint64_t seed,
                      bool complete = true) {
  const json record = {{"command", command},
                       {"config", config},
                       {"config_hash", fnv1a_hex(config.dump())},
                       {"seed", seed},
                       {"version", IMLOSS_VERSION},
                       {"complete", complete}};
  write_file_atomic(dir / "run.json", record.dump(2) + "\n");
}

Shape parse_shape(const std::string& text) {
  Shape shape;
  std::stringstream ss(text);
  std::string part;
  while (std::getline(ss, part, ',')) {
    try {
      std::size_t pos = 0;
      const long long v = std::stoll(part, &pos);
      if (pos != part.size() || v <= 0) throw std::invalid_argument(part);
      shape.push_back(v);
    } catch (const std::logic_error&) {
      throw ValidationError("--shape must be comma-separated positive integers, got '" + text + "'");
    }
  }
  if (shape.size() < 2) throw ValidationError("--shape needs at least one spatial axis and a class axis");
  return shape;
}

ProgressFn stderr_progress() {
  return [](const std::string& msg) { std::cerr << msg << '\n'; };
}

// --- losses ---------------------------------------------------------------

int cmd_losses() {
  json out = json::object();
  for (const auto& p : all_presets()) out[p.name] = to_json(p.spec);
  std::cout << out.dump(2) << '\n';
  return 0;
}

// --- eval -----------------------------------------------------------------

struct EvalArgs {
  std::string spec;
  std::string pred;
  std::string truth;
  std::string grad;
  bool logits = false;
};

OneHotMask<double> load_truth(const fs::path& path, const Shape& pred_shape) {
  auto t = read_segt_as<double>(path);
  if (t.shape() == pred_shape) return OneHotMask<double>(std::move(t));
  const Shape label_shape(pred_shape.begin(), pred_shape.end() - 1);
  if (t.shape() == label_shape) return one_hot<double>(t.cast<int>(), pred_shape.back());
  throw ValidationError("truth: shape " + shape_string(t.shape()) + " matches neither pred " +
                        shape_string(pred_shape) + " nor its label shape " + shape_string(label_shape));
}

int cmd_eval(const EvalArgs& a) {
  const LossSpec spec = loss_spec_from_json(read_json(a.spec));
  const auto pred = read_segt_as<double>(a.pred);
  const auto truth = load_truth(a.truth, pred.shape());
  validate(spec, static_cast<int>(pred.classes()));
  double value = 0;
  Tensor<double> grad;
  if (a.logits) {
    auto out = evaluate(spec, pred, truth);
    value = out.value;
    grad = std::move(out.grad_logits);
  } else {
    auto [v, g] = value_and_prob_gradient(spec, ProbTensor<double>(pred), truth);
    value = v;
    grad = std::move(g);
  }
  if (!a.grad.empty()) write_segt(a.grad, grad);
  std::cout << json{{"family", family_name(spec.family)}, {"value", value}}.dump() << '\n';
  return 0;
}

// --- gradcheck ------------------------------------------------------------

struct GradcheckArgs {
  std::string family = "all";
  int trials = 50;
  double tol = 1e-4;
  double h = 1e-5;
  std::uint64_t seed = 0;
  std::string shape = "2,4,4,3";
  int draws = 0;
  std::string out;
};

int cmd_gradcheck(const GradcheckArgs& a) {
  const Shape shape = parse_shape(a.shape);
  if (a.draws < 0) throw ValidationError("--draws must be >= 0");
  std::vector<Family> families;
  if (a.family == "all") {
    families.assign(std::begin(kAllFamilies), std::end(kAllFamilies));
  } else {
    families.push_back(parse_family(a.family));
  }
  json reports = json::array();
  int failures = 0;
  for (Family f : families) {
    std::vector<LossSpec> specs{family_preset(f).spec};
    for (int d = 0; d < a.draws; ++d) specs.push_back(oracle::random_spec(f, oracle::trial_seed(a.seed ^ 0x5eed, d)));
    for (std::size_t i = 0; i < specs.size(); ++i) {
      const auto report = oracle::run_gradcheck(specs[i], shape, a.trials, a.seed + i, a.h, a.tol);
      failures += static_cast<int>(report.failures.size());
      json j = oracle::to_json(report);
      j["spec"] = to_json(specs[i]);
      reports.push_back(j);
    }
  }
  const json summary = {{"shape", shape}, {"trials", a.trials}, {"tolerance", a.tol}, {"h", a.h},
                        {"total_failures", failures}, {"reports", reports}};
  if (!a.out.empty()) {
    write_file_atomic(fs::path(a.out) / "gradcheck.json", summary.dump(2) + "\n");
    write_run_record(a.out, "gradcheck",
                     {{"family", a.family}, {"trials", a.trials}, {"tol", a.tol}, {"h", a.h}, {"shape", shape},
                      {"draws", a.draws}},
                     a.seed);
  }
  std::cout << summary.dump(2) << '\n';
  return failures == 0 ? 0 : 2;
}

// --- synth ----------------------------------------------------------------

struct SynthArgs {
  std::string preset;
  std::string config;
  std::string out;
};

SceneConfig scene_from_args(const std::string& preset_name, const std::string& config_path) {
  if (!preset_name.empty() && !config_path.empty()) throw ValidationError("give either a preset or a config, not both");
  if (!config_path.empty()) return scene_config_from_json(read_json(config_path));
  return scene_preset(preset_name.empty() ? "moderate" : preset_name);
}

int cmd_synth(const SynthArgs& a) {
  const SceneConfig scene = scene_from_args(a.preset, a.config);
  const Dataset data = generate(scene);
  save_dataset(data, a.out);
  write_run_record(a.out, "synth", to_json(scene), scene.seed);
  std::cout << read_file(fs::path(a.out) / "manifest.json");
  return 0;
}

// --- train ----------------------------------------------------------------

struct TrainArgs {
  std::string config;
  std::string scene;
  std::string scene_config;
  std::string data;
  std::string loss;
  std::int64_t seed = -1;
  std::string out;
};

int cmd_train(const TrainArgs& a) {
  TrainConfig config;
  if (!a.config.empty()) config = train_config_from_json(read_json(a.config));
  if (!a.loss.empty()) {
    config.loss = preset(a.loss);
    config.loss_name = a.loss;
  }
  if (a.seed >= 0) config.seed = static_cast<std::uint64_t>(a.seed);
  validate(config);

  Dataset data;
  json scene_json;
  if (!a.data.empty()) {
    if (!a.scene.empty() || !a.scene_config.empty()) throw ValidationError("--data excludes --scene/--scene-config");
    data = load_dataset(a.data);
    scene_json = {{"data", fs::absolute(a.data).lexically_normal().string()}};
  } else {
    const SceneConfig scene = scene_from_args(a.scene, a.scene_config);
    data = generate(scene);
    scene_json = to_json(scene);
  }
  validate(config.loss, data.num_classes());

  const auto report = train(config, data, &g_cancel);
  const fs::path out = a.out;
  fs::create_directories(out);
  write_file_atomic(out / "config.json", to_json(config).dump(2) + "\n");
  write_file_atomic(out / "report.json", to_json(report).dump(2) + "\n");
  write_file_atomic(out / "epochs.csv", epochs_csv(report));
  save_checkpoint(report.model, out / "checkpoint");
  const bool ok = !report.diverged && !report.cancelled;
  write_run_record(out, "train", {{"train", to_json(config)}, {"scene", scene_json}}, config.seed, ok);

  json brief = {{"best_epoch", report.best_epoch}, {"epochs", report.epochs.size()},
                {"best_val_loss", report.best_val_loss}, {"diverged", report.diverged},
                {"cancelled", report.cancelled}};
  json dsc = json::array();
  for (const auto& c : report.test_metrics.per_class) dsc.push_back(c.dsc);
  brief["test_dsc"] = dsc;
  std::cout << brief.dump() << '\n';
  if (report.diverged) std::cerr << "training diverged: " << report.failure << '\n';
  return ok ? 0 : 2;
}

// --- bench / sweep --------------------------------------------------------

struct BenchArgs {
  std::string grid;
  std::string out;
  int workers = 0;
};

int cmd_bench(const BenchArgs& a) {
  BenchmarkGrid grid = benchmark_grid_from_json(read_json(a.grid));
  if (a.workers > 0) grid.workers = a.workers;
  const auto result = run_grid(grid, &g_cancel, stderr_progress());
  write_grid_outputs(result, a.out);
  json config = to_json(grid);
  config.erase("workers");
  write_run_record(a.out, "bench", config, grid.seeds.front(), result.complete);
  for (const auto& f : result.failures) {
    std::cerr << "warning: cell " << f.scene << "/" << f.loss << "/seed " << f.seed << " excluded: " << f.reason
              << '\n';
  }
  std::cout << report_markdown(result.table);
  return result.complete ? 0 : 2;
}

struct SweepArgs {
  std::string config;
  std::string out;
  int workers = 0;
};

int cmd_sweep(const SweepArgs& a) {
  SweepConfig config = a.config.empty() ? SweepConfig{} : sweep_config_from_json(read_json(a.config));
  if (a.workers > 0) config.workers = a.workers;
  const auto result = gamma_sweep(config, &g_cancel, stderr_progress());
  write_grid_outputs(result.grid, a.out);
  write_file_atomic(fs::path(a.out) / "curve.csv", curve_csv(result.curve));
  json j = to_json(config);
  j.erase("workers");
  write_run_record(a.out, "sweep", j, config.seeds.front(), result.grid.complete);
  std::cout << curve_csv(result.curve);
  return result.grid.complete ? 0 : 2;
}

// --- report ---------------------------------------------------------------

struct ReportArgs {
  std::string in;
  std::string out;
};

int cmd_report(const ReportArgs& a) {
  const auto rows = parse_results_csv(read_file(a.in));
  const std::string md = report_markdown(summarize(rows));
  if (!a.out.empty()) write_file_atomic(a.out, md);
  std::cout << md;
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Imbalance-aware segmentation losses: evaluation, verification and desk-scale benchmarks"};
  app.set_version_flag("--version", std::string(IMLOSS_VERSION));
  app.require_subcommand(1);

  auto* losses = app.add_subcommand("losses", "Print the loss presets as JSON");

  EvalArgs eval_args;
  auto* eval = app.add_subcommand("eval", "Evaluate a loss on SEGT prediction and truth files");
  eval->add_option("--spec", eval_args.spec, "LossSpec JSON file")->required()->check(CLI::ExistingFile);
  eval->add_option("--pred", eval_args.pred, "Predictions (N...,C) as SEGT: probabilities, or logits with --logits")
      ->required()
      ->check(CLI::ExistingFile);
  eval->add_option("--truth", eval_args.truth, "Ground truth SEGT: one-hot (N...,C) or integer labels (N...)")
      ->required()
      ->check(CLI::ExistingFile);
  eval->add_option("--grad", eval_args.grad,
                   "Write the gradient (w.r.t. logits with --logits, else w.r.t. probabilities) as f64 SEGT");
  eval->add_flag("--logits", eval_args.logits, "Treat --pred as logits and apply softmax");

  GradcheckArgs gc;
  auto* gradcheck = app.add_subcommand("gradcheck", "Compare analytic and finite-difference gradients");
  gradcheck->add_option("--family", gc.family, "Loss family name or 'all'")->capture_default_str();
  gradcheck->add_option("--trials", gc.trials, "Random trials per spec")->capture_default_str()->check(
      CLI::PositiveNumber);
  gradcheck->add_option("--tol", gc.tol, "Maximum relative error")->capture_default_str();
  gradcheck->add_option("--step", gc.h, "Finite-difference step h")->capture_default_str();
  gradcheck->add_option("--seed", gc.seed, "Base seed")->capture_default_str();
  gradcheck->add_option("--shape", gc.shape, "Logit shape, comma-separated, class axis last")->capture_default_str();
  gradcheck->add_option("--draws", gc.draws, "Random hyperparameter draws per family besides the preset")
      ->capture_default_str();
  gradcheck->add_option("--out", gc.out, "Directory for gradcheck.json and run.json");

  SynthArgs sy;
  auto* synth = app.add_subcommand("synth", "Generate a synthetic segmentation dataset");
  synth->add_option("--preset", sy.preset, "Scene preset: easy, moderate, low, severe, nested");
  synth->add_option("--config", sy.config, "SceneConfig JSON file")->check(CLI::ExistingFile);
  synth->add_option("--out", sy.out, "Output directory")->required();

  TrainArgs tr;
  auto* trainc = app.add_subcommand("train", "Train the segmentation model on one scene");
  trainc->add_option("--config", tr.config, "TrainConfig JSON file")->check(CLI::ExistingFile);
  trainc->add_option("--scene", tr.scene, "Scene preset (default moderate)");
  trainc->add_option("--scene-config", tr.scene_config, "SceneConfig JSON file")->check(CLI::ExistingFile);
  trainc->add_option("--data", tr.data, "Dataset directory written by synth")->check(CLI::ExistingDirectory);
  trainc->add_option("--loss", tr.loss, "Loss preset name, overrides the config");
  trainc->add_option("--seed", tr.seed, "Seed, overrides the config");
  trainc->add_option("--out", tr.out, "Output directory")->required();

  BenchArgs be;
  auto* bench = app.add_subcommand("bench", "Run a loss x scene x seed grid");
  bench->add_option("--grid", be.grid, "bench.json grid file")->required()->check(CLI::ExistingFile);
  bench->add_option("--out", be.out, "Output directory")->required();
  bench->add_option("--workers", be.workers, "Parallel cells (capped by IMLOSS_WORKERS)");

  SweepArgs sw;
  auto* sweep = app.add_subcommand("sweep", "Unified Focal gamma stability sweep");
  sweep->add_option("--config", sw.config, "Sweep JSON file (default: low scene, gammas 0.1..0.9, seeds 0-2)")
      ->check(CLI::ExistingFile);
  sweep->add_option("--out", sw.out, "Output directory")->required();
  sweep->add_option("--workers", sw.workers, "Parallel cells (capped by IMLOSS_WORKERS)");

  ReportArgs re;
  auto* report = app.add_subcommand("report", "Render a Markdown table from results.csv");
  report->add_option("--in", re.in, "results.csv")->required()->check(CLI::ExistingFile);
  report->add_option("--out", re.out, "Also write the Markdown here");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForVersion& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;
  }

  std::signal(SIGINT, on_sigint);
  try {
    if (*losses) return cmd_losses();
    if (*eval) return cmd_eval(eval_args);
    if (*gradcheck) return cmd_gradcheck(gc);
    if (*synth) return cmd_synth(sy);
    if (*trainc) return cmd_train(tr);
    if (*bench) return cmd_bench(be);
    if (*sweep) return cmd_sweep(sw);
    if (*report) return cmd_report(re);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const nlohmann::json::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "failure: " << e.what() << '\n';
    return 2;
  }
  return 1;
}
