#pragma once

// Loss x scene x seed experiment grid, its statistics tables and the gamma
// stability sweep.
//
// Each (scene, loss, seed) cell trains on the scene's dataset, which is fixed
// by the scene seed; the cell seed drives initialisation and shuffling. A
// cell contributes one value per class and metric: the mean over its test
// images. Summary statistics and rank-sum tests are taken across seeds.

#include <atomic>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include <json.hpp>

#include "imloss/loss_spec.hpp"
#include "imloss/synth.hpp"
#include "imloss/trainer.hpp"

namespace imloss {

struct BenchmarkGrid {
  std::vector<SceneConfig> scenes;
  std::vector<NamedLoss> losses;
  std::vector<std::uint64_t> seeds;
  TrainConfig train;
  int workers = 1;
};

void validate(const BenchmarkGrid& grid);
nlohmann::json to_json(const BenchmarkGrid& grid);
/// Scenes may be preset names or SceneConfig objects; losses may be preset
/// names or {"name": ..., "spec": {...}} objects.
BenchmarkGrid benchmark_grid_from_json(const nlohmann::json& j);

struct ResultRow {
  std::string scene;
  std::string loss;
  std::uint64_t seed = 0;
  int cls = 0;
  double dsc = 0;
  double iou = 0;
  double precision = 0;
  double recall = 0;
};

struct CellFailure {
  std::string scene;
  std::string loss;
  std::uint64_t seed = 0;
  std::string reason;
};

inline const std::vector<std::string> kMetricNames = {"dsc", "iou", "precision", "recall"};

struct SummaryRow {
  std::string scene;
  std::string loss;
  int cls = 0;
  std::string metric;
  double mean = 0;
  /// NaN when fewer than two seeds succeeded.
  double ci_halfwidth = 0;
  int n = 0;
};

struct PValueRow {
  std::string scene;
  int cls = 0;
  std::string loss_a;
  std::string loss_b;
  double p = 1;
};

struct ResultTable {
  std::vector<SummaryRow> summary;
  /// Every ordered pair of losses per (scene, class), diagonal included.
  std::vector<PValueRow> pvalues;

  const SummaryRow* find(const std::string& scene, const std::string& loss, int cls,
                         const std::string& metric) const;
  double p_value(const std::string& scene, int cls, const std::string& a, const std::string& b) const;
};

struct GridResult {
  std::vector<ResultRow> rows;
  std::vector<CellFailure> failures;
  ResultTable table;
  /// False when cancelled before every cell ran.
  bool complete = true;
};

using ProgressFn = std::function<void(const std::string&)>;

/// Worker count after applying the IMLOSS_WORKERS cap.
int effective_workers(int requested);

GridResult run_grid(const BenchmarkGrid& grid, const std::atomic<bool>* cancel = nullptr,
                    const ProgressFn& progress = {});

/// Group order follows first appearance in `rows`.
ResultTable summarize(const std::vector<ResultRow>& rows);

std::string results_csv(const std::vector<ResultRow>& rows);
std::vector<ResultRow> parse_results_csv(const std::string& text);
std::string summary_csv(const ResultTable& table);
std::string pvalues_csv(const ResultTable& table);
std::string failures_csv(const std::vector<CellFailure>& failures);
/// One table per scene, losses as rows, mean +- CI per foreground class and
/// metric, best mean per column in bold.
std::string report_markdown(const ResultTable& table);

/// results.csv, summary.csv, pvalues.csv, failures.csv and report.md.
void write_grid_outputs(const GridResult& result, const std::filesystem::path& dir);

struct SweepConfig {
  SceneConfig scene = scene_preset("low");
  std::vector<double> gammas = {0.1, 0.3, 0.5, 0.7, 0.9};
  std::vector<std::uint64_t> seeds = {0, 1, 2};
  std::vector<Family> variants = {Family::UnifiedFocalSym, Family::UnifiedFocalAsym};
  double lambda = 0.5;
  double delta = 0.6;
  TrainConfig train;
  int workers = 1;
};

void validate(const SweepConfig& config);
nlohmann::json to_json(const SweepConfig& config);
SweepConfig sweep_config_from_json(const nlohmann::json& j);

struct CurvePoint {
  Family variant = Family::UnifiedFocalSym;
  double gamma = 0;
  /// Mean over seeds of the per-seed foreground DSC.
  double mean_dsc = 0;
  double ci_halfwidth = 0;
  int n = 0;
};

struct SweepResult {
  std::vector<CurvePoint> curve;
  GridResult grid;
};

/// Loss name of a sweep cell, e.g. "UnifiedFocalSym@0.3".
std::string sweep_loss_name(Family variant, double gamma);

SweepResult gamma_sweep(const SweepConfig& config, const std::atomic<bool>* cancel = nullptr,
                        const ProgressFn& progress = {});

std::string curve_csv(const std::vector<CurvePoint>& curve);

/// Max minus min of the curve for one variant.
double curve_spread(const std::vector<CurvePoint>& curve, Family variant);

}  // namespace imloss
