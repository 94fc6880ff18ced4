#include "imloss/bench.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <limits>
#include <map>
#include <mutex>
#include <set>
#include <sstream>
#include <thread>

#include "imloss/io_util.hpp"
#include "imloss/metrics.hpp"

namespace imloss {

namespace {

std::string fmt(double v) { return format_double(v); }

std::string fixed(double v, int digits) {
  if (std::isnan(v)) return "nan";
  char buf[40];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

double metric_of(const ResultRow& r, const std::string& metric) {
  if (metric == "dsc") return r.dsc;
  if (metric == "iou") return r.iou;
  if (metric == "precision") return r.precision;
  return r.recall;
}

std::vector<std::uint64_t> seeds_from_json(const nlohmann::json& j, const std::string& field) {
  if (!j.is_array()) throw ValidationError("field '" + field + "' must be an array of integers");
  std::vector<std::uint64_t> out;
  for (const auto& s : j) {
    if (!s.is_number_unsigned()) throw ValidationError("field '" + field + "' must hold nonnegative integers");
    out.push_back(s.get<std::uint64_t>());
  }
  return out;
}

void check_keys(const nlohmann::json& j, const std::vector<std::string>& known, const std::string& what) {
  if (!j.is_object()) throw ValidationError(what + " must be a JSON object");
  for (const auto& [key, value] : j.items()) {
    if (std::find(known.begin(), known.end(), key) == known.end()) {
      throw ValidationError(what + " field '" + key + "' is not recognised");
    }
  }
}

}  // namespace

void validate(const BenchmarkGrid& grid) {
  if (grid.scenes.empty()) throw ValidationError("grid field 'scenes' must be nonempty");
  if (grid.losses.empty()) throw ValidationError("grid field 'losses' must be nonempty");
  if (grid.seeds.empty()) throw ValidationError("grid field 'seeds' must be nonempty");
  if (grid.workers < 1) throw ValidationError("grid field 'workers' must be positive");
  std::set<std::string> names;
  for (const auto& s : grid.scenes) {
    validate(s);
    if (!names.insert(s.name).second) throw ValidationError("grid field 'scenes': duplicate scene '" + s.name + "'");
  }
  names.clear();
  for (const auto& l : grid.losses) {
    if (l.name.empty() || l.name.find_first_of(",\n\"") != std::string::npos) {
      throw ValidationError("grid field 'losses': name '" + l.name + "' is empty or contains , \" or newline");
    }
    if (!names.insert(l.name).second) throw ValidationError("grid field 'losses': duplicate loss '" + l.name + "'");
    for (const auto& s : grid.scenes) validate(l.spec, s.num_classes);
  }
  std::set<std::uint64_t> seeds(grid.seeds.begin(), grid.seeds.end());
  if (seeds.size() != grid.seeds.size()) throw ValidationError("grid field 'seeds' contains duplicates");
  validate(grid.train);
}

nlohmann::json to_json(const BenchmarkGrid& grid) {
  nlohmann::json scenes = nlohmann::json::array();
  for (const auto& s : grid.scenes) scenes.push_back(to_json(s));
  nlohmann::json losses = nlohmann::json::array();
  for (const auto& l : grid.losses) losses.push_back({{"name", l.name}, {"spec", to_json(l.spec)}});
  nlohmann::json train = to_json(grid.train);
  train.erase("loss");
  train.erase("loss_name");
  train.erase("seed");
  return {{"scenes", scenes}, {"losses", losses}, {"seeds", grid.seeds}, {"train", train}, {"workers", grid.workers}};
}

BenchmarkGrid benchmark_grid_from_json(const nlohmann::json& j) {
  check_keys(j, {"scenes", "losses", "seeds", "train", "workers"}, "grid");
  BenchmarkGrid grid;
  if (!j.contains("scenes") || !j["scenes"].is_array()) throw ValidationError("grid field 'scenes' must be an array");
  for (const auto& s : j["scenes"]) {
    grid.scenes.push_back(s.is_string() ? scene_preset(s.get<std::string>()) : scene_config_from_json(s));
  }
  if (!j.contains("losses") || !j["losses"].is_array()) throw ValidationError("grid field 'losses' must be an array");
  for (const auto& l : j["losses"]) {
    if (l.is_string()) {
      grid.losses.push_back({l.get<std::string>(), preset(l.get<std::string>())});
    } else {
      check_keys(l, {"name", "spec"}, "grid loss entry");
      if (!l.contains("name") || !l["name"].is_string() || !l.contains("spec")) {
        throw ValidationError("grid loss entry needs string 'name' and object 'spec'");
      }
      grid.losses.push_back({l["name"].get<std::string>(), loss_spec_from_json(l["spec"])});
    }
  }
  if (!j.contains("seeds")) throw ValidationError("grid field 'seeds' is required");
  grid.seeds = seeds_from_json(j["seeds"], "seeds");
  if (j.contains("train")) {
    nlohmann::json train = j["train"];
    if (train.is_object() && train.contains("loss")) {
      throw ValidationError("grid field 'train.loss' is not allowed; losses come from 'losses'");
    }
    grid.train = train_config_from_json(train);
  }
  if (j.contains("workers")) {
    if (!j["workers"].is_number_integer()) throw ValidationError("grid field 'workers' must be an integer");
    grid.workers = j["workers"].get<int>();
  }
  validate(grid);
  return grid;
}

const SummaryRow* ResultTable::find(const std::string& scene, const std::string& loss, int cls,
                                    const std::string& metric) const {
  for (const auto& r : summary) {
    if (r.scene == scene && r.loss == loss && r.cls == cls && r.metric == metric) return &r;
  }
  return nullptr;
}

double ResultTable::p_value(const std::string& scene, int cls, const std::string& a, const std::string& b) const {
  for (const auto& r : pvalues) {
    if (r.scene == scene && r.cls == cls && r.loss_a == a && r.loss_b == b) return r.p;
  }
  return std::numeric_limits<double>::quiet_NaN();
}

int effective_workers(int requested) {
  int n = std::max(1, requested);
  if (const char* env = std::getenv("IMLOSS_WORKERS")) {
    char* end = nullptr;
    const long cap = std::strtol(env, &end, 10);
    if (end != env && *end == '\0' && cap >= 1) n = std::min<long>(n, cap);
  }
  return n;
}

namespace {

struct Cell {
  std::size_t scene = 0;
  std::size_t loss = 0;
  std::uint64_t seed = 0;
};

struct CellOutcome {
  bool ran = false;
  TrainReport report;
  std::string error;
};

// Runs fn(i) for i in [0, n) on up to `workers` threads.
template <typename Fn>
void parallel_for(std::size_t n, int workers, const Fn& fn) {
  const std::size_t threads = std::min<std::size_t>(n, static_cast<std::size_t>(workers));
  if (threads <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  for (std::size_t t = 0; t < threads; ++t) {
    pool.emplace_back([&] {
      for (std::size_t i = next++; i < n; i = next++) fn(i);
    });
  }
  for (auto& th : pool) th.join();
}

}  // namespace

GridResult run_grid(const BenchmarkGrid& grid, const std::atomic<bool>* cancel, const ProgressFn& progress) {
  validate(grid);
  const int workers = effective_workers(grid.workers);
  std::mutex log_mutex;
  auto log = [&](const std::string& msg) {
    if (!progress) return;
    std::lock_guard lock(log_mutex);
    progress(msg);
  };

  std::vector<Dataset> datasets(grid.scenes.size());
  parallel_for(grid.scenes.size(), workers, [&](std::size_t i) {
    datasets[i] = generate(grid.scenes[i]);
    log("generated scene " + grid.scenes[i].name);
  });

  std::vector<Cell> cells;
  for (std::size_t s = 0; s < grid.scenes.size(); ++s) {
    for (std::size_t l = 0; l < grid.losses.size(); ++l) {
      for (auto seed : grid.seeds) cells.push_back({s, l, seed});
    }
  }

  std::vector<CellOutcome> outcomes(cells.size());
  parallel_for(cells.size(), workers, [&](std::size_t i) {
    if (cancel && cancel->load()) return;
    const auto& cell = cells[i];
    TrainConfig config = grid.train;
    config.seed = cell.seed;
    config.loss = grid.losses[cell.loss].spec;
    config.loss_name = grid.losses[cell.loss].name;
    auto& out = outcomes[i];
    try {
      out.report = train(config, datasets[cell.scene], cancel);
      out.ran = !out.report.cancelled;
    } catch (const std::exception& e) {
      out.ran = true;
      out.error = e.what();
    }
    if (out.ran) {
      log("cell " + grid.scenes[cell.scene].name + "/" + config.loss_name + "/seed " + std::to_string(cell.seed) +
          (out.error.empty() && !out.report.diverged ? " done" : " failed"));
    }
  });

  GridResult result;
  for (std::size_t i = 0; i < cells.size(); ++i) {
    const auto& cell = cells[i];
    const auto& out = outcomes[i];
    const std::string& scene = grid.scenes[cell.scene].name;
    const std::string& loss = grid.losses[cell.loss].name;
    if (!out.ran) {
      result.complete = false;
      result.failures.push_back({scene, loss, cell.seed, "cancelled"});
      continue;
    }
    if (!out.error.empty() || out.report.diverged || out.report.best_epoch < 0) {
      const std::string reason = !out.error.empty() ? out.error
                                 : out.report.failure.empty() ? "no finite validation loss" : out.report.failure;
      result.failures.push_back({scene, loss, cell.seed, reason});
      continue;
    }
    const auto& per_class = out.report.test_metrics.per_class;
    for (std::size_t c = 0; c < per_class.size(); ++c) {
      const auto& m = per_class[c];
      result.rows.push_back({scene, loss, cell.seed, static_cast<int>(c), m.dsc, m.iou, m.precision, m.recall});
    }
  }
  result.table = summarize(result.rows);
  return result;
}

ResultTable summarize(const std::vector<ResultRow>& rows) {
  std::vector<std::string> scenes;
  std::map<std::string, std::vector<std::string>> losses;
  std::map<std::string, std::vector<int>> classes;
  auto remember = [](auto& list, const auto& v) {
    if (std::find(list.begin(), list.end(), v) == list.end()) list.push_back(v);
  };
  for (const auto& r : rows) {
    remember(scenes, r.scene);
    remember(losses[r.scene], r.loss);
    remember(classes[r.scene], r.cls);
  }
  for (auto& [scene, cls] : classes) std::sort(cls.begin(), cls.end());

  // Values per (scene, loss, class, metric), in row order (seed order).
  auto values = [&](const std::string& scene, const std::string& loss, int cls, const std::string& metric) {
    std::vector<double> v;
    for (const auto& r : rows) {
      if (r.scene == scene && r.loss == loss && r.cls == cls) v.push_back(metric_of(r, metric));
    }
    return v;
  };

  ResultTable table;
  for (const auto& scene : scenes) {
    for (const auto& loss : losses[scene]) {
      for (int cls : classes[scene]) {
        for (const auto& metric : kMetricNames) {
          const auto v = values(scene, loss, cls, metric);
          SummaryRow row{scene, loss, cls, metric, 0, std::numeric_limits<double>::quiet_NaN(),
                         static_cast<int>(v.size())};
          if (v.size() >= 2) {
            const auto ci = mean_ci(v);
            row.mean = ci.mean;
            row.ci_halfwidth = ci.half_width;
          } else if (v.size() == 1) {
            row.mean = v[0];
          } else {
            row.mean = std::numeric_limits<double>::quiet_NaN();
          }
          table.summary.push_back(row);
        }
      }
    }
    for (int cls : classes[scene]) {
      const auto& names = losses[scene];
      std::vector<std::vector<double>> dsc;
      for (const auto& loss : names) dsc.push_back(values(scene, loss, cls, "dsc"));
      const std::size_t k = names.size();
      std::vector<double> p(k * k, 1.0);
      for (std::size_t a = 0; a < k; ++a) {
        for (std::size_t b = a + 1; b < k; ++b) {
          const double v = (dsc[a].empty() || dsc[b].empty()) ? std::numeric_limits<double>::quiet_NaN()
                                                               : wilcoxon_rank_sum(dsc[a], dsc[b]);
          p[a * k + b] = p[b * k + a] = v;
        }
      }
      for (std::size_t a = 0; a < k; ++a) {
        for (std::size_t b = 0; b < k; ++b) table.pvalues.push_back({scene, cls, names[a], names[b], p[a * k + b]});
      }
    }
  }
  return table;
}

std::string results_csv(const std::vector<ResultRow>& rows) {
  std::ostringstream os;
  os << "scene,loss,seed,class,dsc,iou,precision,recall\n";
  for (const auto& r : rows) {
    os << r.scene << ',' << r.loss << ',' << r.seed << ',' << r.cls << ',' << fmt(r.dsc) << ',' << fmt(r.iou) << ','
       << fmt(r.precision) << ',' << fmt(r.recall) << '\n';
  }
  return os.str();
}

std::vector<ResultRow> parse_results_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "scene,loss,seed,class,dsc,iou,precision,recall") {
    throw ValidationError("results.csv: missing or unexpected header");
  }
  std::vector<ResultRow> rows;
  int lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> f;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) f.push_back(cell);
    if (f.size() != 8) throw ValidationError("results.csv line " + std::to_string(lineno) + ": expected 8 fields");
    try {
      std::size_t pos = 0;
      ResultRow r;
      r.scene = f[0];
      r.loss = f[1];
      r.seed = std::stoull(f[2], &pos);
      r.cls = std::stoi(f[3]);
      r.dsc = std::stod(f[4]);
      r.iou = std::stod(f[5]);
      r.precision = std::stod(f[6]);
      r.recall = std::stod(f[7]);
      rows.push_back(r);
    } catch (const std::logic_error&) {
      throw ValidationError("results.csv line " + std::to_string(lineno) + ": malformed number");
    }
  }
  return rows;
}

std::string summary_csv(const ResultTable& table) {
  std::ostringstream os;
  os << "scene,loss,class,metric,mean,ci_halfwidth,n\n";
  for (const auto& r : table.summary) {
    os << r.scene << ',' << r.loss << ',' << r.cls << ',' << r.metric << ',' << fmt(r.mean) << ','
       << fmt(r.ci_halfwidth) << ',' << r.n << '\n';
  }
  return os.str();
}

std::string pvalues_csv(const ResultTable& table) {
  std::ostringstream os;
  os << "scene,class,loss_a,loss_b,p\n";
  for (const auto& r : table.pvalues) {
    os << r.scene << ',' << r.cls << ',' << r.loss_a << ',' << r.loss_b << ',' << fmt(r.p) << '\n';
  }
  return os.str();
}

std::string failures_csv(const std::vector<CellFailure>& failures) {
  std::ostringstream os;
  os << "scene,loss,seed,reason\n";
  for (const auto& f : failures) {
    std::string reason = f.reason;
    std::replace(reason.begin(), reason.end(), ',', ';');
    std::replace(reason.begin(), reason.end(), '\n', ' ');
    os << f.scene << ',' << f.loss << ',' << f.seed << ',' << reason << '\n';
  }
  return os.str();
}

std::string report_markdown(const ResultTable& table) {
  static const std::map<std::string, std::string> titles = {
      {"dsc", "DSC"}, {"iou", "IoU"}, {"precision", "Precision"}, {"recall", "Recall"}};
  std::vector<std::string> scenes;
  for (const auto& r : table.summary) {
    if (std::find(scenes.begin(), scenes.end(), r.scene) == scenes.end()) scenes.push_back(r.scene);
  }
  std::ostringstream os;
  for (const auto& scene : scenes) {
    std::vector<std::string> losses;
    std::vector<int> classes;
    int n_max = 0;
    for (const auto& r : table.summary) {
      if (r.scene != scene) continue;
      if (std::find(losses.begin(), losses.end(), r.loss) == losses.end()) losses.push_back(r.loss);
      if (std::find(classes.begin(), classes.end(), r.cls) == classes.end()) classes.push_back(r.cls);
      n_max = std::max(n_max, r.n);
    }
    std::sort(classes.begin(), classes.end());
    // Background is reported only when it is the sole class present.
    if (classes.size() > 1) classes.erase(std::remove(classes.begin(), classes.end(), 0), classes.end());

    os << "## " << scene << "\n\n";
    os << "Mean ± 95% CI over " << n_max << " seed" << (n_max == 1 ? "" : "s") << ".\n\n";
    os << "| Loss |";
    for (int cls : classes) {
      for (const auto& m : kMetricNames) {
        os << ' ' << titles.at(m) << (classes.size() > 1 ? " (class " + std::to_string(cls) + ")" : "") << " |";
      }
    }
    os << "\n|---|";
    for (std::size_t i = 0; i < classes.size() * kMetricNames.size(); ++i) os << "---|";
    os << '\n';

    std::map<std::pair<int, std::string>, double> best;
    for (int cls : classes) {
      for (const auto& m : kMetricNames) {
        double b = -std::numeric_limits<double>::infinity();
        for (const auto& loss : losses) {
          if (const auto* r = table.find(scene, loss, cls, m); r && !std::isnan(r->mean)) b = std::max(b, r->mean);
        }
        best[{cls, m}] = b;
      }
    }
    for (const auto& loss : losses) {
      os << "| " << loss << " |";
      for (int cls : classes) {
        for (const auto& m : kMetricNames) {
          const auto* r = table.find(scene, loss, cls, m);
          if (!r || r->n == 0) {
            os << " n/a |";
            continue;
          }
          std::string cell = fixed(r->mean, 3);
          if (!std::isnan(r->ci_halfwidth)) cell += " ± " + fixed(r->ci_halfwidth, 3);
          if (fixed(r->mean, 3) == fixed(best[{cls, m}], 3)) cell = "**" + cell + "**";
          os << ' ' << cell << " |";
        }
      }
      os << '\n';
    }
    os << '\n';
  }
  return os.str();
}

void write_grid_outputs(const GridResult& result, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_file_atomic(dir / "results.csv", results_csv(result.rows));
  write_file_atomic(dir / "summary.csv", summary_csv(result.table));
  write_file_atomic(dir / "pvalues.csv", pvalues_csv(result.table));
  write_file_atomic(dir / "failures.csv", failures_csv(result.failures));
  std::string report = report_markdown(result.table);
  if (!result.complete) report = "**Incomplete: the run was cancelled before every cell finished.**\n\n" + report;
  write_file_atomic(dir / "report.md", report);
}

void validate(const SweepConfig& c) {
  validate(c.scene);
  if (c.gammas.empty()) throw ValidationError("sweep field 'gammas' must be nonempty");
  for (double g : c.gammas) {
    if (!(g >= 0 && g < 1)) throw ValidationError("sweep field 'gammas' values must lie in [0,1)");
  }
  if (std::set<double>(c.gammas.begin(), c.gammas.end()).size() != c.gammas.size()) {
    throw ValidationError("sweep field 'gammas' contains duplicates");
  }
  if (c.seeds.empty()) throw ValidationError("sweep field 'seeds' must be nonempty");
  if (c.variants.empty()) throw ValidationError("sweep field 'variants' must be nonempty");
  for (Family v : c.variants) {
    if (v != Family::UnifiedFocalSym && v != Family::UnifiedFocalAsym) {
      throw ValidationError("sweep field 'variants' accepts UnifiedFocalSym and UnifiedFocalAsym only");
    }
  }
  if (c.workers < 1) throw ValidationError("sweep field 'workers' must be positive");
  validate(LossSpec::unified_focal_sym(c.lambda, c.delta, 0.5), c.scene.num_classes);
  validate(c.train);
}

nlohmann::json to_json(const SweepConfig& c) {
  nlohmann::json variants = nlohmann::json::array();
  for (Family v : c.variants) variants.push_back(std::string(family_name(v)));
  nlohmann::json train = to_json(c.train);
  train.erase("loss");
  train.erase("loss_name");
  train.erase("seed");
  return {{"scene", to_json(c.scene)}, {"gammas", c.gammas}, {"seeds", c.seeds}, {"variants", variants},
          {"lambda", c.lambda},        {"delta", c.delta},   {"train", train},    {"workers", c.workers}};
}

SweepConfig sweep_config_from_json(const nlohmann::json& j) {
  check_keys(j, {"scene", "gammas", "seeds", "variants", "lambda", "delta", "train", "workers"}, "sweep");
  SweepConfig c;
  try {
    if (j.contains("scene")) {
      const auto& s = j["scene"];
      c.scene = s.is_string() ? scene_preset(s.get<std::string>()) : scene_config_from_json(s);
    }
    if (j.contains("gammas")) c.gammas = j["gammas"].get<std::vector<double>>();
    if (j.contains("seeds")) c.seeds = seeds_from_json(j["seeds"], "seeds");
    if (j.contains("variants")) {
      c.variants.clear();
      for (const auto& v : j["variants"]) c.variants.push_back(parse_family(v.get<std::string>()));
    }
    c.lambda = j.value("lambda", c.lambda);
    c.delta = j.value("delta", c.delta);
    c.workers = j.value("workers", c.workers);
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("sweep config: ") + e.what());
  }
  if (j.contains("train")) {
    if (j["train"].is_object() && j["train"].contains("loss")) {
      throw ValidationError("sweep field 'train.loss' is not allowed");
    }
    c.train = train_config_from_json(j["train"]);
  }
  validate(c);
  return c;
}

std::string sweep_loss_name(Family variant, double gamma) {
  return std::string(family_name(variant)) + "@" + fmt(gamma);
}

SweepResult gamma_sweep(const SweepConfig& config, const std::atomic<bool>* cancel, const ProgressFn& progress) {
  validate(config);
  BenchmarkGrid grid;
  grid.scenes = {config.scene};
  grid.seeds = config.seeds;
  grid.train = config.train;
  grid.workers = config.workers;
  for (Family v : config.variants) {
    for (double g : config.gammas) {
      const LossSpec spec = v == Family::UnifiedFocalSym ? LossSpec::unified_focal_sym(config.lambda, config.delta, g)
                                                         : LossSpec::unified_focal_asym(config.lambda, config.delta, g);
      grid.losses.push_back({sweep_loss_name(v, g), spec});
    }
  }
  SweepResult out;
  out.grid = run_grid(grid, cancel, progress);

  for (Family v : config.variants) {
    for (double g : config.gammas) {
      const std::string name = sweep_loss_name(v, g);
      // Per-seed foreground DSC: mean over every class except background.
      std::vector<double> per_seed;
      for (auto seed : config.seeds) {
        double sum = 0;
        int k = 0;
        for (const auto& r : out.grid.rows) {
          if (r.loss == name && r.seed == seed && r.cls != 0) {
            sum += r.dsc;
            ++k;
          }
        }
        if (k > 0) per_seed.push_back(sum / k);
      }
      CurvePoint pt{v, g, std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN(),
                    static_cast<int>(per_seed.size())};
      if (per_seed.size() >= 2) {
        const auto ci = mean_ci(per_seed);
        pt.mean_dsc = ci.mean;
        pt.ci_halfwidth = ci.half_width;
      } else if (per_seed.size() == 1) {
        pt.mean_dsc = per_seed[0];
      }
      out.curve.push_back(pt);
    }
  }
  return out;
}

std::string curve_csv(const std::vector<CurvePoint>& curve) {
  std::ostringstream os;
  os << "variant,gamma,mean_dsc,ci_halfwidth,n\n";
  for (const auto& p : curve) {
    os << family_name(p.variant) << ',' << fmt(p.gamma) << ',' << fmt(p.mean_dsc) << ',' << fmt(p.ci_halfwidth) << ','
       << p.n << '\n';
  }
  return os.str();
}

double curve_spread(const std::vector<CurvePoint>& curve, Family variant) {
  double lo = std::numeric_limits<double>::infinity();
  double hi = -std::numeric_limits<double>::infinity();
  for (const auto& p : curve) {
    if (p.variant != variant || std::isnan(p.mean_dsc)) continue;
    lo = std::min(lo, p.mean_dsc);
    hi = std::max(hi, p.mean_dsc);
  }
  return hi >= lo ? hi - lo : std::numeric_limits<double>::quiet_NaN();
}

}  // namespace imloss
