#include <doctest.h>

#include <cmath>
#include <cstdlib>
#include <filesystem>

#include "imloss/bench.hpp"
#include "imloss/io_util.hpp"

using namespace imloss;

namespace {

SceneConfig tiny_scene(const std::string& name = "tiny", int classes = 2) {
  SceneConfig c;
  c.name = name;
  c.height = 12;
  c.width = 12;
  c.num_classes = classes;
  c.target_foreground_fraction = 0.12;
  c.count = 10;
  c.seed = 4;
  return c;
}

BenchmarkGrid tiny_grid() {
  BenchmarkGrid g;
  g.scenes = {tiny_scene()};
  g.losses = {{"dice", preset("dice")}, {"ce", preset("ce")}};
  g.seeds = {0, 1, 2};
  g.train.max_epochs = 3;
  return g;
}

}  // namespace

TEST_CASE("grid of two losses and three seeds") {
  const auto r = run_grid(tiny_grid());
  CHECK(r.complete);
  CHECK(r.failures.empty());
  CHECK(r.rows.size() == 2 * 3 * 2);
  CHECK(r.table.summary.size() == 1 * 2 * 2 * kMetricNames.size());
  int dsc_rows_class1 = 0;
  for (const auto& s : r.table.summary) {
    CHECK(s.n == 3);
    if (s.metric == "dsc" && s.cls == 1) ++dsc_rows_class1;
    CHECK(s.mean >= 0);
    CHECK(s.mean <= 1);
    CHECK(s.ci_halfwidth >= 0);
  }
  CHECK(dsc_rows_class1 == 2);
  for (int cls : {0, 1}) {
    CHECK(r.table.p_value("tiny", cls, "dice", "dice") == 1.0);
    CHECK(r.table.p_value("tiny", cls, "ce", "ce") == 1.0);
    CHECK(r.table.p_value("tiny", cls, "dice", "ce") == r.table.p_value("tiny", cls, "ce", "dice"));
  }
  CHECK(r.table.pvalues.size() == 2 * 2 * 2);
}

TEST_CASE("summary statistics come from per-seed values") {
  const auto r = run_grid(tiny_grid());
  std::vector<double> dsc;
  for (const auto& row : r.rows) {
    if (row.loss == "ce" && row.cls == 1) dsc.push_back(row.dsc);
  }
  const auto ci = mean_ci(dsc);
  const auto* s = r.table.find("tiny", "ce", 1, "dsc");
  REQUIRE(s != nullptr);
  CHECK(s->mean == ci.mean);
  CHECK(s->ci_halfwidth == ci.half_width);
}

TEST_CASE("identical losses under two names give identical rows") {
  auto g = tiny_grid();
  g.losses = {{"a", preset("tversky")}, {"b", preset("tversky")}};
  const auto r = run_grid(g);
  for (const auto& metric : kMetricNames) {
    for (int cls : {0, 1}) {
      const auto* a = r.table.find("tiny", "a", cls, metric);
      const auto* b = r.table.find("tiny", "b", cls, metric);
      REQUIRE(a);
      REQUIRE(b);
      CHECK(a->mean == b->mean);
      CHECK(a->ci_halfwidth == b->ci_halfwidth);
    }
  }
  CHECK(r.table.p_value("tiny", 1, "a", "b") == 1.0);
}

TEST_CASE("results are deterministic and independent of worker count and other cells") {
  auto g = tiny_grid();
  const std::string first = results_csv(run_grid(g).rows);
  CHECK(results_csv(run_grid(g).rows) == first);
  g.workers = 3;
  CHECK(results_csv(run_grid(g).rows) == first);

  auto fewer = tiny_grid();
  fewer.losses = {{"ce", preset("ce")}};
  const auto all_rows = run_grid(tiny_grid()).rows;
  const auto ce_rows = run_grid(fewer).rows;
  std::vector<ResultRow> expected;
  for (const auto& row : all_rows) {
    if (row.loss == "ce") expected.push_back(row);
  }
  CHECK(results_csv(ce_rows) == results_csv(expected));
}

TEST_CASE("diverged cells are excluded with a reason") {
  auto g = tiny_grid();
  g.losses = {{"ce", preset("ce")}};
  g.train.learning_rate = 1e30;
  const auto r = run_grid(g);
  CHECK(r.rows.empty());
  CHECK(r.failures.size() == 3);
  for (const auto& f : r.failures) CHECK_FALSE(f.reason.empty());
  for (const auto& s : r.table.summary) CHECK(s.n == 0);
  CHECK(failures_csv(r.failures).find("ce,0,") != std::string::npos);
}

TEST_CASE("cancelled grids are flagged incomplete") {
  std::atomic<bool> cancel{true};
  const auto r = run_grid(tiny_grid(), &cancel);
  CHECK_FALSE(r.complete);
  CHECK(r.rows.empty());
  const auto dir = std::filesystem::temp_directory_path() / "imloss_bench_cancel";
  std::filesystem::remove_all(dir);
  write_grid_outputs(r, dir);
  CHECK(read_file(dir / "report.md").find("Incomplete") != std::string::npos);
}

TEST_CASE("row count for a multi-scene grid") {
  auto g = tiny_grid();
  g.scenes = {tiny_scene("two"), tiny_scene("three", 3)};
  g.seeds = {5, 6};
  g.train.max_epochs = 2;
  const auto r = run_grid(g);
  // scenes x losses x classes x metrics, with classes counted per scene.
  CHECK(r.table.summary.size() == (2 + 3) * 2 * kMetricNames.size());
  for (const auto& s : r.table.summary) CHECK(s.n == 2);
}

TEST_CASE("results.csv round trip and report formatting") {
  std::vector<ResultRow> rows = {
      {"s", "x", 0, 0, 0.9, 0.8, 0.95, 0.85}, {"s", "x", 0, 1, 0.5, 1.0 / 3.0, 0.6, 0.4},
      {"s", "x", 1, 0, 0.91, 0.82, 0.93, 0.9}, {"s", "x", 1, 1, 0.7, 0.54, 0.8, 0.6},
      {"s", "y", 0, 0, 0.8, 0.7, 0.9, 0.8},   {"s", "y", 0, 1, 0.6, 0.43, 0.5, 0.75},
      {"s", "y", 1, 0, 0.85, 0.74, 0.9, 0.8}, {"s", "y", 1, 1, 0.62, 0.45, 0.55, 0.71},
  };
  const std::string csv = results_csv(rows);
  CHECK(csv.rfind("scene,loss,seed,class,dsc,iou,precision,recall\n", 0) == 0);
  const auto back = parse_results_csv(csv);
  CHECK(results_csv(back) == csv);
  CHECK(back[1].iou == 1.0 / 3.0);

  const auto table = summarize(back);
  const std::string md = report_markdown(table);
  CHECK(md.find("## s") != std::string::npos);
  CHECK(md.find("| Loss | DSC | IoU | Precision | Recall |") != std::string::npos);
  // y has the better mean recall (0.73 vs 0.5) and x the better precision.
  CHECK(md.find("**0.730 ± ") != std::string::npos);
  CHECK(md.find("**0.700 ± ") != std::string::npos);
  CHECK(md.find("| x | 0.600 ± ") != std::string::npos);

  CHECK_THROWS_AS(parse_results_csv("bad header\n"), ValidationError);
  CHECK_THROWS_AS(parse_results_csv("scene,loss,seed,class,dsc,iou,precision,recall\ns,x,0,1,abc,0,0,0\n"),
                  ValidationError);
}

TEST_CASE("single-seed summaries have undefined intervals") {
  const std::vector<ResultRow> rows = {{"s", "x", 0, 1, 0.5, 0.3, 0.6, 0.4}};
  const auto table = summarize(rows);
  const auto* r = table.find("s", "x", 1, "dsc");
  REQUIRE(r);
  CHECK(r->mean == 0.5);
  CHECK(std::isnan(r->ci_halfwidth));
  CHECK(r->n == 1);
}

TEST_CASE("grid JSON") {
  const auto g = benchmark_grid_from_json(nlohmann::json::parse(R"({
    "scenes": ["low", {"preset": "severe", "name": "severe2"}],
    "losses": ["dice", {"name": "tv", "spec": {"family": "Tversky", "alpha": 0.2, "beta": 0.8}}],
    "seeds": [0, 1],
    "train": {"max_epochs": 5},
    "workers": 2
  })"));
  CHECK(g.scenes.size() == 2);
  CHECK(g.scenes[1].name == "severe2");
  CHECK(g.losses[1].spec == LossSpec::tversky(0.2, 0.8));
  CHECK(g.train.max_epochs == 5);
  CHECK(g.workers == 2);
  CHECK(benchmark_grid_from_json(to_json(g)).losses[1].spec == g.losses[1].spec);

  auto bad = [](const char* text) {
    CHECK_THROWS_AS(benchmark_grid_from_json(nlohmann::json::parse(text)), ValidationError);
  };
  bad(R"({"scenes": [], "losses": ["dice"], "seeds": [0]})");
  bad(R"({"scenes": ["low"], "losses": ["dice", "dice"], "seeds": [0]})");
  bad(R"({"scenes": ["low"], "losses": ["dice"], "seeds": [0, 0]})");
  bad(R"({"scenes": ["low"], "losses": ["dice"], "seeds": [-1]})");
  bad(R"({"scenes": ["low"], "losses": ["dice"], "seeds": [0], "extra": 1})");
  bad(R"({"scenes": ["low"], "losses": ["dice"], "seeds": [0], "train": {"loss": "ce"}})");
}

TEST_CASE("worker cap from the environment") {
  ::setenv("IMLOSS_WORKERS", "2", 1);
  CHECK(effective_workers(8) == 2);
  CHECK(effective_workers(1) == 1);
  ::setenv("IMLOSS_WORKERS", "junk", 1);
  CHECK(effective_workers(8) == 8);
  ::unsetenv("IMLOSS_WORKERS");
  CHECK(effective_workers(0) == 1);
}

TEST_CASE("gamma sweep") {
  SweepConfig c;
  c.scene = tiny_scene();
  c.gammas = {0.0, 0.5};
  c.seeds = {0, 1};
  c.train.max_epochs = 3;
  const auto r = gamma_sweep(c);
  REQUIRE(r.curve.size() == 4);
  for (const auto& p : r.curve) {
    CHECK(p.n == 2);
    CHECK(p.mean_dsc >= 0);
    CHECK(p.mean_dsc <= 1);
  }
  // At gamma = 0 both variants are the same loss, hence the same training run.
  CHECK(r.curve[0].variant == Family::UnifiedFocalSym);
  CHECK(r.curve[2].variant == Family::UnifiedFocalAsym);
  CHECK(r.curve[0].mean_dsc == r.curve[2].mean_dsc);
  CHECK(curve_spread(r.curve, Family::UnifiedFocalSym) >= 0);
  const std::string csv = curve_csv(r.curve);
  CHECK(csv.rfind("variant,gamma,mean_dsc,ci_halfwidth,n\nUnifiedFocalSym,0,", 0) == 0);
  CHECK(sweep_loss_name(Family::UnifiedFocalAsym, 0.3) == "UnifiedFocalAsym@0.3");

  SweepConfig bad = c;
  bad.gammas = {1.0};
  CHECK_THROWS_AS(validate(bad), ValidationError);
  bad = c;
  bad.variants = {Family::Dice};
  CHECK_THROWS_AS(validate(bad), ValidationError);
  const auto parsed = sweep_config_from_json(to_json(c));
  CHECK(parsed.gammas == c.gammas);
  CHECK(parsed.scene == c.scene);
}
