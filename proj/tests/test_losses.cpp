#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <random>

#include "imloss/losses.hpp"
#include "imloss/oracle.hpp"

using namespace imloss;

namespace {

ProbTensor<double> probs(const std::vector<std::vector<double>>& rows) {
  const Index n = static_cast<Index>(rows.size());
  const Index c = static_cast<Index>(rows.front().size());
  Tensor<double> t({n, c});
  for (Index i = 0; i < n; ++i) {
    for (Index k = 0; k < c; ++k) t.matrix()(i, k) = rows[i][k];
  }
  return ProbTensor<double>(t);
}

// Two-channel probabilities from the foreground probability of each pixel.
ProbTensor<double> binary(const std::vector<double>& fg) {
  std::vector<std::vector<double>> rows;
  for (double p : fg) rows.push_back({1 - p, p});
  return probs(rows);
}

OneHotMask<double> labels(const std::vector<int>& l, int classes) {
  Tensor<int> t({static_cast<Index>(l.size())});
  for (std::size_t i = 0; i < l.size(); ++i) t.data()[i] = l[i];
  return one_hot<double>(t, classes);
}

// The three-pixel example used throughout: foreground p = [0.8, 0.6, 0.3],
// truth [1, 1, 0]. Soft counts tp = 1.4, fp = 0.3, fn = 0.6.
const auto kP3 = [] { return binary({0.8, 0.6, 0.3}); };
const auto kY3 = [] { return labels({1, 1, 0}, 2); };

struct RandomCase {
  ProbTensor<double> p;
  OneHotMask<double> y;
};

RandomCase random_probs(std::uint64_t seed, const Shape& shape) {
  auto [logits, y] = oracle::random_case(shape, seed);
  return {softmax(logits), y};
}

}  // namespace

TEST_CASE("cross entropy examples") {
  CHECK(cross_entropy(probs({{0.3, 0.7}}), labels({1}, 2)) == doctest::Approx(0.356675).epsilon(1e-6));
  CHECK(std::abs(cross_entropy(probs({{0.3, 0.7}}), labels({1}, 2)) + std::log(0.7)) < 1e-15);
  const double two = cross_entropy(binary({0.9, 0.1}), labels({1, 0}, 2));
  CHECK(two == doctest::Approx(0.105361).epsilon(1e-6));
  CHECK(std::abs(two + std::log(0.9)) < 1e-15);
  CHECK(cross_entropy(binary({1.0, 0.0}), labels({1, 0}, 2)) <= 1e-6);
}

TEST_CASE("focal examples") {
  const auto y = labels({1}, 2);
  const double a = focal(binary({0.8}), y, 0.25, 2);
  CHECK(a == doctest::Approx(0.00223144).epsilon(1e-6));
  CHECK(std::abs(a - 0.25 * 0.04 * -std::log(0.8)) < 1e-15);
  const double b = focal(binary({0.5}), y, 0.25, 2);
  CHECK(b == doctest::Approx(0.0433217).epsilon(1e-6));
  CHECK(std::abs(b - 0.25 * 0.25 * std::log(2.0)) < 1e-15);
  const auto [p, t] = random_probs(5, {3, 4, 3});
  CHECK(focal(p, t, 1.0, 0.0) == cross_entropy(p, t));
}

TEST_CASE("tversky index example") {
  const auto conf = soft_confusion(kP3(), kY3());
  CHECK(conf.tp[1] == doctest::Approx(1.4));
  CHECK(conf.fp[1] == doctest::Approx(0.3));
  CHECK(conf.fn[1] == doctest::Approx(0.6));
  const auto ti = tversky_index(conf, 0.3, 0.7);
  CHECK(std::abs(ti[1] - 0.732984) < 1e-6);
  CHECK(std::abs(ti[1] - 1.4 / 1.91) < 1e-6);
  const auto dsc = tversky_index(conf, 0.5, 0.5);
  CHECK(std::abs(dsc[1] - 0.756757) < 1e-6);
  CHECK(std::abs(dsc[1] - 2 * 1.4 / (2 * 1.4 + 0.3 + 0.6)) < 1e-6);
}

TEST_CASE("soft confusion invariants") {
  const auto [p, y] = random_probs(9, {4, 4, 3});
  const auto conf = soft_confusion(p, y);
  const Vector<double> truth_sum = y.matrix().colwise().sum().transpose();
  CHECK((conf.tp + conf.fn - truth_sum).cwiseAbs().maxCoeff() < 1e-12);
  CHECK(conf.fp.minCoeff() >= 0);
  CHECK(conf.fn.minCoeff() >= 0);
  CHECK(conf.tp.minCoeff() >= 0);
}

TEST_CASE("empty class scores a perfect index") {
  // Class 2 absent from prediction and truth.
  const auto p = probs({{0.9, 0.1, 0.0}, {0.2, 0.8, 0.0}});
  const auto y = labels({0, 1}, 3);
  const auto ti = tversky_index(soft_confusion(p, y), 0.5, 0.5);
  CHECK(ti[2] == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("region loss per-class examples") {
  const auto b = breakdown(LossSpec::dice(), kP3(), kY3());
  CHECK(std::abs(b.region_per_class[1] - 0.243243) < 1e-6);
  CHECK(std::abs(b.region_per_class[1] - (1 - 2.8 / 3.7)) < 1e-6);

  const auto t = breakdown(LossSpec::tversky(0.3, 0.7), kP3(), kY3());
  CHECK(std::abs(t.region_per_class[1] - 0.267016) < 1e-6);

  const auto ft = breakdown(LossSpec::focal_tversky(0.3, 0.7, 4.0 / 3.0), kP3(), kY3());
  CHECK(std::abs(ft.region_per_class[1] - 0.371452) < 1e-6);
  CHECK(std::abs(ft.region_per_class[1] - std::pow(1 - 1.4 / 1.91, 0.75)) < 1e-6);

  for (const auto& bd : {b, t, ft}) {
    CHECK(std::abs(std::accumulate(bd.region_per_class.begin(), bd.region_per_class.end(), 0.0) - bd.value) <
          1e-15);
  }
}

TEST_CASE("combo examples") {
  const double v = combo_loss(binary({0.8}), labels({1}, 2), 0.5, 0.5);
  CHECK(std::abs(v - -0.344214) < 1e-6);
  CHECK(std::abs(v - (0.5 * (0.5 * -std::log(0.8)) - 0.5 * (1.6 / 2.0))) < 1e-6);
  CHECK(std::abs(combo_loss(binary({1.0, 0.0}), labels({1, 0}, 2), 0.5, 0.5) - -0.5) < 1e-6);

  // beta = 0.5 makes mCE half the per-channel binary cross entropy.
  const auto [p, y] = random_probs(13, {5, 3});
  const auto parts = breakdown(LossSpec::combo(1.0, 0.5), p, y);
  const auto pc = clip_probs(p).matrix();
  const auto ym = y.matrix();
  double bce = 0;
  for (Index i = 0; i < pc.rows(); ++i) {
    for (Index c = 0; c < pc.cols(); ++c) {
      bce -= ym(i, c) * std::log(pc(i, c)) + (1 - ym(i, c)) * std::log(1 - pc(i, c));
    }
  }
  bce /= static_cast<double>(pc.size());
  CHECK(std::abs(parts.value - 0.5 * bce) < 1e-12);
}

TEST_CASE("hybrid focal mixes its components") {
  const auto [p, y] = random_probs(17, {2, 3, 3, 3});
  const double a = focal(p, y, 0.25, 2);
  const double b = focal_tversky_loss(p, y, 0.3, 0.7, 4.0 / 3.0);
  CHECK(hybrid_focal_loss(p, y, 1.0, 0.25, 2, 0.3, 0.7, 4.0 / 3.0) == doctest::Approx(a).epsilon(1e-14));
  CHECK(hybrid_focal_loss(p, y, 0.0, 0.25, 2, 0.3, 0.7, 4.0 / 3.0) == doctest::Approx(b).epsilon(1e-14));
  CHECK(hybrid_focal_loss(p, y, 0.5, 0.25, 2, 0.3, 0.7, 4.0 / 3.0) == doctest::Approx((a + b) / 2).epsilon(1e-14));
}

TEST_CASE("modified focal examples") {
  const double mf = modified_focal(binary({0.8}), labels({1}, 2), 0.6, 0.5);
  CHECK(std::abs(mf - 0.0598757) < 1e-7);
  CHECK(std::abs(mf - 0.6 * std::sqrt(0.2) * -std::log(0.8)) < 1e-15);

  LossSpec s = LossSpec::unified_focal_sym(0.0, 0.6, 0.5);
  const auto parts = breakdown(s, kP3(), kY3());
  const double mti = 1.4 / (1.4 + 0.6 * 0.6 + 0.4 * 0.3);
  CHECK(std::abs(mti - 0.744681) < 1e-6);
  CHECK(std::abs(parts.region_per_class[1] - 0.505291) < 1e-6);
  CHECK(std::abs(parts.region_per_class[1] - std::sqrt(1 - mti)) < 1e-6);
}

TEST_CASE("asymmetric focal examples") {
  LossSpec s = LossSpec::unified_focal_asym(0.0, 0.6, 0.2);
  const auto parts = breakdown(s, kP3(), kY3());
  CHECK(std::abs(parts.region_per_class[1] - 0.335480) < 1e-6);
  CHECK(std::abs(parts.region_per_class[1] - std::pow(1 - 1.4 / 1.88, 0.8)) < 1e-6);

  const auto [p, y] = random_probs(21, {3, 5, 2});
  for (double d : {0.3, 0.6}) {
    CHECK(asym_focal(p, y, d, 0.0) == doctest::Approx(modified_focal(p, y, d, 0.0)).epsilon(1e-15));
    CHECK(asym_focal_tversky(p, y, d, 0.0) == doctest::Approx(modified_focal_tversky(p, y, d, 0.0)).epsilon(1e-15));
  }
}

TEST_CASE("asymmetric rare and non-rare terms are independent of gamma") {
  const auto [p, y] = random_probs(23, {4, 6, 3});
  const auto base = breakdown(LossSpec::unified_focal_asym(0.5, 0.6, 0.2), p, y);
  for (double g : {0.5, 0.8}) {
    const auto other = breakdown(LossSpec::unified_focal_asym(0.5, 0.6, g), p, y);
    // Rare classes 1, 2 in the pixel term; background 0 in the region term.
    CHECK(other.pixel_per_class[1] == base.pixel_per_class[1]);
    CHECK(other.pixel_per_class[2] == base.pixel_per_class[2]);
    CHECK(other.region_per_class[0] == base.region_per_class[0]);
    CHECK(other.pixel_per_class[0] != base.pixel_per_class[0]);
  }
}

TEST_CASE("unified focal recovery and linearity") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    const auto [p, y] = random_probs(seed, {2, 4, 4, 2});
    const double ce = cross_entropy(p, y);
    const double dice = dice_loss(p, y);
    CHECK(std::abs(loss_value(LossSpec::unified_focal_sym(1, 0.5, 0), p, y) - 0.5 * ce) < 1e-12);
    CHECK(std::abs(loss_value(LossSpec::unified_focal_sym(0, 0.5, 0), p, y) - dice) < 1e-12);
    const LossSpec half = LossSpec::unified_focal_sym(0.5, 0.6, 0.5);
    const double a = modified_focal(p, y, 0.6, 0.5);
    const double b = modified_focal_tversky(p, y, 0.6, 0.5);
    CHECK(std::abs(unified_focal(p, y, half) - (a + b) / 2) < 1e-14);
    CHECK(std::abs(loss_value(LossSpec::unified_focal_asym(0.3, 0.5, 0), p, y) -
                   loss_value(LossSpec::unified_focal_sym(0.3, 0.5, 0), p, y)) < 1e-15);
  }
}

TEST_CASE("delta convention flips the modified Tversky weights") {
  const auto fn = modified_focal_tversky(kP3(), kY3(), 0.6, 0.0, DeltaConvention::FalseNegative);
  const auto fp = modified_focal_tversky(kP3(), kY3(), 0.6, 0.0, DeltaConvention::FalsePositive);
  const auto t_fn = tversky_loss(kP3(), kY3(), 0.4, 0.6);
  const auto t_fp = tversky_loss(kP3(), kY3(), 0.6, 0.4);
  CHECK(fn == doctest::Approx(t_fn).epsilon(1e-14));
  CHECK(fp == doctest::Approx(t_fp).epsilon(1e-14));
}

TEST_CASE("values are finite and nonnegative except combo") {
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    const auto [p, y] = random_probs(seed, {2, 5, 5, 3});
    for (const auto& named : all_presets()) {
      const double v = loss_value(named.spec, p, y);
      CHECK(std::isfinite(v));
      if (named.spec.family != Family::Combo) CHECK(v >= 0);
    }
  }
}

TEST_CASE("saturated predictions give finite values and gradients") {
  Tensor<double> logits({4, 2});
  logits.matrix() << 800, -800, -800, 800, 800, -800, 0, 0;
  const auto y = labels({1, 1, 0, 0}, 2);
  for (const auto& named : all_presets()) {
    const auto out = evaluate(named.spec, logits, y);
    CHECK(std::isfinite(out.value));
    CHECK(out.grad_logits.all_finite());
  }
}

TEST_CASE("permutation equivariance") {
  const auto [p, y] = random_probs(31, {24, 3});
  std::vector<Index> perm(24);
  std::iota(perm.begin(), perm.end(), 0);
  std::mt19937_64 rng(1);
  std::shuffle(perm.begin(), perm.end(), rng);
  Tensor<double> pp(p.shape());
  Tensor<double> yp(y.shape());
  for (Index i = 0; i < 24; ++i) {
    pp.matrix().row(i) = p.matrix().row(perm[i]);
    yp.matrix().row(i) = y.matrix().row(perm[i]);
  }
  const ProbTensor<double> p2(pp);
  const OneHotMask<double> y2(yp);
  for (const auto& named : all_presets()) {
    CHECK(loss_value(named.spec, p2, y2) == doctest::Approx(loss_value(named.spec, p, y)).epsilon(1e-13));
  }
}

TEST_CASE("cross entropy gradient is (p - y) / N") {
  const auto [logits, y] = oracle::random_case({6, 3}, 77);
  const auto out = evaluate(LossSpec::cross_entropy(), logits, y);
  const auto p = softmax(logits).matrix();
  const RowMatrix<double> expected = (p - y.matrix()) / 6.0;
  CHECK((out.grad_logits.matrix() - expected).cwiseAbs().maxCoeff() < 1e-15);
}

TEST_CASE("dice gradient vanishes at a perfect prediction") {
  Tensor<double> logits({4, 2});
  logits.matrix() << 30, -30, -30, 30, -30, 30, 30, -30;
  const auto y = labels({0, 1, 1, 0}, 2);
  const auto out = evaluate(LossSpec::dice(), logits, y);
  CHECK(out.value <= 1e-6);
  CHECK(out.grad_logits.data().cwiseAbs().maxCoeff() <= 1e-6);
}

TEST_CASE("per-class terms sum to the region component") {
  const auto [logits, y] = oracle::random_case({3, 4, 3}, 41);
  for (const auto& named : all_presets()) {
    const auto out = evaluate(named.spec, logits, y);
    if (out.per_class_terms.empty()) continue;
    const auto parts = breakdown(named.spec, softmax(logits), y);
    const double sum = std::accumulate(out.per_class_terms.begin(), out.per_class_terms.end(), 0.0);
    CHECK(sum == doctest::Approx(parts.region).epsilon(1e-14));
  }
}

TEST_CASE("float evaluation tracks double") {
  const auto [logits, y] = oracle::random_case({4, 4, 2}, 3);
  for (const auto& named : all_presets()) {
    const double d = loss_from_logits(named.spec, logits, y);
    const float f = loss_from_logits(named.spec, logits.cast<float>(), y.cast<float>());
    CHECK(std::abs(d - f) < 1e-4 * std::max(1.0, std::abs(d)));
  }
}

TEST_CASE("spec validation names the field") {
  auto message = [](const LossSpec& s, int classes = 2) -> std::string {
    try {
      validate(s, classes);
    } catch (const ValidationError& e) {
      return e.what();
    }
    return "";
  };
  CHECK(message(LossSpec::focal(0.25, -1)).find("'gamma'") != std::string::npos);
  CHECK(message(LossSpec::focal_tversky(0.3, 0.7, 0)).find("'gamma'") != std::string::npos);
  CHECK(message(LossSpec::unified_focal_sym(0.5, 0.6, 1.0)).find("'gamma'") != std::string::npos);
  CHECK(message(LossSpec::tversky(1.3, 0.7)).find("'alpha'") != std::string::npos);
  CHECK(message(LossSpec::unified_focal_sym(1.5, 0.6, 0.5)).find("'lambda'") != std::string::npos);
  LossSpec asym = LossSpec::unified_focal_asym(0.5, 0.6, 0.5);
  asym.rare_classes = {0};
  CHECK(message(asym).find("'rare_classes'") != std::string::npos);
  asym.rare_classes = {3};
  CHECK(message(asym, 3).find("'rare_classes'") != std::string::npos);
  CHECK(message(LossSpec::unified_focal_asym(0.5, 0.6, 0.5), 3).empty());
}

TEST_CASE("shape mismatch is rejected") {
  const auto [logits, y] = oracle::random_case({4, 2}, 1);
  const auto y3 = labels({0, 1, 1}, 2);
  CHECK_THROWS_AS(evaluate(LossSpec::dice(), logits, y3), ValidationError);
}

TEST_CASE("loss spec JSON") {
  for (const auto& named : all_presets()) {
    CHECK(loss_spec_from_json(to_json(named.spec)) == named.spec);
  }
  const auto uf = loss_spec_from_json(nlohmann::json::parse(
      R"({"family":"UnifiedFocalAsym","lambda":0.5,"delta":0.6,"gamma":0.5,"rare_classes":[2],"delta_convention":"fp"})"));
  CHECK(uf.rare_classes == std::vector<int>{2});
  CHECK(uf.delta_convention == DeltaConvention::FalsePositive);
  CHECK(loss_spec_from_json(to_json(uf)) == uf);

  auto rejects = [](const char* text, const char* field) {
    try {
      loss_spec_from_json(nlohmann::json::parse(text));
    } catch (const ValidationError& e) {
      return std::string(e.what()).find(field) != std::string::npos;
    }
    return false;
  };
  CHECK(rejects(R"({"family":"Dice","alpha":0.5})", "'alpha'"));
  CHECK(rejects(R"({"family":"Focal","alpha":0.5})", "'gamma'"));
  CHECK(rejects(R"({"family":"Focal","alpha":0.5,"gamma":2,"colour":1})", "'colour'"));
  CHECK(rejects(R"({"family":"Nope"})", "'family'"));
  CHECK(rejects(R"({"alpha":1})", "'family'"));
  CHECK(rejects(R"({"family":"Tversky","alpha":"x","beta":0.7})", "'alpha'"));
}

TEST_CASE("presets carry the standard hyperparameters") {
  const auto f = preset("focal");
  CHECK(f.family == Family::Focal);
  CHECK(f.alpha == 0.25);
  CHECK(f.gamma == 2);
  const auto t = preset("tversky");
  CHECK(t.alpha == 0.3);
  CHECK(t.beta == 0.7);
  CHECK(preset("focal_tversky").gamma == 4.0 / 3.0);
  CHECK(preset("combo") == LossSpec::combo(0.5, 0.5));
  const auto u = preset("unified_focal");
  CHECK(u.family == Family::UnifiedFocalSym);
  CHECK(u.lambda == 0.5);
  CHECK(u.delta == 0.6);
  CHECK(u.gamma == 0.5);
  CHECK(preset("unified_focal_asym").family == Family::UnifiedFocalAsym);
  CHECK(standard_presets().size() == 8);
  CHECK(preset("Dice") == LossSpec::dice());
  CHECK_THROWS_AS(preset("nope"), ValidationError);
  for (const auto& named : all_presets()) CHECK_NOTHROW(validate(named.spec, 2));
}
