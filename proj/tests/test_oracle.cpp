#include <doctest.h>

#include <cmath>

#include "imloss/losses.hpp"
#include "imloss/oracle.hpp"

using namespace imloss;

TEST_CASE("finite differences reproduce the CE identity") {
  Tensor<double> logits({2, 2});
  logits.matrix() << 0.3, -0.4, 1.1, 0.2;
  Tensor<int> l({2});
  l.data() << 1, 0;
  const auto y = one_hot<double>(l, 2);
  const auto numeric = oracle::finite_diff_grad(LossSpec::cross_entropy(), logits, y);
  const RowMatrix<double> expected = (softmax(logits).matrix() - y.matrix()) / 2.0;
  CHECK((numeric.matrix() - expected).cwiseAbs().maxCoeff() < 1e-8);
}

TEST_CASE("symmetric logits give antisymmetric gradient pairs") {
  Tensor<double> logits({1, 2});
  logits.matrix() << 0.7, -0.7;
  Tensor<int> l({1});
  l.data() << 0;
  const auto y = one_hot<double>(l, 2);
  for (const auto& named : all_presets()) {
    const auto g = oracle::finite_diff_grad(named.spec, logits, y);
    CHECK(g.data()[0] == doctest::Approx(-g.data()[1]).epsilon(1e-6));
  }
}

TEST_CASE("step size is bounded") {
  const auto [logits, y] = oracle::random_case({2, 2}, 0);
  CHECK_THROWS_AS(oracle::finite_diff_grad(LossSpec::dice(), logits, y, 1e-8), ValidationError);
  CHECK_THROWS_AS(oracle::finite_diff_grad(LossSpec::dice(), logits, y, 1e-2), ValidationError);
}

TEST_CASE("relative error definition") {
  CHECK(oracle::relative_error(1.0, 1.0) == 0);
  CHECK(oracle::relative_error(2.0, 1.0) == doctest::Approx(0.5));
  CHECK(oracle::relative_error(0.0, 1e-12) == doctest::Approx(1e-4));
}

TEST_CASE("reference loss agrees with the main path on every family") {
  for (Family f : kAllFamilies) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      const LossSpec spec = seed == 0 ? family_preset(f).spec : oracle::random_spec(f, seed);
      const auto [logits, y] = oracle::random_case({2, 3, 3, 3}, 100 + seed);
      const auto p = softmax(logits);
      const double main = loss_value(spec, p, y);
      const double ref = oracle::reference_loss(spec, p, y);
      CHECK(std::abs(main - ref) < 1e-9);
    }
  }
}

TEST_CASE("reference loss trivial cases") {
  Tensor<double> p({1, 2});
  p.matrix() << 0.25, 0.75;
  Tensor<int> l({1});
  l.data() << 1;
  const auto y = one_hot<double>(l, 2);
  CHECK(oracle::reference_loss(LossSpec::cross_entropy(), ProbTensor<double>(p), y) ==
        doctest::Approx(-std::log(0.75)).epsilon(1e-14));
  // Perfect prediction with every class present; clipping leaves a residual of order 1e-7.
  Tensor<int> both({2});
  both.data() << 0, 1;
  const auto yy = one_hot<double>(both, 2);
  CHECK(oracle::reference_loss(LossSpec::dice(), ProbTensor<double>(yy.tensor()), yy) <= 1e-6);
}

TEST_CASE("gradcheck passes for every preset and is deterministic") {
  for (Family f : kAllFamilies) {
    const auto report = oracle::run_gradcheck(family_preset(f).spec, {2, 3, 3, 3}, 10, 7);
    CHECK_MESSAGE(report.passed(), family_name(f), " max rel err ", report.max_rel_error);
    CHECK(report.max_rel_error >= 0);
    CHECK(report.max_rel_error < report.tolerance);
    CHECK(report == oracle::run_gradcheck(family_preset(f).spec, {2, 3, 3, 3}, 10, 7));
  }
}

TEST_CASE("gradcheck on random unified asymmetric configurations") {
  double worst = 0;
  for (int k = 0; k < 50; ++k) {
    const auto spec = oracle::random_spec(Family::UnifiedFocalAsym, 1000 + k);
    const auto report = oracle::run_gradcheck(spec, {2, 4, 3}, 2, k);
    worst = std::max(worst, report.max_rel_error);
  }
  CHECK(worst < 1e-4);
}

TEST_CASE("gradcheck reports failures when the tolerance is impossible") {
  const auto report = oracle::run_gradcheck(LossSpec::dice(), {2, 2}, 3, 1, 1e-3, 1e-14);
  CHECK_FALSE(report.passed());
  CHECK(report.max_rel_error >= report.tolerance);
  CHECK(std::is_sorted(report.failures.begin(), report.failures.end(), [](const auto& a, const auto& b) {
    return std::tie(a.trial_seed, a.element) < std::tie(b.trial_seed, b.element);
  }));
  const auto j = oracle::to_json(report);
  CHECK(j["failures"].size() == report.failures.size());
}

TEST_CASE("gradcheck rejects zero trials") {
  CHECK_THROWS_AS(oracle::run_gradcheck(LossSpec::dice(), {2, 2}, 0, 1), ValidationError);
}

TEST_CASE("random cases are deterministic and in range") {
  const auto a = oracle::random_case({3, 4}, 5);
  const auto b = oracle::random_case({3, 4}, 5);
  CHECK(a.first == b.first);
  CHECK(a.second.tensor() == b.second.tensor());
  CHECK(a.first.data().cwiseAbs().maxCoeff() <= 3.0);
  CHECK(oracle::trial_seed(1, 0) != oracle::trial_seed(1, 1));
  CHECK(oracle::random_spec(Family::Combo, 3) == oracle::random_spec(Family::Combo, 3));
  for (Family f : kAllFamilies) {
    for (std::uint64_t s = 0; s < 10; ++s) CHECK_NOTHROW(validate(oracle::random_spec(f, s), 3));
  }
}
