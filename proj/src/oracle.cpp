#include "imloss/oracle.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "imloss/losses.hpp"

namespace imloss::oracle {
namespace {

constexpr double kEps = 1e-7;
constexpr double kSmoothing = 1e-6;

struct Problem {
  int n = 0;
  int c = 0;
  std::vector<std::vector<double>> p;  // [element][class], clipped
  std::vector<std::vector<double>> g;  // [element][class]
  std::vector<int> truth;
};

Problem make_problem(const ProbTensor<double>& prob, const OneHotMask<double>& y) {
  if (prob.shape() != y.shape()) throw ValidationError("reference_loss: shape mismatch");
  Problem pr;
  const auto pm = prob.matrix();
  const auto ym = y.matrix();
  pr.n = static_cast<int>(pm.rows());
  pr.c = static_cast<int>(pm.cols());
  pr.p.assign(pr.n, std::vector<double>(pr.c));
  pr.g.assign(pr.n, std::vector<double>(pr.c));
  pr.truth.assign(pr.n, 0);
  for (int i = 0; i < pr.n; ++i) {
    for (int k = 0; k < pr.c; ++k) {
      double v = pm(i, k);
      if (v < kEps) v = kEps;
      if (v > 1.0 - kEps) v = 1.0 - kEps;
      pr.p[i][k] = v;
      pr.g[i][k] = ym(i, k);
      if (ym(i, k) == 1.0) pr.truth[i] = k;
    }
  }
  return pr;
}

// Cross entropy: -1/N sum_i sum_c y log p
double cce(const Problem& pr) {
  double total = 0;
  for (int i = 0; i < pr.n; ++i) {
    for (int k = 0; k < pr.c; ++k) total += -pr.g[i][k] * std::log(pr.p[i][k]);
  }
  return total / pr.n;
}

// Focal: alpha (1 - p_t)^gamma (-log p_t), averaged.
double focal(const Problem& pr, double alpha, double gamma) {
  double total = 0;
  for (int i = 0; i < pr.n; ++i) {
    const double pt = pr.p[i][pr.truth[i]];
    total += alpha * std::pow(1.0 - pt, gamma) * -std::log(pt);
  }
  return total / pr.n;
}

// Tversky index of class k with FP weight a, FN weight b.
double tversky_index(const Problem& pr, int k, double a, double b) {
  double tp = 0;
  double fp = 0;
  double fn = 0;
  for (int i = 0; i < pr.n; ++i) {
    tp += pr.p[i][k] * pr.g[i][k];
    fp += pr.p[i][k] * (1.0 - pr.g[i][k]);
    fn += (1.0 - pr.p[i][k]) * pr.g[i][k];
  }
  return (tp + kSmoothing) / (tp + a * fp + b * fn + kSmoothing);
}

// Tversky / Focal Tversky: sum_c (1 - TI_c)^exponent
double focal_tversky(const Problem& pr, double a, double b, double exponent) {
  double total = 0;
  for (int k = 0; k < pr.c; ++k) total += std::pow(1.0 - tversky_index(pr, k, a, b), exponent);
  return total;
}

// Combo: alpha * mCE - (1 - alpha) * DSC
double combo(const Problem& pr, double alpha, double beta) {
  double mce = 0;
  double inter = 0;
  double sum_p = 0;
  double sum_g = 0;
  for (int i = 0; i < pr.n; ++i) {
    for (int k = 0; k < pr.c; ++k) {
      const double p = pr.p[i][k];
      const double y = pr.g[i][k];
      mce += -(beta * y * std::log(p) + (1.0 - beta) * (1.0 - y) * std::log(1.0 - p));
      inter += p * y;
      sum_p += p;
      sum_g += y;
    }
  }
  mce /= static_cast<double>(pr.n) * pr.c;
  const double dsc = (2.0 * inter + kSmoothing) / (sum_p + sum_g + kSmoothing);
  return alpha * mce - (1.0 - alpha) * dsc;
}

std::vector<bool> rare_set(const LossSpec& spec, int classes) {
  std::vector<bool> rare(classes, false);
  if (spec.rare_classes.empty()) {
    for (int k = 1; k < classes; ++k) rare[k] = true;
  } else {
    for (int r : spec.rare_classes) rare[r] = true;
  }
  return rare;
}

// Modified / asymmetric Focal: rare element terms weighted delta, others
// 1 - delta; suppression exponent gamma (asymmetric: rare terms unsuppressed).
double unified_pixel(const Problem& pr, const LossSpec& spec, bool asym) {
  const auto rare = rare_set(spec, pr.c);
  double rare_sum = 0;
  double other_sum = 0;
  for (int i = 0; i < pr.n; ++i) {
    const int t = pr.truth[i];
    const double pt = pr.p[i][t];
    if (rare[t]) {
      const double mod = asym ? 1.0 : std::pow(1.0 - pt, spec.gamma);
      rare_sum += mod * -std::log(pt);
    } else {
      other_sum += std::pow(1.0 - pt, spec.gamma) * -std::log(pt);
    }
  }
  return (spec.delta * rare_sum + (1.0 - spec.delta) * other_sum) / pr.n;
}

// Modified / asymmetric Focal Tversky.
double unified_region(const Problem& pr, const LossSpec& spec, bool asym) {
  const auto rare = rare_set(spec, pr.c);
  const bool on_fn = spec.delta_convention == DeltaConvention::FalseNegative;
  const double fp_w = on_fn ? 1.0 - spec.delta : spec.delta;
  const double fn_w = on_fn ? spec.delta : 1.0 - spec.delta;
  double total = 0;
  for (int k = 0; k < pr.c; ++k) {
    const double base = 1.0 - tversky_index(pr, k, fp_w, fn_w);
    const double exponent = (asym && !rare[k]) ? 1.0 : 1.0 - spec.gamma;
    total += std::pow(base, exponent);
  }
  return total;
}

}  // namespace

double reference_loss(const LossSpec& spec, const ProbTensor<double>& p, const OneHotMask<double>& y) {
  validate(spec, static_cast<int>(p.tensor().classes()));
  const Problem pr = make_problem(p, y);
  switch (spec.family) {
    case Family::CrossEntropy:
      return cce(pr);
    case Family::Focal:
      return focal(pr, spec.alpha, spec.gamma);
    case Family::Dice:
      return focal_tversky(pr, 0.5, 0.5, 1.0);
    case Family::Tversky:
      return focal_tversky(pr, spec.alpha, spec.beta, 1.0);
    case Family::FocalTversky:
      return focal_tversky(pr, spec.alpha, spec.beta, 1.0 / spec.gamma);
    case Family::Combo:
      return combo(pr, spec.alpha, spec.beta);
    case Family::HybridFocal:
      return spec.lambda * focal(pr, spec.alpha, spec.gamma) +
             (1.0 - spec.lambda) * focal_tversky(pr, spec.ft_alpha, spec.ft_beta, 1.0 / spec.ft_gamma);
    case Family::UnifiedFocalSym:
      return spec.lambda * unified_pixel(pr, spec, false) + (1.0 - spec.lambda) * unified_region(pr, spec, false);
    case Family::UnifiedFocalAsym:
      return spec.lambda * unified_pixel(pr, spec, true) + (1.0 - spec.lambda) * unified_region(pr, spec, true);
  }
  return 0;
}

Tensor<double> finite_diff_grad(const LossSpec& spec, const Tensor<double>& logits, const OneHotMask<double>& truth,
                                double h) {
  if (!(h >= 1e-7 && h <= 1e-3)) throw ValidationError("finite_diff_grad: h must lie in [1e-7, 1e-3]");
  // Evaluated in extended precision: in double the cancellation in up - down
  // leaves an absolute error near eps * L / h, above 1e-4 relative for the
  // smallest gradients.
  using Wide = long double;
  const OneHotMask<Wide> wide_truth(truth.tensor().cast<Wide>());
  Tensor<double> grad(logits.shape());
  Tensor<Wide> probe = logits.cast<Wide>();
  for (Index k = 0; k < logits.size(); ++k) {
    const Wide x = probe.data()[k];
    probe.data()[k] = x + h;
    const Wide up = loss_from_logits(spec, probe, wide_truth);
    probe.data()[k] = x - h;
    const Wide down = loss_from_logits(spec, probe, wide_truth);
    probe.data()[k] = x;
    grad.data()[k] = static_cast<double>((up - down) / (2 * static_cast<Wide>(h)));
  }
  return grad;
}

double relative_error(double analytic, double numeric) {
  return std::abs(analytic - numeric) / std::max({1e-8, std::abs(analytic), std::abs(numeric)});
}

std::uint64_t trial_seed(std::uint64_t seed, int trial) {
  std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                    static_cast<std::uint32_t>(trial)};
  std::uint32_t out[2];
  seq.generate(out, out + 2);
  return (static_cast<std::uint64_t>(out[0]) << 32) | out[1];
}

LossSpec random_spec(Family family, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  auto u = [&](double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); };
  // Draws are sequenced explicitly; argument evaluation order is unspecified.
  const double a = u(0.05, 0.95);
  const double b = u(0.05, 0.95);
  const double focal_gamma = u(0.0, 4.0);
  const double ft_gamma = u(0.5, 3.0);
  const double lambda = u(0.0, 1.0);
  const double unified_gamma = u(0.0, 0.95);
  const double ft_alpha = u(0.05, 0.95);
  const double ft_beta = u(0.05, 0.95);
  switch (family) {
    case Family::CrossEntropy:
      return LossSpec::cross_entropy();
    case Family::Focal:
      return LossSpec::focal(a, focal_gamma);
    case Family::Dice:
      return LossSpec::dice();
    case Family::Tversky:
      return LossSpec::tversky(a, b);
    case Family::FocalTversky:
      return LossSpec::focal_tversky(a, b, ft_gamma);
    case Family::Combo:
      return LossSpec::combo(a, b);
    case Family::HybridFocal:
      return LossSpec::hybrid_focal(lambda, a, focal_gamma, ft_alpha, ft_beta, ft_gamma);
    case Family::UnifiedFocalSym:
      return LossSpec::unified_focal_sym(lambda, a, unified_gamma);
    case Family::UnifiedFocalAsym:
      return LossSpec::unified_focal_asym(lambda, a, unified_gamma);
  }
  throw ValidationError("random_spec: unknown family");
}

std::pair<Tensor<double>, OneHotMask<double>> random_case(const Shape& shape, std::uint64_t seed,
                                                          double logit_range) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> logit(-logit_range, logit_range);
  Tensor<double> logits(shape);
  for (Index k = 0; k < logits.size(); ++k) logits.data()[k] = logit(rng);
  const Index classes = shape.back();
  std::uniform_int_distribution<int> label(0, static_cast<int>(classes) - 1);
  Tensor<int> labels(Shape(shape.begin(), shape.end() - 1));
  for (Index k = 0; k < labels.size(); ++k) labels.data()[k] = label(rng);
  return {std::move(logits), one_hot<double>(labels, classes)};
}

GradCheckReport run_gradcheck(const LossSpec& spec, const Shape& shape, int trials, std::uint64_t seed, double h,
                              double tol) {
  if (trials < 1) throw ValidationError("run_gradcheck: trials must be >= 1");
  if (shape.size() < 2) throw ValidationError("run_gradcheck: shape needs a class axis");
  validate(spec, static_cast<int>(shape.back()));
  GradCheckReport report;
  report.family = spec.family;
  report.trials = trials;
  report.tolerance = tol;
  for (int t = 0; t < trials; ++t) {
    const auto ts = trial_seed(seed, t);
    const auto [logits, truth] = random_case(shape, ts);
    const auto analytic = gradient(spec, logits, truth);
    const auto numeric = finite_diff_grad(spec, logits, truth, h);
    for (Index k = 0; k < logits.size(); ++k) {
      const double a = analytic.data()[k];
      const double n = numeric.data()[k];
      const double err = relative_error(a, n);
      report.max_rel_error = std::max(report.max_rel_error, err);
      if (!(err < tol)) report.failures.push_back({ts, k, a, n});
    }
  }
  std::sort(report.failures.begin(), report.failures.end(), [](const auto& a, const auto& b) {
    return std::tie(a.trial_seed, a.element) < std::tie(b.trial_seed, b.element);
  });
  return report;
}

nlohmann::json to_json(const GradCheckReport& report) {
  nlohmann::json failures = nlohmann::json::array();
  for (const auto& f : report.failures) {
    failures.push_back({{"trial_seed", f.trial_seed}, {"element", f.element}, {"analytic", f.analytic},
                        {"numeric", f.numeric}});
  }
  return {{"family", family_name(report.family)},
          {"trials", report.trials},
          {"tolerance", report.tolerance},
          {"max_rel_error", report.max_rel_error},
          {"passed", report.passed()},
          {"failures", failures}};
}

}  // namespace imloss::oracle
