#pragma once

// Verification machinery kept apart from the main loss path: a per-pixel
// scalar-loop transcription of every loss and a central finite-difference
// gradient oracle.

#include <cstdint>
#include <vector>

#include <json.hpp>

#include "imloss/loss_spec.hpp"
#include "imloss/numerics.hpp"

namespace imloss::oracle {

/// Naive loop evaluation of spec on probabilities (clipped here, independently
/// of the main path). Intended for small inputs.
double reference_loss(const LossSpec& spec, const ProbTensor<double>& p, const OneHotMask<double>& y);

/// Central differences (L(x + h e_k) - L(x - h e_k)) / 2h of the main-path
/// loss with respect to every logit.
Tensor<double> finite_diff_grad(const LossSpec& spec, const Tensor<double>& logits,
                                const OneHotMask<double>& truth, double h = 1e-5);

/// |a - n| / max(1e-8, |a|, |n|)
double relative_error(double analytic, double numeric);

struct GradCheckFailure {
  std::uint64_t trial_seed = 0;
  Index element = 0;
  double analytic = 0;
  double numeric = 0;

  friend bool operator==(const GradCheckFailure&, const GradCheckFailure&) = default;
};

struct GradCheckReport {
  Family family = Family::CrossEntropy;
  int trials = 0;
  double max_rel_error = 0;
  double tolerance = 0;
  std::vector<GradCheckFailure> failures;

  bool passed() const { return failures.empty(); }
  friend bool operator==(const GradCheckReport&, const GradCheckReport&) = default;
};

/// Random logits uniform in [-3, 3] and uniform random labels per trial.
/// Deterministic in seed.
GradCheckReport run_gradcheck(const LossSpec& spec, const Shape& shape, int trials, std::uint64_t seed,
                              double h = 1e-5, double tol = 1e-4);

/// Seed of trial `trial` in a run started from `seed`.
std::uint64_t trial_seed(std::uint64_t seed, int trial);

/// Random logits/truth pair as drawn by run_gradcheck for a trial seed.
std::pair<Tensor<double>, OneHotMask<double>> random_case(const Shape& shape, std::uint64_t trial_seed,
                                                          double logit_range = 3.0);

/// Spec of the given family with hyperparameters drawn uniformly from ranges
/// where every family is smooth on unclipped inputs.
LossSpec random_spec(Family family, std::uint64_t seed);

nlohmann::json to_json(const GradCheckReport& report);

}  // namespace imloss::oracle
