#pragma once

// Loss hierarchy for class-imbalanced segmentation. Every family is evaluated
// on an N x C view (N elements, C classes, channels-last) of the clipped
// probabilities, producing the loss value and its derivative with respect to
// those probabilities. evaluate() chains the latter through softmax to get
// gradients with respect to logits.
//
// Reductions: distribution-based terms average over the N elements, region
// terms sum over all C classes (background included).

#include <cmath>
#include <string>
#include <vector>

#include "imloss/loss_spec.hpp"
#include "imloss/numerics.hpp"

namespace imloss {

/// Added to numerator and denominator of every Tversky-type ratio and of the
/// pooled DSC, so an empty class predicted empty scores 1.
inline constexpr double kSmooth = 1e-6;

/// Soft per-class cardinalities computed from probabilities.
template <typename Scalar>
struct SoftConfusion {
  Vector<Scalar> tp;
  Vector<Scalar> fp;
  Vector<Scalar> fn;

  template <typename DerivedP, typename DerivedG>
  static SoftConfusion compute(const Eigen::MatrixBase<DerivedP>& p, const Eigen::MatrixBase<DerivedG>& g) {
    SoftConfusion c;
    c.tp = p.cwiseProduct(g).colwise().sum().transpose();
    c.fp = p.colwise().sum().transpose() - c.tp;
    c.fn = g.colwise().sum().transpose() - c.tp;
    // Rounding can leave tiny negatives when a class is nearly absent.
    c.fp = c.fp.cwiseMax(Scalar(0));
    c.fn = c.fn.cwiseMax(Scalar(0));
    return c;
  }
};

/// TI_c = (tp + s) / (tp + fp_weight * fp + fn_weight * fn + s)
template <typename Scalar>
Vector<Scalar> tversky_index(const SoftConfusion<Scalar>& conf, double fp_weight, double fn_weight) {
  const Scalar s(kSmooth);
  return ((conf.tp.array() + s) /
          (conf.tp.array() + Scalar(fp_weight) * conf.fp.array() + Scalar(fn_weight) * conf.fn.array() + s))
      .matrix();
}

/// Component values of a loss evaluation. For compound losses `pixel` is the
/// distribution-based part and `region` the region-based part, both before
/// mixing; for Combo `region` holds the pooled soft DSC. The per-class lists
/// sum to their component.
template <typename Scalar>
struct LossBreakdown {
  Scalar value = 0;
  Scalar pixel = 0;
  Scalar region = 0;
  std::vector<Scalar> pixel_per_class;
  std::vector<Scalar> region_per_class;
};

template <typename Scalar>
struct LossOutput {
  Scalar value = 0;
  Tensor<Scalar> grad_logits;
  /// Per-class partial losses of the region component (empty for pure
  /// distribution-based losses and Combo).
  std::vector<Scalar> per_class_terms;
};

namespace detail {

template <typename Scalar>
struct Terms {
  Scalar value = 0;
  std::vector<Scalar> per_class;
  RowMatrix<Scalar> dp;
};

template <typename DerivedY>
std::vector<Index> labels_of(const Eigen::MatrixBase<DerivedY>& y) {
  std::vector<Index> labels(static_cast<std::size_t>(y.rows()), 0);
  for (Index i = 0; i < y.rows(); ++i) {
    for (Index c = 0; c < y.cols(); ++c) {
      if (y(i, c) != 0) {
        labels[static_cast<std::size_t>(i)] = c;
        break;
      }
    }
  }
  return labels;
}

/// Mean over elements of w_t * (1 - p_t)^k_t * (-log p_t), with weight and
/// exponent chosen by the element's true class t. Covers CE, Focal and the
/// modified / asymmetric Focal losses.
template <typename Scalar, typename DerivedP, typename DerivedY>
Terms<Scalar> modulated_ce(const Eigen::MatrixBase<DerivedP>& p, const Eigen::MatrixBase<DerivedY>& y,
                           const std::vector<double>& weight, const std::vector<double>& exponent,
                           bool with_grad) {
  using std::log;
  using std::pow;
  const Index n = p.rows();
  const Index classes = p.cols();
  const auto labels = labels_of(y);
  const Scalar inv_n = Scalar(1) / Scalar(n);

  Terms<Scalar> out;
  out.per_class.assign(static_cast<std::size_t>(classes), Scalar(0));
  if (with_grad) out.dp = RowMatrix<Scalar>::Zero(n, classes);

  for (Index i = 0; i < n; ++i) {
    const Index t = labels[static_cast<std::size_t>(i)];
    const Scalar pt = p(i, t);
    const Scalar w(weight[static_cast<std::size_t>(t)]);
    const Scalar k(exponent[static_cast<std::size_t>(t)]);
    const Scalar q = Scalar(1) - pt;
    const Scalar nll = -log(pt);
    const Scalar mod = k == Scalar(0) ? Scalar(1) : pow(q, k);
    out.per_class[static_cast<std::size_t>(t)] += w * mod * nll;
    if (with_grad) {
      Scalar d = -mod / pt;
      if (k != Scalar(0)) d -= k * pow(q, k - Scalar(1)) * nll;
      out.dp(i, t) = w * d * inv_n;
    }
  }
  for (auto& v : out.per_class) {
    v *= inv_n;
    out.value += v;
  }
  return out;
}

/// Sum over classes of (1 - TI_c)^e_c where TI weights soft FP by fp_weight
/// and soft FN by fn_weight. Covers Dice, Tversky, Focal Tversky and the
/// modified / asymmetric Focal Tversky losses.
template <typename Scalar, typename DerivedP, typename DerivedY>
Terms<Scalar> tversky_terms(const Eigen::MatrixBase<DerivedP>& p, const Eigen::MatrixBase<DerivedY>& y,
                            double fp_weight, double fn_weight, const std::vector<double>& exponent,
                            bool with_grad) {
  using std::pow;
  const Index n = p.rows();
  const Index classes = p.cols();
  const auto conf = SoftConfusion<Scalar>::compute(p, y);
  const Scalar s(kSmooth);
  const Scalar a(fp_weight);
  const Scalar b(fn_weight);

  Terms<Scalar> out;
  out.per_class.assign(static_cast<std::size_t>(classes), Scalar(0));
  if (with_grad) out.dp = RowMatrix<Scalar>::Zero(n, classes);

  for (Index c = 0; c < classes; ++c) {
    const Scalar num = conf.tp[c] + s;
    const Scalar den = conf.tp[c] + a * conf.fp[c] + b * conf.fn[c] + s;
    const Scalar ti = num / den;
    const Scalar base = Scalar(1) - ti;
    const Scalar e(exponent[static_cast<std::size_t>(c)]);
    const Scalar term = e == Scalar(1) ? base : (base > Scalar(0) ? pow(base, e) : Scalar(0));
    out.per_class[static_cast<std::size_t>(c)] = term;
    out.value += term;
    if (!with_grad) continue;

    // d term / d TI; zero at the non-differentiable point base == 0 when e < 1.
    Scalar dterm_dti;
    if (e == Scalar(1)) {
      dterm_dti = Scalar(-1);
    } else if (base > Scalar(0)) {
      dterm_dti = -e * pow(base, e - Scalar(1));
    } else {
      dterm_dti = Scalar(0);
    }
    const Scalar inv_den2 = Scalar(1) / (den * den);
    // dTI/dp_i = (g_i * den - num * (g_i + a (1 - g_i) - b g_i)) / den^2
    const Scalar d_pos = (den - num * (Scalar(1) - b)) * inv_den2;  // g_i = 1
    const Scalar d_neg = (-num * a) * inv_den2;                     // g_i = 0
    for (Index i = 0; i < n; ++i) {
      out.dp(i, c) = dterm_dti * (y(i, c) != Scalar(0) ? d_pos : d_neg);
    }
  }
  return out;
}

/// Combo: alpha * mCE - (1 - alpha) * DSC with mCE averaged over elements and
/// classes and DSC pooled over all classes.
template <typename Scalar, typename DerivedP, typename DerivedY>
LossBreakdown<Scalar> combo(const Eigen::MatrixBase<DerivedP>& p, const Eigen::MatrixBase<DerivedY>& y,
                            double alpha_d, double beta_d, RowMatrix<Scalar>* dp) {
  using std::log;
  const Index n = p.rows();
  const Index classes = p.cols();
  const Scalar alpha(alpha_d);
  const Scalar beta(beta_d);
  const Scalar s(kSmooth);
  const Scalar inv_nc = Scalar(1) / Scalar(n * classes);

  Scalar mce = 0;
  Scalar inter = 0;
  Scalar total = 0;
  for (Index i = 0; i < n; ++i) {
    for (Index c = 0; c < classes; ++c) {
      const Scalar pv = p(i, c);
      const Scalar yv = y(i, c);
      mce -= beta * yv * log(pv) + (Scalar(1) - beta) * (Scalar(1) - yv) * log(Scalar(1) - pv);
      inter += pv * yv;
      total += pv + yv;
    }
  }
  mce *= inv_nc;
  const Scalar dsc = (Scalar(2) * inter + s) / (total + s);

  LossBreakdown<Scalar> out;
  out.pixel = mce;
  out.region = dsc;
  out.value = alpha * mce - (Scalar(1) - alpha) * dsc;

  if (dp) {
    *dp = RowMatrix<Scalar>::Zero(n, classes);
    const Scalar den = total + s;
    const Scalar inv_den2 = Scalar(1) / (den * den);
    const Scalar num = Scalar(2) * inter + s;
    for (Index i = 0; i < n; ++i) {
      for (Index c = 0; c < classes; ++c) {
        const Scalar pv = p(i, c);
        const Scalar yv = y(i, c);
        const Scalar dmce = -inv_nc * (beta * yv / pv - (Scalar(1) - beta) * (Scalar(1) - yv) / (Scalar(1) - pv));
        const Scalar ddsc = (Scalar(2) * yv * den - num) * inv_den2;
        (*dp)(i, c) = alpha * dmce - (Scalar(1) - alpha) * ddsc;
      }
    }
  }
  return out;
}

inline std::vector<bool> rare_mask(const LossSpec& spec, Index classes) {
  std::vector<bool> rare(static_cast<std::size_t>(classes), false);
  for (int r : rare_classes_for(spec, static_cast<int>(classes))) rare[static_cast<std::size_t>(r)] = true;
  return rare;
}

/// Class weights delta (rare) / 1 - delta (other) shared by both unified variants.
inline std::vector<double> unified_weights(const LossSpec& spec, const std::vector<bool>& rare) {
  std::vector<double> w(rare.size());
  for (std::size_t c = 0; c < rare.size(); ++c) w[c] = rare[c] ? spec.delta : 1.0 - spec.delta;
  return w;
}

/// Soft (FP, FN) weights of the modified Tversky index.
inline std::pair<double, double> unified_tversky_weights(const LossSpec& spec) {
  return spec.delta_convention == DeltaConvention::FalseNegative
             ? std::pair{1.0 - spec.delta, spec.delta}
             : std::pair{spec.delta, 1.0 - spec.delta};
}

template <typename Scalar>
void mix_into(RowMatrix<Scalar>& dst, Scalar wa, const RowMatrix<Scalar>& a, Scalar wb, const RowMatrix<Scalar>& b) {
  dst = wa * a + wb * b;
}

/// Evaluates spec on clipped probabilities p and one-hot truth y.
template <typename Scalar, typename DerivedP, typename DerivedY>
LossBreakdown<Scalar> run(const LossSpec& spec, const Eigen::MatrixBase<DerivedP>& p,
                          const Eigen::MatrixBase<DerivedY>& y, RowMatrix<Scalar>* dp) {
  const Index classes = p.cols();
  const auto uc = static_cast<std::size_t>(classes);
  const bool grad = dp != nullptr;
  LossBreakdown<Scalar> out;

  auto pixel_only = [&](Terms<Scalar> t) {
    out.pixel = t.value;
    out.value = t.value;
    out.pixel_per_class = std::move(t.per_class);
    if (grad) *dp = std::move(t.dp);
  };
  auto region_only = [&](Terms<Scalar> t) {
    out.region = t.value;
    out.value = t.value;
    out.region_per_class = std::move(t.per_class);
    if (grad) *dp = std::move(t.dp);
  };
  auto compound = [&](double lambda, Terms<Scalar> px, Terms<Scalar> rg) {
    const Scalar l(lambda);
    out.pixel = px.value;
    out.region = rg.value;
    out.value = l * px.value + (Scalar(1) - l) * rg.value;
    out.pixel_per_class = std::move(px.per_class);
    out.region_per_class = std::move(rg.per_class);
    if (grad) mix_into(*dp, l, px.dp, Scalar(1) - l, rg.dp);
  };

  switch (spec.family) {
    case Family::CrossEntropy:
      pixel_only(modulated_ce<Scalar>(p, y, std::vector<double>(uc, 1.0), std::vector<double>(uc, 0.0), grad));
      break;
    case Family::Focal:
      pixel_only(modulated_ce<Scalar>(p, y, std::vector<double>(uc, spec.alpha),
                                      std::vector<double>(uc, spec.gamma), grad));
      break;
    case Family::Dice:
      region_only(tversky_terms<Scalar>(p, y, 0.5, 0.5, std::vector<double>(uc, 1.0), grad));
      break;
    case Family::Tversky:
      region_only(tversky_terms<Scalar>(p, y, spec.alpha, spec.beta, std::vector<double>(uc, 1.0), grad));
      break;
    case Family::FocalTversky:
      region_only(tversky_terms<Scalar>(p, y, spec.alpha, spec.beta, std::vector<double>(uc, 1.0 / spec.gamma),
                                        grad));
      break;
    case Family::Combo:
      out = combo<Scalar>(p, y, spec.alpha, spec.beta, dp);
      break;
    case Family::HybridFocal:
      compound(spec.lambda,
               modulated_ce<Scalar>(p, y, std::vector<double>(uc, spec.alpha), std::vector<double>(uc, spec.gamma),
                                    grad),
               tversky_terms<Scalar>(p, y, spec.ft_alpha, spec.ft_beta,
                                     std::vector<double>(uc, 1.0 / spec.ft_gamma), grad));
      break;
    case Family::UnifiedFocalSym:
    case Family::UnifiedFocalAsym: {
      const bool asym = spec.family == Family::UnifiedFocalAsym;
      const auto rare = rare_mask(spec, classes);
      std::vector<double> pixel_exp(uc);
      std::vector<double> region_exp(uc);
      for (std::size_t c = 0; c < uc; ++c) {
        // Symmetric: suppress every class in the CE part, enhance every class
        // in the Tversky part. Asymmetric: rare classes are never suppressed,
        // other classes are never enhanced.
        pixel_exp[c] = asym && rare[c] ? 0.0 : spec.gamma;
        region_exp[c] = asym && !rare[c] ? 1.0 : 1.0 - spec.gamma;
      }
      const auto [fp_w, fn_w] = unified_tversky_weights(spec);
      compound(spec.lambda, modulated_ce<Scalar>(p, y, unified_weights(spec, rare), pixel_exp, grad),
               tversky_terms<Scalar>(p, y, fp_w, fn_w, region_exp, grad));
      break;
    }
  }
  return out;
}

template <typename Scalar>
void check_pair(const Shape& a, const Shape& b) {
  if (a != b) {
    throw ValidationError("shape mismatch: prediction " + shape_string(a) + " vs truth " + shape_string(b));
  }
}

template <typename Scalar>
RowMatrix<Scalar> clipped(const Eigen::Map<const RowMatrix<Scalar>>& p) {
  return p.cwiseMax(Scalar(kClipEps)).cwiseMin(Scalar(1.0 - kClipEps));
}

}  // namespace detail

/// Full component breakdown on probabilities (clipped internally).
template <typename Scalar>
LossBreakdown<Scalar> breakdown(const LossSpec& spec, const ProbTensor<Scalar>& p, const OneHotMask<Scalar>& y) {
  detail::check_pair<Scalar>(p.shape(), y.shape());
  validate(spec, static_cast<int>(p.tensor().classes()));
  const RowMatrix<Scalar> pc = detail::clipped<Scalar>(p.matrix());
  return detail::run<Scalar>(spec, pc, y.matrix(), nullptr);
}

template <typename Scalar>
Scalar loss_value(const LossSpec& spec, const ProbTensor<Scalar>& p, const OneHotMask<Scalar>& y) {
  return breakdown(spec, p, y).value;
}

namespace detail {

template <typename Scalar>
struct ProbGradient {
  LossBreakdown<Scalar> parts;
  RowMatrix<Scalar> dp;
};

template <typename Scalar>
ProbGradient<Scalar> prob_gradient(const LossSpec& spec, const ProbTensor<Scalar>& p, const OneHotMask<Scalar>& y) {
  check_pair<Scalar>(p.shape(), y.shape());
  validate(spec, static_cast<int>(p.tensor().classes()));
  const auto pm = p.matrix();
  const RowMatrix<Scalar> pc = clipped<Scalar>(pm);
  ProbGradient<Scalar> out;
  out.parts = run<Scalar>(spec, pc, y.matrix(), &out.dp);
  const Scalar lo(kClipEps);
  const Scalar hi(1.0 - kClipEps);
  out.dp = (pm.array() < lo || pm.array() > hi).select(RowMatrix<Scalar>::Zero(out.dp.rows(), out.dp.cols()), out.dp);
  return out;
}

}  // namespace detail

/// Loss value and derivative with respect to the (unclipped) probabilities.
/// Entries where clipping is active have zero derivative.
template <typename Scalar>
std::pair<Scalar, Tensor<Scalar>> value_and_prob_gradient(const LossSpec& spec, const ProbTensor<Scalar>& p,
                                                          const OneHotMask<Scalar>& y) {
  auto g = detail::prob_gradient(spec, p, y);
  return {g.parts.value, Tensor<Scalar>::from_matrix(p.shape(), g.dp)};
}

/// Forward value and analytic gradient with respect to logits, through softmax.
template <typename Scalar>
LossOutput<Scalar> evaluate(const LossSpec& spec, const Tensor<Scalar>& logits, const OneHotMask<Scalar>& truth) {
  detail::check_pair<Scalar>(logits.shape(), truth.shape());
  const ProbTensor<Scalar> p = softmax(logits);
  auto g = detail::prob_gradient(spec, p, truth);
  const auto pm = p.matrix();
  // Softmax Jacobian-vector product: dz = p * (dp - <dp, p>).
  const Vector<Scalar> inner = g.dp.cwiseProduct(pm).rowwise().sum();
  const RowMatrix<Scalar> dz = pm.cwiseProduct(g.dp - inner.replicate(1, g.dp.cols()));

  LossOutput<Scalar> out;
  out.value = g.parts.value;
  out.grad_logits = Tensor<Scalar>::from_matrix(logits.shape(), dz);
  out.per_class_terms = std::move(g.parts.region_per_class);
  if (spec.family == Family::Combo) out.per_class_terms.clear();
  return out;
}

template <typename Scalar>
Tensor<Scalar> gradient(const LossSpec& spec, const Tensor<Scalar>& logits, const OneHotMask<Scalar>& truth) {
  return evaluate(spec, logits, truth).grad_logits;
}

/// Value only, from logits (softmax then clip).
template <typename Scalar>
Scalar loss_from_logits(const LossSpec& spec, const Tensor<Scalar>& logits, const OneHotMask<Scalar>& truth) {
  detail::check_pair<Scalar>(logits.shape(), truth.shape());
  return loss_value(spec, softmax(logits), truth);
}

// Per-family entry points on probabilities. Each clips p internally.

template <typename Scalar>
SoftConfusion<Scalar> soft_confusion(const ProbTensor<Scalar>& p, const OneHotMask<Scalar>& y) {
  detail::check_pair<Scalar>(p.shape(), y.shape());
  return SoftConfusion<Scalar>::compute(p.matrix(), y.matrix());
}

template <typename Scalar>
Scalar cross_entropy(const ProbTensor<Scalar>& p, const OneHotMask<Scalar>& y) {
  return loss_value(LossSpec::cross_entropy(), p, y);
}

template <typename Scalar>
Scalar focal(const ProbTensor<Scalar>& p, const OneHotMask<Scalar>& y, double alpha, double gamma) {
  return loss_value(LossSpec::focal(alpha, gamma), p, y);
}

template <typename Scalar>
Scalar dice_loss(const ProbTensor<Scalar>& p, const OneHotMask<Scalar>& y) {
  return loss_value(LossSpec::dice(), p, y);
}

template <typename Scalar>
Scalar tversky_loss(const ProbTensor<Scalar>& p, const OneHotMask<Scalar>& y, double alpha, double beta) {
  return loss_value(LossSpec::tversky(alpha, beta), p, y);
}

template <typename Scalar>
Scalar focal_tversky_loss(const ProbTensor<Scalar>& p, const OneHotMask<Scalar>& y, double alpha, double beta,
                          double gamma) {
  return loss_value(LossSpec::focal_tversky(alpha, beta, gamma), p, y);
}

template <typename Scalar>
Scalar combo_loss(const ProbTensor<Scalar>& p, const OneHotMask<Scalar>& y, double alpha, double beta) {
  return loss_value(LossSpec::combo(alpha, beta), p, y);
}

template <typename Scalar>
Scalar hybrid_focal_loss(const ProbTensor<Scalar>& p, const OneHotMask<Scalar>& y, double lambda, double alpha,
                         double gamma, double ft_alpha, double ft_beta, double ft_gamma) {
  return loss_value(LossSpec::hybrid_focal(lambda, alpha, gamma, ft_alpha, ft_beta, ft_gamma), p, y);
}

/// Distribution-based half of the symmetric Unified Focal loss.
template <typename Scalar>
Scalar modified_focal(const ProbTensor<Scalar>& p, const OneHotMask<Scalar>& y, double delta, double gamma,
                      std::vector<int> rare_classes = {}) {
  LossSpec s = LossSpec::unified_focal_sym(1.0, delta, gamma);
  s.rare_classes = std::move(rare_classes);
  return breakdown(s, p, y).pixel;
}

/// Region-based half of the symmetric Unified Focal loss.
template <typename Scalar>
Scalar modified_focal_tversky(const ProbTensor<Scalar>& p, const OneHotMask<Scalar>& y, double delta, double gamma,
                              DeltaConvention convention = DeltaConvention::FalseNegative) {
  LossSpec s = LossSpec::unified_focal_sym(0.0, delta, gamma);
  s.delta_convention = convention;
  return breakdown(s, p, y).region;
}

template <typename Scalar>
Scalar asym_focal(const ProbTensor<Scalar>& p, const OneHotMask<Scalar>& y, double delta, double gamma,
                  std::vector<int> rare_classes = {}) {
  LossSpec s = LossSpec::unified_focal_asym(1.0, delta, gamma);
  s.rare_classes = std::move(rare_classes);
  return breakdown(s, p, y).pixel;
}

template <typename Scalar>
Scalar asym_focal_tversky(const ProbTensor<Scalar>& p, const OneHotMask<Scalar>& y, double delta, double gamma,
                          std::vector<int> rare_classes = {},
                          DeltaConvention convention = DeltaConvention::FalseNegative) {
  LossSpec s = LossSpec::unified_focal_asym(0.0, delta, gamma);
  s.rare_classes = std::move(rare_classes);
  s.delta_convention = convention;
  return breakdown(s, p, y).region;
}

template <typename Scalar>
Scalar unified_focal(const ProbTensor<Scalar>& p, const OneHotMask<Scalar>& y, const LossSpec& spec) {
  if (spec.family != Family::UnifiedFocalSym && spec.family != Family::UnifiedFocalAsym) {
    throw ValidationError("unified_focal: spec family must be UnifiedFocalSym or UnifiedFocalAsym");
  }
  return loss_value(spec, p, y);
}

}  // namespace imloss
