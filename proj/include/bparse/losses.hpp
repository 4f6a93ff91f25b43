#pragma once

#include "bparse/common.hpp"
#include "bparse/tape.hpp"
#include "bparse/volume.hpp"

#include <cmath>
#include <cstdint>
#include <vector>

namespace bparse {

// Training objectives for the three stages. Each loss is a plain function
// of dense arrays returning the value and, on request, the analytic
// gradient w.r.t. the prediction; the tape ops at the bottom wrap these so
// the same formulas drive training and the finite-difference checks.

struct TverskyParams {
  double alpha_fp = 0.3;  // false-positive weight
  double beta_fn = 0.7;   // false-negative weight
  double smooth = 1e-5;

  TverskyParams() = default;
  TverskyParams(double a, double b, double s) : alpha_fp(a), beta_fn(b), smooth(s) {
    if (a < 0.0 || a > 1.0 || b < 0.0 || b > 1.0)
      throw DomainError("tversky weights must lie in [0, 1]");
    if (std::abs(a + b - 1.0) > 1e-9)
      throw DomainError("tversky weights must satisfy alpha_fp + beta_fn = 1");
    if (!(s > 0.0)) throw DomainError("tversky smooth term must be positive");
  }
};

struct SegLossParams {
  double beta = 0.5;          // cross-entropy weight; (1 - beta) on the Dice term
  Vec class_weights;          // optional, size 33; empty = unweighted
  double smooth = 1e-5;

  void validate() const {
    if (beta < 0.0 || beta > 1.0) throw DomainError("seg loss beta must lie in [0, 1]");
    if (class_weights.size() != 0 && class_weights.size() != kNumClasses)
      throw DimensionError("class_weights must have 33 entries when present");
  }
};

// 1 - (TP + s) / (TP + alpha*FP + beta*FN + s) with soft counts.
// pred must lie in [0, 1]; target is binary {0, 1}.
template <class Scalar>
Scalar tversky_loss(const Eigen::Ref<const MatX<Scalar>>& pred,
                    const Eigen::Ref<const MatX<Scalar>>& target, const TverskyParams& p,
                    MatX<Scalar>* grad_pred = nullptr) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols())
    throw DimensionError("tversky_loss: pred/target shape mismatch");
  if ((pred.array() < Scalar(0)).any() || (pred.array() > Scalar(1)).any())
    throw DomainError("tversky_loss: predictions must lie in [0, 1]");
  const auto pr = pred.array();
  const auto g = target.array();
  Scalar tp = (pr * g).sum();
  Scalar fp = (pr * (Scalar(1) - g)).sum();
  Scalar fn = ((Scalar(1) - pr) * g).sum();
  Scalar num = tp + Scalar(p.smooth);
  Scalar den = tp + Scalar(p.alpha_fp) * fp + Scalar(p.beta_fn) * fn + Scalar(p.smooth);
  if (grad_pred) {
    // d num / d p_i = g_i ; d den / d p_i = g_i + alpha*(1-g_i) - beta*g_i
    MatX<Scalar> dden =
        (g + Scalar(p.alpha_fp) * (Scalar(1) - g) - Scalar(p.beta_fn) * g).matrix();
    *grad_pred = (-(target.array() * den - num * dden.array()) / (den * den)).matrix();
  }
  return Scalar(1) - num / den;
}

// Soft Dice score in [0, 1]. The smooth term enters symmetrically as
// (2I + 2s) / (P + G + 2s): with that convention Tversky at
// alpha = beta = 0.5 reduces to 1 - dice with the same s exactly, not
// just up to O(s).
template <class Scalar>
Scalar dice_score_soft(const Eigen::Ref<const MatX<Scalar>>& prob,
                       const Eigen::Ref<const MatX<Scalar>>& target_onehot,
                       double smooth = 1e-5) {
  if (prob.rows() != target_onehot.rows() || prob.cols() != target_onehot.cols())
    throw DimensionError("dice_score_soft: shape mismatch");
  Scalar inter = (prob.array() * target_onehot.array()).sum();
  Scalar s2 = Scalar(2) * Scalar(smooth);
  Scalar den = prob.sum() + target_onehot.sum() + s2;
  return (Scalar(2) * inter + s2) / den;
}

// Mean squared error over all entries.
template <class Scalar>
Scalar mse_reconstruction(const Eigen::Ref<const MatX<Scalar>>& pred,
                          const Eigen::Ref<const MatX<Scalar>>& target,
                          MatX<Scalar>* grad_pred = nullptr) {
  if (pred.rows() != target.rows() || pred.cols() != target.cols())
    throw DimensionError("mse_reconstruction: shape mismatch");
  MatX<Scalar> diff = pred - target;
  Scalar n = Scalar(diff.size());
  if (grad_pred) *grad_pred = diff * (Scalar(2) / n);
  return diff.squaredNorm() / n;
}

// beta * CE + (1 - beta) * (1 - mean soft Dice over the 33 classes).
// logits: R x 33 rows of unnormalized scores; labels: R class ids in
// {0..32}. class_weights (when present) weight the cross-entropy term.
double seg_loss(const Mat& logits, const Eigen::Ref<const Eigen::Matrix<uint8_t, Eigen::Dynamic, 1>>& labels,
                const SegLossParams& p, Mat* grad_logits = nullptr);

// Convenience aliases at the training precision.
inline double tversky_loss_d(const Mat& pred, const Mat& target, const TverskyParams& p,
                             Mat* grad = nullptr) {
  return tversky_loss<double>(pred, target, p, grad);
}

// ------------------------------------------------------------------ tape ops

namespace ad {

Var tversky_loss_op(Tape& t, Var pred_prob, const Mat& target, const TverskyParams& p);
Var seg_loss_op(Tape& t, Var logits,
                const Eigen::Matrix<uint8_t, Eigen::Dynamic, 1>& labels, const SegLossParams& p);

}  // namespace ad

}  // namespace bparse
