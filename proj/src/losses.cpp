#include "bparse/losses.hpp"

namespace bparse {

double seg_loss(const Mat& logits,
                const Eigen::Ref<const Eigen::Matrix<uint8_t, Eigen::Dynamic, 1>>& labels,
                const SegLossParams& p, Mat* grad_logits) {
  p.validate();
  const int64_t rows = logits.rows();
  const int C = kNumClasses;
  require(logits.cols() == C, "seg_loss: logits must have 33 channels");
  require(labels.size() == rows, "seg_loss: one label per logit row required");
  for (int64_t r = 0; r < rows; ++r)
    if (labels[r] >= C) throw DomainError("seg_loss: label outside {0..32}");

  const bool weighted = p.class_weights.size() == C;
  if (weighted && (p.class_weights.array() < 0.0).any())
    throw DomainError("seg_loss: class weights must be non-negative");

  // Stable row softmax; probs are needed by both terms.
  Mat probs(rows, C);
  double ce = 0.0;
  double weight_sum = 0.0;
  for (int64_t r = 0; r < rows; ++r) {
    double mx = logits.row(r).maxCoeff();
    Eigen::RowVectorXd e = (logits.row(r).array() - mx).exp();
    double denom = e.sum();
    probs.row(r) = e / denom;
    double logp = logits(r, labels[r]) - mx - std::log(denom);
    double w = weighted ? p.class_weights[labels[r]] : 1.0;
    ce -= w * logp;
    weight_sum += w;
  }
  if (weight_sum <= 0.0) throw DomainError("seg_loss: total class weight is zero");
  ce /= weight_sum;

  // Soft Dice per class against the implicit one-hot target.
  Vec inter = Vec::Zero(C), psum = Vec::Zero(C), gsum = Vec::Zero(C);
  for (int64_t r = 0; r < rows; ++r) {
    inter[labels[r]] += probs(r, labels[r]);
    gsum[labels[r]] += 1.0;
  }
  psum = probs.colwise().sum();
  // Same smoothing convention as dice_score_soft: (2I + 2s) / (P + G + 2s).
  const double s2 = 2.0 * p.smooth;
  Vec dice(C), den(C);
  for (int c = 0; c < C; ++c) {
    den[c] = psum[c] + gsum[c] + s2;
    dice[c] = (2.0 * inter[c] + s2) / den[c];
  }
  double dice_term = 1.0 - dice.mean();
  double loss = p.beta * ce + (1.0 - p.beta) * dice_term;

  if (grad_logits) {
    // dL/dprob then through softmax: dL/dz = p .* (dLdp - sum_k dLdp_k p_k).
    // CE contributes directly in logit space: beta * w_r/Wsum * (p - onehot).
    Mat dLdp = Mat::Zero(rows, C);
    const double dice_w = (1.0 - p.beta) / C;
    for (int c = 0; c < C; ++c) {
      // d dice_c / d p_rc = (2*[g_rc] * den_c - (2*inter_c + 2s)) / den_c^2
      double base = -(2.0 * inter[c] + s2) / (den[c] * den[c]);
      for (int64_t r = 0; r < rows; ++r) {
        double d = base;
        if (labels[r] == c) d += 2.0 / den[c];
        dLdp(r, c) = -dice_w * d;  // loss has 1 - mean(dice)
      }
    }
    Vec rowdot = dLdp.cwiseProduct(probs).rowwise().sum();
    *grad_logits = probs.cwiseProduct(dLdp.colwise() - rowdot);
    for (int64_t r = 0; r < rows; ++r) {
      double w = weighted ? p.class_weights[labels[r]] : 1.0;
      double s = p.beta * w / weight_sum;
      grad_logits->row(r) += s * probs.row(r);
      (*grad_logits)(r, labels[r]) -= s;
    }
  }
  return loss;
}

namespace ad {

Var tversky_loss_op(Tape& t, Var pred_prob, const Mat& target, const TverskyParams& p) {
  Mat grad;
  Mat v(1, 1);
  bool ng = t.needs_grad(pred_prob);
  v(0, 0) = tversky_loss<double>(t.val(pred_prob), target, p, ng ? &grad : nullptr);
  if (!ng) return t.constant(std::move(v));
  return t.push(std::move(v), true, [pred_prob, grad = std::move(grad)](Tape& t, int self) {
    t.accum(pred_prob.i, grad * t.grad_ref(self)(0, 0));
  });
}

Var seg_loss_op(Tape& t, Var logits, const Eigen::Matrix<uint8_t, Eigen::Dynamic, 1>& labels,
                const SegLossParams& p) {
  Mat grad;
  Mat v(1, 1);
  bool ng = t.needs_grad(logits);
  v(0, 0) = seg_loss(t.val(logits), labels, p, ng ? &grad : nullptr);
  if (!ng) return t.constant(std::move(v));
  return t.push(std::move(v), true, [logits, grad = std::move(grad)](Tape& t, int self) {
    t.accum(logits.i, grad * t.grad_ref(self)(0, 0));
  });
}

}  // namespace ad

}  // namespace bparse
