#include "bparse/optim.hpp"

namespace bparse {

void adam_step(Mat& param, const Mat& grad, AdamMoments& state, double lr, const AdamHyper& h) {
  require(param.rows() == grad.rows() && param.cols() == grad.cols(),
          "adam_step: param/grad shape mismatch");
  if (!grad.allFinite()) throw DivergenceError("adam_step: non-finite gradient");
  if (state.t == 0 && state.m.size() == 0) {
    state.m = Mat::Zero(param.rows(), param.cols());
    state.v = Mat::Zero(param.rows(), param.cols());
  }
  state.t += 1;
  state.m = h.beta1 * state.m + (1.0 - h.beta1) * grad;
  state.v = h.beta2 * state.v + (1.0 - h.beta2) * grad.cwiseProduct(grad);
  double bc1 = 1.0 - std::pow(h.beta1, double(state.t));
  double bc2 = 1.0 - std::pow(h.beta2, double(state.t));
  Mat mhat = state.m / bc1;
  Mat vhat = state.v / bc2;
  param.array() -= lr * mhat.array() / (vhat.array().sqrt() + h.eps);
}

void adam_update(ParamStore& params, const std::map<std::string, Mat>& grads, AdamState& state,
                 double lr, const AdamHyper& h) {
  for (auto& [name, p] : params.all()) {
    auto it = grads.find(name);
    if (it == grads.end()) throw ConfigError("adam_update: missing gradient for " + name);
    adam_step(p, it->second, state.moments[name], lr, h);
  }
}

}  // namespace bparse
