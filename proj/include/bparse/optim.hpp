#pragma once

#include "bparse/nn.hpp"

#include <cmath>
#include <map>

namespace bparse {

// Step learning-rate schedule: lr * factor^floor(step / every).
inline double lr_at(int64_t step, double lr, double decay_factor, int64_t decay_every) {
  if (step < 0) throw ConfigError("lr_at: step must be >= 0");
  if (decay_every <= 0) throw ConfigError("lr_at: decay_every must be positive");
  return lr * std::pow(decay_factor, double(step / decay_every));
}

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

struct AdamMoments {
  Mat m, v;
  int64_t t = 0;
};

// One bias-corrected Adam update for a single tensor.
void adam_step(Mat& param, const Mat& grad, AdamMoments& state, double lr,
               const AdamHyper& h = {});

// Whole-store update; moments are keyed by parameter name and created on
// first use. Non-finite gradients raise DivergenceError.
struct AdamState {
  std::map<std::string, AdamMoments> moments;
};

void adam_update(ParamStore& params, const std::map<std::string, Mat>& grads, AdamState& state,
                 double lr, const AdamHyper& h = {});

}  // namespace bparse
