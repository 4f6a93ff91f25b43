#pragma once

#include "bparse/checkpoint.hpp"
#include "bparse/config.hpp"
#include "bparse/optim.hpp"
#include "bparse/prompt.hpp"

#include <optional>

namespace bparse {

// Stage-2 masked pre-training: encode all tokens, replace the planned
// fraction with mask-source tokens (prompt branch output by default),
// decode back to voxels through a logistic output, minimize MSE against
// the normalized input.
struct MaskPlan {
  double mask_rate = 0.0;
  std::vector<int> masked_indices;  // sorted, unique, in [0, N)
  uint64_t seed = 0;
};

// floor(alpha * N) indices drawn uniformly without replacement;
// deterministic in (seed, N, alpha).
MaskPlan make_mask_plan(int n_tokens, double alpha, uint64_t seed);

struct MaskSource {
  MaskSourceMode mode = MaskSourceMode::Prompt;
  std::optional<Vec> learned_token;  // required in learned mode, width C
};

// Replaces tokens at the planned indices; prompt mode derives the source
// from prompt_tokens(raw_patches) and requires a frozen branch.
PatchSequence apply_mask(const PatchSequence& x_t, const MaskPlan& plan, const MaskSource& src,
                         const PromptBranch* prompt, const PatchSequence& raw_patches);

struct MaeConfig {
  PatchGrid grid;
  EncoderConfig encoder;
  int dec_mid = 32;
  double mask_rate = 0.75;
  MaskSourceMode mask_source = MaskSourceMode::Prompt;
  bool masked_only_loss = false;

  static MaeConfig from_stage(const StageConfig& cfg);
};

struct MaeModel {
  MaeConfig cfg;
  ParamStore params;  // encoder names shared with SegModel + dec.*
};

MaeModel make_mae_model(const MaeConfig& cfg, uint64_t seed);

// One optimization step on a packed batch of normalized volumes. Returns
// the loss; the prompt branch is read-only throughout.
double pretrain_step(const Mat& volumes, int batch, MaeModel& model, const PromptBranch* branch,
                     const StageConfig& cfg, AdamState& adam, int64_t step);

// Full stage-2 run over a dataset of unlabeled volumes; persists nothing
// itself, the checkpoint carries stage = "mae" metadata.
Checkpoint run_pretraining(const std::vector<Volume>& dataset, const StageConfig& cfg,
                           const PromptBranch* branch, LossLog* log = nullptr);

}  // namespace bparse
