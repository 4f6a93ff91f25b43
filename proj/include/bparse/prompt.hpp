#pragma once

#include "bparse/config.hpp"
#include "bparse/gat.hpp"
#include "bparse/trainer.hpp"
#include "bparse/volume.hpp"

#include <optional>

namespace bparse {

// Stage-1 boundary prompt branch: patch embedding -> learned token->node
// projection -> fc1 -> H parallel graph-attention heads with residuals ->
// fc2 -> node->token projection -> two-level transposed-conv decoder to a
// per-voxel boundary logit. Trained with Tversky loss on sparse boundary
// masks, then frozen; its pre-decoder tokens become the stage-2 mask source.
struct PromptConfig {
  PatchGrid grid;
  int heads = 4;
  int hidden = 64;          // fc1 width = GAT feature width
  double leaky_slope = 0.2;
  int dec_mid = 32;

  static PromptConfig from_stage(const StageConfig& cfg);
};

struct PromptBranch {
  PromptConfig cfg;
  ToothGraph graph;
  ParamStore params;
  bool frozen = false;

  std::string param_hash() const { return params.hash(); }
};

PromptBranch make_prompt_branch(const PromptConfig& cfg, uint64_t seed);

// Embeds a packed volume batch with the branch's own patch embedding.
PatchSequence prompt_patchify(const Mat& volumes, int batch, const PromptBranch& b);

// Full forward to boundary logits, one channel per voxel: (B*V) x 1.
Mat prompt_forward(const PatchSequence& x_p, const PromptBranch& b, const ToothGraph& g);

// Forward exposing the pre-decoder token sequence alongside the logits.
struct PromptOutputs {
  Mat tokens;  // (B*N) x C, the mask-source representation
  Mat logits;  // (B*V) x 1
};
PromptOutputs prompt_forward_full(const PatchSequence& x_p, const PromptBranch& b,
                                  const ToothGraph& g);

// Pre-decoder tokens only; requires a frozen branch (stage separation).
PatchSequence prompt_tokens(const PatchSequence& x_p, const PromptBranch& b, const ToothGraph& g);

// Tape builder shared between inference and training.
struct PromptGraphVars {
  ad::Var tokens;
  ad::Var logits;
};
PromptGraphVars build_prompt_graph(ad::Tape& t, ad::Var x_tokens, const BoundParams& bp,
                                   const PromptConfig& cfg, const ToothGraph& g, int batch);

// Adam + Tversky training on (volume, boundary) pairs; returns the frozen
// branch and fills `log` with one (step, loss) entry per step.
PromptBranch train_prompt_branch(const std::vector<Volume>& volumes,
                                 const std::vector<BoundaryVolume>& boundaries,
                                 const StageConfig& cfg, LossLog* log = nullptr);

}  // namespace bparse
