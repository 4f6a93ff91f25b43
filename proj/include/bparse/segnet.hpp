#pragma once

#include "bparse/checkpoint.hpp"
#include "bparse/config.hpp"
#include "bparse/metrics_fwd.hpp"
#include "bparse/optim.hpp"
#include "bparse/trainer.hpp"
#include "bparse/volume.hpp"

namespace bparse {

// Desk-scale UNETR-style segmentation network. Encoder: the shared ViT
// blocks from nn.hpp (parameter names identical to the MAE model, so
// stage-2 weights transfer by name). Decoder: a chain of stride-2
// transposed convolutions with skip fusions tapped from the encoder
// blocks, ending in a 33-channel head at full resolution.
struct SegConfig {
  PatchGrid grid;
  EncoderConfig encoder;

  static SegConfig from_stage(const StageConfig& cfg);
};

struct SegModel {
  SegConfig cfg;
  ParamStore params;
};

SegModel make_seg_model(const SegConfig& cfg, uint64_t seed);

// Deterministic forward; logits (B*V) x 33.
Mat seg_forward(const Mat& volumes, int batch, const SegModel& m);

// Tape builder shared by seg_forward and finetune.
ad::Var build_seg_logits(ad::Tape& t, const Mat& volumes, int batch, const SegConfig& cfg,
                         const BoundParams& bp);

// Copies encoder parameters (embed.w, pos, enc.*) from a stage-2
// checkpoint by name; decoder/head stay freshly initialized.
struct TransferReport {
  std::vector<std::string> transferred;
  std::vector<std::string> fresh;
};
TransferReport load_pretrained(SegModel& m, const Checkpoint& ckpt);

struct FinetuneResult {
  Checkpoint best;           // best validation mean foreground DSC (or final)
  double best_val_dsc = -1;  // -1 when no validation set was given
  LossLog log;
};

FinetuneResult finetune(const std::vector<Volume>& volumes,
                        const std::vector<LabelVolume>& labels, SegModel& m,
                        const StageConfig& cfg, const std::vector<Volume>& val_volumes = {},
                        const std::vector<LabelVolume>& val_labels = {});

// Argmax prediction for a single volume.
LabelVolume predict(const Volume& v, const SegModel& m);
// Checkpoint-based variant; requires meta.stage == "finetune".
LabelVolume predict(const Volume& v, const Checkpoint& ckpt, const StageConfig& cfg);

}  // namespace bparse
