#pragma once

#include "bparse/common.hpp"
#include "bparse/losses.hpp"

#include <string>

namespace bparse {

enum class Stage { Prompt, Mae, Finetune };

std::string stage_name(Stage s);
Stage stage_from_name(const std::string& s);

enum class MaskSourceMode { Prompt, Learned, Zero };
std::string mask_source_name(MaskSourceMode m);
MaskSourceMode mask_source_from_name(const std::string& s);

// Per-stage hyperparameters. File format: flat `key = value` lines,
// '#' comments; unknown keys are hard errors. The `profile` key must come
// first if present ("desk" is the default; "paper" restores the published
// schedule: 10,000 steps, lr 1e-4, decay 0.1 every 2,500 steps).
// The BPARSE_SEED environment variable overrides `seed` when set.
struct StageConfig {
  Stage stage = Stage::Prompt;
  std::string profile = "desk";

  int64_t steps = 300;  // desk defaults: 300 / 300 / 500 by stage
  int batch_size = 2;
  double lr = 1e-3;
  double lr_decay_factor = 0.1;
  int64_t lr_decay_every = 2500;
  uint64_t seed = 1234;

  // Data geometry.
  Vec3i shape{64, 64, 64};
  Vec3d spacing{0.4, 0.4, 0.4};
  Vec3i patch{16, 16, 16};

  // Model sizing.
  int embed_dim = 64;
  int enc_blocks = 4;
  int enc_heads = 4;
  int mlp_ratio = 4;
  int prompt_heads = 4;
  int prompt_hidden = 64;
  double leaky_slope = 0.2;
  int dec_mid = 32;

  // Stage-specific knobs.
  double mask_rate = 0.75;
  MaskSourceMode mask_source = MaskSourceMode::Prompt;
  bool masked_only_loss = false;
  double beta = 0.5;  // Eq-style CE/Dice mix for fine-tuning
  double tversky_alpha_fp = 0.3;
  double tversky_beta_fn = 0.7;
  double smooth = 1e-5;
  int64_t eval_every = 50;

  // Dataset (pipeline-level).
  std::string data_dir;
  int n_pretrain = 8;
  int n_labeled = 2;
  int n_val = 2;
  int n_test = 2;
  double phantom_noise_sigma = 20.0;

  TverskyParams tversky_params() const {
    return TverskyParams(tversky_alpha_fp, tversky_beta_fn, smooth);
  }
  SegLossParams seg_params() const {
    SegLossParams p;
    p.beta = beta;
    p.smooth = smooth;
    return p;
  }

  void validate() const;
};

// Stage-appropriate desk/paper defaults.
StageConfig default_config(Stage stage, const std::string& profile = "desk");

StageConfig parse_config_text(const std::string& text);
StageConfig parse_config_file(const std::string& path);

// Canonical serialization (sorted keys, full precision) and its SHA-256.
std::string canonical_config_text(const StageConfig& cfg);
std::string config_hash(const StageConfig& cfg);

}  // namespace bparse
