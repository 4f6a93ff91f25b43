#pragma once

#include "bparse/config.hpp"
#include "bparse/mae.hpp"
#include "bparse/metrics.hpp"
#include "bparse/phantom.hpp"
#include "bparse/segnet.hpp"

#include <nlohmann/json.hpp>

#include <string>
#include <vector>

namespace bparse {

// Seeded shuffle split into disjoint, exhaustive index sets. Fractions
// must sum to 1; boundaries are rounded so exact fractions give exact
// sizes (158 cases at 100/158, 28/158, 30/158 -> 100/28/30).
std::vector<std::vector<int>> split_dataset(int n_cases, const std::vector<double>& fractions,
                                            uint64_t seed);

// First k cases of a (shuffled) set: the half-budget subset is a prefix of
// the full-budget one under the same seed.
std::vector<int> labeled_subset(const std::vector<int>& set, int k);

// Phantom dataset for the pipeline: per-case seeds, missing teeth,
// crowding and noise all derive from the root seed.
struct PhantomCase {
  PhantomSpec spec;
  Volume volume;
  LabelVolume labels;
};
std::vector<PhantomCase> generate_phantom_set(int count, const Vec3i& shape, const Vec3d& spacing,
                                              double noise_sigma, uint64_t seed);

struct PipelineOptions {
  std::string out_dir;
  bool with_baseline = false;                 // also fine-tune from random init
  std::vector<MaskSourceMode> mask_sources;   // default: config's source only
  bool skip_pretraining = false;              // --init random: stage 3 only
};

struct PipelineVariantResult {
  std::string name;          // "random-init" or the mask source
  double val_dsc = -1.0;
  double test_macro_dsc = -1.0;
  MetricReport test_report;  // last test case's full report
  std::string finetune_ckpt;
};

struct PipelineResult {
  nlohmann::ordered_json report;
  std::vector<PipelineVariantResult> variants;
};

// Runs prompt training -> freeze -> MAE pre-training -> fine-tune ->
// held-out evaluation, writing checkpoints, loss logs and report.json
// under opts.out_dir.
PipelineResult run_pipeline(const StageConfig& prompt_cfg, const StageConfig& mae_cfg,
                            const StageConfig& finetune_cfg, const PipelineOptions& opts);

}  // namespace bparse
