#include "bparse/mae.hpp"

#include <algorithm>
#include <numeric>

namespace bparse {

MaskPlan make_mask_plan(int n_tokens, double alpha, uint64_t seed) {
  if (n_tokens < 1) throw DomainError("make_mask_plan: N must be >= 1");
  if (alpha < 0.0 || alpha > 1.0) throw DomainError("make_mask_plan: alpha must lie in [0, 1]");
  const int k = int(std::floor(alpha * n_tokens));
  MaskPlan plan;
  plan.mask_rate = alpha;
  plan.seed = seed;
  Rng rng(seed);
  // Partial Fisher-Yates: the first k entries are a uniform sample
  // without replacement.
  std::vector<int> pool(n_tokens);
  std::iota(pool.begin(), pool.end(), 0);
  for (int i = 0; i < k; ++i) {
    int j = i + int(rng.below(uint64_t(n_tokens - i)));
    std::swap(pool[i], pool[j]);
  }
  plan.masked_indices.assign(pool.begin(), pool.begin() + k);
  std::sort(plan.masked_indices.begin(), plan.masked_indices.end());
  return plan;
}

namespace {

void check_plan(const MaskPlan& plan, int n_tokens) {
  int prev = -1;
  for (int i : plan.masked_indices) {
    if (i < 0 || i >= n_tokens) throw DomainError("mask plan index out of range");
    if (i <= prev) throw DomainError("mask plan indices must be sorted and unique");
    prev = i;
  }
}

// Materializes the mask-source token sequence, full shape (B*N) x C.
Mat mask_source_tokens(const MaskSource& src, const PromptBranch* prompt,
                       const PatchSequence& raw_patches) {
  const int64_t rows = raw_patches.tokens.rows();
  const int64_t c = raw_patches.grid.embed_dim;
  switch (src.mode) {
    case MaskSourceMode::Zero:
      return Mat::Zero(rows, c);
    case MaskSourceMode::Learned: {
      if (!src.learned_token || src.learned_token->size() != c)
        throw ConfigError("learned mask source needs a learned_token of width C");
      return src.learned_token->transpose().replicate(rows, 1);
    }
    case MaskSourceMode::Prompt: {
      if (!prompt) throw ConfigError("prompt mask source requires a prompt branch");
      if (!prompt->frozen)
        throw ConfigError("prompt mask source requires a frozen prompt branch");
      return prompt_tokens(raw_patches, *prompt, prompt->graph).tokens;
    }
  }
  throw ConfigError("unknown mask source mode");
}

}  // namespace

PatchSequence apply_mask(const PatchSequence& x_t, const MaskPlan& plan, const MaskSource& src,
                         const PromptBranch* prompt, const PatchSequence& raw_patches) {
  const int N = x_t.grid.tokens();
  check_plan(plan, N);
  require(x_t.tokens.rows() == int64_t(x_t.batch) * N, "apply_mask: token rows != batch * N");
  Mat source = mask_source_tokens(src, prompt, raw_patches);
  require(source.rows() == x_t.tokens.rows() && source.cols() == x_t.tokens.cols(),
          "apply_mask: mask source shape mismatch");
  PatchSequence out = x_t;
  for (int b = 0; b < x_t.batch; ++b)
    for (int i : plan.masked_indices)
      out.tokens.row(int64_t(b) * N + i) = source.row(int64_t(b) * N + i);
  return out;
}

MaeConfig MaeConfig::from_stage(const StageConfig& cfg) {
  MaeConfig m;
  m.grid = make_patch_grid(cfg.shape, cfg.patch, cfg.embed_dim);
  m.encoder = {cfg.enc_blocks, cfg.enc_heads, cfg.mlp_ratio};
  m.dec_mid = cfg.dec_mid;
  m.mask_rate = cfg.mask_rate;
  m.mask_source = cfg.mask_source;
  m.masked_only_loss = cfg.masked_only_loss;
  return m;
}

MaeModel make_mae_model(const MaeConfig& cfg, uint64_t seed) {
  MaeModel m;
  m.cfg = cfg;
  Rng rng(seed);
  add_encoder_params(m.params, rng, cfg.grid, cfg.encoder);
  const int C = cfg.grid.embed_dim;
  auto [f1, f2] = two_level_factors(cfg.grid.patch_size);
  const int k1 = f1.prod(), k2 = f2.prod();
  m.params.add("dec.up1.w", init_linear(rng, C, int64_t(k1) * cfg.dec_mid));
  m.params.add("dec.up1.b", Mat::Zero(1, int64_t(k1) * cfg.dec_mid));
  m.params.add("dec.up2.w", init_linear(rng, cfg.dec_mid, k2));
  m.params.add("dec.up2.b", Mat::Zero(1, k2));
  m.params.add("dec.mask_token", init_uniform(rng, 1, C, 0.1));
  return m;
}

namespace {

// Shared forward for training; returns the loss Var.
ad::Var build_mae_loss(ad::Tape& t, const Mat& volumes, int batch, const MaeModel& model,
                       const BoundParams& bp, const MaskPlan& plan, const Mat* prompt_src) {
  using namespace ad;
  const MaeConfig& cfg = model.cfg;
  const int N = cfg.grid.tokens();

  Mat patches = gather_patches(volumes, cfg.grid, batch);
  EncoderTaps taps = build_encoder(t, t.constant(patches), bp, batch, cfg.grid, cfg.encoder);

  Var source;
  switch (cfg.mask_source) {
    case MaskSourceMode::Zero:
      source = t.constant(Mat::Zero(int64_t(batch) * N, cfg.grid.embed_dim));
      break;
    case MaskSourceMode::Learned:
      source = tile_rows(t, bp.at("dec.mask_token"), batch * N);
      break;
    case MaskSourceMode::Prompt:
      require(prompt_src != nullptr, "prompt mask source tokens missing");
      source = t.constant(*prompt_src);
      break;
  }
  Var masked = row_replace(t, taps.out, source, plan.masked_indices, batch, N);

  auto [f1, f2] = two_level_factors(cfg.grid.patch_size);
  Var d = tconv(t, masked, bp.at("dec.up1.w"), bp.at("dec.up1.b"), cfg.grid.grid, f1, cfg.dec_mid,
                batch);
  d = relu(t, d);
  Vec3i mid_grid = cfg.grid.grid.cwiseProduct(f1);
  Var logits = tconv(t, d, bp.at("dec.up2.w"), bp.at("dec.up2.b"), mid_grid, f2, 1, batch);
  Var pred = sigmoid(t, logits);  // reconstruction lives in [0, 1]

  if (cfg.masked_only_loss) {
    if (plan.masked_indices.empty())
      throw ConfigError("masked_only_loss needs a non-empty mask plan");
    Var pred_tokens = gather_patches_op(t, pred, cfg.grid, batch);
    Var pred_masked = select_token_rows(t, pred_tokens, plan.masked_indices, batch, N);
    const int64_t k = int64_t(plan.masked_indices.size());
    Mat target_masked(k * batch, patches.cols());
    for (int b = 0; b < batch; ++b)
      for (int64_t j = 0; j < k; ++j)
        target_masked.row(int64_t(b) * k + j) =
            patches.row(int64_t(b) * N + plan.masked_indices[j]);
    return mse_loss_op(t, pred_masked, target_masked);
  }
  return mse_loss_op(t, pred, volumes);
}

void check_normalized(const Mat& volumes) {
  if (volumes.size() == 0) throw DataError("empty volume batch");
  if (volumes.minCoeff() < 0.0 || volumes.maxCoeff() > 1.0)
    throw DataError("pretraining expects normalized volumes in [0, 1]");
}

}  // namespace

double pretrain_step(const Mat& volumes, int batch, MaeModel& model, const PromptBranch* branch,
                     const StageConfig& cfg, AdamState& adam, int64_t step) {
  check_normalized(volumes);
  const int N = model.cfg.grid.tokens();
  MaskPlan plan = make_mask_plan(N, model.cfg.mask_rate, mix_seed(cfg.seed, uint64_t(step)));

  Mat prompt_src;
  const Mat* prompt_ptr = nullptr;
  if (model.cfg.mask_source == MaskSourceMode::Prompt) {
    if (!branch || !branch->frozen)
      throw ConfigError("prompt mask source requires a frozen prompt branch");
    PatchSequence raw = prompt_patchify(volumes, batch, *branch);
    prompt_src = prompt_tokens(raw, *branch, branch->graph).tokens;
    prompt_ptr = &prompt_src;
  }

  ad::Tape t;
  BoundParams bp = bind_params(t, model.params, /*trainable=*/true);
  ad::Var loss = build_mae_loss(t, volumes, batch, model, bp, plan, prompt_ptr);
  double loss_val = t.val(loss)(0, 0);
  if (!std::isfinite(loss_val))
    throw DivergenceError("mae pretraining diverged at step " + std::to_string(step));
  t.backward(loss);
  auto grads = collect_grads(t, model.params, bp);
  adam_update(model.params, grads, adam,
              lr_at(step, cfg.lr, cfg.lr_decay_factor, cfg.lr_decay_every));
  return loss_val;
}

Checkpoint run_pretraining(const std::vector<Volume>& dataset, const StageConfig& cfg,
                           const PromptBranch* branch, LossLog* log) {
  if (dataset.empty()) throw ConfigError("mae pretraining needs at least one volume");
  cfg.validate();
  MaeModel model = make_mae_model(MaeConfig::from_stage(cfg), cfg.seed);

  std::vector<Mat> vols;
  for (const auto& v : dataset) {
    require(v.shape == cfg.shape, "pretraining volume shape differs from config");
    vols.push_back(normalize(v).voxels.cast<double>());
  }
  const int64_t V = voxel_count(cfg.shape);
  AdamState adam;
  BatchSampler sampler(int(vols.size()), cfg.batch_size, mix_seed(cfg.seed, 0x3ae));
  for (int64_t step = 0; step < cfg.steps; ++step) {
    auto idx = sampler.next();
    Mat batch(int64_t(idx.size()) * V, 1);
    for (size_t k = 0; k < idx.size(); ++k)
      batch.block(int64_t(k) * V, 0, V, 1) = vols[idx[k]];
    double loss = pretrain_step(batch, int(idx.size()), model, branch, cfg, adam, step);
    if (log) log->record(step, loss);
  }

  Checkpoint ckpt;
  ckpt.meta.stage = "mae";
  ckpt.meta.step = cfg.steps;
  ckpt.meta.seed = cfg.seed;
  ckpt.meta.config_hash = config_hash(cfg);
  ckpt.meta.config_text = canonical_config_text(cfg);
  ckpt.params = model.params;
  return ckpt;
}

}  // namespace bparse
