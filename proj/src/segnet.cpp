#include "bparse/segnet.hpp"

#include "bparse/losses.hpp"

#include <algorithm>

namespace bparse {

namespace {

// Stride-2 stages: the decoder doubles resolution until a patch is fully
// expanded, so patch sizes must be powers of two (per axis).
int stage_count(const Vec3i& patch) {
  int stages = 0;
  for (int a = 0; a < 3; ++a) {
    int p = patch[a];
    int k = 0;
    while (p > 1) {
      if (p % 2 != 0)
        throw ConfigError("segnet requires power-of-two patch sizes, got " + std::to_string(patch[a]));
      p /= 2;
      ++k;
    }
    stages = std::max(stages, k);
  }
  if (stages == 0) throw ConfigError("segnet patch size must exceed 1");
  return stages;
}

Vec3i stage_factors(const Vec3i& patch, int stage) {
  // stage is 0-based; axis a upsamples by 2 while it still has levels left.
  Vec3i f;
  for (int a = 0; a < 3; ++a) {
    int levels = 0;
    int p = patch[a];
    while (p > 1) { p /= 2; ++levels; }
    f[a] = stage < levels ? 2 : 1;
  }
  return f;
}

int stage_channels(int embed_dim, int stage) {
  int c = embed_dim >> (stage + 1);
  return std::max(c, 8);
}

}  // namespace

SegConfig SegConfig::from_stage(const StageConfig& cfg) {
  SegConfig s;
  s.grid = make_patch_grid(cfg.shape, cfg.patch, cfg.embed_dim);
  s.encoder = {cfg.enc_blocks, cfg.enc_heads, cfg.mlp_ratio};
  return s;
}

SegModel make_seg_model(const SegConfig& cfg, uint64_t seed) {
  SegModel m;
  m.cfg = cfg;
  Rng rng(seed);
  add_encoder_params(m.params, rng, cfg.grid, cfg.encoder);

  const int C = cfg.grid.embed_dim;
  const int S = stage_count(cfg.grid.patch_size);
  Vec3i cum = Vec3i::Ones();
  int c_in = C;
  for (int j = 0; j < S; ++j) {
    Vec3i f = stage_factors(cfg.grid.patch_size, j);
    cum = cum.cwiseProduct(f);
    const int c_out = stage_channels(C, j);
    const int k = f.prod();
    std::string p = "sdec.up" + std::to_string(j) + ".";
    m.params.add(p + "w", init_linear(rng, c_in, int64_t(k) * c_out));
    m.params.add(p + "b", Mat::Zero(1, int64_t(k) * c_out));
    // Skip taps: deepest-but-one encoder block fuses first.
    int block = cfg.encoder.blocks - 2 - j;
    if (block >= 0) {
      std::string sp = "sdec.skip" + std::to_string(j) + ".";
      m.params.add(sp + "w", init_linear(rng, C, int64_t(cum.prod()) * c_out));
      m.params.add(sp + "b", Mat::Zero(1, int64_t(cum.prod()) * c_out));
      std::string fp = "sdec.fuse" + std::to_string(j) + ".";
      m.params.add(fp + "w", init_linear(rng, 2 * c_out, c_out));
      m.params.add(fp + "b", Mat::Zero(1, c_out));
    }
    c_in = c_out;
  }
  m.params.add("head.w", init_linear(rng, c_in, kNumClasses));
  m.params.add("head.b", Mat::Zero(1, kNumClasses));
  return m;
}

ad::Var build_seg_logits(ad::Tape& t, const Mat& volumes, int batch, const SegConfig& cfg,
                         const BoundParams& bp) {
  using namespace ad;
  const int64_t V = voxel_count(cfg.grid.volume_shape());
  require(volumes.rows() == int64_t(batch) * V && volumes.cols() == 1,
          "seg_forward: volume batch does not match the configured grid");

  Mat patches = gather_patches(volumes, cfg.grid, batch);
  EncoderTaps taps = build_encoder(t, t.constant(patches), bp, batch, cfg.grid, cfg.encoder);

  const int C = cfg.grid.embed_dim;
  const int S = stage_count(cfg.grid.patch_size);
  Var x = taps.out;
  Vec3i res = cfg.grid.grid;   // current decoder resolution
  Vec3i cum = Vec3i::Ones();   // cumulative upsampling from token grid
  for (int j = 0; j < S; ++j) {
    Vec3i f = stage_factors(cfg.grid.patch_size, j);
    const int c_out = stage_channels(C, j);
    std::string p = "sdec.up" + std::to_string(j) + ".";
    x = tconv(t, x, bp.at(p + "w"), bp.at(p + "b"), res, f, c_out, batch);
    res = res.cwiseProduct(f);
    cum = cum.cwiseProduct(f);
    int block = cfg.encoder.blocks - 2 - j;
    if (block >= 0) {
      std::string sp = "sdec.skip" + std::to_string(j) + ".";
      Var skip = tconv(t, taps.block_out[block], bp.at(sp + "w"), bp.at(sp + "b"), cfg.grid.grid,
                       cum, c_out, batch);
      std::string fp = "sdec.fuse" + std::to_string(j) + ".";
      Var both = concat_cols(t, x, skip);
      x = add_rowvec(t, matmul(t, both, bp.at(fp + "w")), bp.at(fp + "b"));
    }
    x = relu(t, x);
  }
  return add_rowvec(t, matmul(t, x, bp.at("head.w")), bp.at("head.b"));
}

Mat seg_forward(const Mat& volumes, int batch, const SegModel& m) {
  ad::Tape t;
  BoundParams bp = bind_params(t, m.params, /*trainable=*/false);
  ad::Var logits = build_seg_logits(t, volumes, batch, m.cfg, bp);
  return t.val(logits);
}

TransferReport load_pretrained(SegModel& m, const Checkpoint& ckpt) {
  if (ckpt.meta.stage != "mae")
    throw ConfigError("load_pretrained expects a stage \"mae\" checkpoint, got \"" +
                      ckpt.meta.stage + "\"");
  auto is_encoder = [](const std::string& name) {
    return name == "embed.w" || name == "pos" || name.rfind("enc.", 0) == 0;
  };
  std::vector<std::string> problems;
  TransferReport report;
  for (auto& [name, p] : m.params.all()) {
    if (!is_encoder(name)) {
      report.fresh.push_back(name);
      continue;
    }
    if (!ckpt.params.has(name)) {
      problems.push_back(name + " (missing from checkpoint)");
      continue;
    }
    const Mat& src = ckpt.params.at(name);
    if (src.rows() != p.rows() || src.cols() != p.cols()) {
      problems.push_back(name + " (shape " + std::to_string(src.rows()) + "x" +
                         std::to_string(src.cols()) + " vs " + std::to_string(p.rows()) + "x" +
                         std::to_string(p.cols()) + ")");
      continue;
    }
    p = src;
    report.transferred.push_back(name);
  }
  if (!problems.empty()) {
    std::string msg = "weight transfer failed for:";
    for (const auto& s : problems) msg += "\n  " + s;
    throw DataError(msg);
  }
  return report;
}

namespace {

LabelVolume argmax_labels(const Mat& logits, const Vec3i& shape, const Vec3d& spacing) {
  LabelVolume out;
  out.shape = shape;
  out.spacing = spacing;
  const int64_t V = voxel_count(shape);
  out.labels.resize(V);
  for (int64_t i = 0; i < V; ++i) {
    int best = 0;
    double best_v = logits(i, 0);
    for (int c = 1; c < kNumClasses; ++c)
      if (logits(i, c) > best_v) {
        best_v = logits(i, c);
        best = c;
      }
    out.labels[i] = uint8_t(best);
  }
  return out;
}

}  // namespace

FinetuneResult finetune(const std::vector<Volume>& volumes,
                        const std::vector<LabelVolume>& labels, SegModel& m,
                        const StageConfig& cfg, const std::vector<Volume>& val_volumes,
                        const std::vector<LabelVolume>& val_labels) {
  if (volumes.empty() || volumes.size() != labels.size())
    throw ConfigError("finetune needs at least one labeled (volume, labels) pair");
  if (val_volumes.size() != val_labels.size())
    throw ConfigError("validation volumes and labels must pair up");
  cfg.validate();
  const SegLossParams seg_params = cfg.seg_params();

  std::vector<Mat> vols;
  std::vector<Eigen::Matrix<uint8_t, Eigen::Dynamic, 1>> labs;
  for (size_t i = 0; i < volumes.size(); ++i) {
    require(volumes[i].shape == cfg.shape, "finetune volume shape differs from config");
    require(labels[i].shape == cfg.shape, "finetune label shape differs from config");
    vols.push_back(normalize(volumes[i]).voxels.cast<double>());
    labs.push_back(labels[i].labels);
  }

  const int64_t V = voxel_count(cfg.shape);
  AdamState adam;
  BatchSampler sampler(int(vols.size()), cfg.batch_size, mix_seed(cfg.seed, 0xf17e));
  FinetuneResult result;

  auto snapshot = [&](int64_t step) {
    Checkpoint c;
    c.meta.stage = "finetune";
    c.meta.step = step;
    c.meta.seed = cfg.seed;
    c.meta.config_hash = config_hash(cfg);
    c.meta.config_text = canonical_config_text(cfg);
    c.params = m.params;
    return c;
  };
  auto validate_now = [&]() {
    double sum = 0.0;
    for (size_t i = 0; i < val_volumes.size(); ++i)
      sum += macro_foreground_dsc(predict(val_volumes[i], m), val_labels[i]);
    return val_volumes.empty() ? -1.0 : sum / double(val_volumes.size());
  };

  for (int64_t step = 0; step < cfg.steps; ++step) {
    auto idx = sampler.next();
    Mat batch(int64_t(idx.size()) * V, 1);
    Eigen::Matrix<uint8_t, Eigen::Dynamic, 1> target(int64_t(idx.size()) * V);
    for (size_t k = 0; k < idx.size(); ++k) {
      batch.block(int64_t(k) * V, 0, V, 1) = vols[idx[k]];
      target.segment(int64_t(k) * V, V) = labs[idx[k]];
    }
    ad::Tape t;
    BoundParams bp = bind_params(t, m.params, /*trainable=*/true);
    ad::Var logits = build_seg_logits(t, batch, int(idx.size()), m.cfg, bp);
    ad::Var loss = ad::seg_loss_op(t, logits, target, seg_params);
    double loss_val = t.val(loss)(0, 0);
    if (!std::isfinite(loss_val))
      throw DivergenceError("finetune diverged at step " + std::to_string(step));
    t.backward(loss);
    auto grads = collect_grads(t, m.params, bp);
    adam_update(m.params, grads, adam,
                lr_at(step, cfg.lr, cfg.lr_decay_factor, cfg.lr_decay_every));
    result.log.record(step, loss_val);

    if (!val_volumes.empty() && ((step + 1) % cfg.eval_every == 0 || step + 1 == cfg.steps)) {
      double dsc = validate_now();
      if (dsc > result.best_val_dsc) {
        result.best_val_dsc = dsc;
        result.best = snapshot(step + 1);
        result.best.meta.metrics["val_macro_dsc"] = dsc;
      }
    }
  }
  if (result.best.params.size() == 0) result.best = snapshot(cfg.steps);
  return result;
}

LabelVolume predict(const Volume& v, const SegModel& m) {
  Volume n = normalize(v);
  Mat packed = n.voxels.cast<double>();
  Mat logits = seg_forward(packed, 1, m);
  return argmax_labels(logits, v.shape, v.spacing);
}

LabelVolume predict(const Volume& v, const Checkpoint& ckpt, const StageConfig& cfg) {
  if (ckpt.meta.stage != "finetune")
    throw ConfigError("predict expects a stage \"finetune\" checkpoint, got \"" +
                      ckpt.meta.stage + "\"");
  SegModel m = make_seg_model(SegConfig::from_stage(cfg), cfg.seed);
  for (auto& [name, p] : m.params.all()) {
    if (!ckpt.params.has(name)) throw DataError("checkpoint missing parameter " + name);
    const Mat& src = ckpt.params.at(name);
    require(src.rows() == p.rows() && src.cols() == p.cols(),
            "checkpoint parameter shape mismatch for " + name);
    p = src;
  }
  return predict(v, m);
}

}  // namespace bparse
