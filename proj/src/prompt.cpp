#include "bparse/prompt.hpp"

#include "bparse/optim.hpp"

namespace bparse {

PromptConfig PromptConfig::from_stage(const StageConfig& cfg) {
  PromptConfig p;
  p.grid = make_patch_grid(cfg.shape, cfg.patch, cfg.embed_dim);
  p.heads = cfg.prompt_heads;
  p.hidden = cfg.prompt_hidden;
  p.leaky_slope = cfg.leaky_slope;
  p.dec_mid = cfg.dec_mid;
  return p;
}

PromptBranch make_prompt_branch(const PromptConfig& cfg, uint64_t seed) {
  if (cfg.heads < 1 || cfg.hidden < 1 || cfg.dec_mid < 1)
    throw ConfigError("prompt branch sizing must be >= 1");
  if (!(cfg.leaky_slope > 0.0 && cfg.leaky_slope < 1.0))
    throw ConfigError("leaky_slope must lie in (0, 1)");
  PromptBranch b;
  b.cfg = cfg;
  b.graph = build_tooth_adjacency();
  Rng rng(seed);
  const int C = cfg.grid.embed_dim;
  const int P = cfg.grid.patch_voxels();
  const int N = cfg.grid.tokens();
  const int Cd = cfg.hidden;
  const int V = ToothGraph::kNodes;
  b.params.add("embed.w", init_linear(rng, P, C));
  // Fan-in for the projections is the contracted axis: N for token->node,
  // 33 for node->token.
  b.params.add("proj.to_nodes", Mat(init_linear(rng, N, V).transpose()));
  b.params.add("proj.to_tokens", Mat(init_linear(rng, V, N).transpose()));
  b.params.add("fc1.w", init_linear(rng, C, Cd));
  b.params.add("fc1.b", Mat::Zero(1, Cd));
  for (int h = 0; h < cfg.heads; ++h) {
    std::string k = "ga" + std::to_string(h) + ".";
    b.params.add(k + "theta_s", init_linear(rng, Cd, Cd));
    b.params.add(k + "theta_t", init_linear(rng, Cd, Cd));
    b.params.add(k + "attn", init_uniform(rng, Cd, 1, 1.0 / std::sqrt(double(Cd))));
  }
  b.params.add("fc2.w", init_linear(rng, Cd, C));
  b.params.add("fc2.b", Mat::Zero(1, C));
  auto [f1, f2] = two_level_factors(cfg.grid.patch_size);
  const int k1 = f1.prod(), k2 = f2.prod();
  b.params.add("pdec.up1.w", init_linear(rng, C, int64_t(k1) * cfg.dec_mid));
  b.params.add("pdec.up1.b", Mat::Zero(1, int64_t(k1) * cfg.dec_mid));
  b.params.add("pdec.up2.w", init_linear(rng, cfg.dec_mid, k2));
  b.params.add("pdec.up2.b", Mat::Zero(1, k2));
  return b;
}

PatchSequence prompt_patchify(const Mat& volumes, int batch, const PromptBranch& b) {
  return patchify(volumes, batch, b.cfg.grid, b.params.at("embed.w"));
}

PromptGraphVars build_prompt_graph(ad::Tape& t, ad::Var x_tokens, const BoundParams& bp,
                                   const PromptConfig& cfg, const ToothGraph& g, int batch) {
  using namespace ad;
  require(g.adjacency.rows() == ToothGraph::kNodes,
          "prompt branch requires the 33-node tooth graph");
  const int N = cfg.grid.tokens();
  require(t.val(x_tokens).rows() == int64_t(batch) * N && t.val(x_tokens).cols() == cfg.grid.embed_dim,
          "prompt: token sequence does not match the patch grid");

  Var nodes = shared_left_matmul(t, bp.at("proj.to_nodes"), x_tokens, batch);
  Var h = add_rowvec(t, matmul(t, nodes, bp.at("fc1.w")), bp.at("fc1.b"));
  Var acc;
  for (int head = 0; head < cfg.heads; ++head) {
    std::string k = "ga" + std::to_string(head) + ".";
    GatVars gat = build_gat(t, h, g.adjacency, bp.at(k + "theta_s"), bp.at(k + "theta_t"),
                            bp.at(k + "attn"), cfg.leaky_slope, batch);
    Var r = add(t, gat.out, h);  // residual connection around the attention
    r = add_rowvec(t, matmul(t, r, bp.at("fc2.w")), bp.at("fc2.b"));
    acc = head == 0 ? r : add(t, acc, r);
  }
  Var tokens = shared_left_matmul(t, bp.at("proj.to_tokens"), acc, batch);

  auto [f1, f2] = two_level_factors(cfg.grid.patch_size);
  Var d = tconv(t, tokens, bp.at("pdec.up1.w"), bp.at("pdec.up1.b"), cfg.grid.grid, f1,
                cfg.dec_mid, batch);
  d = relu(t, d);
  Vec3i mid_grid = cfg.grid.grid.cwiseProduct(f1);
  Var logits = tconv(t, d, bp.at("pdec.up2.w"), bp.at("pdec.up2.b"), mid_grid, f2, 1, batch);
  return {tokens, logits};
}

namespace {

PromptOutputs run_prompt(const PatchSequence& x_p, const PromptBranch& b, const ToothGraph& g) {
  ad::Tape t;
  BoundParams bp = bind_params(t, b.params, /*trainable=*/false);
  PromptGraphVars out = build_prompt_graph(t, t.constant(x_p.tokens), bp, b.cfg, g, x_p.batch);
  return {t.val(out.tokens), t.val(out.logits)};
}

}  // namespace

Mat prompt_forward(const PatchSequence& x_p, const PromptBranch& b, const ToothGraph& g) {
  return run_prompt(x_p, b, g).logits;
}

PromptOutputs prompt_forward_full(const PatchSequence& x_p, const PromptBranch& b,
                                  const ToothGraph& g) {
  return run_prompt(x_p, b, g);
}

PatchSequence prompt_tokens(const PatchSequence& x_p, const PromptBranch& b, const ToothGraph& g) {
  if (!b.frozen)
    throw ConfigError("prompt_tokens requires a frozen branch; train stage 1 first");
  PatchSequence out;
  out.tokens = run_prompt(x_p, b, g).tokens;
  out.batch = x_p.batch;
  out.grid = x_p.grid;
  return out;
}

PromptBranch train_prompt_branch(const std::vector<Volume>& volumes,
                                 const std::vector<BoundaryVolume>& boundaries,
                                 const StageConfig& cfg, LossLog* log) {
  if (volumes.empty() || volumes.size() != boundaries.size())
    throw ConfigError("prompt training needs at least one (volume, boundary) pair");
  cfg.validate();
  PromptBranch branch = make_prompt_branch(PromptConfig::from_stage(cfg), cfg.seed);
  const TverskyParams tv = cfg.tversky_params();

  // Pre-pack every case once; phantoms are small at desk scale.
  std::vector<Mat> vols, masks;
  for (size_t i = 0; i < volumes.size(); ++i) {
    require(volumes[i].shape == cfg.shape, "training volume shape differs from config");
    require(boundaries[i].shape == cfg.shape, "boundary shape differs from config");
    vols.push_back(normalize(volumes[i]).voxels.cast<double>());
    masks.push_back(boundaries[i].mask.cast<double>());
  }

  AdamState adam;
  BatchSampler sampler(int(vols.size()), cfg.batch_size, mix_seed(cfg.seed, 0x5a0));
  const int64_t V = voxel_count(cfg.shape);
  for (int64_t step = 0; step < cfg.steps; ++step) {
    auto idx = sampler.next();
    Mat batch_vol(int64_t(idx.size()) * V, 1), batch_mask(int64_t(idx.size()) * V, 1);
    for (size_t k = 0; k < idx.size(); ++k) {
      batch_vol.block(int64_t(k) * V, 0, V, 1) = vols[idx[k]];
      batch_mask.block(int64_t(k) * V, 0, V, 1) = masks[idx[k]];
    }
    ad::Tape t;
    BoundParams bp = bind_params(t, branch.params, /*trainable=*/true);
    // Patchify on-tape so the embedding trains too.
    Mat patches = gather_patches(batch_vol, branch.cfg.grid, int(idx.size()));
    ad::Var x = ad::matmul(t, t.constant(patches), bp.at("embed.w"));
    PromptGraphVars out = build_prompt_graph(t, x, bp, branch.cfg, branch.graph, int(idx.size()));
    ad::Var prob = ad::sigmoid(t, out.logits);
    ad::Var loss = ad::tversky_loss_op(t, prob, batch_mask, tv);
    double loss_val = t.val(loss)(0, 0);
    if (!std::isfinite(loss_val))
      throw DivergenceError("prompt training diverged at step " + std::to_string(step));
    t.backward(loss);
    auto grads = collect_grads(t, branch.params, bp);
    adam_update(branch.params, grads, adam,
                lr_at(step, cfg.lr, cfg.lr_decay_factor, cfg.lr_decay_every));
    if (log) log->record(step, loss_val);
  }
  branch.frozen = true;
  return branch;
}

}  // namespace bparse
