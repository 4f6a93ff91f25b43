#include "bparse/prompt.hpp"

#include "bparse/phantom.hpp"
#include "oracles.hpp"

#include <doctest.h>

using namespace bparse;

namespace {

Rng& rng() {
  static Rng r(777);
  return r;
}

GATLayerParams random_gat(int c, int cp) {
  GATLayerParams p;
  p.theta_s = oracle::random_mat(rng(), c, cp);
  p.theta_t = oracle::random_mat(rng(), c, cp);
  p.attn_vec = oracle::random_mat(rng(), cp, 1);
  p.negative_slope = 0.2;
  return p;
}

StageConfig tiny_prompt_cfg() {
  StageConfig cfg = default_config(Stage::Prompt);
  cfg.shape = Vec3i(16, 16, 16);
  cfg.patch = Vec3i(8, 8, 8);
  cfg.embed_dim = 12;
  cfg.prompt_hidden = 10;
  cfg.prompt_heads = 2;
  cfg.dec_mid = 6;
  cfg.steps = 6;
  cfg.batch_size = 2;
  cfg.seed = 99;
  return cfg;
}

std::pair<std::vector<Volume>, std::vector<BoundaryVolume>> tiny_dataset(int n) {
  std::vector<Volume> vols;
  std::vector<BoundaryVolume> bounds;
  for (int i = 0; i < n; ++i) {
    Volume v;
    v.shape = Vec3i(16, 16, 16);
    v.spacing = Vec3d(0.4, 0.4, 0.4);
    v.voxels.resize(v.size());
    LabelVolume l;
    l.shape = v.shape;
    l.labels.setZero(l.size());
    for (int64_t k = 0; k < v.size(); ++k)
      v.voxels[k] = float(rng().uniform(kHuMin, kHuMax));
    // A small labeled blob so boundaries are non-trivial.
    for (int z = 4; z < 9; ++z)
      for (int y = 4; y < 9; ++y)
        for (int x = 4 + i; x < 9 + i; ++x) l.at(x, y, z) = uint8_t(1 + i);
    vols.push_back(std::move(v));
    bounds.push_back(derive_boundary(l));
  }
  return {vols, bounds};
}

}  // namespace

TEST_CASE("isolated node reduces to theta_s x (alpha_ii = 1)") {
  const int c = 4, cp = 3;
  GATLayerParams p = random_gat(c, cp);
  Eigen::MatrixXi adj = Eigen::MatrixXi::Identity(3, 3);
  adj(1, 2) = adj(2, 1) = 1;  // node 0 isolated
  Mat x = oracle::random_mat(rng(), 3, c);
  Mat out = gat_layer(x, adj, p, 1);
  Mat alpha = attention_coefficients(x, adj, p, 1);
  CHECK(alpha(0, 0) == doctest::Approx(1.0));
  Mat expect = x.row(0) * p.theta_s;
  CHECK((out.row(0) - expect).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("equal thetas with zero attention vector give uniform coefficients") {
  const int c = 3, cp = 3;
  GATLayerParams p = random_gat(c, cp);
  p.theta_t = p.theta_s;
  p.attn_vec.setZero();
  Eigen::MatrixXi adj = oracle::random_adjacency(rng(), 6, 0.5);
  Mat x = oracle::random_mat(rng(), 6, c);
  Mat alpha = attention_coefficients(x, adj, p, 1);
  for (int i = 0; i < 6; ++i) {
    int deg = adj.row(i).sum();  // |N(i)| + 1 (self-loop included)
    for (int j = 0; j < 6; ++j)
      if (adj(i, j)) CHECK(alpha(i, j) == doctest::Approx(1.0 / deg).epsilon(1e-12));
  }
}

TEST_CASE("gat_layer matches the per-node brute-force oracle on random graphs") {
  for (int trial = 0; trial < 30; ++trial) {
    int v = 2 + int(rng().below(6));
    int c = 1 + int(rng().below(4));
    int cp = 1 + int(rng().below(4));
    GATLayerParams p = random_gat(c, cp);
    Eigen::MatrixXi adj = oracle::random_adjacency(rng(), v);
    Mat x = oracle::random_mat(rng(), 2 * v, c);  // batch 2
    Mat out = gat_layer(x, adj, p, 2);
    for (int b = 0; b < 2; ++b) {
      Mat expect = oracle::gat_forward(x.middleRows(b * v, v), adj, p);
      CHECK((out.middleRows(b * v, v) - expect).cwiseAbs().maxCoeff() < 1e-6);
    }
  }
}

TEST_CASE("attention rows over the support sum to 1 and match brute force") {
  for (int trial = 0; trial < 20; ++trial) {
    int v = 2 + int(rng().below(8));
    GATLayerParams p = random_gat(3, 2);
    Eigen::MatrixXi adj = oracle::random_adjacency(rng(), v);
    Mat x = oracle::random_mat(rng(), v, 3);
    Mat alpha = attention_coefficients(x, adj, p, 1);
    Mat expect = oracle::gat_alpha(x, adj, p);
    CHECK((alpha - expect).cwiseAbs().maxCoeff() < 1e-9);
    for (int i = 0; i < v; ++i) {
      double sum = 0.0;
      for (int j = 0; j < v; ++j) {
        if (!adj(i, j)) CHECK(alpha(i, j) == 0.0);
        else {
          CHECK(alpha(i, j) > 0.0);
          CHECK(alpha(i, j) <= 1.0);
        }
        sum += alpha(i, j);
      }
      CHECK(sum == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
}

TEST_CASE("gat_layer is equivariant under node permutations") {
  const int v = 7, c = 3, cp = 4;
  for (int trial = 0; trial < 10; ++trial) {
    GATLayerParams p = random_gat(c, cp);
    Eigen::MatrixXi adj = oracle::random_adjacency(rng(), v);
    Mat x = oracle::random_mat(rng(), v, c);
    auto perm = rng().permutation(v);
    Eigen::MatrixXi padj(v, v);
    Mat px(v, c);
    for (int i = 0; i < v; ++i) {
      px.row(perm[i]) = x.row(i);
      for (int j = 0; j < v; ++j) padj(perm[i], perm[j]) = adj(i, j);
    }
    Mat out = gat_layer(x, adj, p, 1);
    Mat pout = gat_layer(px, padj, p, 1);
    for (int i = 0; i < v; ++i)
      CHECK((pout.row(perm[i]) - out.row(i)).cwiseAbs().maxCoeff() < 1e-9);
  }
}

TEST_CASE("gat gradients w.r.t. all three parameter tensors match finite differences") {
  const int v = 4, c = 3, cp = 3, batch = 1;
  Eigen::MatrixXi adj = oracle::random_adjacency(rng(), v, 0.6);
  Mat x = oracle::random_mat(rng(), batch * v, c);
  GATLayerParams p = random_gat(c, cp);
  Mat weights = oracle::random_mat(rng(), batch * v, cp);

  auto loss_with = [&](const Mat& ts, const Mat& tt, const Mat& av) {
    ad::Tape t;
    GatVars g = build_gat(t, t.constant(x), adj, t.constant(ts), t.constant(tt), t.constant(av),
                          p.negative_slope, batch);
    ad::Var l = ad::mean_all(t, ad::hadamard(t, g.out, t.constant(weights)));
    return t.val(l)(0, 0);
  };

  ad::Tape t;
  ad::Var vs = t.param(p.theta_s), vt = t.param(p.theta_t), va = t.param(Mat(p.attn_vec));
  GatVars g = build_gat(t, t.constant(x), adj, vs, vt, va, p.negative_slope, batch);
  ad::Var l = ad::mean_all(t, ad::hadamard(t, g.out, t.constant(weights)));
  t.backward(l);

  Mat fd_s = oracle::fd_grad(
      [&](const Mat& m) { return loss_with(m, p.theta_t, p.attn_vec); }, p.theta_s);
  Mat fd_t = oracle::fd_grad(
      [&](const Mat& m) { return loss_with(p.theta_s, m, p.attn_vec); }, p.theta_t);
  Mat fd_a = oracle::fd_grad(
      [&](const Mat& m) { return loss_with(p.theta_s, p.theta_t, m); }, Mat(p.attn_vec));
  CHECK(oracle::max_rel_err(t.grad(vs), fd_s) < 1e-4);
  CHECK(oracle::max_rel_err(t.grad(vt), fd_t) < 1e-4);
  CHECK(oracle::max_rel_err(t.grad(va), fd_a) < 1e-4);
}

TEST_CASE("gat_layer rejects bad inputs") {
  GATLayerParams p = random_gat(3, 2);
  Eigen::MatrixXi adj = Eigen::MatrixXi::Identity(4, 4);
  Mat x = oracle::random_mat(rng(), 4, 3);
  Mat bad = x;
  bad(1, 1) = std::numeric_limits<double>::quiet_NaN();
  CHECK_THROWS_AS(gat_layer(bad, adj, p, 1), DomainError);
  CHECK_THROWS_AS(gat_layer(x.leftCols(2), adj, p, 1), DimensionError);
  Eigen::MatrixXi no_loop = adj;
  no_loop(2, 2) = 0;
  CHECK_THROWS_AS(gat_layer(x, no_loop, p, 1), DimensionError);
  GATLayerParams bad_p = p;
  bad_p.negative_slope = 1.5;
  CHECK_THROWS_AS(gat_layer(x, adj, bad_p, 1), DomainError);
}

TEST_CASE("prompt_forward produces one logit per voxel and is pure") {
  StageConfig cfg = tiny_prompt_cfg();
  PromptBranch b = make_prompt_branch(PromptConfig::from_stage(cfg), 5);
  b.frozen = true;
  auto [vols, bounds] = tiny_dataset(2);
  Mat packed(2 * vols[0].size(), 1);
  packed << normalize(vols[0]).voxels.cast<double>(), normalize(vols[1]).voxels.cast<double>();
  PatchSequence xp = prompt_patchify(packed, 2, b);
  CHECK(xp.tokens.rows() == 2 * b.cfg.grid.tokens());

  Mat logits1 = prompt_forward(xp, b, b.graph);
  Mat logits2 = prompt_forward(xp, b, b.graph);
  CHECK(logits1.rows() == packed.rows());
  CHECK(logits1.cols() == 1);
  CHECK(logits1 == logits2);  // bitwise purity
  CHECK(b.param_hash() == b.param_hash());
}

TEST_CASE("zero fc2 weights and zero decoder params yield zero logits") {
  StageConfig cfg = tiny_prompt_cfg();
  cfg.prompt_heads = 1;
  PromptBranch b = make_prompt_branch(PromptConfig::from_stage(cfg), 6);
  b.params.at("fc2.w").setZero();
  b.params.at("fc2.b").setZero();
  b.params.at("pdec.up1.b").setZero();
  b.params.at("pdec.up2.b").setZero();
  auto [vols, bounds] = tiny_dataset(1);
  Mat packed = normalize(vols[0]).voxels.cast<double>();
  PatchSequence xp = prompt_patchify(packed, 1, b);
  Mat logits = prompt_forward(xp, b, b.graph);
  CHECK(logits.cwiseAbs().maxCoeff() == 0.0);
}

TEST_CASE("prompt_tokens equals the prompt_forward intermediate and guards freezing") {
  StageConfig cfg = tiny_prompt_cfg();
  PromptBranch b = make_prompt_branch(PromptConfig::from_stage(cfg), 7);
  auto [vols, bounds] = tiny_dataset(1);
  Mat packed = normalize(vols[0]).voxels.cast<double>();
  PatchSequence xp = prompt_patchify(packed, 1, b);

  CHECK_THROWS_AS(prompt_tokens(xp, b, b.graph), ConfigError);  // not frozen yet
  b.frozen = true;
  PatchSequence tok = prompt_tokens(xp, b, b.graph);
  PromptOutputs full = prompt_forward_full(xp, b, b.graph);
  CHECK(tok.tokens.rows() == b.cfg.grid.tokens());
  CHECK(tok.tokens.cols() == b.cfg.grid.embed_dim);
  CHECK((tok.tokens - full.tokens).cwiseAbs().maxCoeff() < 1e-7);
}

TEST_CASE("train_prompt_branch reduces the loss, freezes, and is seed-deterministic") {
  StageConfig cfg = tiny_prompt_cfg();
  cfg.steps = 30;
  cfg.lr = 3e-3;
  auto [vols, bounds] = tiny_dataset(2);

  LossLog log1, log2;
  PromptBranch b1 = train_prompt_branch(vols, bounds, cfg, &log1);
  PromptBranch b2 = train_prompt_branch(vols, bounds, cfg, &log2);
  CHECK(b1.frozen);
  REQUIRE(log1.entries.size() == 30);

  // Smoothed start vs end (first vs last third).
  auto mean_range = [&](const LossLog& log, size_t a, size_t b) {
    double s = 0.0;
    for (size_t i = a; i < b; ++i) s += log.entries[i].second;
    return s / double(b - a);
  };
  CHECK(mean_range(log1, 20, 30) < mean_range(log1, 0, 10));
  CHECK(log1.entries.back().second < log1.entries.front().second);

  // Same seed -> identical parameters and loss sequence.
  CHECK(b1.param_hash() == b2.param_hash());
  for (size_t i = 0; i < log1.entries.size(); ++i)
    CHECK(std::abs(log1.entries[i].second - log2.entries[i].second) <= 1e-7);

  // steps = 0 returns the initialization, frozen.
  StageConfig zero = cfg;
  zero.steps = 0;
  LossLog log0;
  PromptBranch b0 = train_prompt_branch(vols, bounds, zero, &log0);
  PromptBranch init = make_prompt_branch(PromptConfig::from_stage(zero), zero.seed);
  CHECK(b0.frozen);
  CHECK(b0.param_hash() == init.param_hash());
  CHECK(log0.entries.empty());

  CHECK_THROWS_AS(train_prompt_branch({}, {}, cfg, nullptr), ConfigError);
}

TEST_CASE("frozen branch parameter hash survives repeated forwards") {
  StageConfig cfg = tiny_prompt_cfg();
  PromptBranch b = make_prompt_branch(PromptConfig::from_stage(cfg), 11);
  b.frozen = true;
  std::string before = b.param_hash();
  auto [vols, bounds] = tiny_dataset(1);
  Mat packed = normalize(vols[0]).voxels.cast<double>();
  PatchSequence xp = prompt_patchify(packed, 1, b);
  for (int i = 0; i < 5; ++i) {
    prompt_forward(xp, b, b.graph);
    prompt_tokens(xp, b, b.graph);
  }
  CHECK(b.param_hash() == before);
}
