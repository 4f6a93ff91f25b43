#include "bparse/mae.hpp"

#include "oracles.hpp"

#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

using namespace bparse;

namespace {

Rng& rng() {
  static Rng r(31337);
  return r;
}

StageConfig tiny_mae_cfg() {
  StageConfig cfg = default_config(Stage::Mae);
  cfg.shape = Vec3i(16, 16, 16);
  cfg.patch = Vec3i(8, 8, 8);
  cfg.embed_dim = 12;
  cfg.enc_blocks = 2;
  cfg.enc_heads = 2;
  cfg.mlp_ratio = 2;
  cfg.dec_mid = 6;
  cfg.prompt_hidden = 10;
  cfg.prompt_heads = 2;
  cfg.steps = 12;
  cfg.batch_size = 2;
  cfg.seed = 4242;
  return cfg;
}

std::vector<Volume> tiny_volumes(int n, uint64_t seed) {
  std::vector<Volume> out;
  Rng r(seed);
  for (int i = 0; i < n; ++i) {
    Volume v;
    v.shape = Vec3i(16, 16, 16);
    v.spacing = Vec3d(0.4, 0.4, 0.4);
    v.voxels.resize(v.size());
    for (int64_t k = 0; k < v.size(); ++k) v.voxels[k] = float(r.uniform(kHuMin, kHuMax));
    out.push_back(std::move(v));
  }
  return out;
}

PromptBranch tiny_frozen_branch(const StageConfig& cfg, uint64_t seed) {
  PromptBranch b = make_prompt_branch(PromptConfig::from_stage(cfg), seed);
  b.frozen = true;
  return b;
}

}  // namespace

TEST_CASE("mask plans: size, range, determinism and edge rates") {
  CHECK(make_mask_plan(16, 0.0, 5).masked_indices.empty());
  MaskPlan full = make_mask_plan(16, 1.0, 5);
  CHECK(full.masked_indices.size() == 16);

  MaskPlan a = make_mask_plan(64, 0.75, 3);
  MaskPlan b = make_mask_plan(64, 0.75, 3);
  CHECK(a.masked_indices.size() == 48);
  CHECK(a.masked_indices == b.masked_indices);

  for (int trial = 0; trial < 200; ++trial) {
    int n = 1 + int(rng().below(128));
    double alpha = rng().uniform();
    MaskPlan p = make_mask_plan(n, alpha, rng().next_u64());
    CHECK(int(p.masked_indices.size()) == int(std::floor(alpha * n)));
    std::set<int> uniq(p.masked_indices.begin(), p.masked_indices.end());
    CHECK(uniq.size() == p.masked_indices.size());
    if (!p.masked_indices.empty()) {
      CHECK(p.masked_indices.front() >= 0);
      CHECK(p.masked_indices.back() < n);
      CHECK(std::is_sorted(p.masked_indices.begin(), p.masked_indices.end()));
    }
  }
  CHECK_THROWS_AS(make_mask_plan(16, -0.1, 0), DomainError);
  CHECK_THROWS_AS(make_mask_plan(16, 1.1, 0), DomainError);
}

TEST_CASE("apply_mask replaces exactly the planned rows") {
  StageConfig cfg = tiny_mae_cfg();
  PromptBranch branch = tiny_frozen_branch(cfg, 8);
  auto vols = tiny_volumes(2, 21);
  Mat packed(2 * vols[0].size(), 1);
  packed << normalize(vols[0]).voxels.cast<double>(), normalize(vols[1]).voxels.cast<double>();
  PatchSequence raw = prompt_patchify(packed, 2, branch);

  PatchSequence x = raw;  // stand-in for encoded tokens
  const int n = x.grid.tokens();

  SUBCASE("empty plan is the identity") {
    MaskPlan plan = make_mask_plan(n, 0.0, 1);
    PatchSequence y = apply_mask(x, plan, {MaskSourceMode::Zero, std::nullopt}, nullptr, raw);
    CHECK(y.tokens == x.tokens);
  }

  SUBCASE("zero mode with a full plan zeroes everything") {
    MaskPlan plan = make_mask_plan(n, 1.0, 1);
    PatchSequence y = apply_mask(x, plan, {MaskSourceMode::Zero, std::nullopt}, nullptr, raw);
    CHECK(y.tokens.cwiseAbs().maxCoeff() == 0.0);
  }

  SUBCASE("prompt mode: masked rows equal prompt tokens, others untouched") {
    MaskPlan plan;
    plan.mask_rate = 1.0 / n;
    plan.masked_indices = {5};
    PatchSequence y = apply_mask(x, plan, {MaskSourceMode::Prompt, std::nullopt}, &branch, raw);
    Mat src = prompt_tokens(raw, branch, branch.graph).tokens;
    for (int b = 0; b < 2; ++b)
      for (int i = 0; i < n; ++i) {
        if (i == 5) CHECK(y.tokens.row(b * n + i) == src.row(b * n + i));
        else CHECK(y.tokens.row(b * n + i) == x.tokens.row(b * n + i));
      }
  }

  SUBCASE("learned mode uses the given token; prompt mode demands a frozen branch") {
    MaskPlan plan = make_mask_plan(n, 0.5, 9);
    Vec tok = Vec::Constant(cfg.embed_dim, 1.5);
    PatchSequence y = apply_mask(x, plan, {MaskSourceMode::Learned, tok}, nullptr, raw);
    for (int i : plan.masked_indices)
      CHECK((y.tokens.row(i).array() == 1.5).all());
    CHECK_THROWS_AS(apply_mask(x, plan, {MaskSourceMode::Learned, std::nullopt}, nullptr, raw),
                    ConfigError);
    CHECK_THROWS_AS(apply_mask(x, plan, {MaskSourceMode::Prompt, std::nullopt}, nullptr, raw),
                    ConfigError);
    PromptBranch unfrozen = make_prompt_branch(PromptConfig::from_stage(cfg), 8);
    CHECK_THROWS_AS(apply_mask(x, plan, {MaskSourceMode::Prompt, std::nullopt}, &unfrozen, raw),
                    ConfigError);
  }
}

TEST_CASE("random apply_mask trials: changed set is contained in the plan") {
  StageConfig cfg = tiny_mae_cfg();
  PromptBranch branch = tiny_frozen_branch(cfg, 12);
  auto vols = tiny_volumes(1, 22);
  Mat packed = normalize(vols[0]).voxels.cast<double>();
  PatchSequence raw = prompt_patchify(packed, 1, branch);
  const int n = raw.grid.tokens();
  for (int trial = 0; trial < 100; ++trial) {
    MaskPlan plan = make_mask_plan(n, rng().uniform(), rng().next_u64());
    PatchSequence y = apply_mask(raw, plan, {MaskSourceMode::Zero, std::nullopt}, nullptr, raw);
    std::set<int> planned(plan.masked_indices.begin(), plan.masked_indices.end());
    for (int i = 0; i < n; ++i) {
      bool changed = (y.tokens.row(i) - raw.tokens.row(i)).cwiseAbs().maxCoeff() > 0.0;
      if (changed) CHECK(planned.count(i) == 1);
      if (planned.count(i))
        CHECK(y.tokens.row(i).cwiseAbs().maxCoeff() == 0.0);
    }
  }
}

TEST_CASE("pretrain_step: alpha 0 beats alpha 0.75 once the decoder near-inverts the encoder") {
  StageConfig cfg = tiny_mae_cfg();
  cfg.mask_rate = 0.0;
  cfg.mask_source = MaskSourceMode::Zero;
  cfg.steps = 80;
  cfg.lr = 2e-3;
  auto vols = tiny_volumes(2, 23);
  Mat packed(2 * vols[0].size(), 1);
  packed << normalize(vols[0]).voxels.cast<double>(), normalize(vols[1]).voxels.cast<double>();

  // Reach a state where decode(encode(x)) reconstructs x reasonably well.
  Checkpoint trained = run_pretraining(vols, cfg, nullptr, nullptr);

  auto loss_once = [&](double alpha) {
    StageConfig c = cfg;
    c.mask_rate = alpha;
    MaeModel model = make_mae_model(MaeConfig::from_stage(c), c.seed);
    for (auto& [name, p] : model.params.all()) p = trained.params.at(name);
    AdamState adam;
    return pretrain_step(packed, 2, model, nullptr, c, adam, 0);  // loss before the update
  };
  // Identical trained weights and data; only the mask rate differs.
  CHECK(loss_once(0.0) < loss_once(0.75));
}

TEST_CASE("pretrain_step leaves the frozen branch untouched and is deterministic") {
  StageConfig cfg = tiny_mae_cfg();
  cfg.steps = 8;
  PromptBranch branch = tiny_frozen_branch(cfg, 77);
  std::string hash_before = branch.param_hash();
  auto vols = tiny_volumes(3, 24);

  LossLog log1, log2;
  Checkpoint c1 = run_pretraining(vols, cfg, &branch, &log1);
  CHECK(branch.param_hash() == hash_before);
  Checkpoint c2 = run_pretraining(vols, cfg, &branch, &log2);
  CHECK(branch.param_hash() == hash_before);
  REQUIRE(log1.entries.size() == log2.entries.size());
  for (size_t i = 0; i < log1.entries.size(); ++i)
    CHECK(std::abs(log1.entries[i].second - log2.entries[i].second) <= 1e-7);
  CHECK(c1.params.hash() == c2.params.hash());
  CHECK(c1.meta.stage == "mae");
}

TEST_CASE("run_pretraining reduces the reconstruction loss") {
  StageConfig cfg = tiny_mae_cfg();
  cfg.steps = 60;
  cfg.lr = 2e-3;
  cfg.mask_source = MaskSourceMode::Zero;  // no branch needed for the trend check
  auto vols = tiny_volumes(4, 25);
  LossLog log;
  run_pretraining(vols, cfg, nullptr, &log);
  auto mean_range = [&](size_t a, size_t b) {
    double s = 0.0;
    for (size_t i = a; i < b; ++i) s += log.entries[i].second;
    return s / double(b - a);
  };
  CHECK(mean_range(45, 60) < mean_range(0, 15));
  CHECK_THROWS_AS(run_pretraining({}, cfg, nullptr, nullptr), ConfigError);
}

TEST_CASE("masked-only loss variant trains and differs from the full-volume loss") {
  StageConfig cfg = tiny_mae_cfg();
  cfg.steps = 1;
  cfg.mask_source = MaskSourceMode::Learned;
  auto vols = tiny_volumes(2, 26);
  Mat packed(2 * vols[0].size(), 1);
  packed << normalize(vols[0]).voxels.cast<double>(), normalize(vols[1]).voxels.cast<double>();

  MaeModel full_model = make_mae_model(MaeConfig::from_stage(cfg), cfg.seed);
  AdamState a1;
  double full_loss = pretrain_step(packed, 2, full_model, nullptr, cfg, a1, 0);

  StageConfig mcfg = cfg;
  mcfg.masked_only_loss = true;
  MaeModel masked_model = make_mae_model(MaeConfig::from_stage(mcfg), mcfg.seed);
  AdamState a2;
  double masked_loss = pretrain_step(packed, 2, masked_model, nullptr, mcfg, a2, 0);
  CHECK(full_loss != masked_loss);
  CHECK(std::isfinite(masked_loss));
}

TEST_CASE("mae checkpoints round-trip bit-exactly") {
  StageConfig cfg = tiny_mae_cfg();
  cfg.steps = 2;
  cfg.mask_source = MaskSourceMode::Zero;
  auto vols = tiny_volumes(2, 27);
  Checkpoint ckpt = run_pretraining(vols, cfg, nullptr, nullptr);

  auto dir = std::filesystem::temp_directory_path() / "bparse_test_mae";
  std::filesystem::create_directories(dir);
  std::string p1 = (dir / "a.ckpt").string(), p2 = (dir / "b.ckpt").string();
  save_checkpoint(ckpt, p1);
  Checkpoint loaded = load_checkpoint(p1);
  save_checkpoint(loaded, p2);
  std::ifstream f1(p1, std::ios::binary), f2(p2, std::ios::binary);
  std::string s1((std::istreambuf_iterator<char>(f1)), std::istreambuf_iterator<char>());
  std::string s2((std::istreambuf_iterator<char>(f2)), std::istreambuf_iterator<char>());
  CHECK(s1 == s2);
  CHECK(loaded.meta.stage == "mae");
  CHECK(loaded.meta.config_hash == config_hash(cfg));
  CHECK(loaded.params.hash() == ckpt.params.hash());
}
