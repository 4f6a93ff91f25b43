#include "bparse/pipeline.hpp"

#include "bparse/volume_io.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>

namespace bparse {

namespace fs = std::filesystem;

std::vector<std::vector<int>> split_dataset(int n_cases, const std::vector<double>& fractions,
                                            uint64_t seed) {
  if (n_cases < 0) throw ConfigError("split_dataset: negative case count");
  if (fractions.empty()) throw ConfigError("split_dataset: no fractions given");
  double sum = 0.0;
  for (double f : fractions) {
    if (f < 0.0) throw ConfigError("split_dataset: fractions must be non-negative");
    sum += f;
  }
  if (std::abs(sum - 1.0) > 1e-9) throw ConfigError("split_dataset: fractions must sum to 1");

  Rng rng(seed);
  std::vector<int> order = rng.permutation(n_cases);
  std::vector<std::vector<int>> sets(fractions.size());
  double cum = 0.0;
  int64_t prev = 0;
  for (size_t i = 0; i < fractions.size(); ++i) {
    cum += fractions[i];
    int64_t bound = i + 1 == fractions.size() ? n_cases : int64_t(std::llround(cum * n_cases));
    bound = std::min<int64_t>(std::max<int64_t>(bound, prev), n_cases);
    sets[i].assign(order.begin() + prev, order.begin() + bound);
    prev = bound;
  }
  return sets;
}

std::vector<int> labeled_subset(const std::vector<int>& set, int k) {
  if (k < 0 || size_t(k) > set.size())
    throw ConfigError("labeled_subset: k outside [0, set size]");
  return std::vector<int>(set.begin(), set.begin() + k);
}

std::vector<PhantomCase> generate_phantom_set(int count, const Vec3i& shape, const Vec3d& spacing,
                                              double noise_sigma, uint64_t seed) {
  std::vector<PhantomCase> cases;
  cases.reserve(count);
  for (int i = 0; i < count; ++i) {
    Rng rng(mix_seed(seed, uint64_t(i)));
    PhantomCase c;
    c.spec.shape = shape;
    c.spec.spacing = spacing;
    c.spec.noise_sigma = noise_sigma;
    c.spec.seed = mix_seed(seed, 0x1000 + uint64_t(i));
    c.spec.crowding_factor = rng.uniform(0.0, 0.8);
    int n_missing = int(rng.below(4));  // 0..3 missing teeth per case
    while (int(c.spec.missing_teeth.size()) < n_missing)
      c.spec.missing_teeth.insert(1 + int(rng.below(32)));
    auto [vol, lab] = generate_phantom(c.spec);
    c.volume = std::move(vol);
    c.labels = std::move(lab);
    cases.push_back(std::move(c));
  }
  return cases;
}

namespace {

nlohmann::ordered_json loss_log_json(const LossLog& log) {
  nlohmann::ordered_json j = nlohmann::ordered_json::array();
  for (const auto& [step, loss] : log.entries) j.push_back({{"step", step}, {"loss", loss}});
  return j;
}

std::vector<Volume> pick_volumes(const std::vector<PhantomCase>& cases,
                                 const std::vector<int>& idx) {
  std::vector<Volume> out;
  for (int i : idx) out.push_back(cases[i].volume);
  return out;
}

std::vector<LabelVolume> pick_labels(const std::vector<PhantomCase>& cases,
                                     const std::vector<int>& idx) {
  std::vector<LabelVolume> out;
  for (int i : idx) out.push_back(cases[i].labels);
  return out;
}

}  // namespace

PipelineResult run_pipeline(const StageConfig& prompt_cfg, const StageConfig& mae_cfg,
                            const StageConfig& finetune_cfg, const PipelineOptions& opts) {
  prompt_cfg.validate();
  mae_cfg.validate();
  finetune_cfg.validate();
  if (opts.out_dir.empty()) throw ConfigError("pipeline needs an output directory");
  require(prompt_cfg.shape == mae_cfg.shape && mae_cfg.shape == finetune_cfg.shape,
          "pipeline stage configs must agree on the volume shape");
  fs::create_directories(opts.out_dir);
  auto path = [&](const std::string& name) { return (fs::path(opts.out_dir) / name).string(); };

  // Four disjoint sets, mirroring the paper's partition topology:
  // pre-training pool (boundary labels only), labeled train, val, test.
  const StageConfig& d = finetune_cfg;
  const int total = d.n_pretrain + d.n_labeled + d.n_val + d.n_test;
  if (d.n_labeled < 1 || d.n_test < 1)
    throw ConfigError("pipeline needs at least one labeled and one test case");
  auto cases = generate_phantom_set(total, d.shape, d.spacing, d.phantom_noise_sigma,
                                    mix_seed(d.seed, 0xca5e));
  std::vector<double> fractions = {double(d.n_pretrain) / total, double(d.n_labeled) / total,
                                   double(d.n_val) / total, double(d.n_test) / total};
  auto sets = split_dataset(total, fractions, mix_seed(d.seed, 0x5717));

  nlohmann::ordered_json report;
  report["config_hashes"] = {{"prompt", config_hash(prompt_cfg)},
                             {"mae", config_hash(mae_cfg)},
                             {"finetune", config_hash(finetune_cfg)}};
  report["dataset"] = {{"total", total},
                       {"pretrain", sets[0].size()},
                       {"labeled", sets[1].size()},
                       {"val", sets[2].size()},
                       {"test", sets[3].size()}};
  report["stages"] = nlohmann::ordered_json::array();

  auto train_vols = pick_volumes(cases, sets[1]);
  auto train_labs = pick_labels(cases, sets[1]);
  auto val_vols = pick_volumes(cases, sets[2]);
  auto val_labs = pick_labels(cases, sets[2]);

  PipelineResult result;

  auto run_finetune = [&](const std::string& name, const Checkpoint* init) {
    SegModel model = make_seg_model(SegConfig::from_stage(finetune_cfg), finetune_cfg.seed);
    nlohmann::ordered_json stage;
    stage["stage"] = "finetune";
    stage["variant"] = name;
    if (init) {
      TransferReport tr = load_pretrained(model, *init);
      stage["transferred"] = tr.transferred.size();
      stage["fresh"] = tr.fresh.size();
    } else {
      stage["transferred"] = 0;
      stage["fresh"] = model.params.size();
    }
    FinetuneResult fr = finetune(train_vols, train_labs, model, finetune_cfg, val_vols, val_labs);
    std::string log_path = path("finetune_" + name + "_loss.csv");
    fr.log.write_csv(log_path);
    std::string ckpt_path = path("finetune_" + name + ".ckpt");
    save_checkpoint(fr.best, ckpt_path);
    stage["loss_csv"] = log_path;
    stage["checkpoint"] = ckpt_path;
    stage["final_loss"] = fr.log.entries.empty() ? 0.0 : fr.log.entries.back().second;
    stage["best_val_dsc"] = fr.best_val_dsc;

    // Held-out test evaluation with the best checkpoint's weights.
    SegModel best_model = make_seg_model(SegConfig::from_stage(finetune_cfg), finetune_cfg.seed);
    for (auto& [pname, p] : best_model.params.all()) p = fr.best.params.at(pname);
    PipelineVariantResult var;
    var.name = name;
    var.val_dsc = fr.best_val_dsc;
    var.finetune_ckpt = ckpt_path;
    double dsc_sum = 0.0;
    int dsc_n = 0;
    nlohmann::ordered_json test_json = nlohmann::ordered_json::array();
    for (int i : sets[3]) {
      LabelVolume pred = predict(cases[i].volume, best_model);
      MetricReport rep = evaluate(pred, cases[i].labels, cases[i].volume.spacing);
      if (rep.macro_dsc) {
        dsc_sum += *rep.macro_dsc;
        ++dsc_n;
      }
      test_json.push_back(rep.to_json());
      var.test_report = std::move(rep);  // last case; the mean lands in the row
    }
    var.test_macro_dsc = dsc_n ? dsc_sum / dsc_n : -1.0;
    stage["test_macro_dsc"] = dsc_n ? nlohmann::ordered_json(dsc_sum / dsc_n)
                                    : nlohmann::ordered_json(nullptr);
    stage["test_reports"] = std::move(test_json);
    report["stages"].push_back(stage);
    nlohmann::ordered_json row;
    row["variant"] = name;
    row["val_dsc"] = fr.best_val_dsc;
    row["test_macro_dsc"] = stage["test_macro_dsc"];
    result.variants.push_back(std::move(var));
    return row;
  };

  nlohmann::ordered_json rows = nlohmann::ordered_json::array();

  if (!opts.skip_pretraining) {
    // Stage 1: prompt branch on the pre-training pool's boundary labels.
    auto pool_vols = pick_volumes(cases, sets[0]);
    std::vector<BoundaryVolume> pool_bounds;
    for (int i : sets[0]) pool_bounds.push_back(derive_boundary(cases[i].labels));
    LossLog prompt_log;
    PromptBranch branch = train_prompt_branch(pool_vols, pool_bounds, prompt_cfg, &prompt_log);
    prompt_log.write_csv(path("prompt_loss.csv"));
    Checkpoint prompt_ckpt;
    prompt_ckpt.meta.stage = "prompt";
    prompt_ckpt.meta.step = prompt_cfg.steps;
    prompt_ckpt.meta.seed = prompt_cfg.seed;
    prompt_ckpt.meta.config_hash = config_hash(prompt_cfg);
    prompt_ckpt.meta.config_text = canonical_config_text(prompt_cfg);
    prompt_ckpt.params = branch.params;
    save_checkpoint(prompt_ckpt, path("prompt.ckpt"));
    report["stages"].push_back({{"stage", "prompt"},
                                {"loss_csv", path("prompt_loss.csv")},
                                {"checkpoint", path("prompt.ckpt")},
                                {"final_loss", prompt_log.entries.empty()
                                                   ? 0.0
                                                   : prompt_log.entries.back().second},
                                {"param_hash", branch.param_hash()}});

    // Stage 2 + 3 per requested mask source.
    std::vector<MaskSourceMode> sources = opts.mask_sources;
    if (sources.empty()) sources.push_back(mae_cfg.mask_source);
    for (MaskSourceMode src : sources) {
      StageConfig mc = mae_cfg;
      mc.mask_source = src;
      std::string src_name = mask_source_name(src);
      LossLog mae_log;
      Checkpoint mae_ckpt = run_pretraining(pool_vols, mc, &branch, &mae_log);
      mae_log.write_csv(path("mae_" + src_name + "_loss.csv"));
      save_checkpoint(mae_ckpt, path("mae_" + src_name + ".ckpt"));
      report["stages"].push_back({{"stage", "mae"},
                                  {"mask_source", src_name},
                                  {"loss_csv", path("mae_" + src_name + "_loss.csv")},
                                  {"checkpoint", path("mae_" + src_name + ".ckpt")},
                                  {"final_loss", mae_log.entries.empty()
                                                     ? 0.0
                                                     : mae_log.entries.back().second}});
      rows.push_back(run_finetune(src_name, &mae_ckpt));
    }
  }

  if (opts.with_baseline || opts.skip_pretraining)
    rows.push_back(run_finetune("random-init", nullptr));

  report["rows"] = std::move(rows);
  result.report = report;
  std::ofstream f(path("report.json"));
  if (!f) throw DataError("cannot write pipeline report");
  f << report.dump(2) << "\n";
  return result;
}

}  // namespace bparse
