// bparse: boundary-prompted masked-autoencoder pre-training for CBCT tooth
// segmentation, desk scale. Subcommands cover the three training stages,
// the phantom generator, prediction, metrics and the full pipeline.

#include "bparse/mae.hpp"
#include "bparse/metrics.hpp"
#include "bparse/pipeline.hpp"
#include "bparse/prompt.hpp"
#include "bparse/segnet.hpp"
#include "bparse/volume_io.hpp"

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

namespace fs = std::filesystem;
using namespace bparse;

namespace {

struct Case {
  std::string base;  // path prefix without the _vol/_lab suffix
  Volume volume;
  std::optional<LabelVolume> labels;
  std::optional<BoundaryVolume> boundary;
};

std::vector<Case> load_cases(const std::string& dir) {
  if (!fs::is_directory(dir)) throw DataError("data directory not found: " + dir);
  std::vector<std::string> bases;
  for (const auto& e : fs::directory_iterator(dir)) {
    std::string name = e.path().filename().string();
    const std::string suffix = "_vol.json";
    if (name.size() > suffix.size() &&
        name.compare(name.size() - suffix.size(), suffix.size(), suffix) == 0)
      bases.push_back((e.path().parent_path() /
                       name.substr(0, name.size() - suffix.size())).string());
  }
  std::sort(bases.begin(), bases.end());
  if (bases.empty()) throw DataError("no *_vol.json volumes found in " + dir);
  std::vector<Case> cases;
  for (const auto& b : bases) {
    Case c;
    c.base = b;
    c.volume = load_volume(b + "_vol");
    if (fs::exists(b + "_lab.json")) c.labels = load_label_volume(b + "_lab");
    if (fs::exists(b + "_bnd.json")) c.boundary = load_mask_volume(b + "_bnd");
    cases.push_back(std::move(c));
  }
  return cases;
}

StageConfig config_for(const std::string& path, Stage expected) {
  StageConfig cfg = parse_config_file(path);
  if (cfg.stage != expected)
    throw ConfigError("config " + path + " has stage " + stage_name(cfg.stage) + ", expected " +
                      stage_name(expected));
  return cfg;
}

Checkpoint make_stage_checkpoint(const std::string& stage, const StageConfig& cfg,
                                 ParamStore params) {
  Checkpoint c;
  c.meta.stage = stage;
  c.meta.step = cfg.steps;
  c.meta.seed = cfg.seed;
  c.meta.config_hash = config_hash(cfg);
  c.meta.config_text = canonical_config_text(cfg);
  c.params = std::move(params);
  return c;
}

PromptBranch branch_from_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.meta.stage != "prompt")
    throw ConfigError("expected a stage \"prompt\" checkpoint, got \"" + ckpt.meta.stage + "\"");
  StageConfig cfg = parse_config_text(ckpt.meta.config_text);
  PromptBranch b = make_prompt_branch(PromptConfig::from_stage(cfg), cfg.seed);
  for (auto& [name, p] : b.params.all()) {
    if (!ckpt.params.has(name)) throw DataError("prompt checkpoint missing parameter " + name);
    const Mat& src = ckpt.params.at(name);
    require(src.rows() == p.rows() && src.cols() == p.cols(),
            "prompt checkpoint parameter shape mismatch for " + name);
    p = src;
  }
  b.frozen = true;
  return b;
}

int cmd_phantom(const std::string& out_dir, int count, int shape, double spacing, uint64_t seed,
                double noise, bool with_boundary) {
  fs::create_directories(out_dir);
  auto cases = generate_phantom_set(count, Vec3i::Constant(shape), Vec3d::Constant(spacing),
                                    noise, seed);
  for (int i = 0; i < count; ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "case_%03d", i);
    std::string base = (fs::path(out_dir) / name).string();
    save_volume(cases[i].volume, base + "_vol");
    save_volume(cases[i].labels, base + "_lab");
    if (with_boundary) save_volume(derive_boundary(cases[i].labels), base + "_bnd");
  }
  std::cout << "wrote " << count << " phantom cases to " << out_dir << "\n";
  return 0;
}

}  // namespace

int run(int argc, char** argv) {
  CLI::App app{"boundary-prompted masked-autoencoder pre-training for tooth segmentation"};
  app.require_subcommand(1);

  // ---- phantom
  auto* sc_phantom = app.add_subcommand("phantom", "generate a synthetic phantom dataset");
  std::string out_dir;
  int count = 10, shape = 64;
  double spacing = 0.4, noise = 20.0;
  uint64_t seed = 1234;
  bool with_boundary = false;
  sc_phantom->add_option("--out", out_dir, "output directory")->required();
  sc_phantom->add_option("--count", count, "number of cases");
  sc_phantom->add_option("--shape", shape, "cubic volume side (voxels)");
  sc_phantom->add_option("--spacing", spacing, "isotropic spacing (mm)");
  sc_phantom->add_option("--seed", seed, "root seed");
  sc_phantom->add_option("--noise", noise, "gaussian noise sigma (HU)");
  sc_phantom->add_flag("--with-boundary", with_boundary, "also write derived boundary masks");

  // ---- graph
  auto* sc_graph = app.add_subcommand("graph", "tooth adjacency graph utilities");
  auto* sc_graph_export = sc_graph->add_subcommand("export", "export the adjacency graph");
  std::string dot_path;
  sc_graph_export->add_option("--dot", dot_path, "write the edge list in DOT format")->required();

  // ---- pretrain-prompt
  auto* sc_prompt = app.add_subcommand("pretrain-prompt", "stage 1: train the boundary prompt branch");
  std::string cfg_path, ckpt_out, data_dir;
  sc_prompt->add_option("--config", cfg_path, "stage config file")->required();
  sc_prompt->add_option("--out", ckpt_out, "output checkpoint")->required();
  sc_prompt->add_option("--data", data_dir, "dataset directory (default: generated phantoms)");

  // ---- pretrain-mae
  auto* sc_mae = app.add_subcommand("pretrain-mae", "stage 2: masked-autoencoder pre-training");
  std::string mae_cfg_path, prompt_ckpt, mae_out, mae_source, mae_data;
  sc_mae->add_option("--config", mae_cfg_path, "stage config file")->required();
  sc_mae->add_option("--prompt-ckpt", prompt_ckpt, "frozen prompt-branch checkpoint");
  sc_mae->add_option("--mask-source", mae_source, "prompt|learned|zero (default: config)");
  sc_mae->add_option("--out", mae_out, "output checkpoint")->required();
  sc_mae->add_option("--data", mae_data, "dataset directory (default: generated phantoms)");

  // ---- finetune
  auto* sc_ft = app.add_subcommand("finetune", "stage 3: supervised fine-tuning");
  std::string ft_cfg_path, ft_init = "random", ft_data, ft_out;
  sc_ft->add_option("--config", ft_cfg_path, "stage config file")->required();
  sc_ft->add_option("--init", ft_init, "mae checkpoint path or \"random\"");
  sc_ft->add_option("--data", ft_data, "labeled dataset directory")->required();
  sc_ft->add_option("--out", ft_out, "output checkpoint")->required();

  // ---- predict
  auto* sc_pred = app.add_subcommand("predict", "argmax segmentation of one volume");
  std::string pr_ckpt, pr_in, pr_out;
  sc_pred->add_option("--ckpt", pr_ckpt, "finetune checkpoint")->required();
  sc_pred->add_option("--in", pr_in, "input volume base path (without .json/.bin)")->required();
  sc_pred->add_option("--out", pr_out, "output label base path")->required();

  // ---- evaluate
  auto* sc_eval = app.add_subcommand("evaluate", "metric report for predicted vs ground-truth labels");
  std::string ev_pred, ev_gt, ev_out;
  sc_eval->add_option("--pred", ev_pred, "directory of predicted label volumes")->required();
  sc_eval->add_option("--gt", ev_gt, "directory of ground-truth label volumes")->required();
  sc_eval->add_option("--out", ev_out, "output report.json (CSV written beside it)")->required();

  // ---- pipeline
  auto* sc_pipe = app.add_subcommand("pipeline", "run all three stages end to end");
  std::string pipe_cfg_dir, pipe_out, pipe_init = "pretrained", pipe_sources;
  bool pipe_baseline = false;
  sc_pipe->add_option("--config-dir", pipe_cfg_dir,
                      "directory with prompt.cfg, mae.cfg, finetune.cfg")->required();
  sc_pipe->add_option("--out", pipe_out, "output directory")->required();
  sc_pipe->add_option("--init", pipe_init, "pretrained|random (random skips stages 1-2)");
  sc_pipe->add_option("--mask-sources", pipe_sources, "comma list: prompt,learned,zero");
  sc_pipe->add_flag("--with-baseline", pipe_baseline, "also fine-tune from random init");

  CLI11_PARSE(app, argc, argv);

  if (*sc_phantom)
    return cmd_phantom(out_dir, count, shape, spacing, seed, noise, with_boundary);

  if (*sc_graph) {
    if (!*sc_graph_export) throw ConfigError("graph: expected the `export` subcommand");
    std::ofstream f(dot_path);
    if (!f) throw DataError("cannot write " + dot_path);
    f << tooth_graph_dot(build_tooth_adjacency());
    std::cout << "wrote " << dot_path << "\n";
    return 0;
  }

  if (*sc_prompt) {
    StageConfig cfg = config_for(cfg_path, Stage::Prompt);
    std::vector<Volume> vols;
    std::vector<BoundaryVolume> bounds;
    if (!data_dir.empty() || !cfg.data_dir.empty()) {
      for (auto& c : load_cases(data_dir.empty() ? cfg.data_dir : data_dir)) {
        if (!c.boundary && !c.labels)
          throw DataError("case " + c.base + " lacks boundary or label data");
        vols.push_back(std::move(c.volume));
        bounds.push_back(c.boundary ? *c.boundary : derive_boundary(*c.labels));
      }
    } else {
      auto cases = generate_phantom_set(cfg.n_pretrain, cfg.shape, cfg.spacing,
                                        cfg.phantom_noise_sigma, mix_seed(cfg.seed, 0xca5e));
      for (auto& c : cases) {
        vols.push_back(std::move(c.volume));
        bounds.push_back(derive_boundary(c.labels));
      }
    }
    LossLog log;
    PromptBranch branch = train_prompt_branch(vols, bounds, cfg, &log);
    log.write_csv(ckpt_out + ".loss.csv");
    save_checkpoint(make_stage_checkpoint("prompt", cfg, branch.params), ckpt_out);
    std::cout << "prompt branch trained: " << ckpt_out << " (final loss "
              << (log.entries.empty() ? 0.0 : log.entries.back().second) << ")\n";
    return 0;
  }

  if (*sc_mae) {
    StageConfig cfg = config_for(mae_cfg_path, Stage::Mae);
    if (!mae_source.empty()) cfg.mask_source = mask_source_from_name(mae_source);
    std::vector<Volume> vols;
    if (!mae_data.empty() || !cfg.data_dir.empty()) {
      for (auto& c : load_cases(mae_data.empty() ? cfg.data_dir : mae_data))
        vols.push_back(std::move(c.volume));
    } else {
      auto cases = generate_phantom_set(cfg.n_pretrain, cfg.shape, cfg.spacing,
                                        cfg.phantom_noise_sigma, mix_seed(cfg.seed, 0xca5e));
      for (auto& c : cases) vols.push_back(std::move(c.volume));
    }
    std::optional<PromptBranch> branch;
    if (cfg.mask_source == MaskSourceMode::Prompt) {
      if (prompt_ckpt.empty())
        throw ConfigError("prompt mask source requires --prompt-ckpt");
      branch = branch_from_checkpoint(load_checkpoint(prompt_ckpt));
    }
    LossLog log;
    Checkpoint ckpt = run_pretraining(vols, cfg, branch ? &*branch : nullptr, &log);
    log.write_csv(mae_out + ".loss.csv");
    save_checkpoint(ckpt, mae_out);
    std::cout << "mae pre-training done: " << mae_out << " (final loss "
              << (log.entries.empty() ? 0.0 : log.entries.back().second) << ")\n";
    return 0;
  }

  if (*sc_ft) {
    StageConfig cfg = config_for(ft_cfg_path, Stage::Finetune);
    std::vector<Volume> vols;
    std::vector<LabelVolume> labs;
    for (auto& c : load_cases(ft_data)) {
      if (!c.labels) throw DataError("case " + c.base + " lacks labels");
      vols.push_back(std::move(c.volume));
      labs.push_back(std::move(*c.labels));
    }
    SegModel model = make_seg_model(SegConfig::from_stage(cfg), cfg.seed);
    if (ft_init != "random") {
      TransferReport tr = load_pretrained(model, load_checkpoint(ft_init));
      std::cout << "transferred " << tr.transferred.size() << " encoder tensors, "
                << tr.fresh.size() << " fresh\n";
    }
    FinetuneResult fr = finetune(vols, labs, model, cfg);
    fr.log.write_csv(ft_out + ".loss.csv");
    save_checkpoint(fr.best, ft_out);
    std::cout << "finetune done: " << ft_out << " (final loss "
              << (fr.log.entries.empty() ? 0.0 : fr.log.entries.back().second) << ")\n";
    return 0;
  }

  if (*sc_pred) {
    Checkpoint ckpt = load_checkpoint(pr_ckpt);
    StageConfig cfg = parse_config_text(ckpt.meta.config_text);
    Volume v = load_volume(pr_in);
    LabelVolume out = predict(v, ckpt, cfg);
    save_volume(out, pr_out);
    std::cout << "wrote " << pr_out << ".{json,bin}\n";
    return 0;
  }

  if (*sc_eval) {
    // Pair label volumes by file name across the two directories.
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(ev_pred)) {
      std::string n = e.path().filename().string();
      if (n.size() > 5 && n.compare(n.size() - 5, 5, ".json") == 0 &&
          volume_kind(e.path().string().substr(0, e.path().string().size() - 5)) == "label")
        names.push_back(n.substr(0, n.size() - 5));
    }
    std::sort(names.begin(), names.end());
    if (names.empty()) throw DataError("no label volumes found in " + ev_pred);
    nlohmann::ordered_json out;
    out["cases"] = nlohmann::ordered_json::array();
    double dsc_sum = 0.0;
    int dsc_n = 0;
    for (const auto& n : names) {
      LabelVolume pred = load_label_volume((fs::path(ev_pred) / n).string());
      LabelVolume gt = load_label_volume((fs::path(ev_gt) / n).string());
      MetricReport rep = evaluate(pred, gt, gt.spacing);
      nlohmann::ordered_json c;
      c["name"] = n;
      c["report"] = rep.to_json();
      out["cases"].push_back(std::move(c));
      if (rep.macro_dsc) {
        dsc_sum += *rep.macro_dsc;
        ++dsc_n;
      }
      std::string csv_path = ev_out;
      size_t dot = csv_path.rfind(".json");
      if (dot != std::string::npos) csv_path = csv_path.substr(0, dot);
      csv_path += names.size() > 1 ? "." + n + ".csv" : ".csv";
      std::ofstream cf(csv_path);
      if (!cf) throw DataError("cannot write " + csv_path);
      cf << rep.to_csv();
    }
    out["mean_macro_dsc"] =
        dsc_n ? nlohmann::ordered_json(dsc_sum / dsc_n) : nlohmann::ordered_json(nullptr);
    std::ofstream f(ev_out);
    if (!f) throw DataError("cannot write " + ev_out);
    f << out.dump(2) << "\n";
    std::cout << "wrote " << ev_out << "\n";
    return 0;
  }

  if (*sc_pipe) {
    auto cfg_at = [&](const char* name, Stage st) {
      return config_for((fs::path(pipe_cfg_dir) / name).string(), st);
    };
    StageConfig pc = cfg_at("prompt.cfg", Stage::Prompt);
    StageConfig mc = cfg_at("mae.cfg", Stage::Mae);
    StageConfig fc = cfg_at("finetune.cfg", Stage::Finetune);
    PipelineOptions opts;
    opts.out_dir = pipe_out;
    opts.with_baseline = pipe_baseline;
    opts.skip_pretraining = pipe_init == "random";
    if (!pipe_sources.empty()) {
      std::stringstream ss(pipe_sources);
      std::string item;
      while (std::getline(ss, item, ','))
        opts.mask_sources.push_back(mask_source_from_name(item));
    }
    PipelineResult res = run_pipeline(pc, mc, fc, opts);
    for (const auto& v : res.variants)
      std::cout << v.name << ": val_dsc=" << v.val_dsc << " test_macro_dsc=" << v.test_macro_dsc
                << "\n";
    std::cout << "report: " << (fs::path(pipe_out) / "report.json").string() << "\n";
    return 0;
  }

  return 0;
}

int main(int argc, char** argv) {
  try {
    return run(argc, argv);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const DivergenceError& e) {
    std::cerr << "divergence: " << e.what() << "\n";
    return 4;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}
