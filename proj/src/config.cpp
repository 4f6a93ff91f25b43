#include "bparse/config.hpp"

#include "bparse/sha.hpp"

#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <map>
#include <sstream>

namespace bparse {

std::string stage_name(Stage s) {
  switch (s) {
    case Stage::Prompt: return "prompt";
    case Stage::Mae: return "mae";
    case Stage::Finetune: return "finetune";
  }
  return "?";
}

Stage stage_from_name(const std::string& s) {
  if (s == "prompt") return Stage::Prompt;
  if (s == "mae") return Stage::Mae;
  if (s == "finetune") return Stage::Finetune;
  throw ConfigError("unknown stage \"" + s + "\" (expected prompt|mae|finetune)");
}

std::string mask_source_name(MaskSourceMode m) {
  switch (m) {
    case MaskSourceMode::Prompt: return "prompt";
    case MaskSourceMode::Learned: return "learned";
    case MaskSourceMode::Zero: return "zero";
  }
  return "?";
}

MaskSourceMode mask_source_from_name(const std::string& s) {
  if (s == "prompt") return MaskSourceMode::Prompt;
  if (s == "learned") return MaskSourceMode::Learned;
  if (s == "zero") return MaskSourceMode::Zero;
  throw ConfigError("unknown mask source \"" + s + "\" (expected prompt|learned|zero)");
}

void StageConfig::validate() const {
  if (steps < 0) throw ConfigError("steps must be >= 0");
  if (batch_size < 1) throw ConfigError("batch_size must be >= 1");
  if (!(lr > 0.0)) throw ConfigError("lr must be positive");
  if (!(lr_decay_factor > 0.0 && lr_decay_factor <= 1.0))
    throw ConfigError("lr_decay_factor must lie in (0, 1]");
  if (lr_decay_every < 1) throw ConfigError("lr_decay_every must be >= 1");
  if (mask_rate < 0.0 || mask_rate > 1.0) throw ConfigError("mask_rate must lie in [0, 1]");
  if (beta < 0.0 || beta > 1.0) throw ConfigError("beta must lie in [0, 1]");
  if (shape.minCoeff() < 1 || patch.minCoeff() < 1) throw ConfigError("shape/patch must be >= 1");
  for (int a = 0; a < 3; ++a)
    if (shape[a] % patch[a] != 0)
      throw ConfigError("shape must be divisible by patch on every axis");
  if (!(spacing.minCoeff() > 0.0)) throw ConfigError("spacing must be positive");
  if (embed_dim < 1 || enc_blocks < 1 || enc_heads < 1 || mlp_ratio < 1 || prompt_heads < 1 ||
      prompt_hidden < 1 || dec_mid < 1)
    throw ConfigError("model sizing values must be >= 1");
  if (embed_dim % enc_heads != 0) throw ConfigError("embed_dim must be divisible by enc_heads");
  if (!(leaky_slope > 0.0 && leaky_slope < 1.0)) throw ConfigError("leaky_slope must lie in (0, 1)");
  if (eval_every < 1) throw ConfigError("eval_every must be >= 1");
  if (n_pretrain < 0 || n_labeled < 0 || n_val < 0 || n_test < 0)
    throw ConfigError("dataset counts must be >= 0");
  if (phantom_noise_sigma < 0.0) throw ConfigError("phantom_noise_sigma must be >= 0");
  TverskyParams check(tversky_alpha_fp, tversky_beta_fn, smooth);
  (void)check;
}

StageConfig default_config(Stage stage, const std::string& profile) {
  StageConfig c;
  c.stage = stage;
  c.profile = profile;
  if (profile == "desk") {
    switch (stage) {
      case Stage::Prompt: c.steps = 300; break;
      case Stage::Mae: c.steps = 300; break;
      case Stage::Finetune: c.steps = 500; break;
    }
    c.lr = 1e-3;
  } else if (profile == "paper") {
    c.steps = 10000;  // applied per stage
    c.lr = 1e-4;
    c.lr_decay_factor = 0.1;
    c.lr_decay_every = 2500;
    c.batch_size = 2;
  } else {
    throw ConfigError("unknown profile \"" + profile + "\" (expected desk|paper)");
  }
  return c;
}

namespace {

std::string fmt_double(double v) {
  char buf[48];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

Vec3i parse_vec3i(const std::string& v) {
  Vec3i out;
  std::stringstream ss(v);
  std::string item;
  int i = 0;
  while (std::getline(ss, item, ',')) {
    if (i >= 3) throw ConfigError("expected at most 3 comma-separated values: " + v);
    out[i++] = std::stoi(item);
  }
  if (i == 1) out[1] = out[2] = out[0];
  else if (i != 3) throw ConfigError("expected 1 or 3 values: " + v);
  return out;
}

Vec3d parse_vec3d(const std::string& v) {
  Vec3d out;
  std::stringstream ss(v);
  std::string item;
  int i = 0;
  while (std::getline(ss, item, ',')) {
    if (i >= 3) throw ConfigError("expected at most 3 comma-separated values: " + v);
    out[i++] = std::stod(item);
  }
  if (i == 1) out[1] = out[2] = out[0];
  else if (i != 3) throw ConfigError("expected 1 or 3 values: " + v);
  return out;
}

bool parse_bool(const std::string& v) {
  if (v == "1" || v == "true" || v == "yes" || v == "on") return true;
  if (v == "0" || v == "false" || v == "no" || v == "off") return false;
  throw ConfigError("expected a boolean, got \"" + v + "\"");
}

std::string trim(const std::string& s) {
  size_t a = s.find_first_not_of(" \t\r\n");
  if (a == std::string::npos) return "";
  size_t b = s.find_last_not_of(" \t\r\n");
  return s.substr(a, b - a + 1);
}

}  // namespace

StageConfig parse_config_text(const std::string& text) {
  // Two passes: stage/profile first (they pick the defaults), then the rest.
  std::map<std::string, std::string> kv;
  std::vector<std::string> order;
  std::istringstream is(text);
  std::string line;
  int lineno = 0;
  while (std::getline(is, line)) {
    ++lineno;
    std::string s = trim(line);
    if (s.empty() || s[0] == '#') continue;
    size_t eq = s.find('=');
    if (eq == std::string::npos)
      throw ConfigError("config line " + std::to_string(lineno) + " is not key = value: " + s);
    std::string key = trim(s.substr(0, eq));
    std::string val = trim(s.substr(eq + 1));
    if (key.empty()) throw ConfigError("empty key on config line " + std::to_string(lineno));
    if (kv.count(key)) throw ConfigError("duplicate config key: " + key);
    kv[key] = val;
    order.push_back(key);
  }
  if (!kv.count("stage")) throw ConfigError("config must set `stage`");
  std::string profile = kv.count("profile") ? kv["profile"] : "desk";
  StageConfig cfg = default_config(stage_from_name(kv["stage"]), profile);

  for (const auto& key : order) {
    const std::string& val = kv[key];
    if (key == "stage" || key == "profile") continue;
    else if (key == "steps") cfg.steps = std::stoll(val);
    else if (key == "batch_size") cfg.batch_size = std::stoi(val);
    else if (key == "lr") cfg.lr = std::stod(val);
    else if (key == "lr_decay_factor") cfg.lr_decay_factor = std::stod(val);
    else if (key == "lr_decay_every") cfg.lr_decay_every = std::stoll(val);
    else if (key == "seed") cfg.seed = std::stoull(val);
    else if (key == "shape") cfg.shape = parse_vec3i(val);
    else if (key == "spacing") cfg.spacing = parse_vec3d(val);
    else if (key == "patch") cfg.patch = parse_vec3i(val);
    else if (key == "embed_dim") cfg.embed_dim = std::stoi(val);
    else if (key == "enc_blocks") cfg.enc_blocks = std::stoi(val);
    else if (key == "enc_heads") cfg.enc_heads = std::stoi(val);
    else if (key == "mlp_ratio") cfg.mlp_ratio = std::stoi(val);
    else if (key == "prompt_heads") cfg.prompt_heads = std::stoi(val);
    else if (key == "prompt_hidden") cfg.prompt_hidden = std::stoi(val);
    else if (key == "leaky_slope") cfg.leaky_slope = std::stod(val);
    else if (key == "dec_mid") cfg.dec_mid = std::stoi(val);
    else if (key == "mask_rate") cfg.mask_rate = std::stod(val);
    else if (key == "mask_source") cfg.mask_source = mask_source_from_name(val);
    else if (key == "masked_only_loss") cfg.masked_only_loss = parse_bool(val);
    else if (key == "beta") cfg.beta = std::stod(val);
    else if (key == "tversky_alpha_fp") cfg.tversky_alpha_fp = std::stod(val);
    else if (key == "tversky_beta_fn") cfg.tversky_beta_fn = std::stod(val);
    else if (key == "smooth") cfg.smooth = std::stod(val);
    else if (key == "eval_every") cfg.eval_every = std::stoll(val);
    else if (key == "data_dir") cfg.data_dir = val;
    else if (key == "n_pretrain") cfg.n_pretrain = std::stoi(val);
    else if (key == "n_labeled") cfg.n_labeled = std::stoi(val);
    else if (key == "n_val") cfg.n_val = std::stoi(val);
    else if (key == "n_test") cfg.n_test = std::stoi(val);
    else if (key == "phantom_noise_sigma") cfg.phantom_noise_sigma = std::stod(val);
    else throw ConfigError("unknown config key: " + key);
  }

  if (const char* env = std::getenv("BPARSE_SEED")) cfg.seed = std::stoull(env);
  cfg.validate();
  return cfg;
}

StageConfig parse_config_file(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file " + path);
  std::stringstream ss;
  ss << f.rdbuf();
  return parse_config_text(ss.str());
}

std::string canonical_config_text(const StageConfig& cfg) {
  std::map<std::string, std::string> kv;
  kv["stage"] = stage_name(cfg.stage);
  kv["profile"] = cfg.profile;
  kv["steps"] = std::to_string(cfg.steps);
  kv["batch_size"] = std::to_string(cfg.batch_size);
  kv["lr"] = fmt_double(cfg.lr);
  kv["lr_decay_factor"] = fmt_double(cfg.lr_decay_factor);
  kv["lr_decay_every"] = std::to_string(cfg.lr_decay_every);
  kv["seed"] = std::to_string(cfg.seed);
  kv["shape"] = std::to_string(cfg.shape[0]) + "," + std::to_string(cfg.shape[1]) + "," +
                std::to_string(cfg.shape[2]);
  kv["spacing"] = fmt_double(cfg.spacing[0]) + "," + fmt_double(cfg.spacing[1]) + "," +
                  fmt_double(cfg.spacing[2]);
  kv["patch"] = std::to_string(cfg.patch[0]) + "," + std::to_string(cfg.patch[1]) + "," +
                std::to_string(cfg.patch[2]);
  kv["embed_dim"] = std::to_string(cfg.embed_dim);
  kv["enc_blocks"] = std::to_string(cfg.enc_blocks);
  kv["enc_heads"] = std::to_string(cfg.enc_heads);
  kv["mlp_ratio"] = std::to_string(cfg.mlp_ratio);
  kv["prompt_heads"] = std::to_string(cfg.prompt_heads);
  kv["prompt_hidden"] = std::to_string(cfg.prompt_hidden);
  kv["leaky_slope"] = fmt_double(cfg.leaky_slope);
  kv["dec_mid"] = std::to_string(cfg.dec_mid);
  kv["mask_rate"] = fmt_double(cfg.mask_rate);
  kv["mask_source"] = mask_source_name(cfg.mask_source);
  kv["masked_only_loss"] = cfg.masked_only_loss ? "1" : "0";
  kv["beta"] = fmt_double(cfg.beta);
  kv["tversky_alpha_fp"] = fmt_double(cfg.tversky_alpha_fp);
  kv["tversky_beta_fn"] = fmt_double(cfg.tversky_beta_fn);
  kv["smooth"] = fmt_double(cfg.smooth);
  kv["eval_every"] = std::to_string(cfg.eval_every);
  kv["data_dir"] = cfg.data_dir;
  kv["n_pretrain"] = std::to_string(cfg.n_pretrain);
  kv["n_labeled"] = std::to_string(cfg.n_labeled);
  kv["n_val"] = std::to_string(cfg.n_val);
  kv["n_test"] = std::to_string(cfg.n_test);
  kv["phantom_noise_sigma"] = fmt_double(cfg.phantom_noise_sigma);
  std::string out;
  for (const auto& [k, v] : kv) out += k + "=" + v + "\n";
  return out;
}

std::string config_hash(const StageConfig& cfg) { return sha256_hex(canonical_config_text(cfg)); }

}  // namespace bparse
