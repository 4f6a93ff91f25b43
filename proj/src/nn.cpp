#include "bparse/nn.hpp"

#include "bparse/sha.hpp"

#include <cmath>

namespace bparse {

void ParamStore::add(const std::string& name, Mat value) {
  if (p_.count(name)) throw ConfigError("duplicate parameter name: " + name);
  p_.emplace(name, std::move(value));
}

Mat& ParamStore::at(const std::string& name) {
  auto it = p_.find(name);
  if (it == p_.end()) throw ConfigError("unknown parameter: " + name);
  return it->second;
}

const Mat& ParamStore::at(const std::string& name) const {
  auto it = p_.find(name);
  if (it == p_.end()) throw ConfigError("unknown parameter: " + name);
  return it->second;
}

std::string ParamStore::hash() const {
  std::string blob;
  for (const auto& [name, m] : p_) {
    blob += name;
    blob += ':';
    blob += std::to_string(m.rows()) + "x" + std::to_string(m.cols()) + ";";
    blob.append(reinterpret_cast<const char*>(m.data()), size_t(m.size()) * sizeof(double));
  }
  return sha256_hex(blob);
}

Mat init_linear(Rng& rng, int64_t rows, int64_t cols) {
  double bound = 1.0 / std::sqrt(double(rows));
  return init_uniform(rng, rows, cols, bound);
}

Mat init_uniform(Rng& rng, int64_t rows, int64_t cols, double bound) {
  Mat m(rows, cols);
  for (int64_t c = 0; c < cols; ++c)
    for (int64_t r = 0; r < rows; ++r) m(r, c) = rng.uniform(-bound, bound);
  return m;
}

ad::Var BoundParams::at(const std::string& name) const {
  auto it = vars.find(name);
  if (it == vars.end()) throw ConfigError("parameter not bound: " + name);
  return it->second;
}

BoundParams bind_params(ad::Tape& t, const ParamStore& store, bool trainable) {
  BoundParams bp;
  for (const auto& [name, m] : store.all())
    bp.vars.emplace(name, trainable ? t.param(m) : t.constant(m));
  return bp;
}

std::map<std::string, Mat> collect_grads(const ad::Tape& t, const ParamStore& store,
                                         const BoundParams& bound) {
  std::map<std::string, Mat> grads;
  for (const auto& [name, m] : store.all()) {
    const Mat& g = t.grad(bound.at(name));
    grads.emplace(name, g.size() == 0 ? Mat::Zero(m.rows(), m.cols()) : g);
  }
  return grads;
}

// ------------------------------------------------------------------- encoder

void add_encoder_params(ParamStore& store, Rng& rng, const PatchGrid& grid,
                        const EncoderConfig& cfg) {
  const int C = grid.embed_dim;
  const int P = grid.patch_voxels();
  const int N = grid.tokens();
  if (C % cfg.heads != 0) throw ConfigError("embed_dim must be divisible by the head count");
  store.add("embed.w", init_linear(rng, P, C));
  store.add("pos", init_uniform(rng, N, C, 0.1));
  const int M = cfg.mlp_ratio * C;
  for (int l = 0; l < cfg.blocks; ++l) {
    std::string b = "enc.b" + std::to_string(l) + ".";
    store.add(b + "ln1.g", Mat::Ones(1, C));
    store.add(b + "ln1.b", Mat::Zero(1, C));
    store.add(b + "attn.wq", init_linear(rng, C, C));
    store.add(b + "attn.bq", Mat::Zero(1, C));
    store.add(b + "attn.wk", init_linear(rng, C, C));
    store.add(b + "attn.bk", Mat::Zero(1, C));
    store.add(b + "attn.wv", init_linear(rng, C, C));
    store.add(b + "attn.bv", Mat::Zero(1, C));
    store.add(b + "attn.wo", init_linear(rng, C, C));
    store.add(b + "attn.bo", Mat::Zero(1, C));
    store.add(b + "ln2.g", Mat::Ones(1, C));
    store.add(b + "ln2.b", Mat::Zero(1, C));
    store.add(b + "mlp.w1", init_linear(rng, C, M));
    store.add(b + "mlp.b1", Mat::Zero(1, M));
    store.add(b + "mlp.w2", init_linear(rng, M, C));
    store.add(b + "mlp.b2", Mat::Zero(1, C));
  }
  store.add("enc.out_ln.g", Mat::Ones(1, C));
  store.add("enc.out_ln.b", Mat::Zero(1, C));
}

std::vector<std::string> encoder_param_names(const PatchGrid& grid, const EncoderConfig& cfg) {
  ParamStore tmp;
  Rng rng(0);
  add_encoder_params(tmp, rng, grid, cfg);
  std::vector<std::string> names;
  names.reserve(tmp.size());
  for (const auto& [name, m] : tmp.all()) names.push_back(name);
  return names;
}

namespace {

ad::Var linear(ad::Tape& t, ad::Var x, const BoundParams& bp, const std::string& w,
               const std::string& b) {
  return ad::add_rowvec(t, ad::matmul(t, x, bp.at(w)), bp.at(b));
}

ad::Var mhsa(ad::Tape& t, ad::Var x, const BoundParams& bp, const std::string& prefix, int batch,
             int heads) {
  using namespace ad;
  const int C = int(t.val(x).cols());
  const int d = C / heads;
  Var q = linear(t, x, bp, prefix + "wq", prefix + "bq");
  Var k = linear(t, x, bp, prefix + "wk", prefix + "bk");
  Var v = linear(t, x, bp, prefix + "wv", prefix + "bv");
  Var cat;
  for (int h = 0; h < heads; ++h) {
    Var qh = slice_cols(t, q, h * d, d);
    Var kh = slice_cols(t, k, h * d, d);
    Var vh = slice_cols(t, v, h * d, d);
    Var scores = scale(t, bmm_nt(t, qh, kh, batch), 1.0 / std::sqrt(double(d)));
    Var attn = softmax_rows(t, scores);
    Var oh = bmm_nn(t, attn, vh, batch);
    cat = h == 0 ? oh : concat_cols(t, cat, oh);
  }
  return linear(t, cat, bp, prefix + "wo", prefix + "bo");
}

}  // namespace

EncoderTaps build_encoder(ad::Tape& t, ad::Var patches, const BoundParams& bp, int batch,
                          const PatchGrid& grid, const EncoderConfig& cfg) {
  using namespace ad;
  EncoderTaps taps;
  Var x = matmul(t, patches, bp.at("embed.w"));
  x = add_tiled(t, x, bp.at("pos"), batch);
  for (int l = 0; l < cfg.blocks; ++l) {
    std::string b = "enc.b" + std::to_string(l) + ".";
    Var h = layernorm(t, x, bp.at(b + "ln1.g"), bp.at(b + "ln1.b"));
    x = add(t, x, mhsa(t, h, bp, b + "attn.", batch, cfg.heads));
    Var m = layernorm(t, x, bp.at(b + "ln2.g"), bp.at(b + "ln2.b"));
    m = linear(t, m, bp, b + "mlp.w1", b + "mlp.b1");
    m = gelu(t, m);
    m = linear(t, m, bp, b + "mlp.w2", b + "mlp.b2");
    x = add(t, x, m);
    taps.block_out.push_back(x);
  }
  taps.out = layernorm(t, x, bp.at("enc.out_ln.g"), bp.at("enc.out_ln.b"));
  return taps;
}

// ------------------------------------------------------------------- decoder

ad::Var tconv(ad::Tape& t, ad::Var x, ad::Var w, ad::Var b, const Vec3i& coarse,
              const Vec3i& factors, int out_channels, int batch) {
  ad::Var y = ad::add_rowvec(t, ad::matmul(t, x, w), b);
  return ad::block_expand(t, y, coarse, factors, out_channels, batch);
}

std::pair<Vec3i, Vec3i> two_level_factors(const Vec3i& patch) {
  Vec3i f1, f2;
  for (int a = 0; a < 3; ++a) {
    int p = patch[a];
    int best = 1;
    for (int d = 1; d * d <= p; ++d)
      if (p % d == 0) best = d;
    f1[a] = best;
    f2[a] = p / best;
  }
  return {f1, f2};
}

}  // namespace bparse
