#pragma once

#include "bparse/common.hpp"
#include "bparse/patch.hpp"
#include "bparse/rng.hpp"
#include "bparse/tape.hpp"

#include <map>
#include <string>
#include <vector>

namespace bparse {

// Named parameter arrays. std::map keeps iteration (and therefore
// hashing, checkpointing and Adam ordering) deterministic.
class ParamStore {
 public:
  void add(const std::string& name, Mat value);
  Mat& at(const std::string& name);
  const Mat& at(const std::string& name) const;
  bool has(const std::string& name) const { return p_.count(name) != 0; }
  size_t size() const { return p_.size(); }
  const std::map<std::string, Mat>& all() const { return p_; }
  std::map<std::string, Mat>& all() { return p_; }

  // SHA-256 over names, shapes and raw little-endian payloads.
  std::string hash() const;

 private:
  std::map<std::string, Mat> p_;
};

// Uniform fan-in initialization: U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
Mat init_linear(Rng& rng, int64_t rows, int64_t cols);
Mat init_uniform(Rng& rng, int64_t rows, int64_t cols, double bound);

// Parameters bound onto a tape (as trainable params or constants).
struct BoundParams {
  std::map<std::string, ad::Var> vars;
  ad::Var at(const std::string& name) const;
};

BoundParams bind_params(ad::Tape& t, const ParamStore& store, bool trainable);

// Gradients for every bound parameter, zeros where a parameter was unused.
std::map<std::string, Mat> collect_grads(const ad::Tape& t, const ParamStore& store,
                                         const BoundParams& bound);

// ------------------------------------------------------------------- encoder
// Pre-LN ViT-style blocks over token sequences, width C = grid.embed_dim.
// Parameter names are shared verbatim between the masked-autoencoder model
// and the segmentation model so encoder weights transfer by name.

struct EncoderConfig {
  int blocks = 4;
  int heads = 4;
  int mlp_ratio = 4;
};

// Registers embed.w, pos, enc.b{l}.* and enc.out_ln.* into `store`.
void add_encoder_params(ParamStore& store, Rng& rng, const PatchGrid& grid,
                        const EncoderConfig& cfg);
std::vector<std::string> encoder_param_names(const PatchGrid& grid, const EncoderConfig& cfg);

struct EncoderTaps {
  std::vector<ad::Var> block_out;  // one per block
  ad::Var out;                     // final layer-norm output
};

// tokens: embedded patches (B*N) x C, positional term added inside.
EncoderTaps build_encoder(ad::Tape& t, ad::Var patches, const BoundParams& bp, int batch,
                          const PatchGrid& grid, const EncoderConfig& cfg);

// ------------------------------------------------------------------- decoder
// Non-overlapping transposed convolution: per-cell linear map followed by
// spatial block expansion; kernel size equals stride.
ad::Var tconv(ad::Tape& t, ad::Var x, ad::Var w, ad::Var b, const Vec3i& coarse,
              const Vec3i& factors, int out_channels, int batch);

// Splits each patch axis into two factors (f1 <= f2, f1*f2 = p) for the
// two-level decoders used by the prompt branch and the MAE head.
std::pair<Vec3i, Vec3i> two_level_factors(const Vec3i& patch);

}  // namespace bparse
