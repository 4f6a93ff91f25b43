#include "bparse/patch.hpp"

namespace bparse {

PatchGrid make_patch_grid(const Vec3i& shape, const Vec3i& patch, int embed_dim) {
  static const char* axis_name[3] = {"x (W)", "y (H)", "z (D)"};
  PatchGrid g;
  g.patch_size = patch;
  g.embed_dim = embed_dim;
  if (embed_dim < 1) throw DimensionError("embed_dim must be >= 1");
  for (int a = 0; a < 3; ++a) {
    if (patch[a] < 1) throw DimensionError("patch size must be >= 1 on every axis");
    if (shape[a] % patch[a] != 0)
      throw DimensionError(std::string("volume axis ") + axis_name[a] + " = " +
                           std::to_string(shape[a]) + " is not divisible by patch size " +
                           std::to_string(patch[a]));
    g.grid[a] = shape[a] / patch[a];
  }
  return g;
}

int64_t patch_voxel_index(const PatchGrid& g, int token, int offset) {
  const Vec3i& p = g.patch_size;
  const Vec3i& gr = g.grid;
  int ix = token % gr[0];
  int iy = (token / gr[0]) % gr[1];
  int iz = token / (gr[0] * gr[1]);
  int ox = offset % p[0];
  int oy = (offset / p[0]) % p[1];
  int oz = offset / (p[0] * p[1]);
  Vec3i shape = g.volume_shape();
  return flat_index(shape, ix * p[0] + ox, iy * p[1] + oy, iz * p[2] + oz);
}

std::vector<int64_t> patch_index_map(const PatchGrid& g) {
  const int N = g.tokens(), P = g.patch_voxels();
  std::vector<int64_t> map(size_t(N) * P);
  for (int n = 0; n < N; ++n)
    for (int p = 0; p < P; ++p) map[size_t(n) * P + p] = patch_voxel_index(g, n, p);
  return map;
}

Mat pack_volumes(const std::vector<Volume>& vols) {
  if (vols.empty()) throw DataError("empty volume batch");
  int64_t v = vols[0].size();
  Mat out(int64_t(vols.size()) * v, 1);
  for (size_t b = 0; b < vols.size(); ++b) {
    require(vols[b].shape == vols[0].shape, "volume batch shapes differ");
    out.block(int64_t(b) * v, 0, v, 1) = vols[b].voxels.cast<double>();
  }
  return out;
}

Mat gather_patches(const Mat& volumes, const PatchGrid& g, int batch) {
  const int N = g.tokens(), P = g.patch_voxels();
  const int64_t V = voxel_count(g.volume_shape());
  require(volumes.rows() == int64_t(batch) * V && volumes.cols() == 1,
          "volume tensor does not match the patch grid");
  auto map = patch_index_map(g);
  Mat out(int64_t(batch) * N, P);
  for (int b = 0; b < batch; ++b) {
    const double* src = volumes.data() + int64_t(b) * V;
    for (int n = 0; n < N; ++n) {
      double* dst = &out(int64_t(b) * N + n, 0);
      const int64_t* m = map.data() + size_t(n) * P;
      for (int p = 0; p < P; ++p) dst[int64_t(p) * out.rows()] = src[m[p]];
    }
  }
  return out;
}

Mat scatter_patches(const Mat& patches, const PatchGrid& g, int batch) {
  const int N = g.tokens(), P = g.patch_voxels();
  const int64_t V = voxel_count(g.volume_shape());
  require(patches.rows() == int64_t(batch) * N && patches.cols() == P,
          "token count does not match the patch grid");
  auto map = patch_index_map(g);
  Mat out = Mat::Zero(int64_t(batch) * V, 1);
  for (int b = 0; b < batch; ++b) {
    double* dst = out.data() + int64_t(b) * V;
    for (int n = 0; n < N; ++n) {
      const double* src = &patches(int64_t(b) * N + n, 0);
      const int64_t* m = map.data() + size_t(n) * P;
      for (int p = 0; p < P; ++p) dst[m[p]] = src[int64_t(p) * patches.rows()];
    }
  }
  return out;
}

PatchSequence patchify(const Mat& volumes, int batch, const PatchGrid& g, const Mat& embed) {
  require(embed.rows() == g.patch_voxels() && embed.cols() == g.embed_dim,
          "embedding must be patch_voxels x embed_dim");
  PatchSequence seq;
  seq.batch = batch;
  seq.grid = g;
  seq.tokens = gather_patches(volumes, g, batch) * embed;
  return seq;
}

Mat unpatchify(const PatchSequence& p, const Mat& unembed) {
  require(unembed.rows() == p.grid.embed_dim && unembed.cols() == p.grid.patch_voxels(),
          "unembedding must be embed_dim x patch_voxels");
  require(p.tokens.rows() == int64_t(p.batch) * p.grid.tokens(),
          "token count does not match grid N");
  return scatter_patches(p.tokens * unembed, p.grid, p.batch);
}

}  // namespace bparse
