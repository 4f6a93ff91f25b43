#pragma once

#include "bparse/common.hpp"
#include "bparse/volume.hpp"

#include <vector>

namespace bparse {

// Token layout: token n covers patch-grid cell
//   (ix, iy, iz) with n = ix + gw*(iy + gh*iz)      (x-fastest)
// and flattens its voxels x-fastest as well:
//   p = ox + pw*(oy + ph*oz).
struct PatchGrid {
  Vec3i patch_size{16, 16, 16};  // (pw, ph, pd)
  Vec3i grid{0, 0, 0};           // (gw, gh, gd)
  int embed_dim = 64;            // C

  int tokens() const { return grid[0] * grid[1] * grid[2]; }          // N
  int patch_voxels() const { return patch_size[0] * patch_size[1] * patch_size[2]; }
  Vec3i volume_shape() const { return patch_size.cwiseProduct(grid); }
};

// Splits `shape` by `patch`; throws DimensionError naming the first axis
// that is not divisible.
PatchGrid make_patch_grid(const Vec3i& shape, const Vec3i& patch, int embed_dim);

// Flat voxel index for (token, within-patch offset).
int64_t patch_voxel_index(const PatchGrid& g, int token, int offset);

// Precomputed token/offset -> voxel map (size N * P), used by both the
// plain functions below and the autodiff ops.
std::vector<int64_t> patch_index_map(const PatchGrid& g);

// Token sequence: rows are batch-major (row b*N + n), columns are channels.
struct PatchSequence {
  Mat tokens;     // (B*N) x C
  int batch = 0;
  PatchGrid grid;
};

// Volume batch packed for the compute path: rows (b*V + v) x 1 columns.
Mat pack_volumes(const std::vector<Volume>& vols);

// Gather patches: (B*V)x1 -> (B*N)xP.
Mat gather_patches(const Mat& volumes, const PatchGrid& g, int batch);
// Scatter is the exact inverse (the index map is a bijection).
Mat scatter_patches(const Mat& patches, const PatchGrid& g, int batch);

// patchify: flatten each patch and apply the linear embedding
// (patch_voxels x C). Linear by construction: no bias here; positional
// terms are added by the models that need them.
PatchSequence patchify(const Mat& volumes, int batch, const PatchGrid& g, const Mat& embed);

// unpatchify: map tokens back to patch voxels ((C x P) unembed) and place
// them by raster order.
Mat unpatchify(const PatchSequence& p, const Mat& unembed);

}  // namespace bparse
