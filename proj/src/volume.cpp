#include "bparse/volume.hpp"

namespace bparse {

void validate_geometry(const Vec3i& shape, const Vec3d& spacing) {
  if (shape.minCoeff() <= 0) throw DimensionError("volume shape components must be positive");
  if (!(spacing.minCoeff() > 0.0)) throw DataError("spacing components must be strictly positive");
}

Volume normalize(const Volume& v) {
  if (v.normalized) return v;
  Volume out = v;
  const float lo = static_cast<float>(kHuMin);
  const float hi = static_cast<float>(kHuMax);
  const float scale = 1.0f / (hi - lo);
  out.voxels = ((v.voxels.array().min(hi).max(lo) - lo) * scale).matrix();
  out.normalized = true;
  return out;
}

BoundaryVolume derive_boundary(const LabelVolume& l) {
  BoundaryVolume b;
  b.shape = l.shape;
  b.spacing = l.spacing;
  b.mask.setZero(l.size());
  const int W = l.shape[0], H = l.shape[1], D = l.shape[2];
  const int64_t sx = 1, sy = W, sz = int64_t(W) * H;
  const uint8_t* lab = l.labels.data();
  for (int z = 0; z < D; ++z)
    for (int y = 0; y < H; ++y) {
      int64_t row = flat_index(l.shape, 0, y, z);
      for (int x = 0; x < W; ++x) {
        int64_t i = row + x;
        uint8_t c = lab[i];
        if (c == 0) continue;
        bool edge = (x > 0 && lab[i - sx] != c) || (x + 1 < W && lab[i + sx] != c) ||
                    (y > 0 && lab[i - sy] != c) || (y + 1 < H && lab[i + sy] != c) ||
                    (z > 0 && lab[i - sz] != c) || (z + 1 < D && lab[i + sz] != c);
        if (edge) b.mask[i] = 1;
      }
    }
  return b;
}

}  // namespace bparse
