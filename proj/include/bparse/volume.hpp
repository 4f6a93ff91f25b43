#pragma once

#include "bparse/common.hpp"

#include <cstdint>

namespace bparse {

inline constexpr int kNumClasses = 33;  // 32 teeth + background (label 0)
inline constexpr double kHuMin = -1000.0;
inline constexpr double kHuMax = 8000.0;

// Voxels are stored x-fastest: flat index = x + W*(y + H*z).
inline int64_t voxel_count(const Vec3i& shape) {
  return int64_t(shape[0]) * shape[1] * shape[2];
}

inline int64_t flat_index(const Vec3i& shape, int x, int y, int z) {
  return int64_t(x) + int64_t(shape[0]) * (int64_t(y) + int64_t(shape[1]) * z);
}

// 3D intensity grid with physical spacing (mm). Raw voxels are
// Hounsfield-like values in [-1000, 8000]; after normalize() they live in
// [0, 1] and `normalized` is set, which makes normalize() idempotent.
struct Volume {
  Vec3i shape{0, 0, 0};                 // (W, H, D)
  Vec3d spacing{1.0, 1.0, 1.0};         // mm, strictly positive
  Eigen::VectorXf voxels;               // size W*H*D, x-fastest
  bool normalized = false;

  int64_t size() const { return voxel_count(shape); }
  float at(int x, int y, int z) const { return voxels[flat_index(shape, x, y, z)]; }
  float& at(int x, int y, int z) { return voxels[flat_index(shape, x, y, z)]; }
};

// Per-voxel class ids in {0..32}, same geometry as its paired Volume.
struct LabelVolume {
  Vec3i shape{0, 0, 0};
  Vec3d spacing{1.0, 1.0, 1.0};
  Eigen::Matrix<uint8_t, Eigen::Dynamic, 1> labels;

  int64_t size() const { return voxel_count(shape); }
  uint8_t at(int x, int y, int z) const { return labels[flat_index(shape, x, y, z)]; }
  uint8_t& at(int x, int y, int z) { return labels[flat_index(shape, x, y, z)]; }
};

// Binary mask, same geometry as its paired LabelVolume.
struct BoundaryVolume {
  Vec3i shape{0, 0, 0};
  Vec3d spacing{1.0, 1.0, 1.0};
  Eigen::Matrix<uint8_t, Eigen::Dynamic, 1> mask;

  int64_t size() const { return voxel_count(shape); }
  uint8_t at(int x, int y, int z) const { return mask[flat_index(shape, x, y, z)]; }
};

void validate_geometry(const Vec3i& shape, const Vec3d& spacing);

// Clip to [-1000, 8000], then map affinely onto [0, 1]. Monotone
// non-decreasing; a no-op on volumes already flagged normalized.
Volume normalize(const Volume& v);

// A voxel is boundary iff it is foreground and at least one of its
// 6-connected in-bounds neighbors carries a different label (background
// counts as different).
BoundaryVolume derive_boundary(const LabelVolume& l);

}  // namespace bparse
