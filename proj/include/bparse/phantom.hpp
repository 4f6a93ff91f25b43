#pragma once

#include "bparse/volume.hpp"

#include <set>
#include <utility>

namespace bparse {

// Synthetic dental phantom: 32 ellipsoidal teeth on two parabolic arches
// inside jaw-bone bands, plus air background and Gaussian noise.
//
// Tooth id <-> FDI quadrant map (fixed):
//   ids  1..8   upper right, FDI 11..18 (central incisor -> third molar)
//   ids  9..16  upper left,  FDI 21..28
//   ids 17..24  lower left,  FDI 31..38
//   ids 25..32  lower right, FDI 41..48
// Along the upper arch the physical order is therefore 8..1 | 9..16 and
// along the lower arch 24..17 | 25..32; id 1 occludes id 25, id 9 occludes
// id 17, and so on (see tooth_graph.hpp for the adjacency built on top).
struct PhantomSpec {
  Vec3i shape{64, 64, 64};
  Vec3d spacing{0.4, 0.4, 0.4};          // mm
  std::set<int> missing_teeth;           // subset of {1..32}
  double crowding_factor = 0.0;          // >= 0, shrinks inter-tooth gaps
  double noise_sigma = 20.0;             // HU std-dev of additive noise
  uint64_t seed = 0;
};

// Deterministic in the spec (bit-identical volumes for equal specs).
// Throws DataError when the shape is too small to place 32 distinct teeth.
std::pair<Volume, LabelVolume> generate_phantom(const PhantomSpec& spec);

}  // namespace bparse
