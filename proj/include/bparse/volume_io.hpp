#pragma once

#include "bparse/volume.hpp"

#include <string>

namespace bparse {

// On-disk format: `{base}.json` sidecar header plus `{base}.bin` raw
// little-endian payload in x-fastest order.
//   header fields: shape [W,H,D], spacing [sx,sy,sz],
//                  dtype "f32le" | "u8", kind "intensity" | "label" | "mask"
// The payload byte count must equal product(shape) * sizeof(dtype).
//
// Failures raise IoError with a distinguishing code: MalformedHeader,
// ByteCountMismatch, UnsupportedDtype, FileMissing.

void save_volume(const Volume& v, const std::string& base);
void save_volume(const LabelVolume& l, const std::string& base);
void save_volume(const BoundaryVolume& b, const std::string& base);

// Loaded intensity volumes are flagged normalized when every voxel already
// lies in [0, 1]; the sidecar does not store the flag.
Volume load_volume(const std::string& base);
LabelVolume load_label_volume(const std::string& base);
BoundaryVolume load_mask_volume(const std::string& base);

// Peeks at the sidecar without reading the payload.
std::string volume_kind(const std::string& base);

}  // namespace bparse
