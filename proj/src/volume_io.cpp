#include "bparse/volume_io.hpp"

#include <nlohmann/json.hpp>

#include <cstring>
#include <fstream>
#include <vector>

namespace bparse {

using ordered_json = nlohmann::ordered_json;

namespace {

struct Header {
  Vec3i shape;
  Vec3d spacing;
  std::string dtype;
  std::string kind;
};

void write_header(const std::string& base, const Header& h) {
  ordered_json j;
  j["shape"] = {h.shape[0], h.shape[1], h.shape[2]};
  j["spacing"] = {h.spacing[0], h.spacing[1], h.spacing[2]};
  j["dtype"] = h.dtype;
  j["kind"] = h.kind;
  std::ofstream f(base + ".json", std::ios::binary);
  if (!f) throw DataError("cannot write " + base + ".json");
  f << j.dump(2) << "\n";
}

void write_payload(const std::string& base, const void* data, size_t nbytes) {
  std::ofstream f(base + ".bin", std::ios::binary);
  if (!f) throw DataError("cannot write " + base + ".bin");
  f.write(static_cast<const char*>(data), static_cast<std::streamsize>(nbytes));
}

Header read_header(const std::string& base) {
  std::ifstream f(base + ".json", std::ios::binary);
  if (!f) throw IoError(IoErrorCode::FileMissing, "missing header " + base + ".json");
  ordered_json j;
  try {
    f >> j;
  } catch (const std::exception& e) {
    throw IoError(IoErrorCode::MalformedHeader, "malformed header " + base + ".json: " + e.what());
  }
  Header h;
  try {
    auto shape = j.at("shape");
    auto spacing = j.at("spacing");
    if (shape.size() != 3 || spacing.size() != 3)
      throw IoError(IoErrorCode::MalformedHeader, "header shape/spacing must have 3 entries");
    for (int i = 0; i < 3; ++i) {
      h.shape[i] = shape[i].get<int>();
      h.spacing[i] = spacing[i].get<double>();
    }
    h.dtype = j.at("dtype").get<std::string>();
    h.kind = j.at("kind").get<std::string>();
  } catch (const IoError&) {
    throw;
  } catch (const std::exception& e) {
    throw IoError(IoErrorCode::MalformedHeader, "malformed header " + base + ".json: " + e.what());
  }
  if (h.shape.minCoeff() <= 0 || !(h.spacing.minCoeff() > 0.0))
    throw IoError(IoErrorCode::MalformedHeader, "header has non-positive shape or spacing");
  if (h.dtype != "f32le" && h.dtype != "u8")
    throw IoError(IoErrorCode::UnsupportedDtype, "unsupported dtype \"" + h.dtype + "\" in " + base);
  if (h.kind != "intensity" && h.kind != "label" && h.kind != "mask")
    throw IoError(IoErrorCode::MalformedHeader, "unknown kind \"" + h.kind + "\" in " + base);
  return h;
}

std::vector<char> read_payload(const std::string& base, size_t expected) {
  std::ifstream f(base + ".bin", std::ios::binary | std::ios::ate);
  if (!f) throw IoError(IoErrorCode::FileMissing, "missing payload " + base + ".bin");
  size_t actual = static_cast<size_t>(f.tellg());
  if (actual != expected)
    throw IoError(IoErrorCode::ByteCountMismatch,
                  base + ".bin holds " + std::to_string(actual) + " bytes, header implies " +
                      std::to_string(expected));
  std::vector<char> buf(actual);
  f.seekg(0);
  f.read(buf.data(), static_cast<std::streamsize>(actual));
  return buf;
}

}  // namespace

void save_volume(const Volume& v, const std::string& base) {
  validate_geometry(v.shape, v.spacing);
  write_header(base, {v.shape, v.spacing, "f32le", "intensity"});
  write_payload(base, v.voxels.data(), size_t(v.size()) * sizeof(float));
}

void save_volume(const LabelVolume& l, const std::string& base) {
  validate_geometry(l.shape, l.spacing);
  write_header(base, {l.shape, l.spacing, "u8", "label"});
  write_payload(base, l.labels.data(), size_t(l.size()));
}

void save_volume(const BoundaryVolume& b, const std::string& base) {
  validate_geometry(b.shape, b.spacing);
  write_header(base, {b.shape, b.spacing, "u8", "mask"});
  write_payload(base, b.mask.data(), size_t(b.size()));
}

Volume load_volume(const std::string& base) {
  Header h = read_header(base);
  if (h.kind != "intensity")
    throw IoError(IoErrorCode::MalformedHeader, base + " is not an intensity volume");
  if (h.dtype != "f32le")
    throw IoError(IoErrorCode::UnsupportedDtype, "intensity volumes must be f32le: " + base);
  int64_t n = voxel_count(h.shape);
  auto buf = read_payload(base, size_t(n) * sizeof(float));
  Volume v;
  v.shape = h.shape;
  v.spacing = h.spacing;
  v.voxels.resize(n);
  std::memcpy(v.voxels.data(), buf.data(), buf.size());
  v.normalized = n > 0 && v.voxels.minCoeff() >= 0.0f && v.voxels.maxCoeff() <= 1.0f;
  return v;
}

LabelVolume load_label_volume(const std::string& base) {
  Header h = read_header(base);
  if (h.kind != "label")
    throw IoError(IoErrorCode::MalformedHeader, base + " is not a label volume");
  if (h.dtype != "u8")
    throw IoError(IoErrorCode::UnsupportedDtype, "label volumes must be u8: " + base);
  int64_t n = voxel_count(h.shape);
  auto buf = read_payload(base, size_t(n));
  LabelVolume l;
  l.shape = h.shape;
  l.spacing = h.spacing;
  l.labels.resize(n);
  std::memcpy(l.labels.data(), buf.data(), buf.size());
  for (int64_t i = 0; i < n; ++i)
    if (l.labels[i] >= kNumClasses)
      throw DomainError("label volume " + base + " contains id " + std::to_string(l.labels[i]));
  return l;
}

BoundaryVolume load_mask_volume(const std::string& base) {
  Header h = read_header(base);
  if (h.kind != "mask")
    throw IoError(IoErrorCode::MalformedHeader, base + " is not a mask volume");
  if (h.dtype != "u8")
    throw IoError(IoErrorCode::UnsupportedDtype, "mask volumes must be u8: " + base);
  int64_t n = voxel_count(h.shape);
  auto buf = read_payload(base, size_t(n));
  BoundaryVolume b;
  b.shape = h.shape;
  b.spacing = h.spacing;
  b.mask.resize(n);
  std::memcpy(b.mask.data(), buf.data(), buf.size());
  return b;
}

std::string volume_kind(const std::string& base) { return read_header(base).kind; }

}  // namespace bparse
