#include "bparse/phantom.hpp"

#include "bparse/rng.hpp"

#include <array>
#include <cmath>
#include <limits>
#include <vector>

namespace bparse {

namespace {

struct Tooth {
  int id = 0;
  Vec3d center;   // voxel coordinates
  Vec3d radius;   // voxel semi-axes
};

// Relative crown size along the arch, indexed by within-quadrant position
// (0 = central incisor ... 7 = third molar).
constexpr std::array<double, 8> kSizeFactor = {0.85, 0.85, 0.95, 1.0, 1.0, 1.15, 1.15, 1.1};

// Sample the arch parabola finely and return points at equal arc length.
// u in [-1, 1] traverses the arch from one third molar to the other;
// x(u) = cx + half_w * u, y(u) = y_front + depth * u^2.
std::vector<Vec3d> equal_arc_points(double cx, double half_w, double y_front, double depth,
                                    double z, int count) {
  const int kFine = 2048;
  std::vector<double> cum(kFine + 1, 0.0);
  auto at = [&](double u) {
    return Vec3d(cx + half_w * u, y_front + depth * u * u, z);
  };
  for (int i = 1; i <= kFine; ++i) {
    double u0 = -1.0 + 2.0 * (i - 1) / kFine;
    double u1 = -1.0 + 2.0 * i / kFine;
    cum[i] = cum[i - 1] + (at(u1) - at(u0)).norm();
  }
  std::vector<Vec3d> pts;
  pts.reserve(count);
  double total = cum[kFine];
  int seg = 0;
  for (int k = 0; k < count; ++k) {
    double target = total * k / (count - 1);
    while (seg < kFine && cum[seg + 1] < target) ++seg;
    double t0 = cum[seg], t1 = cum[seg + 1];
    double f = (t1 > t0) ? (target - t0) / (t1 - t0) : 0.0;
    double u = -1.0 + 2.0 * (seg + f) / kFine;
    pts.push_back(at(u));
  }
  return pts;
}

// Arch layout for one jaw. `arch_order_ids[k]` is the tooth id at physical
// position k (k runs across the arch, right molar to left molar for the
// upper jaw per the FDI map in the header).
std::vector<Tooth> layout_arch(const Vec3i& shape, double z_frac, const std::array<int, 16>& ids,
                               double crowding) {
  const double W = shape[0], H = shape[1], D = shape[2];
  double squeeze = 1.0 / (1.0 + 0.25 * crowding);
  double cx = 0.5 * (W - 1);
  double half_w = 0.40 * W * squeeze;
  double y_front = 0.18 * H;
  double depth = 0.58 * H * squeeze;
  double z = z_frac * (D - 1);
  auto pts = equal_arc_points(cx, half_w, y_front, depth, z, 16);
  // Arc spacing sets the crown radius so neighbors stay separable.
  double arc_step = (pts[1] - pts[0]).norm();
  for (int k = 2; k < 16; ++k) arc_step = std::min(arc_step, (pts[k] - pts[k - 1]).norm());
  std::vector<Tooth> teeth(16);
  for (int k = 0; k < 16; ++k) {
    int quadrant_pos = (k < 8) ? (7 - k) : (k - 8);  // 0 at midline
    double base = 0.42 * arc_step * kSizeFactor[quadrant_pos];
    base = std::max(base, 1.1);
    Tooth t;
    t.id = ids[k];
    t.center = pts[k];
    t.radius = Vec3d(base, base, 1.6 * base);
    teeth[k] = t;
  }
  return teeth;
}

// 2D distance from (x, y) to the sampled arch curve, for the bone band.
double dist_to_polyline_xy(const std::vector<Vec3d>& pts, double x, double y) {
  double best = std::numeric_limits<double>::infinity();
  for (const auto& p : pts) {
    double dx = x - p[0], dy = y - p[1];
    best = std::min(best, dx * dx + dy * dy);
  }
  return std::sqrt(best);
}

}  // namespace

std::pair<Volume, LabelVolume> generate_phantom(const PhantomSpec& spec) {
  validate_geometry(spec.shape, spec.spacing);
  for (int id : spec.missing_teeth)
    if (id < 1 || id > 32) throw DataError("missing_teeth ids must lie in {1..32}");
  if (spec.crowding_factor < 0.0) throw DataError("crowding_factor must be >= 0");
  if (spec.noise_sigma < 0.0) throw DataError("noise_sigma must be >= 0");

  const int W = spec.shape[0], H = spec.shape[1], D = spec.shape[2];

  // Physical order along each arch (see header for the id map).
  std::array<int, 16> upper{}, lower{};
  for (int k = 0; k < 8; ++k) upper[k] = 8 - k;        // 8..1  (upper right)
  for (int k = 8; k < 16; ++k) upper[k] = k + 1;       // 9..16 (upper left)
  for (int k = 0; k < 8; ++k) lower[k] = 24 - k;       // 24..17 (lower left)
  for (int k = 8; k < 16; ++k) lower[k] = k + 17;      // 25..32 (lower right)
  // Mirror the lower arch left-to-right so occluding pairs line up in x.
  std::array<int, 16> lower_mirrored{};
  for (int k = 0; k < 16; ++k) lower_mirrored[k] = lower[15 - k];

  auto up = layout_arch(spec.shape, 0.64, upper, spec.crowding_factor);
  auto lo = layout_arch(spec.shape, 0.36, lower_mirrored, spec.crowding_factor);
  std::vector<Tooth> teeth;
  teeth.insert(teeth.end(), up.begin(), up.end());
  teeth.insert(teeth.end(), lo.begin(), lo.end());

  // Rejection checks: every crown fully in bounds and centers separated.
  for (const auto& t : teeth) {
    for (int a = 0; a < 3; ++a) {
      if (t.center[a] - t.radius[a] < 0.0 || t.center[a] + t.radius[a] > spec.shape[a] - 1.0)
        throw DataError("phantom shape too small: tooth " + std::to_string(t.id) +
                        " does not fit inside the volume; increase the shape");
    }
  }
  for (size_t i = 0; i < teeth.size(); ++i)
    for (size_t j = i + 1; j < teeth.size(); ++j)
      if ((teeth[i].center - teeth[j].center).norm() < 2.0)
        throw DataError("phantom shape too small: teeth " + std::to_string(teeth[i].id) + " and " +
                        std::to_string(teeth[j].id) + " collide; increase the shape");

  Rng rng(spec.seed);
  // Fixed draw order keeps equal specs bit-identical: 32 tooth intensities,
  // one bone intensity, then one noise value per voxel in raster order.
  std::array<double, 33> tooth_hu{};
  for (int id = 1; id <= 32; ++id) tooth_hu[id] = rng.uniform(1500.0, 3000.0);
  double bone_hu = rng.uniform(300.0, 900.0);

  Volume vol;
  vol.shape = spec.shape;
  vol.spacing = spec.spacing;
  vol.voxels.setConstant(vol.size(), static_cast<float>(kHuMin));
  LabelVolume lab;
  lab.shape = spec.shape;
  lab.spacing = spec.spacing;
  lab.labels.setZero(lab.size());

  // Bone bands: a slab around each arch plane restricted to the arch
  // neighborhood in (x, y). The 2D distance field is shared across z.
  auto arch_pts_up = equal_arc_points(0.5 * (W - 1), 0.40 * W / (1 + 0.25 * spec.crowding_factor),
                                      0.18 * H, 0.58 * H / (1 + 0.25 * spec.crowding_factor),
                                      0.0, 64);
  double band_xy = 0.10 * std::min(W, H);
  std::vector<uint8_t> near_arch(size_t(W) * H, 0);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x)
      near_arch[size_t(y) * W + x] = dist_to_polyline_xy(arch_pts_up, x, y) <= band_xy ? 1 : 0;

  int z_up = int(std::lround(0.64 * (D - 1)));
  int z_lo = int(std::lround(0.36 * (D - 1)));
  int band_half = std::max(1, int(std::lround(0.06 * D)));
  for (int z = 0; z < D; ++z) {
    bool in_up = z >= z_up + band_half / 2 && z <= z_up + 2 * band_half;
    bool in_lo = z <= z_lo - band_half / 2 && z >= z_lo - 2 * band_half;
    if (!in_up && !in_lo) continue;
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        if (near_arch[size_t(y) * W + x])
          vol.at(x, y, z) = static_cast<float>(bone_hu);
  }

  // Teeth: voxel gets the id of the nearest crown (normalized ellipsoid
  // metric) among those that contain it.
  for (const auto& t : teeth) {
    if (spec.missing_teeth.count(t.id)) continue;
    int x0 = std::max(0, int(std::floor(t.center[0] - t.radius[0])));
    int x1 = std::min(W - 1, int(std::ceil(t.center[0] + t.radius[0])));
    int y0 = std::max(0, int(std::floor(t.center[1] - t.radius[1])));
    int y1 = std::min(H - 1, int(std::ceil(t.center[1] + t.radius[1])));
    int z0 = std::max(0, int(std::floor(t.center[2] - t.radius[2])));
    int z1 = std::min(D - 1, int(std::ceil(t.center[2] + t.radius[2])));
    for (int z = z0; z <= z1; ++z)
      for (int y = y0; y <= y1; ++y)
        for (int x = x0; x <= x1; ++x) {
          double dx = (x - t.center[0]) / t.radius[0];
          double dy = (y - t.center[1]) / t.radius[1];
          double dz = (z - t.center[2]) / t.radius[2];
          double d = dx * dx + dy * dy + dz * dz;
          if (d > 1.0) continue;
          int64_t i = flat_index(spec.shape, x, y, z);
          uint8_t prev = lab.labels[i];
          if (prev != 0) {
            // Contested voxel: keep the closer crown.
            const Tooth* other = nullptr;
            for (const auto& o : teeth)
              if (o.id == prev) { other = &o; break; }
            double ox = (x - other->center[0]) / other->radius[0];
            double oy = (y - other->center[1]) / other->radius[1];
            double oz = (z - other->center[2]) / other->radius[2];
            if (ox * ox + oy * oy + oz * oz <= d) continue;
          }
          lab.labels[i] = static_cast<uint8_t>(t.id);
          vol.voxels[i] = static_cast<float>(tooth_hu[t.id]);
        }
  }

  if (spec.noise_sigma > 0.0) {
    for (int64_t i = 0; i < vol.size(); ++i) {
      double v = vol.voxels[i] + spec.noise_sigma * rng.normal();
      vol.voxels[i] = static_cast<float>(std::min(kHuMax, std::max(kHuMin, v)));
    }
  }

  return {std::move(vol), std::move(lab)};
}

}  // namespace bparse
