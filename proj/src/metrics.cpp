#include "bparse/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>

namespace bparse {

ConfusionCounts confusion(const LabelVolume& pred, const LabelVolume& gt, int class_id) {
  require(pred.shape == gt.shape, "confusion: volume shapes differ");
  if (class_id < 0 || class_id >= kNumClasses)
    throw DomainError("confusion: class id outside {0..32}");
  ConfusionCounts c;
  const uint8_t id = uint8_t(class_id);
  const int64_t n = pred.size();
  for (int64_t i = 0; i < n; ++i) {
    bool p = pred.labels[i] == id;
    bool g = gt.labels[i] == id;
    c.tp += p && g;
    c.fp += p && !g;
    c.fn += !p && g;
  }
  c.tn = n - c.tp - c.fp - c.fn;
  return c;
}

std::optional<double> jaccard(const ConfusionCounts& c) {
  int64_t den = c.tp + c.fp + c.fn;
  if (den == 0) return std::nullopt;
  return double(c.tp) / double(den);
}

std::optional<double> dsc(const ConfusionCounts& c) {
  auto j = jaccard(c);
  if (!j) return std::nullopt;
  return 2.0 * *j / (1.0 + *j);  // keeps DSC = 2J/(1+J) exact in the report
}

std::optional<double> precision(const ConfusionCounts& c) {
  int64_t den = c.tp + c.fp;
  if (den == 0) return std::nullopt;
  return double(c.tp) / double(den);
}

std::optional<double> recall(const ConfusionCounts& c) {
  int64_t den = c.tp + c.fn;
  if (den == 0) return std::nullopt;
  return double(c.tp) / double(den);
}

std::vector<Vec3i> surface_voxels(const Eigen::Matrix<uint8_t, Eigen::Dynamic, 1>& mask,
                                  const Vec3i& shape) {
  require(mask.size() == voxel_count(shape), "surface_voxels: mask size mismatch");
  std::vector<Vec3i> out;
  const int W = shape[0], H = shape[1], D = shape[2];
  const int64_t sx = 1, sy = W, sz = int64_t(W) * H;
  for (int z = 0; z < D; ++z)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        int64_t i = flat_index(shape, x, y, z);
        if (!mask[i]) continue;
        bool surf = x == 0 || !mask[i - sx] || x + 1 == W || !mask[i + sx] ||
                    y == 0 || !mask[i - sy] || y + 1 == H || !mask[i + sy] ||
                    z == 0 || !mask[i - sz] || z + 1 == D || !mask[i + sz];
        if (surf) out.emplace_back(x, y, z);
      }
  return out;
}

namespace {

constexpr double kInf = std::numeric_limits<double>::infinity();

// Felzenszwalb-Huttenlocher 1-D squared distance transform with grid step
// `w` (mm): d(i) = min_j f(j) + (w*(i-j))^2. Infinite entries are treated
// as absent sites; a line with no finite entry stays infinite.
void dt_1d(std::vector<double>& f, std::vector<double>& scratch, std::vector<int>& v,
           std::vector<double>& z, double w) {
  const int n = int(f.size());
  const double w2 = w * w;
  int k = -1;
  for (int q = 0; q < n; ++q) {
    if (f[q] == kInf) continue;
    double s = 0.0;
    while (k >= 0) {
      int p = v[k];
      s = (f[q] - f[p] + w2 * (double(q) * q - double(p) * p)) / (2.0 * w2 * (q - p));
      if (s <= z[k]) --k;
      else break;
    }
    if (k < 0) {
      k = 0;
      v[0] = q;
      z[0] = -kInf;
      z[1] = kInf;
    } else {
      ++k;
      v[k] = q;
      z[k] = s;
      z[k + 1] = kInf;
    }
  }
  if (k < 0) return;  // no sites on this line
  int kk = 0;
  for (int q = 0; q < n; ++q) {
    while (z[kk + 1] < q) ++kk;
    double d = w * (q - v[kk]);
    scratch[q] = f[v[kk]] + d * d;
  }
  std::copy(scratch.begin(), scratch.begin() + n, f.begin());
}

// Squared EDT of a point set over the full grid, anisotropic spacing.
std::vector<double> edt_sq(const std::vector<Vec3i>& points, const Vec3i& shape,
                           const Vec3d& spacing) {
  const int W = shape[0], H = shape[1], D = shape[2];
  std::vector<double> dist(size_t(voxel_count(shape)), kInf);
  for (const auto& p : points) dist[size_t(flat_index(shape, p[0], p[1], p[2]))] = 0.0;

  const int maxdim = std::max({W, H, D});
  std::vector<double> line(maxdim), scratch(maxdim), z(maxdim + 1);
  std::vector<int> v(maxdim);

  // x pass
  for (int zi = 0; zi < D; ++zi)
    for (int y = 0; y < H; ++y) {
      int64_t base = flat_index(shape, 0, y, zi);
      line.assign(dist.begin() + base, dist.begin() + base + W);
      line.resize(W);
      scratch.resize(W);
      dt_1d(line, scratch, v, z, spacing[0]);
      std::copy(line.begin(), line.end(), dist.begin() + base);
    }
  // y pass
  line.resize(H);
  scratch.resize(H);
  for (int zi = 0; zi < D; ++zi)
    for (int x = 0; x < W; ++x) {
      for (int y = 0; y < H; ++y) line[y] = dist[size_t(flat_index(shape, x, y, zi))];
      dt_1d(line, scratch, v, z, spacing[1]);
      for (int y = 0; y < H; ++y) dist[size_t(flat_index(shape, x, y, zi))] = line[y];
    }
  // z pass
  line.resize(D);
  scratch.resize(D);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      for (int zi = 0; zi < D; ++zi) line[zi] = dist[size_t(flat_index(shape, x, y, zi))];
      dt_1d(line, scratch, v, z, spacing[2]);
      for (int zi = 0; zi < D; ++zi) dist[size_t(flat_index(shape, x, y, zi))] = line[zi];
    }
  return dist;
}

double directed_p95(const std::vector<Vec3i>& from, const std::vector<double>& dist_sq_to,
                    const Vec3i& shape) {
  std::vector<double> d;
  d.reserve(from.size());
  for (const auto& p : from)
    d.push_back(std::sqrt(dist_sq_to[size_t(flat_index(shape, p[0], p[1], p[2]))]));
  std::sort(d.begin(), d.end());
  return percentile_sorted(d, 0.95);
}

}  // namespace

double percentile_sorted(const std::vector<double>& sorted, double q) {
  if (sorted.empty()) throw DomainError("percentile of an empty set");
  if (sorted.size() == 1) return sorted[0];
  double pos = q * double(sorted.size() - 1);
  size_t lo = size_t(std::floor(pos));
  size_t hi = std::min(lo + 1, sorted.size() - 1);
  double frac = pos - double(lo);
  return sorted[lo] + frac * (sorted[hi] - sorted[lo]);
}

std::optional<double> hd95(const Eigen::Matrix<uint8_t, Eigen::Dynamic, 1>& pred_mask,
                           const Eigen::Matrix<uint8_t, Eigen::Dynamic, 1>& gt_mask,
                           const Vec3i& shape, const Vec3d& spacing) {
  require(pred_mask.size() == voxel_count(shape) && gt_mask.size() == voxel_count(shape),
          "hd95: mask sizes do not match the shape");
  if (!(spacing.minCoeff() > 0.0)) throw DataError("hd95: spacing must be positive");
  auto surf_a = surface_voxels(pred_mask, shape);
  auto surf_b = surface_voxels(gt_mask, shape);
  if (surf_a.empty() || surf_b.empty()) return std::nullopt;
  auto dt_b = edt_sq(surf_b, shape, spacing);
  auto dt_a = edt_sq(surf_a, shape, spacing);
  double ab = directed_p95(surf_a, dt_b, shape);
  double ba = directed_p95(surf_b, dt_a, shape);
  return std::max(ab, ba);
}

namespace {

std::optional<double> mean_present(const std::vector<std::optional<double>>& xs) {
  double sum = 0.0;
  int n = 0;
  for (const auto& x : xs)
    if (x) {
      sum += *x;
      ++n;
    }
  if (n == 0) return std::nullopt;
  return sum / n;
}

}  // namespace

MetricReport evaluate(const LabelVolume& pred, const LabelVolume& gt, const Vec3d& spacing) {
  require(pred.shape == gt.shape, "evaluate: volume shapes differ");
  MetricReport rep;
  std::vector<std::optional<double>> dscs, jacs, precs, recs, hds;
  const int64_t n = pred.size();
  for (int cls = 1; cls < kNumClasses; ++cls) {
    ClassMetrics cm;
    cm.class_id = cls;
    ConfusionCounts c = confusion(pred, gt, cls);
    cm.in_gt = c.tp + c.fn > 0;
    cm.in_pred = c.tp + c.fp > 0;
    if (!cm.in_gt && !cm.in_pred) {
      rep.excluded_classes.push_back(cls);
      rep.per_class.push_back(cm);
      continue;
    }
    cm.dsc = dsc(c);
    cm.jaccard = jaccard(c);
    cm.precision = precision(c);
    cm.recall = recall(c);
    if (cm.in_gt && cm.in_pred) {
      Eigen::Matrix<uint8_t, Eigen::Dynamic, 1> pm(n), gm(n);
      for (int64_t i = 0; i < n; ++i) {
        pm[i] = pred.labels[i] == cls;
        gm[i] = gt.labels[i] == cls;
      }
      cm.hd95_mm = hd95(pm, gm, pred.shape, spacing);
    }
    dscs.push_back(cm.dsc);
    jacs.push_back(cm.jaccard);
    precs.push_back(cm.precision);
    recs.push_back(cm.recall);
    hds.push_back(cm.hd95_mm);
    rep.per_class.push_back(cm);
  }
  rep.macro_dsc = mean_present(dscs);
  rep.macro_jaccard = mean_present(jacs);
  rep.macro_precision = mean_present(precs);
  rep.macro_recall = mean_present(recs);
  rep.macro_hd95_mm = mean_present(hds);
  return rep;
}

double macro_foreground_dsc(const LabelVolume& pred, const LabelVolume& gt) {
  require(pred.shape == gt.shape, "macro_foreground_dsc: volume shapes differ");
  double sum = 0.0;
  int n = 0;
  for (int cls = 1; cls < kNumClasses; ++cls) {
    ConfusionCounts c = confusion(pred, gt, cls);
    auto d = dsc(c);
    if (d) {
      sum += *d;
      ++n;
    }
  }
  return n == 0 ? 0.0 : sum / n;
}

namespace {

nlohmann::ordered_json opt_json(const std::optional<double>& v) {
  if (!v) return nullptr;
  return *v;
}

}  // namespace

nlohmann::ordered_json MetricReport::to_json() const {
  nlohmann::ordered_json j;
  j["classes"] = nlohmann::ordered_json::array();
  for (const auto& cm : per_class) {
    nlohmann::ordered_json c;
    c["class"] = cm.class_id;
    c["present_gt"] = cm.in_gt;
    c["present_pred"] = cm.in_pred;
    c["dsc"] = opt_json(cm.dsc);
    c["jaccard"] = opt_json(cm.jaccard);
    c["precision"] = opt_json(cm.precision);
    c["recall"] = opt_json(cm.recall);
    c["hd95_mm"] = opt_json(cm.hd95_mm);
    j["classes"].push_back(std::move(c));
  }
  j["macro"] = {{"dsc", opt_json(macro_dsc)},
                {"jaccard", opt_json(macro_jaccard)},
                {"precision", opt_json(macro_precision)},
                {"recall", opt_json(macro_recall)},
                {"hd95_mm", opt_json(macro_hd95_mm)}};
  j["excluded_classes"] = excluded_classes;
  return j;
}

std::string MetricReport::to_csv() const {
  std::string out = "class,dsc,jaccard,precision,recall,hd95_mm\n";
  char buf[64];
  auto cell = [&](const std::optional<double>& v) -> std::string {
    if (!v) return "";
    std::snprintf(buf, sizeof(buf), "%.17g", *v);
    return buf;
  };
  for (const auto& cm : per_class) {
    out += std::to_string(cm.class_id) + "," + cell(cm.dsc) + "," + cell(cm.jaccard) + "," +
           cell(cm.precision) + "," + cell(cm.recall) + "," + cell(cm.hd95_mm) + "\n";
  }
  return out;
}

}  // namespace bparse
