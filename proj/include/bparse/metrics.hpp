#pragma once

#include "bparse/volume.hpp"

#include <nlohmann/json.hpp>

#include <optional>
#include <string>
#include <vector>

namespace bparse {

// Exact evaluation metrics: DSC, Jaccard, Precision, Recall and HD95 (mm),
// macro-averaged over foreground classes.
//
// Empty-class conventions (documented choice):
//   - class absent from both volumes: excluded from macro averages,
//     reported as null
//   - class present in exactly one: overlap metrics with a non-zero
//     denominator evaluate to 0, the zero-denominator one is null;
//     HD95 is undefined (null)
// DSC is computed as 2J/(1+J) from the Jaccard value so the DSC-Jaccard
// identity holds bit-exactly in every emitted report.

struct ConfusionCounts {
  int64_t tp = 0, fp = 0, fn = 0, tn = 0;
  int64_t total() const { return tp + fp + fn + tn; }
};

ConfusionCounts confusion(const LabelVolume& pred, const LabelVolume& gt, int class_id);

std::optional<double> jaccard(const ConfusionCounts& c);
std::optional<double> dsc(const ConfusionCounts& c);
std::optional<double> precision(const ConfusionCounts& c);
std::optional<double> recall(const ConfusionCounts& c);

// Surface voxels of a binary mask: in-mask voxels with at least one
// 6-neighbor outside the mask; the volume border counts as outside.
std::vector<Vec3i> surface_voxels(const Eigen::Matrix<uint8_t, Eigen::Dynamic, 1>& mask,
                                  const Vec3i& shape);

// 95th-percentile symmetric surface distance in mm (linear-interpolation
// percentile). std::nullopt when either mask is empty. The implementation
// runs an exact squared Euclidean distance transform per direction.
std::optional<double> hd95(const Eigen::Matrix<uint8_t, Eigen::Dynamic, 1>& pred_mask,
                           const Eigen::Matrix<uint8_t, Eigen::Dynamic, 1>& gt_mask,
                           const Vec3i& shape, const Vec3d& spacing);

// Directed q-quantile surface distance (sorted, linear interpolation).
double percentile_sorted(const std::vector<double>& sorted, double q);

struct ClassMetrics {
  int class_id = 0;
  bool in_gt = false, in_pred = false;
  std::optional<double> dsc, jaccard, precision, recall, hd95_mm;
};

struct MetricReport {
  std::vector<ClassMetrics> per_class;  // classes 1..32
  std::optional<double> macro_dsc, macro_jaccard, macro_precision, macro_recall, macro_hd95_mm;
  std::vector<int> excluded_classes;    // absent from both volumes

  nlohmann::ordered_json to_json() const;
  std::string to_csv() const;           // class,dsc,jaccard,precision,recall,hd95_mm
};

MetricReport evaluate(const LabelVolume& pred, const LabelVolume& gt, const Vec3d& spacing);

// Mean DSC over foreground classes present in gt or pred (0 when none).
double macro_foreground_dsc(const LabelVolume& pred, const LabelVolume& gt);

}  // namespace bparse
