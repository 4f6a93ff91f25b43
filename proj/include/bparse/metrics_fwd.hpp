#pragma once

// Small forward surface so segnet can score validation volumes without
// pulling the full metrics module into its header.

namespace bparse {
struct LabelVolume;

// Mean DSC over foreground classes present in ground truth or prediction.
double macro_foreground_dsc(const LabelVolume& pred, const LabelVolume& gt);

}  // namespace bparse
