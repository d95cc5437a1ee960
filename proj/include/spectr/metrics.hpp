#pragma once

#include <string>
#include <vector>

#include "spectr/data.hpp"

namespace spectr {

// Overlap metrics. Conventions: both masks empty -> DSC = IoU = 1, HD = 0;
// exactly one empty -> DSC = IoU = 0, HD = image diagonal.
double dsc(const Mask& a, const Mask& b);
double iou(const Mask& a, const Mask& b);

// Symmetric Hausdorff distance between mask boundaries (exact Euclidean,
// computed with an exact squared-distance transform). A boundary pixel is a
// foreground pixel with a 4-neighbor outside the mask or on the image edge.
double hausdorff(const Mask& a, const Mask& b);

struct MetricRow {
  int id = 0;
  double dsc = 0.0;
  double iou = 0.0;
  double hd = 0.0;
};

struct MetricReport {
  std::vector<MetricRow> rows;

  double mean_dsc() const;
  double median_dsc() const;
  double max_dsc() const;
  double min_dsc() const;
  double mean_iou() const;
  double mean_hd() const;

  // per-image rows then aggregate rows (mean/median/max/min applied per column)
  std::string to_csv() const;
};

}  // namespace spectr
