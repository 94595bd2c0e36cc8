#pragma once

#include <map>
#include <vector>

#include "detq/boxes.hpp"

namespace detq {

// Mean average precision with 101-recall-point interpolation. Detections and
// ground truth are per-image box lists; detection boxes carry class_id and
// score, ground-truth boxes carry class_id only. Classes absent from the
// ground truth are excluded from the mean; an entirely empty ground truth is
// an error (the metric is undefined).
struct MapResult {
  double map = 0;
  // (class_id, iou_threshold) -> AP
  std::map<std::pair<int, int>, double> ap;  // threshold stored as round(t*100)
};

MapResult evaluate_map(const std::vector<std::vector<Box>>& detections,
                       const std::vector<std::vector<Box>>& ground_truth,
                       const std::vector<double>& iou_thresholds = {0.5});

}  // namespace detq
