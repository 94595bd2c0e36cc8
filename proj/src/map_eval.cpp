#include "detq/map_eval.hpp"

#include <algorithm>
#include <cmath>
#include <set>

namespace detq {

namespace {

struct RankedDet {
  double score;
  int image;
  int index;  // insertion order within the image, for deterministic ties
  Box box;
};

// AP from a ranked TP/FP sequence via 101-point interpolated precision.
double interpolated_ap(const std::vector<bool>& tp, int num_gt) {
  if (num_gt == 0) return 0.0;
  std::vector<double> precision, recall;
  int cum_tp = 0;
  for (size_t i = 0; i < tp.size(); ++i) {
    if (tp[i]) ++cum_tp;
    precision.push_back(double(cum_tp) / double(i + 1));
    recall.push_back(double(cum_tp) / double(num_gt));
  }
  // precision envelope: max precision at recall >= r
  for (int i = int(precision.size()) - 2; i >= 0; --i)
    precision[size_t(i)] = std::max(precision[size_t(i)], precision[size_t(i) + 1]);
  double ap = 0;
  size_t j = 0;
  for (int ri = 0; ri <= 100; ++ri) {
    double r = double(ri) / 100.0;
    while (j < recall.size() && recall[j] < r) ++j;
    if (j < recall.size()) ap += precision[j];
  }
  return ap / 101.0;
}

}  // namespace

MapResult evaluate_map(const std::vector<std::vector<Box>>& detections,
                       const std::vector<std::vector<Box>>& ground_truth,
                       const std::vector<double>& iou_thresholds) {
  DETQ_CHECK(detections.size() == ground_truth.size(),
             "evaluate_map: detections for " << detections.size() << " images but ground truth for "
                                             << ground_truth.size());
  DETQ_CHECK(!iou_thresholds.empty(), "evaluate_map: no IoU thresholds");
  std::set<int> classes;
  int64_t total_gt = 0;
  for (const auto& img : ground_truth)
    for (const auto& g : img) {
      classes.insert(g.class_id);
      ++total_gt;
    }
  DETQ_CHECK(total_gt > 0, "evaluate_map: ground truth is empty, metric undefined");

  MapResult result;
  double acc = 0;
  int terms = 0;
  for (int cls : classes) {
    // ranked detections of this class across all images
    std::vector<RankedDet> ranked;
    for (size_t img = 0; img < detections.size(); ++img) {
      int idx = 0;
      for (const auto& d : detections[img]) {
        if (d.class_id == cls) ranked.push_back({d.score, int(img), idx, d});
        ++idx;
      }
    }
    std::stable_sort(ranked.begin(), ranked.end(), [](const RankedDet& a, const RankedDet& b) {
      if (a.score != b.score) return a.score > b.score;
      if (a.image != b.image) return a.image < b.image;
      return a.index < b.index;
    });
    int num_gt = 0;
    for (const auto& img : ground_truth)
      for (const auto& g : img)
        if (g.class_id == cls) ++num_gt;

    for (double thr : iou_thresholds) {
      std::vector<std::vector<bool>> gt_used(ground_truth.size());
      for (size_t img = 0; img < ground_truth.size(); ++img)
        gt_used[img].assign(ground_truth[img].size(), false);
      std::vector<bool> tp(ranked.size(), false);
      for (size_t r = 0; r < ranked.size(); ++r) {
        const auto& det = ranked[r];
        const auto& gts = ground_truth[size_t(det.image)];
        double best_iou = 0;
        int best_gt = -1;
        for (size_t g = 0; g < gts.size(); ++g) {
          if (gts[g].class_id != cls || gt_used[size_t(det.image)][g]) continue;
          double v = iou(det.box, gts[g]);
          if (v > best_iou) {  // IoU ties keep the earlier ground-truth index
            best_iou = v;
            best_gt = int(g);
          }
        }
        if (best_gt >= 0 && best_iou >= thr) {
          tp[r] = true;
          gt_used[size_t(det.image)][size_t(best_gt)] = true;
        }
      }
      double ap = interpolated_ap(tp, num_gt);
      result.ap[{cls, int(std::lround(thr * 100))}] = ap;
      acc += ap;
      ++terms;
    }
  }
  result.map = acc / double(terms);
  return result;
}

}  // namespace detq
