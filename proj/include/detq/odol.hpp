#pragma once

#include <vector>

#include "detq/detector.hpp"

namespace detq {

enum class ClsLossFn { kMse, kKl };
enum class LocLossFn { kL1, kIou };

// Output-loss configuration: a classification divergence over all anchors
// plus a localization distance over FP-selected positive boxes.
struct ODOLConfig {
  ClsLossFn cls_fn = ClsLossFn::kKl;
  LocLossFn loc_fn = LocLossFn::kL1;
  double alpha = 0.1;          // 0.1 for L1, 0.001 for IoU
  double score_threshold = 0.05;
  int top_k = 100;
  double nms_threshold = 0.5;

  void validate() const;
  static double default_alpha(LocLossFn fn) { return fn == LocLossFn::kL1 ? 0.1 : 0.001; }
};

// Indicator over the flattened anchors of one image, derived solely from the
// FP pass (threshold -> top-k -> NMS on decoded FP boxes).
struct PositiveSet {
  std::vector<bool> positive;  // size N
  int count = 0;
};

PositiveSet select_positive_boxes(const DetectionOutput& fp, int img,
                                  const std::vector<Box>& anchors, double img_size,
                                  const ODOLConfig& cfg);

// Per-anchor classification loss between probability rows (length C).
double cls_loss_row(const double* c, const double* cq, int C, ClsLossFn fn);
// Localization loss between decoded boxes.
double loc_loss_box(const Box& l, const Box& lq, LocLossFn fn);

struct OdolBreakdown {
  double total = 0;
  double cls_term = 0;  // (1/N) sum of cls losses, averaged over images
  double loc_term = 0;  // (alpha/N) sum over positives, averaged over images
};

// L = (1/N) sum_i (L_cls,i + alpha * L_loc,i * I_pos,i), averaged over the
// batch. Outputs must be anchor-aligned; positives precomputed from FP.
OdolBreakdown odol(const DetectionOutput& fp, const DetectionOutput& q,
                   const std::vector<PositiveSet>& positives, const std::vector<Box>& anchors,
                   double img_size, const ODOLConfig& cfg);

}  // namespace detq
