#pragma once

#include <array>
#include <vector>

#include "detq/common.hpp"

namespace detq {

struct Box {
  double x1 = 0, y1 = 0, x2 = 0, y2 = 0;
  int class_id = -1;
  double score = 0;

  double width() const { return x2 - x1; }
  double height() const { return y2 - y1; }
  double area() const { return width() * height(); }
  double cx() const { return 0.5 * (x1 + x2); }
  double cy() const { return 0.5 * (y1 + y2); }
};

double iou(const Box& a, const Box& b);

// Greedy descending-score suppression; equal scores break toward the lower
// index. Returns kept indices in pick order.
std::vector<int> nms(const std::vector<Box>& boxes, double iou_threshold);

// Square anchors centred on cell centres of a stride-sized grid, one box per
// (row, col, size) in that order.
std::vector<Box> generate_level_anchors(int stride, int grid_h, int grid_w,
                                        const std::vector<double>& sizes);

// (dx, dy, dw, dh) parameterization: centre deltas scaled by anchor size,
// log-space width/height.
std::array<double, 4> encode_box(const Box& gt, const Box& anchor);
Box decode_box(const double* offsets, const Box& anchor, double img_w, double img_h);

}  // namespace detq
