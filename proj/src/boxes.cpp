#include "detq/boxes.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace detq {

double iou(const Box& a, const Box& b) {
  double ix1 = std::max(a.x1, b.x1);
  double iy1 = std::max(a.y1, b.y1);
  double ix2 = std::min(a.x2, b.x2);
  double iy2 = std::min(a.y2, b.y2);
  double iw = ix2 - ix1;
  double ih = iy2 - iy1;
  if (iw <= 0 || ih <= 0) return 0.0;
  double inter = iw * ih;
  double uni = a.area() + b.area() - inter;
  return uni <= 0 ? 0.0 : inter / uni;
}

std::vector<int> nms(const std::vector<Box>& boxes, double iou_threshold) {
  std::vector<int> order(boxes.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&](int a, int b) {
    if (boxes[size_t(a)].score != boxes[size_t(b)].score)
      return boxes[size_t(a)].score > boxes[size_t(b)].score;
    return a < b;
  });
  std::vector<int> kept;
  std::vector<bool> suppressed(boxes.size(), false);
  for (size_t oi = 0; oi < order.size(); ++oi) {
    int i = order[oi];
    if (suppressed[size_t(i)]) continue;
    kept.push_back(i);
    for (size_t oj = oi + 1; oj < order.size(); ++oj) {
      int j = order[oj];
      if (!suppressed[size_t(j)] && iou(boxes[size_t(i)], boxes[size_t(j)]) > iou_threshold)
        suppressed[size_t(j)] = true;
    }
  }
  return kept;
}

std::vector<Box> generate_level_anchors(int stride, int grid_h, int grid_w,
                                        const std::vector<double>& sizes) {
  DETQ_CHECK(stride >= 1 && grid_h >= 1 && grid_w >= 1, "generate_level_anchors: bad grid");
  std::vector<Box> anchors;
  anchors.reserve(size_t(grid_h) * size_t(grid_w) * sizes.size());
  for (int y = 0; y < grid_h; ++y) {
    for (int x = 0; x < grid_w; ++x) {
      double cx = (x + 0.5) * stride;
      double cy = (y + 0.5) * stride;
      for (double s : sizes) {
        Box b;
        b.x1 = cx - s / 2;
        b.y1 = cy - s / 2;
        b.x2 = cx + s / 2;
        b.y2 = cy + s / 2;
        anchors.push_back(b);
      }
    }
  }
  return anchors;
}

std::array<double, 4> encode_box(const Box& gt, const Box& anchor) {
  DETQ_CHECK(gt.width() > 0 && gt.height() > 0, "encode_box: degenerate ground-truth box");
  return {(gt.cx() - anchor.cx()) / anchor.width(), (gt.cy() - anchor.cy()) / anchor.height(),
          std::log(gt.width() / anchor.width()), std::log(gt.height() / anchor.height())};
}

Box decode_box(const double* o, const Box& anchor, double img_w, double img_h) {
  for (int k = 0; k < 4; ++k)
    DETQ_CHECK(std::isfinite(o[k]), "decode_box: non-finite offset at index " << k);
  constexpr double kMaxLogScale = 4.135;  // ln(1000/16)
  double cx = anchor.cx() + o[0] * anchor.width();
  double cy = anchor.cy() + o[1] * anchor.height();
  double w = anchor.width() * std::exp(std::clamp(o[2], -kMaxLogScale, kMaxLogScale));
  double h = anchor.height() * std::exp(std::clamp(o[3], -kMaxLogScale, kMaxLogScale));
  Box b;
  b.x1 = cx - w / 2;
  b.y1 = cy - h / 2;
  b.x2 = cx + w / 2;
  b.y2 = cy + h / 2;
  // clip to the image, keeping a strictly positive extent
  constexpr double kMinSize = 1e-4;
  b.x1 = std::clamp(b.x1, 0.0, img_w - kMinSize);
  b.y1 = std::clamp(b.y1, 0.0, img_h - kMinSize);
  b.x2 = std::clamp(b.x2, b.x1 + kMinSize, img_w);
  b.y2 = std::clamp(b.y2, b.y1 + kMinSize, img_h);
  return b;
}

}  // namespace detq
