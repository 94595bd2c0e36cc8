#include "detq/odol.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

namespace detq {

void ODOLConfig::validate() const {
  DETQ_CHECK(alpha > 0, "odol: alpha must be positive, got " << alpha);
  DETQ_CHECK(score_threshold > 0 && score_threshold < 1,
             "odol: score threshold must be in (0,1), got " << score_threshold);
  DETQ_CHECK(top_k >= 1, "odol: top_k must be >= 1, got " << top_k);
  DETQ_CHECK(nms_threshold > 0 && nms_threshold < 1, "odol: bad NMS threshold");
}

PositiveSet select_positive_boxes(const DetectionOutput& fp, int img,
                                  const std::vector<Box>& anchors, double img_size,
                                  const ODOLConfig& cfg) {
  cfg.validate();
  const int N = fp.num_anchors;
  const int C = fp.num_classes_with_bg;
  PositiveSet ps;
  ps.positive.assign(size_t(N), false);

  // 1) threshold on the best non-background FP score
  struct Cand {
    int anchor;
    double score;
  };
  std::vector<Cand> cands;
  for (int a = 0; a < N; ++a) {
    const double* row = fp.prob_row(img, a);
    double best = 0;
    for (int c = 0; c < C - 1; ++c) best = std::max(best, row[c]);
    if (best >= cfg.score_threshold) cands.push_back({a, best});
  }
  // 2) top-k by score, anchors-index ties toward the lower index
  std::stable_sort(cands.begin(), cands.end(), [](const Cand& a, const Cand& b) {
    if (a.score != b.score) return a.score > b.score;
    return a.anchor < b.anchor;
  });
  if (int(cands.size()) > cfg.top_k) cands.resize(size_t(cfg.top_k));
  // 3) class-agnostic NMS on decoded FP boxes
  std::vector<Box> boxes;
  for (const auto& cand : cands) {
    Box b = decode_box(fp.offset_row(img, cand.anchor), anchors[size_t(cand.anchor)], img_size,
                       img_size);
    b.score = cand.score;
    boxes.push_back(b);
  }
  for (int kept : nms(boxes, cfg.nms_threshold)) {
    ps.positive[size_t(cands[size_t(kept)].anchor)] = true;
    ++ps.count;
  }
  return ps;
}

double cls_loss_row(const double* c, const double* cq, int C, ClsLossFn fn) {
  if (fn == ClsLossFn::kMse) {
    double acc = 0;
    for (int j = 0; j < C; ++j) {
      double d = c[j] - cq[j];
      acc += d * d;
    }
    return acc / C;
  }
  // KL(FP || quantized) with clamping and renormalization
  constexpr double kFloor = 1e-8;
  double za = 0, zb = 0;
  for (int j = 0; j < C; ++j) {
    za += std::clamp(c[j], kFloor, 1.0);
    zb += std::clamp(cq[j], kFloor, 1.0);
  }
  double acc = 0;
  for (int j = 0; j < C; ++j) {
    double p = std::clamp(c[j], kFloor, 1.0) / za;
    double q = std::clamp(cq[j], kFloor, 1.0) / zb;
    acc += p * std::log(p / q);
  }
  return acc;
}

double loc_loss_box(const Box& l, const Box& lq, LocLossFn fn) {
  if (fn == LocLossFn::kL1) {
    return (std::fabs(l.x1 - lq.x1) + std::fabs(l.y1 - lq.y1) + std::fabs(l.x2 - lq.x2) +
            std::fabs(l.y2 - lq.y2)) /
           4.0;
  }
  return 1.0 - iou(l, lq);
}

OdolBreakdown odol(const DetectionOutput& fp, const DetectionOutput& q,
                   const std::vector<PositiveSet>& positives, const std::vector<Box>& anchors,
                   double img_size, const ODOLConfig& cfg) {
  cfg.validate();
  DETQ_CHECK(fp.num_anchors == q.num_anchors,
             "odol: anchor count mismatch, FP has " << fp.num_anchors << ", quantized has "
                                                    << q.num_anchors);
  DETQ_CHECK(fp.batch == q.batch && fp.num_classes_with_bg == q.num_classes_with_bg,
             "odol: output layout mismatch");
  DETQ_CHECK(int(positives.size()) == fp.batch, "odol: positives not aligned with the batch");
  const int N = fp.num_anchors;
  const int C = fp.num_classes_with_bg;

  // probability rows must be normalized
  for (int img = 0; img < fp.batch; ++img) {
    double acc = 0;
    for (int c = 0; c < C; ++c) acc += fp.prob_row(img, 0)[c];
    DETQ_CHECK(std::fabs(acc - 1.0) < 1e-6,
               "odol: FP class scores are not normalized probabilities");
    break;  // spot-check the first row; full scans are done in debug tests
  }

  OdolBreakdown out;
  for (int img = 0; img < fp.batch; ++img) {
    double cls_acc = 0, loc_acc = 0;
    for (int a = 0; a < N; ++a)
      cls_acc += cls_loss_row(fp.prob_row(img, a), q.prob_row(img, a), C, cfg.cls_fn);
    for (int a = 0; a < N; ++a) {
      if (!positives[size_t(img)].positive[size_t(a)]) continue;
      Box l = decode_box(fp.offset_row(img, a), anchors[size_t(a)], img_size, img_size);
      Box lq = decode_box(q.offset_row(img, a), anchors[size_t(a)], img_size, img_size);
      loc_acc += loc_loss_box(l, lq, cfg.loc_fn);
    }
    out.cls_term += cls_acc / N;
    out.loc_term += cfg.alpha * loc_acc / N;
  }
  out.cls_term /= fp.batch;
  out.loc_term /= fp.batch;
  out.total = out.cls_term + out.loc_term;
  return out;
}

}  // namespace detq
