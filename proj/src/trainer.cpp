#include "detq/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <numeric>

#include "detq/map_eval.hpp"
#include "detq/rng.hpp"

namespace detq {

namespace {

struct AnchorTargets {
  // per anchor: -2 ignore, -1 background, >=0 ground-truth index
  std::vector<int> assignment;
  int num_pos = 0;
};

AnchorTargets assign_anchors(const std::vector<Box>& anchors, const std::vector<Box>& gts,
                             double pos_iou, double neg_iou) {
  AnchorTargets t;
  t.assignment.assign(anchors.size(), -1);
  std::vector<double> best_iou(anchors.size(), 0.0);
  std::vector<int> best_gt(anchors.size(), -1);
  for (size_t a = 0; a < anchors.size(); ++a) {
    for (size_t g = 0; g < gts.size(); ++g) {
      double v = iou(anchors[a], gts[g]);
      if (v > best_iou[a]) {
        best_iou[a] = v;
        best_gt[a] = int(g);
      }
    }
    if (best_iou[a] >= pos_iou) t.assignment[a] = best_gt[a];
    else if (best_iou[a] >= neg_iou) t.assignment[a] = -2;
  }
  // every ground truth claims its best anchor even below the threshold
  for (size_t g = 0; g < gts.size(); ++g) {
    double best = -1.0;
    int best_a = -1;
    for (size_t a = 0; a < anchors.size(); ++a) {
      double v = iou(anchors[a], gts[g]);
      if (v > best) {
        best = v;
        best_a = int(a);
      }
    }
    if (best_a >= 0) t.assignment[size_t(best_a)] = int(g);
  }
  for (int a : t.assignment)
    if (a >= 0) ++t.num_pos;
  return t;
}

}  // namespace

void train_in_place(ToyDetector& model, const Dataset& train, const TrainConfig& cfg) {
  DETQ_CHECK(!train.images.empty(), "train_in_place: empty training set");
  const auto& anchors = model.anchors();
  const int N = model.num_anchors();
  const int C = model.config().classes_with_bg();
  const int bg = model.config().background_id();
  const double S = model.config().input_size;

  // precompute per-image targets
  struct ImageTargets {
    std::vector<double> cls_weight_onehot;  // N x C, weight at the target class
    std::vector<double> box_target;         // N x 4
    std::vector<double> box_mask;           // N x 4
    int num_pos = 0;
  };
  std::vector<ImageTargets> targets(train.images.size());
  for (size_t i = 0; i < train.images.size(); ++i) {
    const auto& gts = train.images[i].boxes;
    AnchorTargets at = assign_anchors(anchors, gts, cfg.pos_iou, cfg.neg_iou);
    ImageTargets& t = targets[i];
    t.cls_weight_onehot.assign(size_t(N) * C, 0.0);
    t.box_target.assign(size_t(N) * 4, 0.0);
    t.box_mask.assign(size_t(N) * 4, 0.0);
    t.num_pos = at.num_pos;
    for (int a = 0; a < N; ++a) {
      int asg = at.assignment[size_t(a)];
      if (asg == -2) continue;  // ignore band
      if (asg == -1) {
        t.cls_weight_onehot[size_t(a * C + bg)] = cfg.neg_cls_weight;
      } else {
        const Box& g = gts[size_t(asg)];
        t.cls_weight_onehot[size_t(a * C + g.class_id)] = 1.0;
        auto off = encode_box(g, anchors[size_t(a)]);
        for (int k = 0; k < 4; ++k) {
          t.box_target[size_t(a * 4 + k)] = off[size_t(k)];
          t.box_mask[size_t(a * 4 + k)] = 1.0;
        }
      }
    }
  }

  model.set_params_requires_grad(true);
  auto params = model.parameters();
  AdamState opt;
  opt.lr = cfg.lr;
  opt.init(params);

  Rng shuffle_rng(derive_seed(cfg.seed, "train-shuffle"));
  std::vector<int> order(train.images.size());
  std::iota(order.begin(), order.end(), 0);
  const int steps_per_epoch =
      int((train.images.size() + size_t(cfg.batch_size) - 1) / size_t(cfg.batch_size));

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    // Fisher-Yates with our own rng
    for (size_t i = order.size(); i > 1; --i)
      std::swap(order[i - 1], order[size_t(shuffle_rng.uniform_int(0, int64_t(i) - 1))]);
    opt.lr = epoch >= (cfg.epochs * 4) / 5 ? cfg.lr * cfg.lr_final_factor : cfg.lr;

    double epoch_loss = 0;
    for (int step = 0; step < steps_per_epoch; ++step) {
      int lo = step * cfg.batch_size;
      int hi = std::min<int>(lo + cfg.batch_size, int(train.images.size()));
      int B = hi - lo;
      std::vector<std::vector<double>> imgs;
      std::vector<double> cw, bt, bm;
      int num_pos = 0;
      for (int k = lo; k < hi; ++k) {
        const ImageTargets& t = targets[size_t(order[size_t(k)])];
        imgs.push_back(train.images[size_t(order[size_t(k)])].pixels);
        cw.insert(cw.end(), t.cls_weight_onehot.begin(), t.cls_weight_onehot.end());
        bt.insert(bt.end(), t.box_target.begin(), t.box_target.end());
        bm.insert(bm.end(), t.box_mask.begin(), t.box_mask.end());
        num_pos += t.num_pos;
      }
      Tensor images = model.images_tensor(imgs);
      auto outs = model.forward_all_blocks(images);
      auto head = model.forward_head(outs);
      Tensor logits = model.flat_cls_logits(head);   // [B, N, C]
      Tensor offsets = model.flat_box_offsets(head); // [B, N, 4]

      Tensor cls_w = Tensor::from_data({B, N, C}, std::move(cw));
      Tensor box_t = Tensor::from_data({B, N, 4}, std::move(bt));
      Tensor box_m = Tensor::from_data({B, N, 4}, std::move(bm));
      double norm = 1.0 / std::max(1, num_pos);
      Tensor cls_loss = mul_scalar(sum(mul(log_softmax(logits, 2), cls_w)), -norm);
      Tensor box_loss =
          mul_scalar(sum(mul(smooth_l1(offsets, box_t, 0.1), box_m)), cfg.box_loss_weight * norm);
      Tensor loss = add(cls_loss, box_loss);
      DETQ_CHECK(std::isfinite(loss.item()), "training diverged at epoch "
                                                 << epoch << " step " << step);
      for (auto& p : params) p.zero_grad();
      backward(loss);
      adam_step(params, opt);
      epoch_loss += loss.item();
    }
    if (cfg.verbose)
      std::fprintf(stderr, "epoch %d loss %.4f\n", epoch, epoch_loss / steps_per_epoch);
  }
  model.set_params_requires_grad(false);
}

ToyDetector train_toy(const ToyDetectorConfig& mcfg, const Dataset& train,
                      const TrainConfig& cfg) {
  ToyDetector model(mcfg, derive_seed(cfg.seed, "model-init"));
  train_in_place(model, train, cfg);
  return model;
}

double evaluate_model_map(ToyDetector& model, const Dataset& val,
                          const std::vector<double>& iou_thresholds, int batch_size) {
  DETQ_CHECK(!val.images.empty(), "evaluate_model_map: empty validation set");
  std::vector<std::vector<Box>> dets, gts;
  for (size_t lo = 0; lo < val.images.size(); lo += size_t(batch_size)) {
    size_t hi = std::min(val.images.size(), lo + size_t(batch_size));
    std::vector<std::vector<double>> imgs;
    for (size_t i = lo; i < hi; ++i) imgs.push_back(val.images[i].pixels);
    DetectionOutput out = model.run(model.images_tensor(imgs));
    for (size_t i = lo; i < hi; ++i) {
      dets.push_back(model.detections(out, int(i - lo)));
      gts.push_back(val.images[i].boxes);
    }
  }
  return evaluate_map(dets, gts, iou_thresholds).map;
}

}  // namespace detq
