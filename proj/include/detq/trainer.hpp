#pragma once

#include "detq/dataset.hpp"
#include "detq/detector.hpp"

namespace detq {

struct TrainConfig {
  int epochs = 20;
  int batch_size = 8;
  double lr = 1e-3;
  double lr_final_factor = 0.1;  // applied for the last 20% of epochs
  double box_loss_weight = 1.0;
  double neg_cls_weight = 0.25;
  double pos_iou = 0.5;
  double neg_iou = 0.4;
  uint64_t seed = 1;
  bool verbose = false;
};

// Cross-entropy on anchor classification plus smooth-L1 on positive-anchor
// offsets. Deterministic for a fixed seed; throws on divergence.
void train_in_place(ToyDetector& model, const Dataset& train, const TrainConfig& cfg);

ToyDetector train_toy(const ToyDetectorConfig& mcfg, const Dataset& train,
                      const TrainConfig& cfg);

double evaluate_model_map(ToyDetector& model, const Dataset& val,
                          const std::vector<double>& iou_thresholds = {0.5},
                          int batch_size = 16);

}  // namespace detq
