#pragma once

#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "detq/boxes.hpp"
#include "detq/model_io.hpp"
#include "detq/quantizer.hpp"
#include "detq/rng.hpp"
#include "detq/tensor.hpp"

namespace detq {

// Anchor-based single-stage detector: stem -> two residual stages -> two
// neck convs (strides 8 and 16) -> shared class/box head. The head always
// runs in full precision.
struct ToyDetectorConfig {
  int input_size = 64;
  int in_channels = 3;
  int stem_channels = 16;
  int stage2_channels = 32;
  int neck_channels = 32;
  int head_channels = 32;
  int num_classes = 3;
  std::vector<int> strides = {8, 16};
  std::vector<std::vector<double>> anchor_sizes = {{14, 18, 24}, {26, 32, 40}};

  int anchors_per_cell() const { return int(anchor_sizes[0].size()); }
  int classes_with_bg() const { return num_classes + 1; }
  int background_id() const { return num_classes; }

  nlohmann::json to_json() const;
  static ToyDetectorConfig from_json(const nlohmann::json& j);
};

// Flattened anchor-aligned network output for one batch. Anchor order is
// level-major, then row, column, anchor size; identical for FP and quantized
// passes by construction.
struct DetectionOutput {
  int batch = 0;
  int num_anchors = 0;
  int num_classes_with_bg = 0;
  std::vector<double> probs;    // batch x N x (K+1), softmax applied
  std::vector<double> offsets;  // batch x N x 4

  const double* prob_row(int img, int anchor) const {
    return probs.data() + (size_t(img) * num_anchors + anchor) * num_classes_with_bg;
  }
  const double* offset_row(int img, int anchor) const {
    return offsets.data() + (size_t(img) * num_anchors + anchor) * 4;
  }
};

// Per-conv quantization state. When `soft_active`, weights are soft-rounded
// through the rounding variables; when only `wq_enabled`, the baked
// fake-quantized weights are used.
struct ConvUnit {
  std::string name;
  Tensor W, b;
  int stride = 1;
  int pad = 1;

  bool wq_enabled = false;
  AffineQuantizer wq;
  Tensor w_baked;
  bool soft_active = false;
  Tensor v;

  Tensor apply(const Tensor& x) const;
};

// Activation fake-quantization point. kObserve passes values through while
// recording the running min/max (and optionally the full tensor).
struct ActSite {
  enum Mode { kOff = 0, kFixed = 1, kTrainScale = 2, kObserve = 3 };
  std::string name;
  Mode mode = kOff;
  AffineQuantizer q;
  Tensor scale_param;   // 1-element tensor, used in kTrainScale
  Tensor pending_mask;  // per-forward QDrop keep-FP mask, cleared by caller

  double obs_min = 0, obs_max = 0;
  bool has_obs = false;
  bool capture = false;
  Tensor captured;

  Tensor apply(const Tensor& x);
};

struct BlockDef {
  enum Kind { kStem, kResidual, kNeck };
  Kind kind;
  std::string name;
  int input_index;            // -1 = images, else producing block index
  std::vector<int> conv_ids;  // main-path convs (residual: conv1, conv2)
  int skip_conv_id = -1;      // residual downsample, -1 = identity skip
  std::vector<int> act_ids;   // residual: {mid, out}; others: {out}
};

class ToyDetector {
 public:
  ToyDetector(const ToyDetectorConfig& cfg, uint64_t init_seed);

  const ToyDetectorConfig& config() const { return cfg_; }
  const std::vector<Box>& anchors() const { return anchors_; }
  int num_anchors() const { return int(anchors_.size()); }

  // ---- structure ----
  int num_blocks() const { return int(blocks_.size()); }
  const BlockDef& block(int i) const { return blocks_[size_t(i)]; }
  ConvUnit& conv(int id) { return convs_[size_t(id)]; }
  ActSite& act(int id) { return acts_[size_t(id)]; }
  const ActSite& act(int id) const { return acts_[size_t(id)]; }
  int num_convs() const { return int(convs_.size()); }
  int num_acts() const { return int(acts_.size()); }
  int act_index(const std::string& name) const;   // -1 if unknown
  int conv_index(const std::string& name) const;  // quantizable convs only
  std::vector<std::string> act_names() const;

  // All trainable parameters (backbone+neck+head) for the optimizer.
  std::vector<Tensor> parameters();
  void set_params_requires_grad(bool rg);

  // ---- forward ----
  Tensor forward_block(int bi, const Tensor& x);
  // Runs blocks [first_block, end); `outs` must hold valid outputs for every
  // block before first_block that later blocks read from.
  void forward_blocks_from(int first_block, std::vector<Tensor>& outs, const Tensor& images);
  std::vector<Tensor> forward_all_blocks(const Tensor& images);

  struct HeadOut { Tensor cls, box; };
  std::vector<HeadOut> forward_head(const std::vector<Tensor>& block_outs);

  // In-graph anchor-aligned views (for training losses).
  Tensor flat_cls_logits(const std::vector<HeadOut>& levels);  // [B, N, K+1]
  Tensor flat_box_offsets(const std::vector<HeadOut>& levels);  // [B, N, 4]

  // Value-only full pass: probabilities + offsets per anchor.
  DetectionOutput run(const Tensor& images);
  DetectionOutput run_from_block(int first_block, std::vector<Tensor>& outs);

  // Post-processing for evaluation: per-class NMS detections.
  std::vector<Box> detections(const DetectionOutput& out, int img, double score_thr = 0.05,
                              double nms_thr = 0.5, int max_dets = 100) const;

  // ---- quantization helpers ----
  void clear_quantization();
  std::vector<int> quantizable_conv_ids() const;  // execution order
  // first/last quantizable layer override (8-bit rule)
  int effective_weight_bits(int conv_id, int requested_bits) const;
  int effective_act_bits(int act_id, int requested_bits) const;

  // ---- serialization ----
  ModelContainer to_container() const;
  static ToyDetector from_container(const ModelContainer& m);

  Tensor images_tensor(const std::vector<std::vector<double>>& images) const;

 private:
  void build(uint64_t init_seed);
  int add_conv(const std::string& name, int cin, int cout, int k, int stride, int pad,
               Rng& rng);
  int add_act(const std::string& name);

  ToyDetectorConfig cfg_;
  std::vector<ConvUnit> convs_;
  std::vector<ActSite> acts_;
  std::vector<BlockDef> blocks_;
  // head (never quantized)
  Tensor head_w_, head_b_, cls_w_, cls_b_, box_w_, box_b_;
  std::vector<Box> anchors_;
  std::vector<int> level_grid_;  // grid side per level
};

}  // namespace detq
