#include "detq/detector.hpp"

#include <algorithm>
#include <cmath>

#include "detq/rng.hpp"

using nlohmann::json;

namespace detq {

json ToyDetectorConfig::to_json() const {
  return json{{"input_size", input_size},
              {"in_channels", in_channels},
              {"stem_channels", stem_channels},
              {"stage2_channels", stage2_channels},
              {"neck_channels", neck_channels},
              {"head_channels", head_channels},
              {"num_classes", num_classes},
              {"strides", strides},
              {"anchor_sizes", anchor_sizes}};
}

ToyDetectorConfig ToyDetectorConfig::from_json(const json& j) {
  ToyDetectorConfig c;
  c.input_size = j.at("input_size").get<int>();
  c.in_channels = j.at("in_channels").get<int>();
  c.stem_channels = j.at("stem_channels").get<int>();
  c.stage2_channels = j.at("stage2_channels").get<int>();
  c.neck_channels = j.at("neck_channels").get<int>();
  c.head_channels = j.at("head_channels").get<int>();
  c.num_classes = j.at("num_classes").get<int>();
  c.strides = j.at("strides").get<std::vector<int>>();
  c.anchor_sizes = j.at("anchor_sizes").get<std::vector<std::vector<double>>>();
  return c;
}

Tensor ConvUnit::apply(const Tensor& x) const {
  if (soft_active) return conv2d(x, soft_round_weight(W, v, wq), b, stride, pad);
  if (wq_enabled) return conv2d(x, w_baked, b, stride, pad);
  return conv2d(x, W, b, stride, pad);
}

Tensor ActSite::apply(const Tensor& x) {
  if (mode == kObserve) {
    for (int64_t i = 0; i < x.numel(); ++i) {
      double v = x.data()[i];
      if (!has_obs || v < obs_min) obs_min = v;
      if (!has_obs || v > obs_max) obs_max = v;
      has_obs = true;
    }
    if (capture) captured = x.detach_copy();
    return x;
  }
  if (mode == kOff) return x;
  Tensor xq;
  if (mode == kFixed) {
    DETQ_CHECK(!(grad_enabled() && x.requires_grad()),
               "act site '" << name << "': fixed quantizer would break the gradient path");
    xq = fake_quantize(x, q);
  } else {
    xq = fake_quantize_ste(x, scale_param, q);
  }
  if (pending_mask.defined()) {
    DETQ_CHECK(pending_mask.shape() == x.shape(), "act site '" << name << "': mask shape mismatch");
    std::vector<double> inv(pending_mask.vec());
    for (double& v : inv) v = 1.0 - v;
    Tensor inv_mask = Tensor::from_data(pending_mask.shape(), std::move(inv));
    xq = add(mul(x, pending_mask), mul(xq, inv_mask));
  }
  return xq;
}

ToyDetector::ToyDetector(const ToyDetectorConfig& cfg, uint64_t init_seed) : cfg_(cfg) {
  DETQ_CHECK(cfg_.strides.size() == 2 && cfg_.anchor_sizes.size() == 2,
             "ToyDetector expects exactly two feature levels");
  for (int s : cfg_.strides)
    DETQ_CHECK(cfg_.input_size % s == 0, "stride " << s << " does not divide input size "
                                                   << cfg_.input_size);
  build(init_seed);
}

int ToyDetector::add_conv(const std::string& name, int cin, int cout, int k, int stride, int pad,
                          Rng& rng) {
  ConvUnit u;
  u.name = name;
  double std = std::sqrt(2.0 / double(cin * k * k));
  std::vector<double> w(size_t(cout) * cin * k * k);
  for (double& v : w) v = rng.normal(0.0, std);
  u.W = Tensor::from_data({cout, cin, k, k}, std::move(w), true);
  u.b = Tensor::zeros({cout}, true);
  u.stride = stride;
  u.pad = pad;
  convs_.push_back(std::move(u));
  return int(convs_.size()) - 1;
}

int ToyDetector::add_act(const std::string& name) {
  ActSite a;
  a.name = name;
  acts_.push_back(std::move(a));
  return int(acts_.size()) - 1;
}

void ToyDetector::build(uint64_t init_seed) {
  Rng rng(derive_seed(init_seed, "detector-init"));
  const int c1 = cfg_.stem_channels;
  const int c2 = cfg_.stage2_channels;

  auto residual = [&](const std::string& name, int cin, int cout, int stride, int input_index) {
    BlockDef b;
    b.kind = BlockDef::kResidual;
    b.name = name;
    b.input_index = input_index;
    b.conv_ids = {add_conv(name + ".conv1", cin, cout, 3, stride, 1, rng),
                  add_conv(name + ".conv2", cout, cout, 3, 1, 1, rng)};
    if (cin != cout || stride != 1)
      b.skip_conv_id = add_conv(name + ".skip", cin, cout, 1, stride, 0, rng);
    b.act_ids = {add_act(name + ".mid"), add_act(name + ".out")};
    blocks_.push_back(b);
  };

  {
    BlockDef b;
    b.kind = BlockDef::kStem;
    b.name = "stem";
    b.input_index = -1;
    b.conv_ids = {add_conv("stem.conv", cfg_.in_channels, c1, 3, 2, 1, rng)};
    b.act_ids = {add_act("stem.out")};
    blocks_.push_back(b);
  }
  residual("s1b1", c1, c1, 2, 0);
  residual("s1b2", c1, c1, 1, 1);
  residual("s2b1", c1, c2, 2, 2);
  residual("s2b2", c2, c2, 1, 3);
  {
    BlockDef b;
    b.kind = BlockDef::kNeck;
    b.name = "neck0";
    b.input_index = 2;  // stage-1 output feeds level 0
    b.conv_ids = {add_conv("neck0.conv", c1, cfg_.neck_channels, 3, 1, 1, rng)};
    b.act_ids = {add_act("neck0.out")};
    blocks_.push_back(b);
  }
  {
    BlockDef b;
    b.kind = BlockDef::kNeck;
    b.name = "neck1";
    b.input_index = 4;
    b.conv_ids = {add_conv("neck1.conv", c2, cfg_.neck_channels, 3, 1, 1, rng)};
    b.act_ids = {add_act("neck1.out")};
    blocks_.push_back(b);
  }

  const int A = cfg_.anchors_per_cell();
  const int C = cfg_.classes_with_bg();
  auto he = [&](int cin, int cout, int k) {
    double std = std::sqrt(2.0 / double(cin * k * k));
    std::vector<double> w(size_t(cout) * cin * k * k);
    for (double& v : w) v = rng.normal(0.0, std);
    return Tensor::from_data({cout, cin, k, k}, std::move(w), true);
  };
  head_w_ = he(cfg_.neck_channels, cfg_.head_channels, 3);
  head_b_ = Tensor::zeros({cfg_.head_channels}, true);
  cls_w_ = he(cfg_.head_channels, A * C, 1);
  // bias the background logit up so training starts from a quiet detector
  std::vector<double> cb(size_t(A) * C, 0.0);
  for (int a = 0; a < A; ++a) cb[size_t(a * C + cfg_.background_id())] = 4.0;
  cls_b_ = Tensor::from_data({A * C}, std::move(cb), true);
  box_w_ = he(cfg_.head_channels, A * 4, 1);
  box_b_ = Tensor::zeros({A * 4}, true);

  for (size_t lv = 0; lv < cfg_.strides.size(); ++lv) {
    int grid = cfg_.input_size / cfg_.strides[lv];
    level_grid_.push_back(grid);
    auto lv_anchors =
        generate_level_anchors(cfg_.strides[lv], grid, grid, cfg_.anchor_sizes[lv]);
    anchors_.insert(anchors_.end(), lv_anchors.begin(), lv_anchors.end());
  }
}

int ToyDetector::act_index(const std::string& name) const {
  for (size_t i = 0; i < acts_.size(); ++i)
    if (acts_[i].name == name) return int(i);
  return -1;
}

int ToyDetector::conv_index(const std::string& name) const {
  for (size_t i = 0; i < convs_.size(); ++i)
    if (convs_[i].name == name) return int(i);
  return -1;
}

std::vector<std::string> ToyDetector::act_names() const {
  std::vector<std::string> names;
  for (const auto& a : acts_) names.push_back(a.name);
  return names;
}

std::vector<Tensor> ToyDetector::parameters() {
  std::vector<Tensor> ps;
  for (auto& c : convs_) {
    ps.push_back(c.W);
    ps.push_back(c.b);
  }
  ps.push_back(head_w_);
  ps.push_back(head_b_);
  ps.push_back(cls_w_);
  ps.push_back(cls_b_);
  ps.push_back(box_w_);
  ps.push_back(box_b_);
  return ps;
}

void ToyDetector::set_params_requires_grad(bool rg) {
  for (auto& p : parameters()) p.set_requires_grad(rg);
}

Tensor ToyDetector::forward_block(int bi, const Tensor& x) {
  BlockDef& b = blocks_[size_t(bi)];
  switch (b.kind) {
    case BlockDef::kStem: {
      Tensor h = relu(convs_[size_t(b.conv_ids[0])].apply(x));
      h = max_pool2d(h, 2, 2);
      return acts_[size_t(b.act_ids[0])].apply(h);
    }
    case BlockDef::kResidual: {
      Tensor h = relu(convs_[size_t(b.conv_ids[0])].apply(x));
      h = acts_[size_t(b.act_ids[0])].apply(h);
      h = convs_[size_t(b.conv_ids[1])].apply(h);
      Tensor skip = b.skip_conv_id >= 0 ? convs_[size_t(b.skip_conv_id)].apply(x) : x;
      Tensor out = relu(add(h, skip));
      return acts_[size_t(b.act_ids[1])].apply(out);
    }
    case BlockDef::kNeck: {
      Tensor h = convs_[size_t(b.conv_ids[0])].apply(x);
      return acts_[size_t(b.act_ids[0])].apply(h);
    }
  }
  DETQ_CHECK(false, "unknown block kind");
  return {};
}

void ToyDetector::forward_blocks_from(int first_block, std::vector<Tensor>& outs,
                                      const Tensor& images) {
  outs.resize(size_t(num_blocks()));
  for (int bi = first_block; bi < num_blocks(); ++bi) {
    const BlockDef& b = blocks_[size_t(bi)];
    const Tensor& in = b.input_index < 0 ? images : outs[size_t(b.input_index)];
    DETQ_CHECK(in.defined(), "forward_blocks_from: missing input for block " << b.name);
    outs[size_t(bi)] = forward_block(bi, in);
  }
}

std::vector<Tensor> ToyDetector::forward_all_blocks(const Tensor& images) {
  std::vector<Tensor> outs;
  forward_blocks_from(0, outs, images);
  return outs;
}

std::vector<ToyDetector::HeadOut> ToyDetector::forward_head(const std::vector<Tensor>& outs) {
  std::vector<HeadOut> levels;
  int nb = num_blocks();
  for (int lv = 0; lv < 2; ++lv) {
    const Tensor& feat = outs[size_t(nb - 2 + lv)];
    Tensor h = relu(conv2d(feat, head_w_, head_b_, 1, 1));
    HeadOut ho;
    ho.cls = conv2d(h, cls_w_, cls_b_, 1, 0);
    ho.box = conv2d(h, box_w_, box_b_, 1, 0);
    levels.push_back(std::move(ho));
  }
  return levels;
}

namespace {

// [B, A*C, H, W] -> [B, H*W*A, C]
Tensor to_anchor_rows(const Tensor& t, int A, int C) {
  int B = t.dim(0), H = t.dim(2), W = t.dim(3);
  Tensor r = reshape(t, {B, A, C, H, W});
  r = permute(r, {0, 3, 4, 1, 2});
  return reshape(r, {B, H * W * A, C});
}

}  // namespace

Tensor ToyDetector::flat_cls_logits(const std::vector<HeadOut>& levels) {
  std::vector<Tensor> per;
  for (const auto& l : levels)
    per.push_back(to_anchor_rows(l.cls, cfg_.anchors_per_cell(), cfg_.classes_with_bg()));
  return concat(per, 1);
}

Tensor ToyDetector::flat_box_offsets(const std::vector<HeadOut>& levels) {
  std::vector<Tensor> per;
  for (const auto& l : levels) per.push_back(to_anchor_rows(l.box, cfg_.anchors_per_cell(), 4));
  return concat(per, 1);
}

DetectionOutput ToyDetector::run(const Tensor& images) {
  NoGradGuard ng;
  std::vector<Tensor> outs = forward_all_blocks(images);
  return run_from_block(num_blocks(), outs);
}

DetectionOutput ToyDetector::run_from_block(int first_block, std::vector<Tensor>& outs) {
  NoGradGuard ng;
  if (first_block < num_blocks()) forward_blocks_from(first_block, outs, Tensor());
  auto levels = forward_head(outs);
  Tensor logits = flat_cls_logits(levels);
  Tensor probs = softmax(logits, 2);
  Tensor offs = flat_box_offsets(levels);
  DetectionOutput out;
  out.batch = logits.dim(0);
  out.num_anchors = logits.dim(1);
  out.num_classes_with_bg = logits.dim(2);
  DETQ_CHECK(out.num_anchors == num_anchors(), "anchor count mismatch: head produced "
                                                   << out.num_anchors << ", expected "
                                                   << num_anchors());
  out.probs = probs.vec();
  out.offsets = offs.vec();
  return out;
}

std::vector<Box> ToyDetector::detections(const DetectionOutput& out, int img, double score_thr,
                                         double nms_thr, int max_dets) const {
  const int K = cfg_.num_classes;
  const double S = cfg_.input_size;
  std::vector<Box> result;
  for (int cls = 0; cls < K; ++cls) {
    std::vector<Box> cand;
    for (int a = 0; a < out.num_anchors; ++a) {
      double p = out.prob_row(img, a)[cls];
      if (p < score_thr) continue;
      Box b = decode_box(out.offset_row(img, a), anchors_[size_t(a)], S, S);
      b.class_id = cls;
      b.score = p;
      cand.push_back(b);
    }
    for (int idx : nms(cand, nms_thr)) result.push_back(cand[size_t(idx)]);
  }
  std::stable_sort(result.begin(), result.end(),
                   [](const Box& a, const Box& b) { return a.score > b.score; });
  if (int(result.size()) > max_dets) result.resize(size_t(max_dets));
  return result;
}

void ToyDetector::clear_quantization() {
  for (auto& c : convs_) {
    c.wq_enabled = false;
    c.soft_active = false;
    c.w_baked = Tensor();
    c.v = Tensor();
  }
  for (auto& a : acts_) {
    a.mode = ActSite::kOff;
    a.scale_param = Tensor();
    a.pending_mask = Tensor();
    a.has_obs = false;
    a.capture = false;
    a.captured = Tensor();
  }
}

std::vector<int> ToyDetector::quantizable_conv_ids() const {
  std::vector<int> ids(convs_.size());
  for (size_t i = 0; i < ids.size(); ++i) ids[i] = int(i);
  return ids;
}

int ToyDetector::effective_weight_bits(int conv_id, int requested_bits) const {
  // first and last quantizable layers stay at 8 bits minimum
  if (conv_id == 0 || conv_id == int(convs_.size()) - 1) return std::max(requested_bits, 8);
  return requested_bits;
}

int ToyDetector::effective_act_bits(int act_id, int requested_bits) const {
  if (act_id == 0 || act_id == int(acts_.size()) - 1) return std::max(requested_bits, 8);
  return requested_bits;
}

ModelContainer ToyDetector::to_container() const {
  ModelContainer m;
  m.arch = cfg_.to_json();
  for (const auto& c : convs_) {
    m.tensors.emplace(c.name + ".W", (c.wq_enabled ? c.w_baked : c.W).detach_copy());
    m.tensors.emplace(c.name + ".b", c.b.detach_copy());
    if (c.wq_enabled) m.quantizers.push_back({"weight:" + c.name, c.wq, /*baked=*/true});
  }
  m.tensors.emplace("head.conv.W", head_w_.detach_copy());
  m.tensors.emplace("head.conv.b", head_b_.detach_copy());
  m.tensors.emplace("head.cls.W", cls_w_.detach_copy());
  m.tensors.emplace("head.cls.b", cls_b_.detach_copy());
  m.tensors.emplace("head.box.W", box_w_.detach_copy());
  m.tensors.emplace("head.box.b", box_b_.detach_copy());
  for (const auto& a : acts_) {
    DETQ_CHECK(a.mode != ActSite::kTrainScale,
               "cannot serialize act site '" << a.name << "' while its scale is being optimized");
    if (a.mode == ActSite::kFixed) m.quantizers.push_back({"act:" + a.name, a.q, false});
  }
  return m;
}

ToyDetector ToyDetector::from_container(const ModelContainer& m) {
  ToyDetector d(ToyDetectorConfig::from_json(m.arch), /*init_seed=*/1);
  auto fetch = [&](const std::string& name) -> Tensor {
    auto it = m.tensors.find(name);
    DETQ_CHECK(it != m.tensors.end(), "model container missing tensor '" << name << "'");
    return it->second;
  };
  auto load_into = [&](Tensor& dst, const std::string& name) {
    Tensor src = fetch(name);
    DETQ_CHECK(src.shape() == dst.shape(), "tensor '" << name << "' shape mismatch");
    std::copy(src.data(), src.data() + src.numel(), dst.data());
  };
  for (auto& c : d.convs_) {
    load_into(c.W, c.name + ".W");
    load_into(c.b, c.name + ".b");
  }
  load_into(d.head_w_, "head.conv.W");
  load_into(d.head_b_, "head.conv.b");
  load_into(d.cls_w_, "head.cls.W");
  load_into(d.cls_b_, "head.cls.b");
  load_into(d.box_w_, "head.box.W");
  load_into(d.box_b_, "head.box.b");
  for (const auto& r : m.quantizers) {
    auto colon = r.site.find(':');
    DETQ_CHECK(colon != std::string::npos, "bad quantizer site '" << r.site << "'");
    std::string kind = r.site.substr(0, colon);
    std::string name = r.site.substr(colon + 1);
    if (kind == "weight") {
      int id = d.conv_index(name);
      DETQ_CHECK(id >= 0, "quantizer for unknown conv '" << name << "'");
      DETQ_CHECK(r.baked, "weight quantizer for '" << name << "' must be baked");
      auto& c = d.convs_[size_t(id)];
      c.wq_enabled = true;
      c.wq = r.q;
      c.w_baked = c.W.detach_copy();  // stored weights are already fake-quantized
    } else if (kind == "act") {
      int id = d.act_index(name);
      DETQ_CHECK(id >= 0, "quantizer for unknown act site '" << name << "'");
      auto& a = d.acts_[size_t(id)];
      a.mode = ActSite::kFixed;
      a.q = r.q;
    } else {
      DETQ_CHECK(false, "unknown quantizer site kind '" << kind << "'");
    }
  }
  return d;
}

Tensor ToyDetector::images_tensor(const std::vector<std::vector<double>>& images) const {
  DETQ_CHECK(!images.empty(), "images_tensor: empty batch");
  const int S = cfg_.input_size;
  const size_t per = size_t(cfg_.in_channels) * S * S;
  std::vector<double> data;
  data.reserve(images.size() * per);
  for (const auto& img : images) {
    DETQ_CHECK(img.size() == per, "images_tensor: image has " << img.size()
                                                              << " values, expected " << per);
    data.insert(data.end(), img.begin(), img.end());
  }
  return Tensor::from_data({int(images.size()), cfg_.in_channels, S, S}, std::move(data));
}

}  // namespace detq
