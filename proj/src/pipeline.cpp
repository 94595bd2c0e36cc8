#include "detq/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>

#include "detq/map_eval.hpp"
#include "detq/rng.hpp"
#include "detq/trainer.hpp"

using nlohmann::json;

namespace detq {

MetricSpec MetricSpec::parse(const std::string& text) {
  MetricSpec m;
  if (text == "adaptive") m.kind = kAdaptive;
  else if (text == "minmax") m.kind = kMinMax;
  else if (text == "mse") m.kind = kMse;
  else if (text == "cosine") m.kind = kCosine;
  else if (text.rfind("lp:", 0) == 0) {
    m.kind = kFixedLp;
    try {
      m.p = std::stod(text.substr(3));
    } catch (...) {
      DETQ_CHECK(false, "bad metric '" << text << "': cannot parse p value");
    }
    DETQ_CHECK(m.p >= 1.0, "bad metric '" << text << "': p must be >= 1");
  } else {
    DETQ_CHECK(false, "unknown metric '" << text
                                         << "' (expected adaptive|minmax|mse|cosine|lp:<p>)");
  }
  return m;
}

std::string MetricSpec::str() const {
  switch (kind) {
    case kAdaptive: return "adaptive";
    case kMinMax: return "minmax";
    case kMse: return "mse";
    case kCosine: return "cosine";
    case kFixedLp: {
      char buf[32];
      std::snprintf(buf, sizeof buf, "lp:%g", p);
      return buf;
    }
  }
  return "?";
}

json PipelineConfig::to_json() const {
  return json{{"weight_bits", weight_bits},
              {"act_bits", act_bits},
              {"mode", mode == PtqMode::kSimple ? "simple" : "advanced"},
              {"metric", metric.str()},
              {"pgrid", pgrid},
              {"odol",
               {{"cls_fn", odol.cls_fn == ClsLossFn::kKl ? "kl" : "mse"},
                {"loc_fn", odol.loc_fn == LocLossFn::kL1 ? "l1" : "iou"},
                {"alpha", odol.alpha},
                {"score_threshold", odol.score_threshold},
                {"top_k", odol.top_k},
                {"nms_threshold", odol.nms_threshold}}},
              {"select_iters", select_iters},
              {"recon_iters", recon_iters},
              {"lr", lr},
              {"warmup", warmup},
              {"opt_batch", opt_batch},
              {"grid_points", grid_points},
              {"qdrop", qdrop},
              {"odol_subset", odol_subset},
              {"seed", seed}};
}

void PipelineConfig::validate(PtqMode m) const {
  DETQ_CHECK(weight_bits >= 2 && act_bits >= 2, "bit-widths must be >= 2");
  DETQ_CHECK(!pgrid.empty(), "empty p grid");
  for (size_t i = 0; i < pgrid.size(); ++i) {
    DETQ_CHECK(pgrid[i] >= 1.0, "p grid entries must be >= 1, got " << pgrid[i]);
    if (i) DETQ_CHECK(pgrid[i] > pgrid[i - 1], "p grid must be strictly increasing");
  }
  DETQ_CHECK(warmup >= 0 && warmup <= 1, "warmup must be in [0,1]");
  DETQ_CHECK(opt_batch >= 1 && grid_points >= 1 && select_iters >= 1 && recon_iters >= 1,
             "iteration counts must be positive");
  odol.validate();
  DETQ_CHECK(!(metric.kind == MetricSpec::kCosine && m == PtqMode::kAdvanced),
             "the cosine metric is a simple-PTQ baseline; use --mode simple");
}

std::vector<std::string> partition_blocks(const ToyDetector& model) {
  std::vector<std::string> names;
  for (int i = 0; i < model.num_blocks(); ++i) names.push_back(model.block(i).name);
  return names;
}

json QuantizationReport::to_json(const PipelineConfig& cfg) const {
  json jb = json::array();
  for (const auto& b : blocks) {
    json scales = json::array();
    for (const auto& [site, s] : b.act_scales) scales.push_back({{"site", site}, {"s", s}});
    json opp = json::array();
    for (const auto& [p, v] : b.odol_per_p) opp.push_back({{"p", p}, {"odol", v}});
    jb.push_back({{"name", b.name},
                  {"p_star", b.p_star},
                  {"odol_per_p", opp},
                  {"act_scales", scales}});
  }
  json j{{"format_version", 1},
         {"tool", {{"name", "detq"}, {"version", kVersion}}},
         {"seed", cfg.seed},
         {"config", cfg.to_json()},
         {"blocks", jb},
         {"warnings", warnings}};
  j["map_fp"] = map_fp ? json(*map_fp) : json(nullptr);
  j["map_q"] = map_q ? json(*map_q) : json(nullptr);
  j["l_perf"] = l_perf ? json(*l_perf) : json(nullptr);
  return j;
}

namespace {

Tensor slice_rows(const Tensor& t, int count) {
  if (count >= t.dim(0)) return t;
  Shape s = t.shape();
  int64_t row = t.numel() / s[0];
  s[0] = count;
  std::vector<double> d(t.data(), t.data() + int64_t(count) * row);
  return Tensor::from_data(s, std::move(d));
}

// Minibatch rows [start, start+count) with wraparound.
Tensor rotate_rows(const Tensor& t, int start, int count) {
  int n = t.dim(0);
  Shape s = t.shape();
  s[0] = count;
  int64_t row = t.numel() / n;
  std::vector<double> d;
  d.reserve(size_t(count) * size_t(row));
  for (int k = 0; k < count; ++k) {
    int idx = (start + k) % n;
    d.insert(d.end(), t.data() + idx * row, t.data() + (idx + 1) * row);
  }
  return Tensor::from_data(s, std::move(d));
}

double rooted(double pow_sum, double p) {
  return pow_sum <= 0 ? 0.0 : std::exp(std::log(pow_sum) / p);
}

double lp_objective(const Tensor& a, const Tensor& b, double p) {
  NoGradGuard ng;
  return lp_pow_sum(a, b, p).item();
}

// Per-output-channel MSE grid search for a weight tensor; candidate grids are
// bounded by the per-channel Min-Max (absmax) scale, ties keep the larger
// scale.
AffineQuantizer search_weight_scales(const Tensor& W, int bits, int points) {
  AffineQuantizer q = init_symmetric_per_channel(W, bits);
  const int OC = W.dim(0);
  const int64_t per = W.numel() / OC;
  AffineQuantizer probe;
  probe.granularity = Granularity::kPerTensor;
  probe.bits = bits;
  probe.is_signed = true;
  probe.zero_point = {0};
  for (int c = 0; c < OC; ++c) {
    const double* wc = W.data() + int64_t(c) * per;
    auto grid = scale_grid(q.scale[size_t(c)], points);
    double best_err = 0, best_s = 0;
    bool first = true;
    std::vector<double> buf(static_cast<size_t>(per));
    for (auto it = grid.rbegin(); it != grid.rend(); ++it) {
      probe.scale = {*it};
      fake_quantize_raw(wc, buf.data(), per, per, probe);
      double err = 0;
      for (int64_t i = 0; i < per; ++i) {
        double d = wc[i] - buf[size_t(i)];
        err += d * d;
      }
      if (first || err < best_err) {
        best_err = err;
        best_s = *it;
        first = false;
      }
    }
    q.scale[size_t(c)] = best_s;
  }
  return q;
}

struct OdolVariantSet {
  OdolBreakdown kl_l1, mse_l1, kl_iou, mse_iou;
};

OdolVariantSet odol_all_variants(const DetectionOutput& fp, const DetectionOutput& qo,
                                 const std::vector<PositiveSet>& pos,
                                 const std::vector<Box>& anchors, double img_size,
                                 const ODOLConfig& base) {
  OdolVariantSet v;
  ODOLConfig c = base;
  c.cls_fn = ClsLossFn::kKl;
  c.loc_fn = LocLossFn::kL1;
  c.alpha = ODOLConfig::default_alpha(LocLossFn::kL1);
  v.kl_l1 = odol(fp, qo, pos, anchors, img_size, c);
  c.cls_fn = ClsLossFn::kMse;
  v.mse_l1 = odol(fp, qo, pos, anchors, img_size, c);
  c.loc_fn = LocLossFn::kIou;
  c.alpha = ODOLConfig::default_alpha(LocLossFn::kIou);
  v.mse_iou = odol(fp, qo, pos, anchors, img_size, c);
  c.cls_fn = ClsLossFn::kKl;
  v.kl_iou = odol(fp, qo, pos, anchors, img_size, c);
  return v;
}

// Sequential block-wise calibration driver (one instance per quantize run).
class BlockwiseDriver {
 public:
  BlockwiseDriver(ToyDetector& model, const CalibrationSet& calib, const PipelineConfig& cfg)
      : model_(model), cfg_(cfg) {
    cfg_.validate(cfg.mode);
    DETQ_CHECK(!calib.images.empty(), "quantize_network: empty calibration set");
    images_ = model_.images_tensor(calib.images);
    n_calib_ = images_.dim(0);
    odol_n_ = cfg_.odol_subset > 0 ? std::min(cfg_.odol_subset, n_calib_) : n_calib_;
  }

  QuantizationReport run() {
    auto t_start = std::chrono::steady_clock::now();
    model_.clear_quantization();
    model_.set_params_requires_grad(false);

    // FP pass over the calibration set: final outputs and positive boxes
    {
      NoGradGuard ng;
      outs_ = model_.forward_all_blocks(images_);
      std::vector<Tensor> sub = sliced_outs(outs_, odol_n_);
      fp_final_ = model_.run_from_block(model_.num_blocks(), sub);
      for (int img = 0; img < odol_n_; ++img)
        positives_.push_back(select_positive_boxes(fp_final_, img, model_.anchors(),
                                                   model_.config().input_size, cfg_.odol));
    }

    for (int bi = 0; bi < model_.num_blocks(); ++bi) calibrate_block(bi);

    report_.wall_seconds =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t_start).count();
    return std::move(report_);
  }

 private:
  Tensor block_input(int bi) const {
    int src = model_.block(bi).input_index;
    return src < 0 ? images_ : outs_[size_t(src)];
  }

  std::vector<Tensor> sliced_outs(const std::vector<Tensor>& outs, int count) const {
    std::vector<Tensor> sub(outs.size());
    for (size_t i = 0; i < outs.size(); ++i)
      if (outs[i].defined()) sub[i] = slice_rows(outs[i], count);
    return sub;
  }

  // Forward the current partially quantized network to the head with the
  // candidate block output substituted, and measure the output loss.
  OdolBreakdown eval_odol(int bi, const Tensor& block_out) {
    NoGradGuard ng;
    std::vector<Tensor> sub = sliced_outs(outs_, odol_n_);
    sub[size_t(bi)] = slice_rows(block_out, odol_n_);
    DetectionOutput qo = model_.run_from_block(bi + 1, sub);
    return odol(fp_final_, qo, positives_, model_.anchors(), model_.config().input_size,
                cfg_.odol);
  }

  void observe_block_acts(int bi, const Tensor& X) {
    for (int aid : model_.block(bi).act_ids) {
      auto& s = model_.act(aid);
      s.mode = ActSite::kObserve;
      s.has_obs = false;
    }
    NoGradGuard ng;
    model_.forward_block(bi, X);
    for (int aid : model_.block(bi).act_ids) model_.act(aid).mode = ActSite::kOff;
  }

  AffineQuantizer site_minmax(int aid) const {
    const auto& s = model_.act(aid);
    DETQ_CHECK(s.has_obs, "act site '" << s.name << "' has no observed statistics");
    int bits = model_.effective_act_bits(aid, cfg_.act_bits);
    return minmax_from_range(s.obs_min, s.obs_max, bits, false);
  }

  void set_site_fixed(int aid, double scale) {
    auto& s = model_.act(aid);
    AffineQuantizer q = site_minmax(aid);
    q.scale[0] = scale;
    q.zero_point[0] = zero_point_for_scale(scale, std::min(s.obs_min, 0.0), q.bits, false);
    s.q = q;
    s.mode = ActSite::kFixed;
    s.scale_param = Tensor();
  }

  // Grid-search activation scales (simple mode / fallback): coordinate sweep
  // in site order from the Min-Max initialization, bounded above by s_max.
  // `score` maps (block_out) -> loss to minimize.
  template <typename ScoreFn>
  void grid_search_act_scales(int bi, const Tensor& X, ScoreFn score) {
    const auto& block = model_.block(bi);
    for (int aid : block.act_ids) set_site_fixed(aid, site_minmax(aid).scale[0]);
    NoGradGuard ng;
    for (size_t k = 0; k < block.act_ids.size(); ++k) {
      int aid = block.act_ids[k];
      auto& site = model_.act(aid);
      AffineQuantizer base = site_minmax(aid);
      auto grid = scale_grid(base.scale[0], cfg_.grid_points);
      bool is_output_site = (k + 1 == block.act_ids.size());
      Tensor pre;
      if (is_output_site) {
        site.mode = ActSite::kOff;
        pre = model_.forward_block(bi, X);
        site.mode = ActSite::kFixed;
      }
      double best = 0, best_s = 0;
      bool first = true;
      for (auto it = grid.rbegin(); it != grid.rend(); ++it) {
        set_site_fixed(aid, *it);
        Tensor out = is_output_site ? fake_quantize(pre, model_.act(aid).q)
                                    : model_.forward_block(bi, X);
        double loss = score(out);
        if (first || loss < best) {
          best = loss;
          best_s = *it;
          first = false;
        }
      }
      set_site_fixed(aid, best_s);
    }
  }

  // Adam/STE optimization of the block's activation scales against the
  // un-rooted Lp objective. Returns false when the loss went non-finite (the
  // caller falls back to grid search).
  bool adam_act_scales(int bi, const Tensor& X, const Tensor& O, double p, int iters) {
    const auto& block = model_.block(bi);
    std::vector<Tensor> params;
    for (int aid : block.act_ids) {
      auto& s = model_.act(aid);
      AffineQuantizer q = site_minmax(aid);
      s.q = q;
      s.scale_param = Tensor::scalar(q.scale[0], true);
      s.mode = ActSite::kTrainScale;
      params.push_back(s.scale_param);
    }
    AdamState opt;
    opt.lr = cfg_.lr;
    opt.init(params);
    bool ok = true;
    for (int it = 0; it < iters && ok; ++it) {
      int start = (it * cfg_.opt_batch) % n_calib_;
      Tensor Xb = rotate_rows(X, start, std::min(cfg_.opt_batch, n_calib_));
      Tensor Ob = rotate_rows(O, start, std::min(cfg_.opt_batch, n_calib_));
      Tensor out = model_.forward_block(bi, Xb);
      Tensor loss = lp_pow_sum(out, Ob, p);
      if (!std::isfinite(loss.item())) {
        ok = false;
        break;
      }
      for (auto& prm : params) prm.zero_grad();
      backward(loss);
      adam_step(params, opt);
      for (auto& prm : params) prm.data()[0] = std::max(prm.data()[0], 1e-9);
    }
    if (ok) {
      for (int aid : block.act_ids) set_site_fixed(aid, model_.act(aid).scale_param.item());
    } else {
      for (int aid : block.act_ids) model_.act(aid).mode = ActSite::kOff;
    }
    return ok;
  }

  // Eq-style inner problem: optimal activation scales for a given p, weights
  // left in full precision. Returns the rooted final loss.
  double optimize_act_scales(int bi, const Tensor& X, const Tensor& O, double p) {
    bool use_adam = cfg_.mode == PtqMode::kAdvanced;
    if (use_adam) {
      if (!adam_act_scales(bi, X, O, p, cfg_.select_iters)) {
        report_.warnings.push_back("block " + model_.block(bi).name +
                                   ": scale optimization diverged, using grid search");
        use_adam = false;
      }
    }
    if (!use_adam) {
      grid_search_act_scales(bi, X, [&](const Tensor& out) { return lp_objective(out, O, p); });
    }
    NoGradGuard ng;
    Tensor out = model_.forward_block(bi, X);
    return rooted(lp_pow_sum(out, O, p).item(), p);
  }

  double select_p(int bi, const Tensor& X, const Tensor& O, BlockReport& br) {
    double best_p = cfg_.pgrid.front();
    double best_odol = 0;
    bool first = true;
    for (double p : cfg_.pgrid) {
      auto t0 = std::chrono::steady_clock::now();
      double final_lp = optimize_act_scales(bi, X, O, p);
      OdolBreakdown ob;
      {
        NoGradGuard ng;
        ob = eval_odol(bi, model_.forward_block(bi, X));
      }
      double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
      report_.traces.push_back(
          {model_.block(bi).name, p, ob.total, ob.cls_term, ob.loc_term, final_lp, secs});
      br.odol_per_p.emplace_back(p, ob.total);
      DETQ_CHECK(std::isfinite(ob.total), "block " << model_.block(bi).name
                                                   << ": output loss is not finite for p = " << p);
      if (first || ob.total < best_odol - 1e-12) {  // ties keep the smaller p
        best_odol = ob.total;
        best_p = p;
        first = false;
      }
    }
    return best_p;
  }

  void quantize_block_weights(int bi) {
    const auto& block = model_.block(bi);
    std::vector<int> conv_ids = block.conv_ids;
    if (block.skip_conv_id >= 0) conv_ids.push_back(block.skip_conv_id);
    for (int cid : conv_ids) {
      auto& c = model_.conv(cid);
      int bits = model_.effective_weight_bits(cid, cfg_.weight_bits);
      c.wq = cfg_.metric.kind == MetricSpec::kMinMax
                 ? init_symmetric_per_channel(c.W, bits)
                 : search_weight_scales(c.W, bits, cfg_.grid_points);
      c.w_baked = fake_quantize(c.W, c.wq);
      c.wq_enabled = true;
    }
  }

  void reconstruct_block(int bi, const Tensor& X, const Tensor& O, double p_star) {
    const auto& block = model_.block(bi);
    quantize_block_weights(bi);

    if (cfg_.metric.kind == MetricSpec::kMinMax) {
      for (int aid : block.act_ids) set_site_fixed(aid, site_minmax(aid).scale[0]);
      return;
    }

    if (cfg_.mode == PtqMode::kSimple) {
      if (cfg_.metric.kind == MetricSpec::kCosine) {
        grid_search_act_scales(bi, X, [&](const Tensor& out) {
          return -cosine_similarity(out.vec(), O.vec());
        });
      } else {
        grid_search_act_scales(bi, X,
                               [&](const Tensor& out) { return lp_objective(out, O, p_star); });
      }
      return;
    }

    // advanced: joint activation-scale + rounding-variable optimization
    std::vector<int> conv_ids = block.conv_ids;
    if (block.skip_conv_id >= 0) conv_ids.push_back(block.skip_conv_id);
    std::vector<Tensor> params;
    std::vector<RoundingVars> rvs(conv_ids.size());
    for (size_t k = 0; k < conv_ids.size(); ++k) {
      auto& c = model_.conv(conv_ids[k]);
      rvs[k] = init_rounding(c.W, c.wq);
      c.v = rvs[k].v;
      c.soft_active = true;
      c.wq_enabled = false;
      params.push_back(rvs[k].v);
    }
    for (int aid : block.act_ids) {
      auto& s = model_.act(aid);
      AffineQuantizer q = site_minmax(aid);
      s.q = q;
      s.scale_param = Tensor::scalar(q.scale[0], true);
      s.mode = ActSite::kTrainScale;
      params.push_back(s.scale_param);
    }
    AdamState opt;
    opt.lr = cfg_.lr;
    opt.init(params);
    Rng drop_rng(derive_seed(cfg_.seed, "qdrop", uint64_t(bi)));
    bool ok = true;
    for (int it = 0; it < cfg_.recon_iters; ++it) {
      double progress = double(it) / double(cfg_.recon_iters);
      int start = (it * cfg_.opt_batch) % n_calib_;
      int bsz = std::min(cfg_.opt_batch, n_calib_);
      Tensor Xb = rotate_rows(X, start, bsz);
      Tensor Ob = rotate_rows(O, start, bsz);
      if (cfg_.qdrop) {
        // each activation element independently keeps its FP value with p=0.5
        for (int aid : block.act_ids) {
          auto& site = model_.act(aid);
          site.pending_mask = Tensor();  // regenerated per shape below
          site.q.validate();
        }
      }
      Tensor out;
      if (cfg_.qdrop) {
        out = forward_block_with_qdrop(bi, Xb, drop_rng);
      } else {
        out = model_.forward_block(bi, Xb);
      }
      Tensor loss = lp_pow_sum(out, Ob, p_star);
      double lambda = rounding_reg_weight(progress, cfg_.warmup);
      if (lambda > 0) {
        double beta = rounding_beta(progress, cfg_.warmup);
        Tensor reg = Tensor::scalar(0.0);
        for (auto& rv : rvs) reg = add(reg, rounding_regularizer_term(rv.v, beta));
        loss = add(loss, mul_scalar(reg, lambda));
      }
      DETQ_CHECK(std::isfinite(loss.item()), "block " << block.name
                                                      << ": reconstruction loss went non-finite"
                                                      << " at iteration " << it);
      for (auto& prm : params) prm.zero_grad();
      backward(loss);
      adam_step(params, opt);
      for (int aid : block.act_ids) {
        auto& s = model_.act(aid);
        s.scale_param.data()[0] = std::max(s.scale_param.data()[0], 1e-9);
      }
    }
    (void)ok;
    // freeze rounding and bake the quantized weights
    for (size_t k = 0; k < conv_ids.size(); ++k) {
      auto& c = model_.conv(conv_ids[k]);
      freeze_rounding(rvs[k]);
      {
        NoGradGuard ng;
        c.w_baked = soft_round_weight(c.W, rvs[k].v, c.wq).detach_copy();
      }
      c.soft_active = false;
      c.v = Tensor();
      c.wq_enabled = true;
    }
    for (int aid : block.act_ids) {
      auto& s = model_.act(aid);
      set_site_fixed(aid, s.scale_param.item());
      s.pending_mask = Tensor();
    }
  }

  Tensor forward_block_with_qdrop(int bi, const Tensor& Xb, Rng& rng) {
    // masks are provided through pending_mask; sites consume them in apply().
    // Shapes vary per site, so run a shape probe first.
    const auto& block = model_.block(bi);
    std::vector<Shape> shapes;
    {
      NoGradGuard ng;
      for (int aid : block.act_ids) model_.act(aid).capture = true;
      for (int aid : block.act_ids) model_.act(aid).pending_mask = Tensor();
      auto saved_modes = std::vector<ActSite::Mode>();
      for (int aid : block.act_ids) {
        saved_modes.push_back(model_.act(aid).mode);
        model_.act(aid).mode = ActSite::kObserve;
      }
      model_.forward_block(bi, Xb);
      for (size_t k = 0; k < block.act_ids.size(); ++k) {
        auto& s = model_.act(block.act_ids[k]);
        shapes.push_back(s.captured.shape());
        s.capture = false;
        s.captured = Tensor();
        s.mode = saved_modes[k];
      }
    }
    for (size_t k = 0; k < block.act_ids.size(); ++k) {
      auto& s = model_.act(block.act_ids[k]);
      std::vector<double> mask(size_t(shape_numel(shapes[k])));
      for (double& v : mask) v = rng.uniform() < 0.5 ? 1.0 : 0.0;
      s.pending_mask = Tensor::from_data(shapes[k], std::move(mask));
    }
    Tensor out = model_.forward_block(bi, Xb);
    for (int aid : block.act_ids) model_.act(aid).pending_mask = Tensor();
    return out;
  }

  void calibrate_block(int bi) {
    const auto& block = model_.block(bi);
    Tensor X = block_input(bi);
    Tensor O;
    {
      NoGradGuard ng;
      O = model_.forward_block(bi, X);  // FP reference on the quantized-prefix input
    }
    observe_block_acts(bi, X);

    BlockReport br;
    br.name = block.name;
    double p_star;
    switch (cfg_.metric.kind) {
      case MetricSpec::kAdaptive:
        p_star = select_p(bi, X, O, br);
        // p selection used FP weights; reconstruction restarts from scratch
        for (int aid : block.act_ids) model_.act(aid).mode = ActSite::kOff;
        break;
      case MetricSpec::kMse: p_star = 2.0; break;
      case MetricSpec::kFixedLp: p_star = cfg_.metric.p; break;
      default: p_star = 2.0; break;  // minmax / cosine ignore p
    }
    reconstruct_block(bi, X, O, p_star);
    br.p_star = p_star;
    for (int aid : block.act_ids) {
      const auto& s = model_.act(aid);
      DETQ_CHECK(s.mode == ActSite::kFixed, "block " << block.name
                                                     << " left site in non-final state");
      br.act_scales.emplace_back(s.name, s.q.scale[0]);
    }
    report_.blocks.push_back(std::move(br));

    // propagate: the quantized block output becomes the next input
    NoGradGuard ng;
    outs_[size_t(bi)] = model_.forward_block(bi, X);
  }

  ToyDetector& model_;
  PipelineConfig cfg_;
  Tensor images_;
  int n_calib_ = 0;
  int odol_n_ = 0;
  std::vector<Tensor> outs_;
  DetectionOutput fp_final_;
  std::vector<PositiveSet> positives_;
  QuantizationReport report_;
};

}  // namespace

QuantizationReport quantize_network(ToyDetector& model, const CalibrationSet& calib,
                                    const PipelineConfig& cfg) {
  BlockwiseDriver driver(model, calib, cfg);
  return driver.run();
}

double performance_loss(double map_fp, ToyDetector& quantized, const Dataset& val) {
  return map_fp - evaluate_model_map(quantized, val);
}

// ---- probing ----------------------------------------------------------------

namespace {

struct SiteProbe {
  int aid = -1;
  Tensor activations;  // FP values at the site over the calibration set
  double mn = 0, mx = 0;
};

SiteProbe capture_site(ToyDetector& model, const Tensor& images, const std::string& act_site) {
  int aid = model.act_index(act_site);
  DETQ_CHECK(aid >= 0, "unknown activation site '" << act_site << "'");
  auto& s = model.act(aid);
  s.mode = ActSite::kObserve;
  s.has_obs = false;
  s.capture = true;
  {
    NoGradGuard ng;
    model.forward_all_blocks(images);
  }
  SiteProbe p;
  p.aid = aid;
  p.activations = s.captured;
  p.mn = s.obs_min;
  p.mx = s.obs_max;
  s.mode = ActSite::kOff;
  s.capture = false;
  s.captured = Tensor();
  return p;
}

void set_probe_site(ToyDetector& model, int aid, double mn, int bits, double scale) {
  auto& s = model.act(aid);
  AffineQuantizer q;
  q.granularity = Granularity::kPerTensor;
  q.bits = bits;
  q.is_signed = false;
  q.scale = {scale};
  q.zero_point = {zero_point_for_scale(scale, std::min(mn, 0.0), bits, false)};
  s.q = q;
  s.mode = ActSite::kFixed;
}

}  // namespace

std::vector<ProbeRow> probe_layer(ToyDetector& model, const CalibrationSet& calib,
                                  const Dataset& val, const std::string& act_site, int act_bits,
                                  const std::vector<MetricSpec>& metrics) {
  DETQ_CHECK(!metrics.empty(), "probe_layer: no metrics requested");
  model.clear_quantization();
  Tensor images = model.images_tensor(calib.images);
  SiteProbe probe = capture_site(model, images, act_site);
  double map_fp = evaluate_model_map(model, val);

  AffineQuantizer minmax_q = minmax_from_range(probe.mn, probe.mx, act_bits, false);
  double s_max = minmax_q.scale[0];
  auto grid = scale_grid(s_max, 100);

  std::vector<ProbeRow> rows;
  for (const auto& metric : metrics) {
    double chosen;
    if (metric.kind == MetricSpec::kMinMax) {
      chosen = s_max;
    } else {
      double p;
      switch (metric.kind) {
        case MetricSpec::kMse: p = 2.0; break;
        case MetricSpec::kFixedLp: p = metric.p; break;
        default:
          DETQ_CHECK(false, "probe_layer: metric '" << metric.str()
                                                    << "' not supported for probing");
      }
      AffineQuantizer q = minmax_q;
      double best = 0;
      bool first = true;
      chosen = s_max;
      std::vector<double> buf(size_t(probe.activations.numel()));
      for (auto it = grid.rbegin(); it != grid.rend(); ++it) {
        q.scale[0] = *it;
        q.zero_point[0] = zero_point_for_scale(*it, std::min(probe.mn, 0.0), act_bits, false);
        fake_quantize_raw(probe.activations.data(), buf.data(), probe.activations.numel(), 1, q);
        double loss = 0;
        for (int64_t i = 0; i < probe.activations.numel(); ++i) {
          double ad = std::fabs(probe.activations.data()[i] - buf[size_t(i)]);
          if (ad >= 1e-12) loss += std::exp(p * std::log(ad));
        }
        if (first || loss < best) {
          best = loss;
          chosen = *it;
          first = false;
        }
      }
    }
    set_probe_site(model, probe.aid, probe.mn, act_bits, chosen);
    double map_q = evaluate_model_map(model, val);
    model.act(probe.aid).mode = ActSite::kOff;
    rows.push_back({act_site, metric.str(), chosen, map_fp - map_q});
  }
  model.clear_quantization();
  return rows;
}

SweepResult scale_sweep(ToyDetector& model, const CalibrationSet& calib, const Dataset& val,
                        const std::string& act_site, int act_bits, int points,
                        const std::vector<double>& pgrid, const ODOLConfig& odol_base) {
  DETQ_CHECK(points >= 2, "scale_sweep: need at least two points");
  model.clear_quantization();
  Tensor images = model.images_tensor(calib.images);
  SiteProbe probe = capture_site(model, images, act_site);
  double map_fp = evaluate_model_map(model, val);

  DetectionOutput fp_out = model.run(images);
  std::vector<PositiveSet> positives;
  for (int img = 0; img < images.dim(0); ++img)
    positives.push_back(select_positive_boxes(fp_out, img, model.anchors(),
                                              model.config().input_size, odol_base));

  double s_max = minmax_from_range(probe.mn, probe.mx, act_bits, false).scale[0];
  auto grid = scale_grid(s_max, points);

  SweepResult res;
  res.pgrid = pgrid;
  std::vector<double> buf(size_t(probe.activations.numel()));
  for (double s : grid) {
    SweepRow row;
    row.scale = s;
    row.s_ratio = s / s_max;
    AffineQuantizer q;
    q.granularity = Granularity::kPerTensor;
    q.bits = act_bits;
    q.is_signed = false;
    q.scale = {s};
    q.zero_point = {zero_point_for_scale(s, std::min(probe.mn, 0.0), act_bits, false)};
    fake_quantize_raw(probe.activations.data(), buf.data(), probe.activations.numel(), 1, q);
    for (double p : pgrid) {
      double loss = 0;
      for (int64_t i = 0; i < probe.activations.numel(); ++i) {
        double ad = std::fabs(probe.activations.data()[i] - buf[size_t(i)]);
        if (ad >= 1e-12) loss += std::exp(p * std::log(ad));
      }
      row.lp.push_back(loss);
    }
    set_probe_site(model, probe.aid, probe.mn, act_bits, s);
    DetectionOutput qo = model.run(images);
    auto variants = odol_all_variants(fp_out, qo, positives, model.anchors(),
                                      model.config().input_size, odol_base);
    row.odol_kl_l1 = variants.kl_l1.total;
    row.odol_mse_l1 = variants.mse_l1.total;
    row.odol_kl_iou = variants.kl_iou.total;
    row.odol_mse_iou = variants.mse_iou.total;
    row.l_perf = map_fp - evaluate_model_map(model, val);
    model.act(probe.aid).mode = ActSite::kOff;
    res.rows.push_back(std::move(row));
  }
  model.clear_quantization();
  return res;
}

}  // namespace detq
