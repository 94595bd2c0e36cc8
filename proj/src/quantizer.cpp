#include "detq/quantizer.hpp"

#include <algorithm>
#include <cmath>

namespace detq {

namespace {

constexpr double kDegenerateScale = 1e-8;

double nearest_even(double x) { return std::nearbyint(x); }

}  // namespace

void AffineQuantizer::validate() const {
  DETQ_CHECK(bits >= 2 && bits <= 50, "quantizer bits must be in [2, 50], got " << bits);
  DETQ_CHECK(!scale.empty() && scale.size() == zero_point.size(),
             "quantizer scale/zero_point size mismatch");
  for (size_t c = 0; c < scale.size(); ++c) {
    DETQ_CHECK(scale[c] > 0, "quantizer scale must be positive, channel " << c << " has "
                                                                          << scale[c]);
    DETQ_CHECK(zero_point[c] >= qmin() && zero_point[c] <= qmax(),
               "zero_point " << zero_point[c] << " outside [" << qmin() << ", " << qmax() << "]");
  }
}

AffineQuantizer minmax_from_range(double mn, double mx, int bits, bool is_signed) {
  DETQ_CHECK(mn <= mx, "minmax_from_range: min " << mn << " > max " << mx);
  AffineQuantizer q;
  q.granularity = Granularity::kPerTensor;
  q.bits = bits;
  q.is_signed = is_signed;
  // always keep zero representable
  mn = std::min(mn, 0.0);
  mx = std::max(mx, 0.0);
  double span = mx - mn;
  double s = span < 1e-300 ? kDegenerateScale : span / double(q.qmax() - q.qmin());
  int64_t z = int64_t(std::clamp(nearest_even(double(q.qmin()) - mn / s), double(q.qmin()),
                         double(q.qmax())));
  q.scale = {s};
  q.zero_point = {z};
  q.validate();
  return q;
}

AffineQuantizer init_minmax(const Tensor& x, int bits, bool is_signed, Granularity granularity) {
  DETQ_CHECK(x.numel() > 0, "init_minmax: empty tensor");
  if (granularity == Granularity::kPerTensor) {
    double mn = x.data()[0], mx = x.data()[0];
    for (int64_t i = 1; i < x.numel(); ++i) {
      mn = std::min(mn, x.data()[i]);
      mx = std::max(mx, x.data()[i]);
    }
    return minmax_from_range(mn, mx, bits, is_signed);
  }
  int channels = x.dim(0);
  int64_t per = x.numel() / channels;
  DETQ_CHECK(per > 0, "init_minmax: empty channel");
  AffineQuantizer q;
  q.granularity = Granularity::kPerChannel;
  q.bits = bits;
  q.is_signed = is_signed;
  for (int c = 0; c < channels; ++c) {
    const double* p = x.data() + int64_t(c) * per;
    double mn = p[0], mx = p[0];
    for (int64_t i = 1; i < per; ++i) {
      mn = std::min(mn, p[i]);
      mx = std::max(mx, p[i]);
    }
    AffineQuantizer one = minmax_from_range(mn, mx, bits, is_signed);
    q.scale.push_back(one.scale[0]);
    q.zero_point.push_back(one.zero_point[0]);
  }
  q.validate();
  return q;
}

AffineQuantizer init_symmetric_per_channel(const Tensor& w, int bits) {
  DETQ_CHECK(w.numel() > 0 && w.ndim() >= 1, "init_symmetric_per_channel: empty tensor");
  int channels = w.dim(0);
  int64_t per = w.numel() / channels;
  AffineQuantizer q;
  q.granularity = Granularity::kPerChannel;
  q.bits = bits;
  q.is_signed = true;
  for (int c = 0; c < channels; ++c) {
    const double* p = w.data() + int64_t(c) * per;
    double amax = 0;
    for (int64_t i = 0; i < per; ++i) amax = std::max(amax, std::fabs(p[i]));
    q.scale.push_back(amax < 1e-300 ? kDegenerateScale : amax / double(q.qmax()));
    q.zero_point.push_back(0);
  }
  q.validate();
  return q;
}

void fake_quantize_raw(const double* x, double* out, int64_t n, int64_t channel_stride,
                       const AffineQuantizer& q) {
  const double lo = q.qmin(), hi = q.qmax();
  for (int64_t i = 0; i < n; ++i) {
    int64_t c = q.granularity == Granularity::kPerTensor ? 0 : (i / channel_stride);
    double s = q.scale[size_t(c)];
    double z = q.zero_point[size_t(c)];
    double u = std::clamp(nearest_even(x[i] / s) + z, lo, hi);
    out[i] = (u - z) * s;
  }
}

Tensor fake_quantize(const Tensor& x, const AffineQuantizer& q) {
  q.validate();
  int64_t stride = 1;
  if (q.granularity == Granularity::kPerChannel) {
    DETQ_CHECK(x.ndim() >= 1 && x.dim(0) == q.channels(),
               "fake_quantize: tensor has " << x.dim(0) << " channels, quantizer has "
                                            << q.channels());
    stride = x.numel() / x.dim(0);
  }
  std::vector<double> out(size_t(x.numel()));
  fake_quantize_raw(x.data(), out.data(), x.numel(), stride, q);
  return Tensor::from_data(x.shape(), std::move(out));
}

Tensor fake_quantize_ste(const Tensor& x, const Tensor& scale, const AffineQuantizer& meta) {
  DETQ_CHECK(meta.granularity == Granularity::kPerTensor,
             "fake_quantize_ste supports per-tensor quantizers only");
  DETQ_CHECK(scale.numel() == 1, "fake_quantize_ste: scale must be a 1-element tensor");
  double s = scale.data()[0];
  DETQ_CHECK(s > 0, "fake_quantize_ste: scale must be positive, got " << s);
  const double z = meta.zero_point[0];
  const double lo = meta.qmin(), hi = meta.qmax();
  std::vector<double> out(size_t(x.numel()));
  for (int64_t i = 0; i < x.numel(); ++i) {
    double u = std::clamp(nearest_even(x.data()[i] / s) + z, lo, hi);
    out[size_t(i)] = (u - z) * s;
  }
  Tensor y = make_op_node("fake_quantize_ste", x.shape(), std::move(out), {x, scale}, nullptr);
  if (y.requires_grad()) {
    auto* yn = y.node().get();
    auto* xn = x.node().get();
    auto* sn = scale.node().get();
    y.node()->backprop = [yn, xn, sn, z, lo, hi]() {
      double s = sn->data[0];
      if (xn->requires_grad) xn->ensure_grad();
      double ds_acc = 0;
      for (size_t i = 0; i < xn->data.size(); ++i) {
        double g = yn->grad[i];
        double r = nearest_even(xn->data[i] / s);
        double u = r + z;
        if (u < lo) {
          ds_acc += g * (lo - z);
        } else if (u > hi) {
          ds_acc += g * (hi - z);
        } else {
          if (xn->requires_grad) xn->grad[i] += g;
          ds_acc += g * (r - xn->data[i] / s);
        }
      }
      if (sn->requires_grad) {
        sn->ensure_grad();
        sn->grad[0] += ds_acc;
      }
    };
  }
  return y;
}

double lp_loss(const Tensor& a, const Tensor& b, double p) {
  DETQ_CHECK(a.shape() == b.shape(), "lp_loss: shape mismatch");
  DETQ_CHECK(p >= 1.0, "lp loss requires p >= 1, got " << p);
  double acc = 0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    double ad = std::fabs(a.data()[i] - b.data()[i]);
    if (ad < 1e-12) continue;
    acc += std::exp(p * std::log(ad));
  }
  return acc == 0 ? 0.0 : std::exp(std::log(acc) / p);
}

double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b) {
  DETQ_CHECK(a.size() == b.size(), "cosine_similarity: size mismatch");
  double dot = 0, na = 0, nb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0 || nb == 0) return na == nb ? 1.0 : 0.0;
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

PerturbationReport perturbation(const Tensor& x, const AffineQuantizer& q) {
  q.validate();
  int64_t stride = 1;
  if (q.granularity == Granularity::kPerChannel) {
    DETQ_CHECK(x.dim(0) == q.channels(), "perturbation: channel mismatch");
    stride = x.numel() / x.dim(0);
  }
  PerturbationReport r;
  r.delta_round.resize(size_t(x.numel()));
  r.delta_clip.resize(size_t(x.numel()));
  r.delta_total.resize(size_t(x.numel()));
  int64_t clipped = 0;
  const double lo = q.qmin(), hi = q.qmax();
  for (int64_t i = 0; i < x.numel(); ++i) {
    int64_t c = q.granularity == Granularity::kPerTensor ? 0 : (i / stride);
    double s = q.scale[size_t(c)];
    double z = q.zero_point[size_t(c)];
    double xi = x.data()[i];
    double u = nearest_even(xi / s) + z;
    double xq = (std::clamp(u, lo, hi) - z) * s;
    r.delta_total[size_t(i)] = xi - xq;
    if (u < lo || u > hi) {
      ++clipped;
      r.delta_clip[size_t(i)] = xi - xq;
      r.delta_round[size_t(i)] = 0.0;
    } else {
      r.delta_clip[size_t(i)] = 0.0;
      r.delta_round[size_t(i)] = xi - xq;
    }
  }
  r.fraction_clipped = double(clipped) / double(x.numel());
  return r;
}

// ---- learned rounding --------------------------------------------------------

double rect_sigmoid(double v) {
  double h = 1.0 / (1.0 + std::exp(-v)) * (kRectZeta - kRectGamma) + kRectGamma;
  return std::clamp(h, 0.0, 1.0);
}

RoundingVars init_rounding(const Tensor& w, const AffineQuantizer& q) {
  q.validate();
  int64_t stride = q.granularity == Granularity::kPerChannel ? w.numel() / w.dim(0) : 1;
  std::vector<double> v(size_t(w.numel()));
  for (int64_t i = 0; i < w.numel(); ++i) {
    int64_t c = q.granularity == Granularity::kPerTensor ? 0 : (i / stride);
    double s = q.scale[size_t(c)];
    double frac = w.data()[i] / s - std::floor(w.data()[i] / s);
    double t = std::clamp((frac - kRectGamma) / (kRectZeta - kRectGamma), 1e-6, 1.0 - 1e-6);
    v[size_t(i)] = std::log(t / (1.0 - t));
  }
  RoundingVars rv;
  rv.v = Tensor::from_data(w.shape(), std::move(v), true);
  return rv;
}

Tensor soft_round_weight(const Tensor& w, const Tensor& v, const AffineQuantizer& q) {
  DETQ_CHECK(w.shape() == v.shape(), "soft_round_weight: v must be shaped like w");
  q.validate();
  int64_t stride = q.granularity == Granularity::kPerChannel ? w.numel() / w.dim(0) : 1;
  if (q.granularity == Granularity::kPerChannel)
    DETQ_CHECK(w.dim(0) == q.channels(), "soft_round_weight: channel mismatch");
  const double lo = q.qmin(), hi = q.qmax();
  std::vector<double> out(size_t(w.numel()));
  for (int64_t i = 0; i < w.numel(); ++i) {
    int64_t c = q.granularity == Granularity::kPerTensor ? 0 : (i / stride);
    double s = q.scale[size_t(c)];
    double z = q.zero_point[size_t(c)];
    double u = std::floor(w.data()[i] / s) + rect_sigmoid(v.data()[i]) + z;
    out[size_t(i)] = (std::clamp(u, lo, hi) - z) * s;
  }
  Tensor y = make_op_node("soft_round_weight", w.shape(), std::move(out), {w, v}, nullptr);
  if (y.requires_grad()) {
    auto* yn = y.node().get();
    auto* wn = w.node().get();
    auto* vn = v.node().get();
    auto qc = q;
    y.node()->backprop = [yn, wn, vn, qc, stride, lo, hi]() {
      if (!vn->requires_grad) return;
      vn->ensure_grad();
      for (size_t i = 0; i < vn->data.size(); ++i) {
        int64_t c = qc.granularity == Granularity::kPerTensor ? 0 : (int64_t(i) / stride);
        double s = qc.scale[size_t(c)];
        double z = qc.zero_point[size_t(c)];
        double sig = 1.0 / (1.0 + std::exp(-vn->data[i]));
        double h_raw = sig * (kRectZeta - kRectGamma) + kRectGamma;
        if (h_raw <= 0.0 || h_raw >= 1.0) continue;  // h saturated
        double u = std::floor(wn->data[i] / s) + h_raw + z;
        if (u < lo || u > hi) continue;  // clipped to the integer range
        double dh_dv = (kRectZeta - kRectGamma) * sig * (1.0 - sig);
        vn->grad[i] += yn->grad[i] * s * dh_dv;
      }
    };
  }
  return y;
}

Tensor rounding_regularizer_term(const Tensor& v, double beta) {
  DETQ_CHECK(beta >= 1.0, "rounding regularizer: beta must be >= 1");
  double acc = 0;
  for (int64_t i = 0; i < v.numel(); ++i)
    acc += 1.0 - std::pow(std::fabs(2.0 * rect_sigmoid(v.data()[i]) - 1.0), beta);
  Tensor y = make_op_node("rounding_regularizer", {1}, {acc}, {v}, nullptr);
  if (y.requires_grad()) {
    auto* yn = y.node().get();
    auto* vn = v.node().get();
    y.node()->backprop = [yn, vn, beta]() {
      if (!vn->requires_grad) return;
      vn->ensure_grad();
      for (size_t i = 0; i < vn->data.size(); ++i) {
        double sig = 1.0 / (1.0 + std::exp(-vn->data[i]));
        double h_raw = sig * (kRectZeta - kRectGamma) + kRectGamma;
        if (h_raw <= 0.0 || h_raw >= 1.0) continue;
        double t = 2.0 * h_raw - 1.0;
        double at = std::fabs(t);
        if (at < 1e-12) continue;
        double dh_dv = (kRectZeta - kRectGamma) * sig * (1.0 - sig);
        double d = -beta * std::pow(at, beta - 1.0) * (t > 0 ? 1.0 : -1.0) * 2.0 * dh_dv;
        vn->grad[i] += yn->grad[0] * d;
      }
    };
  }
  return y;
}

double rounding_reg_weight(double progress, double warmup) {
  DETQ_CHECK(progress >= 0.0 && progress <= 1.0, "progress must be in [0,1], got " << progress);
  return progress < warmup ? 0.0 : kRoundRegWeight;
}

double rounding_beta(double progress, double warmup) {
  DETQ_CHECK(progress >= 0.0 && progress <= 1.0, "progress must be in [0,1], got " << progress);
  if (progress <= warmup) return 20.0;
  double t = warmup >= 1.0 ? 1.0 : (progress - warmup) / (1.0 - warmup);
  return 20.0 + (2.0 - 20.0) * t;
}

void freeze_rounding(RoundingVars& rv) {
  for (int64_t i = 0; i < rv.v.numel(); ++i)
    rv.v.data()[i] = rect_sigmoid(rv.v.data()[i]) >= 0.5 ? 10.0 : -10.0;
  rv.frozen = true;
  rv.v.set_requires_grad(false);
}

std::vector<double> scale_grid(double s_max, int points) {
  DETQ_CHECK(s_max > 0 && points >= 1, "scale_grid: need positive s_max and points");
  std::vector<double> grid(static_cast<size_t>(points));
  for (int i = 0; i < points; ++i) grid[size_t(i)] = s_max * double(i + 1) / double(points);
  return grid;
}

int64_t zero_point_for_scale(double scale, double observed_min, int bits, bool is_signed) {
  AffineQuantizer q;
  q.bits = bits;
  q.is_signed = is_signed;
  observed_min = std::min(observed_min, 0.0);
  return int64_t(std::clamp(std::nearbyint(double(q.qmin()) - observed_min / scale),
                        double(q.qmin()), double(q.qmax())));
}

}  // namespace detq
