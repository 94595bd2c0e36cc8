#pragma once

#include <vector>

#include "detq/tensor.hpp"

namespace detq {

enum class Granularity { kPerTensor, kPerChannel };

// Uniform affine fake-quantization state. Per-tensor quantizers hold one
// scale/zero-point; per-channel quantizers hold one per output channel
// (channel = dim 0 of the tensor they quantize).
struct AffineQuantizer {
  Granularity granularity = Granularity::kPerTensor;
  int bits = 8;
  bool is_signed = false;
  std::vector<double> scale;
  std::vector<int64_t> zero_point;

  int64_t qmin() const { return is_signed ? -(int64_t(1) << (bits - 1)) : 0; }
  int64_t qmax() const { return is_signed ? (int64_t(1) << (bits - 1)) - 1 : (int64_t(1) << bits) - 1; }
  int channels() const { return int(scale.size()); }
  void validate() const;
};

// Asymmetric Min-Max calibration. The observed range is extended to include
// zero so the zero-point is always representable; an all-zero input falls
// back to scale epsilon.
AffineQuantizer init_minmax(const Tensor& x, int bits, bool is_signed,
                            Granularity granularity = Granularity::kPerTensor);
AffineQuantizer minmax_from_range(double mn, double mx, int bits, bool is_signed);

// Symmetric per-output-channel calibration (weight convention): z = 0,
// s = absmax / qmax.
AffineQuantizer init_symmetric_per_channel(const Tensor& w, int bits);

// Round/clip/dequantize. Value-only: the output never carries a grad path.
Tensor fake_quantize(const Tensor& x, const AffineQuantizer& q);
void fake_quantize_raw(const double* x, double* out, int64_t n, int64_t channel_stride,
                       const AffineQuantizer& q);

// Differentiable fake quantization for scale optimization. Forward equals
// fake_quantize with the scale taken from the 1-element tensor; backward is
// the straight-through rule for x and the LSQ-style rule for the scale:
//   in range:   dx = g,  ds += g * (round(x/s) - x/s)
//   clipped:    dx = 0,  ds += g * (n - z)  or  g * (m - z)
Tensor fake_quantize_ste(const Tensor& x, const Tensor& scale, const AffineQuantizer& meta);

// Rooted Lp distance (sum |a-b|^p)^(1/p); value only. The differentiable
// un-rooted objective is lp_pow_sum in tensor.hpp.
double lp_loss(const Tensor& a, const Tensor& b, double p);

double cosine_similarity(const std::vector<double>& a, const std::vector<double>& b);

// Decomposition of the quantization perturbation x - x^q into a clipping part
// (elements whose grid index lands outside [n, m]) and a rounding part.
struct PerturbationReport {
  std::vector<double> delta_round;
  std::vector<double> delta_clip;
  std::vector<double> delta_total;
  double fraction_clipped = 0.0;
};
PerturbationReport perturbation(const Tensor& x, const AffineQuantizer& q);

// ---- learned rounding -------------------------------------------------------

// Per-weight-element continuous rounding variables. h(v) relaxes the
// round-up/round-down decision; freezing hardens h to {0, 1}.
struct RoundingVars {
  Tensor v;
  bool frozen = false;
};

inline constexpr double kRectZeta = 1.1;
inline constexpr double kRectGamma = -0.1;
inline constexpr double kRoundRegWeight = 0.01;

double rect_sigmoid(double v);  // clip(sigmoid(v) * (zeta - gamma) + gamma, 0, 1)

// v initialized so that h(v) equals the fractional part of w/s.
RoundingVars init_rounding(const Tensor& w, const AffineQuantizer& q);

// (clip(floor(w/s) + h(v) + z, n, m) - z) * s, differentiable w.r.t. v.
Tensor soft_round_weight(const Tensor& w, const Tensor& v, const AffineQuantizer& q);

// sum(1 - |2 h(v) - 1|^beta), differentiable w.r.t. v.
Tensor rounding_regularizer_term(const Tensor& v, double beta);

// Regularizer schedule: weight is 0 until progress reaches warmup, then
// kRoundRegWeight; beta anneals linearly 20 -> 2 over the post-warmup span.
double rounding_reg_weight(double progress, double warmup);
double rounding_beta(double progress, double warmup);

void freeze_rounding(RoundingVars& rv);

// ---- scale search -----------------------------------------------------------

// Linear candidate grid: ratio (i+1)/points of s_max, i = 0..points-1, so the
// Min-Max scale is always the final candidate.
std::vector<double> scale_grid(double s_max, int points = 100);

// Re-derive the zero-point for a candidate scale so the observed minimum
// stays representable (per-tensor asymmetric convention).
int64_t zero_point_for_scale(double scale, double observed_min, int bits, bool is_signed);

}  // namespace detq
