#include "detq/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <unordered_set>

namespace detq {

int64_t shape_numel(const Shape& s) {
  int64_t n = 1;
  for (int d : s) {
    DETQ_CHECK(d >= 0, "negative extent " << d << " in shape " << shape_str(s));
    n *= d;
  }
  return n;
}

std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace {

thread_local bool g_grad_enabled = true;
bool g_finite_checks = false;

void check_finite(const std::vector<double>& v, const char* what) {
  for (double x : v) {
    DETQ_CHECK(std::isfinite(x), "non-finite value in " << what);
  }
}

std::shared_ptr<TensorNode> new_leaf(Shape shape, std::vector<double> data, bool rg) {
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->requires_grad = rg;
  if (rg) n->ensure_grad();
  return n;
}

}  // namespace

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

void set_finite_checks(bool on) { g_finite_checks = on; }
bool finite_checks() { return g_finite_checks; }

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  return Tensor(new_leaf(shape, std::vector<double>(size_t(shape_numel(shape)), 0.0),
                         requires_grad));
}

Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
  DETQ_CHECK(std::isfinite(value), "non-finite fill value");
  return Tensor(new_leaf(shape, std::vector<double>(size_t(shape_numel(shape)), value),
                         requires_grad));
}

Tensor Tensor::from_data(const Shape& shape, std::vector<double> data, bool requires_grad) {
  DETQ_CHECK(int64_t(data.size()) == shape_numel(shape),
             "data length " << data.size() << " does not match shape " << shape_str(shape));
  check_finite(data, "tensor construction");
  return Tensor(new_leaf(shape, std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from_data({1}, {value}, requires_grad);
}

void Tensor::set_requires_grad(bool rg) {
  DETQ_CHECK(node_->is_leaf, "requires_grad can only be toggled on leaves");
  node_->requires_grad = rg;
  if (rg) node_->ensure_grad();
  else node_->grad.clear();
}

double Tensor::item() const {
  DETQ_CHECK(numel() == 1, "item() on non-scalar tensor of shape " << shape_str(shape()));
  return node_->data[0];
}

Tensor Tensor::detach_copy() const {
  return Tensor(new_leaf(node_->shape, node_->data, false));
}

Tensor make_op_node(const char* op, Shape shape, std::vector<double> data,
                    std::vector<Tensor> inputs, std::function<void()>*) {
  DETQ_CHECK(int64_t(data.size()) == shape_numel(shape),
             op << ": output size mismatch for shape " << shape_str(shape));
  if (g_finite_checks) check_finite(data, op);
  auto n = std::make_shared<TensorNode>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->op = op;
  bool rg = false;
  if (g_grad_enabled) {
    for (const auto& t : inputs)
      if (t.requires_grad()) rg = true;
  }
  n->requires_grad = rg;
  n->is_leaf = false;
  if (rg) {
    for (auto& t : inputs) n->parents.push_back(t.node());
  }
  return Tensor(std::move(n));
}

namespace {

// Deterministic GEMM: C[M,N] += A[M,K] * B[K,N]. Each C element accumulates
// in ascending-k program order; the inner j loop is contiguous and
// auto-vectorizes without reassociating any single element's sum.
void gemm_acc(double* C, const double* A, const double* B, int M, int K, int N) {
  for (int i = 0; i < M; ++i) {
    double* Ci = C + int64_t(i) * N;
    const double* Ai = A + int64_t(i) * K;
    for (int k = 0; k < K; ++k) {
      const double a = Ai[k];
      const double* Bk = B + int64_t(k) * N;
      for (int j = 0; j < N; ++j) Ci[j] += a * Bk[j];
    }
  }
}

void transpose_mat(std::vector<double>& out, const double* in, int rows, int cols) {
  out.resize(size_t(rows) * cols);
  for (int r = 0; r < rows; ++r)
    for (int c = 0; c < cols; ++c) out[size_t(c) * rows + r] = in[size_t(r) * cols + c];
}

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape() == b.shape(); }

bool wants_grad(const Tensor& t) { return g_grad_enabled && t.requires_grad(); }

}  // namespace

// ---- elementwise ------------------------------------------------------------

Tensor relu(const Tensor& x) {
  std::vector<double> out(x.vec());
  for (double& v : out) v = v > 0 ? v : 0.0;
  Tensor y = make_op_node("relu", x.shape(), std::move(out), {x}, nullptr);
  if (y.requires_grad()) {
    auto* yn = y.node().get();
    auto* xn = x.node().get();
    y.node()->backprop = [yn, xn]() {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (size_t i = 0; i < xn->data.size(); ++i)
        if (xn->data[i] > 0) xn->grad[i] += yn->grad[i];
    };
  }
  return y;
}

Tensor sigmoid(const Tensor& x) {
  std::vector<double> out(x.vec());
  for (double& v : out) v = 1.0 / (1.0 + std::exp(-v));
  Tensor y = make_op_node("sigmoid", x.shape(), std::move(out), {x}, nullptr);
  if (y.requires_grad()) {
    auto* yn = y.node().get();
    auto* xn = x.node().get();
    y.node()->backprop = [yn, xn]() {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (size_t i = 0; i < xn->data.size(); ++i) {
        double s = yn->data[i];
        xn->grad[i] += yn->grad[i] * s * (1.0 - s);
      }
    };
  }
  return y;
}

Tensor add(const Tensor& a, const Tensor& b) {
  DETQ_CHECK(same_shape(a, b), "add: shape mismatch " << shape_str(a.shape()) << " vs "
                                                      << shape_str(b.shape()));
  std::vector<double> out(a.vec());
  const double* bp = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] += bp[i];
  Tensor y = make_op_node("add", a.shape(), std::move(out), {a, b}, nullptr);
  if (y.requires_grad()) {
    auto* yn = y.node().get();
    auto* an = a.node().get();
    auto* bn = b.node().get();
    y.node()->backprop = [yn, an, bn]() {
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += yn->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < bn->grad.size(); ++i) bn->grad[i] += yn->grad[i];
      }
    };
  }
  return y;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  DETQ_CHECK(same_shape(a, b), "sub: shape mismatch " << shape_str(a.shape()) << " vs "
                                                      << shape_str(b.shape()));
  std::vector<double> out(a.vec());
  const double* bp = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] -= bp[i];
  Tensor y = make_op_node("sub", a.shape(), std::move(out), {a, b}, nullptr);
  if (y.requires_grad()) {
    auto* yn = y.node().get();
    auto* an = a.node().get();
    auto* bn = b.node().get();
    y.node()->backprop = [yn, an, bn]() {
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += yn->grad[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < bn->grad.size(); ++i) bn->grad[i] -= yn->grad[i];
      }
    };
  }
  return y;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  DETQ_CHECK(same_shape(a, b), "mul: shape mismatch " << shape_str(a.shape()) << " vs "
                                                      << shape_str(b.shape()));
  std::vector<double> out(a.vec());
  const double* bp = b.data();
  for (size_t i = 0; i < out.size(); ++i) out[i] *= bp[i];
  Tensor y = make_op_node("mul", a.shape(), std::move(out), {a, b}, nullptr);
  if (y.requires_grad()) {
    auto* yn = y.node().get();
    auto* an = a.node().get();
    auto* bn = b.node().get();
    y.node()->backprop = [yn, an, bn]() {
      if (an->requires_grad) {
        an->ensure_grad();
        for (size_t i = 0; i < an->grad.size(); ++i) an->grad[i] += yn->grad[i] * bn->data[i];
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (size_t i = 0; i < bn->grad.size(); ++i) bn->grad[i] += yn->grad[i] * an->data[i];
      }
    };
  }
  return y;
}

Tensor mul_scalar(const Tensor& x, double c) {
  std::vector<double> out(x.vec());
  for (double& v : out) v *= c;
  Tensor y = make_op_node("mul_scalar", x.shape(), std::move(out), {x}, nullptr);
  if (y.requires_grad()) {
    auto* yn = y.node().get();
    auto* xn = x.node().get();
    y.node()->backprop = [yn, xn, c]() {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += yn->grad[i] * c;
    };
  }
  return y;
}

Tensor add_scalar(const Tensor& x, double c) {
  std::vector<double> out(x.vec());
  for (double& v : out) v += c;
  Tensor y = make_op_node("add_scalar", x.shape(), std::move(out), {x}, nullptr);
  if (y.requires_grad()) {
    auto* yn = y.node().get();
    auto* xn = x.node().get();
    y.node()->backprop = [yn, xn]() {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += yn->grad[i];
    };
  }
  return y;
}

Tensor smooth_l1(const Tensor& pred, const Tensor& target, double beta) {
  DETQ_CHECK(same_shape(pred, target), "smooth_l1: shape mismatch");
  DETQ_CHECK(beta > 0, "smooth_l1: beta must be positive");
  std::vector<double> out(pred.vec().size());
  const double* pp = pred.data();
  const double* tp = target.data();
  for (size_t i = 0; i < out.size(); ++i) {
    double d = pp[i] - tp[i];
    double ad = std::fabs(d);
    out[i] = ad < beta ? 0.5 * d * d / beta : ad - 0.5 * beta;
  }
  Tensor y = make_op_node("smooth_l1", pred.shape(), std::move(out), {pred, target}, nullptr);
  if (y.requires_grad()) {
    auto* yn = y.node().get();
    auto* pn = pred.node().get();
    auto* tn = target.node().get();
    y.node()->backprop = [yn, pn, tn, beta]() {
      for (size_t i = 0; i < yn->data.size(); ++i) {
        double d = pn->data[i] - tn->data[i];
        double g = std::clamp(d / beta, -1.0, 1.0) * yn->grad[i];
        if (pn->requires_grad) {
          pn->ensure_grad();
          pn->grad[i] += g;
        }
        if (tn->requires_grad) {
          tn->ensure_grad();
          tn->grad[i] -= g;
        }
      }
    };
  }
  return y;
}

// ---- structural -------------------------------------------------------------

Tensor reshape(const Tensor& x, const Shape& shape) {
  DETQ_CHECK(shape_numel(shape) == x.numel(), "reshape: cannot view "
                                                  << shape_str(x.shape()) << " as "
                                                  << shape_str(shape));
  Tensor y = make_op_node("reshape", shape, x.vec(), {x}, nullptr);
  if (y.requires_grad()) {
    auto* yn = y.node().get();
    auto* xn = x.node().get();
    y.node()->backprop = [yn, xn]() {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (size_t i = 0; i < xn->grad.size(); ++i) xn->grad[i] += yn->grad[i];
    };
  }
  return y;
}

namespace {

std::vector<int64_t> row_major_strides(const Shape& s) {
  std::vector<int64_t> st(s.size(), 1);
  for (int i = int(s.size()) - 2; i >= 0; --i) st[size_t(i)] = st[size_t(i) + 1] * s[size_t(i) + 1];
  return st;
}

}  // namespace

Tensor permute(const Tensor& x, const std::vector<int>& axes) {
  const Shape& s = x.shape();
  DETQ_CHECK(axes.size() == s.size(), "permute: axes rank mismatch");
  std::vector<bool> seen(s.size(), false);
  Shape out_shape(s.size());
  for (size_t i = 0; i < axes.size(); ++i) {
    int a = axes[i];
    DETQ_CHECK(a >= 0 && a < int(s.size()) && !seen[size_t(a)], "permute: bad axis " << a);
    seen[size_t(a)] = true;
    out_shape[i] = s[size_t(a)];
  }
  auto in_strides = row_major_strides(s);
  auto out_strides = row_major_strides(out_shape);
  // out flat index -> in flat index
  std::vector<int64_t> map(size_t(x.numel()));
  const int rank = int(s.size());
  std::vector<int> idx(size_t(rank), 0);
  for (int64_t o = 0; o < x.numel(); ++o) {
    int64_t in_flat = 0;
    for (int d = 0; d < rank; ++d) in_flat += int64_t(idx[size_t(d)]) * in_strides[size_t(axes[size_t(d)])];
    map[size_t(o)] = in_flat;
    for (int d = rank - 1; d >= 0; --d) {
      if (++idx[size_t(d)] < out_shape[size_t(d)]) break;
      idx[size_t(d)] = 0;
    }
  }
  std::vector<double> out(size_t(x.numel()));
  const double* xp = x.data();
  for (size_t o = 0; o < out.size(); ++o) out[o] = xp[map[o]];
  Tensor y = make_op_node("permute", out_shape, std::move(out), {x}, nullptr);
  if (y.requires_grad()) {
    auto* yn = y.node().get();
    auto* xn = x.node().get();
    y.node()->backprop = [yn, xn, map = std::move(map)]() {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (size_t o = 0; o < map.size(); ++o) xn->grad[size_t(map[o])] += yn->grad[o];
    };
  }
  (void)out_strides;
  return y;
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  DETQ_CHECK(!xs.empty(), "concat: empty input list");
  const Shape& s0 = xs[0].shape();
  DETQ_CHECK(axis >= 0 && axis < int(s0.size()), "concat: axis " << axis << " out of range");
  int64_t axis_total = 0;
  for (const auto& t : xs) {
    DETQ_CHECK(t.ndim() == int(s0.size()), "concat: rank mismatch");
    for (int d = 0; d < int(s0.size()); ++d) {
      if (d == axis) continue;
      DETQ_CHECK(t.shape()[size_t(d)] == s0[size_t(d)],
                 "concat: extent mismatch on axis " << d);
    }
    axis_total += t.shape()[size_t(axis)];
  }
  Shape out_shape = s0;
  out_shape[size_t(axis)] = int(axis_total);
  int64_t outer = 1, inner = 1;
  for (int d = 0; d < axis; ++d) outer *= s0[size_t(d)];
  for (int d = axis + 1; d < int(s0.size()); ++d) inner *= s0[size_t(d)];
  std::vector<double> out(size_t(shape_numel(out_shape)));
  int64_t offset = 0;
  for (const auto& t : xs) {
    int64_t len = t.shape()[size_t(axis)];
    const double* tp = t.data();
    for (int64_t o = 0; o < outer; ++o) {
      std::memcpy(out.data() + (o * axis_total + offset) * inner,
                  tp + o * len * inner, size_t(len * inner) * sizeof(double));
    }
    offset += len;
  }
  std::vector<Tensor> inputs = xs;
  Tensor y = make_op_node("concat", out_shape, std::move(out), inputs, nullptr);
  if (y.requires_grad()) {
    auto* yn = y.node().get();
    std::vector<TensorNode*> ps;
    std::vector<int64_t> lens;
    for (const auto& t : xs) {
      ps.push_back(t.node().get());
      lens.push_back(t.shape()[size_t(axis)]);
    }
    y.node()->backprop = [yn, ps, lens, outer, inner, axis_total]() {
      int64_t offset = 0;
      for (size_t k = 0; k < ps.size(); ++k) {
        TensorNode* p = ps[k];
        int64_t len = lens[k];
        if (p->requires_grad) {
          p->ensure_grad();
          for (int64_t o = 0; o < outer; ++o) {
            const double* src = yn->grad.data() + (o * axis_total + offset) * inner;
            double* dst = p->grad.data() + o * len * inner;
            for (int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
          }
        }
        offset += len;
      }
    };
  }
  return y;
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.vec()) acc += v;
  Tensor y = make_op_node("sum", {1}, {acc}, {x}, nullptr);
  if (y.requires_grad()) {
    auto* yn = y.node().get();
    auto* xn = x.node().get();
    y.node()->backprop = [yn, xn]() {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (double& g : xn->grad) g += yn->grad[0];
    };
  }
  return y;
}

Tensor mean(const Tensor& x) {
  DETQ_CHECK(x.numel() > 0, "mean of empty tensor");
  return mul_scalar(sum(x), 1.0 / double(x.numel()));
}

// ---- softmax family ---------------------------------------------------------

namespace {

struct AxisSlices {
  int64_t outer, n, inner;
};

AxisSlices axis_slices(const Shape& s, int axis) {
  DETQ_CHECK(axis >= 0 && axis < int(s.size()),
             "axis " << axis << " out of range for shape " << shape_str(s));
  AxisSlices a{1, s[size_t(axis)], 1};
  for (int d = 0; d < axis; ++d) a.outer *= s[size_t(d)];
  for (int d = axis + 1; d < int(s.size()); ++d) a.inner *= s[size_t(d)];
  return a;
}

}  // namespace

Tensor softmax(const Tensor& x, int axis) {
  auto sl = axis_slices(x.shape(), axis);
  std::vector<double> out(x.vec());
  for (int64_t o = 0; o < sl.outer; ++o) {
    for (int64_t i = 0; i < sl.inner; ++i) {
      double* base = out.data() + o * sl.n * sl.inner + i;
      double mx = base[0];
      for (int64_t k = 1; k < sl.n; ++k) mx = std::max(mx, base[k * sl.inner]);
      double z = 0;
      for (int64_t k = 0; k < sl.n; ++k) {
        double e = std::exp(base[k * sl.inner] - mx);
        base[k * sl.inner] = e;
        z += e;
      }
      for (int64_t k = 0; k < sl.n; ++k) base[k * sl.inner] /= z;
    }
  }
  Tensor y = make_op_node("softmax", x.shape(), std::move(out), {x}, nullptr);
  if (y.requires_grad()) {
    auto* yn = y.node().get();
    auto* xn = x.node().get();
    y.node()->backprop = [yn, xn, sl]() {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (int64_t o = 0; o < sl.outer; ++o) {
        for (int64_t i = 0; i < sl.inner; ++i) {
          int64_t b = o * sl.n * sl.inner + i;
          double dot = 0;
          for (int64_t k = 0; k < sl.n; ++k)
            dot += yn->grad[size_t(b + k * sl.inner)] * yn->data[size_t(b + k * sl.inner)];
          for (int64_t k = 0; k < sl.n; ++k) {
            size_t idx = size_t(b + k * sl.inner);
            xn->grad[idx] += yn->data[idx] * (yn->grad[idx] - dot);
          }
        }
      }
    };
  }
  return y;
}

Tensor log_softmax(const Tensor& x, int axis) {
  auto sl = axis_slices(x.shape(), axis);
  std::vector<double> out(x.vec());
  for (int64_t o = 0; o < sl.outer; ++o) {
    for (int64_t i = 0; i < sl.inner; ++i) {
      double* base = out.data() + o * sl.n * sl.inner + i;
      double mx = base[0];
      for (int64_t k = 1; k < sl.n; ++k) mx = std::max(mx, base[k * sl.inner]);
      double z = 0;
      for (int64_t k = 0; k < sl.n; ++k) z += std::exp(base[k * sl.inner] - mx);
      double lz = mx + std::log(z);
      for (int64_t k = 0; k < sl.n; ++k) base[k * sl.inner] -= lz;
    }
  }
  Tensor y = make_op_node("log_softmax", x.shape(), std::move(out), {x}, nullptr);
  if (y.requires_grad()) {
    auto* yn = y.node().get();
    auto* xn = x.node().get();
    y.node()->backprop = [yn, xn, sl]() {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (int64_t o = 0; o < sl.outer; ++o) {
        for (int64_t i = 0; i < sl.inner; ++i) {
          int64_t b = o * sl.n * sl.inner + i;
          double gsum = 0;
          for (int64_t k = 0; k < sl.n; ++k) gsum += yn->grad[size_t(b + k * sl.inner)];
          for (int64_t k = 0; k < sl.n; ++k) {
            size_t idx = size_t(b + k * sl.inner);
            xn->grad[idx] += yn->grad[idx] - std::exp(yn->data[idx]) * gsum;
          }
        }
      }
    };
  }
  return y;
}

// ---- conv / pool / linear ----------------------------------------------------

namespace {

struct ConvDims {
  int B, C, H, W, OC, KH, KW, OH, OW;
  int64_t K, P;  // im2col rows (C*KH*KW) and cols (OH*OW)
};

ConvDims conv_dims(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  DETQ_CHECK(x.ndim() == 4, "conv2d: input must be NCHW, got " << shape_str(x.shape()));
  DETQ_CHECK(w.ndim() == 4, "conv2d: weight must be OIHW, got " << shape_str(w.shape()));
  DETQ_CHECK(b.ndim() == 1, "conv2d: bias must be 1-D, got " << shape_str(b.shape()));
  DETQ_CHECK(stride >= 1, "conv2d: stride must be >= 1, got " << stride);
  DETQ_CHECK(pad >= 0, "conv2d: padding must be >= 0, got " << pad);
  ConvDims d;
  d.B = x.dim(0);
  d.C = x.dim(1);
  d.H = x.dim(2);
  d.W = x.dim(3);
  d.OC = w.dim(0);
  d.KH = w.dim(2);
  d.KW = w.dim(3);
  DETQ_CHECK(w.dim(1) == d.C, "conv2d: input channels (" << d.C << ") != weight in-channels ("
                                                         << w.dim(1) << ")");
  DETQ_CHECK(b.dim(0) == d.OC, "conv2d: bias length (" << b.dim(0) << ") != out-channels ("
                                                       << d.OC << ")");
  DETQ_CHECK(d.H + 2 * pad >= d.KH && d.W + 2 * pad >= d.KW,
             "conv2d: kernel " << d.KH << "x" << d.KW << " larger than padded input");
  d.OH = (d.H + 2 * pad - d.KH) / stride + 1;
  d.OW = (d.W + 2 * pad - d.KW) / stride + 1;
  d.K = int64_t(d.C) * d.KH * d.KW;
  d.P = int64_t(d.OH) * d.OW;
  return d;
}

void im2col(const double* x, const ConvDims& d, int stride, int pad, double* col) {
  for (int c = 0; c < d.C; ++c) {
    const double* xc = x + int64_t(c) * d.H * d.W;
    for (int kh = 0; kh < d.KH; ++kh) {
      for (int kw = 0; kw < d.KW; ++kw) {
        double* row = col + ((int64_t(c) * d.KH + kh) * d.KW + kw) * d.P;
        for (int oy = 0; oy < d.OH; ++oy) {
          int iy = oy * stride - pad + kh;
          if (iy < 0 || iy >= d.H) {
            std::fill(row + int64_t(oy) * d.OW, row + int64_t(oy + 1) * d.OW, 0.0);
            continue;
          }
          for (int ox = 0; ox < d.OW; ++ox) {
            int ix = ox * stride - pad + kw;
            row[int64_t(oy) * d.OW + ox] = (ix >= 0 && ix < d.W) ? xc[int64_t(iy) * d.W + ix] : 0.0;
          }
        }
      }
    }
  }
}

void col2im_acc(const double* col, const ConvDims& d, int stride, int pad, double* dx) {
  for (int c = 0; c < d.C; ++c) {
    double* xc = dx + int64_t(c) * d.H * d.W;
    for (int kh = 0; kh < d.KH; ++kh) {
      for (int kw = 0; kw < d.KW; ++kw) {
        const double* row = col + ((int64_t(c) * d.KH + kh) * d.KW + kw) * d.P;
        for (int oy = 0; oy < d.OH; ++oy) {
          int iy = oy * stride - pad + kh;
          if (iy < 0 || iy >= d.H) continue;
          for (int ox = 0; ox < d.OW; ++ox) {
            int ix = ox * stride - pad + kw;
            if (ix >= 0 && ix < d.W) xc[int64_t(iy) * d.W + ix] += row[int64_t(oy) * d.OW + ox];
          }
        }
      }
    }
  }
}

}  // namespace

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias, int stride,
              int padding) {
  ConvDims d = conv_dims(input, weight, bias, stride, padding);
  std::vector<double> out(size_t(int64_t(d.B) * d.OC * d.P));
  std::vector<double> col(size_t(d.K * d.P));
  const double* xp = input.data();
  const double* bp = bias.data();
  for (int n = 0; n < d.B; ++n) {
    im2col(xp + int64_t(n) * d.C * d.H * d.W, d, stride, padding, col.data());
    double* on = out.data() + int64_t(n) * d.OC * d.P;
    for (int oc = 0; oc < d.OC; ++oc)
      std::fill(on + int64_t(oc) * d.P, on + int64_t(oc + 1) * d.P, bp[oc]);
    gemm_acc(on, weight.data(), col.data(), d.OC, int(d.K), int(d.P));
  }
  Tensor y = make_op_node("conv2d", {d.B, d.OC, d.OH, d.OW}, std::move(out),
                          {input, weight, bias}, nullptr);
  if (y.requires_grad()) {
    auto* yn = y.node().get();
    auto* xn = input.node().get();
    auto* wn = weight.node().get();
    auto* bn = bias.node().get();
    y.node()->backprop = [yn, xn, wn, bn, d, stride, padding]() {
      std::vector<double> col(size_t(d.K * d.P));
      std::vector<double> colT, wT, dcol;
      if (xn->requires_grad) {
        xn->ensure_grad();
        transpose_mat(wT, wn->data.data(), d.OC, int(d.K));
        dcol.resize(size_t(d.K * d.P));
      }
      if (wn->requires_grad) wn->ensure_grad();
      if (bn->requires_grad) bn->ensure_grad();
      for (int n = 0; n < d.B; ++n) {
        const double* dyn_ = yn->grad.data() + int64_t(n) * d.OC * d.P;
        if (wn->requires_grad || xn->requires_grad)
          im2col(xn->data.data() + int64_t(n) * d.C * d.H * d.W, d, stride, padding, col.data());
        if (wn->requires_grad) {
          transpose_mat(colT, col.data(), int(d.K), int(d.P));
          gemm_acc(wn->grad.data(), dyn_, colT.data(), d.OC, int(d.P), int(d.K));
        }
        if (bn->requires_grad) {
          for (int oc = 0; oc < d.OC; ++oc) {
            double acc = 0;
            const double* row = dyn_ + int64_t(oc) * d.P;
            for (int64_t p = 0; p < d.P; ++p) acc += row[p];
            bn->grad[size_t(oc)] += acc;
          }
        }
        if (xn->requires_grad) {
          std::fill(dcol.begin(), dcol.end(), 0.0);
          gemm_acc(dcol.data(), wT.data(), dyn_, int(d.K), d.OC, int(d.P));
          col2im_acc(dcol.data(), d, stride, padding,
                     xn->grad.data() + int64_t(n) * d.C * d.H * d.W);
        }
      }
    };
  }
  return y;
}

Tensor max_pool2d(const Tensor& input, int kernel, int stride) {
  DETQ_CHECK(input.ndim() == 4, "max_pool2d: input must be NCHW");
  DETQ_CHECK(kernel >= 1 && stride >= 1, "max_pool2d: kernel and stride must be >= 1");
  int B = input.dim(0), C = input.dim(1), H = input.dim(2), W = input.dim(3);
  DETQ_CHECK(H >= kernel && W >= kernel, "max_pool2d: kernel " << kernel
                                                               << " larger than input " << H
                                                               << "x" << W);
  int OH = (H - kernel) / stride + 1;
  int OW = (W - kernel) / stride + 1;
  std::vector<double> out(size_t(int64_t(B) * C * OH * OW));
  std::vector<int64_t> arg(out.size());
  const double* xp = input.data();
  int64_t oi = 0;
  for (int n = 0; n < B; ++n) {
    for (int c = 0; c < C; ++c) {
      const double* plane = xp + (int64_t(n) * C + c) * H * W;
      int64_t plane_off = (int64_t(n) * C + c) * H * W;
      for (int oy = 0; oy < OH; ++oy) {
        for (int ox = 0; ox < OW; ++ox, ++oi) {
          double best = -std::numeric_limits<double>::infinity();
          int64_t best_idx = 0;
          for (int ky = 0; ky < kernel; ++ky) {
            for (int kx = 0; kx < kernel; ++kx) {
              int64_t idx = int64_t(oy * stride + ky) * W + (ox * stride + kx);
              if (plane[idx] > best) {  // first max wins ties
                best = plane[idx];
                best_idx = idx;
              }
            }
          }
          out[size_t(oi)] = best;
          arg[size_t(oi)] = plane_off + best_idx;
        }
      }
    }
  }
  Tensor y = make_op_node("max_pool2d", {B, C, OH, OW}, std::move(out), {input}, nullptr);
  if (y.requires_grad()) {
    auto* yn = y.node().get();
    auto* xn = input.node().get();
    y.node()->backprop = [yn, xn, arg = std::move(arg)]() {
      if (!xn->requires_grad) return;
      xn->ensure_grad();
      for (size_t i = 0; i < arg.size(); ++i) xn->grad[size_t(arg[i])] += yn->grad[i];
    };
  }
  return y;
}

Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias) {
  DETQ_CHECK(input.ndim() == 2, "linear: input must be 2-D, got " << shape_str(input.shape()));
  DETQ_CHECK(weight.ndim() == 2, "linear: weight must be 2-D");
  int B = input.dim(0), I = input.dim(1), O = weight.dim(0);
  DETQ_CHECK(weight.dim(1) == I,
             "linear: input features (" << I << ") != weight in-features (" << weight.dim(1) << ")");
  DETQ_CHECK(bias.ndim() == 1 && bias.dim(0) == O, "linear: bias length != out-features");
  std::vector<double> out(size_t(int64_t(B) * O));
  for (int n = 0; n < B; ++n)
    for (int o = 0; o < O; ++o) out[size_t(int64_t(n) * O + o)] = bias.data()[o];
  std::vector<double> wT;
  transpose_mat(wT, weight.data(), O, I);
  gemm_acc(out.data(), input.data(), wT.data(), B, I, O);
  Tensor y = make_op_node("linear", {B, O}, std::move(out), {input, weight, bias}, nullptr);
  if (y.requires_grad()) {
    auto* yn = y.node().get();
    auto* xn = input.node().get();
    auto* wn = weight.node().get();
    auto* bn = bias.node().get();
    y.node()->backprop = [yn, xn, wn, bn, B, I, O]() {
      if (xn->requires_grad) {
        xn->ensure_grad();
        gemm_acc(xn->grad.data(), yn->grad.data(), wn->data.data(), B, O, I);
      }
      if (wn->requires_grad) {
        wn->ensure_grad();
        std::vector<double> dyT;
        transpose_mat(dyT, yn->grad.data(), B, O);
        gemm_acc(wn->grad.data(), dyT.data(), xn->data.data(), O, B, I);
      }
      if (bn->requires_grad) {
        bn->ensure_grad();
        for (int n = 0; n < B; ++n)
          for (int o = 0; o < O; ++o) bn->grad[size_t(o)] += yn->grad[size_t(int64_t(n) * O + o)];
      }
    };
  }
  return y;
}

// ---- Lp objective ------------------------------------------------------------

namespace {
constexpr double kLpZeroTol = 1e-12;
}

Tensor lp_pow_sum(const Tensor& a, const Tensor& b, double p) {
  DETQ_CHECK(same_shape(a, b), "lp_pow_sum: shape mismatch");
  DETQ_CHECK(p >= 1.0, "lp loss requires p >= 1, got " << p);
  const double* ap = a.data();
  const double* bp = b.data();
  double acc = 0;
  for (int64_t i = 0; i < a.numel(); ++i) {
    double ad = std::fabs(ap[i] - bp[i]);
    if (ad < kLpZeroTol) continue;
    acc += std::exp(p * std::log(ad));
  }
  Tensor y = make_op_node("lp_pow_sum", {1}, {acc}, {a, b}, nullptr);
  if (y.requires_grad()) {
    auto* yn = y.node().get();
    auto* an = a.node().get();
    auto* bn = b.node().get();
    y.node()->backprop = [yn, an, bn, p]() {
      double g0 = yn->grad[0];
      for (size_t i = 0; i < an->data.size(); ++i) {
        double d = an->data[i] - bn->data[i];
        double ad = std::fabs(d);
        if (ad < kLpZeroTol) continue;
        double g = g0 * p * std::exp((p - 1.0) * std::log(ad)) * (d > 0 ? 1.0 : -1.0);
        if (an->requires_grad) {
          an->ensure_grad();
          an->grad[i] += g;
        }
        if (bn->requires_grad) {
          bn->ensure_grad();
          bn->grad[i] -= g;
        }
      }
    };
  }
  return y;
}

// ---- backward ----------------------------------------------------------------

void backward(const Tensor& loss) {
  DETQ_CHECK(loss.defined(), "backward: undefined tensor");
  DETQ_CHECK(loss.numel() == 1, "backward: loss must be scalar, got shape "
                                    << shape_str(loss.shape()));
  DETQ_CHECK(loss.requires_grad(), "backward: loss does not require grad");

  // Reverse post-order over the parent DAG = topological order from the loss.
  std::vector<TensorNode*> order;
  std::unordered_set<TensorNode*> visited;
  std::vector<std::pair<TensorNode*, size_t>> stack;
  stack.emplace_back(loss.node().get(), 0);
  visited.insert(loss.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      TensorNode* p = node->parents[next++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(node);
      stack.pop_back();
    }
  }

  for (TensorNode* n : order) {
    if (n->is_leaf) {
      n->ensure_grad();
    } else {
      n->grad.assign(n->data.size(), 0.0);
    }
  }
  loss.node()->grad[0] = 1.0;

  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    if ((*it)->backprop) (*it)->backprop();
  }
}

// ---- Adam ----------------------------------------------------------------------

void AdamState::init(const std::vector<Tensor>& params) {
  step = 0;
  m.clear();
  v.clear();
  for (const auto& p : params) {
    m.emplace_back(size_t(p.numel()), 0.0);
    v.emplace_back(size_t(p.numel()), 0.0);
  }
}

void adam_step(std::vector<Tensor>& params, AdamState& state) {
  DETQ_CHECK(state.m.size() == params.size(), "adam_step: state not initialized for params");
  state.step += 1;
  double bc1 = 1.0 - std::pow(state.beta1, double(state.step));
  double bc2 = 1.0 - std::pow(state.beta2, double(state.step));
  for (size_t pi = 0; pi < params.size(); ++pi) {
    Tensor& p = params[pi];
    DETQ_CHECK(p.has_grad(), "adam_step: param " << pi << " has no grad buffer");
    DETQ_CHECK(int64_t(state.m[pi].size()) == p.numel(), "adam_step: moment shape mismatch");
    double* w = p.data();
    const double* g = p.grad();
    double* mb = state.m[pi].data();
    double* vb = state.v[pi].data();
    for (int64_t i = 0; i < p.numel(); ++i) {
      mb[i] = state.beta1 * mb[i] + (1.0 - state.beta1) * g[i];
      vb[i] = state.beta2 * vb[i] + (1.0 - state.beta2) * g[i] * g[i];
      double mh = mb[i] / bc1;
      double vh = vb[i] / bc2;
      w[i] -= state.lr * mh / (std::sqrt(vh) + state.eps);
    }
  }
}

}  // namespace detq
