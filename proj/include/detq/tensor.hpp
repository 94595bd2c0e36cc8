#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "detq/common.hpp"

namespace detq {

using Shape = std::vector<int>;

int64_t shape_numel(const Shape& s);
std::string shape_str(const Shape& s);

struct TensorNode {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // allocated only for grad-requiring nodes
  bool requires_grad = false;
  bool is_leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<TensorNode>> parents;
  // Propagates this node's grad into the parents. Captures raw parent
  // pointers; the parents vector keeps them alive for the node's lifetime.
  std::function<void()> backprop;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

// Dense f64 tensor participating in a reverse-mode autodiff graph.
// Value-semantics handle: copies share the underlying node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(const Shape& shape, bool requires_grad = false);
  static Tensor full(const Shape& shape, double value, bool requires_grad = false);
  static Tensor from_data(const Shape& shape, std::vector<double> data,
                          bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  int dim(int i) const { return node_->shape[size_t(i)]; }
  int ndim() const { return int(node_->shape.size()); }
  int64_t numel() const { return int64_t(node_->data.size()); }

  double* data() { return node_->data.data(); }
  const double* data() const { return node_->data.data(); }
  std::vector<double>& vec() { return node_->data; }
  const std::vector<double>& vec() const { return node_->data; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool rg);
  double* grad() { return node_->grad.data(); }
  const double* grad() const { return node_->grad.data(); }
  bool has_grad() const { return !node_->grad.empty(); }
  void zero_grad() {
    if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
  }

  double item() const;

  // Detached value copy (fresh leaf, no graph history).
  Tensor detach_copy() const;

  std::shared_ptr<TensorNode>& node() { return node_; }
  const std::shared_ptr<TensorNode>& node() const { return node_; }

  explicit Tensor(std::shared_ptr<TensorNode> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<TensorNode> node_;
};

// ---- grad mode ------------------------------------------------------------

bool grad_enabled();

// RAII guard disabling graph recording; forwards run value-only.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

// When enabled, every op output is scanned for NaN/Inf (slow; for tests).
void set_finite_checks(bool on);
bool finite_checks();

// ---- op construction helper (used by quantizer custom ops too) ------------

Tensor make_op_node(const char* op, Shape shape, std::vector<double> data,
                    std::vector<Tensor> inputs, std::function<void()>* out_hook);

// ---- elementwise / structural ops -----------------------------------------

Tensor relu(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor mul_scalar(const Tensor& x, double c);
Tensor add_scalar(const Tensor& x, double c);

// Huber-style elementwise loss between pred and target.
Tensor smooth_l1(const Tensor& pred, const Tensor& target, double beta);

Tensor reshape(const Tensor& x, const Shape& shape);
Tensor permute(const Tensor& x, const std::vector<int>& axes);
Tensor concat(const std::vector<Tensor>& xs, int axis);

Tensor sum(const Tensor& x);
Tensor mean(const Tensor& x);

Tensor softmax(const Tensor& x, int axis);
Tensor log_softmax(const Tensor& x, int axis);

// ---- NN ops ----------------------------------------------------------------

// input NCHW, weight OIHW, bias O; standard cross-correlation.
Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              int stride, int padding);
Tensor max_pool2d(const Tensor& input, int kernel, int stride);
// input [B, I], weight [O, I], bias [O] -> [B, O]
Tensor linear(const Tensor& input, const Tensor& weight, const Tensor& bias);

// Sum_i |a_i - b_i|^p as a differentiable scalar (the un-rooted Lp objective).
// |d| below 1e-12 contributes zero value and zero gradient.
Tensor lp_pow_sum(const Tensor& a, const Tensor& b, double p);

// ---- backward --------------------------------------------------------------

// Accumulates gradients of a scalar loss into every reachable grad-requiring
// leaf. Intermediate grads are reset per call; leaf grads accumulate.
void backward(const Tensor& loss);

// ---- Adam ------------------------------------------------------------------

struct AdamState {
  double lr = 3e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
  int64_t step = 0;
  std::vector<std::vector<double>> m, v;

  void init(const std::vector<Tensor>& params);
};

// One bias-corrected Adam update from the params' accumulated grads.
void adam_step(std::vector<Tensor>& params, AdamState& state);

}  // namespace detq
