#pragma once

#include <cmath>
#include <functional>
#include <vector>

#include "detq/rng.hpp"
#include "detq/tensor.hpp"

namespace detq::test {

inline Tensor random_tensor(const Shape& shape, Rng& rng, bool requires_grad = true,
                            double lo = -2.0, double hi = 2.0) {
  std::vector<double> d(size_t(shape_numel(shape)));
  for (double& v : d) v = rng.uniform(lo, hi);
  return Tensor::from_data(shape, std::move(d), requires_grad);
}

// Central finite differences on a scalar-valued function of the given leaves.
// Returns the worst relative error between analytic and numeric gradients.
inline double grad_check(const std::function<Tensor(const std::vector<Tensor>&)>& fn,
                         std::vector<Tensor> leaves, double h = 1e-5) {
  for (auto& l : leaves) l.zero_grad();
  Tensor loss = fn(leaves);
  backward(loss);

  double worst = 0.0;
  for (auto& leaf : leaves) {
    if (!leaf.requires_grad()) continue;
    for (int64_t i = 0; i < leaf.numel(); ++i) {
      double saved = leaf.data()[i];
      leaf.data()[i] = saved + h;
      double up;
      {
        NoGradGuard ng;
        up = fn(leaves).item();
      }
      leaf.data()[i] = saved - h;
      double dn;
      {
        NoGradGuard ng;
        dn = fn(leaves).item();
      }
      leaf.data()[i] = saved;
      double numeric = (up - dn) / (2.0 * h);
      double analytic = leaf.grad()[i];
      double denom = std::max({std::fabs(numeric), std::fabs(analytic), 1e-3});
      worst = std::max(worst, std::fabs(numeric - analytic) / denom);
    }
  }
  return worst;
}

}  // namespace detq::test
