#pragma once

#include <cmath>

#include "grouppref/archive.hpp"

namespace grouppref {

/// Adam over any visitable parameter struct. lr = 0 leaves parameters
/// bit-identical.
template <class P>
class Adam {
 public:
  Adam(const P& like, double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8)
      : m_(zeros_like(like)), v_(zeros_like(like)), lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {}

  void step(P& params, const P& grad) {
    ++t_;
    if (lr_ == 0.0) return;
    const double c1 = 1.0 - std::pow(b1_, t_);
    const double c2 = 1.0 - std::pow(b2_, t_);
    auto ps = tensor_spans(params);
    auto gs = tensor_spans(grad);
    auto ms = tensor_spans(m_);
    auto vs = tensor_spans(v_);
    for (std::size_t i = 0; i < ps.size(); ++i) {
      for (std::size_t j = 0; j < ps[i].size(); ++j) {
        const double g = gs[i][j];
        ms[i][j] = b1_ * ms[i][j] + (1.0 - b1_) * g;
        vs[i][j] = b2_ * vs[i][j] + (1.0 - b2_) * g * g;
        ps[i][j] -= lr_ * (ms[i][j] / c1) / (std::sqrt(vs[i][j] / c2) + eps_);
      }
    }
  }

 private:
  P m_, v_;
  double lr_, b1_, b2_, eps_;
  int t_ = 0;
};

/// Plain gradient descent: params -= lr * grad.
template <class P>
void sgd_step(P& params, const P& grad, double lr) {
  auto ps = tensor_spans(params);
  auto gs = tensor_spans(grad);
  for (std::size_t i = 0; i < ps.size(); ++i)
    for (std::size_t j = 0; j < ps[i].size(); ++j) ps[i][j] -= lr * gs[i][j];
}

}  // namespace grouppref
