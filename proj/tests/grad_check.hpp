#pragma once
// Central finite-difference gradient checking shared by the test suites.
// The scalar under test is a fixed random weighting of the op output, so a
// single backward pass checks the full Jacobian action.

#include <cmath>
#include <functional>
#include <vector>

#include "vqe/ops.hpp"

namespace vqe::testing {

inline double weighted_sum(const std::vector<double>& v,
                           const std::vector<double>& c) {
  double s = 0.0;
  for (size_t i = 0; i < v.size(); ++i) s += v[i] * c[i];
  return s;
}

// fn() must re-evaluate the expression from the current values of `inputs`.
// Returns the L2 relative error between analytic and finite-difference
// gradients over all inputs.
inline double grad_check(const std::function<Tensor()>& fn,
                         std::vector<Tensor> inputs, uint64_t seed,
                         double h = 1e-4) {
  for (auto& t : inputs) t.set_requires_grad(true);

  Tensor out = fn();
  Rng rng(seed);
  std::vector<double> coeff(static_cast<size_t>(out.numel()));
  for (auto& c : coeff) c = rng.uniform(-1.0, 1.0);

  for (auto& t : inputs) t.zero_grad();
  Tensor c = Tensor::from_data(out.shape(), coeff);
  Tensor s = sum_all(mul(out, c));
  s.backward();

  std::vector<std::vector<double>> analytic;
  for (auto& t : inputs) analytic.push_back(t.grad());

  double num = 0.0, den_a = 0.0, den_f = 0.0;
  for (size_t ti = 0; ti < inputs.size(); ++ti) {
    Tensor& t = inputs[ti];
    for (int64_t j = 0; j < t.numel(); ++j) {
      double orig = t.data()[j];
      t.data()[j] = orig + h;
      double sp = weighted_sum(fn().values(), coeff);
      t.data()[j] = orig - h;
      double sm = weighted_sum(fn().values(), coeff);
      t.data()[j] = orig;
      double fd = (sp - sm) / (2.0 * h);
      double a = analytic[ti][static_cast<size_t>(j)];
      num += (a - fd) * (a - fd);
      den_a += a * a;
      den_f += fd * fd;
    }
  }
  double den = std::max(std::sqrt(std::max(den_a, den_f)), 1e-12);
  return std::sqrt(num) / den;
}

inline Tensor random_tensor(const Shape& s, Rng& rng, double lo = -1.0,
                            double hi = 1.0) {
  Tensor t = Tensor::zeros(s);
  for (auto& x : t.values()) x = rng.uniform(lo, hi);
  return t;
}

}  // namespace vqe::testing
