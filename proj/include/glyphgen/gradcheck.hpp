#pragma once

// Central finite-difference gradient verification. The check is independent
// of the backward rules it validates: it only evaluates the forward function
// at perturbed points.

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <vector>

#include "glyphgen/tensor.hpp"

namespace glyphgen {

// f: (tape, x) -> scalar tensor. Returns the max over elements of
// |analytic - numeric| / max(1e-8, |analytic| + |numeric|).
template <class S, class F>
double grad_check(F&& f, const TensorT<S>& at, double eps) {
  if (!(eps > 0.0)) throw std::invalid_argument("grad_check: eps must be positive");

  TapeT<S> tape;
  TensorT<S> x = tape.leaf(at);
  TensorT<S> y = f(tape, x);
  if (y.size() != 1) throw std::invalid_argument("grad_check: f must return a scalar");
  tape.backward(y);
  const auto analytic = tape.grad(x);

  auto eval_at = [&](const std::vector<S>& values) -> double {
    TapeT<S> t;
    TensorT<S> xt = t.leaf(TensorT<S>(at.shape(), values));
    return static_cast<double>(f(t, xt).value());
  };

  std::vector<S> probe(at.values());
  double max_err = 0.0;
  for (std::size_t i = 0; i < probe.size(); ++i) {
    const S orig = probe[i];
    probe[i] = orig + static_cast<S>(eps);
    const double fp = eval_at(probe);
    probe[i] = orig - static_cast<S>(eps);
    const double fm = eval_at(probe);
    probe[i] = orig;
    const double numeric = (fp - fm) / (2.0 * eps);
    const double a = static_cast<double>(analytic[i]);
    const double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
    if (err > max_err) max_err = err;
  }
  return max_err;
}

}  // namespace glyphgen
