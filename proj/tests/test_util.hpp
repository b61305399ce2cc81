#pragma once

#include <doctest.h>

#include <cmath>
#include <functional>

#include "robustdistill/autodiff.hpp"
#include "robustdistill/rng.hpp"

namespace testutil {

using robustdistill::Rng;
using robustdistill::Shape;
using robustdistill::Tape;
using robustdistill::Tensor;
using robustdistill::Var;

inline Tensor<double> random_tensor(Shape s, Rng& rng, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(s));
  for (auto& x : t.v) x = rng.uniform(lo, hi);
  return t;
}

// Redraws values that sit within `gap` of any kink listed by `dist`, so
// central differences stay valid for piecewise primitives.
inline Tensor<double> random_tensor_away_from(Shape s, Rng& rng,
                                              const std::function<double(double)>& dist,
                                              double gap, double lo = -1.0, double hi = 1.0) {
  Tensor<double> t(std::move(s));
  for (auto& x : t.v) {
    do {
      x = rng.uniform(lo, hi);
    } while (dist(x) < gap);
  }
  return t;
}

inline double l2(const Tensor<double>& t) {
  double s = 0;
  for (double x : t.v) s += x * x;
  return std::sqrt(s);
}

inline double rel_err(const Tensor<double>& got, const Tensor<double>& want) {
  REQUIRE(got.shape == want.shape);
  Tensor<double> d = got;
  for (size_t i = 0; i < d.v.size(); ++i) d.v[i] -= want.v[i];
  return l2(d) / std::max(l2(want), 1e-8);
}

// Checks d(loss)/d(x) from the tape against central finite differences.
// `build` assembles a scalar loss from the leaf; it must be deterministic.
inline void check_gradient(
    const std::function<Var<double>(Tape<double>&, Var<double>)>& build,
    const Tensor<double>& x, double tol = 1e-4, double h = 1e-5) {
  Tape<double> tape;
  Var<double> leaf = tape.leaf(x, true);
  Var<double> loss = build(tape, leaf);
  REQUIRE(loss.val().numel() == 1);
  tape.backward(loss);
  Tensor<double> autodiff_grad = tape.grad(leaf);

  auto f = [&](const Tensor<double>& probe) {
    Tape<double> t;
    Var<double> v = t.leaf(probe, false);
    return build(t, v).val().item();
  };
  Tensor<double> fd = robustdistill::finite_difference_gradient(f, x, h);
  double err = rel_err(autodiff_grad, fd);
  CHECK(err < tol);
}

}  // namespace testutil
