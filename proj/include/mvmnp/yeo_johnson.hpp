#pragma once

// Yeo-Johnson power transform and its first two derivatives:
//   t(x) = ((x+1)^eta - 1) / eta            x >= 0
//   t(x) = -((1-x)^(2-eta) - 1) / (2-eta)   x <  0
// with the log1p limits at eta = 0 and eta = 2. t(0) = 0, t'(0) = 1, t' > 0
// everywhere, and t'' is continuous across 0.

#include <cmath>

namespace mvmnp {

template <typename Scalar>
struct YeoJohnsonEval {
  Scalar value;
  Scalar d1;
  Scalar d2;
};

template <typename Scalar>
YeoJohnsonEval<Scalar> yeo_johnson(Scalar x, Scalar eta) {
  using std::exp;
  using std::expm1;
  using std::log1p;
  YeoJohnsonEval<Scalar> out;
  if (x >= Scalar(0)) {
    const Scalar u = log1p(x);
    out.value = (eta == Scalar(0)) ? u : expm1(eta * u) / eta;
    out.d1 = exp((eta - Scalar(1)) * u);
    out.d2 = (eta - Scalar(1)) * exp((eta - Scalar(2)) * u);
  } else {
    const Scalar v = log1p(-x);
    const Scalar w = Scalar(2) - eta;
    out.value = (w == Scalar(0)) ? -v : -expm1(w * v) / w;
    out.d1 = exp((Scalar(1) - eta) * v);
    out.d2 = (eta - Scalar(1)) * exp(-eta * v);
  }
  return out;
}

template <typename Scalar>
Scalar yeo_johnson_value(Scalar x, Scalar eta) {
  return yeo_johnson(x, eta).value;
}

}  // namespace mvmnp
