#pragma once

// Compact Nelder-Mead simplex minimizer for smooth low-dimensional
// objectives. Standard reflection/expansion/contraction/shrink coefficients.

#include "mvmnp/types.hpp"

#include <algorithm>
#include <functional>

namespace mvmnp {

struct NelderMeadResult {
  Vector x;
  double value = 0.0;
  int iterations = 0;
  bool converged = false;
};

inline NelderMeadResult nelder_mead(const std::function<double(const Vector&)>& f,
                                    const Vector& x0, const Vector& step, int max_iter = 500,
                                    double ftol = 1e-10) {
  const int dim = static_cast<int>(x0.size());
  std::vector<Vector> xs(dim + 1, x0);
  std::vector<double> fs(dim + 1);
  for (int j = 0; j < dim; ++j) xs[j + 1][j] += step[j];
  for (int j = 0; j <= dim; ++j) fs[j] = f(xs[j]);

  auto order = [&] {
    std::vector<int> idx(dim + 1);
    for (int j = 0; j <= dim; ++j) idx[j] = j;
    std::sort(idx.begin(), idx.end(), [&](int a, int b) { return fs[a] < fs[b]; });
    std::vector<Vector> xs2(dim + 1);
    std::vector<double> fs2(dim + 1);
    for (int j = 0; j <= dim; ++j) {
      xs2[j] = xs[idx[j]];
      fs2[j] = fs[idx[j]];
    }
    xs.swap(xs2);
    fs.swap(fs2);
  };

  NelderMeadResult out;
  int it = 0;
  for (; it < max_iter; ++it) {
    order();
    if (fs[dim] - fs[0] < ftol * (1.0 + std::abs(fs[0]))) {
      out.converged = true;
      break;
    }
    Vector centroid = Vector::Zero(dim);
    for (int j = 0; j < dim; ++j) centroid += xs[j];
    centroid /= dim;

    const Vector xr = centroid + (centroid - xs[dim]);
    const double fr = f(xr);
    if (fr < fs[0]) {
      const Vector xe = centroid + 2.0 * (centroid - xs[dim]);
      const double fe = f(xe);
      if (fe < fr) {
        xs[dim] = xe;
        fs[dim] = fe;
      } else {
        xs[dim] = xr;
        fs[dim] = fr;
      }
    } else if (fr < fs[dim - 1]) {
      xs[dim] = xr;
      fs[dim] = fr;
    } else {
      const Vector xc = centroid + 0.5 * (xs[dim] - centroid);
      const double fc = f(xc);
      if (fc < fs[dim]) {
        xs[dim] = xc;
        fs[dim] = fc;
      } else {
        for (int j = 1; j <= dim; ++j) {
          xs[j] = xs[0] + 0.5 * (xs[j] - xs[0]);
          fs[j] = f(xs[j]);
        }
      }
    }
  }
  order();
  out.x = xs[0];
  out.value = fs[0];
  out.iterations = it;
  return out;
}

}  // namespace mvmnp
