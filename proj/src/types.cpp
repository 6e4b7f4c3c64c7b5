#include "mvmnp/types.hpp"

namespace mvmnp {

ChoiceStructure ChoiceStructure::make(std::vector<int> J, int n_d, int n_a, int p) {
  ChoiceStructure sc;
  sc.K = static_cast<int>(J.size());
  if (sc.K < 1) throw DimensionError("ChoiceStructure: need at least one choice");
  for (int k = 0; k < sc.K; ++k) {
    if (J[k] < 1)
      throw DimensionError("ChoiceStructure: J[" + std::to_string(k) + "] = " +
                           std::to_string(J[k]) + " must be >= 1");
  }
  if (n_d < 0 || n_a < 0) throw DimensionError("ChoiceStructure: covariate counts must be >= 0");
  sc.J = std::move(J);
  sc.n_d = n_d;
  sc.n_a = n_a;
  sc.p = (p < 0) ? sc.K : p;

  sc.util_offset.assign(sc.K + 1, 0);
  sc.beta_offset.assign(sc.K + 1, 0);
  sc.psi_offset.assign(sc.K + 1, 0);
  sc.angle_offset.assign(sc.K + 1, 0);
  for (int k = 0; k < sc.K; ++k) {
    int Jk = sc.J[k];
    sc.r_k.push_back(Jk + Jk * sc.n_d + sc.n_a);
    sc.n_k.push_back(Jk * (sc.p + 1));
    sc.util_offset[k + 1] = sc.util_offset[k] + Jk;
    sc.beta_offset[k + 1] = sc.beta_offset[k] + sc.r_k[k];
    sc.psi_offset[k + 1] = sc.psi_offset[k] + sc.n_k[k];
    sc.angle_offset[k + 1] = sc.angle_offset[k] + (sc.n_k[k] - 1);
  }
  sc.J_total = sc.util_offset[sc.K];
  sc.r = sc.beta_offset[sc.K];
  sc.n = sc.psi_offset[sc.K];
  sc.m = sc.r + sc.n;
  sc.n_angles = sc.angle_offset[sc.K];
  sc.theta_dim = sc.r + sc.n_angles;
  return sc;
}

void Dataset::validate(const ChoiceStructure& sc) const {
  if (y.rows() != N || y.cols() != sc.K)
    throw DimensionError("Dataset: y must be N x K, got " + std::to_string(y.rows()) + " x " +
                         std::to_string(y.cols()));
  if (x_d.rows() != (sc.n_d > 0 ? N : x_d.rows()) || x_d.cols() != sc.n_d)
    throw DimensionError("Dataset: x_d must have n_d = " + std::to_string(sc.n_d) + " columns");
  if (sc.n_d > 0 && x_d.rows() != N) throw DimensionError("Dataset: x_d must have N rows");
  if (static_cast<int>(x_a.size()) != (sc.n_a > 0 ? sc.K : static_cast<int>(x_a.size())))
    throw DimensionError("Dataset: x_a must hold one block per choice");
  if (sc.n_a > 0) {
    if (static_cast<int>(x_a.size()) != sc.K)
      throw DimensionError("Dataset: x_a must hold one block per choice");
    for (int k = 0; k < sc.K; ++k) {
      if (x_a[k].rows() != N || x_a[k].cols() != (sc.J[k] + 1) * sc.n_a)
        throw DimensionError("Dataset: x_a[" + std::to_string(k) + "] must be N x (J_k+1)*n_a");
    }
  }
  for (int i = 0; i < N; ++i) {
    for (int k = 0; k < sc.K; ++k) {
      int v = y(i, k);
      if (v < 0 || v > sc.J[k])
        throw DomainError("Dataset: y out of range at observation " + std::to_string(i) +
                          ", choice " + std::to_string(k) + ": " + std::to_string(v));
    }
  }
}

}  // namespace mvmnp
