#pragma once

// Design construction and the outcome rule. Choice k of unit i has latent
// utilities z_ik = X_ik beta_k + e_ik; the observed category is 0 when every
// utility is nonpositive and otherwise the index of the largest utility
// (1-based, ties to the lowest index).
//
// X_ik = [ I_Jk | x_i^d kron I_Jk | T_k X_ik^a ] where row j of T_k X_ik^a
// is the covariate row of alternative j+1 minus that of the base alternative.

#include "mvmnp/types.hpp"

namespace mvmnp {

// Per-observation, per-choice design blocks. The stacked X_i is block
// diagonal over choices; only the blocks are stored.
struct DesignMatrix {
  ChoiceStructure sc;
  int N = 0;
  std::vector<Matrix> block;  // index i * K + k holds the J_k x r_k block

  const Matrix& at(int i, int k) const { return block[static_cast<std::size_t>(i) * sc.K + k]; }

  // X_i beta written into a preallocated stacked J-vector.
  void mean_into(int i, const Eigen::Ref<const Vector>& beta, Eigen::Ref<Vector> out) const {
    for (int k = 0; k < sc.K; ++k)
      out.segment(sc.util_offset[k], sc.J[k]).noalias() =
          at(i, k) * beta.segment(sc.beta_offset[k], sc.r_k[k]);
  }

  // X_i beta, stacked over choices (length J).
  Vector mean(int i, const Eigen::Ref<const Vector>& beta) const {
    Vector out(sc.J_total);
    mean_into(i, beta, out);
    return out;
  }

  // out += X_i^T v for a stacked J-vector v.
  void add_transpose_apply(int i, const Eigen::Ref<const Vector>& v,
                           Eigen::Ref<Vector> out) const {
    for (int k = 0; k < sc.K; ++k)
      out.segment(sc.beta_offset[k], sc.r_k[k]).noalias() +=
          at(i, k).transpose() * v.segment(sc.util_offset[k], sc.J[k]);
  }

  // Dense J x r block-diagonal X_i; intended for small cross-checks.
  Matrix stacked(int i) const {
    Matrix out = Matrix::Zero(sc.J_total, sc.r);
    for (int k = 0; k < sc.K; ++k)
      out.block(sc.util_offset[k], sc.beta_offset[k], sc.J[k], sc.r_k[k]) = at(i, k);
    return out;
  }
};

DesignMatrix build_design(const ChoiceStructure& sc, const Dataset& data);

// Category implied by one choice's utilities.
int outcome_from_utilities(const Eigen::Ref<const Vector>& z_k);

// 1 if the stacked utilities z reproduce every observed category in y_row.
bool indicator_y_given_z(const ChoiceStructure& sc, const Eigen::Ref<const IntVector>& y_row,
                         const Eigen::Ref<const Vector>& z);

}  // namespace mvmnp
