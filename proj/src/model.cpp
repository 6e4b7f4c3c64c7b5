#include "mvmnp/model.hpp"

namespace mvmnp {

DesignMatrix build_design(const ChoiceStructure& sc, const Dataset& data) {
  data.validate(sc);
  DesignMatrix dm;
  dm.sc = sc;
  dm.N = data.N;
  dm.block.resize(static_cast<std::size_t>(data.N) * sc.K);
  for (int i = 0; i < data.N; ++i) {
    for (int k = 0; k < sc.K; ++k) {
      const int Jk = sc.J[k];
      Matrix x = Matrix::Zero(Jk, sc.r_k[k]);
      x.leftCols(Jk).setIdentity();
      for (int c = 0; c < sc.n_d; ++c)
        x.block(0, Jk + c * Jk, Jk, Jk) = data.x_d(i, c) * Matrix::Identity(Jk, Jk);
      if (sc.n_a > 0) {
        const auto a = data.alt_covariates(sc, i, k);
        for (int j = 0; j < Jk; ++j)
          x.block(j, Jk + sc.n_d * Jk, 1, sc.n_a) = a.row(j + 1) - a.row(0);
      }
      dm.block[static_cast<std::size_t>(i) * sc.K + k] = std::move(x);
    }
  }
  return dm;
}

int outcome_from_utilities(const Eigen::Ref<const Vector>& z_k) {
  if (z_k.size() == 0) throw DimensionError("outcome_from_utilities: empty utility vector");
  Eigen::Index arg = 0;
  const double top = z_k.maxCoeff(&arg);  // first maximum, so ties go low
  if (!(top > 0.0)) return 0;
  return static_cast<int>(arg) + 1;
}

bool indicator_y_given_z(const ChoiceStructure& sc, const Eigen::Ref<const IntVector>& y_row,
                         const Eigen::Ref<const Vector>& z) {
  if (y_row.size() != sc.K || z.size() != sc.J_total)
    throw DimensionError("indicator_y_given_z: y_row must have K entries and z length J");
  for (int k = 0; k < sc.K; ++k) {
    if (outcome_from_utilities(z.segment(sc.util_offset[k], sc.J[k])) != y_row[k]) return false;
  }
  return true;
}

}  // namespace mvmnp
