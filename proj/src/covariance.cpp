#include "mvmnp/covariance.hpp"

#include <cmath>

namespace mvmnp {

CholeskyFactor chol_spd(const Matrix& a) {
  if (a.rows() != a.cols()) throw DimensionError("chol_spd: matrix must be square");
  Eigen::LLT<Matrix> llt(a);
  double jitter = 0.0;
  if (llt.info() != Eigen::Success) {
    for (jitter = 1e-10; jitter <= 1e-6 * 1.0000001; jitter *= 10.0) {
      Matrix aj = a;
      aj.diagonal().array() += jitter;
      llt.compute(aj);
      if (llt.info() == Eigen::Success) break;
    }
    if (llt.info() != Eigen::Success)
      throw NumericalError("chol_spd: matrix of dimension " + std::to_string(a.rows()) +
                           " not positive definite up to jitter 1e-6 (diagonal range [" +
                           std::to_string(a.diagonal().minCoeff()) + ", " +
                           std::to_string(a.diagonal().maxCoeff()) + "])");
  }
  CholeskyFactor out;
  out.L = llt.matrixL();
  out.log_det = 2.0 * out.L.diagonal().array().log().sum();
  out.jitter = jitter;
  return out;
}

double log_mvn_density(const Eigen::Ref<const Vector>& x, const Eigen::Ref<const Vector>& mean,
                       const CholeskyFactor& chol) {
  const auto dim = chol.L.rows();
  if (x.size() != dim || mean.size() != dim)
    throw DimensionError("log_mvn_density: dimension mismatch");
  static const double log_2pi = 1.8378770664093454836;
  Vector v = x - mean;
  chol.L.triangularView<Eigen::Lower>().solveInPlace(v);
  return -0.5 * (static_cast<double>(dim) * log_2pi + chol.log_det + v.squaredNorm());
}

double log_mvn_density(const Eigen::Ref<const Vector>& x, const Eigen::Ref<const Vector>& mean,
                       const Matrix& sigma) {
  return log_mvn_density(x, mean, chol_spd(sigma));
}

Matrix spd_inverse(const CholeskyFactor& chol) {
  Matrix inv = Matrix::Identity(chol.L.rows(), chol.L.rows());
  chol.L.triangularView<Eigen::Lower>().solveInPlace(inv);
  chol.L.transpose().triangularView<Eigen::Upper>().solveInPlace(inv);
  return inv;
}

Vector angles_from_unconstrained(const ChoiceStructure& sc, const Eigen::Ref<const Vector>& xi) {
  if (xi.size() != sc.n_angles)
    throw DimensionError("angles_from_unconstrained: expected " + std::to_string(sc.n_angles) +
                         " coordinates, got " + std::to_string(xi.size()));
  Vector kappa(sc.n_angles);
  for (int k = 0; k < sc.K; ++k) {
    const int a_k = sc.angles_k(k);
    if (a_k > 0)
      kappa.segment(sc.angle_offset[k], a_k) =
          real_to_angles(xi.segment(sc.angle_offset[k], a_k), sc.J[k]);
  }
  return kappa;
}

Vector unconstrained_from_angles(const ChoiceStructure& sc,
                                 const Eigen::Ref<const Vector>& kappa) {
  if (kappa.size() != sc.n_angles)
    throw DimensionError("unconstrained_from_angles: expected " + std::to_string(sc.n_angles) +
                         " angles, got " + std::to_string(kappa.size()));
  Vector xi(sc.n_angles);
  for (int k = 0; k < sc.K; ++k) {
    const int a_k = sc.angles_k(k);
    if (a_k > 0)
      xi.segment(sc.angle_offset[k], a_k) =
          angles_to_real(kappa.segment(sc.angle_offset[k], a_k), sc.J[k]);
  }
  return xi;
}

Vector psi_from_angles(const ChoiceStructure& sc, const Eigen::Ref<const Vector>& kappa) {
  Vector psi(sc.n);
  for (int k = 0; k < sc.K; ++k) {
    psi.segment(sc.psi_offset[k], sc.n_k[k]) =
        spherical_forward(kappa.segment(sc.angle_offset[k], sc.angles_k(k)), sc.J[k]);
  }
  return psi;
}

FactorCovariance covariance_from_psi(const ChoiceStructure& sc,
                                     const Eigen::Ref<const Vector>& psi) {
  if (psi.size() != sc.n) throw DimensionError("covariance_from_psi: psi must have length n");
  FactorCovariance fc;
  fc.B = Matrix::Zero(sc.J_total, sc.p);
  fc.d = Vector::Zero(sc.J_total);
  for (int k = 0; k < sc.K; ++k) {
    const int Jk = sc.J[k];
    const auto block = psi.segment(sc.psi_offset[k], sc.n_k[k]);
    for (int c = 0; c < sc.p; ++c)
      fc.B.block(sc.util_offset[k], c, Jk, 1) = block.segment(c * Jk, Jk);
    fc.d.segment(sc.util_offset[k], Jk) = block.segment(sc.p * Jk, Jk);
  }
  fc.sigma = fc.B * fc.B.transpose();
  fc.sigma.diagonal() += fc.d.cwiseProduct(fc.d);
  return fc;
}

FactorCovariance assemble_covariance_from_angles(const ChoiceStructure& sc,
                                                 const Eigen::Ref<const Vector>& kappa) {
  return covariance_from_psi(sc, psi_from_angles(sc, kappa));
}

FactorCovariance assemble_covariance(const ChoiceStructure& sc,
                                     const Eigen::Ref<const Vector>& xi) {
  return assemble_covariance_from_angles(sc, angles_from_unconstrained(sc, xi));
}

NormalizedCovariance normalize_covariance(const ChoiceStructure& sc, const Matrix& sigma) {
  if (sigma.rows() != sc.J_total || sigma.cols() != sc.J_total)
    throw DimensionError("normalize_covariance: sigma must be J x J");
  NormalizedCovariance out;
  out.scale = Vector(sc.K);
  for (int k = 0; k < sc.K; ++k) {
    const double tr =
        sigma.block(sc.util_offset[k], sc.util_offset[k], sc.J[k], sc.J[k]).trace();
    if (!(tr > 0)) throw DomainError("normalize_covariance: nonpositive block trace");
    out.scale[k] = std::sqrt(tr / sc.J[k]);
  }
  out.sigma = sigma;
  for (int k = 0; k < sc.K; ++k)
    for (int l = 0; l < sc.K; ++l)
      out.sigma.block(sc.util_offset[k], sc.util_offset[l], sc.J[k], sc.J[l]) /=
          out.scale[k] * out.scale[l];
  return out;
}

Matrix implied_correlations(const Matrix& sigma) {
  Vector s = sigma.diagonal().cwiseSqrt();
  return sigma.array() / (s * s.transpose()).array();
}

}  // namespace mvmnp
