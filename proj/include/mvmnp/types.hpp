#pragma once

// Core dimension bookkeeping and data containers for the multivariate
// multinomial probit model. A unit observes K choices; choice k has J_k + 1
// categories (category 0 is the base) and J_k latent utilities.

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace mvmnp {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using IntVector = Eigen::VectorXi;
using IntMatrix = Eigen::MatrixXi;
using RowMatrix = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
using DenseVector = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <typename T>
using DenseMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic>;

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};
// Shape or index mismatch between containers and the declared structure.
struct DimensionError : Error {
  using Error::Error;
};
// Input outside the mathematical domain of an operation.
struct DomainError : Error {
  using Error::Error;
};
// Numerical failure (non-positive-definite matrix, non-finite value).
struct NumericalError : Error {
  using Error::Error;
};
// Malformed file content.
struct ParseError : Error {
  using Error::Error;
};
// Calibration procedure failed to converge or bracket.
struct CalibrationError : Error {
  using Error::Error;
};
// Optimizer state left the trust region; carries the iteration diagnostics.
struct DivergenceError : Error {
  using Error::Error;
};

// Dimension block of the model. All derived quantities are filled by make().
//
// Per choice k:
//   r_k = J_k + J_k * n_d + n_a   columns of the per-choice design block
//   n_k = J_k * (p + 1)           length of psi_k = (vec(B_k), d_k)
// Totals:
//   J = sum J_k, r = sum r_k, n = sum n_k, m = r + n.
// The unconstrained parameter vector theta = (beta, xi) has theta_dim =
// r + n - K entries because each psi_k is parameterized by n_k - 1 angles.
struct ChoiceStructure {
  int K = 0;
  std::vector<int> J;
  int n_d = 0;
  int n_a = 0;
  int p = 0;

  int J_total = 0;
  std::vector<int> r_k;
  std::vector<int> n_k;
  int r = 0;
  int n = 0;
  int m = 0;
  int n_angles = 0;
  int theta_dim = 0;

  // Prefix offsets: utilities into a stacked J-vector, coefficients into
  // beta, psi blocks into a stacked n-vector, angle blocks into xi.
  std::vector<int> util_offset;
  std::vector<int> beta_offset;
  std::vector<int> psi_offset;
  std::vector<int> angle_offset;

  // p < 0 selects the default factor count p = K.
  static ChoiceStructure make(std::vector<int> J, int n_d, int n_a, int p = -1);

  int angles_k(int k) const { return n_k[k] - 1; }
};

// Observed data. y(i, k) in [0, J_k]; x_a[k] holds the alternative-specific
// covariates of choice k with row i laid out alternative-major:
// column alt * n_a + cov is covariate cov of alternative alt (alt 0 is the
// base category).
struct Dataset {
  int N = 0;
  IntMatrix y;
  Matrix x_d;
  std::vector<RowMatrix> x_a;

  // (J_k + 1) x n_a view of the alternative covariates of observation i.
  Eigen::Map<const RowMatrix> alt_covariates(const ChoiceStructure& sc, int i, int k) const {
    return Eigen::Map<const RowMatrix>(x_a[k].data() + static_cast<std::ptrdiff_t>(i) * x_a[k].cols(),
                                       sc.J[k] + 1, sc.n_a);
  }

  void validate(const ChoiceStructure& sc) const;
};

}  // namespace mvmnp
