#pragma once

#include <Eigen/Core>
#include <string>
#include <vector>

namespace nsgp {

/// Matern correlations with half-integer smoothness; closed forms only.
enum class Kernel { exponential, matern32 };

Kernel kernel_from_string(const std::string& s);
std::string to_string(Kernel k);

/// K(0) = 1, nonincreasing, positive.
double isotropic_corr(Kernel k, double t);

/// Paciorek-Schervish correlation with scalar ranges: the restriction of
/// the elliptic form to A = alpha * I_d. alpha plays the role of the
/// Mahalanobis matrix diagonal, so the kernel argument is d_E/sqrt(mean
/// alpha) and the prefactor is (sqrt(2) a^{1/4} a'^{1/4} / (a+a')^{1/2})^d.
double nonstat_corr_scalar(int d, double dist, double alpha_s, double alpha_t,
                           Kernel k);

/// Elliptic form: 2^{d/2}|A|^{1/4}|A'|^{1/4}|A+A'|^{-1/2} K(d_M), with d_M
/// the Mahalanobis distance under (A+A')/2.
double nonstat_corr_matrix(const Eigen::VectorXd& diff, const Eigen::MatrixXd& A_s,
                           const Eigen::MatrixXd& A_t, Kernel k);

/// Matrix log/exp of SPD / symmetric matrices via eigendecomposition.
/// spd_log throws on asymmetry beyond 1e-10 or a nonpositive eigenvalue.
Eigen::MatrixXd spd_log(const Eigen::MatrixXd& A);
Eigen::MatrixXd spd_exp(const Eigen::MatrixXd& L);

/// Symmetric square root (eigendecomposition convention, fixed so finite
/// difference Jacobians of S^{1/2} are well defined).
Eigen::MatrixXd spd_sqrt(const Eigen::MatrixXd& A);

/// Lower-triangular column stacking of a symmetric matrix and its inverse.
Eigen::VectorXd vech(const Eigen::MatrixXd& S);
Eigen::MatrixXd unvech(const Eigen::VectorXd& v);

/// Closed-form 2x2 symmetric matrix exponential (hot path for elliptic
/// ranges); equals spd_exp to rounding.
void sym2_exp(double a11, double a21, double a22, double& e11, double& e21,
              double& e22);
/// Closed-form 2x2 SPD matrix logarithm; equals spd_log to rounding.
void sym2_log(double a11, double a21, double a22, double& l11, double& l21,
              double& l22);

/// Per-site covariance parameters on the natural scale. Elliptic ranges
/// store A(s) row-wise as (a11, a21, a22) with the determinant cached.
struct CovParams {
  Eigen::VectorXd sigma;   // marginal sd per site
  bool elliptic = false;
  Eigen::VectorXd alpha;         // scalar ranges (when !elliptic)
  Eigen::MatrixXd A;             // n x 3 (a11, a21, a22) when elliptic
  Eigen::VectorXd detA;          // cached |A(s)|
  Eigen::MatrixXd logA;          // n x 3 vech(log A), kept for derivatives
  Kernel kernel = Kernel::exponential;
  int dim = 2;

  int n() const { return static_cast<int>(sigma.size()); }
};

CovParams stationary_params(int n, int dim, double sigma2, double alpha, Kernel k);

/// Correlation between ordered sites a and b (coordinates given); sigma not
/// applied.
double corr_entry(const CovParams& p, const Eigen::RowVectorXd& xa,
                  const Eigen::RowVectorXd& xb, int a, int b);

/// Dense covariance block over a set of sites: Sigma_ij = sigma_i sigma_j K0.
/// `sites` indexes into p and coords rows.
Eigen::MatrixXd covariance_block(const Eigen::MatrixXd& coords,
                                 const std::vector<int>& sites,
                                 const CovParams& p);

/// Full dense covariance over all sites (test oracles, KL benchmarks).
Eigen::MatrixXd dense_covariance(const Eigen::MatrixXd& coords, const CovParams& p);

}  // namespace nsgp
