#pragma once

#include <Eigen/Core>
#include <vector>

#include "nsgp/model.hpp"
#include "nsgp/sampler.hpp"

namespace nsgp {

/// Per-run comparison summary.
struct Scorecard {
  double dic = 0.0;
  double mse_smooth = 0.0;
  double mse_pred = 0.0;
  double logdens_observed = 0.0;
  double logdens_unobserved = 0.0;
};

/// Deviance Information Criterion with conditional-likelihood focus:
/// D = -2 log f(z | w, beta, tau); DIC = mean D + (mean D - D at the
/// posterior means of (w, beta, tau^2)).
double dic(const ChainTrace& tr, const Problem& pb);

/// Mean squared error between an estimated and a true field.
double mse(const Eigen::VectorXd& estimate, const Eigen::VectorXd& truth);

/// Gaussian log density of responses at plug-in predictive moments
/// (posterior means of the location and of tau^2).
double log_score(const Eigen::VectorXd& z, const Eigen::VectorXd& mean,
                 const Eigen::VectorXd& var);

/// KL( N(0, Sigma_dense) || NNGP(factor) ) for zero-mean Gaussians,
/// 0.5 (tr(Sigma Q) - n + log|Q|^{-1} - log|Sigma|) with Q = R^T R.
double kl_nngp(const Eigen::MatrixXd& sigma_dense, const SparseTriFactor& factor);

/// Log-scale anisotropy indicators of an elliptic hyper covariance sample:
/// v log(S) v^T, u log(S) u^T, x log(S) x^T with v the unit identity
/// direction in vech coordinates and {u, x} its Gram-Schmidt completion.
Eigen::Vector3d overmodel_indicators(const Eigen::Matrix3d& S);

/// The three indicator traces from saved vech(S) columns of a trace.
Eigen::MatrixXd overmodel_diag(const ChainTrace& tr,
                               const std::string& comp = "range");

/// Split-chain potential scale reduction factor over >= 2 chains.
double gelman_rubin(const std::vector<Eigen::VectorXd>& chains);
double gelman_rubin(const std::vector<ChainTrace>& traces,
                    const std::string& parameter);

double median(Eigen::VectorXd v);

}  // namespace nsgp
