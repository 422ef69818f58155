#pragma once

#include <Eigen/Core>

#include "nsgp/model.hpp"

namespace nsgp {

// All gradients below are taken of the *negated* log-density part they
// belong to (the potential side), so HMC consumes them directly. Central
// finite differences of the matching potential are the test oracle.

/// d(-log f(z|w,beta,tau)) / d w(s): sum over the site's observations of
/// (w(s) - (z - X beta)) / tau^2.
Eigen::VectorXd grad_latent_data(const Problem& pb, const ChainState& st);

/// Prior-whitened gradient of the full potential for a component field:
/// Wstar + zeta^{T/2} gradP, with zeta^{-1/2} the hyper factor scaled by
/// the component's hyper variance (Wstar - zeta^{T/2} grad g in the
/// log-density orientation).
Eigen::MatrixXd whiten_gradient(const Problem& pb, const FieldComponent& f,
                                const Eigen::MatrixXd& gradP);

/// Marginal variance field, sufficient parametrization: the field enters
/// the latent NNGP density. (1/2,...) - sigma^{-1} o (diag(w) R0^T R0
/// diag(w) sigma^{-1}) / 2.
Eigen::VectorXd grad_sigma_sufficient(const Problem& pb, const ChainState& st);

/// Marginal variance field, ancillary parametrization: the field moves the
/// latent through w = R^{-1} w*; reduces to grad_latent_data o (w/2).
Eigen::VectorXd grad_sigma_ancillary(const Problem& pb, const ChainState& st);

/// Range field, sufficient: (w^T R^T)(dR/dW) w minus the log-determinant
/// term, via the sparse factor derivative. One column per vech coordinate.
Eigen::MatrixXd grad_range_sufficient(const Problem& pb, const ChainState& st,
                                      const FactorDerivativeSet& ds);

/// Range field, ancillary: -(grad_w(-l))^T R^{-1} (dR/dW) w with w held
/// through w = R^{-1} w*.
Eigen::MatrixXd grad_range_ancillary(const Problem& pb, const ChainState& st,
                                     const FactorDerivativeSet& ds);

/// Noise field (sufficient only): per observation 1/2 - r^2/(2 tau^2).
Eigen::VectorXd grad_tau_obs(const Problem& pb, const ChainState& st);
/// Summed per site.
Eigen::VectorXd grad_tau(const Problem& pb, const ChainState& st);

/// Chain rule onto regression coefficients: X_lambda^T grad_field.
/// grad_field has n rows (|z| rows for the noise component).
Eigen::MatrixXd grad_beta_field(const Problem& pb, Comp c,
                                const Eigen::MatrixXd& grad_field);

/// Gradient of the potential with respect to the elliptic hyper covariance
/// S, holding the whitened field fixed: W = (G^{-1} W*) S^{1/2}, with
/// dS^{1/2}/dS by one-sided finite differences (step h).
Eigen::Matrix3d grad_S(const Problem& pb, const FieldComponent& f,
                       const Eigen::MatrixXd& gradP, double h = 1e-6);

}  // namespace nsgp
