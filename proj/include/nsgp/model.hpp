#pragma once

#include <Eigen/Core>
#include <limits>
#include <optional>
#include <vector>

#include "nsgp/factor.hpp"
#include "nsgp/geometry.hpp"
#include "nsgp/kernels.hpp"

namespace nsgp {

/// Observations tied to spatial sites through an index map (the matching
/// matrix stored as an index array). Every observation maps to exactly one
/// site; every site has at least one observation.
struct Dataset {
  Eigen::VectorXd z;               // |z|
  Eigen::MatrixXd X;               // |z| x p fixed-effect covariates
  std::vector<int> site;           // |z| -> site index
  Eigen::MatrixXd X_theta;         // n x p_theta, site-level covariates
  Eigen::MatrixXd X_tau;           // |z| x p_tau, observation-level covariates
  LocationSet locs;                // n sites
  std::vector<std::vector<int>> obs_at;  // per site, observation indices

  int n_obs() const { return static_cast<int>(z.size()); }
  int n_sites() const { return locs.n(); }
  void rebuild_obs_index();
  void validate() const;
};

/// Permute sites into a build order; observation site indices are remapped.
Dataset reorder_dataset(const Dataset& ds, const std::vector<int>& order);

enum class RangeKind { scalar, elliptic };
enum class Comp { sigma2, range, noise };

struct SPrior {
  // default: reference prior |S|^{-(q+1)/2} restricted to the log-eigenvalue
  // box; optionally an inverse-Wishart (proper, used by the Geweke harness)
  bool inverse_wishart = false;
  double nu0 = 5.0;
  Eigen::Matrix3d Psi0 = Eigen::Matrix3d::Identity();
};

struct ModelConfig {
  bool nonstat_sigma2 = false;
  bool nonstat_range = false;
  bool nonstat_noise = false;
  RangeKind range_kind = RangeKind::scalar;
  Kernel kernel = Kernel::exponential;
  int m = 10;
  Ordering ordering = Ordering::maxmin;

  Kernel hyper_kernel = Kernel::matern32;
  double hyper_range = -1.0;  // <= 0: one tenth of the domain diameter
  double gamma_lo = -8.0, gamma_hi = 3.0;
  SPrior s_prior;
  double beta_prior_var = std::numeric_limits<double>::infinity();
  double fd_step = 1e-6;  // one-sided step for dR/dW on the log scale
};

/// One spatially varying covariance component: site field W (ncoord columns;
/// 3 for the elliptic range as vech(log A)), regression coefficients, and
/// the log-NNGP hyper variance (gamma = log sigma^2_lambda, or S elliptic).
struct FieldComponent {
  bool active = false;
  int ncoord = 1;
  Eigen::MatrixXd W;      // n x ncoord
  Eigen::MatrixXd Wstar;  // n x ncoord, hyper-whitened
  Eigen::MatrixXd beta;   // p x ncoord
  double gamma = -4.0;
  Eigen::Matrix3d S = Eigen::Matrix3d::Identity() * 1e-2;

  double sigma_lambda() const { return std::exp(0.5 * gamma); }
};

/// Immutable problem description: data in build order, the Vecchia DAG,
/// and the (stationary) hyper-prior correlation factor shared by the
/// component fields.
struct Problem {
  ModelConfig cfg;
  Dataset data;                 // in build order
  NeighborDag dag;
  Eigen::MatrixXd coords;       // ordered n x d
  SparseTriFactor hyper;        // G, hyper correlation factor on the same DAG
  std::vector<int> order;       // original index per position

  int n() const { return dag.n(); }
};

Problem make_problem(const Dataset& ds, const ModelConfig& cfg,
                     std::uint64_t order_seed = 0);

/// Full MCMC state. The correlation factor of the latent prior and the
/// natural-scale parameters are caches, refreshed whenever a field moves.
struct ChainState {
  Eigen::VectorXd w, wstar;
  Eigen::VectorXd beta;  // p
  FieldComponent sig, rng, noi;

  CovParams params;           // sigma, alpha/A on natural scale
  CovParams corr_params;      // same ranges with sigma = 1 (matches corr)
  SparseTriFactor corr;       // F0: correlation factor of the latent prior
  Eigen::VectorXd tau2;       // per observation

  FieldComponent& comp(Comp c) {
    return c == Comp::sigma2 ? sig : (c == Comp::range ? rng : noi);
  }
  const FieldComponent& comp(Comp c) const {
    return c == Comp::sigma2 ? sig : (c == Comp::range ? rng : noi);
  }
};

ChainState init_state(const Problem& pb);

/// Natural-scale parameters from the component fields (exp, or matrix exp
/// of unvech per site for the elliptic range).
CovParams field_to_params(const Problem& pb, const ChainState& st);
Eigen::VectorXd field_to_tau2(const Problem& pb, const ChainState& st);

/// Refresh params + correlation factor (+ tau2) after a field change.
void refresh_covariance(const Problem& pb, ChainState& st);
void refresh_tau(const Problem& pb, ChainState& st);
/// Marginal-sd-only refresh; the correlation factor does not depend on the
/// sigma field (scaling identity), so range caches are kept.
void refresh_sigma(const Problem& pb, ChainState& st);

/// Latent whitening through the current factor: wstar = R w, w = R^{-1} wstar.
/// R = F0 diag(sigma)^{-1}.
Eigen::VectorXd whiten(const ChainState& st, const Eigen::VectorXd& w);
Eigen::VectorXd unwhiten(const ChainState& st, const Eigen::VectorXd& wstar);

enum class CenterDir { center, uncenter };
/// W_centered = W + X beta (and back).
Eigen::MatrixXd center_field(const Eigen::MatrixXd& W, const Eigen::MatrixXd& X,
                             const Eigen::MatrixXd& beta, CenterDir dir);

/// Design matrix of component c (X_theta for sigma2/range, X_tau for noise).
const Eigen::MatrixXd& design(const Problem& pb, Comp c);

/// Hyper whitening maps for a component field.
Eigen::MatrixXd hyper_whiten(const Problem& pb, const FieldComponent& f);
Eigen::MatrixXd hyper_unwhiten(const Problem& pb, const FieldComponent& f);

/// Gaussian data log density given the state (the DIC deviance is -2 times
/// this).
double data_loglik(const Problem& pb, const ChainState& st);

/// Latent NNGP log density of w given the covariance fields.
double latent_logprior(const Problem& pb, const ChainState& st);

/// Log posterior up to an additive constant; -inf signals an out-of-bounds
/// hyper variance. Nonfinite otherwise signals an invalid state.
double log_posterior(const Problem& pb, const ChainState& st);

/// Log density of vech field under N(0, hyper x S) / scalar analogue,
/// plus the hyper-variance prior; used by log_posterior and tests.
double field_logprior(const Problem& pb, const ChainState& st, Comp c);
double hyper_logprior(const Problem& pb, const FieldComponent& f);

}  // namespace nsgp
