#pragma once

#include <Eigen/Core>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include "nsgp/gradients.hpp"
#include "nsgp/model.hpp"
#include "nsgp/rng.hpp"

namespace nsgp {

struct HmcConfig {
  double eps0 = 0.1;          // initial step size (dual-averaged in warmup)
  int l_field = 5;            // leapfrog steps, field blocks
  int l_scalar = 3;           // leapfrog steps, low-dimensional blocks
  double target_accept = 0.8;
  // low-dimensional interweaving stages (beta_lambda, hyper variances) may
  // run as adaptive random-walk Metropolis instead of HMC; both leave the
  // posterior invariant, Metropolis skips the factor-derivative assembly
  bool hmc_scalar_blocks = true;
};

struct SamplerConfig {
  HmcConfig hmc;
  int iterations = 4000;
  int warmup = 1000;  // adapts step sizes only; warmup draws are not saved
  int thin = 1;
  std::uint64_t seed = 1;
  int chain_id = 0;
};

/// Generic potential: position -> energy, gradient optional.
struct HmcTarget {
  int dim = 0;
  std::function<double(const Eigen::VectorXd&, Eigen::VectorXd*)> eval;
};

struct HmcResult {
  bool accepted = false;
  bool divergent = false;
  double accept_prob = 0.0;
  double energy_error = 0.0;  // H(end) - H(start)
};

/// Leapfrog integration of (q, p) under the target potential; returns the
/// final potential value, or NaN on a nonfinite state.
double leapfrog(Eigen::VectorXd& q, Eigen::VectorXd& p, const HmcTarget& target,
                double eps, int n_steps);

/// One leapfrog HMC step with identity mass; exactly reversible integrator,
/// nonfinite energy rejects and flags a divergence.
HmcResult hmc_step(Eigen::VectorXd& pos, const HmcTarget& target, double eps,
                   int n_leapfrog, Rng& rng);

/// Same step with the potential and gradient at the starting position
/// supplied by the caller (they are already known from the current state).
HmcResult hmc_step_from(Eigen::VectorXd& pos, const HmcTarget& target,
                        double eps, int n_leapfrog, Rng& rng, double pot0,
                        const Eigen::VectorXd& grad0);

/// Exact draw of gamma = log sigma^2 from its truncated conjugate full
/// conditional: exp(-gamma) ~ Gamma(n/2, rate q/2) restricted to
/// [exp(-hi), exp(-lo)].
double truncated_log_variance_draw(double n, double q, double lo, double hi,
                                   Rng& rng);

/// Dual averaging of log step size toward a target acceptance rate.
struct DualAveraging {
  double mu = 0.0, log_eps = 0.0, log_eps_bar = 0.0, hbar = 0.0;
  int t = 0;
  bool initialized = false;

  void init(double eps0);
  void update(double accept_prob, double target);
  double eps(bool adapting) const;
};

/// Thinned scalar summaries plus the accumulators evaluation needs.
struct ChainTrace {
  std::vector<std::string> names;
  std::vector<Eigen::VectorXd> rows;

  Eigen::VectorXd w_mean, tau2_mean, beta_mean;
  Eigen::MatrixXd field_mean[3];  // posterior mean W per component
  double dev_mean = 0.0;
  long n_accum = 0;

  std::map<std::string, double> accept_rate;
  long divergences = 0;
  std::uint64_t seed = 0;
  int chain_id = 0;
  double elapsed_sec = 0.0;

  int column(const std::string& name) const;
  Eigen::VectorXd series(const std::string& name) const;
};

/// HMC-within-Gibbs with ancillary-sufficient interweaving. One Sampler
/// drives one chain; independent chains use independent (seed, chain_id)
/// RNG streams and share nothing mutable.
class Sampler {
public:
  Sampler(const Problem& pb, SamplerConfig cfg);

  /// Graph-colored single-site Gibbs sweep on w (exact scalar conditionals),
  /// then wstar refresh.
  void update_latent(ChainState& st, Rng& rng);

  /// Conjugate Gaussian draw of the fixed effects given (w, tau).
  void update_beta_fixed(ChainState& st, Rng& rng);

  /// One HMC step under the sufficient parametrization of w, re-map of
  /// wstar, one under the ancillary, re-map of w. Noise: sufficient only.
  void update_field_interweaved(ChainState& st, Comp c, Rng& rng, bool adapting);

  /// Centering-upon-whitening nested interweaving for the component
  /// regression coefficients.
  void update_beta_interweaved(ChainState& st, Comp c, Rng& rng, bool adapting);

  /// Whitening-whitening nested interweaving for the hyper variance
  /// (conjugate truncated draws on the sufficient stages, HMC on the
  /// ancillary ones).
  void update_hypervariance_nested(ChainState& st, Comp c, Rng& rng, bool adapting);

  /// Closed-form Gaussian draw of the component coefficients given the
  /// centered field W + X beta; lambda is unchanged by construction.
  void conjugate_beta_centered(ChainState& st, Comp c, Rng& rng);

  /// Full sweep: latent -> beta -> each active field -> its beta -> hyper.
  void iterate(ChainState& st, Rng& rng, bool adapting);

  ChainTrace run_chain(ChainState& st);
  ChainTrace run_chain();

  const std::map<std::string, DualAveraging>& step_sizes() const { return da_; }
  long divergences() const { return divergences_; }

private:
  double block_eps(const std::string& name, bool adapting);
  void record(const std::string& name, const HmcResult& r, bool adapting);
  HmcResult hmc_block(const std::string& name, Eigen::VectorXd& pos,
                      const HmcTarget& t, int L, Rng& rng, bool adapting,
                      double pot0, const Eigen::VectorXd& grad0);
  /// Random-walk Metropolis step used for low-dimensional stages when
  /// hmc_scalar_blocks is off; adaptive proposal scale during warmup.
  HmcResult mh_block(const std::string& name, Eigen::VectorXd& pos,
                     const HmcTarget& t, Rng& rng, bool adapting, double h0);
  HmcResult scalar_block(const std::string& name, Eigen::VectorXd& pos,
                         const HmcTarget& t, Rng& rng, bool adapting,
                         double pot0, const Eigen::VectorXd& grad0);

  const Problem& pb_;
  SamplerConfig cfg_;
  std::vector<std::vector<int>> colors_;
  // per-site incident rows (row, value slot) of the correlation factor
  std::vector<std::vector<std::pair<int, int>>> incident_;
  std::map<std::string, DualAveraging> da_;
  std::map<std::string, std::pair<double, long>> mh_scale_;  // log scale, step count
  std::map<std::string, std::pair<long, long>> accept_;
  long divergences_ = 0;
  ChainState scratch_;
};

/// Greedy coloring of the moral graph (row supports form cliques); sites of
/// one color have disjoint conditional dependencies and may be updated in
/// parallel.
std::vector<std::vector<int>> color_moral_graph(const NeighborDag& dag);

/// Draw from the NNGP prior: w = R^{-1} xi.
Eigen::VectorXd sample_latent_prior(const ChainState& st, Rng& rng);

/// Posterior-mean plug-in state assembled from a trace (w, beta, fields,
/// hyper variances from the saved columns).
ChainState state_from_means(const Problem& pb, const ChainTrace& tr);

/// Inverse Wishart draw (Bartlett construction).
Eigen::Matrix3d inv_wishart(double nu, const Eigen::Matrix3d& Psi, Rng& rng);

}  // namespace nsgp
