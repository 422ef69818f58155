#pragma once

#include <Eigen/Core>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "nsgp/evaluate.hpp"
#include "nsgp/model.hpp"
#include "nsgp/rng.hpp"
#include "nsgp/sampler.hpp"

namespace nsgp {

// ---- synthetic data (desk-scale version of the paper protocol) ----

struct SimSpec {
  double side = 5.0;
  int n_total = 12000;
  int n_train = 10000;
  int n_obs = 20000;
  bool nonstat_sigma2 = false;
  bool nonstat_range = false;
  bool nonstat_noise = false;
  RangeKind range_kind = RangeKind::scalar;
  Kernel kernel = Kernel::exponential;
  // hyper fields: Matern, range 0.5, variance 0.5; smoothness fixed at 1.5
  Kernel hyper_kernel = Kernel::matern32;
  double hyper_range = 0.5;
  double hyper_var = 0.5;
  double mean_log_sigma2 = 0.0;
  double mean_log_alpha = std::log(0.1);
  double mean_log_tau2 = std::log(0.1);
  double beta0 = 1.0;
  int m = 10;
  std::uint64_t seed = 1;

  void validate() const;
};

struct SimTruth {
  Eigen::VectorXd w_train;       // latent at training sites
  Eigen::VectorXd w_test;        // latent at held-out sites
  Eigen::MatrixXd test_coords;
  CovParams params_train;        // true fields at training sites
  Eigen::VectorXd tau2;          // per observation
  Eigen::MatrixXd field_sigma2;  // n_train x 1 log fields (0 when stationary)
  Eigen::MatrixXd field_range;   // n_train x ncoord
  Eigen::MatrixXd field_noise;   // n_train x 1
};

std::pair<Dataset, SimTruth> simulate_dataset(const SimSpec& spec, Rng& rng);

// ---- prediction at new sites ----

struct PredictResult {
  Eigen::VectorXd mean;  // conditional mean of w at each new site
  Eigen::VectorXd var;   // conditional variance
  Eigen::MatrixXd draws; // n_new x ndraws (empty when ndraws = 0)
};

/// Conditional Gaussian of the latent at new sites given their m nearest
/// training parents; parameter fields are carried to the new sites by their
/// hyper-kernel conditional means.
PredictResult predict_latent(const Problem& pb, const ChainState& st,
                             const Eigen::MatrixXd& newlocs,
                             const Eigen::MatrixXd& X_theta_new, int m,
                             Rng& rng, int ndraws = 0);

// ---- predictive-process spatial basis ----

struct SpatialBasis {
  Eigen::MatrixXd U;        // n x r, orthonormal columns
  Eigen::VectorXd D;        // r singular values, nonincreasing
  Eigen::MatrixXd V;        // k x r
  std::vector<int> anchors; // first k order positions
};

/// B = R^{-1} M by k triangular solves, truncated SVD via the k x k
/// eigendecomposition of B^T B.
SpatialBasis spatial_basis(const SparseTriFactor& f, int k, int r);

/// Basis rows at prediction sites through the prolonged factor; reduces to
/// the training rows exactly when prediction sites coincide with training
/// sites. joint_params covers train sites then prediction sites.
Eigen::MatrixXd basis_at_predictions(const SpatialBasis& basis,
                                     const Eigen::MatrixXd& train,
                                     const Eigen::MatrixXd& pred,
                                     const CovParams& joint_params, int m);

// ---- files ----

/// Sites CSV: header id,x[,y][,extra covariate columns); returns locations
/// and the site-level design (intercept prepended).
struct SiteTable {
  LocationSet locs;
  Eigen::MatrixXd X_theta;  // n x (1 + extras)
  std::vector<std::string> covariate_names;
};

SiteTable read_sites_csv(const std::string& path);
void write_sites_csv(const std::string& path, const LocationSet& locs,
                     const Eigen::MatrixXd& extra = {},
                     const std::vector<std::string>& extra_names = {});

/// Observations CSV: header site_id,z[,covariates...]; joined against the
/// site table by id. An intercept column is prepended to X.
Dataset read_dataset_csv(const std::string& obs_path, const std::string& sites_path);
void write_obs_csv(const std::string& path, const Dataset& ds);

void write_trace_csv(const std::string& path, const ChainTrace& tr);
ChainTrace read_trace_csv(const std::string& path);

void write_run_metadata(const std::string& path, const ChainTrace& tr,
                        const std::string& config_text);

/// Generic numeric table with a header row.
void write_table_csv(const std::string& path,
                     const std::vector<std::string>& names,
                     const Eigen::MatrixXd& rows);
std::pair<std::vector<std::string>, Eigen::MatrixXd> read_table_csv(
    const std::string& path);

// ---- config ----

/// Flat key = value config with # comments; schema_version checked.
class Config {
public:
  static Config parse_file(const std::string& path);
  static Config parse_string(const std::string& text);

  bool has(const std::string& key) const;
  std::string get(const std::string& key, const std::string& dflt) const;
  double get(const std::string& key, double dflt) const;
  int get(const std::string& key, int dflt) const;
  bool get(const std::string& key, bool dflt) const;

  std::string text() const { return text_; }

  ModelConfig model_config() const;
  SamplerConfig sampler_config() const;
  SimSpec sim_spec() const;

private:
  std::map<std::string, std::string> kv_;
  std::string text_;
};

}  // namespace nsgp
