#include "nsgp/evaluate.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <stdexcept>

namespace nsgp {

namespace {
constexpr double kLog2Pi = 1.8378770664093454836;
}

double dic(const ChainTrace& tr, const Problem& pb) {
  if (tr.n_accum <= 0) throw std::invalid_argument("dic: empty trace");
  // deviance at posterior means of (w, beta, tau^2)
  const Dataset& d = pb.data;
  Eigen::VectorXd mu = d.X * tr.beta_mean;
  double dev_at_mean = 0.0;
  for (int x = 0; x < d.n_obs(); ++x) {
    const double r = d.z[x] - mu[x] - tr.w_mean[d.site[x]];
    dev_at_mean +=
        kLog2Pi + std::log(tr.tau2_mean[x]) + r * r / tr.tau2_mean[x];
  }
  const double pd = tr.dev_mean - dev_at_mean;
  return tr.dev_mean + pd;
}

double mse(const Eigen::VectorXd& estimate, const Eigen::VectorXd& truth) {
  if (estimate.size() != truth.size()) throw std::invalid_argument("mse: size");
  return (estimate - truth).squaredNorm() / estimate.size();
}

double log_score(const Eigen::VectorXd& z, const Eigen::VectorXd& mean,
                 const Eigen::VectorXd& var) {
  double s = 0.0;
  for (int i = 0; i < z.size(); ++i) {
    const double r = z[i] - mean[i];
    s += -0.5 * (kLog2Pi + std::log(var[i])) - 0.5 * r * r / var[i];
  }
  return s;
}

double kl_nngp(const Eigen::MatrixXd& sigma_dense, const SparseTriFactor& f) {
  const int n = f.n;
  if (sigma_dense.rows() != n || sigma_dense.cols() != n)
    throw std::invalid_argument("kl_nngp: size mismatch");
  Eigen::LLT<Eigen::MatrixXd> llt(sigma_dense);
  if (llt.info() != Eigen::Success)
    throw std::invalid_argument("kl_nngp: dense covariance not SPD");
  Eigen::MatrixXd L = llt.matrixL();
  // tr(Sigma R^T R) = ||R L||_F^2, row by row of R
  double tr = 0.0;
#pragma omp parallel for reduction(+ : tr) schedule(static)
  for (int r = 0; r < n; ++r) {
    Eigen::RowVectorXd row = f.diag[r] * L.row(r);
    for (int t = f.offset[r]; t < f.offset[r + 1]; ++t)
      row += f.vals[t] * L.row(f.cols[t]);
    // L is lower triangular: columns beyond r of every term are zero
    tr += row.head(r + 1).squaredNorm();
  }
  const double logdet_sigma =
      2.0 * L.diagonal().array().log().sum();
  const double logdet_q = 2.0 * f.logdet();  // log |R^T R|
  return 0.5 * (tr - n - logdet_q - logdet_sigma);
}

Eigen::Vector3d overmodel_indicators(const Eigen::Matrix3d& S) {
  Eigen::MatrixXd logS = spd_log(S);
  // unit identity direction in vech coordinates and its completion
  const double r2 = 1.0 / std::sqrt(2.0);
  Eigen::Vector3d v(r2, 0.0, r2);
  Eigen::Vector3d u(r2, 0.0, -r2);
  Eigen::Vector3d x(0.0, 1.0, 0.0);
  return {v.dot(logS * v), u.dot(logS * u), x.dot(logS * x)};
}

Eigen::MatrixXd overmodel_diag(const ChainTrace& tr, const std::string& comp) {
  const int c0 = tr.column(comp + ".S.0");
  Eigen::MatrixXd out(tr.rows.size(), 3);
  for (std::size_t i = 0; i < tr.rows.size(); ++i) {
    Eigen::VectorXd s6 = tr.rows[i].segment(c0, 6);
    out.row(i) = overmodel_indicators(unvech(s6)).transpose();
  }
  return out;
}

double gelman_rubin(const std::vector<Eigen::VectorXd>& chains) {
  if (chains.size() < 2) throw std::invalid_argument("gelman_rubin: need >= 2 chains");
  // split each chain in half
  std::vector<Eigen::VectorXd> halves;
  for (const auto& c : chains) {
    const int n = static_cast<int>(c.size());
    if (n < 4) throw std::invalid_argument("gelman_rubin: chains too short");
    halves.push_back(c.head(n / 2));
    halves.push_back(c.tail(n / 2));
  }
  const int m = static_cast<int>(halves.size());
  const int n = static_cast<int>(halves[0].size());
  Eigen::VectorXd means(m), vars(m);
  for (int j = 0; j < m; ++j) {
    means[j] = halves[j].mean();
    vars[j] = (halves[j].array() - means[j]).square().sum() / (n - 1);
  }
  const double w = vars.mean();
  const double grand = means.mean();
  const double b = n * (means.array() - grand).square().sum() / (m - 1);
  if (w <= 0.0)
    throw std::invalid_argument("gelman_rubin: degenerate (constant) chains");
  const double var_plus = (n - 1.0) / n * w + b / n;
  return std::sqrt(var_plus / w);
}

double gelman_rubin(const std::vector<ChainTrace>& traces,
                    const std::string& parameter) {
  std::vector<Eigen::VectorXd> chains;
  for (const auto& t : traces) chains.push_back(t.series(parameter));
  return gelman_rubin(chains);
}

double median(Eigen::VectorXd v) {
  if (v.size() == 0) throw std::invalid_argument("median: empty");
  std::sort(v.data(), v.data() + v.size());
  const int n = static_cast<int>(v.size());
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

}  // namespace nsgp
