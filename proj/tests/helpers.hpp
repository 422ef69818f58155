#pragma once

#include <Eigen/Dense>

#include "nsgp/io.hpp"
#include "nsgp/model.hpp"
#include "nsgp/rng.hpp"

namespace nsgp::testing {

inline Eigen::MatrixXd random_coords(int n, int d, Rng& rng, double side = 5.0) {
  Eigen::MatrixXd c(n, d);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < d; ++k) c(i, k) = rng.uniform(0.0, side);
  return c;
}

inline Eigen::VectorXd random_normal(int n, Rng& rng, double sd = 1.0) {
  Eigen::VectorXd v(n);
  for (int i = 0; i < n; ++i) v[i] = sd * rng.normal();
  return v;
}

inline Eigen::MatrixXd random_normal_mat(int r, int c, Rng& rng, double sd = 1.0) {
  Eigen::MatrixXd M(r, c);
  for (int i = 0; i < r; ++i)
    for (int j = 0; j < c; ++j) M(i, j) = sd * rng.normal();
  return M;
}

inline Eigen::MatrixXd random_spd(int d, Rng& rng) {
  Eigen::MatrixXd B = random_normal_mat(d, d, rng);
  return B * B.transpose() + 0.2 * Eigen::MatrixXd::Identity(d, d);
}

/// Dataset with a few observations per site on random locations.
inline Dataset random_dataset(int n, Rng& rng, double side = 5.0,
                              int extra_obs = 10, int p = 1) {
  Dataset ds;
  ds.locs = make_locations(random_coords(n, 2, rng, side));
  const int nobs = n + extra_obs;
  ds.z = random_normal(nobs, rng);
  ds.X = Eigen::MatrixXd::Ones(nobs, p);
  for (int k = 1; k < p; ++k)
    for (int x = 0; x < nobs; ++x) ds.X(x, k) = rng.normal();
  ds.X_theta = Eigen::MatrixXd::Ones(n, 1);
  ds.X_tau = Eigen::MatrixXd::Ones(nobs, 1);
  ds.site.resize(nobs);
  for (int i = 0; i < n; ++i) ds.site[i] = i;
  for (int x = n; x < nobs; ++x) ds.site[x] = static_cast<int>(rng.index(n));
  ds.rebuild_obs_index();
  return ds;
}

struct TestProblem {
  Problem pb;
  ChainState st;
};

/// Problem with all requested components active, fields randomized, and a
/// latent draw consistent with the covariance.
inline TestProblem random_problem(int n, int m, Rng& rng, bool nonstat_sigma2,
                                  bool nonstat_range, bool nonstat_noise,
                                  RangeKind kind = RangeKind::scalar,
                                  double field_sd = 0.4) {
  ModelConfig mc;
  mc.nonstat_sigma2 = nonstat_sigma2;
  mc.nonstat_range = nonstat_range;
  mc.nonstat_noise = nonstat_noise;
  mc.range_kind = kind;
  mc.m = m;
  mc.ordering = Ordering::maxmin;
  TestProblem tp{make_problem(random_dataset(n, rng), mc), {}};
  tp.st = init_state(tp.pb);
  ChainState& st = tp.st;
  auto randomize = [&](FieldComponent& f) {
    if (!f.active) return;
    f.W = random_normal_mat(n, f.ncoord, rng, field_sd);
    f.gamma = -1.0;
    if (f.ncoord == 3) {
      Eigen::MatrixXd B = random_normal_mat(3, 3, rng, 0.3);
      f.S = B * B.transpose() + 0.3 * Eigen::Matrix3d::Identity();
    }
  };
  randomize(st.sig);
  randomize(st.rng);
  randomize(st.noi);
  refresh_covariance(tp.pb, st);
  refresh_tau(tp.pb, st);
  for (Comp c : {Comp::sigma2, Comp::range, Comp::noise}) {
    FieldComponent& f = st.comp(c);
    if (f.active) f.Wstar = hyper_whiten(tp.pb, f);
  }
  st.w = random_normal(n, rng, 0.8);
  st.wstar = whiten(st, st.w);
  return tp;
}

/// Dense log N(w; 0, Sigma) oracle.
inline double dense_gaussian_logpdf(const Eigen::VectorXd& w,
                                    const Eigen::MatrixXd& sigma) {
  Eigen::LLT<Eigen::MatrixXd> llt(sigma);
  const double logdet =
      2.0 * Eigen::MatrixXd(llt.matrixL()).diagonal().array().log().sum();
  const double qf = w.dot(llt.solve(w));
  return -0.5 * (logdet + qf + w.size() * 1.8378770664093454836);
}

/// Central-difference directional derivative of a scalar function.
template <typename F>
double directional_fd(F&& f, const Eigen::VectorXd& x, const Eigen::VectorXd& dir,
                      double h) {
  return (f(x + h * dir) - f(x - h * dir)) / (2.0 * h);
}

/// Relative error with an absolute floor for near-zero references.
inline double rel_err(double got, double want, double floor_ = 1e-8) {
  return std::abs(got - want) / std::max(std::abs(want), floor_);
}

}  // namespace nsgp::testing
