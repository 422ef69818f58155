#include "nsgp/model.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>

namespace nsgp {

namespace {
constexpr double kLog2Pi = 1.8378770664093454836;
}

void Dataset::rebuild_obs_index() {
  obs_at.assign(n_sites(), {});
  for (int x = 0; x < n_obs(); ++x) obs_at[site[x]].push_back(x);
}

void Dataset::validate() const {
  if (static_cast<int>(site.size()) != n_obs())
    throw std::invalid_argument("dataset: site map length mismatch");
  for (int s : site)
    if (s < 0 || s >= n_sites())
      throw std::invalid_argument("dataset: observation maps outside sites");
  std::vector<int> cnt(n_sites(), 0);
  for (int s : site) cnt[s]++;
  for (int c : cnt)
    if (c == 0) throw std::invalid_argument("dataset: site without observation");
  if (X.rows() != z.size() || X_tau.rows() != z.size())
    throw std::invalid_argument("dataset: design row mismatch");
  if (X_theta.rows() != n_sites())
    throw std::invalid_argument("dataset: X_theta row mismatch");
}

Dataset reorder_dataset(const Dataset& ds, const std::vector<int>& order) {
  const int n = ds.n_sites();
  std::vector<int> pos(n);
  for (int k = 0; k < n; ++k) pos[order[k]] = k;
  Dataset out = ds;
  for (int k = 0; k < n; ++k) {
    out.locs.coords.row(k) = ds.locs.coords.row(order[k]);
    out.locs.ids[k] = ds.locs.ids[order[k]];
    out.X_theta.row(k) = ds.X_theta.row(order[k]);
  }
  for (int x = 0; x < ds.n_obs(); ++x) out.site[x] = pos[ds.site[x]];
  out.rebuild_obs_index();
  return out;
}

Problem make_problem(const Dataset& ds, const ModelConfig& cfg,
                     std::uint64_t order_seed) {
  ds.validate();
  Problem pb;
  pb.cfg = cfg;
  pb.order = order_locations(ds.locs, cfg.ordering, order_seed);
  pb.data = reorder_dataset(ds, pb.order);
  pb.coords = pb.data.locs.coords;
  pb.dag = build_dag(pb.coords, cfg.m);
  double hr = cfg.hyper_range;
  if (hr <= 0.0) {
    Eigen::VectorXd span =
        pb.coords.colwise().maxCoeff() - pb.coords.colwise().minCoeff();
    hr = 0.1 * span.norm();
    pb.cfg.hyper_range = hr;
  }
  CovParams hp = stationary_params(pb.n(), pb.data.locs.dim(), 1.0, hr * hr,
                                   cfg.hyper_kernel);
  pb.hyper = build_factor(pb.dag, pb.coords, hp);
  return pb;
}

const Eigen::MatrixXd& design(const Problem& pb, Comp c) {
  return c == Comp::noise ? pb.data.X_tau : pb.data.X_theta;
}

ChainState init_state(const Problem& pb) {
  const int n = pb.n();
  ChainState st;
  st.w = Eigen::VectorXd::Zero(n);
  st.beta = Eigen::VectorXd::Zero(pb.data.X.cols());
  auto init_comp = [&](FieldComponent& f, bool active, int ncoord, Comp c) {
    f.active = active;
    f.ncoord = ncoord;
    f.W = Eigen::MatrixXd::Zero(n, ncoord);
    f.Wstar = Eigen::MatrixXd::Zero(n, ncoord);
    f.beta = Eigen::MatrixXd::Zero(design(pb, c).cols(), ncoord);
    f.gamma = -4.0;
    f.S = Eigen::Matrix3d::Identity() * std::exp(-4.0);
  };
  const bool ell =
      pb.cfg.nonstat_range && pb.cfg.range_kind == RangeKind::elliptic;
  init_comp(st.sig, pb.cfg.nonstat_sigma2, 1, Comp::sigma2);
  init_comp(st.rng, pb.cfg.nonstat_range, ell ? 3 : 1, Comp::range);
  init_comp(st.noi, pb.cfg.nonstat_noise, 1, Comp::noise);
  // default intercepts: unit variance, range a tenth of the domain, modest noise
  Eigen::VectorXd span =
      pb.coords.colwise().maxCoeff() - pb.coords.colwise().minCoeff();
  const double alpha0 = std::max(1e-8, 0.01 * span.squaredNorm());
  if (st.rng.beta.rows() > 0) {
    if (ell) {
      st.rng.beta(0, 0) = std::log(alpha0);
      st.rng.beta(0, 2) = std::log(alpha0);
    } else {
      st.rng.beta(0, 0) = std::log(alpha0);
    }
  }
  if (st.noi.beta.rows() > 0) st.noi.beta(0, 0) = std::log(0.1);
  refresh_covariance(pb, st);
  refresh_tau(pb, st);
  st.wstar = whiten(st, st.w);
  return st;
}

CovParams field_to_params(const Problem& pb, const ChainState& st) {
  const int n = pb.n();
  CovParams p;
  p.kernel = pb.cfg.kernel;
  p.dim = pb.data.locs.dim();
  Eigen::VectorXd logs2 =
      pb.data.X_theta * st.sig.beta.col(0) + st.sig.W.col(0);
  p.sigma = (0.5 * logs2).array().exp();
  if (st.rng.ncoord == 1) {
    Eigen::VectorXd loga =
        pb.data.X_theta * st.rng.beta.col(0) + st.rng.W.col(0);
    p.alpha = loga.array().exp();
    p.elliptic = false;
  } else {
    p.elliptic = true;
    p.logA = pb.data.X_theta * st.rng.beta + st.rng.W;  // n x 3
    p.A.resize(n, 3);
    p.detA.resize(n);
    for (int s = 0; s < n; ++s) {
      double e11, e21, e22;
      sym2_exp(p.logA(s, 0), p.logA(s, 1), p.logA(s, 2), e11, e21, e22);
      p.A(s, 0) = e11;
      p.A(s, 1) = e21;
      p.A(s, 2) = e22;
      p.detA[s] = e11 * e22 - e21 * e21;
    }
  }
  return p;
}

Eigen::VectorXd field_to_tau2(const Problem& pb, const ChainState& st) {
  Eigen::VectorXd logt = pb.data.X_tau * st.noi.beta.col(0);
  for (int x = 0; x < pb.data.n_obs(); ++x)
    logt[x] += st.noi.W(pb.data.site[x], 0);
  return logt.array().exp();
}

void refresh_covariance(const Problem& pb, ChainState& st) {
  st.params = field_to_params(pb, st);
  // correlation factor: unit sigmas, the sigma field enters via the scaling
  // identity R = F0 diag(sigma)^{-1}
  st.corr_params = st.params;
  st.corr_params.sigma = Eigen::VectorXd::Ones(pb.n());
  st.corr = build_factor(pb.dag, pb.coords, st.corr_params);
}

void refresh_tau(const Problem& pb, ChainState& st) {
  st.tau2 = field_to_tau2(pb, st);
}

void refresh_sigma(const Problem& pb, ChainState& st) {
  Eigen::VectorXd logs2 = pb.data.X_theta * st.sig.beta.col(0) + st.sig.W.col(0);
  st.params.sigma = (0.5 * logs2).array().exp();
}

Eigen::VectorXd whiten(const ChainState& st, const Eigen::VectorXd& w) {
  return st.corr.apply(w.cwiseQuotient(st.params.sigma));
}

Eigen::VectorXd unwhiten(const ChainState& st, const Eigen::VectorXd& wstar) {
  return st.params.sigma.cwiseProduct(
      tri_solve(st.corr, wstar, TriSolveMode::forward));
}

Eigen::MatrixXd center_field(const Eigen::MatrixXd& W, const Eigen::MatrixXd& X,
                             const Eigen::MatrixXd& beta, CenterDir dir) {
  if (dir == CenterDir::center) return W + X * beta;
  return W - X * beta;
}

Eigen::MatrixXd hyper_whiten(const Problem& pb, const FieldComponent& f) {
  Eigen::MatrixXd ws(f.W.rows(), f.ncoord);
  if (f.ncoord == 1) {
    ws.col(0) = pb.hyper.apply(f.W.col(0)) / f.sigma_lambda();
  } else {
    Eigen::MatrixXd GW(f.W.rows(), 3);
    for (int c = 0; c < 3; ++c) GW.col(c) = pb.hyper.apply(f.W.col(c));
    Eigen::Matrix3d Sinvhalf = spd_sqrt(f.S).inverse();
    ws = GW * Sinvhalf;
  }
  return ws;
}

Eigen::MatrixXd hyper_unwhiten(const Problem& pb, const FieldComponent& f) {
  Eigen::MatrixXd W(f.Wstar.rows(), f.ncoord);
  if (f.ncoord == 1) {
    W.col(0) = f.sigma_lambda() *
               tri_solve(pb.hyper, f.Wstar.col(0), TriSolveMode::forward);
  } else {
    Eigen::Matrix3d Shalf = spd_sqrt(f.S);
    Eigen::MatrixXd right = f.Wstar * Shalf;
    for (int c = 0; c < 3; ++c)
      W.col(c) = tri_solve(pb.hyper, right.col(c), TriSolveMode::forward);
  }
  return W;
}

double data_loglik(const Problem& pb, const ChainState& st) {
  const Dataset& d = pb.data;
  double ll = 0.0;
  Eigen::VectorXd mu = d.X * st.beta;
  for (int x = 0; x < d.n_obs(); ++x) {
    const double r = d.z[x] - mu[x] - st.w[d.site[x]];
    ll += -0.5 * (kLog2Pi + std::log(st.tau2[x])) - 0.5 * r * r / st.tau2[x];
  }
  return ll;
}

double latent_logprior(const Problem& pb, const ChainState& st) {
  auto [ld0, qf] = logdet_and_quadform(st.corr, st.w.cwiseQuotient(st.params.sigma));
  const double ld = ld0 - st.params.sigma.array().log().sum();
  return ld - 0.5 * qf - 0.5 * pb.n() * kLog2Pi;
}

double hyper_logprior(const Problem& pb, const FieldComponent& f) {
  if (!f.active) return 0.0;
  if (f.ncoord == 1) {
    if (f.gamma < pb.cfg.gamma_lo || f.gamma > pb.cfg.gamma_hi)
      return -std::numeric_limits<double>::infinity();
    return 0.0;  // uniform on log sigma^2_lambda inside the box
  }
  Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(f.S);
  for (int i = 0; i < 3; ++i) {
    const double l = es.eigenvalues()[i];
    if (l <= 0.0) return -std::numeric_limits<double>::infinity();
    const double ll = std::log(l);
    if (ll < pb.cfg.gamma_lo || ll > pb.cfg.gamma_hi)
      return -std::numeric_limits<double>::infinity();
  }
  const double logdetS = es.eigenvalues().array().log().sum();
  if (pb.cfg.s_prior.inverse_wishart) {
    const double nu = pb.cfg.s_prior.nu0;
    const Eigen::Matrix3d Sinv = f.S.inverse();
    return -0.5 * (nu + 4.0) * logdetS -
           0.5 * (pb.cfg.s_prior.Psi0 * Sinv).trace();
  }
  // reference density |S|^{-(q+1)/2}, q = 3
  return -2.0 * logdetS;
}

double field_logprior(const Problem& pb, const ChainState& st, Comp c) {
  const FieldComponent& f = st.comp(c);
  if (!f.active) return 0.0;
  const int n = pb.n();
  const double ldG = pb.hyper.logdet();
  if (f.ncoord == 1) {
    auto [ld, qf] = logdet_and_quadform(pb.hyper, f.W.col(0));
    (void)ld;
    return ldG - 0.5 * n * f.gamma - 0.5 * std::exp(-f.gamma) * qf -
           0.5 * n * kLog2Pi;
  }
  Eigen::MatrixXd GW(n, 3);
  for (int k = 0; k < 3; ++k) GW.col(k) = pb.hyper.apply(f.W.col(k));
  Eigen::Matrix3d Psi = GW.transpose() * GW;
  Eigen::LLT<Eigen::Matrix3d> llt(f.S);
  if (llt.info() != Eigen::Success)
    return -std::numeric_limits<double>::infinity();
  const double logdetS =
      2.0 * llt.matrixL().toDenseMatrix().diagonal().array().log().sum();
  const double tr = llt.solve(Psi).trace();
  return 3.0 * ldG - 0.5 * n * logdetS - 0.5 * tr - 1.5 * n * kLog2Pi;
}

double log_posterior(const Problem& pb, const ChainState& st) {
  double lp = data_loglik(pb, st) + latent_logprior(pb, st);
  for (Comp c : {Comp::sigma2, Comp::range, Comp::noise}) {
    lp += field_logprior(pb, st, c);
    lp += hyper_logprior(pb, st.comp(c));
  }
  if (std::isfinite(pb.cfg.beta_prior_var)) {
    const double v = pb.cfg.beta_prior_var;
    lp += -0.5 * st.beta.squaredNorm() / v -
          0.5 * st.beta.size() * (kLog2Pi + std::log(v));
    for (Comp c : {Comp::sigma2, Comp::range, Comp::noise}) {
      const auto& b = st.comp(c).beta;
      lp += -0.5 * b.squaredNorm() / v -
            0.5 * b.size() * (kLog2Pi + std::log(v));
    }
  }
  return lp;
}

}  // namespace nsgp
