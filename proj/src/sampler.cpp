#include "nsgp/sampler.hpp"

#include <Eigen/Dense>
#include <boost/math/special_functions/gamma.hpp>
#include <chrono>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace nsgp {

namespace {
inline Eigen::VectorXd flatten(const Eigen::MatrixXd& M) {
  return Eigen::Map<const Eigen::VectorXd>(M.data(), M.size());
}
inline Eigen::MatrixXd unflatten(const Eigen::VectorXd& v, int rows, int cols) {
  return Eigen::Map<const Eigen::MatrixXd>(v.data(), rows, cols);
}
}  // namespace

// ---- HMC core ----

double leapfrog(Eigen::VectorXd& q, Eigen::VectorXd& p, const HmcTarget& target,
                double eps, int n_steps) {
  Eigen::VectorXd grad(target.dim);
  double pot = target.eval(q, &grad);
  if (!std::isfinite(pot) || !grad.allFinite())
    return std::numeric_limits<double>::quiet_NaN();
  p -= 0.5 * eps * grad;
  for (int l = 0; l < n_steps; ++l) {
    q += eps * p;
    pot = target.eval(q, &grad);
    if (!std::isfinite(pot) || !grad.allFinite())
      return std::numeric_limits<double>::quiet_NaN();
    p -= (l + 1 == n_steps ? 0.5 : 1.0) * eps * grad;
  }
  return pot;
}

namespace {
double leapfrog_from(Eigen::VectorXd& q, Eigen::VectorXd& p,
                     const HmcTarget& target, double eps, int n_steps,
                     const Eigen::VectorXd& grad0) {
  Eigen::VectorXd grad = grad0;
  double pot = 0.0;
  p -= 0.5 * eps * grad;
  for (int l = 0; l < n_steps; ++l) {
    q += eps * p;
    pot = target.eval(q, &grad);
    if (!std::isfinite(pot) || !grad.allFinite())
      return std::numeric_limits<double>::quiet_NaN();
    p -= (l + 1 == n_steps ? 0.5 : 1.0) * eps * grad;
  }
  return pot;
}
}  // namespace

HmcResult hmc_step_from(Eigen::VectorXd& pos, const HmcTarget& target,
                        double eps, int n_leapfrog, Rng& rng, double pot0,
                        const Eigen::VectorXd& grad0) {
  HmcResult res;
  const int d = target.dim;
  Eigen::VectorXd q = pos;
  Eigen::VectorXd p(d);
  for (int i = 0; i < d; ++i) p[i] = rng.normal();
  const double h0 = pot0 + 0.5 * p.squaredNorm();
  if (!std::isfinite(h0) || !grad0.allFinite()) {
    res.divergent = true;
    return res;
  }
  const double pot = leapfrog_from(q, p, target, eps, n_leapfrog, grad0);
  if (!std::isfinite(pot)) {
    res.divergent = true;
    return res;
  }
  const double h1 = pot + 0.5 * p.squaredNorm();
  res.energy_error = h1 - h0;
  res.accept_prob = std::min(1.0, std::exp(h0 - h1));
  if (rng.uniform() < res.accept_prob) {
    res.accepted = true;
    pos = q;
  }
  return res;
}

HmcResult hmc_step(Eigen::VectorXd& pos, const HmcTarget& target, double eps,
                   int n_leapfrog, Rng& rng) {
  Eigen::VectorXd grad0(target.dim);
  const double pot0 = target.eval(pos, &grad0);
  if (!std::isfinite(pot0) || !grad0.allFinite()) {
    HmcResult res;
    res.divergent = true;
    return res;
  }
  return hmc_step_from(pos, target, eps, n_leapfrog, rng, pot0, grad0);
}

void DualAveraging::init(double eps0) {
  mu = std::log(10.0 * eps0);
  log_eps = std::log(eps0);
  log_eps_bar = std::log(eps0);
  hbar = 0.0;
  t = 0;
  initialized = true;
}

void DualAveraging::update(double accept_prob, double target) {
  constexpr double gamma = 0.05, t0 = 10.0, kappa = 0.75;
  ++t;
  hbar += (target - accept_prob - hbar) / (t + t0);
  log_eps = mu - std::sqrt(static_cast<double>(t)) / gamma * hbar;
  const double eta = std::pow(static_cast<double>(t), -kappa);
  log_eps_bar = eta * log_eps + (1.0 - eta) * log_eps_bar;
}

double DualAveraging::eps(bool adapting) const {
  return std::exp(adapting ? log_eps : log_eps_bar);
}

// ---- coloring ----

std::vector<std::vector<int>> color_moral_graph(const NeighborDag& dag) {
  const int n = dag.n();
  std::vector<std::vector<int>> adj(n);
  auto link = [&](int a, int b) {
    adj[a].push_back(b);
    adj[b].push_back(a);
  };
  for (int r = 0; r < n; ++r) {
    const auto& pa = dag.parents[r];
    for (std::size_t i = 0; i < pa.size(); ++i) {
      link(r, pa[i]);
      for (std::size_t j = i + 1; j < pa.size(); ++j) link(pa[i], pa[j]);
    }
  }
  std::vector<int> color(n, -1);
  std::vector<char> used;
  int ncolors = 0;
  for (int i = 0; i < n; ++i) {
    used.assign(ncolors + 1, 0);
    for (int j : adj[i])
      if (color[j] >= 0) used[color[j]] = 1;
    int c = 0;
    while (c < static_cast<int>(used.size()) && used[c]) ++c;
    color[i] = c;
    ncolors = std::max(ncolors, c + 1);
  }
  std::vector<std::vector<int>> classes(ncolors);
  for (int i = 0; i < n; ++i) classes[color[i]].push_back(i);
  return classes;
}

Eigen::VectorXd sample_latent_prior(const ChainState& st, Rng& rng) {
  Eigen::VectorXd xi(st.corr.n);
  for (int i = 0; i < st.corr.n; ++i) xi[i] = rng.normal();
  return unwhiten(st, xi);
}

double truncated_log_variance_draw(double n, double q, double lo, double hi,
                                   Rng& rng) {
  const double a = 0.5 * n;
  const double ulo = std::exp(-hi), uhi = std::exp(-lo);
  if (q < 1e-300) {
    // flat-likelihood limit: density over u is u^{a-1} on [ulo, uhi]
    const double v = rng.uniform();
    const double u = std::pow(std::pow(ulo, a) + v * (std::pow(uhi, a) - std::pow(ulo, a)),
                              1.0 / a);
    return -std::log(u);
  }
  const double rate = 0.5 * q;
  const double plo = boost::math::gamma_p(a, rate * ulo);
  const double phi = boost::math::gamma_p(a, rate * uhi);
  if (phi - plo < 1e-14) {
    // essentially all conditional mass outside the box; pin to the nearer edge
    return plo > 0.5 ? hi : lo;
  }
  const double v = plo + rng.uniform() * (phi - plo);
  const double x = boost::math::gamma_p_inv(a, v);
  double g = -std::log(x / rate);
  return std::min(std::max(g, lo), hi);
}

Eigen::Matrix3d inv_wishart(double nu, const Eigen::Matrix3d& Psi, Rng& rng) {
  Eigen::Matrix3d T = Psi.inverse().llt().matrixL();
  Eigen::Matrix3d A = Eigen::Matrix3d::Zero();
  for (int i = 0; i < 3; ++i) {
    A(i, i) = std::sqrt(rng.chisq(nu - i));
    for (int j = 0; j < i; ++j) A(i, j) = rng.normal();
  }
  Eigen::Matrix3d L = T * A;
  Eigen::Matrix3d X = L * L.transpose();
  return X.inverse();
}

// ---- Sampler ----

Sampler::Sampler(const Problem& pb, SamplerConfig cfg) : pb_(pb), cfg_(cfg) {
  colors_ = color_moral_graph(pb.dag);
  const int n = pb.n();
  incident_.assign(n, {});
  // incident rows of each column, structure shared by every rebuilt factor
  std::vector<int> off(n + 1, 0);
  for (int r = 0; r < n; ++r)
    off[r + 1] = off[r] + static_cast<int>(pb.dag.parents[r].size());
  for (int r = 0; r < n; ++r) {
    const auto& pa = pb.dag.parents[r];
    for (std::size_t t = 0; t < pa.size(); ++t)
      incident_[pa[t]].push_back({r, off[r] + static_cast<int>(t)});
  }
}

double Sampler::block_eps(const std::string& name, bool adapting) {
  auto& da = da_[name];
  if (!da.initialized) da.init(cfg_.hmc.eps0);
  return da.eps(adapting);
}

void Sampler::record(const std::string& name, const HmcResult& r, bool adapting) {
  if (r.divergent) ++divergences_;
  if (adapting) {
    da_[name].update(r.divergent ? 0.0 : r.accept_prob, cfg_.hmc.target_accept);
  } else {
    auto& a = accept_[name];
    a.first += r.accepted ? 1 : 0;
    a.second += 1;
  }
}

HmcResult Sampler::hmc_block(const std::string& name, Eigen::VectorXd& pos,
                             const HmcTarget& t, int L, Rng& rng, bool adapting,
                             double pot0, const Eigen::VectorXd& grad0) {
  const double eps = block_eps(name, adapting);
  HmcResult r = hmc_step_from(pos, t, eps, L, rng, pot0, grad0);
  record(name, r, adapting);
  return r;
}

HmcResult Sampler::mh_block(const std::string& name, Eigen::VectorXd& pos,
                            const HmcTarget& t, Rng& rng, bool adapting,
                            double h0) {
  auto it = mh_scale_.find(name);
  if (it == mh_scale_.end())
    it = mh_scale_.insert({name, {std::log(0.2), 0}}).first;
  auto& [log_scale, step] = it->second;
  const double scale = std::exp(log_scale);
  HmcResult res;
  Eigen::VectorXd prop = pos;
  for (int i = 0; i < t.dim; ++i) prop[i] += scale * rng.normal();
  const double h1 = t.eval(prop, nullptr);
  if (std::isfinite(h1)) {
    res.accept_prob = std::min(1.0, std::exp(h0 - h1));
    res.energy_error = h1 - h0;
  }
  if (rng.uniform() < res.accept_prob) {
    res.accepted = true;
    pos = prop;
  }
  if (adapting) {
    ++step;
    const double target = t.dim == 1 ? 0.44 : 0.27;
    log_scale += (res.accept_prob - target) / std::pow(static_cast<double>(step), 0.7);
  } else {
    auto& a = accept_[name];
    a.first += res.accepted ? 1 : 0;
    a.second += 1;
  }
  return res;
}

HmcResult Sampler::scalar_block(const std::string& name, Eigen::VectorXd& pos,
                                const HmcTarget& t, Rng& rng, bool adapting,
                                double pot0, const Eigen::VectorXd& grad0) {
  if (cfg_.hmc.hmc_scalar_blocks)
    return hmc_block(name, pos, t, cfg_.hmc.l_scalar, rng, adapting, pot0, grad0);
  return mh_block(name, pos, t, rng, adapting, pot0);
}

void Sampler::update_latent(ChainState& st, Rng& rng) {
  const int n = pb_.n();
  const SparseTriFactor& F = st.corr;
  const Eigen::VectorXd& sig = st.params.sigma;
  Eigen::VectorXd rvec = F.apply(st.w.cwiseQuotient(sig));
  Eigen::VectorXd dprec = Eigen::VectorXd::Zero(n), dcan = Eigen::VectorXd::Zero(n);
  Eigen::VectorXd mu = pb_.data.X * st.beta;
  for (int x = 0; x < pb_.data.n_obs(); ++x) {
    const int s = pb_.data.site[x];
    dprec[s] += 1.0 / st.tau2[x];
    dcan[s] += (pb_.data.z[x] - mu[x]) / st.tau2[x];
  }
  Eigen::VectorXd xi(n);
  for (int i = 0; i < n; ++i) xi[i] = rng.normal();
  for (const auto& cls : colors_) {
#pragma omp parallel for schedule(static)
    for (std::size_t ci = 0; ci < cls.size(); ++ci) {
      const int i = cls[ci];
      const double invsig = 1.0 / sig[i];
      const double Rii = F.diag[i] * invsig;
      double a = Rii * rvec[i];
      double Q = Rii * Rii;
      for (const auto& [r, slot] : incident_[i]) {
        const double Rri = F.vals[slot] * invsig;
        a += Rri * rvec[r];
        Q += Rri * Rri;
      }
      const double prior_can = Q * st.w[i] - a;
      const double post_prec = Q + dprec[i];
      const double post_can = prior_can + dcan[i];
      const double mean = post_can / post_prec;
      const double neww = mean + xi[i] / std::sqrt(post_prec);
      const double dw = neww - st.w[i];
      rvec[i] += Rii * dw;
      for (const auto& [r, slot] : incident_[i])
        rvec[r] += F.vals[slot] * invsig * dw;
      st.w[i] = neww;
    }
  }
  st.wstar = whiten(st, st.w);
}

void Sampler::update_beta_fixed(ChainState& st, Rng& rng) {
  const Eigen::MatrixXd& X = pb_.data.X;
  const int p = static_cast<int>(X.cols());
  if (p == 0) return;
  Eigen::MatrixXd M = Eigen::MatrixXd::Zero(p, p);
  Eigen::VectorXd b = Eigen::VectorXd::Zero(p);
  for (int x = 0; x < pb_.data.n_obs(); ++x) {
    const double wgt = 1.0 / st.tau2[x];
    const double r = pb_.data.z[x] - st.w[pb_.data.site[x]];
    M.noalias() += wgt * X.row(x).transpose() * X.row(x);
    b.noalias() += wgt * r * X.row(x).transpose();
  }
  if (std::isfinite(pb_.cfg.beta_prior_var))
    M.diagonal().array() += 1.0 / pb_.cfg.beta_prior_var;
  Eigen::LLT<Eigen::MatrixXd> llt(M);
  Eigen::VectorXd mean = llt.solve(b);
  Eigen::VectorXd xi(p);
  for (int i = 0; i < p; ++i) xi[i] = rng.normal();
  st.beta = mean + llt.matrixU().solve(xi);
}

namespace {

// write a candidate field (whitened coordinates) into the scratch state and
// refresh the caches it touches
void set_field(const Problem& pb, ChainState& s, Comp c, const Eigen::VectorXd& x,
               bool implied_w) {
  FieldComponent& f = s.comp(c);
  f.Wstar = unflatten(x, f.W.rows(), f.ncoord);
  f.W = hyper_unwhiten(pb, f);
  if (c == Comp::sigma2) {
    refresh_sigma(pb, s);
  } else if (c == Comp::range) {
    refresh_covariance(pb, s);
  } else {
    refresh_tau(pb, s);
  }
  if (implied_w) s.w = unwhiten(s, s.wstar);
}

void set_beta(const Problem& pb, ChainState& s, Comp c, const Eigen::VectorXd& x,
              bool implied_w) {
  FieldComponent& f = s.comp(c);
  f.beta = unflatten(x, design(pb, c).cols(), f.ncoord);
  if (c == Comp::sigma2)
    refresh_sigma(pb, s);
  else if (c == Comp::range)
    refresh_covariance(pb, s);
  else
    refresh_tau(pb, s);
  if (implied_w) s.w = unwhiten(s, s.wstar);
}

Eigen::MatrixXd field_grad(const Problem& pb, const ChainState& s, Comp c,
                           bool ancillary) {
  if (c == Comp::sigma2)
    return ancillary ? grad_sigma_ancillary(pb, s).eval()
                     : grad_sigma_sufficient(pb, s).eval();
  if (c == Comp::noise) return grad_tau(pb, s);
  if (pb.data.locs.dim() == 2) {
    // fused assemble-and-contract path; same values as the two-pass route
    const Eigen::VectorXd v = s.w.cwiseQuotient(s.params.sigma);
    Eigen::VectorXd u;
    if (ancillary) {
      const Eigen::VectorXd gl = grad_latent_data(pb, s);
      u = tri_solve(s.corr, gl.cwiseProduct(s.params.sigma),
                    TriSolveMode::transpose);
    } else {
      u = s.corr.apply(v);
    }
    Eigen::MatrixXd sw, ld;
    factor_derivative_contract(pb.dag, pb.coords, s.corr_params, s.corr,
                               pb.cfg.fd_step, u, v, sw, ld);
    return ancillary ? Eigen::MatrixXd(-sw) : Eigen::MatrixXd(sw - ld);
  }
  FactorDerivativeSet ds = factor_derivative_all(pb.dag, pb.coords,
                                                 s.corr_params, s.corr,
                                                 pb.cfg.fd_step);
  return ancillary ? grad_range_ancillary(pb, s, ds)
                   : grad_range_sufficient(pb, s, ds);
}

double beta_log_prior(const Problem& pb, const ChainState& s, Comp c,
                      Eigen::MatrixXd* grad) {
  const FieldComponent& f = s.comp(c);
  const double v = pb.cfg.beta_prior_var;
  if (!std::isfinite(v)) {
    if (grad) grad->setZero(f.beta.rows(), f.beta.cols());
    return 0.0;
  }
  if (f.ncoord == 1) {
    if (grad) *grad = f.beta / v;
    return 0.5 * f.beta.squaredNorm() / v;
  }
  // matrix-normal MN(0, v I, S): keeps the conjugate stage Kronecker
  Eigen::Matrix3d Sinv = f.S.inverse();
  if (grad) *grad = f.beta * Sinv / v;
  return 0.5 * (Sinv * f.beta.transpose() * f.beta).trace() / v;
}

double comp_potential(const Problem& pb, const ChainState& s, Comp c,
                      bool ancillary) {
  if (c == Comp::noise || ancillary) return -data_loglik(pb, s);
  return -latent_logprior(pb, s);
}

// -log p(S) without the box indicator (checked separately)
double s_prior_energy(const ModelConfig& cfg, const Eigen::Matrix3d& S,
                      double logdetS) {
  if (cfg.s_prior.inverse_wishart)
    return 0.5 * (cfg.s_prior.nu0 + 4.0) * logdetS +
           0.5 * (cfg.s_prior.Psi0 * S.inverse()).trace();
  return 2.0 * logdetS;
}

// gradient in vech-coordinate form (off-diagonals already doubled), matching
// the finite-difference convention of grad_S
Eigen::Matrix3d s_prior_grad(const ModelConfig& cfg, const Eigen::Matrix3d& S) {
  Eigen::Matrix3d Sinv = S.inverse();
  Eigen::Matrix3d G;
  if (cfg.s_prior.inverse_wishart) {
    G = 0.5 * (cfg.s_prior.nu0 + 4.0) * Sinv -
        0.5 * Sinv * cfg.s_prior.Psi0 * Sinv;
  } else {
    G = 2.0 * Sinv;
  }
  Eigen::Matrix3d out = 2.0 * G;
  out.diagonal() = G.diagonal();
  return out;
}

}  // namespace

void Sampler::update_field_interweaved(ChainState& st, Comp c, Rng& rng,
                                       bool adapting) {
  FieldComponent& f = st.comp(c);
  if (!f.active) return;
  const std::string base =
      (c == Comp::sigma2 ? "sigma2" : c == Comp::range ? "range" : "noise");
  f.Wstar = hyper_whiten(pb_, f);
  const int dim = static_cast<int>(f.W.size());

  auto make_target = [&](bool ancillary) {
    return HmcTarget{
        dim, [this, c, ancillary](const Eigen::VectorXd& x, Eigen::VectorXd* g) {
          ChainState& s = scratch_;
          try {
            set_field(pb_, s, c, x, ancillary && c != Comp::noise);
          } catch (const std::runtime_error&) {
            // numerically degenerate covariance: reject the trajectory
            if (g) g->setZero(x.size());
            return std::numeric_limits<double>::infinity();
          }
          const double H = 0.5 * x.squaredNorm() + comp_potential(pb_, s, c, ancillary);
          if (g) {
            Eigen::MatrixXd gp = field_grad(pb_, s, c, ancillary);
            *g = flatten(whiten_gradient(pb_, s.comp(c), gp));
          }
          return H;
        }};
  };

  // the stage-start potential and gradient come from the current state,
  // whose caches already sit at the starting position
  auto initial = [&](bool ancillary, const Eigen::VectorXd& x, double* pot,
                     Eigen::VectorXd* grad) {
    *pot = 0.5 * x.squaredNorm() + comp_potential(pb_, st, c, ancillary);
    Eigen::MatrixXd gp = field_grad(pb_, st, c, ancillary);
    *grad = flatten(whiten_gradient(pb_, st.comp(c), gp));
  };
  // sufficient parametrization of w
  {
    scratch_ = st;
    Eigen::VectorXd x = flatten(f.Wstar);
    double pot0;
    Eigen::VectorXd grad0;
    initial(false, x, &pot0, &grad0);
    HmcResult r = hmc_block(base + ".field.suff", x, make_target(false),
                            cfg_.hmc.l_field, rng, adapting, pot0, grad0);
    if (r.accepted) {
      set_field(pb_, st, c, x, false);
      if (c != Comp::noise) st.wstar = whiten(st, st.w);
    }
  }
  if (c == Comp::noise) return;
  // ancillary parametrization
  {
    scratch_ = st;
    Eigen::VectorXd x = flatten(f.Wstar);
    double pot0;
    Eigen::VectorXd grad0;
    initial(true, x, &pot0, &grad0);
    HmcResult r = hmc_block(base + ".field.anc", x, make_target(true),
                            cfg_.hmc.l_field, rng, adapting, pot0, grad0);
    if (r.accepted) {
      set_field(pb_, st, c, x, false);
      st.w = unwhiten(st, st.wstar);
    }
  }
}

void Sampler::update_beta_interweaved(ChainState& st, Comp c, Rng& rng,
                                      bool adapting) {
  FieldComponent& f = st.comp(c);
  const Eigen::MatrixXd& X = design(pb_, c);
  const int p = static_cast<int>(X.cols());
  if (p == 0) return;
  const std::string base =
      (c == Comp::sigma2 ? "sigma2" : c == Comp::range ? "range" : "noise");
  const int dim = p * f.ncoord;

  auto make_target = [&](bool ancillary) {
    return HmcTarget{
        dim, [this, c, ancillary](const Eigen::VectorXd& x, Eigen::VectorXd* g) {
          ChainState& s = scratch_;
          try {
            set_beta(pb_, s, c, x, ancillary && c != Comp::noise);
          } catch (const std::runtime_error&) {
            if (g) g->setZero(x.size());
            return std::numeric_limits<double>::infinity();
          }
          Eigen::MatrixXd pg;
          double H = comp_potential(pb_, s, c, ancillary) +
                     beta_log_prior(pb_, s, c, g ? &pg : nullptr);
          if (g) {
            Eigen::MatrixXd gfield;
            if (c == Comp::noise)
              gfield = grad_tau_obs(pb_, s);
            else
              gfield = field_grad(pb_, s, c, ancillary);
            *g = flatten(Eigen::MatrixXd(grad_beta_field(pb_, c, gfield) + pg));
          }
          return H;
        }};
  };

  auto conj_centered = [&](ChainState& s) { conjugate_beta_centered(s, c, rng); };

  auto initial = [&](bool ancillary, double* pot, Eigen::VectorXd* grad) {
    Eigen::MatrixXd pg;
    *pot = comp_potential(pb_, st, c, ancillary) +
           beta_log_prior(pb_, st, c, &pg);
    Eigen::MatrixXd gf;
    if (c == Comp::noise)
      gf = grad_tau_obs(pb_, st);
    else
      gf = field_grad(pb_, st, c, ancillary);
    *grad = flatten(Eigen::MatrixXd(grad_beta_field(pb_, c, gf) + pg));
  };
  // [beta | W, w] (sufficient side)
  {
    scratch_ = st;
    Eigen::VectorXd x = flatten(f.beta);
    double pot0;
    Eigen::VectorXd grad0;
    initial(false, &pot0, &grad0);
    HmcResult r = scalar_block(base + ".beta.suff", x, make_target(false), rng,
                               adapting, pot0, grad0);
    if (r.accepted) {
      set_beta(pb_, st, c, x, false);
      if (c != Comp::noise) st.wstar = whiten(st, st.w);
    }
  }
  // [beta | W_centered, w]
  if (f.active) conj_centered(st);
  if (c == Comp::noise) return;
  // [beta | W, w*] (ancillary side)
  {
    scratch_ = st;
    Eigen::VectorXd x = flatten(f.beta);
    double pot0;
    Eigen::VectorXd grad0;
    initial(true, &pot0, &grad0);
    HmcResult r = scalar_block(base + ".beta.anc", x, make_target(true), rng,
                               adapting, pot0, grad0);
    if (r.accepted) {
      set_beta(pb_, st, c, x, false);
      st.w = unwhiten(st, st.wstar);
    }
  }
  // [beta | W_centered, w*]
  if (f.active) conj_centered(st);
}

void Sampler::conjugate_beta_centered(ChainState& st, Comp c, Rng& rng) {
  // given W_centered, lambda is fixed, so beta has a Gaussian conditional
  FieldComponent& fc = st.comp(c);
  Eigen::MatrixXd X = design(pb_, c);
  if (c == Comp::noise) {
    // the noise field lives on sites; centering needs a site-level design,
    // which exists only when X_tau is constant within each site
    const Eigen::MatrixXd& Xt = pb_.data.X_tau;
    Eigen::MatrixXd Xs(pb_.n(), Xt.cols());
    for (int s = 0; s < pb_.n(); ++s) {
      const auto& obs = pb_.data.obs_at[s];
      Xs.row(s) = Xt.row(obs[0]);
      for (int x : obs)
        if ((Xt.row(x) - Xs.row(s)).cwiseAbs().maxCoeff() > 0.0) return;
    }
    X = Xs;
  }
  const int p = static_cast<int>(X.cols());
  Eigen::MatrixXd Wc = center_field(fc.W, X, fc.beta, CenterDir::center);
  Eigen::MatrixXd GX(X.rows(), p), GWc(X.rows(), fc.ncoord);
  for (int j = 0; j < p; ++j) GX.col(j) = pb_.hyper.apply(X.col(j));
  for (int k = 0; k < fc.ncoord; ++k) GWc.col(k) = pb_.hyper.apply(Wc.col(k));
  Eigen::MatrixXd M0 = GX.transpose() * GX;
  if (fc.ncoord == 1) {
    const double s2 = std::exp(fc.gamma);
    Eigen::MatrixXd M = M0 / s2;
    if (std::isfinite(pb_.cfg.beta_prior_var))
      M.diagonal().array() += 1.0 / pb_.cfg.beta_prior_var;
    Eigen::LLT<Eigen::MatrixXd> llt(M);
    Eigen::VectorXd mean = llt.solve(GX.transpose() * GWc.col(0) / s2);
    Eigen::VectorXd xi(p);
    for (int i = 0; i < p; ++i) xi[i] = rng.normal();
    fc.beta.col(0) = mean + llt.matrixU().solve(xi);
  } else if (!std::isfinite(pb_.cfg.beta_prior_var)) {
    // flat prior keeps the Kronecker structure: cov = S (x) M0^{-1}
    Eigen::LLT<Eigen::MatrixXd> llt(M0);
    Eigen::MatrixXd mean = llt.solve(GX.transpose() * GWc);
    Eigen::MatrixXd Z(p, 3);
    for (int i = 0; i < p; ++i)
      for (int k = 0; k < 3; ++k) Z(i, k) = rng.normal();
    Eigen::Matrix3d Ls = Eigen::Matrix3d(fc.S.llt().matrixL());
    fc.beta = mean + llt.matrixU().solve(Z) * Ls.transpose();
  } else {
    // proper N(0, v I) prior on vec(B): small dense 3p system
    Eigen::Matrix3d Sinv = fc.S.inverse();
    Eigen::MatrixXd P = Eigen::MatrixXd::Zero(3 * p, 3 * p);
    for (int a = 0; a < 3; ++a)
      for (int b = 0; b < 3; ++b)
        P.block(a * p, b * p, p, p) = Sinv(a, b) * M0;
    P.diagonal().array() += 1.0 / pb_.cfg.beta_prior_var;
    Eigen::MatrixXd C = GX.transpose() * GWc * Sinv;  // p x 3 canonical mean
    Eigen::VectorXd can = Eigen::Map<Eigen::VectorXd>(C.data(), 3 * p);
    Eigen::LLT<Eigen::MatrixXd> llt(P);
    Eigen::VectorXd mean = llt.solve(can);
    Eigen::VectorXd xi(3 * p);
    for (int i = 0; i < 3 * p; ++i) xi[i] = rng.normal();
    Eigen::VectorXd draw = mean + llt.matrixU().solve(xi);
    fc.beta = Eigen::Map<Eigen::MatrixXd>(draw.data(), p, 3);
  }
  fc.W = center_field(Wc, X, fc.beta, CenterDir::uncenter);
  fc.Wstar = hyper_whiten(pb_, fc);
  // lambda unchanged by construction; the latent field is untouched
}

void Sampler::update_hypervariance_nested(ChainState& st, Comp c, Rng& rng,
                                          bool adapting) {
  FieldComponent& f = st.comp(c);
  if (!f.active) return;
  const std::string base =
      (c == Comp::sigma2 ? "sigma2" : c == Comp::range ? "range" : "noise");
  const int n = pb_.n();

  auto conj_scalar = [&]() {
    auto [ld, q] = logdet_and_quadform(pb_.hyper, f.W.col(0));
    (void)ld;
    f.gamma = truncated_log_variance_draw(n, q, pb_.cfg.gamma_lo,
                                          pb_.cfg.gamma_hi, rng);
    f.Wstar = hyper_whiten(pb_, f);
  };
  auto conj_S = [&]() {
    Eigen::MatrixXd GW(n, 3);
    for (int k = 0; k < 3; ++k) GW.col(k) = pb_.hyper.apply(f.W.col(k));
    Eigen::Matrix3d Psi = GW.transpose() * GW;
    double nu = n;
    if (pb_.cfg.s_prior.inverse_wishart) {
      nu += pb_.cfg.s_prior.nu0;
      Psi += pb_.cfg.s_prior.Psi0;
    }
    Eigen::Matrix3d Sp = inv_wishart(nu, Psi, rng);
    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(Sp);
    bool ok = true;
    for (int i = 0; i < 3; ++i) {
      const double l = es.eigenvalues()[i];
      if (l <= 0.0 || std::log(l) < pb_.cfg.gamma_lo ||
          std::log(l) > pb_.cfg.gamma_hi)
        ok = false;
    }
    if (ok) f.S = Sp;
    f.Wstar = hyper_whiten(pb_, f);
  };
  auto conj = [&]() {
    if (f.ncoord == 1)
      conj_scalar();
    else
      conj_S();
  };

  // ancillary HMC stage; data_side picks the w parametrization held fixed
  auto hmc_stage = [&](bool data_side, const std::string& name) {
    scratch_ = st;
    if (f.ncoord == 1) {
      // position: gamma; W = exp(gamma/2) G^{-1} W*
      Eigen::MatrixXd Phi(n, 1);
      Phi.col(0) = tri_solve(pb_.hyper, f.Wstar.col(0), TriSolveMode::forward);
      HmcTarget t{1, [this, c, data_side, &Phi](const Eigen::VectorXd& x,
                                                Eigen::VectorXd* g) {
                    const double gamma = x[0];
                    if (gamma < pb_.cfg.gamma_lo || gamma > pb_.cfg.gamma_hi) {
                      if (g) (*g)[0] = 0.0;
                      return std::numeric_limits<double>::infinity();
                    }
                    ChainState& s = scratch_;
                    FieldComponent& fc = s.comp(c);
                    fc.gamma = gamma;
                    fc.W = std::exp(0.5 * gamma) * Phi;
                    try {
                      if (c == Comp::sigma2)
                        refresh_sigma(pb_, s);
                      else if (c == Comp::range)
                        refresh_covariance(pb_, s);
                      else
                        refresh_tau(pb_, s);
                    } catch (const std::runtime_error&) {
                      if (g) (*g)[0] = 0.0;
                      return std::numeric_limits<double>::infinity();
                    }
                    if (data_side && c != Comp::noise) s.w = unwhiten(s, s.wstar);
                    const bool anc = data_side || c == Comp::noise;
                    const double H = comp_potential(pb_, s, c, anc);
                    if (g) {
                      Eigen::MatrixXd gp = field_grad(pb_, s, c, anc);
                      (*g)[0] = 0.5 * (gp.array() * fc.W.array()).sum();
                    }
                    return H;
                  }};
      Eigen::VectorXd x(1);
      x[0] = f.gamma;
      const bool anc0 = data_side || c == Comp::noise;
      double pot0 = comp_potential(pb_, st, c, anc0);
      Eigen::VectorXd grad0(1);
      {
        Eigen::MatrixXd gp = field_grad(pb_, st, c, anc0);
        grad0[0] = 0.5 * (gp.array() * f.W.array()).sum();
      }
      HmcResult r = scalar_block(name, x, t, rng, adapting, pot0, grad0);
      if (r.accepted) {
        f.gamma = x[0];
        f.W = std::exp(0.5 * f.gamma) * Phi;
        if (c == Comp::sigma2)
          refresh_sigma(pb_, st);
        else if (c == Comp::range)
          refresh_covariance(pb_, st);
        else
          refresh_tau(pb_, st);
        if (c != Comp::noise) {
          if (data_side)
            st.w = unwhiten(st, st.wstar);
          else
            st.wstar = whiten(st, st.w);
        }
      }
    } else {
      // position: vech(S); W = (G^{-1} W*) S^{1/2}
      Eigen::MatrixXd Phi(n, 3);
      for (int k = 0; k < 3; ++k)
        Phi.col(k) = tri_solve(pb_.hyper, f.Wstar.col(k), TriSolveMode::forward);
      HmcTarget t{6, [this, c, data_side, &Phi](const Eigen::VectorXd& x,
                                                Eigen::VectorXd* g) {
                    Eigen::Matrix3d S = unvech(x);
                    Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es(S);
                    for (int i = 0; i < 3; ++i) {
                      const double l = es.eigenvalues()[i];
                      if (l <= 0.0 || std::log(l) < pb_.cfg.gamma_lo ||
                          std::log(l) > pb_.cfg.gamma_hi) {
                        if (g) g->setZero();
                        return std::numeric_limits<double>::infinity();
                      }
                    }
                    ChainState& s = scratch_;
                    FieldComponent& fc = s.comp(c);
                    fc.S = S;
                    fc.W = Phi * spd_sqrt(S);
                    try {
                      refresh_covariance(pb_, s);
                    } catch (const std::runtime_error&) {
                      if (g) g->setZero();
                      return std::numeric_limits<double>::infinity();
                    }
                    if (data_side) s.w = unwhiten(s, s.wstar);
                    const double logdetS =
                        es.eigenvalues().array().log().sum();
                    double H = comp_potential(pb_, s, c, data_side) +
                               s_prior_energy(pb_.cfg, S, logdetS);
                    if (g) {
                      Eigen::MatrixXd gp = field_grad(pb_, s, c, data_side);
                      // both pieces use the vech-coordinate convention
                      Eigen::Matrix3d gs = grad_S(pb_, fc, gp, pb_.cfg.fd_step) +
                                           s_prior_grad(pb_.cfg, S);
                      *g = vech(gs);
                    }
                    return H;
                  }};
      Eigen::VectorXd x = vech(f.S);
      double pot0;
      Eigen::VectorXd grad0;
      {
        Eigen::SelfAdjointEigenSolver<Eigen::Matrix3d> es0(f.S);
        const double logdetS0 = es0.eigenvalues().array().log().sum();
        pot0 = comp_potential(pb_, st, c, data_side) +
               s_prior_energy(pb_.cfg, f.S, logdetS0);
        Eigen::MatrixXd gp = field_grad(pb_, st, c, data_side);
        grad0 = vech(Eigen::Matrix3d(grad_S(pb_, f, gp, pb_.cfg.fd_step) +
                                     s_prior_grad(pb_.cfg, f.S)));
      }
      HmcResult r = scalar_block(name, x, t, rng, adapting, pot0, grad0);
      if (r.accepted) {
        f.S = unvech(x);
        f.W = Phi * spd_sqrt(f.S);
        refresh_covariance(pb_, st);
        if (data_side)
          st.w = unwhiten(st, st.wstar);
        else
          st.wstar = whiten(st, st.w);
      }
    }
  };

  // (W, w) -> (W*, w) -> (W, w*) -> (W*, w*); noise keeps the first pair
  conj();
  hmc_stage(false, base + ".hyper.anc1");
  if (c == Comp::noise) return;
  conj();
  hmc_stage(true, base + ".hyper.anc2");
}

void Sampler::iterate(ChainState& st, Rng& rng, bool adapting) {
  update_latent(st, rng);
  update_beta_fixed(st, rng);
  for (Comp c : {Comp::sigma2, Comp::range, Comp::noise}) {
    update_field_interweaved(st, c, rng, adapting);
    update_beta_interweaved(st, c, rng, adapting);
    update_hypervariance_nested(st, c, rng, adapting);
  }
}

namespace {
void trace_names(const Problem& pb, const ChainState& st,
                 std::vector<std::string>& names) {
  names.clear();
  names.push_back("lp");
  names.push_back("deviance");
  for (int k = 0; k < st.beta.size(); ++k)
    names.push_back("beta." + std::to_string(k));
  auto comp_cols = [&](const FieldComponent& f, const std::string& nm) {
    for (int j = 0; j < f.beta.rows(); ++j)
      for (int k = 0; k < f.ncoord; ++k)
        names.push_back(nm + ".beta." + std::to_string(j) +
                        (f.ncoord > 1 ? "." + std::to_string(k) : ""));
    if (f.active) {
      if (f.ncoord == 1)
        names.push_back(nm + ".gamma");
      else
        for (int k = 0; k < 6; ++k)
          names.push_back(nm + ".S." + std::to_string(k));
    }
  };
  comp_cols(st.sig, "sigma2");
  comp_cols(st.rng, "range");
  comp_cols(st.noi, "noise");
  (void)pb;
}

Eigen::VectorXd trace_row(const Problem& pb, const ChainState& st, double lp,
                          double dev) {
  std::vector<double> v;
  v.push_back(lp);
  v.push_back(dev);
  for (int k = 0; k < st.beta.size(); ++k) v.push_back(st.beta[k]);
  auto comp_vals = [&](const FieldComponent& f) {
    for (int j = 0; j < f.beta.rows(); ++j)
      for (int k = 0; k < f.ncoord; ++k) v.push_back(f.beta(j, k));
    if (f.active) {
      if (f.ncoord == 1)
        v.push_back(f.gamma);
      else {
        Eigen::VectorXd s = vech(f.S);
        for (int k = 0; k < 6; ++k) v.push_back(s[k]);
      }
    }
  };
  comp_vals(st.sig);
  comp_vals(st.rng);
  comp_vals(st.noi);
  (void)pb;
  return Eigen::Map<Eigen::VectorXd>(v.data(), v.size());
}
}  // namespace

int ChainTrace::column(const std::string& name) const {
  for (std::size_t i = 0; i < names.size(); ++i)
    if (names[i] == name) return static_cast<int>(i);
  throw std::invalid_argument("trace column not found: " + name);
}

Eigen::VectorXd ChainTrace::series(const std::string& name) const {
  const int c = column(name);
  Eigen::VectorXd s(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i) s[i] = rows[i][c];
  return s;
}

ChainTrace Sampler::run_chain(ChainState& st) {
  const auto t0 = std::chrono::steady_clock::now();
  Rng rng(cfg_.seed, static_cast<std::uint64_t>(cfg_.chain_id));
  ChainTrace tr;
  tr.seed = cfg_.seed;
  tr.chain_id = cfg_.chain_id;
  trace_names(pb_, st, tr.names);
  tr.w_mean = Eigen::VectorXd::Zero(pb_.n());
  tr.tau2_mean = Eigen::VectorXd::Zero(pb_.data.n_obs());
  tr.beta_mean = Eigen::VectorXd::Zero(st.beta.size());
  for (int k = 0; k < 3; ++k) {
    const FieldComponent& f = st.comp(static_cast<Comp>(k));
    tr.field_mean[k] = Eigen::MatrixXd::Zero(f.W.rows(), f.ncoord);
  }
  for (int it = 0; it < cfg_.iterations; ++it) {
    const bool adapting = it < cfg_.warmup;
    iterate(st, rng, adapting);
    if (!adapting) {
      const double dev = -2.0 * data_loglik(pb_, st);
      if (!std::isfinite(dev))
        throw std::runtime_error("run_chain: nonfinite deviance at iteration " +
                                 std::to_string(it));
      tr.w_mean += st.w;
      tr.tau2_mean += st.tau2;
      tr.beta_mean += st.beta;
      for (int k = 0; k < 3; ++k)
        tr.field_mean[k] += st.comp(static_cast<Comp>(k)).W;
      tr.dev_mean += dev;
      ++tr.n_accum;
      if ((it - cfg_.warmup) % cfg_.thin == 0)
        tr.rows.push_back(trace_row(pb_, st, log_posterior(pb_, st), dev));
    }
  }
  if (tr.n_accum > 0) {
    tr.w_mean /= tr.n_accum;
    tr.tau2_mean /= tr.n_accum;
    tr.beta_mean /= tr.n_accum;
    for (int k = 0; k < 3; ++k) tr.field_mean[k] /= tr.n_accum;
    tr.dev_mean /= tr.n_accum;
  }
  for (const auto& [k, v] : accept_)
    tr.accept_rate[k] = v.second ? static_cast<double>(v.first) / v.second : 0.0;
  tr.divergences = divergences_;
  tr.elapsed_sec =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  return tr;
}

ChainTrace Sampler::run_chain() {
  ChainState st = init_state(pb_);
  return run_chain(st);
}

ChainState state_from_means(const Problem& pb, const ChainTrace& tr) {
  ChainState st = init_state(pb);
  st.w = tr.w_mean;
  st.beta = tr.beta_mean;
  auto fill = [&](FieldComponent& f, const std::string& nm, int k) {
    if (tr.field_mean[k].size() > 0) f.W = tr.field_mean[k];
    for (int j = 0; j < f.beta.rows(); ++j)
      for (int c = 0; c < f.ncoord; ++c) {
        const std::string col = nm + ".beta." + std::to_string(j) +
                                (f.ncoord > 1 ? "." + std::to_string(c) : "");
        f.beta(j, c) = tr.series(col).mean();
      }
    if (f.active) {
      if (f.ncoord == 1) {
        f.gamma = tr.series(nm + ".gamma").mean();
      } else {
        Eigen::VectorXd s6(6);
        for (int c = 0; c < 6; ++c)
          s6[c] = tr.series(nm + ".S." + std::to_string(c)).mean();
        f.S = unvech(s6);
      }
    }
  };
  fill(st.sig, "sigma2", 0);
  fill(st.rng, "range", 1);
  fill(st.noi, "noise", 2);
  refresh_covariance(pb, st);
  refresh_tau(pb, st);
  for (Comp c : {Comp::sigma2, Comp::range, Comp::noise}) {
    FieldComponent& f = st.comp(c);
    if (f.active) f.Wstar = hyper_whiten(pb, f);
  }
  st.wstar = whiten(st, st.w);
  return st;
}

}  // namespace nsgp
