#include "nsgp/gradients.hpp"

#include <Eigen/Dense>

namespace nsgp {

Eigen::VectorXd grad_latent_data(const Problem& pb, const ChainState& st) {
  const Dataset& d = pb.data;
  Eigen::VectorXd g = Eigen::VectorXd::Zero(pb.n());
  Eigen::VectorXd mu = d.X * st.beta;
  for (int x = 0; x < d.n_obs(); ++x) {
    const int s = d.site[x];
    g[s] += (st.w[s] - (d.z[x] - mu[x])) / st.tau2[x];
  }
  return g;
}

Eigen::MatrixXd whiten_gradient(const Problem& pb, const FieldComponent& f,
                                const Eigen::MatrixXd& gradP) {
  Eigen::MatrixXd out(f.Wstar.rows(), f.ncoord);
  if (f.ncoord == 1) {
    out.col(0) =
        f.Wstar.col(0) +
        f.sigma_lambda() *
            tri_solve(pb.hyper, gradP.col(0), TriSolveMode::transpose);
  } else {
    Eigen::Matrix3d Shalf = spd_sqrt(f.S);
    Eigen::MatrixXd t(gradP.rows(), 3);
    for (int c = 0; c < 3; ++c)
      t.col(c) = tri_solve(pb.hyper, gradP.col(c), TriSolveMode::transpose);
    out = f.Wstar + t * Shalf;
  }
  return out;
}

Eigen::VectorXd grad_sigma_sufficient(const Problem& pb, const ChainState& st) {
  const Eigen::VectorXd v = st.w.cwiseQuotient(st.params.sigma);
  const Eigen::VectorXd t = st.corr.apply_t(st.corr.apply(v));
  return Eigen::VectorXd::Constant(pb.n(), 0.5) -
         0.5 * st.w.cwiseProduct(t).cwiseQuotient(st.params.sigma);
}

Eigen::VectorXd grad_sigma_ancillary(const Problem& pb, const ChainState& st) {
  return grad_latent_data(pb, st).cwiseProduct(0.5 * st.w);
}

Eigen::MatrixXd grad_range_sufficient(const Problem& pb, const ChainState& st,
                                      const FactorDerivativeSet& ds) {
  const Eigen::VectorXd v = st.w.cwiseQuotient(st.params.sigma);
  const Eigen::VectorXd u = st.corr.apply(v);
  return derivative_sandwich(pb.dag, ds, st.corr, u, v) -
         logdet_derivative(pb.dag, ds, st.corr);
}

Eigen::MatrixXd grad_range_ancillary(const Problem& pb, const ChainState& st,
                                     const FactorDerivativeSet& ds) {
  const Eigen::VectorXd gl = grad_latent_data(pb, st);
  const Eigen::VectorXd u = tri_solve(
      st.corr, gl.cwiseProduct(st.params.sigma), TriSolveMode::transpose);
  const Eigen::VectorXd v = st.w.cwiseQuotient(st.params.sigma);
  return -derivative_sandwich(pb.dag, ds, st.corr, u, v);
}

Eigen::VectorXd grad_tau_obs(const Problem& pb, const ChainState& st) {
  const Dataset& d = pb.data;
  Eigen::VectorXd g(d.n_obs());
  Eigen::VectorXd mu = d.X * st.beta;
  for (int x = 0; x < d.n_obs(); ++x) {
    const double r = d.z[x] - mu[x] - st.w[d.site[x]];
    g[x] = 0.5 - 0.5 * r * r / st.tau2[x];
  }
  return g;
}

Eigen::VectorXd grad_tau(const Problem& pb, const ChainState& st) {
  Eigen::VectorXd go = grad_tau_obs(pb, st);
  Eigen::VectorXd g = Eigen::VectorXd::Zero(pb.n());
  for (int x = 0; x < pb.data.n_obs(); ++x) g[pb.data.site[x]] += go[x];
  return g;
}

Eigen::MatrixXd grad_beta_field(const Problem& pb, Comp c,
                                const Eigen::MatrixXd& grad_field) {
  return design(pb, c).transpose() * grad_field;
}

Eigen::Matrix3d grad_S(const Problem& pb, const FieldComponent& f,
                       const Eigen::MatrixXd& gradP, double h) {
  // Phi = G^{-1} W*, so W = Phi S^{1/2}; move each symmetric coordinate of S
  Eigen::MatrixXd Phi(f.Wstar.rows(), 3);
  for (int c = 0; c < 3; ++c)
    Phi.col(c) = tri_solve(pb.hyper, f.Wstar.col(c), TriSolveMode::forward);
  const Eigen::Matrix3d base = spd_sqrt(f.S);
  Eigen::Matrix3d g = Eigen::Matrix3d::Zero();
  for (int k = 0; k < 3; ++k) {
    for (int l = 0; l <= k; ++l) {
      Eigen::Matrix3d Sp = f.S;
      Sp(k, l) += h;
      if (k != l) Sp(l, k) += h;
      Eigen::Matrix3d dP = (spd_sqrt(Sp) - base) / h;
      const double val = (gradP.transpose() * (Phi * dP)).trace();
      g(k, l) = val;
      g(l, k) = val;
    }
  }
  return g;
}

}  // namespace nsgp
