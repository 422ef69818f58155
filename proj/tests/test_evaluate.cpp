#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>

#include "helpers.hpp"
#include "nsgp/evaluate.hpp"

using namespace nsgp;
using namespace nsgp::testing;

namespace {
constexpr double kLog2Pi = 1.8378770664093454836;

CovParams random_scalar_params(int n, Rng& rng, double sd = 0.4) {
  CovParams p = stationary_params(n, 2, 1.0, 0.3, Kernel::exponential);
  for (int i = 0; i < n; ++i) {
    p.sigma[i] = std::exp(0.5 * sd * rng.normal());
    p.alpha[i] = std::exp(std::log(0.3) + sd * rng.normal());
  }
  return p;
}
}  // namespace

TEST_CASE("dic") {
  Rng rng(401);
  SUBCASE("constant trace has zero effective parameters") {
    Dataset ds = random_dataset(10, rng);
    ModelConfig mc;
    mc.m = 3;
    Problem pb = make_problem(ds, mc);
    ChainState st = init_state(pb);
    st.w = random_normal(10, rng);
    refresh_tau(pb, st);
    ChainTrace tr;
    tr.n_accum = 100;
    tr.w_mean = st.w;
    tr.beta_mean = st.beta;
    tr.tau2_mean = st.tau2;
    tr.dev_mean = -2.0 * data_loglik(pb, st);
    CHECK(dic(tr, pb) == doctest::Approx(tr.dev_mean).epsilon(1e-12));
  }
  SUBCASE("an ignored covariate column leaves DIC unchanged") {
    Dataset ds = random_dataset(10, rng, 5.0, 5, 1);
    Dataset ds2 = ds;
    ds2.X.conservativeResize(Eigen::NoChange, 2);
    for (int x = 0; x < ds2.n_obs(); ++x) ds2.X(x, 1) = rng.normal();
    ModelConfig mc;
    mc.m = 3;
    Problem pa = make_problem(ds, mc);
    Problem pc = make_problem(ds2, mc);
    ChainTrace ta, tb;
    ta.n_accum = tb.n_accum = 5;
    ta.w_mean = tb.w_mean = random_normal(10, rng);
    ta.tau2_mean = tb.tau2_mean = Eigen::VectorXd::Constant(ds.n_obs(), 0.4);
    ta.beta_mean = Eigen::VectorXd::Constant(1, 0.8);
    tb.beta_mean = Eigen::VectorXd::Zero(2);
    tb.beta_mean[0] = 0.8;  // the added column carries a zero coefficient
    ta.dev_mean = tb.dev_mean = 123.0;
    CHECK(dic(ta, pa) == doctest::Approx(dic(tb, pc)).epsilon(1e-13));
  }
  SUBCASE("matches an exhaustive-grid posterior on a conjugate scalar model") {
    // one site, one observation, fixed sigma^2 = 1, tau^2 = 1
    Dataset ds;
    ds.locs = make_locations(Eigen::MatrixXd::Zero(1, 2));
    ds.z = Eigen::VectorXd::Constant(1, 0.8);
    ds.X = Eigen::MatrixXd::Zero(1, 0);
    ds.X_theta = Eigen::MatrixXd::Ones(1, 1);
    ds.X_tau = Eigen::MatrixXd::Ones(1, 1);
    ds.site = {0};
    ds.rebuild_obs_index();
    ModelConfig mc;
    mc.m = 1;
    Problem pb = make_problem(ds, mc);
    // posterior of w: N(z/2, 1/2); grid quadrature for E[D] and D(E[w])
    const double pm = 0.4, pv = 0.5;
    double ed = 0.0, norm = 0.0;
    for (int i = 0; i < 20001; ++i) {
      const double w = pm - 6.0 + 12.0 * i / 20000.0;
      const double dens = std::exp(-0.5 * (w - pm) * (w - pm) / pv);
      ed += dens * (kLog2Pi + (0.8 - w) * (0.8 - w));
      norm += dens;
    }
    ed /= norm;
    const double d_at_mean = kLog2Pi + (0.8 - pm) * (0.8 - pm);
    const double want = 2.0 * ed - d_at_mean;
    // independent route: iid posterior sampling filling the trace accumulators
    ChainTrace tr;
    const int reps = 4000000;
    tr.n_accum = 2 * reps;
    tr.beta_mean = Eigen::VectorXd(0);
    double wsum = 0.0, dsum = 0.0;
    for (int i = 0; i < reps; ++i) {
      // antithetic pairs shrink the Monte Carlo error well below 1e-3
      const double e = std::sqrt(pv) * rng.normal();
      wsum += 2.0 * pm;
      dsum += 2.0 * kLog2Pi + (0.8 - pm - e) * (0.8 - pm - e) +
              (0.8 - pm + e) * (0.8 - pm + e);
    }
    tr.w_mean = Eigen::VectorXd::Constant(1, wsum / (2 * reps));
    tr.tau2_mean = Eigen::VectorXd::Constant(1, 1.0);
    tr.dev_mean = dsum / (2 * reps);
    INFO("dic=" << dic(tr, pb) << " grid=" << want);
    CHECK(std::abs(dic(tr, pb) - want) <= 1e-3);
  }
}

TEST_CASE("mse") {
  Rng rng(409);
  Eigen::VectorXd t = random_normal(50, rng);
  CHECK(mse(t, t) == 0.0);
  CHECK(mse(t.array() + 3.0, t) == doctest::Approx(9.0).epsilon(1e-13));
  Eigen::VectorXd e = random_normal(50, rng);
  CHECK(mse(e, t) == doctest::Approx((e - t).squaredNorm() / 50).epsilon(1e-14));
  CHECK_THROWS(mse(e, random_normal(10, rng)));
}

TEST_CASE("log_score") {
  Rng rng(419);
  SUBCASE("perfect prediction, unit variance") {
    Eigen::VectorXd z = random_normal(7, rng);
    const double got = log_score(z, z, Eigen::VectorXd::Ones(7));
    CHECK(got == doctest::Approx(-3.5 * kLog2Pi).epsilon(1e-13));
  }
  SUBCASE("hand formula") {
    Eigen::VectorXd z(1), m(1), v(1);
    z << 2.0;
    m << 1.0;
    v << 4.0;
    CHECK(log_score(z, m, v) ==
          doctest::Approx(-0.5 * (kLog2Pi + std::log(4.0)) - 0.125).epsilon(1e-13));
  }
  SUBCASE("monotone under shrinking residuals at fixed variance") {
    Eigen::VectorXd z = Eigen::VectorXd::Constant(4, 1.0);
    Eigen::VectorXd v = Eigen::VectorXd::Constant(4, 0.7);
    const double far = log_score(z, Eigen::VectorXd::Constant(4, 3.0), v);
    const double near = log_score(z, Eigen::VectorXd::Constant(4, 1.5), v);
    CHECK(near > far);
  }
}

TEST_CASE("kl divergence against the dense oracle") {
  Rng rng(421);
  SUBCASE("saturated neighbor set gives zero") {
    const int n = 60;
    Eigen::MatrixXd c = random_coords(n, 2, rng);
    CovParams p = random_scalar_params(n, rng);
    CovParams corr = p;
    corr.sigma = Eigen::VectorXd::Ones(n);
    NeighborDag dag = build_dag(c, n - 1);
    SparseTriFactor f = build_factor(dag, c, corr);
    const double kl = kl_nngp(dense_covariance(c, corr), f);
    CHECK(std::abs(kl) <= 1e-8);
  }
  SUBCASE("sigma fields do not move the divergence") {
    const int n = 50;
    Eigen::MatrixXd c = random_coords(n, 2, rng);
    NeighborDag dag = build_dag(c, 5);
    for (int rep = 0; rep < 20; ++rep) {
      CovParams p = random_scalar_params(n, rng);
      CovParams corr = p;
      corr.sigma = Eigen::VectorXd::Ones(n);
      const double kl_corr =
          kl_nngp(dense_covariance(c, corr), build_factor(dag, c, corr));
      const double kl_cov =
          kl_nngp(dense_covariance(c, p), build_factor(dag, c, p));
      CHECK(std::abs(kl_corr - kl_cov) <= 1e-10 * std::max(1.0, kl_corr));
    }
  }
  SUBCASE("agrees with a Monte-Carlo two-density estimate") {
    const int n = 50;
    Eigen::MatrixXd c = random_coords(n, 2, rng);
    CovParams corr = random_scalar_params(n, rng);
    corr.sigma = Eigen::VectorXd::Ones(n);
    NeighborDag dag = build_dag(c, 4);
    SparseTriFactor f = build_factor(dag, c, corr);
    Eigen::MatrixXd Sigma = dense_covariance(c, corr);
    const double kl = kl_nngp(Sigma, f);
    CHECK(kl >= 0.0);
    Eigen::LLT<Eigen::MatrixXd> llt(Sigma);
    Eigen::MatrixXd L = llt.matrixL();
    const double ld_dense =
        2.0 * L.diagonal().array().log().sum();
    const int reps = 200000;
    double sum = 0.0, sum2 = 0.0;
    for (int i = 0; i < reps; ++i) {
      Eigen::VectorXd x = L * random_normal(n, rng);
      const double lp0 =
          -0.5 * (ld_dense + x.dot(llt.solve(x)) + n * kLog2Pi);
      auto [ld, qf] = logdet_and_quadform(f, x);
      const double lp1 = ld - 0.5 * qf - 0.5 * n * kLog2Pi;
      const double d = lp0 - lp1;
      sum += d;
      sum2 += d * d;
    }
    const double mean = sum / reps;
    const double se = std::sqrt((sum2 / reps - mean * mean) / reps);
    CHECK(std::abs(kl - mean) <= 5.0 * se);
  }
}

TEST_CASE("overmodel indicators") {
  SUBCASE("identity hyper covariance gives zeros") {
    Eigen::Vector3d ind = overmodel_indicators(Eigen::Matrix3d::Identity());
    CHECK(ind.cwiseAbs().maxCoeff() <= 1e-14);
  }
  SUBCASE("constructed spectrum is recovered") {
    const double r2 = 1.0 / std::sqrt(2.0);
    Eigen::Vector3d v(r2, 0.0, r2), u(r2, 0.0, -r2), x(0.0, 1.0, 0.0);
    const double c = 0.8, eps = 1e-3;
    Eigen::Matrix3d S = std::exp(c) * v * v.transpose() +
                        eps * (u * u.transpose() + x * x.transpose());
    Eigen::Vector3d ind = overmodel_indicators(S);
    CHECK(ind[0] == doctest::Approx(c).epsilon(1e-10));
    CHECK(ind[1] == doctest::Approx(std::log(eps)).epsilon(1e-10));
    CHECK(ind[2] == doctest::Approx(std::log(eps)).epsilon(1e-10));
  }
  SUBCASE("basis is the documented Gram-Schmidt completion") {
    // v, u, x form an orthonormal triple in vech coordinates
    const double r2 = 1.0 / std::sqrt(2.0);
    Eigen::Matrix3d B;
    B << r2, r2, 0.0, 0.0, 0.0, 1.0, r2, -r2, 0.0;
    CHECK((B.transpose() * B - Eigen::Matrix3d::Identity()).cwiseAbs().maxCoeff() <=
          1e-15);
  }
}

TEST_CASE("gelman rubin") {
  Rng rng(431);
  SUBCASE("identical-law iid chains sit near one") {
    std::vector<Eigen::VectorXd> chains;
    for (int c = 0; c < 4; ++c) chains.push_back(random_normal(2000, rng));
    const double psrf = gelman_rubin(chains);
    CHECK(psrf == doctest::Approx(1.0).epsilon(0.05));
  }
  SUBCASE("disjoint supports blow up") {
    std::vector<Eigen::VectorXd> chains;
    chains.push_back(random_normal(500, rng));
    chains.push_back(random_normal(500, rng).array() + 50.0);
    CHECK(gelman_rubin(chains) > 10.0);
  }
  SUBCASE("constant chains are rejected") {
    std::vector<Eigen::VectorXd> chains(2, Eigen::VectorXd::Zero(100));
    CHECK_THROWS(gelman_rubin(chains));
    CHECK_THROWS(gelman_rubin(std::vector<Eigen::VectorXd>{random_normal(100, rng)}));
  }
}

TEST_CASE("dic equality between stationary and degenerate nonstationary runs") {
  Rng rng(433);
  Dataset ds = random_dataset(12, rng);
  ModelConfig stat_cfg;
  stat_cfg.m = 3;
  ModelConfig ns_cfg = stat_cfg;
  ns_cfg.nonstat_range = true;
  Problem pa = make_problem(ds, stat_cfg);
  Problem pc = make_problem(ds, ns_cfg);
  // identical (w, beta, tau) histories give identical DIC, the deviance does
  // not see the covariance parameters
  ChainTrace tr;
  tr.n_accum = 3;
  tr.w_mean = random_normal(12, rng);
  tr.beta_mean = Eigen::VectorXd::Constant(1, 0.2);
  tr.tau2_mean = Eigen::VectorXd::Constant(ds.n_obs(), 0.3);
  tr.dev_mean = 77.0;
  CHECK(dic(tr, pa) == dic(tr, pc));
}
