#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <Eigen/Dense>
#include <cmath>

#include "geweke.hpp"
#include "helpers.hpp"
#include "nsgp/sampler.hpp"

using namespace nsgp;
using namespace nsgp::testing;

namespace {

HmcTarget quadratic_target(const Eigen::VectorXd& prec) {
  HmcTarget t;
  t.dim = static_cast<int>(prec.size());
  t.eval = [prec](const Eigen::VectorXd& q, Eigen::VectorXd* g) {
    if (g) *g = prec.cwiseProduct(q);
    return 0.5 * q.dot(prec.cwiseProduct(q));
  };
  return t;
}

ModelConfig geweke_config(bool s2, bool rg, bool noi,
                          RangeKind kind = RangeKind::scalar) {
  ModelConfig mc;
  mc.nonstat_sigma2 = s2;
  mc.nonstat_range = rg;
  mc.nonstat_noise = noi;
  mc.range_kind = kind;
  mc.m = 3;
  mc.gamma_lo = -3.0;
  mc.gamma_hi = 0.5;
  mc.beta_prior_var = 0.25;
  mc.s_prior.inverse_wishart = true;
  mc.s_prior.nu0 = 8.0;
  mc.s_prior.Psi0 = 0.4 * Eigen::Matrix3d::Identity();
  return mc;
}

}  // namespace

TEST_CASE("leapfrog is exactly reversible") {
  Rng rng(301);
  Eigen::VectorXd prec(5);
  for (int i = 0; i < 5; ++i) prec[i] = 0.5 + rng.uniform();
  HmcTarget t = quadratic_target(prec);
  Eigen::VectorXd q0 = random_normal(5, rng), p0 = random_normal(5, rng);
  Eigen::VectorXd q = q0, p = p0;
  leapfrog(q, p, t, 0.08, 25);
  p = -p;
  leapfrog(q, p, t, 0.08, 25);
  p = -p;
  CHECK((q - q0).cwiseAbs().maxCoeff() <= 1e-10);
  CHECK((p - p0).cwiseAbs().maxCoeff() <= 1e-10);
}

TEST_CASE("hmc energy error shrinks as eps^2 and acceptance goes to one") {
  Rng rng(303);
  Eigen::VectorXd prec = Eigen::VectorXd::Ones(4);
  HmcTarget t = quadratic_target(prec);
  SUBCASE("energy conservation at eps = 1e-3") {
    Eigen::VectorXd q = random_normal(4, rng);
    double worst = 0.0;
    for (int rep = 0; rep < 50; ++rep) {
      HmcResult r = hmc_step(q, t, 1e-3, 10, rng);
      worst = std::max(worst, std::abs(r.energy_error));
    }
    CHECK(worst <= 1e-3);
  }
  SUBCASE("acceptance approaches one") {
    double accept_small = 0.0, accept_large = 0.0;
    Eigen::VectorXd q = random_normal(4, rng);
    for (int rep = 0; rep < 200; ++rep) {
      accept_small += hmc_step(q, t, 1e-3, 10, rng).accept_prob;
      accept_large += hmc_step(q, t, 1.5, 10, rng).accept_prob;
    }
    CHECK(accept_small / 200 > 0.9999);
    CHECK(accept_large / 200 < accept_small / 200);
  }
}

TEST_CASE("hmc samples a standard normal") {
  Rng rng(307);
  HmcTarget t = quadratic_target(Eigen::VectorXd::Ones(1));
  Eigen::VectorXd q = Eigen::VectorXd::Zero(1);
  const int n = 10000;
  double sum = 0.0, sumsq = 0.0;
  for (int i = 0; i < n; ++i) {
    hmc_step(q, t, 0.4, 10, rng);
    sum += q[0];
    sumsq += q[0] * q[0];
  }
  const double mean = sum / n, var = sumsq / n - mean * mean;
  // leapfrog with L=10, eps=.4 decorrelates quickly; ESS is close to n
  CHECK(std::abs(mean) < 4.0 / std::sqrt(static_cast<double>(n) / 10.0));
  CHECK(var == doctest::Approx(1.0).epsilon(0.1));
}

TEST_CASE("nonfinite energy rejects with a divergence flag") {
  HmcTarget t;
  t.dim = 1;
  t.eval = [](const Eigen::VectorXd& q, Eigen::VectorXd* g) {
    if (g) (*g)[0] = 1.0;
    return std::abs(q[0]) > 1.0 ? std::numeric_limits<double>::infinity() : 0.0;
  };
  Rng rng(311);
  Eigen::VectorXd q = Eigen::VectorXd::Zero(1);
  int divergent = 0;
  for (int i = 0; i < 50; ++i) {
    HmcResult r = hmc_step(q, t, 5.0, 10, rng);
    if (r.divergent) {
      ++divergent;
      CHECK(!r.accepted);
    }
  }
  CHECK(divergent > 0);
}

TEST_CASE("dual averaging drives acceptance toward the target") {
  Rng rng(313);
  Eigen::VectorXd prec = Eigen::VectorXd::Ones(20);
  HmcTarget t = quadratic_target(prec);
  DualAveraging da;
  da.init(1.0);
  Eigen::VectorXd q = random_normal(20, rng);
  for (int i = 0; i < 400; ++i) {
    HmcResult r = hmc_step(q, t, da.eps(true), 10, rng);
    da.update(r.divergent ? 0.0 : r.accept_prob, 0.8);
  }
  double acc = 0.0;
  const double eps = da.eps(false);
  for (int i = 0; i < 300; ++i) acc += hmc_step(q, t, eps, 10, rng).accept_prob;
  CHECK(acc / 300 == doctest::Approx(0.8).epsilon(0.15));
}

TEST_CASE("truncated conjugate draw of the log variance") {
  Rng rng(317);
  SUBCASE("wide box reproduces inverse-gamma moments") {
    const double n = 14.0, q = 9.0;
    double sum = 0.0, sum2 = 0.0;
    const int reps = 40000;
    for (int i = 0; i < reps; ++i) {
      const double s2 = std::exp(truncated_log_variance_draw(n, q, -40.0, 40.0, rng));
      sum += s2;
      sum2 += s2 * s2;
    }
    const double a = n / 2, b = q / 2;
    const double want_mean = b / (a - 1);
    const double want_var = b * b / ((a - 1) * (a - 1) * (a - 2));
    CHECK(sum / reps == doctest::Approx(want_mean).epsilon(0.03));
    CHECK(sum2 / reps - std::pow(sum / reps, 2) ==
          doctest::Approx(want_var).epsilon(0.12));
  }
  SUBCASE("degenerate field mass collapses to the lower bound") {
    double worst = -100.0;
    for (int i = 0; i < 200; ++i)
      worst = std::max(worst, truncated_log_variance_draw(30.0, 0.0, -8.0, 3.0, rng));
    CHECK(worst <= -7.0);  // density ~ e^{-15 gamma} on [-8,3]
  }
  SUBCASE("respects the box") {
    for (int i = 0; i < 500; ++i) {
      const double g = truncated_log_variance_draw(10.0, 2.0, -2.0, -1.0, rng);
      CHECK(g >= -2.0);
      CHECK(g <= -1.0);
    }
  }
}

TEST_CASE("latent gibbs draw matches the conjugate posterior on one site") {
  Rng rng(331);
  Dataset ds;
  ds.locs = make_locations(Eigen::MatrixXd::Zero(1, 2));
  ds.z = Eigen::VectorXd::Constant(1, 2.0);
  ds.X = Eigen::MatrixXd::Zero(1, 0);  // no fixed effects
  ds.X_theta = Eigen::MatrixXd::Ones(1, 1);
  ds.X_tau = Eigen::MatrixXd::Ones(1, 1);
  ds.site = {0};
  ds.rebuild_obs_index();
  ModelConfig mc;
  mc.m = 1;
  Problem pb = make_problem(ds, mc);
  SamplerConfig sc;
  Sampler smp(pb, sc);
  ChainState st = init_state(pb);
  st.sig.beta(0, 0) = std::log(2.0);  // sigma^2 = 2
  st.noi.beta(0, 0) = std::log(0.5);  // tau^2 = 0.5
  refresh_covariance(pb, st);
  refresh_tau(pb, st);
  const double prec = 1.0 / 2.0 + 1.0 / 0.5;
  const double want_mean = (2.0 / 0.5) / prec;
  const double want_var = 1.0 / prec;
  double sum = 0.0, sum2 = 0.0;
  const int reps = 30000;
  for (int i = 0; i < reps; ++i) {
    smp.update_latent(st, rng);
    sum += st.w[0];
    sum2 += st.w[0] * st.w[0];
  }
  CHECK(sum / reps == doctest::Approx(want_mean).epsilon(0.02));
  CHECK(sum2 / reps - std::pow(sum / reps, 2) ==
        doctest::Approx(want_var).epsilon(0.05));

  SUBCASE("infinite noise reverts to the prior conditional") {
    st.noi.beta(0, 0) = 60.0;  // tau^2 -> inf
    refresh_tau(pb, st);
    double s = 0.0, s2 = 0.0;
    for (int i = 0; i < reps; ++i) {
      smp.update_latent(st, rng);
      s += st.w[0];
      s2 += st.w[0] * st.w[0];
    }
    CHECK(std::abs(s / reps) <= 0.05);
    CHECK(s2 / reps == doctest::Approx(2.0).epsilon(0.05));
  }
}

TEST_CASE("interweaving re-maps are exact inverses") {
  Rng rng(337);
  TestProblem tp = random_problem(60, 4, rng, true, true, false);
  ChainState st = tp.st;
  Eigen::VectorXd w0 = st.w;
  for (int rep = 0; rep < 50; ++rep) {
    st.wstar = whiten(st, st.w);
    st.w = unwhiten(st, st.wstar);
  }
  CHECK((st.w - w0).cwiseAbs().maxCoeff() <= 1e-12);
  // hyper-level maps as well
  Eigen::MatrixXd W0 = st.rng.W;
  for (int rep = 0; rep < 50; ++rep) {
    st.rng.Wstar = hyper_whiten(tp.pb, st.rng);
    st.rng.W = hyper_unwhiten(tp.pb, st.rng);
  }
  CHECK((st.rng.W - W0).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("chains are bit-reproducible for a fixed seed") {
  Rng rng(341);
  Dataset ds = random_dataset(40, rng);
  ModelConfig mc = geweke_config(true, true, true);
  mc.beta_prior_var = std::numeric_limits<double>::infinity();
  Problem pb = make_problem(ds, mc);
  SamplerConfig sc;
  sc.iterations = 60;
  sc.warmup = 20;
  sc.seed = 77;
  ChainTrace a = Sampler(pb, sc).run_chain();
  ChainTrace b = Sampler(pb, sc).run_chain();
  REQUIRE(a.rows.size() == b.rows.size());
  for (std::size_t i = 0; i < a.rows.size(); ++i)
    CHECK((a.rows[i] - b.rows[i]).cwiseAbs().maxCoeff() == 0.0);
  SamplerConfig sc2 = sc;
  sc2.seed = 78;
  ChainTrace c2 = Sampler(pb, sc2).run_chain();
  CHECK((a.rows[5] - c2.rows[5]).cwiseAbs().maxCoeff() > 0.0);
}

TEST_CASE("stationary components leave the update blocks as no-ops") {
  Rng rng(347);
  Dataset ds = random_dataset(25, rng);
  Problem pb = make_problem(ds, geweke_config(false, false, false));
  SamplerConfig sc;
  Sampler smp(pb, sc);
  ChainState st = init_state(pb);
  Eigen::MatrixXd W0 = st.sig.W;
  const double g0 = st.sig.gamma;
  smp.update_field_interweaved(st, Comp::sigma2, rng, false);
  smp.update_hypervariance_nested(st, Comp::sigma2, rng, false);
  CHECK((st.sig.W - W0).cwiseAbs().maxCoeff() == 0.0);
  CHECK(st.sig.gamma == g0);
}

TEST_CASE("centered conjugate beta draw matches the hand posterior") {
  Rng rng(353);
  Dataset ds = random_dataset(30, rng);
  ModelConfig mc = geweke_config(true, false, false);
  mc.beta_prior_var = std::numeric_limits<double>::infinity();
  Problem pb = make_problem(ds, mc);
  SamplerConfig sc;
  Sampler smp(pb, sc);
  ChainState base = init_state(pb);
  base.sig.W = random_normal_mat(30, 1, rng, 0.5);
  base.sig.beta(0, 0) = 0.7;
  base.sig.gamma = -0.5;
  refresh_covariance(pb, base);

  // intercept-only: the conditional is a Gaussian mean given the centered field
  Eigen::MatrixXd Wc =
      center_field(base.sig.W, pb.data.X_theta, base.sig.beta, CenterDir::center);
  Eigen::VectorXd Gx = pb.hyper.apply(Eigen::VectorXd::Ones(30));
  Eigen::VectorXd GW = pb.hyper.apply(Wc.col(0));
  const double s2 = std::exp(base.sig.gamma);
  const double want_var = s2 / Gx.squaredNorm();
  const double want_mean = Gx.dot(GW) / Gx.squaredNorm();

  double sum = 0.0, sum2 = 0.0;
  const int reps = 20000;
  for (int i = 0; i < reps; ++i) {
    ChainState st = base;
    smp.conjugate_beta_centered(st, Comp::sigma2, rng);
    sum += st.sig.beta(0, 0);
    sum2 += std::pow(st.sig.beta(0, 0), 2);
    // the centered field (hence lambda) is unchanged
    if (i == 0) {
      Eigen::MatrixXd Wc2 =
          center_field(st.sig.W, pb.data.X_theta, st.sig.beta, CenterDir::center);
      CHECK((Wc2 - Wc).cwiseAbs().maxCoeff() <= 1e-12);
    }
  }
  CHECK(sum / reps == doctest::Approx(want_mean).epsilon(0.02));
  CHECK(sum2 / reps - std::pow(sum / reps, 2) ==
        doctest::Approx(want_var).epsilon(0.05));

  SUBCASE("vanishing hyper variance reduces to the GLS point") {
    ChainState st = base;
    st.sig.gamma = -30.0;
    smp.conjugate_beta_centered(st, Comp::sigma2, rng);
    CHECK(st.sig.beta(0, 0) == doctest::Approx(want_mean).epsilon(1e-4));
  }
}

TEST_CASE("geweke: latent block alone") {
  Rng rng(359);
  Dataset ds = random_dataset(30, rng, 5.0, 10, 0);  // no fixed effects
  ModelConfig mc = geweke_config(false, false, false);
  // blocks other than the latent are frozen; pin their parameters to
  // constants on both sides of the comparison
  mc.beta_prior_var = 1e-12;
  Problem pb = make_problem(ds, mc);
  SamplerConfig sc;
  sc.hmc.eps0 = 0.05;
  Sampler smp(pb, sc);
  auto [names, stat] = default_stats();
  auto sweep = [&](ChainState& st, Rng& r) { smp.update_latent(st, r); };
  GewekeResult res = geweke_compare(pb, names, stat, sweep, 12000, 12000, rng);
  INFO("max |z| = " << res.zscores.cwiseAbs().maxCoeff());
  CHECK(res.pass());
}

TEST_CASE("geweke: full sweep, scalar-range model") {
  Rng rng(367);
  Dataset ds = random_dataset(30, rng, 5.0, 10, 1);
  Problem pb = make_problem(ds, geweke_config(true, true, true));
  SamplerConfig sc;
  sc.hmc.eps0 = 0.05;
  sc.hmc.l_field = 4;
  sc.hmc.l_scalar = 3;
  Sampler smp(pb, sc);
  auto [names, stat] = default_stats();
  std::vector<std::function<double(const ChainState&)>> extra;
  append_comp_stats(names, extra, Comp::sigma2, "sigma2", false);
  append_comp_stats(names, extra, Comp::range, "range", false);
  append_comp_stats(names, extra, Comp::noise, "noise", false);
  StatFn full = [&, stat](const Problem& p, const ChainState& s) {
    Eigen::VectorXd base = stat(p, s);
    Eigen::VectorXd out(base.size() + extra.size());
    out.head(base.size()) = base;
    for (std::size_t k = 0; k < extra.size(); ++k)
      out[base.size() + k] = extra[k](s);
    return out;
  };
  auto sweep = [&](ChainState& st, Rng& r) { smp.iterate(st, r, false); };
  GewekeResult res = geweke_compare(pb, names, full, sweep, 12000, 12000, rng);
  for (int k = 0; k < res.zscores.size(); ++k) {
    INFO(res.names[k] << " z = " << res.zscores[k]);
    CHECK(std::abs(res.zscores[k]) < 2.5758);
  }
}

TEST_CASE("geweke: full sweep, elliptic-range model") {
  Rng rng(373);
  Dataset ds = random_dataset(24, rng, 5.0, 8, 1);
  Problem pb = make_problem(ds, geweke_config(false, true, false, RangeKind::elliptic));
  SamplerConfig sc;
  sc.hmc.eps0 = 0.05;
  sc.hmc.l_field = 4;
  sc.hmc.l_scalar = 3;
  Sampler smp(pb, sc);
  auto [names, stat] = default_stats();
  std::vector<std::function<double(const ChainState&)>> extra;
  append_comp_stats(names, extra, Comp::range, "range", true);
  StatFn full = [&, stat](const Problem& p, const ChainState& s) {
    Eigen::VectorXd base = stat(p, s);
    Eigen::VectorXd out(base.size() + extra.size());
    out.head(base.size()) = base;
    for (std::size_t k = 0; k < extra.size(); ++k)
      out[base.size() + k] = extra[k](s);
    return out;
  };
  auto sweep = [&](ChainState& st, Rng& r) { smp.iterate(st, r, false); };
  GewekeResult res = geweke_compare(pb, names, full, sweep, 9000, 9000, rng);
  for (int k = 0; k < res.zscores.size(); ++k) {
    INFO(res.names[k] << " z = " << res.zscores[k]);
    CHECK(std::abs(res.zscores[k]) < 2.5758);
  }
}

TEST_CASE("run_chain bookkeeping") {
  Rng rng(379);
  Dataset ds = random_dataset(30, rng);
  ModelConfig mc = geweke_config(true, false, true);
  mc.beta_prior_var = std::numeric_limits<double>::infinity();
  Problem pb = make_problem(ds, mc);
  SamplerConfig sc;
  sc.iterations = 120;
  sc.warmup = 40;
  sc.thin = 2;
  Sampler smp(pb, sc);
  ChainTrace tr = smp.run_chain();
  CHECK(tr.rows.size() == 40);
  CHECK(tr.n_accum == 80);
  CHECK(tr.names.size() == tr.rows[0].size());
  for (const auto& [name, rate] : tr.accept_rate) {
    INFO(name);
    CHECK(rate >= 0.0);
    CHECK(rate <= 1.0);
  }
  // gamma columns exist for the active components only
  CHECK_NOTHROW(tr.column("sigma2.gamma"));
  CHECK_NOTHROW(tr.column("noise.gamma"));
  CHECK_THROWS(tr.column("range.gamma"));
  CHECK(std::isfinite(tr.dev_mean));
}
