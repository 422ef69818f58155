#include <CLI11.hpp>
#include <Eigen/Dense>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <thread>

#ifdef _OPENMP
#include <omp.h>
#endif

#include "nsgp/evaluate.hpp"
#include "nsgp/io.hpp"
#include "nsgp/sampler.hpp"

namespace fs = std::filesystem;
using namespace nsgp;

namespace {

constexpr int kExitBadInput = 2;

struct CommonOpts {
  std::string config_path;
  std::uint64_t seed = 0;
  bool seed_set = false;
  int threads = 0;
};

Config load_config(const CommonOpts& o) {
  if (o.config_path.empty()) return Config::parse_string("schema = 1\n");
  return Config::parse_file(o.config_path);
}

std::uint64_t effective_seed(const CommonOpts& o, const Config& cfg) {
  return o.seed_set ? o.seed : static_cast<std::uint64_t>(cfg.get("seed", 1));
}

void set_threads(int t) {
#ifdef _OPENMP
  if (t > 0) omp_set_num_threads(t);
#else
  (void)t;
#endif
}

// per-site posterior summaries mapped back to the external site ids
void write_fields_csv(const std::string& path, const Problem& pb,
                      const ChainTrace& tr) {
  std::vector<std::string> names{"id", "x", "y", "w_mean"};
  const int d = pb.data.locs.dim();
  if (d == 1) names = {"id", "x", "w_mean"};
  auto add_field = [&](const std::string& nm, int ncoord) {
    for (int c = 0; c < ncoord; ++c)
      names.push_back(ncoord > 1 ? nm + "." + std::to_string(c) : nm);
  };
  add_field("W_sigma2", tr.field_mean[0].cols());
  add_field("W_range", tr.field_mean[1].cols());
  add_field("W_noise", tr.field_mean[2].cols());
  const int n = pb.n();
  Eigen::MatrixXd rows(n, names.size());
  for (int i = 0; i < n; ++i) {
    int k = 0;
    rows(i, k++) = static_cast<double>(pb.data.locs.ids[i]);
    for (int c = 0; c < d; ++c) rows(i, k++) = pb.coords(i, c);
    rows(i, k++) = tr.w_mean[i];
    for (int f = 0; f < 3; ++f)
      for (int c = 0; c < tr.field_mean[f].cols(); ++c)
        rows(i, k++) = tr.field_mean[f](i, c);
  }
  write_table_csv(path, names, rows);
}

int cmd_simulate(const CommonOpts& o, const std::string& out_dir) {
  Config cfg = load_config(o);
  SimSpec spec = cfg.sim_spec();
  spec.seed = effective_seed(o, cfg);
  Rng rng(spec.seed);
  auto [ds, truth] = simulate_dataset(spec, rng);
  fs::create_directories(out_dir);
  write_sites_csv((fs::path(out_dir) / "sites.csv").string(), ds.locs);
  write_obs_csv((fs::path(out_dir) / "obs.csv").string(), ds);
  {
    std::vector<std::string> names{"id", "w_true"};
    for (int c = 0; c < truth.field_range.cols(); ++c)
      names.push_back("log_range_true" +
                      (truth.field_range.cols() > 1 ? "." + std::to_string(c) : ""));
    names.push_back("log_sigma2_true");
    names.push_back("log_noise_true");
    Eigen::MatrixXd rows(ds.n_sites(), names.size());
    for (int i = 0; i < ds.n_sites(); ++i) {
      int k = 0;
      rows(i, k++) = static_cast<double>(ds.locs.ids[i]);
      rows(i, k++) = truth.w_train[i];
      for (int c = 0; c < truth.field_range.cols(); ++c)
        rows(i, k++) = truth.field_range(i, c);
      rows(i, k++) = truth.field_sigma2(i, 0);
      rows(i, k++) = truth.field_noise(i, 0);
    }
    write_table_csv((fs::path(out_dir) / "truth_train.csv").string(), names, rows);
  }
  if (truth.w_test.size() > 0) {
    LocationSet test = make_locations(truth.test_coords);
    for (auto& id : test.ids) id += ds.n_sites();
    write_sites_csv((fs::path(out_dir) / "test_sites.csv").string(), test);
    Eigen::MatrixXd rows(truth.w_test.size(), 2);
    for (int i = 0; i < truth.w_test.size(); ++i) {
      rows(i, 0) = static_cast<double>(test.ids[i]);
      rows(i, 1) = truth.w_test[i];
    }
    write_table_csv((fs::path(out_dir) / "truth_test.csv").string(),
                    {"id", "w_true"}, rows);
  }
  ChainTrace meta;
  meta.seed = spec.seed;
  write_run_metadata((fs::path(out_dir) / "meta.json").string(), meta, cfg.text());
  std::cout << "simulated " << ds.n_sites() << " sites, " << ds.n_obs()
            << " observations -> " << out_dir << "\n";
  return 0;
}

int cmd_fit(const CommonOpts& o, const std::string& obs, const std::string& sites,
            int chains, const std::string& out_dir) {
  Config cfg = load_config(o);
  Dataset ds = read_dataset_csv(obs, sites);
  ModelConfig mc = cfg.model_config();
  SamplerConfig sc = cfg.sampler_config();
  sc.seed = effective_seed(o, cfg);
  Problem pb = make_problem(ds, mc, sc.seed);
  fs::create_directories(out_dir);

  std::vector<ChainTrace> traces(chains);
  auto run_one = [&](int k) {
    SamplerConfig sck = sc;
    sck.chain_id = k;
    Sampler smp(pb, sck);
    traces[k] = smp.run_chain();
  };
  const int workers = std::max(1, std::min(chains, o.threads > 0 ? o.threads : 1));
  if (workers == 1) {
    for (int k = 0; k < chains; ++k) run_one(k);
  } else {
    std::vector<std::thread> pool;
    for (int w = 0; w < workers; ++w)
      pool.emplace_back([&, w] {
        for (int k = w; k < chains; k += workers) run_one(k);
      });
    for (auto& t : pool) t.join();
  }

  for (int k = 0; k < chains; ++k) {
    const ChainTrace& tr = traces[k];
    // no partial outputs: write to a scratch name, then rename
    auto emit = [&](const std::string& name, auto&& writer) {
      const std::string tmp = (fs::path(out_dir) / (name + ".tmp")).string();
      writer(tmp);
      fs::rename(tmp, (fs::path(out_dir) / name).string());
    };
    const std::string sk = std::to_string(k);
    emit("trace_" + sk + ".csv",
         [&](const std::string& p) { write_trace_csv(p, tr); });
    emit("meta_" + sk + ".json",
         [&](const std::string& p) { write_run_metadata(p, tr, cfg.text()); });
    emit("fields_" + sk + ".csv",
         [&](const std::string& p) { write_fields_csv(p, pb, tr); });
    Eigen::MatrixXd score(1, 3);
    score(0, 0) = k;
    score(0, 1) = dic(tr, pb);
    score(0, 2) = log_score(pb.data.z, pb.data.X * tr.beta_mean +
                                           [&] {
                                             Eigen::VectorXd w(pb.data.n_obs());
                                             for (int x = 0; x < pb.data.n_obs(); ++x)
                                               w[x] = tr.w_mean[pb.data.site[x]];
                                             return w;
                                           }(),
                            tr.tau2_mean);
    emit("score_" + sk + ".csv", [&](const std::string& p) {
      write_table_csv(p, {"chain", "dic", "logdens_observed"}, score);
    });
    std::cout << "chain " << k << ": " << tr.rows.size() << " saved draws, "
              << tr.divergences << " divergences, " << tr.elapsed_sec << " s\n";
  }
  return 0;
}

// reconstruct a plug-in state from a fields file (ids joined against the data)
ChainState state_from_fields(const Problem& pb, const std::string& fields_path,
                             const std::string& trace_path) {
  auto [names, rows] = read_table_csv(fields_path);
  std::map<std::int64_t, int> row_of;
  int id_col = 0;
  for (int i = 0; i < rows.rows(); ++i)
    row_of[static_cast<std::int64_t>(rows(i, id_col))] = i;
  auto col_index = [&](const std::string& nm) {
    for (std::size_t i = 0; i < names.size(); ++i)
      if (names[i] == nm) return static_cast<int>(i);
    return -1;
  };
  ChainTrace tr = read_trace_csv(trace_path);
  ChainState st = init_state(pb);
  const int cw = col_index("w_mean");
  if (cw < 0) throw std::runtime_error("fields file lacks w_mean");
  auto fill_field = [&](FieldComponent& f, const std::string& nm) {
    for (int c = 0; c < f.ncoord; ++c) {
      const int cc =
          col_index(f.ncoord > 1 ? nm + "." + std::to_string(c) : nm);
      if (cc < 0) throw std::runtime_error("fields file lacks " + nm);
      for (int i = 0; i < pb.n(); ++i)
        f.W(i, c) = rows(row_of.at(pb.data.locs.ids[i]), cc);
    }
  };
  for (int i = 0; i < pb.n(); ++i)
    st.w[i] = rows(row_of.at(pb.data.locs.ids[i]), cw);
  fill_field(st.sig, "W_sigma2");
  fill_field(st.rng, "W_range");
  fill_field(st.noi, "W_noise");
  for (int k = 0; k < st.beta.size(); ++k)
    st.beta[k] = tr.series("beta." + std::to_string(k)).mean();
  auto fill_beta = [&](FieldComponent& f, const std::string& nm) {
    for (int j = 0; j < f.beta.rows(); ++j)
      for (int c = 0; c < f.ncoord; ++c)
        f.beta(j, c) = tr.series(nm + ".beta." + std::to_string(j) +
                                 (f.ncoord > 1 ? "." + std::to_string(c) : ""))
                           .mean();
  };
  fill_beta(st.sig, "sigma2");
  fill_beta(st.rng, "range");
  fill_beta(st.noi, "noise");
  refresh_covariance(pb, st);
  refresh_tau(pb, st);
  st.wstar = whiten(st, st.w);
  return st;
}

int cmd_predict(const CommonOpts& o, const std::string& obs,
                const std::string& sites, const std::string& fit_dir, int chain,
                const std::string& newsites, const std::string& out) {
  Config cfg = load_config(o);
  Dataset ds = read_dataset_csv(obs, sites);
  ModelConfig mc = cfg.model_config();
  const std::uint64_t seed = effective_seed(o, cfg);
  Problem pb = make_problem(ds, mc, seed);
  const std::string sk = std::to_string(chain);
  ChainState st =
      state_from_fields(pb, (fs::path(fit_dir) / ("fields_" + sk + ".csv")).string(),
                        (fs::path(fit_dir) / ("trace_" + sk + ".csv")).string());
  SiteTable nt = read_sites_csv(newsites);
  Rng rng(seed, 1000 + chain);
  PredictResult pr = predict_latent(pb, st, nt.locs.coords, nt.X_theta, mc.m, rng);
  Eigen::MatrixXd rows(nt.locs.n(), 4);
  for (int i = 0; i < nt.locs.n(); ++i) {
    rows(i, 0) = static_cast<double>(nt.locs.ids[i]);
    rows(i, 1) = pr.mean[i];
    rows(i, 2) = std::sqrt(pr.var[i]);
    // the intercept is the only covariate the prediction surface carries
    rows(i, 3) = pr.mean[i] + (st.beta.size() ? st.beta[0] : 0.0);
  }
  write_table_csv(out, {"id", "w_mean", "w_sd", "z_mean"}, rows);
  std::cout << "predicted " << nt.locs.n() << " sites -> " << out << "\n";
  return 0;
}

int cmd_evaluate(const CommonOpts& o, const std::string& obs,
                 const std::string& sites, const std::string& fit_dir,
                 const std::string& truth_path, const std::string& test_sites,
                 const std::string& test_truth, const std::string& out) {
  Config cfg = load_config(o);
  Dataset ds = read_dataset_csv(obs, sites);
  ModelConfig mc = cfg.model_config();
  const std::uint64_t seed = effective_seed(o, cfg);
  Problem pb = make_problem(ds, mc, seed);

  std::vector<ChainTrace> traces;
  for (int k = 0;; ++k) {
    const fs::path p = fs::path(fit_dir) / ("trace_" + std::to_string(k) + ".csv");
    if (!fs::exists(p)) break;
    traces.push_back(read_trace_csv(p.string()));
  }
  if (traces.empty()) throw std::runtime_error("no traces found in " + fit_dir);

  // Gelman-Rubin over the high-level columns when several chains exist
  if (traces.size() >= 2) {
    std::vector<std::string> cols;
    for (const auto& nm : traces[0].names)
      if (nm != "lp" && nm != "deviance") cols.push_back(nm);
    Eigen::MatrixXd rows(cols.size(), 1);
    for (std::size_t i = 0; i < cols.size(); ++i)
      rows(i, 0) = gelman_rubin(traces, cols[i]);
    std::vector<std::string> names{"psrf"};
    write_table_csv((fs::path(out).parent_path() / "gelman_rubin.csv").string(),
                    names, rows);
    std::ofstream gn((fs::path(out).parent_path() / "gelman_rubin_names.txt").string());
    for (const auto& c : cols) gn << c << "\n";
  }

  // scorecard per chain
  std::vector<std::string> names{"chain",        "dic",
                                 "mse_smooth",   "mse_pred",
                                 "logdens_observed", "logdens_unobserved"};
  Eigen::MatrixXd rows(traces.size(), names.size());
  for (std::size_t k = 0; k < traces.size(); ++k) {
    const std::string sk = std::to_string(k);
    ChainState st = state_from_fields(
        pb, (fs::path(fit_dir) / ("fields_" + sk + ".csv")).string(),
        (fs::path(fit_dir) / ("trace_" + sk + ".csv")).string());
    // deviance trace mean for the DIC
    ChainTrace& tr = traces[k];
    ChainTrace acc;
    acc.n_accum = static_cast<long>(tr.rows.size());
    acc.w_mean = st.w;
    acc.beta_mean = st.beta;
    acc.tau2_mean = st.tau2;
    acc.dev_mean = tr.series("deviance").mean();
    rows(k, 0) = static_cast<double>(k);
    rows(k, 1) = dic(acc, pb);
    Eigen::VectorXd zfit(pb.data.n_obs());
    Eigen::VectorXd mu = pb.data.X * st.beta;
    for (int x = 0; x < pb.data.n_obs(); ++x)
      zfit[x] = mu[x] + st.w[pb.data.site[x]];
    rows(k, 4) = log_score(pb.data.z, zfit, st.tau2);
    rows(k, 2) = rows(k, 3) = rows(k, 5) = std::nan("");
    if (!truth_path.empty()) {
      auto [tn, trows] = read_table_csv(truth_path);
      std::map<std::int64_t, double> wt;
      for (int i = 0; i < trows.rows(); ++i)
        wt[static_cast<std::int64_t>(trows(i, 0))] = trows(i, 1);
      Eigen::VectorXd truth(pb.n());
      for (int i = 0; i < pb.n(); ++i) truth[i] = wt.at(pb.data.locs.ids[i]);
      rows(k, 2) = mse(st.w, truth);
    }
    if (!test_sites.empty() && !test_truth.empty()) {
      SiteTable nt = read_sites_csv(test_sites);
      Rng rng(seed, 5000 + static_cast<int>(k));
      PredictResult pr =
          predict_latent(pb, st, nt.locs.coords, nt.X_theta, mc.m, rng);
      auto [tn, trows] = read_table_csv(test_truth);
      std::map<std::int64_t, double> wt;
      for (int i = 0; i < trows.rows(); ++i)
        wt[static_cast<std::int64_t>(trows(i, 0))] = trows(i, 1);
      Eigen::VectorXd truth(nt.locs.n());
      for (int i = 0; i < nt.locs.n(); ++i) truth[i] = wt.at(nt.locs.ids[i]);
      rows(k, 3) = mse(pr.mean, truth);
      // predictive log density of the held-out latent truth
      rows(k, 5) = log_score(truth, pr.mean,
                             pr.var.array().max(1e-12).matrix());
    }
  }
  write_table_csv(out, names, rows);
  std::cout << "scorecard -> " << out << "\n";
  return 0;
}

int cmd_klbench(const CommonOpts& o, const std::string& out) {
  Config cfg = load_config(o);
  const int n = cfg.get("kl.n", 500);
  const int reps = cfg.get("kl.replicates", 10);
  const double side = cfg.get("kl.side", 5.0);
  const double hyper_range = cfg.get("kl.hyper_range", 0.5);
  const double mean_log_alpha = cfg.get("kl.mean_log_alpha", std::log(0.1));
  auto parse_list = [&](const std::string& key, std::vector<double> dflt) {
    if (!cfg.has(key)) return dflt;
    std::vector<double> out_list;
    std::stringstream ss(cfg.get(key, std::string()));
    std::string tok;
    while (std::getline(ss, tok, ',')) out_list.push_back(std::stod(tok));
    return out_list;
  };
  std::vector<double> intensities = parse_list("kl.intensities", {0.1, 0.3, 0.5});
  std::vector<double> m_list = parse_list("kl.m_list", {5, 10, 20});
  std::vector<Ordering> orderings{Ordering::coordinate, Ordering::maxmin,
                                  Ordering::random, Ordering::middleout};
  const std::uint64_t seed = effective_seed(o, cfg);

  std::vector<std::string> names{"ordering", "m", "intensity", "replicate", "kl"};
  std::vector<Eigen::VectorXd> outrows;
  std::vector<std::string> labels;
  std::ofstream fout(out);
  if (!fout) throw std::runtime_error("cannot write file: " + out);
  fout << "ordering,m,intensity,replicate,kl\n" << std::setprecision(10);
  for (int rep = 0; rep < reps; ++rep) {
    Rng rng(seed, 100 + rep);
    Eigen::MatrixXd coords(n, 2);
    for (int i = 0; i < n; ++i) {
      coords(i, 0) = rng.uniform(0.0, side);
      coords(i, 1) = rng.uniform(0.0, side);
    }
    // hyper field draw shared across intensities via scaling
    CovParams hyper = stationary_params(n, 2, 1.0, hyper_range * hyper_range,
                                        Kernel::matern32);
    Eigen::MatrixXd H = dense_covariance(coords, hyper);
    Eigen::MatrixXd L = Eigen::LLT<Eigen::MatrixXd>(H).matrixL();
    Eigen::VectorXd xi(n);
    for (int i = 0; i < n; ++i) xi[i] = rng.normal();
    Eigen::VectorXd field = L * xi;
    LocationSet locs = make_locations(coords);
    for (double intensity : intensities) {
      CovParams p = stationary_params(n, 2, 1.0, 1.0, Kernel::exponential);
      p.alpha = (mean_log_alpha + std::sqrt(intensity) * field.array()).exp();
      for (Ordering ord : orderings) {
        std::vector<int> order = order_locations(locs, ord, seed + rep);
        Eigen::MatrixXd pc(n, 2);
        CovParams pp = p;
        for (int i = 0; i < n; ++i) {
          pc.row(i) = coords.row(order[i]);
          pp.alpha[i] = p.alpha[order[i]];
        }
        Eigen::MatrixXd Sigma = dense_covariance(pc, pp);
        for (double md : m_list) {
          NeighborDag dag = build_dag(pc, static_cast<int>(md));
          SparseTriFactor f = build_factor(dag, pc, pp);
          const double kl = kl_nngp(Sigma, f);
          fout << to_string(ord) << "," << static_cast<int>(md) << ","
               << intensity << "," << rep << "," << kl << "\n";
        }
      }
    }
  }
  std::cout << "kl bench -> " << out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Nonstationary nearest-neighbor Gaussian process toolkit"};
  app.require_subcommand(1);
  CommonOpts common;
  app.add_option("--config", common.config_path, "key = value config file");
  auto* seed_opt = app.add_option("--seed", common.seed, "RNG seed");
  app.add_option("--threads", common.threads, "worker threads");

  std::string out_dir = "out", obs, sites, fit_dir = "out", newsites,
              truth_path, test_sites, test_truth, out_file;
  int chains = 1, chain = 0;

  auto* sim = app.add_subcommand("simulate", "generate a synthetic data set");
  sim->add_option("--out", out_dir, "output directory");

  auto* fit = app.add_subcommand("fit", "run MCMC chains");
  fit->add_option("--obs", obs, "observations CSV")->required();
  fit->add_option("--sites", sites, "sites CSV")->required();
  fit->add_option("--chains", chains, "number of chains");
  fit->add_option("--out", out_dir, "output directory");

  auto* pred = app.add_subcommand("predict", "predict the latent field at new sites");
  pred->add_option("--obs", obs)->required();
  pred->add_option("--sites", sites)->required();
  pred->add_option("--fit", fit_dir, "fit output directory");
  pred->add_option("--chain", chain, "chain index to use");
  pred->add_option("--newsites", newsites, "prediction sites CSV")->required();
  pred->add_option("--out", out_file, "output CSV")->required();

  auto* eval = app.add_subcommand("evaluate", "model comparison scorecard");
  eval->add_option("--obs", obs)->required();
  eval->add_option("--sites", sites)->required();
  eval->add_option("--fit", fit_dir, "fit output directory");
  eval->add_option("--truth", truth_path, "training truth CSV (id,w_true)");
  eval->add_option("--test-sites", test_sites, "held-out sites CSV");
  eval->add_option("--test-truth", test_truth, "held-out truth CSV");
  eval->add_option("--out", out_file, "scorecard CSV")->required();

  auto* klb = app.add_subcommand("klbench", "KL divergence experiment grid");
  klb->add_option("--out", out_file, "output CSV")->required();

  CLI11_PARSE(app, argc, argv);
  common.seed_set = seed_opt->count() > 0;
  set_threads(common.threads);

  try {
    if (sim->parsed()) return cmd_simulate(common, out_dir);
    if (fit->parsed()) return cmd_fit(common, obs, sites, chains, out_dir);
    if (pred->parsed())
      return cmd_predict(common, obs, sites, fit_dir, chain, newsites, out_file);
    if (eval->parsed())
      return cmd_evaluate(common, obs, sites, fit_dir, truth_path, test_sites,
                          test_truth, out_file);
    if (klb->parsed()) return cmd_klbench(common, out_file);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitBadInput;
  }
  return 1;
}
