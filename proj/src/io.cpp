#include "nsgp/io.hpp"

#include <Eigen/Dense>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include <json.hpp>

namespace nsgp {

// ---- simulation ----

void SimSpec::validate() const {
  if (n_total < 1 || n_train < 1 || n_obs < n_train)
    throw std::invalid_argument("sim spec: counts must be positive, n_obs >= n_train");
  if (n_train > n_total)
    throw std::invalid_argument("sim spec: n_train must not exceed n_total");
  if (side <= 0.0) throw std::invalid_argument("sim spec: side must be positive");
}

std::pair<Dataset, SimTruth> simulate_dataset(const SimSpec& spec, Rng& rng) {
  spec.validate();
  const int n = spec.n_total;
  const int nt = spec.n_train;
  Eigen::MatrixXd coords(n, 2);
  for (int i = 0; i < n; ++i) {
    coords(i, 0) = rng.uniform(0.0, spec.side);
    coords(i, 1) = rng.uniform(0.0, spec.side);
  }
  NeighborDag dag = build_dag(coords, spec.m);
  // hyper fields over all sites (training + held out)
  CovParams hyper = stationary_params(n, 2, spec.hyper_var,
                                      spec.hyper_range * spec.hyper_range,
                                      spec.hyper_kernel);
  SparseTriFactor G = build_factor(dag, coords, hyper);
  auto draw_field = [&]() {
    Eigen::VectorXd xi(n);
    for (int i = 0; i < n; ++i) xi[i] = rng.normal();
    return tri_solve(G, xi, TriSolveMode::forward);
  };

  const bool ell = spec.nonstat_range && spec.range_kind == RangeKind::elliptic;
  CovParams p;
  p.kernel = spec.kernel;
  p.dim = 2;
  Eigen::VectorXd logs2 = Eigen::VectorXd::Constant(n, spec.mean_log_sigma2);
  if (spec.nonstat_sigma2) logs2 += draw_field();
  p.sigma = (0.5 * logs2.array()).exp();
  Eigen::MatrixXd range_field(n, ell ? 3 : 1);
  if (!ell) {
    range_field.col(0) = Eigen::VectorXd::Constant(n, spec.mean_log_alpha);
    if (spec.nonstat_range) range_field.col(0) += draw_field();
    p.alpha = range_field.col(0).array().exp();
    p.elliptic = false;
  } else {
    // vech(log A) with mean log(alpha) I_2: coordinates 1 and 3
    range_field.col(0) = Eigen::VectorXd::Constant(n, spec.mean_log_alpha) + draw_field();
    range_field.col(1) = draw_field();
    range_field.col(2) = Eigen::VectorXd::Constant(n, spec.mean_log_alpha) + draw_field();
    p.elliptic = true;
    p.logA = range_field;
    p.A.resize(n, 3);
    p.detA.resize(n);
    for (int s = 0; s < n; ++s) {
      double e11, e21, e22;
      sym2_exp(range_field(s, 0), range_field(s, 1), range_field(s, 2), e11, e21, e22);
      p.A(s, 0) = e11;
      p.A(s, 1) = e21;
      p.A(s, 2) = e22;
      p.detA[s] = e11 * e22 - e21 * e21;
    }
  }
  Eigen::VectorXd logt2 = Eigen::VectorXd::Constant(n, spec.mean_log_tau2);
  if (spec.nonstat_noise) logt2 += draw_field();

  // latent field through the NNGP factor of the true covariance
  SparseTriFactor R = build_factor(dag, coords, p);
  Eigen::VectorXd xi(n);
  for (int i = 0; i < n; ++i) xi[i] = rng.normal();
  Eigen::VectorXd w = tri_solve(R, xi, TriSolveMode::forward);

  // observations: one per training site, the rest multinomial uniform
  const int nobs = spec.n_obs;
  std::vector<int> site(nobs);
  for (int i = 0; i < nt; ++i) site[i] = i;
  for (int i = nt; i < nobs; ++i) site[i] = static_cast<int>(rng.index(nt));

  Dataset ds;
  ds.locs = make_locations(coords.topRows(nt));
  ds.z.resize(nobs);
  ds.X = Eigen::MatrixXd::Ones(nobs, 1);
  ds.X_theta = Eigen::MatrixXd::Ones(nt, 1);
  ds.X_tau = Eigen::MatrixXd::Ones(nobs, 1);
  ds.site = site;
  SimTruth truth;
  truth.tau2.resize(nobs);
  for (int x = 0; x < nobs; ++x) {
    const double t2 = std::exp(logt2[site[x]]);
    truth.tau2[x] = t2;
    ds.z[x] = spec.beta0 + w[site[x]] + std::sqrt(t2) * rng.normal();
  }
  ds.rebuild_obs_index();

  truth.w_train = w.head(nt);
  truth.w_test = w.tail(n - nt);
  truth.test_coords = coords.bottomRows(n - nt);
  truth.field_sigma2 = (logs2.head(nt).array() - spec.mean_log_sigma2).matrix();
  truth.field_range = range_field.topRows(nt);
  truth.field_noise = (logt2.head(nt).array() - spec.mean_log_tau2).matrix();
  // true parameter fields restricted to the training sites
  truth.params_train = p;
  truth.params_train.sigma = p.sigma.head(nt);
  if (p.elliptic) {
    truth.params_train.A = p.A.topRows(nt);
    truth.params_train.detA = p.detA.head(nt);
  } else {
    truth.params_train.alpha = p.alpha.head(nt);
  }
  return {std::move(ds), std::move(truth)};
}

// ---- prediction ----

namespace {

struct CondWeights {
  std::vector<std::vector<int>> parents;
  std::vector<Eigen::VectorXd> weights;
  Eigen::VectorXd cond_var;
};

// conditional weights of prediction sites given their m nearest training
// sites under joint_params (train sites first, then prediction sites)
CondWeights conditional_weights(const Eigen::MatrixXd& train,
                                const Eigen::MatrixXd& pred,
                                const CovParams& joint, int m) {
  CondWeights cw;
  const int ntr = static_cast<int>(train.rows());
  const int np = static_cast<int>(pred.rows());
  cw.parents = prediction_parents(pred, train, m);
  cw.weights.resize(np);
  cw.cond_var.resize(np);
  for (int i = 0; i < np; ++i) {
    const auto& pa = cw.parents[i];
    const int k = static_cast<int>(pa.size());
    Eigen::MatrixXd C(k, k);
    Eigen::VectorXd c12(k);
    for (int a = 0; a < k; ++a) {
      C(a, a) = joint.sigma[pa[a]] * joint.sigma[pa[a]];
      for (int b = 0; b < a; ++b) {
        const double cc = corr_entry(joint, train.row(pa[a]), train.row(pa[b]),
                                     pa[a], pa[b]);
        C(a, b) = C(b, a) = joint.sigma[pa[a]] * joint.sigma[pa[b]] * cc;
      }
      c12[a] = joint.sigma[pa[a]] * joint.sigma[ntr + i] *
               corr_entry(joint, train.row(pa[a]), pred.row(i), pa[a], ntr + i);
    }
    Eigen::LLT<Eigen::MatrixXd> llt(C);
    if (llt.info() != Eigen::Success)
      throw std::runtime_error("prediction: parent block not positive definite");
    cw.weights[i] = llt.solve(c12);
    const double v = joint.sigma[ntr + i] * joint.sigma[ntr + i] -
                     cw.weights[i].dot(c12);
    cw.cond_var[i] = std::max(v, 0.0);
  }
  return cw;
}

CovParams concat_params(const CovParams& a, const CovParams& b) {
  CovParams out;
  out.kernel = a.kernel;
  out.dim = a.dim;
  out.elliptic = a.elliptic;
  const int na = a.n(), nb = b.n();
  out.sigma.resize(na + nb);
  out.sigma << a.sigma, b.sigma;
  if (a.elliptic) {
    out.A.resize(na + nb, 3);
    out.A << a.A, b.A;
    out.detA.resize(na + nb);
    out.detA << a.detA, b.detA;
  } else {
    out.alpha.resize(na + nb);
    out.alpha << a.alpha, b.alpha;
  }
  return out;
}

}  // namespace

PredictResult predict_latent(const Problem& pb, const ChainState& st,
                             const Eigen::MatrixXd& newlocs,
                             const Eigen::MatrixXd& X_theta_new, int m, Rng& rng,
                             int ndraws) {
  const int np = static_cast<int>(newlocs.rows());
  const int ntr = pb.n();
  // carry the covariance fields to the new sites by hyper-kernel kriging
  CovParams hyper = stationary_params(ntr, pb.data.locs.dim(), 1.0,
                                      pb.cfg.hyper_range * pb.cfg.hyper_range,
                                      pb.cfg.hyper_kernel);
  CovParams hyper_joint = concat_params(
      hyper, stationary_params(np, pb.data.locs.dim(), 1.0,
                               pb.cfg.hyper_range * pb.cfg.hyper_range,
                               pb.cfg.hyper_kernel));
  CondWeights hw = conditional_weights(pb.coords, newlocs, hyper_joint, m);
  auto krige = [&](const Eigen::MatrixXd& W) {
    Eigen::MatrixXd out(np, W.cols());
    for (int i = 0; i < np; ++i) {
      Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(W.cols());
      for (int a = 0; a < static_cast<int>(hw.parents[i].size()); ++a)
        acc += hw.weights[i][a] * W.row(hw.parents[i][a]);
      out.row(i) = acc;
    }
    return out;
  };
  Eigen::MatrixXd Wsig_new = krige(st.sig.W);
  Eigen::MatrixXd Wrng_new = krige(st.rng.W);

  CovParams pnew;
  pnew.kernel = pb.cfg.kernel;
  pnew.dim = pb.data.locs.dim();
  Eigen::VectorXd logs2 = X_theta_new * st.sig.beta.col(0) + Wsig_new.col(0);
  pnew.sigma = (0.5 * logs2.array()).exp();
  if (st.rng.ncoord == 1) {
    pnew.elliptic = false;
    pnew.alpha =
        (X_theta_new * st.rng.beta.col(0) + Wrng_new.col(0)).array().exp();
  } else {
    pnew.elliptic = true;
    Eigen::MatrixXd logA = X_theta_new * st.rng.beta + Wrng_new;
    pnew.A.resize(np, 3);
    pnew.detA.resize(np);
    for (int s = 0; s < np; ++s) {
      double e11, e21, e22;
      sym2_exp(logA(s, 0), logA(s, 1), logA(s, 2), e11, e21, e22);
      pnew.A(s, 0) = e11;
      pnew.A(s, 1) = e21;
      pnew.A(s, 2) = e22;
      pnew.detA[s] = e11 * e22 - e21 * e21;
    }
  }
  CovParams joint = concat_params(st.params, pnew);
  CondWeights cw = conditional_weights(pb.coords, newlocs, joint, m);
  PredictResult res;
  res.mean.resize(np);
  res.var = cw.cond_var;
  for (int i = 0; i < np; ++i) {
    double acc = 0.0;
    for (int a = 0; a < static_cast<int>(cw.parents[i].size()); ++a)
      acc += cw.weights[i][a] * st.w[cw.parents[i][a]];
    res.mean[i] = acc;
  }
  if (ndraws > 0) {
    res.draws.resize(np, ndraws);
    for (int d = 0; d < ndraws; ++d)
      for (int i = 0; i < np; ++i)
        res.draws(i, d) = res.mean[i] + std::sqrt(res.var[i]) * rng.normal();
  }
  return res;
}

// ---- spatial basis ----

SpatialBasis spatial_basis(const SparseTriFactor& f, int k, int r) {
  const int n = f.n;
  if (k < 1 || k > n || r < 1 || r > k)
    throw std::invalid_argument("spatial_basis: need 1 <= r <= k <= n");
  Eigen::MatrixXd B(n, k);
  Eigen::VectorXd e = Eigen::VectorXd::Zero(n);
  for (int j = 0; j < k; ++j) {
    e[j] = 1.0;
    B.col(j) = tri_solve(f, e, TriSolveMode::forward);
    e[j] = 0.0;
  }
  Eigen::MatrixXd BtB = B.transpose() * B;
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(BtB);
  // eigenvalues ascending; take the top r
  SpatialBasis out;
  out.D.resize(r);
  out.V.resize(k, r);
  for (int j = 0; j < r; ++j) {
    const int src = k - 1 - j;
    out.D[j] = std::sqrt(std::max(es.eigenvalues()[src], 0.0));
    out.V.col(j) = es.eigenvectors().col(src);
  }
  out.U.resize(n, r);
  for (int j = 0; j < r; ++j) out.U.col(j) = B * out.V.col(j) / out.D[j];
  out.anchors.resize(k);
  for (int j = 0; j < k; ++j) out.anchors[j] = j;
  return out;
}

Eigen::MatrixXd basis_at_predictions(const SpatialBasis& basis,
                                     const Eigen::MatrixXd& train,
                                     const Eigen::MatrixXd& pred,
                                     const CovParams& joint_params, int m) {
  CondWeights cw = conditional_weights(train, pred, joint_params, m);
  // the prolonged-factor rows reduce to kriging weights on B, and the
  // truncated tail of B is orthogonal to V, so U_pred = A U exactly
  Eigen::MatrixXd up(pred.rows(), basis.U.cols());
  for (int i = 0; i < pred.rows(); ++i) {
    Eigen::RowVectorXd acc = Eigen::RowVectorXd::Zero(basis.U.cols());
    for (int a = 0; a < static_cast<int>(cw.parents[i].size()); ++a)
      acc += cw.weights[i][a] * basis.U.row(cw.parents[i][a]);
    up.row(i) = acc;
  }
  return up;
}

// ---- CSV ----

namespace {

std::vector<std::string> split_csv_line(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char ch : line) {
    if (ch == ',') {
      out.push_back(cur);
      cur.clear();
    } else if (ch != '\r') {
      cur += ch;
    }
  }
  out.push_back(cur);
  return out;
}

std::ifstream open_or_throw(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open file: " + path);
  return in;
}

}  // namespace

SiteTable read_sites_csv(const std::string& path) {
  std::ifstream in = open_or_throw(path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty sites file: " + path);
  auto header = split_csv_line(line);
  if (header.size() < 2 || header[0] != "id")
    throw std::runtime_error("sites file must start with id,x[,y]: " + path);
  const int d = (header.size() >= 3 && header[2] == "y") ? 2 : 1;
  const int n_extra = static_cast<int>(header.size()) - 1 - d;
  std::vector<std::array<double, 2>> pts;
  std::vector<std::int64_t> ids;
  std::vector<std::vector<double>> extras;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto f = split_csv_line(line);
    if (static_cast<int>(f.size()) != 1 + d + n_extra)
      throw std::runtime_error("sites file: ragged row in " + path);
    ids.push_back(std::stoll(f[0]));
    std::array<double, 2> p{0.0, 0.0};
    for (int k = 0; k < d; ++k) p[k] = std::stod(f[1 + k]);
    pts.push_back(p);
    std::vector<double> ex(n_extra);
    for (int k = 0; k < n_extra; ++k) ex[k] = std::stod(f[1 + d + k]);
    extras.push_back(std::move(ex));
  }
  const int n = static_cast<int>(pts.size());
  SiteTable t;
  t.locs.coords.resize(n, d);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < d; ++k) t.locs.coords(i, k) = pts[i][k];
  t.locs.ids = ids;
  t.X_theta = Eigen::MatrixXd::Ones(n, 1 + n_extra);
  for (int i = 0; i < n; ++i)
    for (int k = 0; k < n_extra; ++k) t.X_theta(i, 1 + k) = extras[i][k];
  for (int k = 0; k < n_extra; ++k) t.covariate_names.push_back(header[1 + d + k]);
  return t;
}

void write_sites_csv(const std::string& path, const LocationSet& locs,
                     const Eigen::MatrixXd& extra,
                     const std::vector<std::string>& extra_names) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write file: " + path);
  out << "id,x";
  if (locs.dim() == 2) out << ",y";
  for (const auto& nm : extra_names) out << "," << nm;
  out << "\n";
  out << std::setprecision(17);
  for (int i = 0; i < locs.n(); ++i) {
    out << locs.ids[i];
    for (int k = 0; k < locs.dim(); ++k) out << "," << locs.coords(i, k);
    for (int k = 0; k < extra.cols(); ++k) out << "," << extra(i, k);
    out << "\n";
  }
}

Dataset read_dataset_csv(const std::string& obs_path, const std::string& sites_path) {
  SiteTable sites = read_sites_csv(sites_path);
  std::map<std::int64_t, int> by_id;
  for (int i = 0; i < sites.locs.n(); ++i) by_id[sites.locs.ids[i]] = i;

  std::ifstream in = open_or_throw(obs_path);
  std::string line;
  if (!std::getline(in, line))
    throw std::runtime_error("empty observations file: " + obs_path);
  auto header = split_csv_line(line);
  if (header.size() < 2 || header[0] != "site_id" || header[1] != "z")
    throw std::runtime_error("observations file must start with site_id,z: " +
                             obs_path);
  const int n_extra = static_cast<int>(header.size()) - 2;
  std::vector<double> zs;
  std::vector<int> site;
  std::vector<std::vector<double>> extras;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto f = split_csv_line(line);
    if (static_cast<int>(f.size()) != 2 + n_extra)
      throw std::runtime_error("observations file: ragged row in " + obs_path);
    auto it = by_id.find(std::stoll(f[0]));
    if (it == by_id.end())
      throw std::runtime_error("observation refers to unknown site id " + f[0]);
    site.push_back(it->second);
    zs.push_back(std::stod(f[1]));
    std::vector<double> ex(n_extra);
    for (int k = 0; k < n_extra; ++k) ex[k] = std::stod(f[2 + k]);
    extras.push_back(std::move(ex));
  }
  Dataset ds;
  const int nobs = static_cast<int>(zs.size());
  ds.z = Eigen::Map<Eigen::VectorXd>(zs.data(), nobs);
  ds.X = Eigen::MatrixXd::Ones(nobs, 1 + n_extra);
  for (int i = 0; i < nobs; ++i)
    for (int k = 0; k < n_extra; ++k) ds.X(i, 1 + k) = extras[i][k];
  ds.site = site;
  ds.locs = sites.locs;
  ds.X_theta = sites.X_theta;
  ds.X_tau = Eigen::MatrixXd::Ones(nobs, 1);
  ds.rebuild_obs_index();
  ds.validate();
  return ds;
}

void write_obs_csv(const std::string& path, const Dataset& ds) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write file: " + path);
  out << "site_id,z";
  for (int k = 1; k < ds.X.cols(); ++k) out << ",x" << k;
  out << "\n";
  out << std::setprecision(17);
  for (int x = 0; x < ds.n_obs(); ++x) {
    out << ds.locs.ids[ds.site[x]] << "," << ds.z[x];
    for (int k = 1; k < ds.X.cols(); ++k) out << "," << ds.X(x, k);
    out << "\n";
  }
}

void write_table_csv(const std::string& path,
                     const std::vector<std::string>& names,
                     const Eigen::MatrixXd& rows) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write file: " + path);
  for (std::size_t i = 0; i < names.size(); ++i)
    out << (i ? "," : "") << names[i];
  out << "\n";
  out << std::setprecision(17);
  for (int r = 0; r < rows.rows(); ++r) {
    for (int c = 0; c < rows.cols(); ++c) out << (c ? "," : "") << rows(r, c);
    out << "\n";
  }
}

std::pair<std::vector<std::string>, Eigen::MatrixXd> read_table_csv(
    const std::string& path) {
  std::ifstream in = open_or_throw(path);
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("empty table: " + path);
  auto names = split_csv_line(line);
  std::vector<std::vector<double>> rows;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    auto f = split_csv_line(line);
    if (f.size() != names.size())
      throw std::runtime_error("table: ragged row in " + path);
    std::vector<double> r(f.size());
    for (std::size_t k = 0; k < f.size(); ++k) r[k] = std::stod(f[k]);
    rows.push_back(std::move(r));
  }
  Eigen::MatrixXd M(rows.size(), names.size());
  for (std::size_t i = 0; i < rows.size(); ++i)
    for (std::size_t k = 0; k < names.size(); ++k) M(i, k) = rows[i][k];
  return {names, M};
}

void write_trace_csv(const std::string& path, const ChainTrace& tr) {
  Eigen::MatrixXd rows(tr.rows.size(), tr.names.size());
  for (std::size_t i = 0; i < tr.rows.size(); ++i) rows.row(i) = tr.rows[i];
  write_table_csv(path, tr.names, rows);
}

ChainTrace read_trace_csv(const std::string& path) {
  auto [names, rows] = read_table_csv(path);
  ChainTrace tr;
  tr.names = names;
  for (int i = 0; i < rows.rows(); ++i) tr.rows.push_back(rows.row(i));
  return tr;
}

void write_run_metadata(const std::string& path, const ChainTrace& tr,
                        const std::string& config_text) {
  nlohmann::json j;
  j["seed"] = tr.seed;
  j["chain_id"] = tr.chain_id;
  j["divergences"] = tr.divergences;
  j["elapsed_sec"] = tr.elapsed_sec;
  j["saved_iterations"] = tr.rows.size();
  j["config_hash"] = std::to_string(std::hash<std::string>{}(config_text));
  nlohmann::json acc;
  for (const auto& [k, v] : tr.accept_rate) acc[k] = v;
  j["accept_rate"] = acc;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write file: " + path);
  out << j.dump(2) << "\n";
}

// ---- config ----

Config Config::parse_string(const std::string& text) {
  Config c;
  c.text_ = text;
  std::istringstream in(text);
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    auto hash = line.find('#');
    if (hash != std::string::npos) line = line.substr(0, hash);
    auto eq = line.find('=');
    if (eq == std::string::npos) {
      bool blank = line.find_first_not_of(" \t\r") == std::string::npos;
      if (!blank)
        throw std::runtime_error("config line " + std::to_string(lineno) +
                                 ": expected key = value");
      continue;
    }
    auto trim = [](std::string s) {
      const auto a = s.find_first_not_of(" \t\r");
      const auto b = s.find_last_not_of(" \t\r");
      return a == std::string::npos ? std::string() : s.substr(a, b - a + 1);
    };
    std::string key = trim(line.substr(0, eq));
    std::string val = trim(line.substr(eq + 1));
    if (key.empty()) throw std::runtime_error("config: empty key");
    c.kv_[key] = val;
  }
  const int schema = c.get("schema", 1);
  if (schema != 1)
    throw std::runtime_error("unsupported config schema version " +
                             std::to_string(schema));
  return c;
}

Config Config::parse_file(const std::string& path) {
  std::ifstream in = open_or_throw(path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_string(ss.str());
}

bool Config::has(const std::string& key) const { return kv_.count(key) > 0; }

std::string Config::get(const std::string& key, const std::string& dflt) const {
  auto it = kv_.find(key);
  return it == kv_.end() ? dflt : it->second;
}

double Config::get(const std::string& key, double dflt) const {
  auto it = kv_.find(key);
  return it == kv_.end() ? dflt : std::stod(it->second);
}

int Config::get(const std::string& key, int dflt) const {
  auto it = kv_.find(key);
  return it == kv_.end() ? dflt : std::stoi(it->second);
}

bool Config::get(const std::string& key, bool dflt) const {
  auto it = kv_.find(key);
  if (it == kv_.end()) return dflt;
  if (it->second == "true" || it->second == "1") return true;
  if (it->second == "false" || it->second == "0") return false;
  throw std::runtime_error("config: boolean expected for " + key);
}

ModelConfig Config::model_config() const {
  ModelConfig mc;
  mc.nonstat_sigma2 = get("model.nonstat_sigma2", false);
  mc.nonstat_range = get("model.nonstat_range", false);
  mc.nonstat_noise = get("model.nonstat_noise", false);
  mc.range_kind = get("model.range_kind", std::string("scalar")) == "elliptic"
                      ? RangeKind::elliptic
                      : RangeKind::scalar;
  mc.kernel = kernel_from_string(get("model.kernel", std::string("exponential")));
  mc.m = get("model.m", 10);
  mc.ordering = ordering_from_string(get("model.ordering", std::string("maxmin")));
  mc.hyper_kernel =
      kernel_from_string(get("model.hyper_kernel", std::string("matern32")));
  mc.hyper_range = get("model.hyper_range", -1.0);
  mc.gamma_lo = get("model.gamma_lo", -8.0);
  mc.gamma_hi = get("model.gamma_hi", 3.0);
  mc.fd_step = get("model.fd_step", 1e-6);
  return mc;
}

SamplerConfig Config::sampler_config() const {
  SamplerConfig sc;
  sc.iterations = get("sampler.iterations", 4000);
  sc.warmup = get("sampler.warmup", 1000);
  sc.thin = get("sampler.thin", 1);
  sc.hmc.eps0 = get("sampler.eps0", 0.1);
  sc.hmc.l_field = get("sampler.l_field", 5);
  sc.hmc.l_scalar = get("sampler.l_scalar", 3);
  sc.hmc.target_accept = get("sampler.target_accept", 0.8);
  sc.hmc.hmc_scalar_blocks = get("sampler.hmc_scalar_blocks", true);
  sc.seed = static_cast<std::uint64_t>(get("seed", 1));
  return sc;
}

SimSpec Config::sim_spec() const {
  SimSpec s;
  s.side = get("sim.side", 5.0);
  s.n_total = get("sim.n_total", 12000);
  s.n_train = get("sim.n_train", 10000);
  s.n_obs = get("sim.n_obs", 20000);
  s.nonstat_sigma2 = get("sim.nonstat_sigma2", false);
  s.nonstat_range = get("sim.nonstat_range", false);
  s.nonstat_noise = get("sim.nonstat_noise", false);
  s.range_kind = get("sim.range_kind", std::string("scalar")) == "elliptic"
                     ? RangeKind::elliptic
                     : RangeKind::scalar;
  s.kernel = kernel_from_string(get("sim.kernel", std::string("exponential")));
  s.hyper_kernel =
      kernel_from_string(get("sim.hyper_kernel", std::string("matern32")));
  s.hyper_range = get("sim.hyper_range", 0.5);
  s.hyper_var = get("sim.hyper_var", 0.5);
  s.mean_log_sigma2 = get("sim.mean_log_sigma2", 0.0);
  s.mean_log_alpha = get("sim.mean_log_alpha", std::log(0.1));
  s.mean_log_tau2 = get("sim.mean_log_tau2", std::log(0.1));
  s.beta0 = get("sim.beta0", 1.0);
  s.m = get("sim.m", 10);
  s.seed = static_cast<std::uint64_t>(get("seed", 1));
  return s;
}

}  // namespace nsgp
