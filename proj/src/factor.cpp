#include "nsgp/factor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <stdexcept>

#ifdef _OPENMP
#include <omp.h>
#endif

namespace nsgp {

Eigen::VectorXd SparseTriFactor::apply(const Eigen::VectorXd& x) const {
  Eigen::VectorXd y(n);
  for (int r = 0; r < n; ++r) {
    double acc = diag[r] * x[r];
    for (int t = offset[r]; t < offset[r + 1]; ++t) acc += vals[t] * x[cols[t]];
    y[r] = acc;
  }
  return y;
}

Eigen::VectorXd SparseTriFactor::apply_t(const Eigen::VectorXd& x) const {
  Eigen::VectorXd y = Eigen::VectorXd::Zero(n);
  for (int r = 0; r < n; ++r) {
    y[r] += diag[r] * x[r];
    for (int t = offset[r]; t < offset[r + 1]; ++t) y[cols[t]] += vals[t] * x[r];
  }
  return y;
}

Eigen::VectorXd tri_solve(const SparseTriFactor& f, const Eigen::VectorXd& b,
                          TriSolveMode mode) {
  if (b.size() != f.n) throw std::invalid_argument("tri_solve: length mismatch");
  Eigen::VectorXd x = b;
  if (mode == TriSolveMode::forward) {
    for (int r = 0; r < f.n; ++r) {
      double acc = x[r];
      for (int t = f.offset[r]; t < f.offset[r + 1]; ++t)
        acc -= f.vals[t] * x[f.cols[t]];
      x[r] = acc / f.diag[r];
    }
  } else {
    for (int r = f.n - 1; r >= 0; --r) {
      x[r] /= f.diag[r];
      const double xr = x[r];
      for (int t = f.offset[r]; t < f.offset[r + 1]; ++t)
        x[f.cols[t]] -= f.vals[t] * xr;
    }
  }
  return x;
}

namespace {

// In-place Cholesky of a k x k row-major block; returns false on a
// nonpositive pivot.
bool chol_inplace(double* a, int k) {
  for (int j = 0; j < k; ++j) {
    double d = a[j * k + j];
    for (int t = 0; t < j; ++t) d -= a[j * k + t] * a[j * k + t];
    if (d <= 0.0 || !std::isfinite(d)) return false;
    d = std::sqrt(d);
    a[j * k + j] = d;
    for (int i = j + 1; i < k; ++i) {
      double s = a[i * k + j];
      for (int t = 0; t < j; ++t) s -= a[i * k + t] * a[j * k + t];
      a[i * k + j] = s / d;
    }
  }
  return true;
}

// Solve L L^T x = b with L the lower Cholesky factor stored in a.
void chol_solve(const double* a, int k, const double* b, double* x) {
  for (int i = 0; i < k; ++i) {
    double s = b[i];
    for (int t = 0; t < i; ++t) s -= a[i * k + t] * x[t];
    x[i] = s / a[i * k + i];
  }
  for (int i = k - 1; i >= 0; --i) {
    double s = x[i];
    for (int t = i + 1; t < k; ++t) s -= a[t * k + i] * x[t];
    x[i] = s / a[i * k + i];
  }
}

// Full inverse from the Cholesky factor, written to inv (k x k row-major).
void chol_inverse(const double* a, int k, double* inv, double* scratch) {
  for (int c = 0; c < k; ++c) {
    for (int i = 0; i < k; ++i) scratch[i] = (i == c) ? 1.0 : 0.0;
    chol_solve(a, k, scratch, scratch);
    for (int i = 0; i < k; ++i) inv[i * k + c] = scratch[i];
  }
}

inline double iso_corr_fast(Kernel k, double t) {
  if (k == Kernel::exponential) return std::exp(-t);
  const double s = 1.7320508075688772935 * t;
  return (1.0 + s) * std::exp(-s);
}

// corr_entry with raw coordinate access (no Eigen temporaries)
inline double corr_fast(const CovParams& p, double ax, double ay, double bx,
                        double by, int a, int b) {
  const double dx = ax - bx, dy = ay - by;
  const double d2 = dx * dx + dy * dy;
  if (!p.elliptic) {
    const double aa = p.alpha[a], ab = p.alpha[b];
    const double mean = 0.5 * (aa + ab);
    double pref;
    if (p.dim == 2)
      pref = std::sqrt(aa * ab) / mean;
    else
      pref = std::pow(std::sqrt(2.0) * std::pow(aa * ab, 0.25) / std::sqrt(aa + ab),
                      p.dim);
    return pref * iso_corr_fast(p.kernel, std::sqrt(d2 / mean));
  }
  const double h11 = 0.5 * (p.A(a, 0) + p.A(b, 0));
  const double h21 = 0.5 * (p.A(a, 1) + p.A(b, 1));
  const double h22 = 0.5 * (p.A(a, 2) + p.A(b, 2));
  const double detH = h11 * h22 - h21 * h21;
  const double q = (h22 * dx * dx - 2.0 * h21 * dx * dy + h11 * dy * dy) / detH;
  const double pref = std::sqrt(std::sqrt(p.detA[a] * p.detA[b]) / detH);
  return pref * iso_corr_fast(p.kernel, std::sqrt(q > 0.0 ? q : 0.0));
}

struct RowWorkspace {
  std::vector<double> block;  // (k+1)^2 covariance block, parents then self
  std::vector<double> chol;
  std::vector<double> a;
  std::vector<double> scratch;
  explicit RowWorkspace(int m) {
    const int cap = (m + 1) * (m + 1);
    block.resize(cap);
    chol.resize(cap);
    a.resize(m + 1);
    scratch.resize(m + 1);
  }
};

void build_row(int r, const NeighborDag& dag, const Eigen::MatrixXd& coords,
               const CovParams& p, SparseTriFactor& f, RowWorkspace& ws) {
  const auto& pa = dag.parents[r];
  const int k = static_cast<int>(pa.size());
  const int off = f.offset[r];
  const double sr = p.sigma[r];
  double* B = f.block.data() + f.block_off[r];
  const int w = k + 1;
  B[k * w + k] = sr * sr;
  if (k == 0) {
    f.cond_sd[r] = sr;
    f.diag[r] = 1.0 / sr;
    return;
  }
  // covariance block: S11 over parents, s12 against self, cached on the row
  const bool two_d = p.dim == 2;
  const double rx = coords(r, 0), ry = two_d ? coords(r, 1) : 0.0;
  for (int i = 0; i < k; ++i) {
    const double ix = coords(pa[i], 0), iy = two_d ? coords(pa[i], 1) : 0.0;
    B[i * w + i] = p.sigma[pa[i]] * p.sigma[pa[i]];
    for (int j = 0; j < i; ++j) {
      const double c = corr_fast(p, ix, iy, coords(pa[j], 0),
                                 two_d ? coords(pa[j], 1) : 0.0, pa[i], pa[j]);
      B[i * w + j] = B[j * w + i] = p.sigma[pa[i]] * p.sigma[pa[j]] * c;
    }
    const double c = corr_fast(p, ix, iy, rx, ry, pa[i], r);
    B[i * w + k] = B[k * w + i] = p.sigma[pa[i]] * sr * c;
  }
  double* S = ws.block.data();
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) S[i * k + j] = B[i * w + j];
  double* s12 = ws.scratch.data();
  for (int i = 0; i < k; ++i) s12[i] = B[i * w + k];

  std::memcpy(ws.chol.data(), S, sizeof(double) * k * k);
  if (!chol_inplace(ws.chol.data(), k))
    throw std::runtime_error("build_factor: parent block not positive definite");
  double* a = ws.a.data();
  chol_solve(ws.chol.data(), k, s12, a);
  double condvar = sr * sr;
  for (int i = 0; i < k; ++i) condvar -= a[i] * s12[i];
  if (condvar <= 0.0 || !std::isfinite(condvar))
    throw std::runtime_error("build_factor: nonpositive conditional variance");
  const double csd = std::sqrt(condvar);
  f.cond_sd[r] = csd;
  f.diag[r] = 1.0 / csd;
  for (int i = 0; i < k; ++i) {
    f.vals[off + i] = -a[i] / csd;
    f.weights[off + i] = a[i];
  }
  chol_inverse(ws.chol.data(), k, f.minv.data() + f.minv_offset[r], ws.scratch.data());
}

SparseTriFactor factor_skeleton(const NeighborDag& dag) {
  SparseTriFactor f;
  f.n = dag.n();
  f.m = dag.m;
  if (f.m > 64) throw std::invalid_argument("m > 64 not supported");
  f.offset.resize(f.n + 1);
  f.minv_offset.resize(f.n + 1);
  f.block_off.resize(f.n + 1);
  f.offset[0] = 0;
  f.minv_offset[0] = 0;
  f.block_off[0] = 0;
  for (int r = 0; r < f.n; ++r) {
    const int k = static_cast<int>(dag.parents[r].size());
    f.offset[r + 1] = f.offset[r] + k;
    f.minv_offset[r + 1] = f.minv_offset[r] + k * k;
    f.block_off[r + 1] = f.block_off[r] + (k + 1) * (k + 1);
  }
  f.cols.resize(f.offset[f.n]);
  for (int r = 0; r < f.n; ++r)
    std::copy(dag.parents[r].begin(), dag.parents[r].end(),
              f.cols.begin() + f.offset[r]);
  f.vals.assign(f.offset[f.n], 0.0);
  f.weights.assign(f.offset[f.n], 0.0);
  f.minv.assign(f.minv_offset[f.n], 0.0);
  f.block.assign(f.block_off[f.n], 0.0);
  f.cond_sd.resize(f.n);
  f.diag.resize(f.n);
  return f;
}

}  // namespace

SparseTriFactor build_factor_serial(const NeighborDag& dag,
                                    const Eigen::MatrixXd& coords,
                                    const CovParams& params) {
  SparseTriFactor f = factor_skeleton(dag);
  RowWorkspace ws(f.m);
  for (int r = 0; r < f.n; ++r) build_row(r, dag, coords, params, f, ws);
  return f;
}

SparseTriFactor build_factor(const NeighborDag& dag, const Eigen::MatrixXd& coords,
                             const CovParams& params) {
  SparseTriFactor f = factor_skeleton(dag);
  bool failed = false;
#pragma omp parallel
  {
    RowWorkspace ws(f.m);
#pragma omp for schedule(static)
    for (int r = 0; r < f.n; ++r) {
      if (failed) continue;
      try {
        build_row(r, dag, coords, params, f, ws);
      } catch (...) {
#pragma omp critical
        failed = true;
      }
    }
  }
  if (failed)
    throw std::runtime_error("build_factor: parent block not positive definite");
  return f;
}

SparseTriFactor scale_by_sigma(const SparseTriFactor& f0,
                               const Eigen::VectorXd& sigma) {
  if (sigma.size() != f0.n) throw std::invalid_argument("scale_by_sigma: size");
  if ((sigma.array() <= 0.0).any())
    throw std::invalid_argument("scale_by_sigma: nonpositive sigma");
  SparseTriFactor f = f0;
  for (int r = 0; r < f.n; ++r) {
    f.cond_sd[r] = f0.cond_sd[r] * sigma[r];
    f.diag[r] = f0.diag[r] / sigma[r];
    const int k = f.row_nnz(r);
    const int off = f.offset[r];
    for (int t = 0; t < k; ++t) {
      f.vals[off + t] = f0.vals[off + t] / sigma[f.cols[off + t]];
      f.weights[off + t] = f0.weights[off + t] * sigma[r] / sigma[f.cols[off + t]];
    }
    double* mi = f.minv.data() + f.minv_offset[r];
    const double* m0 = f0.minv.data() + f0.minv_offset[r];
    for (int i = 0; i < k; ++i)
      for (int j = 0; j < k; ++j)
        mi[i * k + j] =
            m0[i * k + j] / (sigma[f.cols[off + i]] * sigma[f.cols[off + j]]);
    const int w = k + 1;
    double* B = f.block.data() + f.block_off[r];
    const double* B0 = f0.block.data() + f0.block_off[r];
    auto site = [&](int t) { return t == k ? r : f.cols[off + t]; };
    for (int i = 0; i < w; ++i)
      for (int j = 0; j < w; ++j)
        B[i * w + j] = B0[i * w + j] * sigma[site(i)] * sigma[site(j)];
  }
  return f;
}

std::pair<double, double> logdet_and_quadform(const SparseTriFactor& f,
                                              const Eigen::VectorXd& w) {
  if (w.size() != f.n) throw std::invalid_argument("logdet_and_quadform: size");
  double qf = 0.0;
  for (int r = 0; r < f.n; ++r) {
    double acc = f.diag[r] * w[r];
    for (int t = f.offset[r]; t < f.offset[r + 1]; ++t)
      acc += f.vals[t] * w[f.cols[t]];
    qf += acc * acc;
  }
  return {f.logdet(), qf};
}

// ---- derivatives ----

namespace {

using RowMajor3 = Eigen::Matrix<double, Eigen::Dynamic, 3, Eigen::RowMajor>;

struct FdParams {
  double h = 1e-6;
  double em_h = 0.0;    // expm1(h)
  double em_h2 = 0.0;   // expm1(h/2)
  Eigen::VectorXd alpha_pert;            // scalar case
  Eigen::MatrixXd A_pert[3];             // elliptic, per vech coordinate
  Eigen::VectorXd detA_pert[3];
  RowMajor3 A_rm;                        // row-major copies for the hot loops
  RowMajor3 dA_rm[3];                    // A_pert - A
  Eigen::VectorXd det_ratio_m1[3];       // detA_pert/detA - 1
};

FdParams make_fd(const CovParams& p, double h) {
  FdParams fd;
  fd.h = h;
  fd.em_h = std::expm1(h);
  fd.em_h2 = std::expm1(0.5 * h);
  const int n = p.n();
  if (!p.elliptic) {
    fd.alpha_pert = p.alpha * std::exp(h);
    return fd;
  }
  // perturb vech(log A) coordinate-wise; closed-form 2x2 log/exp
  fd.A_rm = p.A;
  for (int c = 0; c < 3; ++c) {
    fd.A_pert[c].resize(n, 3);
    fd.dA_rm[c].resize(n, 3);
    fd.detA_pert[c].resize(n);
    fd.det_ratio_m1[c].resize(n);
  }
  const bool have_log = p.logA.rows() == n;
  for (int s = 0; s < n; ++s) {
    double base[3];
    if (have_log) {
      base[0] = p.logA(s, 0);
      base[1] = p.logA(s, 1);
      base[2] = p.logA(s, 2);
    } else {
      sym2_log(p.A(s, 0), p.A(s, 1), p.A(s, 2), base[0], base[1], base[2]);
    }
    for (int c = 0; c < 3; ++c) {
      double l11 = base[0], l21 = base[1], l22 = base[2];
      if (c == 0) l11 += h;
      if (c == 1) l21 += h;
      if (c == 2) l22 += h;
      double e11, e21, e22;
      sym2_exp(l11, l21, l22, e11, e21, e22);
      fd.A_pert[c](s, 0) = e11;
      fd.A_pert[c](s, 1) = e21;
      fd.A_pert[c](s, 2) = e22;
      fd.dA_rm[c](s, 0) = e11 - p.A(s, 0);
      fd.dA_rm[c](s, 1) = e21 - p.A(s, 1);
      fd.dA_rm[c](s, 2) = e22 - p.A(s, 2);
      const double det = e11 * e22 - e21 * e21;
      fd.detA_pert[c][s] = det;
      fd.det_ratio_m1[c][s] = (det - p.detA[s]) / p.detA[s];
    }
  }
  return fd;
}

inline double iso_fast(Kernel k, double t) {
  if (k == Kernel::exponential) return std::exp(-t);
  const double s = 1.7320508075688772935 * t;
  return (1.0 + s) * std::exp(-s);
}

// expm1 by series for the tiny arguments of the difference path
inline double expm1_small(double x) {
  if (std::abs(x) > 1e-3) return std::expm1(x);
  return x * (1.0 + x * (0.5 + x * (1.0 / 6.0 + x / 24.0)));
}

// (K(pert) - K(base)) / h assembled from the cached base entry, the
// prefactor ratio minus one, and delta = t_base - t_pert. Writing the
// difference this way keeps the one-sided quotient accurate to roundoff
// instead of losing half the mantissa to cancellation.
inline double diff_from_ratio(Kernel k, double base, double rm1, double delta,
                              double t0, double inv_h) {
  if (k == Kernel::exponential) {
    const double em = expm1_small(delta);
    return base * (rm1 + (1.0 + rm1) * em) * inv_h;
  }
  const double s3 = 1.7320508075688772935;
  const double s0 = s3 * t0;
  const double rk1 = -s3 * delta / (1.0 + s0);  // (1+s1)/(1+s0) - 1
  const double cm1 = rm1 * (1.0 + rk1) + rk1;
  const double em = expm1_small(s3 * delta);
  return base * (cm1 + (1.0 + cm1) * em) * inv_h;
}

// (Sigma(pert_q) - Sigma(base))/h between sites q (perturbed) and t, using
// the cached base entry; d = 2 fast path with the stable difference form
inline double corr_diff2(const CovParams& p, const FdParams& fd, int coord,
                         double dx, double dy, int q, int t, double base,
                         double inv_h) {
  if (!p.elliptic) {
    const double aq = p.alpha[q], at = p.alpha[t];
    const double mean = 0.5 * (aq + at);
    const double dmean = 0.5 * aq * fd.em_h;
    const double meanp = mean + dmean;
    const double d2 = dx * dx + dy * dy;
    const double t0 = std::sqrt(d2 / mean);
    // t0 - t1 = t0 (1 - sqrt(mean/meanp)) without cancellation
    const double ratio = mean / meanp;
    const double delta = t0 * (1.0 - ratio) / (1.0 + std::sqrt(ratio));
    // pref'/pref - 1 = (mean expm1(h/2) - dmean)/meanp
    const double rm1 = (mean * fd.em_h2 - dmean) / meanp;
    return diff_from_ratio(p.kernel, base, rm1, delta, t0, inv_h);
  }
  const double* Aq = fd.A_rm.data() + 3 * q;
  const double* At = fd.A_rm.data() + 3 * t;
  const double* dAq = fd.dA_rm[coord].data() + 3 * q;
  const double h11 = 0.5 * (Aq[0] + At[0]);
  const double h21 = 0.5 * (Aq[1] + At[1]);
  const double h22 = 0.5 * (Aq[2] + At[2]);
  const double d11 = 0.5 * dAq[0];
  const double d21 = 0.5 * dAq[1];
  const double d22 = 0.5 * dAq[2];
  const double detH = h11 * h22 - h21 * h21;
  const double ddetH =
      h11 * d22 + d11 * h22 + d11 * d22 - 2.0 * h21 * d21 - d21 * d21;
  const double detHp = detH + ddetH;
  const double N = h22 * dx * dx - 2.0 * h21 * dx * dy + h11 * dy * dy;
  const double dN = d22 * dx * dx - 2.0 * d21 * dx * dy + d11 * dy * dy;
  const double inv_dd = 1.0 / (detH * detHp);
  const double q0 = N * detHp * inv_dd;
  // q0 - q1 = (N ddetH - dN detH) / (detH detHp)
  const double qdiff = (N * ddetH - dN * detH) * inv_dd;
  const double t0 = std::sqrt(q0 > 0.0 ? q0 : 0.0);
  const double q1 = q0 - qdiff;
  const double t1 = std::sqrt(q1 > 0.0 ? q1 : 0.0);
  const double delta = t0 + t1 > 0.0 ? qdiff / (t0 + t1) : 0.0;
  // pref ratio: (1+u)^{1/4} (1+v)^{1/2} - 1 by series, u and v are O(h)
  const double u = fd.det_ratio_m1[coord][q];
  const double v = -ddetH * detH * inv_dd;
  const double rm1 = 0.25 * u + 0.5 * v - 0.09375 * u * u - 0.125 * v * v +
                     0.125 * u * v;
  return diff_from_ratio(p.kernel, base, rm1, delta, t0, inv_h);
}

// correlation between site q with coordinate `coord` of its log-range
// perturbed, and unperturbed site t; raw coordinate access
inline double corr_pert(const CovParams& p, const FdParams& fd, int coord,
                        double qx, double qy, double tx, double ty, int q, int t) {
  if (!p.elliptic) {
    const double aq = fd.alpha_pert[q], at = p.alpha[t];
    const double mean = 0.5 * (aq + at);
    const double dx = qx - tx, dy = qy - ty;
    const double d2 = dx * dx + dy * dy;
    double pref;
    if (p.dim == 2)
      pref = std::sqrt(aq * at) / mean;
    else
      pref = std::pow(std::sqrt(2.0) * std::pow(aq * at, 0.25) / std::sqrt(aq + at),
                      p.dim);
    return pref * iso_fast(p.kernel, std::sqrt(d2 / mean));
  }
  const auto& Aq = fd.A_pert[coord];
  const double h11 = 0.5 * (Aq(q, 0) + p.A(t, 0));
  const double h21 = 0.5 * (Aq(q, 1) + p.A(t, 1));
  const double h22 = 0.5 * (Aq(q, 2) + p.A(t, 2));
  const double detH = h11 * h22 - h21 * h21;
  const double dx = qx - tx, dy = qy - ty;
  const double qd = (h22 * dx * dx - 2.0 * h21 * dx * dy + h11 * dy * dy) / detH;
  const double pref =
      std::sqrt(std::sqrt(fd.detA_pert[coord][q] * p.detA[t]) / detH);
  return pref * iso_fast(p.kernel, std::sqrt(qd > 0.0 ? qd : 0.0));
}

struct DerivWorkspace {
  std::vector<double> dS12, cross, u, v, droff;
  explicit DerivWorkspace(int m) {
    dS12.resize(m + 1);
    cross.resize(m + 1);
    u.resize(m + 1);
    v.resize(m + 1);
    droff.resize(m + 1);
  }
};

void derivative_row(int r, int coord, const NeighborDag& dag,
                    const Eigen::MatrixXd& coords, const CovParams& p,
                    const FdParams& fd, const SparseTriFactor& f,
                    FactorDerivativeSet& set, DerivWorkspace& ws) {
  const auto& pa = dag.parents[r];
  const int k = static_cast<int>(pa.size());
  double* D = set.block(coord, r);
  const int w = k + 1;
  if (k == 0) {
    D[0] = 0.0;
    return;
  }
  const int off = f.offset[r];
  const double* a = f.weights.data() + off;
  const double* Minv = f.minv.data() + f.minv_offset[r];
  const double* B = f.block.data() + f.block_off[r];  // base covariance block
  const double Rrr = f.diag[r];
  const double R3 = Rrr * Rrr * Rrr;
  const double inv_h = 1.0 / fd.h;
  const double sr = p.sigma[r];
  const double rx = coords(r, 0);
  const double ry = p.dim == 2 ? coords(r, 1) : 0.0;

  const bool fast2 = p.dim == 2;
  // self case: only s12 moves
  {
    double* dS12 = ws.dS12.data();
    for (int t = 0; t < k; ++t) {
      if (fast2) {
        dS12[t] = corr_diff2(p, fd, coord, rx - coords(pa[t], 0),
                             ry - coords(pa[t], 1), r, pa[t], B[t * w + k], inv_h);
      } else {
        const double pert = p.sigma[pa[t]] * sr *
                            corr_pert(p, fd, coord, rx, ry, coords(pa[t], 0), 0.0,
                                      r, pa[t]);
        dS12[t] = (pert - B[t * w + k]) * inv_h;
      }
    }
    double dot_ads = 0.0;
    for (int t = 0; t < k; ++t) dot_ads += a[t] * dS12[t];
    const double ddiag = R3 * dot_ads;
    double* row = D + k * w;
    for (int t = 0; t < k; ++t) {
      double mv = 0.0;
      for (int s = 0; s < k; ++s) mv += Minv[t * k + s] * dS12[s];
      row[t] = -mv * Rrr - a[t] * ddiag;
    }
    row[k] = ddiag;
  }
  // parent cases: s12 has one moving entry, S11 a moving cross
  for (int q = 0; q < k; ++q) {
    const int pq = pa[q];
    const double qx = coords(pq, 0);
    const double qy = p.dim == 2 ? coords(pq, 1) : 0.0;
    const double d12 =
        fast2 ? corr_diff2(p, fd, coord, qx - rx, qy - ry, pq, r, B[q * w + k],
                           inv_h)
              : (p.sigma[pq] * sr *
                     corr_pert(p, fd, coord, qx, qy, rx, ry, pq, r) -
                 B[q * w + k]) *
                    inv_h;
    double* cross = ws.cross.data();
    for (int t = 0; t < k; ++t) {
      if (t == q) {
        cross[t] = 0.0;
        continue;
      }
      if (fast2) {
        cross[t] = corr_diff2(p, fd, coord, qx - coords(pa[t], 0),
                              qy - coords(pa[t], 1), pq, pa[t], B[q * w + t],
                              inv_h);
      } else {
        const double pert = p.sigma[pq] * p.sigma[pa[t]] *
                            corr_pert(p, fd, coord, qx, qy, coords(pa[t], 0), 0.0,
                                      pq, pa[t]);
        cross[t] = (pert - B[q * w + t]) * inv_h;
      }
    }
    // u = dS11 * a with the cross structure
    double* u = ws.u.data();
    double cdota = 0.0;
    for (int t = 0; t < k; ++t)
      if (t != q) cdota += cross[t] * a[t];
    for (int t = 0; t < k; ++t) u[t] = cross[t] * a[q];
    u[q] = cdota;
    double udota = 0.0;
    for (int t = 0; t < k; ++t) udota += u[t] * a[t];
    const double ddiag = R3 * (d12 * a[q] - 0.5 * udota);
    double* v = ws.v.data();
    for (int t = 0; t < k; ++t) {
      double mv = 0.0;
      for (int s = 0; s < k; ++s) mv += Minv[t * k + s] * u[s];
      v[t] = mv;
    }
    double* row = D + q * w;
    for (int t = 0; t < k; ++t)
      row[t] = -d12 * Minv[t * k + q] * Rrr + v[t] * Rrr - a[t] * ddiag;
    row[k] = ddiag;
  }
}

FactorDerivativeSet derivative_skeleton(const NeighborDag& dag, int ncoord) {
  FactorDerivativeSet set;
  set.n = dag.n();
  set.ncoord = ncoord;
  set.block_off.resize(set.n + 1);
  set.block_off[0] = 0;
  for (int r = 0; r < set.n; ++r) {
    const int k = static_cast<int>(dag.parents[r].size());
    set.block_off[r + 1] = set.block_off[r] + (k + 1) * (k + 1);
  }
  set.store.assign(static_cast<std::size_t>(ncoord) * set.block_off[set.n], 0.0);
  return set;
}

}  // namespace

FactorDerivativeSet factor_derivative_all_serial(const NeighborDag& dag,
                                                 const Eigen::MatrixXd& coords,
                                                 const CovParams& params,
                                                 const SparseTriFactor& f,
                                                 double h) {
  const int ncoord = params.elliptic ? 3 : 1;
  FactorDerivativeSet set = derivative_skeleton(dag, ncoord);
  FdParams fd = make_fd(params, h);
  DerivWorkspace ws(f.m);
  for (int c = 0; c < ncoord; ++c)
    for (int r = 0; r < f.n; ++r)
      derivative_row(r, c, dag, coords, params, fd, f, set, ws);
  return set;
}

void factor_derivative_all_into(const NeighborDag& dag,
                                const Eigen::MatrixXd& coords,
                                const CovParams& params, const SparseTriFactor& f,
                                double h, FactorDerivativeSet& set) {
  const int ncoord = params.elliptic ? 3 : 1;
  if (set.n != dag.n() || set.ncoord != ncoord)
    set = derivative_skeleton(dag, ncoord);
  FdParams fd = make_fd(params, h);
#pragma omp parallel
  {
    DerivWorkspace ws(f.m);
    for (int c = 0; c < ncoord; ++c) {
#pragma omp for schedule(static) nowait
      for (int r = 0; r < f.n; ++r)
        derivative_row(r, c, dag, coords, params, fd, f, set, ws);
    }
  }
}

FactorDerivativeSet factor_derivative_all(const NeighborDag& dag,
                                          const Eigen::MatrixXd& coords,
                                          const CovParams& params,
                                          const SparseTriFactor& f, double h) {
  FactorDerivativeSet set;
  factor_derivative_all_into(dag, coords, params, f, h, set);
  return set;
}

namespace {

// per (row, coord, q): the contraction of the derivative row with v and the
// diagonal derivative, written into flat buffers for a deterministic gather
void contract_row(int r, int coord, const NeighborDag& dag,
                  const Eigen::MatrixXd& coords, const CovParams& p,
                  const FdParams& fd, const SparseTriFactor& f,
                  const Eigen::VectorXd& v, double* sv_out, double* dd_out,
                  DerivWorkspace& ws) {
  const auto& pa = dag.parents[r];
  const int k = static_cast<int>(pa.size());
  if (k == 0) {
    sv_out[0] = 0.0;
    dd_out[0] = 0.0;
    return;
  }
  const int off = f.offset[r];
  const int w = k + 1;
  const double* a = f.weights.data() + off;
  const double* Minv = f.minv.data() + f.minv_offset[r];
  const double* B = f.block.data() + f.block_off[r];
  const double Rrr = f.diag[r];
  const double R3 = Rrr * Rrr * Rrr;
  const double inv_h = 1.0 / fd.h;
  const double rx = coords(r, 0), ry = coords(r, 1);
  const double vr = v[r];
  double* vloc = ws.v.data();
  for (int t = 0; t < k; ++t) vloc[t] = v[pa[t]];
  // Minv v and a.v are shared by every parameter of the row
  double* mv = ws.dS12.data();
  double adotv = 0.0;
  for (int t = 0; t < k; ++t) {
    double acc = 0.0;
    for (int s = 0; s < k; ++s) acc += Minv[t * k + s] * vloc[s];
    mv[t] = acc;
    adotv += a[t] * vloc[t];
  }
  // self case
  {
    double dot_ads = 0.0, dot_mv = 0.0;
    for (int t = 0; t < k; ++t) {
      const double d = corr_diff2(p, fd, coord, rx - coords(pa[t], 0),
                                  ry - coords(pa[t], 1), r, pa[t], B[t * w + k],
                                  inv_h);
      dot_ads += a[t] * d;
      dot_mv += mv[t] * d;
    }
    const double ddiag = R3 * dot_ads;
    sv_out[k] = -Rrr * dot_mv - ddiag * adotv + ddiag * vr;
    dd_out[k] = ddiag;
  }
  // parent cases
  double* cross = ws.cross.data();
  double* uvec = ws.u.data();
  for (int q = 0; q < k; ++q) {
    const int pq = pa[q];
    const double qx = coords(pq, 0), qy = coords(pq, 1);
    const double d12 =
        corr_diff2(p, fd, coord, qx - rx, qy - ry, pq, r, B[q * w + k], inv_h);
    double cdota = 0.0;
    for (int t = 0; t < k; ++t) {
      if (t == q) {
        cross[t] = 0.0;
        continue;
      }
      cross[t] = corr_diff2(p, fd, coord, qx - coords(pa[t], 0),
                            qy - coords(pa[t], 1), pq, pa[t], B[q * w + t], inv_h);
      cdota += cross[t] * a[t];
    }
    const double aq = a[q];
    double udota = 0.0, udotmv = 0.0;
    for (int t = 0; t < k; ++t) {
      uvec[t] = cross[t] * aq;
      if (t == q) uvec[t] = cdota;
      udota += uvec[t] * a[t];
      udotmv += uvec[t] * mv[t];
    }
    const double ddiag = R3 * (d12 * aq - 0.5 * udota);
    sv_out[q] = -d12 * Rrr * mv[q] + Rrr * udotmv - ddiag * adotv + ddiag * vr;
    dd_out[q] = ddiag;
  }
}

}  // namespace

void factor_derivative_contract(const NeighborDag& dag,
                                const Eigen::MatrixXd& coords,
                                const CovParams& params, const SparseTriFactor& f,
                                double h, const Eigen::VectorXd& u,
                                const Eigen::VectorXd& v,
                                Eigen::MatrixXd& sandwich_out,
                                Eigen::MatrixXd& logdet_out) {
  if (params.dim != 2)
    throw std::invalid_argument("factor_derivative_contract: 2-d only");
  const int n = f.n;
  const int ncoord = params.elliptic ? 3 : 1;
  FdParams fd = make_fd(params, h);
  std::vector<int> srow(n + 1);
  srow[0] = 0;
  for (int r = 0; r < n; ++r) srow[r + 1] = srow[r] + f.row_nnz(r) + 1;
  const int stot = srow[n];
  static thread_local std::vector<double> sv, dd;
  sv.resize(static_cast<std::size_t>(ncoord) * stot);
  dd.resize(static_cast<std::size_t>(ncoord) * stot);
#pragma omp parallel
  {
    DerivWorkspace ws(f.m);
    for (int c = 0; c < ncoord; ++c) {
#pragma omp for schedule(static) nowait
      for (int r = 0; r < n; ++r)
        contract_row(r, c, dag, coords, params, fd, f, v,
                     sv.data() + static_cast<std::size_t>(c) * stot + srow[r],
                     dd.data() + static_cast<std::size_t>(c) * stot + srow[r], ws);
    }
  }
  sandwich_out.resize(n, ncoord);
  logdet_out.resize(n, ncoord);
#pragma omp parallel for schedule(static)
  for (int j = 0; j < n; ++j) {
    for (int c = 0; c < ncoord; ++c) {
      const double* svc = sv.data() + static_cast<std::size_t>(c) * stot;
      const double* ddc = dd.data() + static_cast<std::size_t>(c) * stot;
      double acc_sw = u[j] * svc[srow[j] + f.row_nnz(j)];
      double acc_ld = ddc[srow[j] + f.row_nnz(j)] * f.cond_sd[j];
      for (int ch : dag.children[j]) {
        const auto& pa = dag.parents[ch];
        const int q = static_cast<int>(std::lower_bound(pa.begin(), pa.end(), j) -
                                       pa.begin());
        acc_sw += u[ch] * svc[srow[ch] + q];
        acc_ld += ddc[srow[ch] + q] * f.cond_sd[ch];
      }
      sandwich_out(j, c) = acc_sw;
      logdet_out(j, c) = acc_ld;
    }
  }
}

FactorDerivative factor_derivative(const NeighborDag& dag,
                                   const FactorDerivativeSet& set,
                                   const SparseTriFactor& f, int coord, int j) {
  if (j < 0 || j >= set.n) throw std::out_of_range("factor_derivative: site");
  FactorDerivative view;
  view.site = j;
  view.rows.push_back(j);
  view.param_pos.push_back(static_cast<int>(dag.parents[j].size()));
  for (int c : dag.children[j]) {
    view.rows.push_back(c);
    const auto& pa = dag.parents[c];
    const int q =
        static_cast<int>(std::lower_bound(pa.begin(), pa.end(), j) - pa.begin());
    view.param_pos.push_back(q);
  }
  for (std::size_t i = 0; i < view.rows.size(); ++i) {
    const int r = view.rows[i];
    const int w = static_cast<int>(dag.parents[r].size()) + 1;
    view.row_coeffs.push_back(set.block(coord, r) + view.param_pos[i] * w);
  }
  (void)f;
  return view;
}

Eigen::MatrixXd derivative_sandwich(const NeighborDag& dag,
                                    const FactorDerivativeSet& set,
                                    const SparseTriFactor& f,
                                    const Eigen::VectorXd& u,
                                    const Eigen::VectorXd& v) {
  const int n = f.n;
  const int ncoord = set.ncoord;
  Eigen::MatrixXd res = Eigen::MatrixXd::Zero(n, ncoord);
  // pass 1: per row r and parameter slot q, s_rq = sum_c D(q,c) v_col(c)
  std::vector<double> sv(static_cast<std::size_t>(ncoord) * f.offset[n] + n * ncoord);
  // layout: per coord, per row, (k+1) slots
  std::vector<int> srow(n + 1);
  srow[0] = 0;
  for (int r = 0; r < n; ++r) srow[r + 1] = srow[r] + f.row_nnz(r) + 1;
  const int stot = srow[n];
#pragma omp parallel for schedule(static)
  for (int r = 0; r < n; ++r) {
    const int k = f.row_nnz(r);
    const int w = k + 1;
    const int* cols = f.cols.data() + f.offset[r];
    for (int c = 0; c < ncoord; ++c) {
      const double* D = set.block(c, r);
      double* out = sv.data() + static_cast<std::size_t>(c) * stot + srow[r];
      for (int q = 0; q < w; ++q) {
        double acc = D[q * w + k] * v[r];
        for (int t = 0; t < k; ++t) acc += D[q * w + t] * v[cols[t]];
        out[q] = acc;
      }
    }
  }
  // pass 2: gather per site; row j contributes at its self slot, children at
  // the slot where j sits in their parent list
#pragma omp parallel for schedule(static)
  for (int j = 0; j < n; ++j) {
    for (int c = 0; c < ncoord; ++c) {
      const double* base = sv.data() + static_cast<std::size_t>(c) * stot;
      double acc = u[j] * base[srow[j] + f.row_nnz(j)];
      for (int ch : dag.children[j]) {
        const auto& pa = dag.parents[ch];
        const int q = static_cast<int>(std::lower_bound(pa.begin(), pa.end(), j) -
                                       pa.begin());
        acc += u[ch] * base[srow[ch] + q];
      }
      res(j, c) = acc;
    }
  }
  return res;
}

Eigen::MatrixXd logdet_derivative(const NeighborDag& dag,
                                  const FactorDerivativeSet& set,
                                  const SparseTriFactor& f) {
  const int n = f.n;
  const int ncoord = set.ncoord;
  Eigen::MatrixXd res = Eigen::MatrixXd::Zero(n, ncoord);
#pragma omp parallel for schedule(static)
  for (int j = 0; j < n; ++j) {
    for (int c = 0; c < ncoord; ++c) {
      const int kj = f.row_nnz(j);
      const double* D = set.block(c, j);
      double acc = D[kj * (kj + 1) + kj] * f.cond_sd[j];
      for (int ch : dag.children[j]) {
        const auto& pa = dag.parents[ch];
        const int q = static_cast<int>(std::lower_bound(pa.begin(), pa.end(), j) -
                                       pa.begin());
        const int k = f.row_nnz(ch);
        const double* Dc = set.block(c, ch);
        acc += Dc[q * (k + 1) + k] * f.cond_sd[ch];
      }
      res(j, c) = acc;
    }
  }
  return res;
}

}  // namespace nsgp
