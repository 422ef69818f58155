#include "nsgp/kernels.hpp"

#include <Eigen/Dense>
#include <cmath>
#include <stdexcept>

namespace nsgp {

Kernel kernel_from_string(const std::string& s) {
  if (s == "exponential") return Kernel::exponential;
  if (s == "matern32") return Kernel::matern32;
  throw std::invalid_argument("unknown kernel: " + s);
}

std::string to_string(Kernel k) {
  return k == Kernel::exponential ? "exponential" : "matern32";
}

double isotropic_corr(Kernel k, double t) {
  if (t < 0.0) throw std::invalid_argument("negative distance");
  if (k == Kernel::exponential) return std::exp(-t);
  const double s = 1.7320508075688772935 * t;  // sqrt(3) t
  return (1.0 + s) * std::exp(-s);
}

double nonstat_corr_scalar(int d, double dist, double alpha_s, double alpha_t,
                           Kernel k) {
  if (alpha_s <= 0.0 || alpha_t <= 0.0)
    throw std::invalid_argument("nonpositive range");
  const double mean = 0.5 * (alpha_s + alpha_t);
  const double pref =
      std::pow(std::sqrt(2.0) * std::pow(alpha_s * alpha_t, 0.25) /
                   std::sqrt(alpha_s + alpha_t),
               d);
  return pref * isotropic_corr(k, dist / std::sqrt(mean));
}

double nonstat_corr_matrix(const Eigen::VectorXd& diff, const Eigen::MatrixXd& A_s,
                           const Eigen::MatrixXd& A_t, Kernel k) {
  auto check_spd = [&](const Eigen::MatrixXd& A) {
    if ((A - A.transpose()).cwiseAbs().maxCoeff() > 1e-10)
      throw std::invalid_argument("range matrix not symmetric");
    Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(A);
    if (es.eigenvalues().minCoeff() <= 0.0)
      throw std::invalid_argument("range matrix not positive definite");
  };
  check_spd(A_s);
  check_spd(A_t);
  Eigen::MatrixXd H = 0.5 * (A_s + A_t);
  double q = diff.dot(H.llt().solve(diff));
  // 2^{d/2}|A+A'|^{-1/2} = |H|^{-1/2} since |A+A'| = 2^d |H|
  double pref = std::pow(A_s.determinant() * A_t.determinant(), 0.25) /
                std::sqrt(H.determinant());
  return pref * isotropic_corr(k, std::sqrt(std::max(q, 0.0)));
}

Eigen::MatrixXd spd_log(const Eigen::MatrixXd& A) {
  if ((A - A.transpose()).cwiseAbs().maxCoeff() > 1e-10)
    throw std::invalid_argument("spd_log: matrix not symmetric");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(A);
  if (es.eigenvalues().minCoeff() <= 0.0)
    throw std::invalid_argument("spd_log: nonpositive eigenvalue");
  Eigen::VectorXd l = es.eigenvalues().array().log();
  return es.eigenvectors() * l.asDiagonal() * es.eigenvectors().transpose();
}

Eigen::MatrixXd spd_exp(const Eigen::MatrixXd& L) {
  if ((L - L.transpose()).cwiseAbs().maxCoeff() > 1e-10)
    throw std::invalid_argument("spd_exp: matrix not symmetric");
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(L);
  Eigen::VectorXd l = es.eigenvalues().array().exp();
  return es.eigenvectors() * l.asDiagonal() * es.eigenvectors().transpose();
}

Eigen::MatrixXd spd_sqrt(const Eigen::MatrixXd& A) {
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> es(A);
  if (es.eigenvalues().minCoeff() < 0.0)
    throw std::invalid_argument("spd_sqrt: negative eigenvalue");
  Eigen::VectorXd l = es.eigenvalues().array().sqrt();
  return es.eigenvectors() * l.asDiagonal() * es.eigenvectors().transpose();
}

Eigen::VectorXd vech(const Eigen::MatrixXd& S) {
  const int d = static_cast<int>(S.rows());
  Eigen::VectorXd v(d * (d + 1) / 2);
  int k = 0;
  for (int j = 0; j < d; ++j)
    for (int i = j; i < d; ++i) v[k++] = S(i, j);
  return v;
}

Eigen::MatrixXd unvech(const Eigen::VectorXd& v) {
  // d(d+1)/2 = len  =>  d = (sqrt(8 len + 1) - 1)/2
  const int len = static_cast<int>(v.size());
  const int d = static_cast<int>(std::round((std::sqrt(8.0 * len + 1.0) - 1.0) / 2.0));
  if (d * (d + 1) / 2 != len) throw std::invalid_argument("unvech: bad length");
  Eigen::MatrixXd S(d, d);
  int k = 0;
  for (int j = 0; j < d; ++j)
    for (int i = j; i < d; ++i) {
      S(i, j) = v[k];
      S(j, i) = v[k];
      ++k;
    }
  return S;
}

void sym2_log(double a11, double a21, double a22, double& l11, double& l21,
              double& l22) {
  const double tr2 = 0.5 * (a11 + a22);
  const double dl = 0.5 * (a11 - a22);
  const double r = std::sqrt(dl * dl + a21 * a21);
  const double lam1 = tr2 + r, lam2 = tr2 - r;
  if (lam2 <= 0.0) throw std::invalid_argument("sym2_log: not positive definite");
  if (r < 1e-14 * tr2) {
    const double l = std::log(tr2);
    l11 = l + dl / tr2;
    l22 = l - dl / tr2;
    l21 = a21 / tr2;
    return;
  }
  // log A = m I + s ((A - tr2 I)/r) with m, s from the eigenvalue logs
  const double m = 0.5 * (std::log(lam1) + std::log(lam2));
  const double s = 0.5 * (std::log(lam1) - std::log(lam2));
  l11 = m + s * dl / r;
  l22 = m - s * dl / r;
  l21 = s * a21 / r;
}

void sym2_exp(double a11, double a21, double a22, double& e11, double& e21,
              double& e22) {
  const double tr2 = 0.5 * (a11 + a22);
  const double dl = 0.5 * (a11 - a22);
  const double r = std::sqrt(dl * dl + a21 * a21);
  const double et = std::exp(tr2);
  double ch, shr;  // cosh(r), sinh(r)/r
  if (r < 1e-8) {
    ch = 1.0 + 0.5 * r * r;
    shr = 1.0 + r * r / 6.0;
  } else {
    ch = std::cosh(r);
    shr = std::sinh(r) / r;
  }
  e11 = et * (ch + shr * dl);
  e22 = et * (ch - shr * dl);
  e21 = et * shr * a21;
}

CovParams stationary_params(int n, int dim, double sigma2, double alpha, Kernel k) {
  CovParams p;
  p.kernel = k;
  p.dim = dim;
  p.sigma = Eigen::VectorXd::Constant(n, std::sqrt(sigma2));
  p.alpha = Eigen::VectorXd::Constant(n, alpha);
  return p;
}

double corr_entry(const CovParams& p, const Eigen::RowVectorXd& xa,
                  const Eigen::RowVectorXd& xb, int a, int b) {
  if (!p.elliptic) {
    const double aa = p.alpha[a], ab = p.alpha[b];
    const double mean = 0.5 * (aa + ab);
    const double d2 = (xa - xb).squaredNorm();
    double pref;
    if (p.dim == 2) {
      pref = std::sqrt(aa * ab) / mean;
    } else {
      pref = std::pow(std::sqrt(2.0) * std::pow(aa * ab, 0.25) /
                          std::sqrt(aa + ab),
                      p.dim);
    }
    return pref * isotropic_corr(p.kernel, std::sqrt(d2 / mean));
  }
  // elliptic: closed-form 2x2 Mahalanobis
  const double h11 = 0.5 * (p.A(a, 0) + p.A(b, 0));
  const double h21 = 0.5 * (p.A(a, 1) + p.A(b, 1));
  const double h22 = 0.5 * (p.A(a, 2) + p.A(b, 2));
  const double detH = h11 * h22 - h21 * h21;
  const double dx = xa[0] - xb[0], dy = xa[1] - xb[1];
  const double q = (h22 * dx * dx - 2.0 * h21 * dx * dy + h11 * dy * dy) / detH;
  // 2^{d/2}|A|^{1/4}|A'|^{1/4}|H|^{-1/2} with d = 2; H is already (A+A')/2
  const double pref = std::sqrt(std::sqrt(p.detA[a] * p.detA[b])) / std::sqrt(detH);
  return pref * isotropic_corr(p.kernel, std::sqrt(std::max(q, 0.0)));
}

Eigen::MatrixXd covariance_block(const Eigen::MatrixXd& coords,
                                 const std::vector<int>& sites,
                                 const CovParams& p) {
  const int k = static_cast<int>(sites.size());
  Eigen::MatrixXd S(k, k);
  for (int i = 0; i < k; ++i) {
    S(i, i) = p.sigma[sites[i]] * p.sigma[sites[i]];
    for (int j = 0; j < i; ++j) {
      double c = corr_entry(p, coords.row(sites[i]), coords.row(sites[j]),
                            sites[i], sites[j]);
      S(i, j) = S(j, i) = p.sigma[sites[i]] * p.sigma[sites[j]] * c;
    }
  }
  return S;
}

Eigen::MatrixXd dense_covariance(const Eigen::MatrixXd& coords, const CovParams& p) {
  std::vector<int> all(coords.rows());
  for (int i = 0; i < coords.rows(); ++i) all[i] = i;
  return covariance_block(coords, all, p);
}

}  // namespace nsgp
