#pragma once

#include <Eigen/Core>
#include <vector>

#include "nsgp/geometry.hpp"
#include "nsgp/kernels.hpp"

namespace nsgp {

/// Sparse lower-triangular right factor R of the NNGP precision,
/// R^T R = precision. Row i carries 1/cond_sd[i] on the diagonal and
/// -weights/cond_sd[i] on the parent columns. Row caches (parent-block
/// inverse and kriging weights) are kept for derivative reuse.
struct SparseTriFactor {
  int n = 0;
  int m = 0;
  std::vector<int> offset;   // n+1 prefix into cols/vals
  std::vector<int> cols;     // parent order positions, ascending per row
  std::vector<double> vals;  // off-diagonal entries
  Eigen::VectorXd cond_sd;   // conditional sd per row
  Eigen::VectorXd diag;      // 1/cond_sd

  // per-row caches reused by the derivative assembly: kriging weights
  // a = S11^{-1} S12 (aligned with cols), the full S11^{-1}, and the raw
  // covariance block ((k+1)^2 row-major, parents then self)
  std::vector<double> weights;
  std::vector<double> minv;
  std::vector<int> minv_offset;
  std::vector<double> block;
  std::vector<int> block_off;

  int row_nnz(int i) const { return offset[i + 1] - offset[i]; }

  double logdet() const { return diag.array().log().sum(); }

  /// y = R x
  Eigen::VectorXd apply(const Eigen::VectorXd& x) const;
  /// y = R^T x
  Eigen::VectorXd apply_t(const Eigen::VectorXd& x) const;
};

enum class TriSolveMode { forward, transpose };

/// Exact sparse triangular substitution: forward solves R x = b,
/// transpose solves R^T x = b.
Eigen::VectorXd tri_solve(const SparseTriFactor& f, const Eigen::VectorXd& b,
                          TriSolveMode mode);

/// Build the factor from the covariance implied by (params, kernel) on the
/// ordered locations. Throws on a numerically degenerate parent block.
/// Row-parallel; bit-identical to build_factor_serial.
SparseTriFactor build_factor(const NeighborDag& dag, const Eigen::MatrixXd& coords,
                             const CovParams& params);
SparseTriFactor build_factor_serial(const NeighborDag& dag,
                                    const Eigen::MatrixXd& coords,
                                    const CovParams& params);

/// Column rescale: factor of the covariance from the factor of the
/// correlation, R = R0 diag(sigma)^{-1}.
SparseTriFactor scale_by_sigma(const SparseTriFactor& factor0,
                               const Eigen::VectorXd& sigma);

/// (log|R|, ||R w||^2): the two ingredients of the NNGP log density.
std::pair<double, double> logdet_and_quadform(const SparseTriFactor& f,
                                              const Eigen::VectorXd& w);

/// dR/dW_alpha for every site, stored row-wise: row r holds the
/// (k+1) x (k+1) matrix D with D(q, c) = d R(r, col_c) / d W(site_q),
/// site_q running over parents then self, col_c over parents then diagonal.
/// For elliptic ranges there is one such collection per vech coordinate.
struct FactorDerivativeSet {
  int n = 0;
  int ncoord = 1;                 // 1 scalar, 3 elliptic
  std::vector<double> store;      // per coord, per row, (k+1)*(k+1) row-major
  std::vector<int> block_off;     // n+1 prefix of (k+1)^2 block sizes

  double* block(int coord, int r) {
    return store.data() + static_cast<std::size_t>(coord) * block_off[n] + block_off[r];
  }
  const double* block(int coord, int r) const {
    return store.data() + static_cast<std::size_t>(coord) * block_off[n] + block_off[r];
  }
};

/// Rows affected by site j and the coefficients of dR/dW(s_j) on each; a
/// view into a FactorDerivativeSet.
struct FactorDerivative {
  int site = 0;
  std::vector<int> rows;                    // {j} then ch(j)
  std::vector<const double*> row_coeffs;    // ncoord * (k+1) doubles each: derivative of
                                            // the row's (parents, diag) entries
  std::vector<int> param_pos;               // position of j in each row's (parents, self)
};

/// Assemble dR/dW_alpha for all sites by one-sided finite differences of
/// the per-row covariance blocks (step h on the log-range scale), reusing
/// the factor's cached parent-block inverses. Requires factor caches built
/// against the same (dag, coords, params).
FactorDerivativeSet factor_derivative_all(const NeighborDag& dag,
                                          const Eigen::MatrixXd& coords,
                                          const CovParams& params,
                                          const SparseTriFactor& f, double h);
FactorDerivativeSet factor_derivative_all_serial(const NeighborDag& dag,
                                                 const Eigen::MatrixXd& coords,
                                                 const CovParams& params,
                                                 const SparseTriFactor& f, double h);
/// Same, reusing the storage of a previously assembled set.
void factor_derivative_all_into(const NeighborDag& dag,
                                const Eigen::MatrixXd& coords,
                                const CovParams& params, const SparseTriFactor& f,
                                double h, FactorDerivativeSet& set);

/// View of the rows affected by a single site.
FactorDerivative factor_derivative(const NeighborDag& dag,
                                   const FactorDerivativeSet& set,
                                   const SparseTriFactor& f, int coord, int j);

/// For each site j: u^T (dR/dW(s_j)) v, one output per coordinate field.
/// Deterministic per-site gather; row-parallel precomputation.
Eigen::MatrixXd derivative_sandwich(const NeighborDag& dag,
                                    const FactorDerivativeSet& set,
                                    const SparseTriFactor& f,
                                    const Eigen::VectorXd& u,
                                    const Eigen::VectorXd& v);

/// For each site j: sum over rows r in {j} u ch(j) of dR_rr/dW(s_j) / R_rr.
Eigen::MatrixXd logdet_derivative(const NeighborDag& dag,
                                  const FactorDerivativeSet& set,
                                  const SparseTriFactor& f);

/// Fused assembly and contraction: u^T (dR/dW(s_j)) v and the log-det
/// derivative for every site, without materializing the coefficients.
/// Identical values to the two-pass route; one pass over the rows.
void factor_derivative_contract(const NeighborDag& dag,
                                const Eigen::MatrixXd& coords,
                                const CovParams& params, const SparseTriFactor& f,
                                double h, const Eigen::VectorXd& u,
                                const Eigen::VectorXd& v,
                                Eigen::MatrixXd& sandwich_out,
                                Eigen::MatrixXd& logdet_out);

}  // namespace nsgp
