#pragma once

#include <Eigen/Core>
#include <cstdint>
#include <string>
#include <vector>

namespace nsgp {

/// Point set over R^d, d in {1,2}. Rows of coords are sites; ids carry the
/// external identifiers from the input file (defaults to 0..n-1).
struct LocationSet {
  Eigen::MatrixXd coords;        // n x d
  std::vector<std::int64_t> ids; // size n

  int n() const { return static_cast<int>(coords.rows()); }
  int dim() const { return static_cast<int>(coords.cols()); }
};

LocationSet make_locations(const Eigen::MatrixXd& coords);

enum class Ordering { coordinate, maxmin, random, middleout };

Ordering ordering_from_string(const std::string& s);
std::string to_string(Ordering o);

/// Returns a permutation p of 0..n-1; position k of the build order holds
/// the original site index p[k]. Deterministic given (locs, scheme, seed).
std::vector<int> order_locations(const LocationSet& locs, Ordering scheme,
                                 std::uint64_t seed = 0);

/// Vecchia DAG over an ordered point set. Parent lists hold *order
/// positions*, strictly smaller than the node's own position, sorted
/// ascending; children lists are the inverse adjacency.
struct NeighborDag {
  std::vector<int> order;                 // permutation: position -> original index
  std::vector<std::vector<int>> parents;  // per position
  std::vector<std::vector<int>> children; // per position, sorted ascending
  int m = 0;

  int n() const { return static_cast<int>(parents.size()); }
  std::size_t edge_count() const;
};

/// Nearest earlier neighbors under Euclidean distance; exact, ties broken
/// by lower order position. coords_ordered must already be permuted.
NeighborDag build_dag(const Eigen::MatrixXd& coords_ordered, int m);

NeighborDag build_dag(const LocationSet& locs, const std::vector<int>& order, int m);

/// m nearest training sites for each new site; no edges among new sites.
/// Returned lists are indices into train, nearest first.
std::vector<std::vector<int>> prediction_parents(const Eigen::MatrixXd& newlocs,
                                                 const Eigen::MatrixXd& train,
                                                 int m);

/// Static kd-tree on a fixed point set; exact k-nearest-neighbor queries,
/// optionally restricted to points with index < limit. Ties on squared
/// distance break toward the lower index.
class KdTree {
public:
  explicit KdTree(const Eigen::MatrixXd& pts);

  /// k nearest to `q` among points with index < limit (limit < 0: all).
  /// Results sorted by (distance, index).
  std::vector<int> knn(const Eigen::RowVectorXd& q, int k, int limit = -1) const;

private:
  struct Node {
    int left = -1, right = -1;
    int begin = 0, end = 0; // leaf range into idx_
    int axis = 0;
    double split = 0.0;
    Eigen::VectorXd lo, hi; // bounding box
  };

  int build(int begin, int end);
  void query(int node, const Eigen::RowVectorXd& q, int k, int limit,
             std::vector<std::pair<double, int>>& heap) const;

  const Eigen::MatrixXd pts_;
  std::vector<int> idx_;
  std::vector<Node> nodes_;
  int root_ = -1;
};

}  // namespace nsgp
