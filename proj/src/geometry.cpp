#include "nsgp/geometry.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <queue>
#include <stdexcept>

#include "nsgp/rng.hpp"

namespace nsgp {

LocationSet make_locations(const Eigen::MatrixXd& coords) {
  if (coords.rows() < 1) throw std::invalid_argument("empty location set");
  if (coords.cols() < 1 || coords.cols() > 2)
    throw std::invalid_argument("locations must have 1 or 2 coordinates");
  LocationSet ls;
  ls.coords = coords;
  ls.ids.resize(coords.rows());
  std::iota(ls.ids.begin(), ls.ids.end(), 0);
  return ls;
}

Ordering ordering_from_string(const std::string& s) {
  if (s == "coordinate") return Ordering::coordinate;
  if (s == "maxmin" || s == "max-min") return Ordering::maxmin;
  if (s == "random") return Ordering::random;
  if (s == "middleout" || s == "middle-out") return Ordering::middleout;
  throw std::invalid_argument("unknown ordering: " + s);
}

std::string to_string(Ordering o) {
  switch (o) {
    case Ordering::coordinate: return "coordinate";
    case Ordering::maxmin: return "maxmin";
    case Ordering::random: return "random";
    case Ordering::middleout: return "middleout";
  }
  return "?";
}

namespace {

std::vector<int> maxmin_order(const Eigen::MatrixXd& c) {
  const int n = static_cast<int>(c.rows());
  Eigen::RowVectorXd centroid = c.colwise().mean();
  int first = 0;
  double best = std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i) {
    double d = (c.row(i) - centroid).squaredNorm();
    if (d < best) { best = d; first = i; }
  }
  std::vector<int> order;
  order.reserve(n);
  order.push_back(first);
  // running min squared distance to the selected set
  std::vector<double> mind(n);
  for (int i = 0; i < n; ++i) mind[i] = (c.row(i) - c.row(first)).squaredNorm();
  std::vector<char> taken(n, 0);
  taken[first] = 1;
  for (int k = 1; k < n; ++k) {
    int pick = -1;
    double bestd = -1.0;
    for (int i = 0; i < n; ++i) {
      if (taken[i]) continue;
      if (mind[i] > bestd) { bestd = mind[i]; pick = i; }
    }
    taken[pick] = 1;
    order.push_back(pick);
    for (int i = 0; i < n; ++i) {
      if (taken[i]) continue;
      double d = (c.row(i) - c.row(pick)).squaredNorm();
      if (d < mind[i]) mind[i] = d;
    }
  }
  return order;
}

}  // namespace

std::vector<int> order_locations(const LocationSet& locs, Ordering scheme,
                                 std::uint64_t seed) {
  const int n = locs.n();
  if (n < 1) throw std::invalid_argument("empty location set");
  const Eigen::MatrixXd& c = locs.coords;
  std::vector<int> order(n);
  std::iota(order.begin(), order.end(), 0);
  switch (scheme) {
    case Ordering::coordinate:
      std::sort(order.begin(), order.end(), [&](int a, int b) {
        for (int k = 0; k < c.cols(); ++k) {
          if (c(a, k) != c(b, k)) return c(a, k) < c(b, k);
        }
        return a < b;
      });
      break;
    case Ordering::random: {
      Rng rng(seed, 0x6f7264u);
      for (int i = n - 1; i > 0; --i)
        std::swap(order[i], order[rng.index(i + 1)]);
      break;
    }
    case Ordering::middleout: {
      Eigen::RowVectorXd centroid = c.colwise().mean();
      std::vector<double> d(n);
      for (int i = 0; i < n; ++i) d[i] = (c.row(i) - centroid).squaredNorm();
      std::sort(order.begin(), order.end(), [&](int a, int b) {
        if (d[a] != d[b]) return d[a] < d[b];
        return a < b;
      });
      break;
    }
    case Ordering::maxmin:
      order = maxmin_order(c);
      break;
  }
  return order;
}

std::size_t NeighborDag::edge_count() const {
  std::size_t s = 0;
  for (const auto& p : parents) s += p.size();
  return s;
}

// ---- kd-tree ----

KdTree::KdTree(const Eigen::MatrixXd& pts) : pts_(pts) {
  idx_.resize(pts.rows());
  std::iota(idx_.begin(), idx_.end(), 0);
  nodes_.reserve(2 * pts.rows() / 8 + 4);
  root_ = build(0, static_cast<int>(pts.rows()));
}

int KdTree::build(int begin, int end) {
  Node nd;
  nd.lo = Eigen::VectorXd::Constant(pts_.cols(), std::numeric_limits<double>::infinity());
  nd.hi = Eigen::VectorXd::Constant(pts_.cols(), -std::numeric_limits<double>::infinity());
  for (int i = begin; i < end; ++i) {
    for (int k = 0; k < pts_.cols(); ++k) {
      double v = pts_(idx_[i], k);
      nd.lo[k] = std::min(nd.lo[k], v);
      nd.hi[k] = std::max(nd.hi[k], v);
    }
  }
  constexpr int kLeaf = 16;
  if (end - begin <= kLeaf) {
    nd.begin = begin;
    nd.end = end;
    nodes_.push_back(nd);
    return static_cast<int>(nodes_.size()) - 1;
  }
  int axis = 0;
  (nd.hi - nd.lo).maxCoeff(&axis);
  int mid = (begin + end) / 2;
  std::nth_element(idx_.begin() + begin, idx_.begin() + mid, idx_.begin() + end,
                   [&](int a, int b) { return pts_(a, axis) < pts_(b, axis); });
  nd.axis = axis;
  nd.split = pts_(idx_[mid], axis);
  int me = static_cast<int>(nodes_.size());
  nodes_.push_back(nd);
  int l = build(begin, mid);
  int r = build(mid, end);
  nodes_[me].left = l;
  nodes_[me].right = r;
  nodes_[me].begin = begin;
  nodes_[me].end = end;
  return me;
}

namespace {
inline bool worse(const std::pair<double, int>& a, const std::pair<double, int>& b) {
  // max-heap on (dist, idx); larger distance first, larger index breaks ties
  if (a.first != b.first) return a.first < b.first;
  return a.second < b.second;
}
}  // namespace

void KdTree::query(int node, const Eigen::RowVectorXd& q, int k, int limit,
                   std::vector<std::pair<double, int>>& heap) const {
  const Node& nd = nodes_[node];
  double boxd = 0.0;
  for (int a = 0; a < q.size(); ++a) {
    double v = q[a];
    double d = v < nd.lo[a] ? nd.lo[a] - v : (v > nd.hi[a] ? v - nd.hi[a] : 0.0);
    boxd += d * d;
  }
  // ties on distance may still displace a higher index, so only prune on >
  if (static_cast<int>(heap.size()) == k && boxd > heap.front().first) return;
  if (nd.left < 0) {
    for (int i = nd.begin; i < nd.end; ++i) {
      int p = idx_[i];
      if (limit >= 0 && p >= limit) continue;
      double d = (pts_.row(p) - q).squaredNorm();
      std::pair<double, int> cand{d, p};
      if (static_cast<int>(heap.size()) < k) {
        heap.push_back(cand);
        std::push_heap(heap.begin(), heap.end(), worse);
      } else if (worse(cand, heap.front())) {
        std::pop_heap(heap.begin(), heap.end(), worse);
        heap.back() = cand;
        std::push_heap(heap.begin(), heap.end(), worse);
      }
    }
    return;
  }
  // visit nearer side first
  if (q[nd.axis] < nd.split) {
    query(nd.left, q, k, limit, heap);
    query(nd.right, q, k, limit, heap);
  } else {
    query(nd.right, q, k, limit, heap);
    query(nd.left, q, k, limit, heap);
  }
}

std::vector<int> KdTree::knn(const Eigen::RowVectorXd& q, int k, int limit) const {
  std::vector<std::pair<double, int>> heap;
  heap.reserve(k + 1);
  if (k > 0 && root_ >= 0) query(root_, q, k, limit, heap);
  std::sort(heap.begin(), heap.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first < b.first;
    return a.second < b.second;
  });
  std::vector<int> out(heap.size());
  for (std::size_t i = 0; i < heap.size(); ++i) out[i] = heap[i].second;
  return out;
}

NeighborDag build_dag(const Eigen::MatrixXd& coords_ordered, int m) {
  if (m < 1) throw std::invalid_argument("m must be >= 1");
  const int n = static_cast<int>(coords_ordered.rows());
  NeighborDag dag;
  dag.m = m;
  dag.order.resize(n);
  std::iota(dag.order.begin(), dag.order.end(), 0);
  dag.parents.assign(n, {});
  dag.children.assign(n, {});
  KdTree tree(coords_ordered);
  for (int i = 1; i < n; ++i) {
    int k = std::min(m, i);
    auto pa = tree.knn(coords_ordered.row(i), k, i);
    std::sort(pa.begin(), pa.end());
    dag.parents[i] = std::move(pa);
  }
  for (int i = 0; i < n; ++i)
    for (int p : dag.parents[i]) dag.children[p].push_back(i);
  return dag;
}

NeighborDag build_dag(const LocationSet& locs, const std::vector<int>& order, int m) {
  const int n = locs.n();
  Eigen::MatrixXd c(n, locs.dim());
  for (int i = 0; i < n; ++i) c.row(i) = locs.coords.row(order[i]);
  NeighborDag dag = build_dag(c, m);
  dag.order = order;
  return dag;
}

std::vector<std::vector<int>> prediction_parents(const Eigen::MatrixXd& newlocs,
                                                 const Eigen::MatrixXd& train,
                                                 int m) {
  if (train.rows() < 1) throw std::invalid_argument("empty training set");
  KdTree tree(train);
  int k = std::min<int>(m, static_cast<int>(train.rows()));
  std::vector<std::vector<int>> out(newlocs.rows());
  for (int i = 0; i < newlocs.rows(); ++i) {
    auto pa = tree.knn(newlocs.row(i), k);
    out[i] = std::move(pa);
  }
  return out;
}

}  // namespace nsgp
