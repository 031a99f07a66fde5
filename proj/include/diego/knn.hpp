#pragma once

#include <Eigen/Cholesky>
#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <memory>
#include <ostream>
#include <queue>
#include <span>
#include <vector>

#include "diego/types.hpp"
#include "diego/util.hpp"

namespace diego {

enum class MetricKind { Euclidean, Mahalanobis };

inline MetricKind metric_from_string(std::string_view s) {
  if (s == "euclidean") return MetricKind::Euclidean;
  if (s == "mahalanobis") return MetricKind::Mahalanobis;
  throw ParseError("unknown metric '" + std::string(s) + "'");
}

inline std::string_view to_string(MetricKind m) {
  return m == MetricKind::Euclidean ? "euclidean" : "mahalanobis";
}

// Distance over brightness-temperature space. Mahalanobis carries the inverse
// covariance; both kinds satisfy the triangle inequality, which the index
// relies on for pruning.
class DistanceMetric {
 public:
  static DistanceMetric euclidean(std::size_t dim) {
    DistanceMetric m;
    m.kind_ = MetricKind::Euclidean;
    m.dim_ = dim;
    return m;
  }

  static DistanceMetric mahalanobis(Eigen::MatrixXd cov_inverse) {
    if (cov_inverse.rows() != cov_inverse.cols())
      throw ValidationError("cov_inverse must be square");
    double asym = (cov_inverse - cov_inverse.transpose()).cwiseAbs().maxCoeff();
    if (asym > 1e-9) throw ValidationError("cov_inverse not symmetric within 1e-9");
    Eigen::LLT<Eigen::MatrixXd> llt(cov_inverse);
    if (llt.info() != Eigen::Success)
      throw ValidationError("cov_inverse is not positive-definite");
    DistanceMetric m;
    m.kind_ = MetricKind::Mahalanobis;
    m.dim_ = static_cast<std::size_t>(cov_inverse.rows());
    m.cov_inverse_ = std::move(cov_inverse);
    return m;
  }

  MetricKind kind() const { return kind_; }
  std::size_t dim() const { return dim_; }

  const Eigen::MatrixXd& cov_inverse() const {
    if (kind_ != MetricKind::Mahalanobis) throw ValidationError("metric has no cov_inverse");
    return cov_inverse_;
  }

  double operator()(const Eigen::VectorXd& a, const Eigen::VectorXd& b) const {
    Eigen::VectorXd d = a - b;
    double sq = kind_ == MetricKind::Euclidean ? d.squaredNorm()
                                               : double(d.transpose() * cov_inverse_ * d);
    return std::sqrt(std::max(0.0, sq));
  }

 private:
  MetricKind kind_ = MetricKind::Euclidean;
  std::size_t dim_ = 0;
  Eigen::MatrixXd cov_inverse_;
};

struct Neighbor {
  std::size_t index = 0;  // record index in the source database
  double distance = 0.0;
  PrecipLabel label = PrecipLabel::None;
  double rate = 0.0;
};

// Ascending by (distance, index); ties broken by record index.
struct NeighborSet {
  std::vector<Neighbor> entries;
  std::size_t k = 0;  // requested neighbor count

  std::size_t size() const { return entries.size(); }
  bool empty() const { return entries.empty(); }
};

namespace detail {

// Worse means lexicographically larger (distance, index).
inline bool neighbor_worse(const Neighbor& a, const Neighbor& b) {
  if (a.distance != b.distance) return a.distance > b.distance;
  return a.index > b.index;
}

// Heap ordering that keeps the worst kept neighbor on top.
inline bool neighbor_better(const Neighbor& a, const Neighbor& b) {
  if (a.distance != b.distance) return a.distance < b.distance;
  return a.index < b.index;
}

}  // namespace detail

// Exact k-nearest-neighbor index: a vantage-point tree whose candidate
// distances come from the same metric evaluation an exhaustive scan would
// use, so results match a brute-force scan set-for-set and in order. Pruning
// bounds carry a small slack so floating-point rounding can only cost visits,
// never candidates.
class NeighborIndex {
 public:
  static NeighborIndex build(std::shared_ptr<const PrecipDatabase> db, MetricKind kind) {
    if (!db || db->empty()) throw ValidationError("cannot index an empty database");
    const std::size_t n = db->size();
    const std::size_t dim = db->n_channels();

    NeighborIndex idx;
    idx.db_ = std::move(db);
    idx.points_.resize(n, dim);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t c = 0; c < dim; ++c) idx.points_(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(c)) = (*idx.db_)[i].tb[c];

    if (kind == MetricKind::Euclidean) {
      idx.metric_ = DistanceMetric::euclidean(dim);
    } else {
      if (n <= dim)
        throw ValidationError("mahalanobis requires more records than channels");
      Eigen::RowVectorXd mean = idx.points_.colwise().mean();
      Eigen::MatrixXd centered = idx.points_.rowwise() - mean;
      Eigen::MatrixXd cov = (centered.transpose() * centered) / static_cast<double>(n - 1);
      double ridge = 1e-6 * cov.trace() / static_cast<double>(dim);
      cov.diagonal().array() += ridge;
      Eigen::LLT<Eigen::MatrixXd> llt(cov);
      if (llt.info() != Eigen::Success)
        throw ValidationError("tb covariance singular after ridge");
      Eigen::MatrixXd inv = llt.solve(Eigen::MatrixXd::Identity(cov.rows(), cov.cols()));
      inv = 0.5 * (inv + inv.transpose().eval());
      idx.metric_ = DistanceMetric::mahalanobis(std::move(inv));
    }

    std::vector<std::int64_t> ids(n);
    for (std::size_t i = 0; i < n; ++i) ids[i] = static_cast<std::int64_t>(i);
    idx.nodes_.reserve(n);
    idx.root_ = idx.build_node(ids, 0, static_cast<std::int64_t>(n));
    return idx;
  }

  const DistanceMetric& metric() const { return metric_; }
  const PrecipDatabase& database() const { return *db_; }
  std::shared_ptr<const PrecipDatabase> database_ptr() const { return db_; }
  std::size_t n_channels() const { return db_->n_channels(); }

  NeighborSet query(const Eigen::VectorXd& tb, std::size_t k) const {
    if (static_cast<std::size_t>(tb.size()) != db_->n_channels())
      throw QueryError("query dimension " + std::to_string(tb.size()) + " != n_channels " +
                       std::to_string(db_->n_channels()));
    if (k < 1) throw QueryError("k must be >= 1");

    std::priority_queue<Neighbor, std::vector<Neighbor>, decltype(&detail::neighbor_better)> heap(
        &detail::neighbor_better);
    search(root_, tb, k, heap);

    NeighborSet set;
    set.k = k;
    set.entries.resize(heap.size());
    for (std::size_t i = heap.size(); i-- > 0;) {
      set.entries[i] = heap.top();
      heap.pop();
    }
    return set;
  }

  NeighborSet query(std::span<const double> tb, std::size_t k) const {
    Eigen::VectorXd v = Eigen::Map<const Eigen::VectorXd>(tb.data(), static_cast<Eigen::Index>(tb.size()));
    return query(v, k);
  }

 private:
  struct Node {
    std::int64_t point = -1;
    double radius = 0.0;
    std::int32_t inner = -1;
    std::int32_t outer = -1;
  };

  std::int32_t build_node(std::vector<std::int64_t>& ids, std::int64_t lo, std::int64_t hi) {
    if (lo >= hi) return -1;
    auto node_id = static_cast<std::int32_t>(nodes_.size());
    nodes_.emplace_back();
    nodes_[node_id].point = ids[lo];
    if (hi - lo == 1) return node_id;

    Eigen::VectorXd pivot = points_.row(ids[lo]).transpose();
    std::vector<std::pair<double, std::int64_t>> keyed;
    keyed.reserve(static_cast<std::size_t>(hi - lo - 1));
    for (std::int64_t i = lo + 1; i < hi; ++i)
      keyed.emplace_back(metric_(pivot, points_.row(ids[i]).transpose()), ids[i]);
    auto mid = keyed.begin() + static_cast<std::ptrdiff_t>((keyed.size() - 1) / 2);
    std::nth_element(keyed.begin(), mid, keyed.end());
    nodes_[node_id].radius = mid->first;
    for (std::size_t i = 0; i < keyed.size(); ++i) ids[lo + 1 + static_cast<std::int64_t>(i)] = keyed[i].second;

    std::int64_t split = lo + 1 + (mid - keyed.begin()) + 1;  // inner: [lo+1, split)
    nodes_[node_id].inner = build_node(ids, lo + 1, split);
    nodes_[node_id].outer = build_node(ids, split, hi);
    return node_id;
  }

  template <typename Heap>
  void consider(const Neighbor& cand, std::size_t k, Heap& heap) const {
    if (heap.size() < k) {
      heap.push(cand);
    } else if (detail::neighbor_worse(heap.top(), cand)) {
      heap.pop();
      heap.push(cand);
    }
  }

  template <typename Heap>
  void search(std::int32_t node_id, const Eigen::VectorXd& q, std::size_t k, Heap& heap) const {
    if (node_id < 0) return;
    const Node& node = nodes_[node_id];
    double d = metric_(q, points_.row(node.point).transpose());
    Neighbor cand{static_cast<std::size_t>(node.point), d, (*db_)[node.point].label,
                  (*db_)[node.point].rate};
    consider(cand, k, heap);

    if (node.inner < 0 && node.outer < 0) return;
    double tau = heap.size() < k ? std::numeric_limits<double>::infinity() : heap.top().distance;
    // Slack makes pruning strictly conservative under rounding.
    double slack = 1e-9 + 1e-12 * (d + node.radius);
    bool visit_inner = d - tau <= node.radius + slack;
    bool visit_outer = d + tau >= node.radius - slack;
    if (d <= node.radius) {
      if (visit_inner) search(node.inner, q, k, heap);
      tau = heap.size() < k ? std::numeric_limits<double>::infinity() : heap.top().distance;
      if (d + tau >= node.radius - slack) search(node.outer, q, k, heap);
    } else {
      if (visit_outer) search(node.outer, q, k, heap);
      tau = heap.size() < k ? std::numeric_limits<double>::infinity() : heap.top().distance;
      if (d - tau <= node.radius + slack) search(node.inner, q, k, heap);
    }
  }

  std::shared_ptr<const PrecipDatabase> db_;
  DistanceMetric metric_ = DistanceMetric::euclidean(0);
  Eigen::MatrixXd points_;  // one row per record
  std::vector<Node> nodes_;
  std::int32_t root_ = -1;
};

// Nested majority vote: precipitating only when strictly more than half the
// neighbors precipitate (even split -> none); phase by majority among the
// precipitating neighbors, ties to the nearest precipitating neighbor.
inline PrecipLabel detect_majority(const NeighborSet& neighbors) {
  if (neighbors.empty()) throw ValidationError("majority vote over empty neighbor set");
  std::size_t precip = 0, rain = 0, snow = 0;
  for (const auto& n : neighbors.entries) {
    if (n.label == PrecipLabel::None) continue;
    ++precip;
    (n.label == PrecipLabel::Rain ? rain : snow)++;
  }
  if (2 * precip <= neighbors.size()) return PrecipLabel::None;
  if (rain > snow) return PrecipLabel::Rain;
  if (snow > rain) return PrecipLabel::Snow;
  for (const auto& n : neighbors.entries)
    if (n.label != PrecipLabel::None) return n.label;
  return PrecipLabel::None;  // unreachable: precip > 0
}

enum class WeightScheme { InverseDistance, Uniform };

// Simplex weights over the same-phase neighbors. Zero-distance matches take
// all the mass, split uniformly among themselves.
inline std::vector<double> estimate_weights(const NeighborSet& neighbors, PrecipLabel phase,
                                            WeightScheme scheme) {
  if (phase != PrecipLabel::Rain && phase != PrecipLabel::Snow)
    throw ValidationError("estimation phase must be rain or snow");
  std::vector<std::size_t> members;
  for (std::size_t i = 0; i < neighbors.size(); ++i)
    if (neighbors.entries[i].label == phase) members.push_back(i);
  if (members.empty()) throw EstimationError("no neighbors with the requested phase");

  std::vector<double> weights(members.size(), 0.0);
  if (scheme == WeightScheme::Uniform) {
    std::fill(weights.begin(), weights.end(), 1.0 / static_cast<double>(members.size()));
    return weights;
  }
  std::size_t zero_count = 0;
  for (std::size_t m : members)
    if (neighbors.entries[m].distance == 0.0) ++zero_count;
  if (zero_count > 0) {
    for (std::size_t i = 0; i < members.size(); ++i)
      if (neighbors.entries[members[i]].distance == 0.0)
        weights[i] = 1.0 / static_cast<double>(zero_count);
    return weights;
  }
  double total = 0.0;
  for (std::size_t i = 0; i < members.size(); ++i) {
    weights[i] = 1.0 / neighbors.entries[members[i]].distance;
    total += weights[i];
  }
  for (double& w : weights) w /= total;
  return weights;
}

inline double estimate_weighted(const NeighborSet& neighbors, PrecipLabel phase, WeightScheme scheme) {
  auto weights = estimate_weights(neighbors, phase, scheme);
  double rate = 0.0;
  std::size_t wi = 0;
  for (const auto& n : neighbors.entries)
    if (n.label == phase) rate += weights[wi++] * n.rate;
  return rate;
}

// Debug dump: query_id,rank,record_index,distance,label,rate
inline void write_neighbors_csv(std::ostream& os, std::size_t query_id, const NeighborSet& set,
                                bool header = false) {
  if (header) os << "query_id,rank,record_index,distance,label,rate\n";
  for (std::size_t rank = 0; rank < set.size(); ++rank) {
    const auto& n = set.entries[rank];
    os << query_id << ',' << rank << ',' << n.index << ',' << format_double(n.distance) << ','
       << to_string(n.label) << ',' << format_double(n.rate) << '\n';
  }
}

}  // namespace diego
