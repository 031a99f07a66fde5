#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "diego/types.hpp"
#include "diego/util.hpp"

namespace diego {

// ---------------------------------------------------------------------------
// Detection skill

struct ConfusionCounts {
  std::size_t tp = 0, fp = 0, tn = 0, fn = 0;

  std::size_t total() const { return tp + fp + tn + fn; }

  std::optional<double> tpr() const {
    if (tp + fn == 0) return std::nullopt;
    return static_cast<double>(tp) / static_cast<double>(tp + fn);
  }

  std::optional<double> fpr() const {
    if (fp + tn == 0) return std::nullopt;
    return static_cast<double>(fp) / static_cast<double>(fp + tn);
  }
};

// One-vs-rest counts for a single target phase.
inline ConfusionCounts confusion(std::span<const PrecipLabel> pred,
                                 std::span<const PrecipLabel> truth, PrecipLabel phase) {
  if (pred.size() != truth.size()) throw ValidationError("confusion length mismatch");
  if (phase == PrecipLabel::None) throw ValidationError("confusion phase must be rain or snow");
  ConfusionCounts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    bool t = truth[i] == phase;
    bool p = pred[i] == phase;
    if (t && p)
      ++c.tp;
    else if (t && !p)
      ++c.fn;
    else if (!t && p)
      ++c.fp;
    else
      ++c.tn;
  }
  return c;
}

// ---------------------------------------------------------------------------
// Estimation skill

struct EstimationMetrics {
  double bias = 0.0;
  double ubrmse = 0.0;
  double ubmae = 0.0;
  std::size_t n_pairs = 0;  // pairs retained after any trim
};

// Optional trim drops pairs whose truth exceeds the truth sample's
// trim_percentile quantile (linear interpolation of order statistics);
// retained pairs have truth <= quantile, inclusive.
inline EstimationMetrics estimation_metrics(std::span<const double> pred,
                                            std::span<const double> truth,
                                            std::optional<double> trim_percentile = {}) {
  if (pred.size() != truth.size()) throw ValidationError("estimation metric length mismatch");
  if (pred.empty()) throw ValidationError("estimation metrics need at least one pair");

  std::vector<double> dp, dt;
  dp.reserve(pred.size());
  dt.reserve(truth.size());
  if (trim_percentile) {
    if (!(*trim_percentile > 0.0 && *trim_percentile <= 100.0))
      throw ValidationError("trim percentile must lie in (0, 100]");
    std::vector<double> sorted(truth.begin(), truth.end());
    std::sort(sorted.begin(), sorted.end());
    double cutoff = quantile_sorted(sorted, *trim_percentile / 100.0);
    for (std::size_t i = 0; i < truth.size(); ++i)
      if (truth[i] <= cutoff) {
        dp.push_back(pred[i]);
        dt.push_back(truth[i]);
      }
  } else {
    dp.assign(pred.begin(), pred.end());
    dt.assign(truth.begin(), truth.end());
  }
  if (dp.empty()) throw ValidationError("no pairs retained after trim");

  const double n = static_cast<double>(dp.size());
  KahanSum err_sum;
  for (std::size_t i = 0; i < dp.size(); ++i) err_sum.add(dp[i] - dt[i]);
  double bias = err_sum.value() / n;

  KahanSum sq, ab;
  for (std::size_t i = 0; i < dp.size(); ++i) {
    double centered = (dp[i] - dt[i]) - bias;
    sq.add(centered * centered);
    ab.add(std::abs(centered));
  }
  return {bias, std::sqrt(sq.value() / n), ab.value() / n, dp.size()};
}

// ---------------------------------------------------------------------------
// Gridding

struct GridSample {
  double lat = 0.0;
  double lon = 0.0;
  PrecipLabel label = PrecipLabel::None;
  double rate = 0.0;
};

// Sparse equal-angle grid over [-90, 90] x [-180, 180). Cells are half-open
// with the lower edge inclusive; the north edge (lat = 90) closes into the
// last row. Storage is per populated cell, with per-phase ledgers.
class Grid {
 public:
  struct PhaseCell {
    std::size_t occurrence = 0;  // samples with rate > threshold
    KahanSum rate_sum;
    std::size_t n = 0;
  };

  struct Cell {
    std::array<PhaseCell, kNumLabels> phases;
  };

  Grid(double resolution, double occurrence_threshold)
      : resolution_(resolution), threshold_(occurrence_threshold) {
    if (!(resolution > 0.0)) throw ValidationError("grid resolution must be positive");
    double rows = 180.0 / resolution;
    n_rows_ = static_cast<std::size_t>(std::llround(rows));
    if (n_rows_ == 0 || std::abs(rows - static_cast<double>(n_rows_)) > 1e-9)
      throw ValidationError("grid resolution must divide 180 evenly");
    n_cols_ = 2 * n_rows_;
    if (!(occurrence_threshold >= 0.0))
      throw ValidationError("occurrence threshold must be >= 0");
  }

  double resolution() const { return resolution_; }
  double occurrence_threshold() const { return threshold_; }
  std::size_t n_rows() const { return n_rows_; }
  std::size_t n_cols() const { return n_cols_; }

  std::size_t row_of(double lat) const {
    if (!(lat >= -90.0 && lat <= 90.0)) throw ValidationError("latitude out of range");
    auto row = static_cast<std::size_t>((lat + 90.0) / resolution_);
    return std::min(row, n_rows_ - 1);
  }

  std::size_t col_of(double lon) const {
    if (!(lon >= -180.0 && lon <= 180.0)) throw ValidationError("longitude out of range");
    auto col = static_cast<std::size_t>((lon + 180.0) / resolution_);
    return std::min(col, n_cols_ - 1);
  }

  double lat_center(std::size_t row) const {
    return -90.0 + (static_cast<double>(row) + 0.5) * resolution_;
  }

  double lon_center(std::size_t col) const {
    return -180.0 + (static_cast<double>(col) + 0.5) * resolution_;
  }

  void add(double lat, double lon, PrecipLabel label, double rate) {
    if (!(rate >= 0.0)) throw ValidationError("rate must be >= 0");
    auto key = static_cast<std::uint64_t>(row_of(lat)) * n_cols_ + col_of(lon);
    auto& pc = cells_[key].phases[static_cast<std::size_t>(label)];
    if (rate > threshold_) ++pc.occurrence;
    pc.rate_sum.add(rate);
    ++pc.n;
  }

  void merge(const Grid& other) {
    if (other.resolution_ != resolution_ || other.threshold_ != threshold_)
      throw ValidationError("cannot merge grids with different layouts");
    for (const auto& [key, cell] : other.cells_) {
      auto& mine = cells_[key];
      for (std::size_t p = 0; p < kNumLabels; ++p) {
        mine.phases[p].occurrence += cell.phases[p].occurrence;
        mine.phases[p].rate_sum.merge(cell.phases[p].rate_sum);
        mine.phases[p].n += cell.phases[p].n;
      }
    }
  }

  const std::unordered_map<std::uint64_t, Cell>& cells() const { return cells_; }

  std::size_t key_row(std::uint64_t key) const { return key / n_cols_; }
  std::size_t key_col(std::uint64_t key) const { return key % n_cols_; }

  double total_rate_sum() const {
    KahanSum s;
    for (const auto& [key, cell] : cells_)
      for (const auto& pc : cell.phases) s.merge(pc.rate_sum);
    return s.value();
  }

  std::size_t total_samples() const {
    std::size_t n = 0;
    for (const auto& [key, cell] : cells_)
      for (const auto& pc : cell.phases) n += pc.n;
    return n;
  }

 private:
  double resolution_;
  double threshold_;
  std::size_t n_rows_ = 0;
  std::size_t n_cols_ = 0;
  std::unordered_map<std::uint64_t, Cell> cells_;
};

inline Grid accumulate_grid(std::span<const GridSample> samples, double resolution,
                            double occurrence_threshold) {
  Grid grid(resolution, occurrence_threshold);
  for (const auto& s : samples) grid.add(s.lat, s.lon, s.label, s.rate);
  return grid;
}

// Per-latitude-row mean of per-cell mean rates, restricted to one phase or
// (nullopt) pooled over all phases. Rows with no populated cells are absent.
inline std::vector<std::optional<double>> zonal_mean(const Grid& grid,
                                                     std::optional<PrecipLabel> phase = {}) {
  struct RowAcc {
    KahanSum sum;
    std::size_t cells = 0;
  };
  std::vector<RowAcc> rows(grid.n_rows());
  for (const auto& [key, cell] : grid.cells()) {
    KahanSum cell_sum;
    std::size_t cell_n = 0;
    if (phase) {
      const auto& pc = cell.phases[static_cast<std::size_t>(*phase)];
      cell_sum.merge(pc.rate_sum);
      cell_n = pc.n;
    } else {
      for (const auto& pc : cell.phases) {
        cell_sum.merge(pc.rate_sum);
        cell_n += pc.n;
      }
    }
    if (cell_n == 0) continue;
    auto& row = rows[grid.key_row(key)];
    row.sum.add(cell_sum.value() / static_cast<double>(cell_n));
    ++row.cells;
  }
  std::vector<std::optional<double>> means(grid.n_rows());
  for (std::size_t r = 0; r < rows.size(); ++r)
    if (rows[r].cells > 0) means[r] = rows[r].sum.value() / static_cast<double>(rows[r].cells);
  return means;
}

inline void write_grid_csv(std::ostream& os, const Grid& grid) {
  os << "lat_index,lon_index,lat_center,lon_center,phase,occurrence,sum_rate,n_samples\n";
  std::vector<std::uint64_t> keys;
  keys.reserve(grid.cells().size());
  for (const auto& [key, cell] : grid.cells()) keys.push_back(key);
  std::sort(keys.begin(), keys.end());
  for (auto key : keys) {
    const auto& cell = grid.cells().at(key);
    std::size_t row = grid.key_row(key), col = grid.key_col(key);
    for (std::size_t p = 0; p < kNumLabels; ++p) {
      const auto& pc = cell.phases[p];
      if (pc.n == 0) continue;
      os << row << ',' << col << ',' << format_double(grid.lat_center(row)) << ','
         << format_double(grid.lon_center(col)) << ',' << to_string(static_cast<PrecipLabel>(p))
         << ',' << pc.occurrence << ',' << format_double(pc.rate_sum.value()) << ',' << pc.n
         << '\n';
    }
  }
}

inline void write_zonal_csv(std::ostream& os, const Grid& grid) {
  os << "lat_index,lat_center,phase,mean_rate\n";
  auto emit = [&](std::string_view name, const std::vector<std::optional<double>>& means) {
    for (std::size_t r = 0; r < means.size(); ++r)
      if (means[r])
        os << r << ',' << format_double(grid.lat_center(r)) << ',' << name << ','
           << format_double(*means[r]) << '\n';
  };
  emit("all", zonal_mean(grid));
  emit("snow", zonal_mean(grid, PrecipLabel::Snow));
  emit("rain", zonal_mean(grid, PrecipLabel::Rain));
}

// ---------------------------------------------------------------------------
// Histograms

struct Histogram {
  std::vector<double> mass;  // normalized over in-range samples
  std::vector<std::size_t> counts;
  std::size_t below = 0;
  std::size_t above = 0;
  std::size_t in_range = 0;
};

inline Histogram histogram(std::span<const double> values, std::span<const double> edges) {
  if (edges.size() < 2) throw ValidationError("histogram needs at least two edges");
  for (std::size_t i = 1; i < edges.size(); ++i)
    if (!(edges[i] > edges[i - 1])) throw ValidationError("histogram edges must strictly increase");
  Histogram h;
  h.counts.assign(edges.size() - 1, 0);
  for (double v : values) {
    if (v < edges.front()) {
      ++h.below;
    } else if (v >= edges.back()) {
      ++h.above;
    } else {
      auto it = std::upper_bound(edges.begin(), edges.end(), v);
      ++h.counts[static_cast<std::size_t>(it - edges.begin()) - 1];
      ++h.in_range;
    }
  }
  h.mass.assign(h.counts.size(), 0.0);
  if (h.in_range > 0)
    for (std::size_t i = 0; i < h.counts.size(); ++i)
      h.mass[i] = static_cast<double>(h.counts[i]) / static_cast<double>(h.in_range);
  return h;
}

// ---------------------------------------------------------------------------
// Flat metric reports

// Ordered key/value report rendered as `key=value` text or a flat JSON
// object; absent values (undefined denominators) render as "absent"/null.
class MetricsReport {
 public:
  void add(std::string key, double value) { entries_.emplace_back(std::move(key), value); }
  void add(std::string key, std::optional<double> value) {
    entries_.emplace_back(std::move(key), value);
  }
  void add_count(std::string key, std::size_t value) {
    entries_.emplace_back(std::move(key), static_cast<double>(value));
  }

  const std::vector<std::pair<std::string, std::optional<double>>>& entries() const {
    return entries_;
  }

  void write_text(std::ostream& os) const {
    for (const auto& [key, value] : entries_)
      os << key << '=' << (value ? format_double(*value) : "absent") << '\n';
  }

  void write_json(std::ostream& os) const {
    os << "{\n";
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      os << "  \"" << entries_[i].first << "\": "
         << (entries_[i].second ? format_double(*entries_[i].second) : "null");
      os << (i + 1 < entries_.size() ? ",\n" : "\n");
    }
    os << "}\n";
  }

 private:
  std::vector<std::pair<std::string, std::optional<double>>> entries_;
};

}  // namespace diego
