#pragma once

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "diego/database_io.hpp"
#include "diego/evaluation.hpp"
#include "diego/knn.hpp"
#include "diego/network.hpp"
#include "diego/types.hpp"

namespace diego {

// ---------------------------------------------------------------------------
// CDF matching

// Monotone quantile-mapping transform between two rate distributions,
// represented by paired quantile knots at levels j/(n_knots+1).
struct CdfMap {
  std::vector<double> source_knots;
  std::vector<double> reference_knots;

  static CdfMap fit(std::span<const double> retrieved, std::span<const double> reference,
                    std::size_t n_knots = 99) {
    if (n_knots < 1) throw ValidationError("cdf map needs at least one knot");
    auto positive_sorted = [](std::span<const double> v, const char* what) {
      std::vector<double> out;
      for (double x : v)
        if (x > 0.0) out.push_back(x);
      if (out.empty())
        throw EstimationError(std::string("no positive rates in ") + what + " sample");
      std::sort(out.begin(), out.end());
      return out;
    };
    auto src = positive_sorted(retrieved, "retrieved");
    auto ref = positive_sorted(reference, "reference");

    CdfMap map;
    map.source_knots.reserve(n_knots);
    map.reference_knots.reserve(n_knots);
    for (std::size_t j = 1; j <= n_knots; ++j) {
      double level = static_cast<double>(j) / static_cast<double>(n_knots + 1);
      map.source_knots.push_back(quantile_sorted(src, level));
      map.reference_knots.push_back(quantile_sorted(ref, level));
    }
    return map;
  }

  void validate() const {
    if (source_knots.empty() || source_knots.size() != reference_knots.size())
      throw ValidationError("cdf map knot lists must be non-empty and equal length");
    for (std::size_t i = 1; i < source_knots.size(); ++i)
      if (source_knots[i] < source_knots[i - 1] || reference_knots[i] < reference_knots[i - 1])
        throw ValidationError("cdf map knots must be non-decreasing");
  }

  // Piecewise-linear between knots; linear extension beyond the knot range
  // using the adjacent segment's slope (slope 1 when degenerate); clamped
  // at 0 so mapped rates stay non-negative.
  double apply(double x) const {
    const auto& s = source_knots;
    const auto& r = reference_knots;
    double y;
    if (x <= s.front()) {
      y = r.front() + (x - s.front()) * edge_slope(true);
    } else if (x >= s.back()) {
      y = r.back() + (x - s.back()) * edge_slope(false);
    } else {
      auto it = std::upper_bound(s.begin(), s.end(), x);
      std::size_t i1 = static_cast<std::size_t>(it - s.begin());
      std::size_t i0 = i1 - 1;
      double t = (x - s[i0]) / (s[i1] - s[i0]);
      y = r[i0] + t * (r[i1] - r[i0]);
    }
    return std::max(0.0, y);
  }

 private:
  double edge_slope(bool lower) const {
    const auto& s = source_knots;
    const auto& r = reference_knots;
    if (lower) {
      for (std::size_t i = 1; i < s.size(); ++i)
        if (s[i] > s[0]) return (r[i] - r[0]) / (s[i] - s[0]);
    } else {
      std::size_t last = s.size() - 1;
      for (std::size_t i = last; i-- > 0;)
        if (s[i] < s[last]) return (r[last] - r[i]) / (s[last] - s[i]);
    }
    return 1.0;
  }
};

inline void write_cdf_csv(std::ostream& os, const CdfMap& map) {
  os << "source,reference\n";
  for (std::size_t i = 0; i < map.source_knots.size(); ++i)
    os << format_double(map.source_knots[i]) << ',' << format_double(map.reference_knots[i])
       << '\n';
}

inline CdfMap load_cdf_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw ParseError("empty cdf map file");
  if (trim(line) != "source,reference") throw ParseError("bad cdf map header");
  CdfMap map;
  while (std::getline(is, line)) {
    if (trim(line).empty()) continue;
    auto fields = split_csv_line(line);
    if (fields.size() != 2) throw ParseError("cdf map rows need 2 fields");
    map.source_knots.push_back(parse_double(fields[0], "source knot"));
    map.reference_knots.push_back(parse_double(fields[1], "reference knot"));
  }
  map.validate();
  return map;
}

// ---------------------------------------------------------------------------
// Zonal debias

// Per-latitude-band multiplicative correction. Bands tile [-90, 90]; the
// north edge closes into the last band.
struct ZonalScale {
  double band_width = 5.0;
  std::vector<double> factors;

  void validate() const {
    if (!(band_width > 0.0)) throw ValidationError("band width must be positive");
    double bands = 180.0 / band_width;
    auto n = static_cast<std::size_t>(std::llround(bands));
    if (n == 0 || std::abs(bands - static_cast<double>(n)) > 1e-9)
      throw ValidationError("band width must divide 180 evenly");
    if (factors.size() != n) throw ValidationError("factor count does not match band count");
    for (double f : factors)
      if (!(f >= 0.0) || !std::isfinite(f)) throw ValidationError("factors must be finite and >= 0");
  }

  std::size_t band_of(double lat) const {
    if (!(lat >= -90.0 && lat <= 90.0)) throw ValidationError("latitude out of range");
    auto band = static_cast<std::size_t>((lat + 90.0) / band_width);
    return std::min(band, factors.size() - 1);
  }

  double factor_at(double lat) const { return factors[band_of(lat)]; }

  double band_lo(std::size_t band) const { return -90.0 + static_cast<double>(band) * band_width; }
  double band_hi(std::size_t band) const { return band_lo(band) + band_width; }
};

// factor = active zonal mean / passive zonal mean per band; a band whose
// passive mean is zero (or empty) keeps factor 1. Band width must be a
// multiple of the grid resolution so rows nest inside bands.
inline ZonalScale fit_zonal_scale(const Grid& passive, const Grid& active,
                                  double band_width = 5.0) {
  if (passive.resolution() != active.resolution() || passive.n_rows() != active.n_rows())
    throw ValidationError("passive and active grids must share resolution and extent");
  double ratio = band_width / passive.resolution();
  if (std::abs(ratio - std::round(ratio)) > 1e-9)
    throw ValidationError("band width must be a multiple of the grid resolution");

  ZonalScale scale;
  scale.band_width = band_width;
  scale.factors.assign(static_cast<std::size_t>(std::llround(180.0 / band_width)), 1.0);
  scale.validate();

  auto band_means = [&](const Grid& g) {
    std::vector<KahanSum> sums(scale.factors.size());
    std::vector<std::size_t> counts(scale.factors.size(), 0);
    auto row_means = zonal_mean(g);
    std::vector<std::optional<double>> out(scale.factors.size());
    for (std::size_t r = 0; r < row_means.size(); ++r) {
      if (!row_means[r]) continue;
      auto band = scale.band_of(g.lat_center(r));
      sums[band].add(*row_means[r]);
      ++counts[band];
    }
    for (std::size_t b = 0; b < out.size(); ++b)
      if (counts[b] > 0) out[b] = sums[b].value() / static_cast<double>(counts[b]);
    return out;
  };

  auto p_means = band_means(passive);
  auto a_means = band_means(active);
  for (std::size_t b = 0; b < scale.factors.size(); ++b) {
    if (!p_means[b] || *p_means[b] == 0.0) continue;
    scale.factors[b] = a_means[b] ? *a_means[b] / *p_means[b] : 0.0;
  }
  return scale;
}

inline std::vector<GridSample> apply_zonal_scale(const ZonalScale& scale,
                                                 std::span<const GridSample> samples) {
  scale.validate();
  std::vector<GridSample> out(samples.begin(), samples.end());
  for (auto& s : out) s.rate *= scale.factor_at(s.lat);
  return out;
}

inline void write_zonal_scale_csv(std::ostream& os, const ZonalScale& scale) {
  os << "lat_lo,lat_hi,factor\n";
  for (std::size_t b = 0; b < scale.factors.size(); ++b)
    os << format_double(scale.band_lo(b)) << ',' << format_double(scale.band_hi(b)) << ','
       << format_double(scale.factors[b]) << '\n';
}

// ---------------------------------------------------------------------------
// Feature assembly

// Detection inputs: tb channels in stored (frequency-ascending) order, then
// lwp, iwp, wvp, cape, t2m. Standardization happens inside the model.
inline Eigen::VectorXd assemble_detection_features(const CoincidenceRecord& record) {
  Eigen::VectorXd v(static_cast<Eigen::Index>(record.tb.size() + 5));
  for (std::size_t c = 0; c < record.tb.size(); ++c) v[static_cast<Eigen::Index>(c)] = record.tb[c];
  auto base = static_cast<Eigen::Index>(record.tb.size());
  v[base + 0] = record.ancillary.lwp;
  v[base + 1] = record.ancillary.iwp;
  v[base + 2] = record.ancillary.wvp;
  v[base + 3] = record.ancillary.cape;
  v[base + 4] = record.ancillary.t2m;
  return v;
}

// Estimation inputs: tb channels, then the k nearest-neighbor rates in
// ascending-distance order. exclude_self removes the query's own record when
// it is a member of the indexed database (training-time leakage guard).
inline Eigen::VectorXd assemble_estimation_features(const CoincidenceRecord& record,
                                                    const NeighborIndex& index, std::size_t k,
                                                    std::optional<std::size_t> exclude_self = {}) {
  if (record.tb.size() != index.n_channels())
    throw QueryError("record channel count does not match index");
  if (k < 1) throw QueryError("k must be >= 1");
  std::size_t want = k + (exclude_self ? 1 : 0);
  if (index.database().size() < want)
    throw ValidationError("index too small for k=" + std::to_string(k));
  NeighborSet set = index.query(std::span<const double>(record.tb), want);
  if (exclude_self) {
    auto it = std::find_if(set.entries.begin(), set.entries.end(),
                           [&](const Neighbor& n) { return n.index == *exclude_self; });
    if (it != set.entries.end())
      set.entries.erase(it);
    else
      set.entries.pop_back();
  }

  Eigen::VectorXd v(static_cast<Eigen::Index>(record.tb.size() + k));
  for (std::size_t c = 0; c < record.tb.size(); ++c) v[static_cast<Eigen::Index>(c)] = record.tb[c];
  auto base = static_cast<Eigen::Index>(record.tb.size());
  for (std::size_t i = 0; i < k; ++i) v[base + static_cast<Eigen::Index>(i)] = set.entries[i].rate;
  return v;
}

// ---------------------------------------------------------------------------
// Retrieval suite

struct PixelRetrieval {
  Eigen::Vector3d probs = Eigen::Vector3d::Zero();  // (none, snow, rain)
  PrecipLabel label = PrecipLabel::None;
  double rate = 0.0;
  bool estimated = true;  // false when a phase was detected but no estimator exists
  RadarSource source = RadarSource::Dpr;
};

enum class FusedLabel : std::uint8_t { None = 0, Snow = 1, Rain = 2, Mixed = 3 };

inline std::string_view to_string(FusedLabel l) {
  switch (l) {
    case FusedLabel::None: return "none";
    case FusedLabel::Snow: return "snow";
    case FusedLabel::Rain: return "rain";
    case FusedLabel::Mixed: return "mixed";
  }
  throw ValidationError("bad fused label");
}

struct FusedRetrieval {
  FusedLabel label = FusedLabel::None;
  double rate = 0.0;
  std::vector<RadarSource> contributors;  // sources that detected precipitation
};

// One trained retrieval chain for a (source, surface) stratum: detector,
// phase estimators over kNN-augmented features, and per-phase CDF maps.
// CPR over land/coast carries no rain estimator.
struct RetrievalSuite {
  SurfaceClass surface = SurfaceClass::Ocean;
  RadarSource source = RadarSource::Dpr;
  TrainedModel detector;
  std::optional<TrainedModel> rain_estimator;
  std::optional<TrainedModel> snow_estimator;
  NeighborIndex index;
  std::size_t k = 20;
  std::optional<CdfMap> cdf_rain;
  std::optional<CdfMap> cdf_snow;
};

inline PixelRetrieval retrieve_pixel(const RetrievalSuite& suite,
                                     const CoincidenceRecord& record) {
  if (record.surface != suite.surface)
    throw RoutingError("record surface " + std::string(to_string(record.surface)) +
                       " does not match suite surface " + std::string(to_string(suite.surface)));
  if (record.tb.size() != suite.index.n_channels())
    throw QueryError("record channel count does not match suite");

  PixelRetrieval out;
  out.source = suite.source;
  Eigen::MatrixXd det = suite.detector.infer(assemble_detection_features(record).transpose());
  Eigen::Index arg = 0;
  det.row(0).maxCoeff(&arg);
  out.probs = det.row(0).transpose();
  out.label = static_cast<PrecipLabel>(arg);
  if (out.label == PrecipLabel::None) return out;

  const auto& estimator =
      out.label == PrecipLabel::Rain ? suite.rain_estimator : suite.snow_estimator;
  if (!estimator) {
    out.estimated = false;
    return out;
  }
  Eigen::VectorXd features = assemble_estimation_features(record, suite.index, suite.k);
  double rate = estimator->infer(features.transpose())(0, 0);
  const auto& cdf = out.label == PrecipLabel::Rain ? suite.cdf_rain : suite.cdf_snow;
  if (cdf) rate = cdf->apply(rate);
  out.rate = std::max(0.0, rate);
  return out;
}

// Both none -> none; one precipitating side carries its label and rate; both
// precipitating -> shared phase (or mixed on disagreement) with the mean of
// the estimated rates, unestimated contributors excluded.
inline FusedRetrieval fuse(const PixelRetrieval& a, const PixelRetrieval& b) {
  FusedRetrieval out;
  const PixelRetrieval* precip[2];
  std::size_t n_precip = 0;
  if (a.label != PrecipLabel::None) precip[n_precip++] = &a;
  if (b.label != PrecipLabel::None) precip[n_precip++] = &b;
  if (n_precip == 0) return out;

  for (std::size_t i = 0; i < n_precip; ++i) out.contributors.push_back(precip[i]->source);
  if (n_precip == 1) {
    out.label = precip[0]->label == PrecipLabel::Rain ? FusedLabel::Rain : FusedLabel::Snow;
  } else if (precip[0]->label == precip[1]->label) {
    out.label = precip[0]->label == PrecipLabel::Rain ? FusedLabel::Rain : FusedLabel::Snow;
  } else {
    out.label = FusedLabel::Mixed;
  }

  double sum = 0.0;
  std::size_t n_estimated = 0;
  for (std::size_t i = 0; i < n_precip; ++i)
    if (precip[i]->estimated) {
      sum += precip[i]->rate;
      ++n_estimated;
    }
  out.rate = n_estimated > 0 ? sum / static_cast<double>(n_estimated) : 0.0;
  return out;
}

// ---------------------------------------------------------------------------
// Suite training

struct SuiteTrainConfig {
  std::size_t k = 20;
  MetricKind metric = MetricKind::Euclidean;
  SplitFractions split;
  std::uint64_t seed = 0;
  std::size_t cdf_knots = 99;
  bool fit_cdf = true;

  std::vector<std::size_t> detector_hidden = {64, 64, 64, 64};
  std::vector<std::size_t> estimator_hidden = {64, 64, 64, 64, 64};
  bool batch_norm = true;
  double dropout_rate = 0.10;

  TrainConfig detector_train;
  TrainConfig rain_train;
  TrainConfig snow_train;

  SuiteTrainConfig() {
    detector_train.loss = {LossKind::CrossEntropy, 2};
    detector_train.learning_rate = 1e-4;
    rain_train.loss = {LossKind::Lp, 1};
    rain_train.learning_rate = 1e-5;
    snow_train.loss = {LossKind::Lp, 2};
    snow_train.learning_rate = 1e-5;
  }

  void validate() const {
    if (k < 1) throw ConfigError("k must be >= 1");
    if (!(dropout_rate >= 0.0 && dropout_rate < 1.0))
      throw ConfigError("dropout_rate must lie in [0, 1)");
    if (cdf_knots < 1) throw ConfigError("cdf_knots must be >= 1");
    split.validate();
    detector_train.validate();
    rain_train.validate();
    snow_train.validate();
  }
};

struct SuiteTrainResult {
  RetrievalSuite suite;
  std::vector<EpochRecord> detector_history;
  std::vector<EpochRecord> rain_history;
  std::vector<EpochRecord> snow_history;
  std::shared_ptr<const PrecipDatabase> train_split;
  std::shared_ptr<const PrecipDatabase> val_split;
  std::shared_ptr<const PrecipDatabase> test_split;
};

namespace detail {

inline std::vector<LayerSpec> stack_layers(std::size_t n_in,
                                           const std::vector<std::size_t>& hidden,
                                           std::size_t n_out, Activation out_act, bool batch_norm,
                                           double dropout_rate) {
  std::vector<LayerSpec> specs;
  std::size_t prev = n_in;
  for (std::size_t width : hidden) {
    specs.push_back({prev, width, Activation::Relu, batch_norm, dropout_rate});
    prev = width;
  }
  specs.push_back({prev, n_out, out_act, false, 0.0});
  return specs;
}

inline Eigen::MatrixXd detection_matrix(const PrecipDatabase& db) {
  Eigen::MatrixXd x(db.size(), db.n_channels() + 5);
  for (std::size_t i = 0; i < db.size(); ++i)
    x.row(static_cast<Eigen::Index>(i)) = assemble_detection_features(db[i]).transpose();
  return x;
}

inline Eigen::MatrixXd one_hot_labels(const PrecipDatabase& db) {
  Eigen::MatrixXd y = Eigen::MatrixXd::Zero(db.size(), kNumLabels);
  for (std::size_t i = 0; i < db.size(); ++i)
    y(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(db[i].label)) = 1.0;
  return y;
}

struct PhaseFeatures {
  Eigen::MatrixXd x;
  Eigen::MatrixXd y;  // one column: rate
  std::size_t count = 0;
};

// Rows for records of one phase. self_member marks the db as the index's own
// database, engaging the self-exclusion guard with the record's position.
inline PhaseFeatures phase_features(const PrecipDatabase& db, PrecipLabel phase,
                                    const NeighborIndex& index, std::size_t k, bool self_member) {
  std::vector<std::size_t> rows;
  for (std::size_t i = 0; i < db.size(); ++i)
    if (db[i].label == phase) rows.push_back(i);
  PhaseFeatures out;
  out.count = rows.size();
  if (rows.empty()) return out;
  out.x.resize(static_cast<Eigen::Index>(rows.size()),
               static_cast<Eigen::Index>(db.n_channels() + k));
  out.y.resize(static_cast<Eigen::Index>(rows.size()), 1);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    std::optional<std::size_t> self;
    if (self_member) self = rows[r];
    out.x.row(static_cast<Eigen::Index>(r)) =
        assemble_estimation_features(db[rows[r]], index, k, self).transpose();
    out.y(static_cast<Eigen::Index>(r), 0) = db[rows[r]].rate;
  }
  return out;
}

inline std::optional<TrainedModel> train_estimator(
    const PrecipDatabase& train_db, const PrecipDatabase& val_db, PrecipLabel phase,
    const NeighborIndex& index, const SuiteTrainConfig& cfg, const TrainConfig& tc,
    std::uint64_t init_seed, std::vector<EpochRecord>& history) {
  PhaseFeatures tr = phase_features(train_db, phase, index, cfg.k, true);
  PhaseFeatures va = phase_features(val_db, phase, index, cfg.k, false);
  if (tr.count == 0 || va.count == 0) return std::nullopt;

  TrainedModel model;
  model.input = Standardizer::fit(tr.x);
  auto specs = stack_layers(train_db.n_channels() + cfg.k, cfg.estimator_hidden, 1,
                            Activation::Relu, cfg.batch_norm, cfg.dropout_rate);
  NetworkParams net = NetworkParams::init(specs, init_seed);
  TrainResult result =
      train(std::move(net), model.input.transform(tr.x), tr.y, model.input.transform(va.x), va.y, tc);
  history = result.history;
  model.params = std::move(result.params);
  return model;
}

}  // namespace detail

// Trains the full chain for one stratified database: split, index the train
// partition, fit detector and per-phase estimators, then fit CDF maps from
// raw retrievals on the test partition.
inline SuiteTrainResult train_suite(const PrecipDatabase& db, const SuiteTrainConfig& cfg) {
  cfg.validate();
  if (!db.is_stratified()) throw SchemaError("suite training requires a stratified database");
  if (db.size() < cfg.k + 2) throw ValidationError("database too small for k neighbors");

  auto [train_db, val_db, test_db] = split_database(db, cfg.split, mix_seed(cfg.seed, 0x51));
  SuiteTrainResult out;
  out.train_split = std::make_shared<const PrecipDatabase>(std::move(train_db));
  out.val_split = std::make_shared<const PrecipDatabase>(std::move(val_db));
  out.test_split = std::make_shared<const PrecipDatabase>(std::move(test_db));

  RetrievalSuite& suite = out.suite;
  suite.surface = db.stratum();
  suite.source = db.source();
  suite.k = cfg.k;
  suite.index = NeighborIndex::build(out.train_split, cfg.metric);

  {
    Eigen::MatrixXd xtr = detail::detection_matrix(*out.train_split);
    Eigen::MatrixXd xva = detail::detection_matrix(*out.val_split);
    suite.detector.input = Standardizer::fit(xtr);
    auto specs = detail::stack_layers(db.n_channels() + 5, cfg.detector_hidden, kNumLabels,
                                      Activation::Softmax, cfg.batch_norm, cfg.dropout_rate);
    NetworkParams net = NetworkParams::init(specs, mix_seed(cfg.seed, 0xD1));
    TrainResult result = train(std::move(net), suite.detector.input.transform(xtr),
                               detail::one_hot_labels(*out.train_split),
                               suite.detector.input.transform(xva),
                               detail::one_hot_labels(*out.val_split), cfg.detector_train);
    out.detector_history = result.history;
    suite.detector.params = std::move(result.params);
  }

  bool rain_available = !(suite.source == RadarSource::Cpr && suite.surface != SurfaceClass::Ocean);
  if (rain_available)
    suite.rain_estimator =
        detail::train_estimator(*out.train_split, *out.val_split, PrecipLabel::Rain, suite.index,
                                cfg, cfg.rain_train, mix_seed(cfg.seed, 0xE1), out.rain_history);
  suite.snow_estimator =
      detail::train_estimator(*out.train_split, *out.val_split, PrecipLabel::Snow, suite.index,
                              cfg, cfg.snow_train, mix_seed(cfg.seed, 0xE2), out.snow_history);

  if (cfg.fit_cdf) {
    std::vector<double> raw_rain, raw_snow, truth_rain, truth_snow;
    for (const auto& rec : out.test_split->records()) {
      PixelRetrieval ret = retrieve_pixel(suite, rec);
      if (ret.label == PrecipLabel::Rain && ret.estimated) raw_rain.push_back(ret.rate);
      if (ret.label == PrecipLabel::Snow && ret.estimated) raw_snow.push_back(ret.rate);
      if (rec.label == PrecipLabel::Rain) truth_rain.push_back(rec.rate);
      if (rec.label == PrecipLabel::Snow) truth_snow.push_back(rec.rate);
    }
    auto try_fit = [&](const std::vector<double>& src, const std::vector<double>& ref)
        -> std::optional<CdfMap> {
      if (src.empty() || ref.empty()) return std::nullopt;
      bool any_src = std::any_of(src.begin(), src.end(), [](double v) { return v > 0.0; });
      bool any_ref = std::any_of(ref.begin(), ref.end(), [](double v) { return v > 0.0; });
      if (!any_src || !any_ref) return std::nullopt;
      return CdfMap::fit(src, ref, cfg.cdf_knots);
    };
    if (suite.rain_estimator) suite.cdf_rain = try_fit(raw_rain, truth_rain);
    if (suite.snow_estimator) suite.cdf_snow = try_fit(raw_snow, truth_snow);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Suite bundle serialization

inline void save_suite(const RetrievalSuite& suite, const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create suite directory " + dir.string());

  auto save_model_file = [&](const TrainedModel& model, const char* name) {
    std::ofstream os(dir / name, std::ios::binary);
    if (!os) throw IoError("cannot open " + (dir / name).string());
    save_model(model, os);
  };
  save_model_file(suite.detector, "detector.bin");
  if (suite.rain_estimator) save_model_file(*suite.rain_estimator, "rain.bin");
  if (suite.snow_estimator) save_model_file(*suite.snow_estimator, "snow.bin");

  save_database(suite.index.database(), dir / "index_db.bin", DbFormat::Binary);

  auto save_cdf = [&](const std::optional<CdfMap>& map, const char* name) {
    if (!map) return;
    std::ofstream os(dir / name);
    if (!os) throw IoError("cannot open " + (dir / name).string());
    write_cdf_csv(os, *map);
  };
  save_cdf(suite.cdf_rain, "cdf_rain.csv");
  save_cdf(suite.cdf_snow, "cdf_snow.csv");

  nlohmann::json meta;
  meta["surface"] = std::string(to_string(suite.surface));
  meta["source"] = std::string(to_string(suite.source));
  meta["metric"] = std::string(to_string(suite.index.metric().kind()));
  meta["k"] = suite.k;
  meta["n_channels"] = suite.index.n_channels();
  meta["n_index_records"] = suite.index.database().size();
  meta["db_file"] = "index_db.bin";
  meta["rain_estimator"] = suite.rain_estimator.has_value();
  meta["snow_estimator"] = suite.snow_estimator.has_value();
  meta["cdf_rain"] = suite.cdf_rain.has_value();
  meta["cdf_snow"] = suite.cdf_snow.has_value();
  std::ofstream os(dir / "index_meta.json");
  if (!os) throw IoError("cannot open " + (dir / "index_meta.json").string());
  os << meta.dump(2) << '\n';
  if (!os) throw IoError("suite metadata write failed");
}

inline RetrievalSuite load_suite(const std::filesystem::path& dir) {
  std::ifstream ms(dir / "index_meta.json");
  if (!ms) throw IoError("cannot open " + (dir / "index_meta.json").string());
  nlohmann::json meta;
  try {
    ms >> meta;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("bad suite metadata: " + std::string(e.what()));
  }

  RetrievalSuite suite;
  try {
    suite.surface = surface_from_string(meta.at("surface").get<std::string>());
    suite.source = source_from_string(meta.at("source").get<std::string>());
    suite.k = meta.at("k").get<std::size_t>();
    auto metric = metric_from_string(meta.at("metric").get<std::string>());
    auto db_file = meta.at("db_file").get<std::string>();
    auto db = std::make_shared<const PrecipDatabase>(
        load_database(dir / db_file, DbFormat::Binary));
    suite.index = NeighborIndex::build(db, metric);
  } catch (const nlohmann::json::exception& e) {
    throw ParseError("bad suite metadata: " + std::string(e.what()));
  }

  auto load_model_file = [&](const char* name) {
    std::ifstream is(dir / name, std::ios::binary);
    if (!is) throw IoError("cannot open " + (dir / name).string());
    return load_model(is);
  };
  suite.detector = load_model_file("detector.bin");
  if (meta.value("rain_estimator", false)) suite.rain_estimator = load_model_file("rain.bin");
  if (meta.value("snow_estimator", false)) suite.snow_estimator = load_model_file("snow.bin");

  auto load_cdf = [&](const char* name) -> std::optional<CdfMap> {
    std::ifstream is(dir / name);
    if (!is) throw IoError("cannot open " + (dir / name).string());
    return load_cdf_csv(is);
  };
  if (meta.value("cdf_rain", false)) suite.cdf_rain = load_cdf("cdf_rain.csv");
  if (meta.value("cdf_snow", false)) suite.cdf_snow = load_cdf("cdf_snow.csv");
  return suite;
}

// ---------------------------------------------------------------------------
// Retrieval CSV

struct RetrievalRow {
  double lat = 0.0;
  double lon = 0.0;
  PixelRetrieval ret;
};

inline void write_retrievals_csv(std::ostream& os, std::span<const RetrievalRow> rows) {
  os << "lat,lon,source,label,rate,estimated,p_none,p_snow,p_rain\n";
  for (const auto& r : rows)
    os << format_double(r.lat) << ',' << format_double(r.lon) << ',' << to_string(r.ret.source)
       << ',' << to_string(r.ret.label) << ',' << format_double(r.ret.rate) << ','
       << (r.ret.estimated ? 1 : 0) << ',' << format_double(r.ret.probs[0]) << ','
       << format_double(r.ret.probs[1]) << ',' << format_double(r.ret.probs[2]) << '\n';
}

struct FusedRow {
  double lat = 0.0;
  double lon = 0.0;
  FusedRetrieval fused;
};

inline void write_fused_csv(std::ostream& os, std::span<const FusedRow> rows) {
  os << "lat,lon,label,rate,contributors\n";
  for (const auto& r : rows) {
    os << format_double(r.lat) << ',' << format_double(r.lon) << ',' << to_string(r.fused.label)
       << ',' << format_double(r.fused.rate) << ',';
    for (std::size_t i = 0; i < r.fused.contributors.size(); ++i)
      os << (i ? "+" : "") << to_string(r.fused.contributors[i]);
    os << '\n';
  }
}

}  // namespace diego
