#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <tuple>
#include <vector>

#include "diego/errors.hpp"
#include "diego/util.hpp"

namespace diego {

enum class SurfaceClass : std::uint8_t { Ocean = 0, Land = 1, Coast = 2 };
// Numeric order matches the detector output layout (none, snow, rain).
enum class PrecipLabel : std::uint8_t { None = 0, Snow = 1, Rain = 2 };
enum class RadarSource : std::uint8_t { Dpr = 0, Cpr = 1 };

inline std::string_view to_string(SurfaceClass s) {
  switch (s) {
    case SurfaceClass::Ocean: return "ocean";
    case SurfaceClass::Land: return "land";
    case SurfaceClass::Coast: return "coast";
  }
  throw ValidationError("invalid surface class value");
}

inline std::string_view to_string(PrecipLabel l) {
  switch (l) {
    case PrecipLabel::None: return "none";
    case PrecipLabel::Snow: return "snow";
    case PrecipLabel::Rain: return "rain";
  }
  throw ValidationError("invalid precipitation label value");
}

inline std::string_view to_string(RadarSource s) {
  switch (s) {
    case RadarSource::Dpr: return "dpr";
    case RadarSource::Cpr: return "cpr";
  }
  throw ValidationError("invalid radar source value");
}

inline SurfaceClass surface_from_string(std::string_view s) {
  if (s == "ocean") return SurfaceClass::Ocean;
  if (s == "land") return SurfaceClass::Land;
  if (s == "coast") return SurfaceClass::Coast;
  throw ParseError("unknown surface class '" + std::string(s) + "'");
}

inline PrecipLabel label_from_string(std::string_view s) {
  if (s == "none") return PrecipLabel::None;
  if (s == "snow") return PrecipLabel::Snow;
  if (s == "rain") return PrecipLabel::Rain;
  throw ParseError("unknown precipitation label '" + std::string(s) + "'");
}

inline RadarSource source_from_string(std::string_view s) {
  if (s == "dpr") return RadarSource::Dpr;
  if (s == "cpr") return RadarSource::Cpr;
  throw ParseError("unknown radar source '" + std::string(s) + "'");
}

constexpr std::size_t kNumLabels = 3;

// ERA5-style environmental state attached to each coincidence.
struct AncillaryState {
  double lwp = 0.0;   // cloud liquid water path, kg/m^2
  double iwp = 0.0;   // cloud ice water path, kg/m^2
  double wvp = 0.0;   // total columnar water vapor, kg/m^2
  double cape = 0.0;  // convective available potential energy, J/kg
  double t2m = 280.0; // 2-m air temperature, K

  void validate() const {
    if (!(lwp >= 0.0)) throw ValidationError("lwp must be >= 0");
    if (!(iwp >= 0.0)) throw ValidationError("iwp must be >= 0");
    if (!(wvp >= 0.0)) throw ValidationError("wvp must be >= 0");
    if (!(cape >= 0.0)) throw ValidationError("cape must be >= 0");
    if (!(t2m >= 180.0 && t2m <= 340.0)) throw ValidationError("t2m out of range [180, 340]");
  }
};

// One pixel-level pairing of brightness temperatures with a radar label/rate.
struct CoincidenceRecord {
  std::vector<double> tb;  // Kelvin, one per channel, ascending frequency
  AncillaryState ancillary;
  SurfaceClass surface = SurfaceClass::Ocean;
  PrecipLabel label = PrecipLabel::None;
  double rate = 0.0;  // near-surface precipitation rate, mm/hr
  double lat = 0.0;
  double lon = 0.0;
  RadarSource source = RadarSource::Dpr;

  void validate() const {
    for (double v : tb)
      if (!(v >= 50.0 && v <= 350.0)) throw ValidationError("tb out of range [50, 350]");
    ancillary.validate();
    bool zero_rate = rate == 0.0;
    bool none_label = label == PrecipLabel::None;
    if (zero_rate != none_label) throw ValidationError("rate must be 0 exactly when label is none");
    if (!(rate >= 0.0)) throw ValidationError("rate must be >= 0");
    if (!(lat >= -90.0 && lat <= 90.0)) throw ValidationError("lat out of range [-90, 90]");
    if (!(lon >= -180.0 && lon < 180.0)) throw ValidationError("lon out of range [-180, 180)");
  }
};

// Immutable collection of records sharing one radar source and channel count.
// A database is "stratified" when every record also shares one surface class;
// file I/O and retrieval suites require stratified databases, while the
// synthetic generator may produce a mixed-surface database that is stratified
// with filter_surface() before use.
class PrecipDatabase {
 public:
  PrecipDatabase() = default;

  static PrecipDatabase from_records(std::vector<CoincidenceRecord> records) {
    if (records.empty()) throw ValidationError("database must contain at least one record");
    PrecipDatabase db;
    db.n_channels_ = records.front().tb.size();
    db.source_ = records.front().source;
    db.surface_ = records.front().surface;
    for (const auto& r : records) {
      r.validate();
      if (r.tb.size() != db.n_channels_) throw ValidationError("n_channels differs across records");
      if (r.source != db.source_) throw SchemaError("mixed radar sources in one database");
      if (db.surface_ && r.surface != *db.surface_) db.surface_.reset();
    }
    db.records_ = std::move(records);
    return db;
  }

  const std::vector<CoincidenceRecord>& records() const { return records_; }
  const CoincidenceRecord& operator[](std::size_t i) const { return records_[i]; }
  std::size_t size() const { return records_.size(); }
  bool empty() const { return records_.empty(); }
  std::size_t n_channels() const { return n_channels_; }
  RadarSource source() const { return source_; }

  bool is_stratified() const { return surface_.has_value(); }
  std::optional<SurfaceClass> surface() const { return surface_; }

  SurfaceClass stratum() const {
    if (!surface_) throw SchemaError("database is not stratified by surface class");
    return *surface_;
  }

  PrecipDatabase filter_surface(SurfaceClass s) const {
    std::vector<CoincidenceRecord> kept;
    for (const auto& r : records_)
      if (r.surface == s) kept.push_back(r);
    if (kept.empty()) throw ValidationError("no records for surface class " + std::string(to_string(s)));
    return from_records(std::move(kept));
  }

  std::vector<std::size_t> surface_counts() const {
    std::vector<std::size_t> counts(3, 0);
    for (const auto& r : records_) counts[static_cast<std::size_t>(r.surface)]++;
    return counts;
  }

  std::vector<std::size_t> label_counts() const {
    std::vector<std::size_t> counts(kNumLabels, 0);
    for (const auto& r : records_) counts[static_cast<std::size_t>(r.label)]++;
    return counts;
  }

 private:
  std::vector<CoincidenceRecord> records_;
  RadarSource source_ = RadarSource::Dpr;
  std::optional<SurfaceClass> surface_;
  std::size_t n_channels_ = 0;
};

struct SplitFractions {
  double train = 0.7;
  double val = 0.15;
  double test = 0.15;

  void validate() const {
    if (!(train > 0.0 && val > 0.0 && test > 0.0))
      throw ConfigError("split fractions must all be positive");
    if (std::abs(train + val + test - 1.0) > 1e-9)
      throw ConfigError("split fractions must sum to 1 within 1e-9");
  }
};

// Seeded random partition. Validation and test sizes are floor(N*f); the
// remainder goes to the training partition.
inline std::tuple<PrecipDatabase, PrecipDatabase, PrecipDatabase> split_database(
    const PrecipDatabase& db, const SplitFractions& fractions, std::uint64_t seed) {
  fractions.validate();
  const std::size_t n = db.size();
  std::vector<std::size_t> perm(n);
  std::iota(perm.begin(), perm.end(), std::size_t{0});
  std::mt19937_64 rng(seed);
  std::shuffle(perm.begin(), perm.end(), rng);

  auto n_val = static_cast<std::size_t>(std::floor(static_cast<double>(n) * fractions.val));
  auto n_test = static_cast<std::size_t>(std::floor(static_cast<double>(n) * fractions.test));
  if (n_val + n_test >= n) throw ConfigError("split leaves no training records");
  std::size_t n_train = n - n_val - n_test;

  auto take = [&](std::size_t begin, std::size_t count) {
    std::vector<CoincidenceRecord> recs;
    recs.reserve(count);
    for (std::size_t i = begin; i < begin + count; ++i) recs.push_back(db[perm[i]]);
    return PrecipDatabase::from_records(std::move(recs));
  };
  return {take(0, n_train), take(n_train, n_val), take(n_train + n_val, n_test)};
}

}  // namespace diego
