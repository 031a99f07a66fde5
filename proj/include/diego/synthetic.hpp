#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <random>
#include <vector>

#include "diego/types.hpp"

namespace diego {

// Desk-scale stand-in for a radar/radiometer coincidence archive. Rain warms
// the low-frequency channels over ocean (emission against a radiometrically
// cold background); rain ice aloft and snow cool the high-frequency channels
// (scattering of upwelling surface emission).
struct SyntheticConfig {
  std::size_t n_records = 100000;
  std::array<double, 3> class_priors{0.7, 0.2, 0.1};  // none, rain, snow
  std::array<double, 3> surface_mix{0.5, 0.3, 0.2};   // ocean, land, coast
  double rain_log_mu = 0.0;     // lognormal mu of rain rate, mm/hr
  double rain_log_sigma = 1.0;  // lognormal sigma
  double snow_shape = 2.0;      // gamma shape of snow rate
  double snow_scale = 0.15;     // gamma scale, mm/hr
  double tb_noise_sigma = 2.0;  // K
  double emission_gain = 15.0;  // K per ln(1 + rate), channels <= 37 GHz
  double scattering_gain = 25.0;  // K per ln(1 + rate), channels >= 89 GHz
  std::size_t n_channels = 13;
  RadarSource source = RadarSource::Dpr;
  std::uint64_t seed = 0;

  void validate() const {
    if (n_records == 0) throw ConfigError("n_records must be positive");
    if (n_channels == 0) throw ConfigError("n_channels must be positive");
    auto check_simplex = [](const std::array<double, 3>& p, const char* name) {
      double sum = 0.0;
      for (double v : p) {
        if (!(v >= 0.0)) throw ConfigError(std::string(name) + " entries must be >= 0");
        sum += v;
      }
      if (std::abs(sum - 1.0) > 1e-12) throw ConfigError(std::string(name) + " must sum to 1 within 1e-12");
    };
    check_simplex(class_priors, "class_priors");
    check_simplex(surface_mix, "surface_mix");
    if (!(rain_log_sigma > 0.0)) throw ConfigError("rain_log_sigma must be positive");
    if (!(snow_shape > 0.0 && snow_scale > 0.0)) throw ConfigError("snow distribution parameters must be positive");
    if (!(tb_noise_sigma >= 0.0)) throw ConfigError("tb_noise_sigma must be >= 0");
    if (!(emission_gain > 0.0 && scattering_gain > 0.0)) throw ConfigError("channel gains must be positive");
  }
};

// Rates below this are treated as non-precipitating.
constexpr double kOccurrenceThreshold = 0.01;  // mm/hr

// GMI-like channel set for the 13-channel default; evenly spaced otherwise.
inline std::vector<double> channel_frequencies(std::size_t n_channels) {
  if (n_channels == 13)
    return {10.65, 10.65, 18.7, 18.7, 23.8, 36.64, 36.64, 89.0, 89.0, 166.0, 166.0, 183.31, 183.31};
  std::vector<double> f(n_channels);
  if (n_channels == 1) {
    f[0] = 89.0;
    return f;
  }
  for (std::size_t i = 0; i < n_channels; ++i)
    f[i] = 10.0 + 180.0 * static_cast<double>(i) / static_cast<double>(n_channels - 1);
  return f;
}

inline double surface_baseline_tb(SurfaceClass surface, double freq_ghz) {
  switch (surface) {
    case SurfaceClass::Ocean: return 160.0 + 0.45 * freq_ghz;
    case SurfaceClass::Land: return 272.0 - 0.05 * freq_ghz;
    case SurfaceClass::Coast: return 222.0 + 0.12 * freq_ghz;
  }
  throw ValidationError("invalid surface class value");
}

// Noise-free brightness temperature of one channel. This is the analytic
// forward model the generator perturbs with Gaussian noise; inverting it per
// pixel gives an oracle regression against which learned estimators can be
// judged.
inline double clean_tb(const SyntheticConfig& cfg, SurfaceClass surface, PrecipLabel label,
                       double rate, double freq_ghz) {
  double tb = surface_baseline_tb(surface, freq_ghz);
  double signal = std::log1p(rate);
  if (freq_ghz <= 37.0 && surface == SurfaceClass::Ocean && label == PrecipLabel::Rain)
    tb += cfg.emission_gain * signal;
  if (freq_ghz >= 89.0) {
    if (label == PrecipLabel::Snow)
      tb -= cfg.scattering_gain * signal;
    else if (label == PrecipLabel::Rain)
      tb -= 0.5 * cfg.scattering_gain * signal;  // ice aloft at half strength
  }
  return tb;
}

namespace detail {

inline std::size_t pick_from_simplex(const std::array<double, 3>& p, double u) {
  double acc = 0.0;
  for (std::size_t i = 0; i + 1 < p.size(); ++i) {
    acc += p[i];
    if (u < acc) return i;
  }
  return p.size() - 1;
}

inline AncillaryState draw_ancillary(PrecipLabel label, double rate, std::mt19937_64& rng) {
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  AncillaryState a;
  auto expo = [&](double mean) { return -mean * std::log1p(-unit(rng)); };
  auto jitter = [&] { return 0.75 + 0.5 * unit(rng); };
  switch (label) {
    case PrecipLabel::None:
      a.t2m = 250.0 + 60.0 * unit(rng);
      a.lwp = expo(0.02);
      a.iwp = expo(0.01);
      a.cape = expo(30.0);
      a.wvp = 2.0 + 43.0 * unit(rng);
      break;
    case PrecipLabel::Rain:
      a.t2m = 278.5 + 29.5 * unit(rng);
      a.lwp = 0.15 + 0.12 * rate * jitter();
      a.iwp = 0.04 * rate * jitter();
      a.cape = 120.0 * rate * jitter() + expo(30.0);
      a.wvp = 25.0 + 6.0 * std::log1p(rate) * jitter();
      break;
    case PrecipLabel::Snow:
      a.t2m = 252.0 + 23.5 * unit(rng);
      a.iwp = 0.08 + 0.35 * rate * jitter();
      a.lwp = expo(0.03);
      a.cape = expo(10.0);
      a.wvp = 4.0 + 2.5 * std::log1p(rate) * jitter();
      break;
  }
  return a;
}

}  // namespace detail

inline PrecipDatabase generate_synthetic(const SyntheticConfig& cfg) {
  cfg.validate();
  const auto freqs = channel_frequencies(cfg.n_channels);
  std::mt19937_64 rng(cfg.seed);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> noise(0.0, 1.0);
  std::lognormal_distribution<double> rain_rate(cfg.rain_log_mu, cfg.rain_log_sigma);
  std::gamma_distribution<double> snow_rate(cfg.snow_shape, cfg.snow_scale);

  std::vector<CoincidenceRecord> records;
  records.reserve(cfg.n_records);
  for (std::size_t i = 0; i < cfg.n_records; ++i) {
    CoincidenceRecord rec;
    rec.source = cfg.source;
    rec.surface = static_cast<SurfaceClass>(detail::pick_from_simplex(cfg.surface_mix, unit(rng)));
    auto label = static_cast<PrecipLabel>(
        std::array<PrecipLabel, 3>{PrecipLabel::None, PrecipLabel::Rain, PrecipLabel::Snow}
            [detail::pick_from_simplex(cfg.class_priors, unit(rng))]);

    double rate = 0.0;
    if (label == PrecipLabel::Rain) rate = rain_rate(rng);
    else if (label == PrecipLabel::Snow) rate = snow_rate(rng);
    if (rate < kOccurrenceThreshold) {
      label = PrecipLabel::None;
      rate = 0.0;
    }
    rec.label = label;
    rec.rate = rate;

    rec.tb.resize(cfg.n_channels);
    for (std::size_t c = 0; c < cfg.n_channels; ++c) {
      double tb = clean_tb(cfg, rec.surface, label, rate, freqs[c]);
      if (cfg.tb_noise_sigma > 0.0) tb += cfg.tb_noise_sigma * noise(rng);
      rec.tb[c] = std::clamp(tb, 50.0, 350.0);
    }

    rec.ancillary = detail::draw_ancillary(label, rate, rng);

    switch (label) {
      case PrecipLabel::None: rec.lat = -85.0 + 170.0 * unit(rng); break;
      case PrecipLabel::Rain: rec.lat = -60.0 + 120.0 * unit(rng); break;
      case PrecipLabel::Snow: {
        double mag = 35.0 + 50.0 * unit(rng);
        rec.lat = unit(rng) < 0.5 ? -mag : mag;
        break;
      }
    }
    rec.lon = -180.0 + 360.0 * unit(rng);
    if (rec.lon >= 180.0) rec.lon = -180.0;

    records.push_back(std::move(rec));
  }
  return PrecipDatabase::from_records(std::move(records));
}

}  // namespace diego
