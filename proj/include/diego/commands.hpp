#pragma once

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "diego/database_io.hpp"
#include "diego/evaluation.hpp"
#include "diego/pipeline.hpp"
#include "diego/synthetic.hpp"

namespace diego {

struct EvaluateOptions {
  std::optional<double> trim;      // percentile, e.g. 97.5
  double grid_res = 0.1;           // degrees
  double occ_threshold = kOccurrenceThreshold;
};

struct RunConfig {
  std::string experiment = "default";
  std::filesystem::path out_dir = "out";
  std::uint64_t seed = 0;
  DbFormat data_format = DbFormat::Binary;
  std::vector<RadarSource> sources = {RadarSource::Dpr};
  std::vector<SurfaceClass> surfaces = {SurfaceClass::Ocean, SurfaceClass::Land,
                                        SurfaceClass::Coast};
  SyntheticConfig synthetic;
  SuiteTrainConfig suite;
  EvaluateOptions evaluate;
  double debias_band_width = 5.0;
};

namespace detail {

template <typename T>
T get_or(const nlohmann::json& j, const char* key, T fallback) {
  if (!j.contains(key)) return fallback;
  try {
    return j.at(key).get<T>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config key '" + std::string(key) + "': " + e.what());
  }
}

inline void parse_train_config(const nlohmann::json& j, TrainConfig& tc) {
  if (j.contains("loss")) {
    auto loss = j.at("loss").get<std::string>();
    if (loss == "cross_entropy")
      tc.loss = {LossKind::CrossEntropy, 2};
    else if (loss == "l1")
      tc.loss = {LossKind::Lp, 1};
    else if (loss == "l2")
      tc.loss = {LossKind::Lp, 2};
    else
      throw ConfigError("unknown loss '" + loss + "'");
  }
  tc.learning_rate = get_or(j, "learning_rate", tc.learning_rate);
  tc.batch_size = get_or(j, "batch_size", tc.batch_size);
  tc.max_epochs = get_or(j, "max_epochs", tc.max_epochs);
  tc.patience = get_or(j, "patience", tc.patience);
  tc.dropout = get_or(j, "dropout", tc.dropout);
  tc.rmsprop_decay = get_or(j, "rmsprop_decay", tc.rmsprop_decay);
  tc.rmsprop_epsilon = get_or(j, "rmsprop_epsilon", tc.rmsprop_epsilon);
  tc.seed = get_or(j, "seed", tc.seed);
}

inline void parse_synthetic_config(const nlohmann::json& j, SyntheticConfig& sc) {
  sc.n_records = get_or(j, "n_records", sc.n_records);
  sc.class_priors = get_or(j, "class_priors", sc.class_priors);
  sc.surface_mix = get_or(j, "surface_mix", sc.surface_mix);
  sc.rain_log_mu = get_or(j, "rain_log_mu", sc.rain_log_mu);
  sc.rain_log_sigma = get_or(j, "rain_log_sigma", sc.rain_log_sigma);
  sc.snow_shape = get_or(j, "snow_shape", sc.snow_shape);
  sc.snow_scale = get_or(j, "snow_scale", sc.snow_scale);
  sc.tb_noise_sigma = get_or(j, "tb_noise_sigma", sc.tb_noise_sigma);
  sc.emission_gain = get_or(j, "emission_gain", sc.emission_gain);
  sc.scattering_gain = get_or(j, "scattering_gain", sc.scattering_gain);
  sc.n_channels = get_or(j, "n_channels", sc.n_channels);
  sc.seed = get_or(j, "seed", sc.seed);
}

inline void parse_suite_config(const nlohmann::json& j, SuiteTrainConfig& sc) {
  sc.k = get_or(j, "k", sc.k);
  if (j.contains("metric")) sc.metric = metric_from_string(j.at("metric").get<std::string>());
  sc.cdf_knots = get_or(j, "cdf_knots", sc.cdf_knots);
  sc.fit_cdf = get_or(j, "fit_cdf", sc.fit_cdf);
  sc.detector_hidden = get_or(j, "detector_hidden", sc.detector_hidden);
  sc.estimator_hidden = get_or(j, "estimator_hidden", sc.estimator_hidden);
  sc.batch_norm = get_or(j, "batch_norm", sc.batch_norm);
  sc.dropout_rate = get_or(j, "dropout_rate", sc.dropout_rate);
  if (j.contains("split")) {
    const auto& s = j.at("split");
    sc.split.train = get_or(s, "train", sc.split.train);
    sc.split.val = get_or(s, "val", sc.split.val);
    sc.split.test = get_or(s, "test", sc.split.test);
  }
  if (j.contains("detector_train")) parse_train_config(j.at("detector_train"), sc.detector_train);
  if (j.contains("rain_train")) parse_train_config(j.at("rain_train"), sc.rain_train);
  if (j.contains("snow_train")) parse_train_config(j.at("snow_train"), sc.snow_train);
}

}  // namespace detail

inline RunConfig config_from_json(const nlohmann::json& j) {
  RunConfig cfg;
  try {
    cfg.experiment = detail::get_or(j, "experiment", cfg.experiment);
    cfg.out_dir = detail::get_or<std::string>(j, "out_dir", cfg.out_dir.string());
    cfg.seed = detail::get_or(j, "seed", cfg.seed);
    if (j.contains("data_format")) {
      auto f = j.at("data_format").get<std::string>();
      if (f == "csv")
        cfg.data_format = DbFormat::Csv;
      else if (f == "binary")
        cfg.data_format = DbFormat::Binary;
      else
        throw ConfigError("unknown data_format '" + f + "'");
    }
    if (j.contains("sources")) {
      cfg.sources.clear();
      for (const auto& s : j.at("sources"))
        cfg.sources.push_back(source_from_string(s.get<std::string>()));
      if (cfg.sources.empty()) throw ConfigError("sources must be non-empty");
    }
    if (j.contains("surfaces")) {
      cfg.surfaces.clear();
      for (const auto& s : j.at("surfaces"))
        cfg.surfaces.push_back(surface_from_string(s.get<std::string>()));
    }
    if (j.contains("synthetic")) detail::parse_synthetic_config(j.at("synthetic"), cfg.synthetic);
    if (j.contains("suite")) detail::parse_suite_config(j.at("suite"), cfg.suite);
    if (j.contains("evaluate")) {
      const auto& e = j.at("evaluate");
      if (e.contains("trim") && !e.at("trim").is_null())
        cfg.evaluate.trim = e.at("trim").get<double>();
      cfg.evaluate.grid_res = detail::get_or(e, "grid_res", cfg.evaluate.grid_res);
      cfg.evaluate.occ_threshold = detail::get_or(e, "occ_threshold", cfg.evaluate.occ_threshold);
    }
    cfg.debias_band_width = detail::get_or(j, "debias_band_width", cfg.debias_band_width);
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("bad config: ") + e.what());
  } catch (const ParseError& e) {
    throw ConfigError(std::string("bad config: ") + e.what());
  }
  return cfg;
}

inline RunConfig load_config(const std::filesystem::path& path) {
  std::ifstream is(path);
  if (!is) throw ConfigError("cannot open config file: " + path.string());
  nlohmann::json j;
  try {
    is >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config is not valid JSON: " + std::string(e.what()));
  }
  return config_from_json(j);
}

namespace detail {

inline const char* db_extension(DbFormat format) {
  return format == DbFormat::Csv ? ".csv" : ".bin";
}

inline void ensure_out_dir(const std::filesystem::path& dir) {
  std::error_code ec;
  std::filesystem::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir.string());
}

inline void write_text_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path.string());
  os << text;
  if (!os) throw IoError("write failed: " + path.string());
}

inline nlohmann::json label_counts_json(const PrecipDatabase& db) {
  auto counts = db.label_counts();
  nlohmann::json j;
  j["none"] = counts[static_cast<std::size_t>(PrecipLabel::None)];
  j["snow"] = counts[static_cast<std::size_t>(PrecipLabel::Snow)];
  j["rain"] = counts[static_cast<std::size_t>(PrecipLabel::Rain)];
  return j;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// simulate

inline int cmd_simulate(const RunConfig& cfg) {
  detail::ensure_out_dir(cfg.out_dir);
  nlohmann::json manifest;
  manifest["experiment"] = cfg.experiment;
  manifest["seed"] = cfg.seed;
  manifest["n_records_requested"] = cfg.synthetic.n_records;
  nlohmann::json files = nlohmann::json::array();

  for (std::size_t si = 0; si < cfg.sources.size(); ++si) {
    SyntheticConfig sc = cfg.synthetic;
    sc.source = cfg.sources[si];
    sc.seed = mix_seed(cfg.synthetic.seed, static_cast<std::uint64_t>(sc.source));
    PrecipDatabase db = generate_synthetic(sc);

    auto add_file = [&](const PrecipDatabase& d, const std::string& surface_name) {
      std::string name = "db_" + std::string(to_string(sc.source)) + "_" + surface_name +
                         detail::db_extension(cfg.data_format);
      save_database(d, cfg.out_dir / name, cfg.data_format);
      nlohmann::json f;
      f["path"] = name;
      f["source"] = std::string(to_string(sc.source));
      f["surface"] = surface_name;
      f["n_records"] = d.size();
      f["label_counts"] = detail::label_counts_json(d);
      files.push_back(f);
      std::cout << "wrote " << (cfg.out_dir / name).string() << " (" << d.size() << " records)\n";
    };

    for (SurfaceClass surface : cfg.surfaces) {
      try {
        add_file(db.filter_surface(surface), std::string(to_string(surface)));
      } catch (const ValidationError&) {
        std::cout << "skipped " << to_string(sc.source) << '/' << to_string(surface)
                  << " (no records)\n";
      }
    }
    manifest["synthetic_seed_" + std::string(to_string(sc.source))] = sc.seed;
  }
  manifest["files"] = files;
  std::ostringstream ms;
  ms << manifest.dump(2) << '\n';
  detail::write_text_file(cfg.out_dir / "manifest.json", ms.str());
  return 0;
}

// ---------------------------------------------------------------------------
// train

inline int cmd_train(const RunConfig& cfg, const std::vector<std::filesystem::path>& db_paths) {
  if (db_paths.empty()) throw ConfigError("train needs at least one database file");
  detail::ensure_out_dir(cfg.out_dir);
  nlohmann::json manifest;
  manifest["experiment"] = cfg.experiment;
  manifest["seed"] = cfg.seed;
  nlohmann::json bundles = nlohmann::json::array();

  for (const auto& path : db_paths) {
    PrecipDatabase db = load_database(path, format_for_path(path));
    if (!db.is_stratified())
      throw SchemaError("training database must hold a single surface class: " + path.string());

    std::uint64_t suite_seed =
        mix_seed(cfg.seed, 0x200 + 16 * static_cast<std::uint64_t>(db.source()) +
                               static_cast<std::uint64_t>(db.stratum()));
    SuiteTrainConfig sc = cfg.suite;
    sc.seed = suite_seed;
    sc.detector_train.seed = mix_seed(suite_seed, 0xA1);
    sc.rain_train.seed = mix_seed(suite_seed, 0xA2);
    sc.snow_train.seed = mix_seed(suite_seed, 0xA3);

    SuiteTrainResult result = train_suite(db, sc);
    std::string bundle_name = "suite_" + std::string(to_string(db.source())) + "_" +
                              std::string(to_string(db.stratum()));
    auto bundle_dir = cfg.out_dir / bundle_name;
    save_suite(result.suite, bundle_dir);

    auto write_history = [&](const std::vector<EpochRecord>& history, const char* name) {
      if (history.empty()) return;
      std::ofstream os(bundle_dir / name);
      if (!os) throw IoError("cannot open " + (bundle_dir / name).string());
      write_history_csv(os, history);
    };
    write_history(result.detector_history, "detector_history.csv");
    write_history(result.rain_history, "rain_history.csv");
    write_history(result.snow_history, "snow_history.csv");

    std::string test_name = std::string("test_split") + detail::db_extension(cfg.data_format);
    save_database(*result.test_split, bundle_dir / test_name, cfg.data_format);

    nlohmann::json b;
    b["bundle"] = bundle_name;
    b["input"] = path.string();
    b["seed"] = suite_seed;
    b["n_train"] = result.train_split->size();
    b["n_val"] = result.val_split->size();
    b["n_test"] = result.test_split->size();
    b["detector_epochs"] = result.detector_history.size();
    b["rain_estimator"] = result.suite.rain_estimator.has_value();
    b["snow_estimator"] = result.suite.snow_estimator.has_value();
    bundles.push_back(b);
    std::cout << "trained " << bundle_name << " (" << result.detector_history.size()
              << " detector epochs)\n";
  }
  manifest["bundles"] = bundles;
  std::ostringstream ms;
  ms << manifest.dump(2) << '\n';
  detail::write_text_file(cfg.out_dir / "train_manifest.json", ms.str());
  return 0;
}

// ---------------------------------------------------------------------------
// retrieve

struct RetrieveOptions {
  std::optional<std::filesystem::path> fuse_bundle;
  bool debias_zonal = false;
};

namespace detail {

inline std::vector<RetrievalRow> retrieve_all(const RetrievalSuite& suite,
                                              const PrecipDatabase& db) {
  if (db.n_channels() != suite.index.n_channels())
    throw QueryError("input has " + std::to_string(db.n_channels()) + " channels, suite expects " +
                     std::to_string(suite.index.n_channels()));
  if (!db.is_stratified() || db.stratum() != suite.surface)
    throw RoutingError("input database surface does not match suite surface " +
                       std::string(to_string(suite.surface)));
  std::vector<RetrievalRow> rows;
  rows.reserve(db.size());
  for (const auto& rec : db.records()) rows.push_back({rec.lat, rec.lon, retrieve_pixel(suite, rec)});
  return rows;
}

// Appendix-style snowfall debias: fit band factors from this run's snow
// retrievals (passive) against the input database's radar snow rates
// (active), then scale the snow retrievals in place.
inline ZonalScale debias_snow_rows(std::vector<RetrievalRow>& rows, const PrecipDatabase& db,
                                   double grid_res, double band_width) {
  Grid passive(grid_res, kOccurrenceThreshold);
  for (const auto& r : rows)
    if (r.ret.label == PrecipLabel::Snow && r.ret.estimated)
      passive.add(r.lat, r.lon, PrecipLabel::Snow, r.ret.rate);
  Grid active(grid_res, kOccurrenceThreshold);
  for (const auto& rec : db.records())
    if (rec.label == PrecipLabel::Snow) active.add(rec.lat, rec.lon, PrecipLabel::Snow, rec.rate);
  ZonalScale scale = fit_zonal_scale(passive, active, band_width);
  for (auto& r : rows)
    if (r.ret.label == PrecipLabel::Snow && r.ret.estimated)
      r.ret.rate *= scale.factor_at(r.lat);
  return scale;
}

inline void write_rows_csv(const std::filesystem::path& path,
                           const std::vector<RetrievalRow>& rows) {
  std::ofstream os(path);
  if (!os) throw IoError("cannot open " + path.string());
  write_retrievals_csv(os, rows);
  if (!os) throw IoError("write failed: " + path.string());
}

}  // namespace detail

inline int cmd_retrieve(const RunConfig& cfg, const std::filesystem::path& bundle_dir,
                        const std::filesystem::path& input_path, const RetrieveOptions& opt) {
  detail::ensure_out_dir(cfg.out_dir);
  DbFormat format = format_for_path(input_path);

  if (database_file_empty(input_path, format)) {
    {
      std::ostringstream tmp;
      write_retrievals_csv(tmp, std::vector<RetrievalRow>{});
      detail::write_text_file(cfg.out_dir / "retrievals.csv", tmp.str());
    }
    if (opt.fuse_bundle) {
      std::ostringstream tmp;
      write_fused_csv(tmp, std::vector<FusedRow>{});
      detail::write_text_file(cfg.out_dir / "fused.csv", tmp.str());
    }
    std::cout << "input database is empty; wrote header-only output\n";
    return 0;
  }

  RetrievalSuite suite = load_suite(bundle_dir);
  PrecipDatabase db = load_database(input_path, format);
  std::vector<RetrievalRow> rows = detail::retrieve_all(suite, db);

  auto debias = [&](std::vector<RetrievalRow>& target, std::string_view tag) {
    ZonalScale scale =
        detail::debias_snow_rows(target, db, cfg.evaluate.grid_res, cfg.debias_band_width);
    std::ofstream os(cfg.out_dir / ("zonal_scale_" + std::string(tag) + ".csv"));
    if (!os) throw IoError("cannot write zonal scale csv");
    write_zonal_scale_csv(os, scale);
  };

  if (!opt.fuse_bundle) {
    if (opt.debias_zonal) debias(rows, to_string(suite.source));
    detail::write_rows_csv(cfg.out_dir / "retrievals.csv", rows);
    std::cout << "wrote " << (cfg.out_dir / "retrievals.csv").string() << " (" << rows.size()
              << " rows)\n";
    return 0;
  }

  RetrievalSuite suite_b = load_suite(*opt.fuse_bundle);
  std::vector<RetrievalRow> rows_b = detail::retrieve_all(suite_b, db);
  if (opt.debias_zonal) {
    debias(rows, to_string(suite.source));
    debias(rows_b, suite_b.source == suite.source
                       ? std::string(to_string(suite_b.source)) + "_b"
                       : std::string(to_string(suite_b.source)));
  }

  std::string name_a = "retrievals_" + std::string(to_string(suite.source)) + ".csv";
  std::string name_b = suite_b.source == suite.source
                           ? "retrievals_" + std::string(to_string(suite_b.source)) + "_b.csv"
                           : "retrievals_" + std::string(to_string(suite_b.source)) + ".csv";
  detail::write_rows_csv(cfg.out_dir / name_a, rows);
  detail::write_rows_csv(cfg.out_dir / name_b, rows_b);

  std::vector<FusedRow> fused;
  fused.reserve(rows.size());
  for (std::size_t i = 0; i < rows.size(); ++i)
    fused.push_back({rows[i].lat, rows[i].lon, fuse(rows[i].ret, rows_b[i].ret)});
  std::ofstream os(cfg.out_dir / "fused.csv");
  if (!os) throw IoError("cannot open fused.csv");
  write_fused_csv(os, fused);
  std::cout << "wrote " << (cfg.out_dir / "fused.csv").string() << " (" << fused.size()
            << " rows)\n";
  return 0;
}

// ---------------------------------------------------------------------------
// evaluate

inline std::vector<RetrievalRow> load_retrievals_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw ParseError("empty retrieval csv");
  if (trim(line) != "lat,lon,source,label,rate,estimated,p_none,p_snow,p_rain")
    throw ParseError("bad retrieval csv header");
  std::vector<RetrievalRow> rows;
  std::size_t line_no = 1;
  while (std::getline(is, line)) {
    ++line_no;
    if (trim(line).empty()) continue;
    auto f = split_csv_line(line);
    if (f.size() != 9)
      throw ParseError("row " + std::to_string(line_no) + ": expected 9 fields, got " +
                       std::to_string(f.size()));
    try {
      RetrievalRow r;
      r.lat = parse_double(f[0], "lat");
      r.lon = parse_double(f[1], "lon");
      r.ret.source = source_from_string(f[2]);
      r.ret.label = label_from_string(f[3]);
      r.ret.rate = parse_double(f[4], "rate");
      if (f[5] == "1")
        r.ret.estimated = true;
      else if (f[5] == "0")
        r.ret.estimated = false;
      else
        throw ParseError("estimated must be 0 or 1");
      r.ret.probs[0] = parse_double(f[6], "p_none");
      r.ret.probs[1] = parse_double(f[7], "p_snow");
      r.ret.probs[2] = parse_double(f[8], "p_rain");
      rows.push_back(r);
    } catch (const ParseError& e) {
      throw ParseError("row " + std::to_string(line_no) + ": " + e.what());
    }
  }
  return rows;
}

inline int cmd_evaluate(const RunConfig& cfg, const std::filesystem::path& pred_path,
                        const std::filesystem::path& truth_path) {
  detail::ensure_out_dir(cfg.out_dir);
  std::ifstream ps(pred_path);
  if (!ps) throw IoError("cannot open " + pred_path.string());
  std::vector<RetrievalRow> pred = load_retrievals_csv(ps);
  PrecipDatabase truth = load_database(truth_path, format_for_path(truth_path));

  if (pred.size() != truth.size())
    throw ValidationError("prediction/truth misalignment: " + std::to_string(pred.size()) +
                          " rows vs " + std::to_string(truth.size()) + " records");
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (pred[i].lat != truth[i].lat || pred[i].lon != truth[i].lon)
      throw ValidationError("prediction/truth misalignment at row " + std::to_string(i) +
                            ": coordinates differ");

  std::vector<PrecipLabel> pred_labels, truth_labels;
  std::vector<double> pred_rates, truth_rates;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    pred_labels.push_back(pred[i].ret.label);
    truth_labels.push_back(truth[i].label);
    pred_rates.push_back(pred[i].ret.rate);
    truth_rates.push_back(truth[i].rate);
  }

  MetricsReport report;
  report.add_count("n_records", pred.size());
  if (cfg.evaluate.trim) report.add("trim_percentile", *cfg.evaluate.trim);

  for (PrecipLabel phase : {PrecipLabel::Rain, PrecipLabel::Snow}) {
    std::string p(to_string(phase));
    ConfusionCounts c = confusion(pred_labels, truth_labels, phase);
    report.add_count(p + "_tp", c.tp);
    report.add_count(p + "_fp", c.fp);
    report.add_count(p + "_tn", c.tn);
    report.add_count(p + "_fn", c.fn);
    report.add(p + "_tpr", c.tpr());
    report.add(p + "_fpr", c.fpr());

    std::vector<double> dp, dt;
    for (std::size_t i = 0; i < pred.size(); ++i)
      if (truth_labels[i] == phase && pred_labels[i] == phase) {
        dp.push_back(pred_rates[i]);
        dt.push_back(truth_rates[i]);
      }
    if (!dp.empty()) {
      EstimationMetrics m = estimation_metrics(dp, dt, cfg.evaluate.trim);
      report.add(p + "_bias", m.bias);
      report.add(p + "_ubrmse", m.ubrmse);
      report.add(p + "_ubmae", m.ubmae);
      report.add_count(p + "_pairs", m.n_pairs);
    } else {
      report.add(p + "_bias", std::nullopt);
      report.add(p + "_ubrmse", std::nullopt);
      report.add(p + "_ubmae", std::nullopt);
      report.add_count(p + "_pairs", 0);
    }
  }

  EstimationMetrics all = estimation_metrics(pred_rates, truth_rates, cfg.evaluate.trim);
  report.add("all_bias", all.bias);
  report.add("all_ubrmse", all.ubrmse);
  report.add("all_ubmae", all.ubmae);
  report.add_count("all_pairs", all.n_pairs);

  std::vector<GridSample> samples;
  samples.reserve(pred.size());
  for (const auto& r : pred) samples.push_back({r.lat, r.lon, r.ret.label, r.ret.rate});
  Grid grid = accumulate_grid(samples, cfg.evaluate.grid_res, cfg.evaluate.occ_threshold);
  report.add("grid_total_rate_sum", grid.total_rate_sum());
  report.add_count("grid_n_samples", grid.total_samples());
  report.add_count("grid_populated_cells", grid.cells().size());

  {
    std::ofstream os(cfg.out_dir / "grid.csv");
    if (!os) throw IoError("cannot open grid.csv");
    write_grid_csv(os, grid);
  }
  {
    std::ofstream os(cfg.out_dir / "zonal.csv");
    if (!os) throw IoError("cannot open zonal.csv");
    write_zonal_csv(os, grid);
  }
  {
    std::ostringstream text;
    report.write_text(text);
    detail::write_text_file(cfg.out_dir / "metrics.txt", text.str());
    std::cout << text.str();
  }
  {
    std::ostringstream js;
    report.write_json(js);
    detail::write_text_file(cfg.out_dir / "metrics.json", js.str());
  }
  return 0;
}

// ---------------------------------------------------------------------------
// gradcheck

// Runs the finite-difference checker over a fixed matrix of small
// architectures and losses; any relative error at or above 1e-4 fails the
// command. inject_fault corrupts one gradient entry to prove the checker
// can fail.
inline int cmd_gradcheck(const RunConfig& cfg, bool inject_fault = false) {
  struct Case {
    const char* name;
    std::vector<LayerSpec> specs;
    LossSpec loss;
  };
  const std::vector<Case> cases = {
      {"linear_l2", {{4, 1, Activation::Linear, false, 0.0}}, {LossKind::Lp, 2}},
      {"relu_l2",
       {{4, 8, Activation::Relu, false, 0.0}, {8, 1, Activation::Linear, false, 0.0}},
       {LossKind::Lp, 2}},
      {"relu_l1",
       {{4, 8, Activation::Relu, false, 0.0}, {8, 1, Activation::Linear, false, 0.0}},
       {LossKind::Lp, 1}},
      {"bn_softmax_ce",
       {{5, 8, Activation::Relu, true, 0.0},
        {8, 6, Activation::Relu, true, 0.0},
        {6, 3, Activation::Softmax, false, 0.0}},
       {LossKind::CrossEntropy, 2}},
      {"deep_bn_l2",
       {{4, 8, Activation::Relu, true, 0.0},
        {8, 8, Activation::Relu, false, 0.0},
        {8, 8, Activation::Relu, true, 0.0},
        {8, 1, Activation::Relu, false, 0.0}},
       {LossKind::Lp, 2}},
      {"dropout_l2",
       {{4, 8, Activation::Relu, false, 0.2}, {8, 1, Activation::Linear, false, 0.0}},
       {LossKind::Lp, 2}},
  };

  const double h = 1e-6;
  const double tol = 1e-4;
  const Eigen::Index m = 8;
  bool all_ok = true;
  double worst = 0.0;

  for (std::size_t ci = 0; ci < cases.size(); ++ci) {
    const Case& c = cases[ci];
    NetworkParams net = NetworkParams::init(c.specs, mix_seed(cfg.seed, 0x6C0 + ci));

    // Regenerate the batch until every ReLU pre-activation clears the kink
    // margin, so central differences stay on one linear piece.
    Eigen::MatrixXd x, y;
    for (std::uint64_t attempt = 0;; ++attempt) {
      if (attempt > 200) throw NumericError("could not build a kink-free batch");
      std::mt19937_64 rng(mix_seed(cfg.seed, 0x6D000 + ci * 1000 + attempt));
      std::normal_distribution<double> normal(0.0, 1.0);
      x.resize(m, static_cast<Eigen::Index>(c.specs.front().n_in));
      for (Eigen::Index i = 0; i < x.size(); ++i) x.data()[i] = normal(rng);
      y.resize(m, static_cast<Eigen::Index>(c.specs.back().n_out));
      if (c.loss.kind == LossKind::CrossEntropy) {
        y.setZero();
        std::uniform_int_distribution<Eigen::Index> pick(0, y.cols() - 1);
        for (Eigen::Index i = 0; i < m; ++i) y(i, pick(rng)) = 1.0;
      } else {
        for (Eigen::Index i = 0; i < y.size(); ++i) y.data()[i] = std::abs(normal(rng));
      }
      if (min_relu_margin(net, x) > 10.0 * h) break;
    }

    double fault = inject_fault && ci == 0 ? 2.0 : 1.0;
    double err = grad_check(net, x, y, c.loss, h, fault);
    worst = std::max(worst, err);
    bool ok = err < tol;
    all_ok = all_ok && ok;
    std::cout << (ok ? "[PASS] " : "[FAIL] ") << c.name << " max relative error "
              << format_double(err) << '\n';
  }
  std::cout << "gradcheck worst case " << format_double(worst) << " (tolerance "
            << format_double(tol) << ")\n";
  if (!all_ok) throw NumericError("gradient check failed");
  return 0;
}

}  // namespace diego
