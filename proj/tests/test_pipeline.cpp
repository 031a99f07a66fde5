#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <memory>
#include <random>
#include <sstream>

#include <diego/pipeline.hpp>
#include <diego/synthetic.hpp>

using namespace diego;
using Catch::Approx;
using L = PrecipLabel;

namespace {

std::shared_ptr<PrecipDatabase> tiny_db(std::vector<std::pair<std::array<double, 2>, double>> pts,
                                        RadarSource source = RadarSource::Dpr) {
  std::vector<CoincidenceRecord> recs;
  for (const auto& [tb, rate] : pts) {
    CoincidenceRecord r;
    r.tb = {tb[0], tb[1]};
    r.rate = rate;
    r.label = rate == 0.0 ? L::None : (rate < 1.0 ? L::Snow : L::Rain);
    r.source = source;
    recs.push_back(r);
  }
  return std::make_shared<PrecipDatabase>(PrecipDatabase::from_records(std::move(recs)));
}

// Constant-output model: zero weights, bias = wanted outputs.
TrainedModel constant_model(std::size_t n_in, std::vector<double> out,
                            Activation act = Activation::Linear) {
  std::size_t n_out = out.size();
  TrainedModel m;
  m.params = NetworkParams::init({{n_in, n_out, act, false, 0.0}}, 1);
  m.params.layers[0].W.setZero();
  for (std::size_t i = 0; i < n_out; ++i) m.params.layers[0].b[static_cast<Eigen::Index>(i)] = out[i];
  m.input.mean = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(n_in));
  m.input.std = Eigen::VectorXd::Ones(static_cast<Eigen::Index>(n_in));
  return m;
}

RetrievalSuite hand_suite(std::vector<double> logits, std::optional<double> rain_rate,
                          std::optional<double> snow_rate) {
  RetrievalSuite suite;
  suite.surface = SurfaceClass::Ocean;
  suite.source = RadarSource::Dpr;
  suite.k = 2;
  suite.index = NeighborIndex::build(
      tiny_db({{{200, 200}, 0.0}, {{210, 210}, 2.0}, {{220, 220}, 0.5}, {{230, 230}, 4.0}}),
      MetricKind::Euclidean);
  suite.detector = constant_model(7, std::move(logits), Activation::Softmax);
  if (rain_rate) suite.rain_estimator = constant_model(4, {*rain_rate});
  if (snow_rate) suite.snow_estimator = constant_model(4, {*snow_rate});
  return suite;
}

CoincidenceRecord ocean_record() {
  CoincidenceRecord r;
  r.tb = {205.0, 205.0};
  r.surface = SurfaceClass::Ocean;
  r.lat = 10.0;
  r.lon = 20.0;
  return r;
}

PixelRetrieval pixel(L label, double rate, RadarSource source, bool estimated = true) {
  PixelRetrieval p;
  p.label = label;
  p.rate = rate;
  p.source = source;
  p.estimated = estimated;
  return p;
}

}  // namespace

TEST_CASE("cdf map reproduces a pure scale distortion") {
  std::mt19937_64 rng(1);
  std::uniform_real_distribution<double> u(1.0, 2.0);
  std::vector<double> reference, retrieved;
  for (int i = 0; i < 4000; ++i) {
    double x = u(rng);
    reference.push_back(x);
    retrieved.push_back(2.0 * x);  // systematic doubling
  }
  auto map = CdfMap::fit(retrieved, reference, 99);
  map.validate();

  for (double v : {2.2, 2.8, 3.3, 3.9})
    CHECK(map.apply(v) == Approx(v / 2.0).epsilon(0.02));
}

TEST_CASE("cdf map is monotone and clamped at zero") {
  std::mt19937_64 rng(5);
  std::lognormal_distribution<double> ln(0.0, 1.0);
  std::vector<double> a, b;
  for (int i = 0; i < 2000; ++i) {
    a.push_back(ln(rng));
    b.push_back(0.5 * ln(rng) + 0.01);
  }
  auto map = CdfMap::fit(a, b, 99);

  double prev = -1.0;
  for (double x = 0.0; x < 20.0; x += 0.05) {
    double y = map.apply(x);
    CHECK(y >= 0.0);
    CHECK(y >= prev - 1e-12);
    prev = y;
  }
}

TEST_CASE("cdf map extends the tails with the adjacent segment slope") {
  CdfMap map;
  map.source_knots = {1.0, 2.0, 4.0};
  map.reference_knots = {10.0, 12.0, 13.0};

  CHECK(map.apply(3.0) == Approx(12.5));
  CHECK(map.apply(6.0) == Approx(14.0));   // slope (13-12)/(4-2) = 0.5 past the top
  CHECK(map.apply(0.5) == Approx(9.0));    // slope (12-10)/(2-1) = 2 below the bottom
  CHECK(map.apply(-10.0) == 0.0);          // clamped

  CdfMap flat;
  flat.source_knots = {2.0, 2.0};
  flat.reference_knots = {5.0, 5.0};
  CHECK(flat.apply(3.0) == Approx(6.0));  // degenerate knots fall back to slope 1
}

TEST_CASE("cdf fit refuses all-zero samples") {
  std::vector<double> zeros(50, 0.0), ok{1.0, 2.0};
  REQUIRE_THROWS_AS(CdfMap::fit(zeros, ok, 9), EstimationError);
  REQUIRE_THROWS_AS(CdfMap::fit(ok, zeros, 9), EstimationError);
}

TEST_CASE("cdf map csv round-trip") {
  std::vector<double> a{1, 2, 3, 4, 5, 6, 7, 8}, b{2, 3, 4, 5, 6, 7, 8, 9};
  auto map = CdfMap::fit(a, b, 7);
  std::stringstream buf;
  write_cdf_csv(buf, map);
  auto back = load_cdf_csv(buf);
  REQUIRE(back.source_knots.size() == map.source_knots.size());
  for (std::size_t i = 0; i < map.source_knots.size(); ++i) {
    CHECK(back.source_knots[i] == map.source_knots[i]);
    CHECK(back.reference_knots[i] == map.reference_knots[i]);
  }

  std::stringstream bad("wrong,header\n1,2\n");
  REQUIRE_THROWS_AS(load_cdf_csv(bad), ParseError);
}

TEST_CASE("zonal scale factors are active over passive band means") {
  std::vector<GridSample> passive, active;
  // band [-90,-85): passive mean 1, active mean 2 -> factor 2
  passive.push_back({-87.5, 0.0, L::Snow, 1.0});
  active.push_back({-87.5, 0.0, L::Snow, 2.0});
  // band [-85,-80): passive mean 4, active mean 1 -> factor 0.25
  passive.push_back({-82.5, 10.0, L::Snow, 4.0});
  active.push_back({-82.5, 10.0, L::Snow, 1.0});
  // band [0,5): passive populated, active empty -> factor 0
  passive.push_back({2.5, 0.0, L::Snow, 3.0});
  // band [10,15): only active -> stays 1
  active.push_back({12.5, 0.0, L::Snow, 9.0});

  auto pg = accumulate_grid(passive, 1.0, 0.01);
  auto ag = accumulate_grid(active, 1.0, 0.01);
  auto scale = fit_zonal_scale(pg, ag, 5.0);

  CHECK(scale.factor_at(-87.0) == Approx(2.0));
  CHECK(scale.factor_at(-82.0) == Approx(0.25));
  CHECK(scale.factor_at(2.0) == 0.0);
  CHECK(scale.factor_at(12.0) == 1.0);
  CHECK(scale.factor_at(50.0) == 1.0);  // untouched band

  auto rescaled = apply_zonal_scale(scale, passive);
  CHECK(rescaled[0].rate == Approx(2.0));
  CHECK(rescaled[1].rate == Approx(1.0));
  CHECK(rescaled[2].rate == 0.0);
}

TEST_CASE("rescaled passive rows close onto the active zonal means") {
  std::mt19937_64 rng(9);
  std::uniform_real_distribution<double> lat(-60.0, 75.0), lon(-180.0, 179.9), u(0.2, 3.0);
  std::vector<GridSample> passive, active;
  for (int i = 0; i < 3000; ++i)
    passive.push_back({lat(rng), lon(rng), L::Snow, u(rng)});
  for (int i = 0; i < 2000; ++i)
    active.push_back({lat(rng), lon(rng), L::Snow, 1.7 * u(rng)});

  const double res = 0.5, band = 5.0;
  auto pg = accumulate_grid(passive, res, 0.01);
  auto ag = accumulate_grid(active, res, 0.01);
  auto scale = fit_zonal_scale(pg, ag, band);

  auto rg = accumulate_grid(apply_zonal_scale(scale, passive), res, 0.01);
  auto r_rows = zonal_mean(rg);
  auto a_rows = zonal_mean(ag);
  auto p_rows = zonal_mean(pg);

  // per band: mean over populated rows matches the active mean wherever the
  // passive side had signal
  std::size_t checked = 0;
  for (std::size_t b = 0; b < scale.factors.size(); ++b) {
    KahanSum rs, as, ps;
    std::size_t rn = 0, an = 0, pn = 0;
    for (std::size_t r = 0; r < rg.n_rows(); ++r) {
      if (scale.band_of(rg.lat_center(r)) != b) continue;
      if (r_rows[r]) { rs.add(*r_rows[r]); ++rn; }
      if (a_rows[r]) { as.add(*a_rows[r]); ++an; }
      if (p_rows[r]) { ps.add(*p_rows[r]); ++pn; }
    }
    if (pn == 0 || an == 0 || ps.value() == 0.0) continue;
    REQUIRE(rn == pn);
    CHECK(rs.value() / rn == Approx(as.value() / an).margin(1e-10));
    ++checked;
  }
  CHECK(checked >= 20);
}

TEST_CASE("zonal scale validation") {
  auto pg = accumulate_grid(std::vector<GridSample>{{0.0, 0.0, L::Snow, 1.0}}, 0.5, 0.01);
  REQUIRE_THROWS_AS(fit_zonal_scale(pg, pg, 5.3), ValidationError);
  auto other = accumulate_grid(std::vector<GridSample>{{0.0, 0.0, L::Snow, 1.0}}, 1.0, 0.01);
  REQUIRE_THROWS_AS(fit_zonal_scale(pg, other, 5.0), ValidationError);

  ZonalScale s;
  s.band_width = 7.0;  // does not divide 180
  s.factors.assign(25, 1.0);
  REQUIRE_THROWS_AS(s.validate(), ValidationError);
}

TEST_CASE("detection features are tb then ancillary state") {
  CoincidenceRecord r;
  r.tb = {201.0, 202.0, 203.0};
  r.ancillary = {0.1, 0.2, 12.0, 150.0, 281.5};
  auto v = assemble_detection_features(r);
  REQUIRE(v.size() == 8);
  CHECK(v[0] == 201.0);
  CHECK(v[2] == 203.0);
  CHECK(v[3] == 0.1);
  CHECK(v[4] == 0.2);
  CHECK(v[5] == 12.0);
  CHECK(v[6] == 150.0);
  CHECK(v[7] == 281.5);
}

TEST_CASE("estimation features append neighbor rates by ascending distance") {
  auto db = tiny_db({{{200, 200}, 0.0}, {{201, 201}, 2.0}, {{203, 203}, 0.5}, {{230, 230}, 4.0}});
  auto index = NeighborIndex::build(db, MetricKind::Euclidean);

  CoincidenceRecord q = ocean_record();
  q.tb = {200.5, 200.5};

  auto v = assemble_estimation_features(q, index, 3);
  REQUIRE(v.size() == 5);
  CHECK(v[0] == 200.5);
  CHECK(v[2] == 0.0);  // record 0, closest
  CHECK(v[3] == 2.0);  // record 1
  CHECK(v[4] == 0.5);  // record 2

  SECTION("self exclusion drops the query's own record") {
    CoincidenceRecord self = (*db)[0];
    auto w = assemble_estimation_features(self, index, 2, 0);
    CHECK(w[2] == 2.0);  // record 1 replaces the self match
    CHECK(w[3] == 0.5);
    auto kept = assemble_estimation_features(self, index, 2);
    CHECK(kept[2] == 0.0);  // without exclusion the self match leads
  }

  SECTION("k beyond the database is rejected") {
    REQUIRE_THROWS_AS(assemble_estimation_features(q, index, 5), ValidationError);
    REQUIRE_THROWS_AS(assemble_estimation_features(q, index, 4, 0), ValidationError);
    REQUIRE_NOTHROW(assemble_estimation_features(q, index, 4));
  }

  SECTION("channel mismatch is a query error") {
    CoincidenceRecord bad = q;
    bad.tb = {200.0, 200.0, 200.0};
    REQUIRE_THROWS_AS(assemble_estimation_features(bad, index, 2), QueryError);
  }
}

TEST_CASE("retrieval routes by detector argmax") {
  auto rec = ocean_record();

  SECTION("clear pixel short-circuits estimation") {
    auto suite = hand_suite({5.0, 0.0, 0.0}, 2.5, 0.5);
    auto px = retrieve_pixel(suite, rec);
    CHECK(px.label == L::None);
    CHECK(px.rate == 0.0);
    CHECK(px.estimated);
    CHECK(px.probs.sum() == Approx(1.0).margin(1e-12));
    CHECK(px.probs[0] > 0.9);
  }

  SECTION("rain pixel uses the rain estimator") {
    auto suite = hand_suite({0.0, 0.0, 5.0}, 2.5, 0.5);
    auto px = retrieve_pixel(suite, rec);
    CHECK(px.label == L::Rain);
    CHECK(px.rate == 2.5);
    CHECK(px.estimated);
  }

  SECTION("snow pixel uses the snow estimator") {
    auto suite = hand_suite({0.0, 5.0, 0.0}, 2.5, 0.5);
    auto px = retrieve_pixel(suite, rec);
    CHECK(px.label == L::Snow);
    CHECK(px.rate == 0.5);
  }

  SECTION("missing estimator flags the pixel unestimated") {
    auto suite = hand_suite({0.0, 0.0, 5.0}, std::nullopt, 0.5);
    auto px = retrieve_pixel(suite, rec);
    CHECK(px.label == L::Rain);
    CHECK_FALSE(px.estimated);
    CHECK(px.rate == 0.0);
  }

  SECTION("cdf correction applies to the estimated rate") {
    auto suite = hand_suite({0.0, 0.0, 5.0}, 1.75, std::nullopt);
    CdfMap map;
    map.source_knots = {1.0, 2.0};
    map.reference_knots = {2.0, 4.0};
    suite.cdf_rain = map;
    auto px = retrieve_pixel(suite, rec);
    CHECK(px.rate == Approx(3.5));
  }

  SECTION("negative raw estimates clamp to zero") {
    auto suite = hand_suite({0.0, 0.0, 5.0}, -3.0, std::nullopt);
    auto px = retrieve_pixel(suite, rec);
    CHECK(px.rate == 0.0);
  }

  SECTION("surface and channel mismatches are routed errors") {
    auto suite = hand_suite({5.0, 0.0, 0.0}, 1.0, 1.0);
    auto land = rec;
    land.surface = SurfaceClass::Land;
    REQUIRE_THROWS_AS(retrieve_pixel(suite, land), RoutingError);
    auto wide = rec;
    wide.tb = {200.0, 200.0, 200.0};
    REQUIRE_THROWS_AS(retrieve_pixel(suite, wide), QueryError);
  }
}

TEST_CASE("fusion truth table") {
  auto dpr = RadarSource::Dpr;
  auto cpr = RadarSource::Cpr;

  SECTION("both clear") {
    auto f = fuse(pixel(L::None, 0, dpr), pixel(L::None, 0, cpr));
    CHECK(f.label == FusedLabel::None);
    CHECK(f.rate == 0.0);
    CHECK(f.contributors.empty());
  }

  SECTION("single contributor carries its retrieval") {
    auto f = fuse(pixel(L::Rain, 3.0, dpr), pixel(L::None, 0, cpr));
    CHECK(f.label == FusedLabel::Rain);
    CHECK(f.rate == 3.0);
    REQUIRE(f.contributors.size() == 1);
    CHECK(f.contributors[0] == dpr);
  }

  SECTION("agreeing phases average") {
    auto f = fuse(pixel(L::Snow, 0.2, dpr), pixel(L::Snow, 0.4, cpr));
    CHECK(f.label == FusedLabel::Snow);
    CHECK(f.rate == Approx(0.3));
    CHECK(f.contributors.size() == 2);
  }

  SECTION("disagreeing phases mix") {
    auto f = fuse(pixel(L::Rain, 1.0, dpr), pixel(L::Snow, 0.5, cpr));
    CHECK(f.label == FusedLabel::Mixed);
    CHECK(f.rate == Approx(0.75));
  }

  SECTION("unestimated contributors are excluded from the mean") {
    auto f = fuse(pixel(L::Rain, 2.0, dpr), pixel(L::Rain, 0.0, cpr, false));
    CHECK(f.label == FusedLabel::Rain);
    CHECK(f.rate == 2.0);
    CHECK(f.contributors.size() == 2);

    auto g = fuse(pixel(L::Rain, 0.0, dpr, false), pixel(L::Rain, 0.0, cpr, false));
    CHECK(g.label == FusedLabel::Rain);
    CHECK(g.rate == 0.0);
  }

  SECTION("identical inputs are a fixpoint") {
    auto a = pixel(L::Rain, 1.25, dpr);
    auto f = fuse(a, a);
    CHECK(f.label == FusedLabel::Rain);
    CHECK(f.rate == 1.25);
  }
}

TEST_CASE("suite training wires detector, estimators, and maps together") {
  SyntheticConfig sc;
  sc.n_records = 2600;
  sc.surface_mix = {1.0, 0.0, 0.0};
  sc.seed = 31;
  auto db = generate_synthetic(sc);

  SuiteTrainConfig cfg;
  cfg.seed = 7;
  cfg.k = 5;
  cfg.detector_hidden = {24, 24};
  cfg.estimator_hidden = {24, 24};
  cfg.detector_train.max_epochs = 25;
  cfg.detector_train.learning_rate = 1e-3;
  cfg.detector_train.batch_size = 256;
  cfg.rain_train.max_epochs = 25;
  cfg.rain_train.learning_rate = 1e-3;
  cfg.rain_train.batch_size = 256;
  cfg.snow_train.max_epochs = 25;
  cfg.snow_train.learning_rate = 1e-3;
  cfg.snow_train.batch_size = 256;

  auto result = train_suite(db, cfg);
  const auto& suite = result.suite;

  CHECK(suite.surface == SurfaceClass::Ocean);
  CHECK(suite.rain_estimator.has_value());
  CHECK(suite.snow_estimator.has_value());
  CHECK_FALSE(result.detector_history.empty());
  CHECK_FALSE(result.rain_history.empty());
  CHECK(result.train_split->size() + result.val_split->size() + result.test_split->size() ==
        db.size());

  SECTION("pixel invariants on the held-out split") {
    for (std::size_t i = 0; i < std::min<std::size_t>(60, result.test_split->size()); ++i) {
      auto px = retrieve_pixel(suite, (*result.test_split)[i]);
      CHECK(px.probs.minCoeff() >= 0.0);
      CHECK(px.probs.sum() == Approx(1.0).margin(1e-9));
      Eigen::Index arg;
      px.probs.maxCoeff(&arg);
      CHECK(static_cast<PrecipLabel>(arg) == px.label);
      if (px.label == L::None) CHECK(px.rate == 0.0);
      if (px.label != L::None && px.estimated) CHECK(px.rate >= 0.0);
    }
  }

  SECTION("bundle round-trip preserves retrieval outputs exactly") {
    namespace fs = std::filesystem;
    auto dir = fs::temp_directory_path() / "diego_suite_rt";
    fs::remove_all(dir);
    save_suite(suite, dir);
    auto back = load_suite(dir);

    CHECK(back.k == suite.k);
    CHECK(back.source == suite.source);
    CHECK(back.cdf_rain.has_value() == suite.cdf_rain.has_value());
    for (std::size_t i = 0; i < std::min<std::size_t>(40, result.test_split->size()); ++i) {
      auto a = retrieve_pixel(suite, (*result.test_split)[i]);
      auto b = retrieve_pixel(back, (*result.test_split)[i]);
      CHECK(a.label == b.label);
      CHECK(a.rate == b.rate);
      CHECK((a.probs - b.probs).cwiseAbs().maxCoeff() == 0.0);
    }
    fs::remove_all(dir);
  }
}

TEST_CASE("cpr suites outside ocean drop the rain estimator") {
  SyntheticConfig sc;
  sc.n_records = 1500;
  sc.surface_mix = {0.0, 1.0, 0.0};
  sc.source = RadarSource::Cpr;
  sc.seed = 13;
  auto db = generate_synthetic(sc);

  SuiteTrainConfig cfg;
  cfg.k = 4;
  cfg.detector_hidden = {16};
  cfg.estimator_hidden = {16};
  for (auto* tc : {&cfg.detector_train, &cfg.rain_train, &cfg.snow_train}) {
    tc->max_epochs = 5;
    tc->learning_rate = 1e-3;
    tc->batch_size = 128;
  }

  auto result = train_suite(db, cfg);
  CHECK_FALSE(result.suite.rain_estimator.has_value());
  CHECK(result.suite.snow_estimator.has_value());
  CHECK(result.rain_history.empty());

  // a rain detection on this suite is reported unestimated
  std::size_t unestimated = 0;
  for (const auto& r : result.test_split->records()) {
    auto px = retrieve_pixel(result.suite, r);
    if (px.label == L::Rain) {
      CHECK_FALSE(px.estimated);
      CHECK(px.rate == 0.0);
      ++unestimated;
    }
  }
  INFO("rain detections seen: " << unestimated);
}

TEST_CASE("a phase absent from the data leaves its estimator out") {
  SyntheticConfig sc;
  sc.n_records = 1200;
  sc.class_priors = {0.75, 0.25, 0.0};  // no snow anywhere
  sc.surface_mix = {1.0, 0.0, 0.0};
  sc.seed = 17;
  auto db = generate_synthetic(sc);

  SuiteTrainConfig cfg;
  cfg.k = 4;
  cfg.detector_hidden = {16};
  cfg.estimator_hidden = {16};
  for (auto* tc : {&cfg.detector_train, &cfg.rain_train, &cfg.snow_train}) {
    tc->max_epochs = 5;
    tc->learning_rate = 1e-3;
    tc->batch_size = 128;
  }

  auto result = train_suite(db, cfg);
  CHECK(result.suite.rain_estimator.has_value());
  CHECK_FALSE(result.suite.snow_estimator.has_value());
  CHECK(result.snow_history.empty());
}

TEST_CASE("suite training demands a stratified database") {
  SyntheticConfig sc;
  sc.n_records = 600;
  sc.seed = 23;
  auto db = generate_synthetic(sc);  // mixed surfaces
  REQUIRE_FALSE(db.is_stratified());
  REQUIRE_THROWS_AS(train_suite(db, SuiteTrainConfig{}), SchemaError);
}

TEST_CASE("retrieval rows serialize with probabilities") {
  std::vector<RetrievalRow> rows;
  RetrievalRow row;
  row.lat = 1.5;
  row.lon = -2.25;
  row.ret = pixel(L::Rain, 3.125, RadarSource::Dpr);
  row.ret.probs = Eigen::Vector3d(0.125, 0.25, 0.625);
  rows.push_back(row);

  std::ostringstream os;
  write_retrievals_csv(os, rows);
  CHECK(os.str() ==
        "lat,lon,source,label,rate,estimated,p_none,p_snow,p_rain\n"
        "1.5,-2.25,dpr,rain,3.125,1,0.125,0.25,0.625\n");

  std::ostringstream fs;
  FusedRow frow;
  frow.lat = 1.0;
  frow.lon = 2.0;
  frow.fused.label = FusedLabel::Mixed;
  frow.fused.rate = 0.5;
  frow.fused.contributors = {RadarSource::Dpr, RadarSource::Cpr};
  write_fused_csv(fs, std::vector<FusedRow>{frow});
  CHECK(fs.str() ==
        "lat,lon,label,rate,contributors\n"
        "1,2,mixed,0.5,dpr+cpr\n");
}
