#include <catch2/catch_amalgamated.hpp>

#include <bit>
#include <cstdint>
#include <set>
#include <sstream>

#include <diego/database_io.hpp>
#include <diego/synthetic.hpp>
#include <diego/types.hpp>
#include <diego/util.hpp>

using namespace diego;
using Catch::Approx;

namespace {

CoincidenceRecord make_record(PrecipLabel label = PrecipLabel::None, double rate = 0.0,
                              SurfaceClass surface = SurfaceClass::Ocean,
                              RadarSource source = RadarSource::Dpr) {
  CoincidenceRecord r;
  r.tb.assign(13, 250.0);
  r.surface = surface;
  r.label = label;
  r.rate = rate;
  r.lat = 12.5;
  r.lon = -45.25;
  r.source = source;
  return r;
}

bool same_bits(double a, double b) {
  return std::bit_cast<std::uint64_t>(a) == std::bit_cast<std::uint64_t>(b);
}

}  // namespace

TEST_CASE("record validation enforces the rate/label pairing") {
  auto r = make_record();
  REQUIRE_NOTHROW(r.validate());

  r.rate = 0.5;
  REQUIRE_THROWS_AS(r.validate(), ValidationError);

  r.label = PrecipLabel::Rain;
  REQUIRE_NOTHROW(r.validate());

  r.rate = 0.0;
  REQUIRE_THROWS_AS(r.validate(), ValidationError);
}

TEST_CASE("record validation bounds tb, coordinates, and ancillary fields") {
  auto r = make_record();
  r.tb[4] = 49.9;
  REQUIRE_THROWS_AS(r.validate(), ValidationError);
  r.tb[4] = 350.1;
  REQUIRE_THROWS_AS(r.validate(), ValidationError);
  r.tb[4] = 350.0;
  REQUIRE_NOTHROW(r.validate());

  r.lat = 90.5;
  REQUIRE_THROWS_AS(r.validate(), ValidationError);
  r.lat = 0.0;
  r.lon = 180.0;  // east edge is open
  REQUIRE_THROWS_AS(r.validate(), ValidationError);
  r.lon = -180.0;
  REQUIRE_NOTHROW(r.validate());

  r.ancillary.cape = -1.0;
  REQUIRE_THROWS_AS(r.validate(), ValidationError);
  r.ancillary.cape = 0.0;
  r.ancillary.t2m = 179.0;
  REQUIRE_THROWS_AS(r.validate(), ValidationError);
}

TEST_CASE("database construction rejects inconsistent collections") {
  REQUIRE_THROWS_AS(PrecipDatabase::from_records({}), ValidationError);

  auto a = make_record();
  auto b = make_record();
  b.tb.resize(9, 250.0);
  REQUIRE_THROWS_AS(PrecipDatabase::from_records({a, b}), ValidationError);

  b = make_record(PrecipLabel::None, 0.0, SurfaceClass::Ocean, RadarSource::Cpr);
  REQUIRE_THROWS_AS(PrecipDatabase::from_records({a, b}), SchemaError);
}

TEST_CASE("surface filtering keeps only the requested class and preserves order") {
  std::vector<CoincidenceRecord> recs;
  for (int i = 0; i < 30; ++i) {
    auto r = make_record(PrecipLabel::None, 0.0,
                         i % 3 == 0 ? SurfaceClass::Land : SurfaceClass::Ocean);
    r.lat = i;  // identity marker
    recs.push_back(r);
  }
  auto db = PrecipDatabase::from_records(recs);
  REQUIRE_FALSE(db.is_stratified());
  REQUIRE_THROWS_AS(db.stratum(), SchemaError);

  auto land = db.filter_surface(SurfaceClass::Land);
  REQUIRE(land.is_stratified());
  REQUIRE(land.stratum() == SurfaceClass::Land);
  REQUIRE(land.size() == 10);
  for (std::size_t i = 0; i < land.size(); ++i) {
    CHECK(land[i].surface == SurfaceClass::Land);
    CHECK(land[i].lat == 3.0 * static_cast<double>(i));
  }

  REQUIRE_THROWS_AS(db.filter_surface(SurfaceClass::Coast), ValidationError);
}

TEST_CASE("split sizes follow floor arithmetic with the remainder on train") {
  std::vector<CoincidenceRecord> recs;
  for (int i = 0; i < 103; ++i) {
    auto r = make_record();
    r.lon = i;
    recs.push_back(r);
  }
  auto db = PrecipDatabase::from_records(recs);

  auto [train, val, test] = split_database(db, {0.7, 0.15, 0.15}, 42);
  CHECK(val.size() == 15);   // floor(103 * 0.15)
  CHECK(test.size() == 15);
  CHECK(train.size() == 73); // remainder

  std::multiset<double> seen;
  for (const auto* part : {&train, &val, &test})
    for (const auto& r : part->records()) seen.insert(r.lon);
  std::multiset<double> expected;
  for (int i = 0; i < 103; ++i) expected.insert(i);
  CHECK(seen == expected);
}

TEST_CASE("split is seed-deterministic and seed-sensitive") {
  std::vector<CoincidenceRecord> recs;
  for (int i = 0; i < 60; ++i) {
    auto r = make_record();
    r.lon = i;
    recs.push_back(r);
  }
  auto db = PrecipDatabase::from_records(recs);

  auto first = split_database(db, {0.7, 0.15, 0.15}, 5);
  auto second = split_database(db, {0.7, 0.15, 0.15}, 5);
  auto other = split_database(db, {0.7, 0.15, 0.15}, 6);

  auto lons = [](const PrecipDatabase& d) {
    std::vector<double> out;
    for (const auto& r : d.records()) out.push_back(r.lon);
    return out;
  };
  CHECK(lons(std::get<0>(first)) == lons(std::get<0>(second)));
  CHECK(lons(std::get<1>(first)) == lons(std::get<1>(second)));
  CHECK(lons(std::get<0>(first)) != lons(std::get<0>(other)));
  CHECK(std::get<0>(other).size() == 42);
}

TEST_CASE("split rejects bad fractions") {
  auto db = PrecipDatabase::from_records({make_record()});
  REQUIRE_THROWS_AS(split_database(db, {0.7, 0.2, 0.2}, 1), ConfigError);
  REQUIRE_THROWS_AS(split_database(db, {1.0, 0.0, 0.0}, 1), ConfigError);
}

TEST_CASE("degenerate priors produce an all-clear database") {
  SyntheticConfig cfg;
  cfg.n_records = 500;
  cfg.class_priors = {1.0, 0.0, 0.0};
  cfg.seed = 3;
  auto db = generate_synthetic(cfg);
  REQUIRE(db.size() == 500);
  for (const auto& r : db.records()) {
    CHECK(r.label == PrecipLabel::None);
    CHECK(r.rate == 0.0);
  }
}

TEST_CASE("synthetic label fractions stay inside binomial bounds") {
  SyntheticConfig cfg;
  cfg.n_records = 10000;
  cfg.class_priors = {0.7, 0.2, 0.1};
  cfg.seed = 11;
  auto db = generate_synthetic(cfg);
  auto counts = db.label_counts();

  // class_priors order is (none, rain, snow); label enum packs snow before rain
  const double n = 10000.0;
  auto inside = [&](std::size_t count, double p) {
    double sigma = std::sqrt(n * p * (1.0 - p));
    return std::abs(static_cast<double>(count) - n * p) <= 3.0 * sigma;
  };
  CHECK(inside(counts[static_cast<int>(PrecipLabel::None)], 0.7));
  CHECK(inside(counts[static_cast<int>(PrecipLabel::Rain)], 0.2));
  CHECK(inside(counts[static_cast<int>(PrecipLabel::Snow)], 0.1));

  auto surfaces = db.surface_counts();
  CHECK(inside(surfaces[static_cast<int>(SurfaceClass::Ocean)], 0.5));
  CHECK(inside(surfaces[static_cast<int>(SurfaceClass::Land)], 0.3));
  CHECK(inside(surfaces[static_cast<int>(SurfaceClass::Coast)], 0.2));
}

TEST_CASE("synthetic generation is seed-deterministic") {
  SyntheticConfig cfg;
  cfg.n_records = 400;
  cfg.seed = 99;
  auto a = generate_synthetic(cfg);
  auto b = generate_synthetic(cfg);
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i].label == b[i].label);
    CHECK(same_bits(a[i].rate, b[i].rate));
    CHECK(same_bits(a[i].lat, b[i].lat));
    for (std::size_t c = 0; c < a[i].tb.size(); ++c) CHECK(same_bits(a[i].tb[c], b[i].tb[c]));
  }
}

TEST_CASE("noise-free forward model warms low channels with rain and cools high ones with snow") {
  SyntheticConfig cfg;
  auto freqs = channel_frequencies(cfg.n_channels);

  std::size_t low = 0;             // 10.65 GHz
  std::size_t high = cfg.n_channels - 1;
  REQUIRE(freqs[low] <= 37.0);
  REQUIRE(freqs[high] >= 89.0);

  double prev_low = -1.0, prev_high = 1e9;
  for (double rate : {0.1, 0.5, 1.0, 2.0, 5.0, 10.0}) {
    double tb_low =
        clean_tb(cfg, SurfaceClass::Ocean, PrecipLabel::Rain, rate, freqs[low]);
    double tb_high =
        clean_tb(cfg, SurfaceClass::Ocean, PrecipLabel::Snow, rate, freqs[high]);
    CHECK(tb_low > prev_low);
    CHECK(tb_high < prev_high);
    prev_low = tb_low;
    prev_high = tb_high;
  }
}

TEST_CASE("generated rates below the occurrence threshold are cleared") {
  SyntheticConfig cfg;
  cfg.n_records = 5000;
  cfg.seed = 21;
  // push the snow distribution down so sub-threshold draws are common
  cfg.snow_shape = 0.3;
  cfg.snow_scale = 0.05;
  auto db = generate_synthetic(cfg);
  for (const auto& r : db.records()) {
    if (r.label == PrecipLabel::None)
      CHECK(r.rate == 0.0);
    else
      CHECK(r.rate >= kOccurrenceThreshold);
  }
}

TEST_CASE("csv round-trip is bit-exact") {
  SyntheticConfig cfg;
  cfg.n_records = 200;
  cfg.seed = 5;
  auto db = generate_synthetic(cfg).filter_surface(SurfaceClass::Ocean);

  std::stringstream buf;
  save_csv(db, buf);
  auto back = load_csv(buf);

  REQUIRE(back.size() == db.size());
  REQUIRE(back.n_channels() == db.n_channels());
  for (std::size_t i = 0; i < db.size(); ++i) {
    const auto& a = db[i];
    const auto& b = back[i];
    CHECK(a.surface == b.surface);
    CHECK(a.label == b.label);
    CHECK(a.source == b.source);
    CHECK(same_bits(a.rate, b.rate));
    CHECK(same_bits(a.lat, b.lat));
    CHECK(same_bits(a.lon, b.lon));
    CHECK(same_bits(a.ancillary.lwp, b.ancillary.lwp));
    CHECK(same_bits(a.ancillary.cape, b.ancillary.cape));
    for (std::size_t c = 0; c < a.tb.size(); ++c) CHECK(same_bits(a.tb[c], b.tb[c]));
  }
}

TEST_CASE("binary round-trip is bit-exact") {
  SyntheticConfig cfg;
  cfg.n_records = 200;
  cfg.seed = 6;
  auto db = generate_synthetic(cfg).filter_surface(SurfaceClass::Land);

  std::stringstream buf(std::ios::in | std::ios::out | std::ios::binary);
  save_binary(db, buf);
  auto back = load_binary(buf);

  REQUIRE(back.size() == db.size());
  for (std::size_t i = 0; i < db.size(); ++i) {
    CHECK(db[i].label == back[i].label);
    CHECK(same_bits(db[i].rate, back[i].rate));
    CHECK(same_bits(db[i].ancillary.t2m, back[i].ancillary.t2m));
    for (std::size_t c = 0; c < db[i].tb.size(); ++c)
      CHECK(same_bits(db[i].tb[c], back[i].tb[c]));
  }
}

TEST_CASE("csv loader reports the offending row") {
  std::string header =
      "tb_01,tb_02,lwp,iwp,wvp,cape,t2m,surface,label,rate,lat,lon,source\n";
  std::string good = "250,251,0,0,1,0,280,ocean,none,0,10,20,dpr\n";

  SECTION("field count mismatch") {
    std::stringstream buf(header + good + "250,251,0,0,1,0,280,ocean,none,0,10,dpr\n");
    REQUIRE_THROWS_WITH(load_csv(buf), Catch::Matchers::ContainsSubstring("row 3"));
  }
  SECTION("rate/label inconsistency") {
    std::stringstream buf(header + "250,251,0,0,1,0,280,ocean,none,0.5,10,20,dpr\n");
    REQUIRE_THROWS_AS(load_csv(buf), ValidationError);
  }
  SECTION("unparseable number") {
    std::stringstream buf(header + "250,x,0,0,1,0,280,ocean,none,0,10,20,dpr\n");
    REQUIRE_THROWS_WITH(load_csv(buf), Catch::Matchers::ContainsSubstring("row 2"));
  }
  SECTION("mixed surfaces") {
    std::stringstream buf(header + good + "250,251,0,0,1,0,280,land,none,0,10,20,dpr\n");
    REQUIRE_THROWS_AS(load_csv(buf), SchemaError);
  }
  SECTION("mixed sources") {
    std::stringstream buf(header + good + "250,251,0,0,1,0,280,ocean,none,0,10,20,cpr\n");
    REQUIRE_THROWS_AS(load_csv(buf), SchemaError);
  }
  SECTION("missing tb columns") {
    std::stringstream buf("lwp,iwp\n");
    REQUIRE_THROWS_AS(load_csv(buf), ParseError);
  }
}

TEST_CASE("binary loader rejects foreign and truncated files") {
  std::stringstream buf(std::ios::in | std::ios::out | std::ios::binary);
  buf << "PK\x03\x04 not ours";
  REQUIRE_THROWS_AS(load_binary(buf), ParseError);
}

TEST_CASE("empty-file probe distinguishes header-only inputs") {
  namespace fs = std::filesystem;
  auto dir = fs::temp_directory_path() / "diego_empty_probe";
  fs::create_directories(dir);

  auto csv = dir / "empty.csv";
  std::ofstream(csv) << "tb_01,lwp,iwp,wvp,cape,t2m,surface,label,rate,lat,lon,source\n";
  CHECK(database_file_empty(csv, DbFormat::Csv));

  auto full = dir / "full.csv";
  std::ofstream(full) << "tb_01,lwp,iwp,wvp,cape,t2m,surface,label,rate,lat,lon,source\n"
                      << "250,0,0,1,0,280,ocean,none,0,10,20,dpr\n";
  CHECK_FALSE(database_file_empty(full, DbFormat::Csv));

  auto bin = dir / "empty.bin";
  {
    std::ofstream os(bin, std::ios::binary);
    os.write(kDbMagic, 4);
    write_le<std::uint16_t>(os, 1);
    write_le<std::uint16_t>(os, 13);
    write_le<std::uint64_t>(os, 0);
  }
  CHECK(database_file_empty(bin, DbFormat::Binary));
  fs::remove_all(dir);
}

TEST_CASE("quantile interpolation matches the linear-index rule") {
  std::vector<double> v{10, 20, 30, 40};
  CHECK(quantile_sorted(v, 0.0) == 10.0);
  CHECK(quantile_sorted(v, 1.0) == 40.0);
  CHECK(quantile_sorted(v, 0.5) == Approx(25.0));   // h = 1.5
  CHECK(quantile_sorted(v, 0.25) == Approx(17.5));  // h = 0.75
  std::vector<double> one{7.0};
  CHECK(quantile_sorted(one, 0.3) == 7.0);
}

TEST_CASE("compensated summation keeps sub-ulp contributions") {
  KahanSum ks;
  ks.add(1e8);
  double naive = 1e8;
  for (int i = 0; i < 1000000; ++i) {
    ks.add(5e-9);
    naive += 5e-9;
  }
  CHECK(naive == 1e8);  // each term is below half an ulp of the running sum
  CHECK(ks.value() == Approx(1e8 + 0.005).epsilon(1e-12));

  KahanSum left, right;
  for (int i = 0; i < 1000; ++i) (i % 2 ? left : right).add(0.1);
  left.merge(right);
  CHECK(left.value() == Approx(100.0).epsilon(1e-12));
}

TEST_CASE("seed mixing separates nearby streams") {
  auto a = mix_seed(1, 0);
  auto b = mix_seed(1, 1);
  auto c = mix_seed(2, 0);
  CHECK(a != b);
  CHECK(a != c);
  CHECK(b != c);
  CHECK(mix_seed(1, 0) == a);
}

TEST_CASE("number formatting survives a parse round-trip") {
  for (double v : {0.1, 1.0 / 3.0, 1e-300, 123456789.123456789, -2.5e17, 0.0}) {
    auto s = format_double(v);
    CHECK(same_bits(parse_double(s, "v"), v));
  }
  REQUIRE_THROWS_AS(parse_double("1.2.3", "v"), ParseError);
  REQUIRE_THROWS_AS(parse_double("", "v"), ParseError);
  REQUIRE_THROWS_AS(parse_double("12 ", "v"), ParseError);
}
