#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "diego/types.hpp"
#include "diego/util.hpp"

namespace diego {

enum class DbFormat { Csv, Binary };

constexpr char kDbMagic[4] = {'D', 'I', 'E', 'G'};
constexpr std::uint16_t kDbFormatVersion = 1;

namespace detail {

inline std::string tb_column_name(std::size_t index_1based, std::size_t n_channels) {
  int width = n_channels >= 100 ? 3 : 2;
  char buf[16];
  std::snprintf(buf, sizeof(buf), "tb_%0*zu", width, index_1based);
  return buf;
}

}  // namespace detail

inline void save_csv(const PrecipDatabase& db, std::ostream& os) {
  if (!db.is_stratified()) throw SchemaError("cannot serialize a mixed-surface database");
  const std::size_t n = db.n_channels();
  for (std::size_t c = 1; c <= n; ++c) os << detail::tb_column_name(c, n) << ',';
  os << "lwp,iwp,wvp,cape,t2m,surface,label,rate,lat,lon,source\n";
  for (const auto& r : db.records()) {
    for (double v : r.tb) os << format_double(v) << ',';
    const auto& a = r.ancillary;
    os << format_double(a.lwp) << ',' << format_double(a.iwp) << ',' << format_double(a.wvp)
       << ',' << format_double(a.cape) << ',' << format_double(a.t2m) << ','
       << to_string(r.surface) << ',' << to_string(r.label) << ',' << format_double(r.rate)
       << ',' << format_double(r.lat) << ',' << format_double(r.lon) << ','
       << to_string(r.source) << '\n';
  }
}

inline PrecipDatabase load_csv(std::istream& is) {
  std::string line;
  if (!std::getline(is, line)) throw ParseError("empty CSV file");
  auto header = split_csv_line(trim(line));
  std::size_t n_channels = 0;
  while (n_channels < header.size() && header[n_channels].substr(0, 3) == "tb_") ++n_channels;
  if (n_channels == 0) throw ParseError("CSV header has no tb_* columns");
  const std::size_t expected = n_channels + 11;
  if (header.size() != expected)
    throw ParseError("CSV header has " + std::to_string(header.size()) + " columns, expected " +
                     std::to_string(expected));

  std::vector<CoincidenceRecord> records;
  std::size_t row = 1;
  while (std::getline(is, line)) {
    ++row;
    auto t = trim(line);
    if (t.empty()) continue;
    auto fields = split_csv_line(t);
    if (fields.size() != expected)
      throw ParseError("row " + std::to_string(row) + ": expected " + std::to_string(expected) +
                       " fields, got " + std::to_string(fields.size()));
    try {
      CoincidenceRecord r;
      r.tb.resize(n_channels);
      std::size_t f = 0;
      for (std::size_t c = 0; c < n_channels; ++c) r.tb[c] = parse_double(fields[f++], "tb");
      r.ancillary.lwp = parse_double(fields[f++], "lwp");
      r.ancillary.iwp = parse_double(fields[f++], "iwp");
      r.ancillary.wvp = parse_double(fields[f++], "wvp");
      r.ancillary.cape = parse_double(fields[f++], "cape");
      r.ancillary.t2m = parse_double(fields[f++], "t2m");
      r.surface = surface_from_string(fields[f++]);
      r.label = label_from_string(fields[f++]);
      r.rate = parse_double(fields[f++], "rate");
      r.lat = parse_double(fields[f++], "lat");
      r.lon = parse_double(fields[f++], "lon");
      r.source = source_from_string(fields[f++]);
      r.validate();
      records.push_back(std::move(r));
    } catch (const ParseError& e) {
      throw ParseError("row " + std::to_string(row) + ": " + e.what());
    } catch (const ValidationError& e) {
      throw ValidationError("row " + std::to_string(row) + ": " + e.what());
    }
  }
  auto db = PrecipDatabase::from_records(std::move(records));
  if (!db.is_stratified()) throw SchemaError("file mixes surface classes");
  return db;
}

inline void save_binary(const PrecipDatabase& db, std::ostream& os) {
  if (!db.is_stratified()) throw SchemaError("cannot serialize a mixed-surface database");
  os.write(kDbMagic, 4);
  write_le<std::uint16_t>(os, kDbFormatVersion);
  write_le<std::uint16_t>(os, static_cast<std::uint16_t>(db.n_channels()));
  write_le<std::uint64_t>(os, db.size());
  for (const auto& r : db.records()) {
    for (double v : r.tb) write_le(os, v);
    write_le(os, r.ancillary.lwp);
    write_le(os, r.ancillary.iwp);
    write_le(os, r.ancillary.wvp);
    write_le(os, r.ancillary.cape);
    write_le(os, r.ancillary.t2m);
    write_le<std::uint8_t>(os, static_cast<std::uint8_t>(r.surface));
    write_le<std::uint8_t>(os, static_cast<std::uint8_t>(r.label));
    write_le(os, r.rate);
    write_le(os, r.lat);
    write_le(os, r.lon);
    write_le<std::uint8_t>(os, static_cast<std::uint8_t>(r.source));
  }
}

inline PrecipDatabase load_binary(std::istream& is) {
  char magic[4];
  is.read(magic, 4);
  if (!is || std::memcmp(magic, kDbMagic, 4) != 0) throw ParseError("bad magic: not a database file");
  auto version = read_le<std::uint16_t>(is);
  if (version != kDbFormatVersion)
    throw ParseError("unsupported database format version " + std::to_string(version));
  auto n_channels = read_le<std::uint16_t>(is);
  auto count = read_le<std::uint64_t>(is);
  std::vector<CoincidenceRecord> records;
  records.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    CoincidenceRecord r;
    r.tb.resize(n_channels);
    for (std::size_t c = 0; c < n_channels; ++c) r.tb[c] = read_le<double>(is);
    r.ancillary.lwp = read_le<double>(is);
    r.ancillary.iwp = read_le<double>(is);
    r.ancillary.wvp = read_le<double>(is);
    r.ancillary.cape = read_le<double>(is);
    r.ancillary.t2m = read_le<double>(is);
    auto surface = read_le<std::uint8_t>(is);
    auto label = read_le<std::uint8_t>(is);
    if (surface > 2) throw ParseError("record " + std::to_string(i) + ": bad surface code");
    if (label > 2) throw ParseError("record " + std::to_string(i) + ": bad label code");
    r.surface = static_cast<SurfaceClass>(surface);
    r.label = static_cast<PrecipLabel>(label);
    r.rate = read_le<double>(is);
    r.lat = read_le<double>(is);
    r.lon = read_le<double>(is);
    auto source = read_le<std::uint8_t>(is);
    if (source > 1) throw ParseError("record " + std::to_string(i) + ": bad source code");
    r.source = static_cast<RadarSource>(source);
    try {
      r.validate();
    } catch (const ValidationError& e) {
      throw ValidationError("record " + std::to_string(i) + ": " + e.what());
    }
    records.push_back(std::move(r));
  }
  auto db = PrecipDatabase::from_records(std::move(records));
  if (!db.is_stratified()) throw SchemaError("file mixes surface classes");
  return db;
}

inline void save_database(const PrecipDatabase& db, const std::filesystem::path& path, DbFormat format) {
  std::ofstream os(path, format == DbFormat::Binary ? std::ios::binary : std::ios::out);
  if (!os) throw IoError("cannot open for writing: " + path.string());
  if (format == DbFormat::Csv) save_csv(db, os);
  else save_binary(db, os);
  os.flush();
  if (!os) throw IoError("write failed: " + path.string());
}

inline PrecipDatabase load_database(const std::filesystem::path& path, DbFormat format) {
  std::ifstream is(path, format == DbFormat::Binary ? std::ios::binary : std::ios::in);
  if (!is) throw IoError("cannot open: " + path.string());
  return format == DbFormat::Csv ? load_csv(is) : load_binary(is);
}

// Infers the format from the extension (.csv -> CSV, anything else binary).
inline DbFormat format_for_path(const std::filesystem::path& path) {
  return path.extension() == ".csv" ? DbFormat::Csv : DbFormat::Binary;
}

// True for a well-formed file carrying zero records (header-only CSV or a
// binary file with record count 0). Databases themselves are never empty, so
// callers use this probe to short-circuit on empty inputs.
inline bool database_file_empty(const std::filesystem::path& path, DbFormat format) {
  std::ifstream is(path, format == DbFormat::Binary ? std::ios::binary : std::ios::in);
  if (!is) throw IoError("cannot open: " + path.string());
  if (format == DbFormat::Csv) {
    std::string line;
    if (!std::getline(is, line)) return true;  // no header at all
    while (std::getline(is, line))
      if (!trim(line).empty()) return false;
    return true;
  }
  char magic[4];
  is.read(magic, sizeof(magic));
  if (!is || !std::equal(magic, magic + 4, kDbMagic)) return false;
  read_le<std::uint16_t>(is);  // version
  read_le<std::uint16_t>(is);  // n_channels
  return read_le<std::uint64_t>(is) == 0;
}

}  // namespace diego
