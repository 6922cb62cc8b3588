#pragma once

// JSON and CSV export of metrics records.
//
// CSV columns: name,seed,r1,r5,r10,mdr,meanr,final_loss,wall_clock_s,config_hash

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "mugstan/retrieval.hpp"

namespace mugstan {

inline constexpr const char* kReportColumns = "name,seed,r1,r5,r10,mdr,meanr,final_loss,wall_clock_s,config_hash";

inline nlohmann::json to_json(const MetricsRecord& r) {
  return {{"name", r.name},   {"seed", r.seed},   {"r1", r.r1},
          {"r5", r.r5},       {"r10", r.r10},     {"mdr", r.mdr},
          {"meanr", r.meanr}, {"final_loss", r.final_loss}, {"wall_clock_s", r.wall_clock_s},
          {"config_hash", r.config_hash}, {"loss_curve", r.loss_curve}};
}

inline MetricsRecord record_from_json(const nlohmann::json& j) {
  MetricsRecord r;
  r.name = j.at("name").get<std::string>();
  r.seed = j.at("seed").get<std::int64_t>();
  r.r1 = j.at("r1").get<double>();
  r.r5 = j.at("r5").get<double>();
  r.r10 = j.at("r10").get<double>();
  r.mdr = j.at("mdr").get<double>();
  r.meanr = j.at("meanr").get<double>();
  r.final_loss = j.at("final_loss").get<double>();
  r.wall_clock_s = j.at("wall_clock_s").get<double>();
  r.config_hash = j.at("config_hash").get<std::string>();
  r.loss_curve = j.value("loss_curve", std::vector<double>{});
  return r;
}

namespace detail {

inline std::string fmt_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::string csv_field(const std::string& s) {
  if (s.find_first_of(",\"\n") == std::string::npos) return s;
  std::string out = "\"";
  for (char c : s) {
    if (c == '"') out += '"';
    out += c;
  }
  return out + '"';
}

}  // namespace detail

inline std::string records_to_csv(const std::vector<MetricsRecord>& records) {
  std::ostringstream os;
  os << kReportColumns << '\n';
  for (const auto& r : records) {
    os << detail::csv_field(r.name) << ',' << r.seed;
    for (double v : {r.r1, r.r5, r.r10, r.mdr, r.meanr, r.final_loss, r.wall_clock_s}) os << ',' << detail::fmt_double(v);
    os << ',' << detail::csv_field(r.config_hash) << '\n';
  }
  return os.str();
}

inline std::string records_to_json(const std::vector<MetricsRecord>& records) {
  nlohmann::json j = {{"columns", kReportColumns}, {"records", nlohmann::json::array()}};
  for (const auto& r : records) j["records"].push_back(to_json(r));
  return j.dump(2) + "\n";
}

inline std::vector<MetricsRecord> records_from_json(const std::string& text) {
  const auto j = nlohmann::json::parse(text);
  std::vector<MetricsRecord> out;
  for (const auto& r : j.at("records")) out.push_back(record_from_json(r));
  return out;
}

struct ReportPaths {
  std::filesystem::path json, csv;
};

/// Writes `<stem>.json` and `<stem>.csv`.
inline ReportPaths export_report(const std::vector<MetricsRecord>& records, const std::filesystem::path& stem) {
  if (records.empty()) throw ContractError("export_report: no records");
  if (stem.has_parent_path()) {
    std::error_code ec;
    std::filesystem::create_directories(stem.parent_path(), ec);
    if (ec) throw IoError("cannot create " + stem.parent_path().string() + ": " + ec.message());
  }
  ReportPaths p{stem.string() + ".json", stem.string() + ".csv"};
  auto write = [](const std::filesystem::path& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << text;
    if (!out) throw IoError("write failed for " + path.string());
  };
  write(p.json, records_to_json(records));
  write(p.csv, records_to_csv(records));
  return p;
}

}  // namespace mugstan
