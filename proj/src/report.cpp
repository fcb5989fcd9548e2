#include "ranp/report.hpp"

#include <algorithm>
#include <cstdio>
#include <sstream>

#include "json.hpp"
#include "ranp/errors.hpp"

namespace ranp {

namespace {

constexpr double kBytesPerMb = 1024.0 * 1024.0 / 4.0;

std::string fixed(double v, int digits) {
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f", digits, v);
  return buf;
}

std::vector<std::string> split(std::string_view line, char sep) {
  std::vector<std::string> out;
  std::size_t start = 0;
  while (true) {
    const std::size_t at = line.find(sep, start);
    out.emplace_back(line.substr(start, at == std::string_view::npos ? std::string_view::npos : at - start));
    if (at == std::string_view::npos) break;
    start = at + 1;
  }
  return out;
}

const std::vector<std::string> kColumns = {"name",   "mode",          "sparsity",     "params",         "params_mb",
                                           "params_reduction", "flops", "gflops",     "flops_reduction", "memory",
                                           "memory_mb", "memory_reduction", "metric_name", "metric"};

}  // namespace

RunRecord make_run_record(std::string name, std::string mode, double sparsity, const ResourceProfile& profile) {
  RunRecord r;
  r.name = std::move(name);
  r.mode = std::move(mode);
  r.sparsity = sparsity;
  r.params = profile.total_params;
  r.flops = profile.total_flops;
  r.memory = profile.total_mem;
  return r;
}

std::string run_record_to_json(const RunRecord& run) {
  nlohmann::ordered_json doc;
  doc["name"] = run.name;
  doc["mode"] = run.mode;
  doc["sparsity"] = run.sparsity;
  doc["params"] = run.params;
  doc["flops"] = run.flops;
  doc["memory"] = run.memory;
  if (run.metric) {
    doc["metric_name"] = run.metric_name;
    doc["metric"] = *run.metric;
  }
  return doc.dump(2);
}

RunRecord run_record_from_json(std::string_view text) {
  try {
    auto doc = nlohmann::json::parse(text);
    RunRecord r;
    r.name = doc.value("name", std::string{});
    r.mode = doc.at("mode").get<std::string>();
    r.sparsity = doc.at("sparsity").get<double>();
    r.params = doc.at("params").get<std::uint64_t>();
    r.flops = doc.at("flops").get<std::uint64_t>();
    r.memory = doc.at("memory").get<std::uint64_t>();
    if (doc.contains("metric") && !doc["metric"].is_null()) {
      r.metric = doc["metric"].get<double>();
      r.metric_name = doc.value("metric_name", std::string{});
    }
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw ParseError(std::string("run record: ") + e.what());
  }
}

std::vector<ReportRow> compare_runs(const std::vector<RunRecord>& runs) {
  auto base = std::find_if(runs.begin(), runs.end(), [](const RunRecord& r) { return r.mode == "full"; });
  if (base == runs.end())
    base = std::find_if(runs.begin(), runs.end(), [](const RunRecord& r) { return r.sparsity == 0.0; });
  if (base == runs.end()) throw ConfigError("report: missing full baseline (a run with mode 'full' or sparsity 0)");
  std::vector<ReportRow> rows;
  for (const auto& r : runs) {
    ReportRow row{r, 0, 0, 0};
    row.params_reduction = reduction_percent(static_cast<double>(base->params), static_cast<double>(r.params));
    row.flops_reduction = reduction_percent(static_cast<double>(base->flops), static_cast<double>(r.flops));
    row.memory_reduction = reduction_percent(static_cast<double>(base->memory), static_cast<double>(r.memory));
    rows.push_back(std::move(row));
  }
  return rows;
}

std::string report_table(const std::vector<ReportRow>& rows) {
  std::ostringstream out;
  char line[256];
  std::snprintf(line, sizeof line, "%-16s %-10s %9s %10s %8s %10s %8s %11s %8s %8s\n", "run", "mode", "sparsity%",
                "params(MB)", "red%", "GFLOPs", "red%", "memory(MB)", "red%", "metric");
  out << line;
  for (const auto& row : rows) {
    const auto& r = row.run;
    std::snprintf(line, sizeof line, "%-16s %-10s %9.2f %10.4f %8.2f %10.5f %8.2f %11.4f %8.2f %8s\n", r.name.c_str(),
                  r.mode.c_str(), 100.0 * r.sparsity, static_cast<double>(r.params) / kBytesPerMb,
                  row.params_reduction, static_cast<double>(r.flops) * 1e-9, row.flops_reduction,
                  static_cast<double>(r.memory) / kBytesPerMb, row.memory_reduction,
                  r.metric ? fixed(*r.metric, 4).c_str() : "-");
    out << line;
  }
  return out.str();
}

std::string report_csv(const std::vector<ReportRow>& rows) {
  std::ostringstream out;
  out.precision(17);
  for (std::size_t i = 0; i < kColumns.size(); ++i) out << (i ? "," : "") << kColumns[i];
  out << '\n';
  for (const auto& row : rows) {
    const auto& r = row.run;
    for (const std::string* s : {&r.name, &r.mode, &r.metric_name})
      if (s->find_first_of(",\n") != std::string::npos)
        throw ContractError("report: run names and modes must not contain commas or newlines");
    out << r.name << ',' << r.mode << ',' << r.sparsity << ',' << r.params << ','
        << static_cast<double>(r.params) / kBytesPerMb << ',' << row.params_reduction << ',' << r.flops << ','
        << static_cast<double>(r.flops) * 1e-9 << ',' << row.flops_reduction << ',' << r.memory << ','
        << static_cast<double>(r.memory) / kBytesPerMb << ',' << row.memory_reduction << ',' << r.metric_name << ',';
    if (r.metric) out << *r.metric;
    out << '\n';
  }
  return out.str();
}

std::string report_json(const std::vector<ReportRow>& rows) {
  nlohmann::ordered_json doc = nlohmann::ordered_json::array();
  for (const auto& row : rows) {
    const auto& r = row.run;
    nlohmann::ordered_json j;
    j["name"] = r.name;
    j["mode"] = r.mode;
    j["sparsity"] = r.sparsity;
    j["params"] = r.params;
    j["params_reduction"] = row.params_reduction;
    j["flops"] = r.flops;
    j["flops_reduction"] = row.flops_reduction;
    j["memory"] = r.memory;
    j["memory_reduction"] = row.memory_reduction;
    j["metric_name"] = r.metric_name;
    j["metric"] = r.metric ? nlohmann::ordered_json(*r.metric) : nlohmann::ordered_json(nullptr);
    doc.push_back(std::move(j));
  }
  return doc.dump(2);
}

std::vector<ReportRow> report_from_csv(std::string_view text) {
  std::istringstream in{std::string(text)};
  std::string line;
  if (!std::getline(in, line) || split(line, ',') != kColumns) throw ParseError("report csv: unexpected header");
  std::vector<ReportRow> rows;
  int line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    const auto f = split(line, ',');
    if (f.size() != kColumns.size())
      throw ParseError("report csv line " + std::to_string(line_no) + ": expected " +
                       std::to_string(kColumns.size()) + " fields");
    try {
      ReportRow row;
      row.run.name = f[0];
      row.run.mode = f[1];
      row.run.sparsity = std::stod(f[2]);
      row.run.params = std::stoull(f[3]);
      row.params_reduction = std::stod(f[5]);
      row.run.flops = std::stoull(f[6]);
      row.flops_reduction = std::stod(f[8]);
      row.run.memory = std::stoull(f[9]);
      row.memory_reduction = std::stod(f[11]);
      row.run.metric_name = f[12];
      if (!f[13].empty()) row.run.metric = std::stod(f[13]);
      rows.push_back(std::move(row));
    } catch (const std::logic_error&) {
      throw ParseError("report csv line " + std::to_string(line_no) + ": bad number");
    }
  }
  return rows;
}

}  // namespace ranp
