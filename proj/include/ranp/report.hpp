#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "ranp/resources.hpp"

namespace ranp {

// One pruning or training run, as written by `ranp prune` / `ranp train`.
struct RunRecord {
  std::string name;
  std::string mode;  // "full" for the unpruned baseline
  double sparsity = 0.0;
  std::uint64_t params = 0;
  std::uint64_t flops = 0;
  std::uint64_t memory = 0;  // activation elements, batch 1
  std::string metric_name;   // "miou" | "top1" | empty
  std::optional<double> metric;

  bool operator==(const RunRecord&) const = default;
};

RunRecord make_run_record(std::string name, std::string mode, double sparsity, const ResourceProfile& profile);

std::string run_record_to_json(const RunRecord& run);
RunRecord run_record_from_json(std::string_view text);

struct ReportRow {
  RunRecord run;
  double params_reduction = 0.0;  // percent against the baseline
  double flops_reduction = 0.0;
  double memory_reduction = 0.0;

  bool operator==(const ReportRow&) const = default;
};

// Reductions are taken against the run with mode "full" (or, failing that,
// the first run at sparsity 0). Throws ConfigError when there is none.
std::vector<ReportRow> compare_runs(const std::vector<RunRecord>& runs);

std::string report_table(const std::vector<ReportRow>& rows);
std::string report_csv(const std::vector<ReportRow>& rows);
std::string report_json(const std::vector<ReportRow>& rows);
std::vector<ReportRow> report_from_csv(std::string_view text);

}  // namespace ranp
