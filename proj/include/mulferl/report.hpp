#pragma once

#include <filesystem>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace mulferl {

struct MetricsStream {
  std::vector<nlohmann::json> records;
  bool truncated = false;  // stopped at a malformed or schema-violating line
  std::string warning;
};

/// Empty string when `record` is a well-formed step record, otherwise the
/// first problem found. `batch_size`, when given, must equal the sum of the
/// branch counts.
std::string validate_step_record(const nlohmann::json& record, std::optional<std::size_t> batch_size = {});

/// Reads records up to the first bad line. Throws IoError if unreadable.
MetricsStream read_metrics(const std::filesystem::path& path);

/// Writes branch_losses.csv, regenerations.csv and turn_budget.csv into
/// `out_dir` from one or more runs (one metrics.jsonl each; a timing.jsonl
/// next to it adds wall-clock totals). Warnings go to `warn`. Returns the
/// number of runs that were only partially readable.
std::size_t write_report(std::span<const std::filesystem::path> metrics_paths, const std::filesystem::path& out_dir,
                         std::ostream& warn);

}  // namespace mulferl
