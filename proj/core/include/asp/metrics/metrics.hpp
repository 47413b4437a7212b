#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

namespace asp::metrics {

/// Arithmetic mean of the per-task accuracies.
double a_avg(std::span<const double> accuracies);
/// Performance drop A_0 - A_T.
double pd(double first, double last);
/// Harmonic mean of base- and new-class accuracy; 0 when both are 0.
double hacc(double base, double novel);

/// Accuracies are fractions in [0, 1]. `novel_accuracy[0]` is unused (no
/// new classes after the base task) and stored as 0.
struct MetricsReport {
  std::vector<double> accuracy;
  std::vector<double> base_accuracy;
  std::vector<double> novel_accuracy;
  double a_avg = 0.0;
  double pd = 0.0;
  std::optional<double> hacc;
  std::uint64_t config_hash = 0;
  std::uint64_t seed = 0;

  /// Derives a_avg, pd and hacc from the per-task vectors.
  void finalize();
  bool operator==(const MetricsReport&) const = default;
};

/// Percentage with one decimal, as in the result tables.
std::string percent(double fraction);

nlohmann::json to_json(const MetricsReport& report);
MetricsReport report_from_json(const nlohmann::json& j);
/// Header plus one row per task: task, A_t, A_o, A_n.
std::string curve_csv(const MetricsReport& report);

/// Writes `report.json` and `curve.csv` into `dir`.
void emit(const MetricsReport& report, const std::filesystem::path& dir);

/// 64-bit FNV-1a.
std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed = 0xcbf29ce484222325ull);

}  // namespace asp::metrics
