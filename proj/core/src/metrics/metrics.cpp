#include "asp/metrics/metrics.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "asp/errors.hpp"

namespace asp::metrics {

double a_avg(std::span<const double> accuracies) {
  if (accuracies.empty()) throw ContractError("a_avg: no accuracies");
  double sum = 0.0;
  for (double a : accuracies) sum += a;
  return sum / static_cast<double>(accuracies.size());
}

double pd(double first, double last) { return first - last; }

double hacc(double base, double novel) {
  if (base < 0.0 || novel < 0.0) throw ContractError("hacc: accuracies must be non-negative");
  if (base + novel == 0.0) return 0.0;
  return 2.0 * base * novel / (base + novel);
}

void MetricsReport::finalize() {
  if (accuracy.empty()) throw ContractError("MetricsReport: no tasks evaluated");
  if (base_accuracy.size() != accuracy.size() || novel_accuracy.size() != accuracy.size()) {
    throw DimensionError("MetricsReport: per-group accuracy vectors do not match the task count");
  }
  a_avg = metrics::a_avg(accuracy);
  if (accuracy.size() == 1) {
    pd = 0.0;
    hacc.reset();
  } else {
    pd = metrics::pd(accuracy.front(), accuracy.back());
    hacc = metrics::hacc(base_accuracy.back(), novel_accuracy.back());
  }
}

std::string percent(double fraction) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.1f", 100.0 * fraction);
  return buf;
}

nlohmann::json to_json(const MetricsReport& r) {
  nlohmann::json display = {{"a_avg", percent(r.a_avg)}, {"pd", percent(r.pd)}};
  display["hacc"] = r.hacc ? nlohmann::json(percent(*r.hacc)) : nlohmann::json(nullptr);
  nlohmann::json per_task = nlohmann::json::array();
  for (double a : r.accuracy) per_task.push_back(percent(a));
  display["accuracy"] = per_task;
  return {
      {"accuracy", r.accuracy},
      {"base_accuracy", r.base_accuracy},
      {"novel_accuracy", r.novel_accuracy},
      {"a_avg", r.a_avg},
      {"pd", r.pd},
      {"hacc", r.hacc ? nlohmann::json(*r.hacc) : nlohmann::json(nullptr)},
      {"config_hash", r.config_hash},
      {"seed", r.seed},
      {"display_percent", display},
  };
}

MetricsReport report_from_json(const nlohmann::json& j) {
  try {
    MetricsReport r;
    j.at("accuracy").get_to(r.accuracy);
    j.at("base_accuracy").get_to(r.base_accuracy);
    j.at("novel_accuracy").get_to(r.novel_accuracy);
    j.at("a_avg").get_to(r.a_avg);
    j.at("pd").get_to(r.pd);
    if (!j.at("hacc").is_null()) r.hacc = j.at("hacc").get<double>();
    j.at("config_hash").get_to(r.config_hash);
    j.at("seed").get_to(r.seed);
    return r;
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("report: ") + e.what());
  }
}

std::string curve_csv(const MetricsReport& r) {
  std::ostringstream out;
  out << "task,accuracy,base_accuracy,novel_accuracy\n";
  char buf[128];
  for (std::size_t t = 0; t < r.accuracy.size(); ++t) {
    std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g\n", t, r.accuracy[t], r.base_accuracy[t],
                  r.novel_accuracy[t]);
    out << buf;
  }
  return out.str();
}

namespace {

void write_file(const std::filesystem::path& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot open " + path.string() + " for writing");
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

}  // namespace

void emit(const MetricsReport& report, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  write_file(dir / "report.json", to_json(report).dump(2) + "\n");
  write_file(dir / "curve.csv", curve_csv(report));
}

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t seed) {
  std::uint64_t h = seed;
  for (unsigned char c : bytes) {
    h ^= c;
    h *= 0x100000001b3ull;
  }
  return h;
}

}  // namespace asp::metrics
