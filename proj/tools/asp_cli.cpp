// asp: command-line driver for data generation, training runs, ablations
// and report emission. Exit codes: 0 ok, 2 configuration, 3 data format,
// 4 numeric failure, 1 anything else.

#include <chrono>
#include <cstdio>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>
#include <nlohmann/json.hpp>

#include "asp/data/synth.hpp"
#include "asp/errors.hpp"
#include "asp/metrics/metrics.hpp"
#include "asp/runner/checkpoint.hpp"
#include "asp/runner/runner.hpp"

namespace fs = std::filesystem;
using asp::runner::RunConfig;

namespace {

enum Exit : int { kOk = 0, kOther = 1, kConfig = 2, kFormat = 3, kNumeric = 4 };

struct Overrides {
  std::string config_path;
  std::optional<std::uint64_t> seed;
  std::optional<std::size_t> epochs, pretrain_epochs, batch;
  std::optional<double> lr, alpha, beta, lambda;
  std::optional<std::uint32_t> shots, tasks;
  std::string ablation;

  void attach(CLI::App* app) {
    app->add_option("--config", config_path, "JSON run configuration")->check(CLI::ExistingFile);
    app->add_option("--epochs", epochs, "base-task epochs");
    app->add_option("--pretrain-epochs", pretrain_epochs, "backbone pretraining epochs");
    app->add_option("--batch-size", batch, "base-task minibatch size");
    app->add_option("--lr", lr, "base-task SGD learning rate");
    app->add_option("--alpha", alpha, "p_avg mixing weight");
    app->add_option("--beta", beta, "p_avg EMA rate");
    app->add_option("--lambda", lambda, "anchor loss weight");
    app->add_option("--shots", shots, "samples per class in incremental tasks");
    app->add_option("--tasks", tasks, "number of incremental tasks");
    app->add_option("--ablation", ablation, "full, or '+'-joined flags such as no_tip+no_anchor");
  }

  RunConfig resolve() const {
    RunConfig c;
    if (!config_path.empty()) {
      std::ifstream in(config_path);
      nlohmann::json j;
      try {
        in >> j;
      } catch (const nlohmann::json::exception& e) {
        throw asp::ConfigError(std::string("config: ") + e.what());
      }
      c = asp::runner::config_from_json(j);
    }
    if (seed) c.seed = *seed;
    if (epochs) c.optim.epochs = *epochs;
    if (pretrain_epochs) c.pretrain.epochs = *pretrain_epochs;
    if (batch) c.optim.batch_size = *batch;
    if (lr) c.optim.lr = *lr;
    if (alpha) c.prompt.alpha = *alpha;
    if (beta) c.prompt.beta = *beta;
    if (lambda) c.loss.lambda = *lambda;
    if (shots) c.split.shots = *shots;
    if (tasks) c.split.tasks = *tasks;
    if (!ablation.empty()) c.ablation = asp::runner::Ablation::from_name(ablation);
    c.validate();
    return c;
  }
};

asp::data::Dataset dataset_for(const RunConfig& c, const std::string& data_path) {
  if (data_path.empty()) return asp::data::generate(c.data);
  return asp::data::load(data_path);
}

void print_report(const asp::metrics::MetricsReport& r, const std::string& label) {
  std::printf("%-14s A_t:", label.c_str());
  for (double a : r.accuracy) std::printf(" %s", asp::metrics::percent(a).c_str());
  std::printf("  A_avg %s  PD %s  HAcc %s\n", asp::metrics::percent(r.a_avg).c_str(),
              asp::metrics::percent(r.pd).c_str(), r.hacc ? asp::metrics::percent(*r.hacc).c_str() : "n/a");
}

int cmd_gen(const RunConfig& c, const std::string& out) {
  const auto ds = asp::data::generate(c.data);
  asp::data::save(ds, out);
  const auto stream = asp::data::split_fscil(ds, c.effective_split());
  std::ofstream side(asp::data::split_sidecar_path(out));
  side << asp::data::to_json(stream).dump(2) << "\n";
  if (!side) throw std::runtime_error("cannot write split sidecar");
  std::printf("wrote %zu samples of %u classes to %s\n", ds.size(), ds.num_classes, out.c_str());
  return kOk;
}

int cmd_pretrain(const RunConfig& c, const std::string& data_path, const fs::path& out_dir) {
  const auto ds = dataset_for(c, data_path);
  asp::runner::Experiment x(c, ds);
  x.pretrain();
  fs::create_directories(out_dir / "checkpoints");
  x.save(out_dir / "checkpoints" / "pretrain.aspc");
  for (std::size_t e = 0; e < x.pretrain_loss().size(); ++e) {
    std::printf("pretrain epoch %zu  loss %.4f\n", e, x.pretrain_loss()[e]);
  }
  return kOk;
}

int cmd_run(const RunConfig& c, const std::string& data_path, const fs::path& out_dir, bool resume) {
  const auto ds = dataset_for(c, data_path);
  asp::runner::Experiment x(c, ds);
  const auto report = x.run(out_dir / "checkpoints", resume);
  asp::metrics::emit(report, out_dir);
  print_report(report, c.ablation.name());
  return kOk;
}

int cmd_ablate(const RunConfig& c, const std::string& data_path, const fs::path& out_dir,
               const std::vector<std::uint64_t>& seeds) {
  const auto ds = dataset_for(c, data_path);
  const auto variants = asp::runner::ablation_matrix();
  std::map<std::string, std::vector<asp::metrics::MetricsReport>> results;
  for (auto seed : seeds) {
    RunConfig base = c;
    base.seed = seed;
    base.ablation = {};
    asp::runner::Experiment pre(base, ds);
    pre.pretrain();
    for (const auto& v : variants) {
      RunConfig vc = base;
      vc.ablation = v;
      asp::runner::Experiment x(vc, ds);
      x.set_backbone(pre.backbone(), pre.pretrain_loss());
      const auto report = x.run();
      const fs::path dir = out_dir / ("seed" + std::to_string(seed)) / v.name();
      asp::metrics::emit(report, dir);
      print_report(report, v.name() + " s" + std::to_string(seed));
      results[v.name()].push_back(report);
    }
  }
  fs::create_directories(out_dir);
  nlohmann::json summary = nlohmann::json::object();
  std::ofstream csv(out_dir / "ablation.csv");
  csv << "variant,seeds,a_avg,pd,hacc\n";
  for (const auto& v : variants) {
    const auto& rs = results[v.name()];
    double a = 0, p = 0, h = 0;
    for (const auto& r : rs) {
      a += r.a_avg;
      p += r.pd;
      h += r.hacc.value_or(0.0);
    }
    const double n = static_cast<double>(rs.size());
    summary[v.name()] = {{"a_avg", a / n}, {"pd", p / n}, {"hacc", h / n}, {"seeds", seeds}};
    csv << v.name() << "," << rs.size() << "," << asp::metrics::percent(a / n) << ","
        << asp::metrics::percent(p / n) << "," << asp::metrics::percent(h / n) << "\n";
    std::printf("mean %-10s A_avg %s  PD %s  HAcc %s\n", v.name().c_str(), asp::metrics::percent(a / n).c_str(),
                asp::metrics::percent(p / n).c_str(), asp::metrics::percent(h / n).c_str());
  }
  std::ofstream(out_dir / "ablation.json") << summary.dump(2) << "\n";
  return kOk;
}

int cmd_metrics(const fs::path& checkpoint, const std::string& data_path, const fs::path& out_dir) {
  // The checkpoint stores its config; the dataset is regenerated from it unless given.
  const auto file = asp::runner::CheckpointFile::load(checkpoint);
  RunConfig c;
  try {
    c = asp::runner::config_from_json(nlohmann::json::parse(file.at("config").text));
  } catch (const nlohmann::json::exception& e) {
    throw asp::FormatError(std::string("checkpoint config: ") + e.what());
  }
  const auto ds = dataset_for(c, data_path);
  auto x = asp::runner::Experiment::load(checkpoint, ds);
  if (x.tasks_done() == 0) throw asp::ConfigError("metrics: checkpoint has no evaluated tasks");
  const auto report = x.report();
  const auto check = x.evaluate(x.tasks_done() - 1);
  if (check.accuracy != report.accuracy.back()) {
    throw asp::NumericError("metrics: re-evaluation disagrees with the stored accuracy");
  }
  if (!out_dir.empty()) asp::metrics::emit(report, out_dir);
  print_report(report, "checkpoint");
  return kOk;
}

int cmd_report(const fs::path& in_path, const fs::path& out_dir) {
  std::ifstream in(in_path);
  if (!in) throw std::runtime_error("cannot open " + in_path.string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw asp::FormatError(std::string("report: ") + e.what());
  }
  auto report = asp::metrics::report_from_json(j);
  report.finalize();
  asp::metrics::emit(report, out_dir);
  print_report(report, "report");
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ASP few-shot class-incremental learning at desk scale"};
  app.require_subcommand(1);

  Overrides gen_o, pre_o, run_o, abl_o;
  std::string gen_out, data_path;
  fs::path out_dir, checkpoint, report_in;
  bool resume = false;
  std::vector<std::uint64_t> seeds{0, 1, 2};

  auto* gen = app.add_subcommand("gen", "generate a synthetic dataset (ASPD) and its split sidecar");
  gen_o.attach(gen);
  gen->add_option("--seed", gen_o.seed, "split seed");
  gen->add_option("--out", gen_out, "output .aspd path")->required();

  auto* pre = app.add_subcommand("pretrain", "pretrain and freeze the backbone");
  pre_o.attach(pre);
  pre->add_option("--seed", pre_o.seed, "run seed")->required();
  pre->add_option("--out-dir", out_dir, "output directory")->required();
  pre->add_option("--data", data_path, "ASPD dataset (default: generate from config)");

  auto* run = app.add_subcommand("run", "full experiment: pretrain, base task, incremental tasks");
  run_o.attach(run);
  run->add_option("--seed", run_o.seed, "run seed")->required();
  run->add_option("--out-dir", out_dir, "output directory")->required();
  run->add_option("--data", data_path, "ASPD dataset (default: generate from config)");
  run->add_flag("--resume", resume, "continue from the newest checkpoint in out-dir");

  auto* abl = app.add_subcommand("ablate", "run the ablation matrix over several seeds");
  abl_o.attach(abl);
  abl->add_option("--seeds", seeds, "seeds to average over")->delimiter(',');
  abl->add_option("--out-dir", out_dir, "output directory")->required();
  abl->add_option("--data", data_path, "ASPD dataset (default: generate from config)");

  auto* met = app.add_subcommand("metrics", "recompute the report stored in a checkpoint");
  met->add_option("--checkpoint", checkpoint, "ASPC checkpoint")->required()->check(CLI::ExistingFile);
  met->add_option("--data", data_path, "ASPD dataset (default: generate from config)");
  met->add_option("--out-dir", out_dir, "write report.json and curve.csv here");

  auto* rep = app.add_subcommand("report", "re-emit report.json and curve.csv from a report");
  rep->add_option("--in", report_in, "report.json")->required()->check(CLI::ExistingFile);
  rep->add_option("--out-dir", out_dir, "output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? kOk : kConfig;
  }

  try {
    const auto start = std::chrono::steady_clock::now();
    int code = kOk;
    if (*gen) code = cmd_gen(gen_o.resolve(), gen_out);
    if (*pre) code = cmd_pretrain(pre_o.resolve(), data_path, out_dir);
    if (*run) code = cmd_run(run_o.resolve(), data_path, out_dir, resume);
    if (*abl) code = cmd_ablate(abl_o.resolve(), data_path, out_dir, seeds);
    if (*met) code = cmd_metrics(checkpoint, data_path, out_dir);
    if (*rep) code = cmd_report(report_in, out_dir);
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    std::fprintf(stderr, "done in %.1f s\n", secs);
    return code;
  } catch (const asp::ConfigError& e) {
    std::fprintf(stderr, "configuration error: %s\n", e.what());
    return kConfig;
  } catch (const asp::FormatError& e) {
    std::fprintf(stderr, "format error: %s\n", e.what());
    return kFormat;
  } catch (const asp::NumericError& e) {
    std::fprintf(stderr, "numeric error: %s\n", e.what());
    return kNumeric;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return kOther;
  }
}
