#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "asp/data/synth.hpp"
#include "asp/metrics/metrics.hpp"
#include "asp/runner/config.hpp"
#include "asp/runner/model.hpp"

namespace asp::runner {

using Model = AspModel<float>;

/// Accuracy on the held-out samples of every class seen so far.
struct EvalResult {
  double accuracy = 0.0;
  double base_accuracy = 0.0;
  double novel_accuracy = 0.0;
  std::size_t correct = 0;
  std::size_t total = 0;
  std::vector<std::int64_t> predictions;  // aligned with the evaluated indices
};

/// Evidence gathered while a run executes; see Experiment.
struct Instrumentation {
  std::uint64_t backbone_fingerprint = 0;      // after pretraining
  std::size_t backbone_mutations = 0;          // stage ends where the backbone differed
  std::uint64_t incremental_updates = 0;       // optimizer updates during incremental tasks
  std::uint64_t base_reads_after_base = 0;     // base training reads after base training
  std::vector<std::size_t> classifier_sizes;   // K after each task
  std::vector<std::set<std::string>> modified; // tensors changed by each incremental step
};

enum class Stage : std::uint32_t { created = 0, pretrained = 1, trained = 2 };

/// One FSCIL experiment: pretraining, base-task training, incremental steps
/// and evaluation after each task. The dataset must outlive the experiment.
class Experiment {
 public:
  Experiment(RunConfig config, const data::Dataset& dataset);

  /// Trains the backbone on the pretraining classes and freezes it.
  void pretrain();
  /// Adopts an already pretrained backbone (shared between variants).
  void set_backbone(const vit::VisionTransformer<float>& backbone, std::vector<double> loss_curve = {});
  /// Base-task training, prototype replacement, prompt freezing, evaluation of task 0.
  void train_base();
  /// EMA update of p_avg, new-class prototypes, evaluation of task `t`.
  void incremental_step(std::size_t t);
  /// Runs every remaining stage. With a directory, a checkpoint is written
  /// after each stage and `resume` continues from the newest one found.
  metrics::MetricsReport run(const std::optional<std::filesystem::path>& checkpoint_dir = std::nullopt,
                             bool resume = false);

  /// Evaluates the current model on the classes of tasks 0..t.
  EvalResult evaluate(std::size_t t);
  metrics::MetricsReport report() const;

  /// Re-splits with a different shot count. Only allowed before the first
  /// incremental step; the pretraining, base and test splits must not change.
  void set_shots(std::uint32_t shots);

  void save(const std::filesystem::path& path);
  static Experiment load(const std::filesystem::path& path, const data::Dataset& dataset);

  const RunConfig& config() const { return config_; }
  const data::TaskStream& stream() const { return stream_; }
  data::DataView& view() { return view_; }
  Model& model() { return *model_; }
  bool has_model() const { return model_.has_value(); }
  vit::VisionTransformer<float>& backbone() { return *backbone_; }
  Stage stage() const { return stage_; }
  /// Tasks evaluated so far (0 before base training finishes).
  std::size_t tasks_done() const { return accuracy_.size(); }
  const std::vector<double>& pretrain_loss() const { return pretrain_loss_; }
  const std::vector<double>& base_loss() const { return base_loss_; }
  const Instrumentation& instrumentation() const { return instr_; }

 private:
  std::vector<std::int64_t> class_ids(std::size_t task) const;
  std::vector<std::size_t> rows_of(std::span<const std::size_t> indices) const;
  Tensor<float> anchor_table(const Tensor<float>& images, const Tensor<float>& clean,
                             std::span<const std::size_t> indices);
  void record(const EvalResult& r);
  void check_backbone();

  RunConfig config_;
  const data::Dataset* dataset_;
  data::TaskStream stream_;
  data::DataView view_;
  std::optional<vit::VisionTransformer<float>> backbone_;
  std::optional<Model> model_;
  Stage stage_ = Stage::created;
  std::vector<double> pretrain_loss_, base_loss_;
  std::vector<double> accuracy_, base_accuracy_, novel_accuracy_;
  Instrumentation instr_;
};

/// Fingerprint of a set of tensors (FNV-1a over names, shapes and bytes).
std::uint64_t fingerprint(vit::ViTParams<float>& params);

/// Convenience wrapper: generate data, run, report.
metrics::MetricsReport run_experiment(const RunConfig& config);

}  // namespace asp::runner
