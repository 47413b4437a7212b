#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "asp/data/synth.hpp"
#include "asp/objective/losses.hpp"
#include "asp/prompt/prompt.hpp"
#include "asp/vit/vit.hpp"

namespace asp::runner {

struct OptimConfig {
  double lr = 0.01;
  std::size_t epochs = 5;
  std::size_t batch_size = 16;
  bool operator==(const OptimConfig&) const = default;
};

/// Backbone pretraining on the reserved classes (Adam, temporary linear head).
struct PretrainConfig {
  double lr = 1e-3;
  std::size_t epochs = 6;
  std::size_t batch_size = 32;
  bool operator==(const PretrainConfig&) const = default;
};

/// Component ablation switches. `no_pavg` sets alpha to 0, `frozen_pavg` beta to 1.
struct Ablation {
  bool no_tip = false;
  bool no_tsp = false;
  bool no_anchor = false;
  bool diff_tip = false;
  bool no_pavg = false;
  bool frozen_pavg = false;

  void validate() const;
  /// "full" or the '+'-joined list of active flags.
  std::string name() const;
  static Ablation from_name(const std::string& name);
  bool operator==(const Ablation&) const = default;
};

struct RunConfig {
  vit::ViTConfig vit;
  prompt::PromptConfig prompt;
  objective::LossConfig loss;
  OptimConfig optim;
  PretrainConfig pretrain;
  data::GenerateConfig data;
  data::SplitConfig split;
  Ablation ablation;
  std::uint64_t seed = 0;
  /// Recompute base prototypes after each p_avg update. Needs base data
  /// after base training, so it breaks the rehearsal-free contract; off by default.
  bool refresh_base_prototypes = false;

  void validate() const;
  /// Prompt and loss settings with the ablation flags applied.
  prompt::PromptConfig effective_prompt() const;
  objective::LossConfig effective_loss() const;
  /// Split settings seeded from `seed`.
  data::SplitConfig effective_split() const;
  bool operator==(const RunConfig&) const = default;
};

nlohmann::json to_json(const RunConfig& config);
/// Missing keys keep their defaults; unknown keys are a ConfigError.
RunConfig config_from_json(const nlohmann::json& j);
/// FNV-1a of the canonical JSON form.
std::uint64_t config_hash(const RunConfig& config);

/// The ablation variants in report order: full, no_tip, no_tsp, no_anchor, diff_tip.
std::vector<Ablation> ablation_matrix();

}  // namespace asp::runner
