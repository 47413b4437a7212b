#include "asp/runner/config.hpp"

#include <sstream>

#include "asp/errors.hpp"
#include "asp/metrics/metrics.hpp"

namespace asp::runner {

namespace {

// Each config struct lists its fields once; the same list drives both
// serialisation directions.
template <class F>
void fields(vit::ViTConfig& c, F&& f) {
  f("image_size", c.image_size);
  f("channels", c.channels);
  f("patch_size", c.patch_size);
  f("embed_dim", c.embed_dim);
  f("num_layers", c.num_layers);
  f("num_heads", c.num_heads);
  f("mlp_ratio", c.mlp_ratio);
}

template <class F>
void fields(prompt::PromptConfig& c, F&& f) {
  f("layers", c.layers);
  f("tip_length", c.tip_length);
  f("tsp_length", c.tsp_length);
  f("use_tip", c.use_tip);
  f("use_tsp", c.use_tsp);
  f("tied_tip", c.tied_tip);
  f("alpha", c.alpha);
  f("beta", c.beta);
  f("input_noise", c.input_noise);
  f("reparameterize", c.reparameterize);
  f("encoder_hidden", c.encoder_hidden);
}

template <class F>
void fields(objective::LossConfig& c, F&& f) {
  f("lambda", c.lambda);
  f("kl_weight", c.kl_weight);
  f("temperature", c.temperature);
}

template <class F>
void fields(OptimConfig& c, F&& f) {
  f("lr", c.lr);
  f("epochs", c.epochs);
  f("batch_size", c.batch_size);
}

template <class F>
void fields(PretrainConfig& c, F&& f) {
  f("lr", c.lr);
  f("epochs", c.epochs);
  f("batch_size", c.batch_size);
}

template <class F>
void fields(data::GenerateConfig& c, F&& f) {
  f("num_classes", c.num_classes);
  f("per_class", c.per_class);
  f("image_size", c.image_size);
  f("channels", c.channels);
  f("pixel_noise", c.pixel_noise);
  f("seed", c.seed);
}

template <class F>
void fields(data::SplitConfig& c, F&& f) {
  f("pretrain_classes", c.pretrain_classes);
  f("base_classes", c.base_classes);
  f("ways", c.ways);
  f("shots", c.shots);
  f("tasks", c.tasks);
  f("test_per_class", c.test_per_class);
  f("base_train_per_class", c.base_train_per_class);
  f("seed", c.seed);
}

template <class F>
void fields(Ablation& c, F&& f) {
  f("no_tip", c.no_tip);
  f("no_tsp", c.no_tsp);
  f("no_anchor", c.no_anchor);
  f("diff_tip", c.diff_tip);
  f("no_pavg", c.no_pavg);
  f("frozen_pavg", c.frozen_pavg);
}

template <class F>
void fields(RunConfig& c, F&& f) {
  f("vit", c.vit);
  f("prompt", c.prompt);
  f("loss", c.loss);
  f("optim", c.optim);
  f("pretrain", c.pretrain);
  f("data", c.data);
  f("split", c.split);
  f("ablation", c.ablation);
  f("seed", c.seed);
  f("refresh_base_prototypes", c.refresh_base_prototypes);
}

template <class S>
concept Described = requires(S& s) { fields(s, [](const char*, auto&) {}); };

template <class V>
nlohmann::json dump(const V& v) {
  if constexpr (Described<V>) {
    nlohmann::json j = nlohmann::json::object();
    fields(const_cast<V&>(v), [&](const char* key, auto& field) { j[key] = dump(field); });
    return j;
  } else {
    return v;
  }
}

template <class V>
void parse(const nlohmann::json& j, V& v, const std::string& path) {
  if constexpr (Described<V>) {
    if (!j.is_object()) throw ConfigError("config: '" + path + "' must be an object");
    for (const auto& [key, value] : j.items()) {
      bool known = false;
      fields(v, [&](const char* k, auto&) { known = known || key == k; });
      if (!known) throw ConfigError("config: unknown key '" + path + key + "'");
    }
    fields(v, [&](const char* key, auto& field) {
      if (j.contains(key)) parse(j.at(key), field, path + key + ".");
    });
  } else {
    try {
      v = j.get<V>();
    } catch (const nlohmann::json::exception& e) {
      throw ConfigError("config: bad value for '" + path.substr(0, path.size() - 1) + "': " + e.what());
    }
  }
}

}  // namespace

void Ablation::validate() const {
  if (no_tip && no_tsp) throw ConfigError("ablation: no_tip and no_tsp together leave no prompts");
  if (diff_tip && no_tip) throw ConfigError("ablation: diff_tip needs the invariant prompt");
  if (no_tsp && (no_pavg || frozen_pavg)) {
    throw ConfigError("ablation: no_pavg/frozen_pavg need the task-specific prompt");
  }
}

std::string Ablation::name() const {
  std::vector<std::string> parts;
  if (no_tip) parts.push_back("no_tip");
  if (no_tsp) parts.push_back("no_tsp");
  if (no_anchor) parts.push_back("no_anchor");
  if (diff_tip) parts.push_back("diff_tip");
  if (no_pavg) parts.push_back("no_pavg");
  if (frozen_pavg) parts.push_back("frozen_pavg");
  if (parts.empty()) return "full";
  std::string out = parts[0];
  for (std::size_t i = 1; i < parts.size(); ++i) out += "+" + parts[i];
  return out;
}

Ablation Ablation::from_name(const std::string& name) {
  Ablation a;
  if (name == "full" || name.empty()) return a;
  std::stringstream ss(name);
  std::string part;
  while (std::getline(ss, part, '+')) {
    if (part == "no_tip") a.no_tip = true;
    else if (part == "no_tsp") a.no_tsp = true;
    else if (part == "no_anchor") a.no_anchor = true;
    else if (part == "diff_tip") a.diff_tip = true;
    else if (part == "no_pavg") a.no_pavg = true;
    else if (part == "frozen_pavg") a.frozen_pavg = true;
    else throw ConfigError("ablation: unknown flag '" + part + "'");
  }
  a.validate();
  return a;
}

std::vector<Ablation> ablation_matrix() {
  std::vector<Ablation> out(5);
  out[1].no_tip = true;
  out[2].no_tsp = true;
  out[3].no_anchor = true;
  out[4].diff_tip = true;
  return out;
}

prompt::PromptConfig RunConfig::effective_prompt() const {
  prompt::PromptConfig p = prompt;
  if (ablation.no_tip) p.use_tip = false;
  if (ablation.no_tsp) p.use_tsp = false;
  if (ablation.diff_tip) p.tied_tip = false;
  if (ablation.no_pavg) p.alpha = 0.0;
  if (ablation.frozen_pavg) p.beta = 1.0;
  return p;
}

objective::LossConfig RunConfig::effective_loss() const {
  objective::LossConfig l = loss;
  if (ablation.no_anchor) l.lambda = 0.0;
  return l;
}

data::SplitConfig RunConfig::effective_split() const {
  data::SplitConfig s = split;
  s.seed = seed;
  return s;
}

void RunConfig::validate() const {
  vit.validate();
  ablation.validate();
  const auto p = effective_prompt();
  p.validate();
  for (auto l : p.layers) {
    if (l >= vit.num_layers) {
      throw ConfigError("config: prompt layer " + std::to_string(l) + " beyond depth " +
                        std::to_string(vit.num_layers));
    }
  }
  effective_loss().validate();
  if (!(optim.lr > 0.0) || optim.batch_size == 0) throw ConfigError("config: optimizer needs lr > 0 and batch_size > 0");
  if (!(pretrain.lr > 0.0) || pretrain.batch_size == 0) {
    throw ConfigError("config: pretraining needs lr > 0 and batch_size > 0");
  }
  data.validate();
  split.validate();
  if (data.image_size != vit.image_size || data.channels != vit.channels) {
    throw ConfigError("config: data geometry does not match the backbone");
  }
  if (split.pretrain_classes == 0) throw ConfigError("config: the backbone needs pretraining classes");
}

nlohmann::json to_json(const RunConfig& c) { return dump(c); }

RunConfig config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ConfigError("config: expected a JSON object");
  RunConfig c;
  parse(j, c, "");
  return c;
}

std::uint64_t config_hash(const RunConfig& config) { return metrics::fnv1a(to_json(config).dump()); }

}  // namespace asp::runner
