#include "asp/runner/runner.hpp"

#include <algorithm>
#include <cstring>
#include <map>
#include <unordered_set>

#include "asp/errors.hpp"
#include "asp/runner/checkpoint.hpp"
#include "asp/tensor/optim.hpp"

namespace asp::runner {

namespace {

// Stream tags under the run seed.
constexpr std::uint64_t kPretrainInit = 10;
constexpr std::uint64_t kPretrainEpoch = 100;
constexpr std::uint64_t kModelInit = 20;
constexpr std::uint64_t kBaseEpoch = 1000;

std::uint64_t hash_bytes(const void* data, std::size_t n, std::uint64_t h) {
  return metrics::fnv1a(std::string_view(static_cast<const char*>(data), n), h);
}

std::uint64_t hash_tensor(const std::string& name, const Tensor<float>& t, std::uint64_t h) {
  h = metrics::fnv1a(name, h);
  for (auto d : t.shape()) h = hash_bytes(&d, sizeof d, h);
  return hash_bytes(t.data().data(), t.numel() * sizeof(float), h);
}

std::uint64_t dataset_hash(const data::Dataset& ds) {
  std::uint64_t h = metrics::fnv1a("ASPD");
  h = hash_bytes(ds.labels.data(), ds.labels.size() * sizeof(std::uint32_t), h);
  return hash_bytes(ds.pixels.data(), ds.pixels.size() * sizeof(float), h);
}

std::vector<std::int64_t> widen(std::span<const std::uint32_t> v) { return {v.begin(), v.end()}; }

}  // namespace

std::uint64_t fingerprint(vit::ViTParams<float>& params) {
  std::uint64_t h = metrics::fnv1a("vit");
  params.visit([&](const std::string& name, Tensor<float>& t) { h = hash_tensor(name, t, h); });
  return h;
}

Experiment::Experiment(RunConfig config, const data::Dataset& dataset)
    : config_(std::move(config)), dataset_(&dataset), view_(dataset) {
  config_.validate();
  if (dataset.height != config_.vit.image_size || dataset.width != config_.vit.image_size ||
      dataset.channels != config_.vit.channels) {
    throw ConfigError("experiment: dataset geometry does not match the backbone");
  }
  stream_ = data::split_fscil(dataset, config_.effective_split());
}

std::vector<std::int64_t> Experiment::class_ids(std::size_t task) const {
  return widen(stream_.tasks.at(task).classes);
}

std::vector<std::size_t> Experiment::rows_of(std::span<const std::size_t> indices) const {
  std::vector<std::size_t> rows;
  rows.reserve(indices.size());
  for (auto i : indices) {
    const auto row = model_->classifier().row_of(dataset_->labels.at(i));
    if (!row) throw ContractError("experiment: sample of an unknown class");
    rows.push_back(*row);
  }
  return rows;
}

void Experiment::pretrain() {
  if (stage_ != Stage::created) throw ContractError("pretrain: backbone already present");
  std::unordered_set<std::uint32_t> fscil;
  for (const auto& t : stream_.tasks) fscil.insert(t.classes.begin(), t.classes.end());
  for (auto c : stream_.pretrain_classes) {
    if (fscil.count(c)) throw ConfigError("pretrain: class " + std::to_string(c) + " also appears in a task");
  }
  const RngStream root(config_.seed);
  RngStream init = root.split(kPretrainInit);
  auto vit = vit::VisionTransformer<float>::init(config_.vit, init);
  vit.params().set_frozen(false);

  const std::size_t dim = config_.vit.embed_dim;
  const std::size_t classes = stream_.pretrain_classes.size();
  Tensor<float> head_w({dim, classes}), head_b({1, classes});
  for (auto& x : head_w.data()) x = static_cast<float>(init.normal() / std::sqrt(double(dim)));
  head_w.set_requires_grad(true);
  head_b.set_requires_grad(true);
  std::map<std::uint32_t, std::size_t> row;
  for (std::size_t i = 0; i < classes; ++i) row[stream_.pretrain_classes[i]] = i;

  std::vector<Tensor<float>*> params = vit.params().tensors();
  params.push_back(&head_w);
  params.push_back(&head_b);
  tensor::Adam<float> adam(params, config_.pretrain.lr);

  std::vector<std::size_t> order = stream_.pretrain;
  const std::size_t bs = config_.pretrain.batch_size;
  pretrain_loss_.clear();
  for (std::size_t e = 0; e < config_.pretrain.epochs; ++e) {
    RngStream rng = root.split(kPretrainEpoch + e);
    rng.shuffle(order.begin(), order.end());
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(bs, order.size() - start));
      const Tensor<float> images = view_.images(idx);
      std::vector<std::size_t> labels;
      for (auto i : idx) labels.push_back(row.at(dataset_->labels[i]));
      Graph<float> g;
      const Var f = vit.forward(g, images, vit::PromptInjection{});
      const Var loss = g.cross_entropy(g.linear(f, g.param(head_w), g.param(head_b)), labels);
      total += g.value(loss)[0];
      ++batches;
      g.backward(loss);
      adam.step();
    }
    pretrain_loss_.push_back(total / double(std::max<std::size_t>(batches, 1)));
  }
  vit.params().set_frozen(true);
  set_backbone(vit, pretrain_loss_);
}

void Experiment::set_backbone(const vit::VisionTransformer<float>& backbone, std::vector<double> loss_curve) {
  if (stage_ != Stage::created) throw ContractError("set_backbone: backbone already present");
  if (!(backbone.config() == config_.vit)) throw ConfigError("set_backbone: backbone geometry differs from config");
  backbone_ = backbone;
  backbone_->params().set_frozen(true);
  pretrain_loss_ = std::move(loss_curve);
  instr_.backbone_fingerprint = fingerprint(backbone_->params());
  stage_ = Stage::pretrained;
}

void Experiment::check_backbone() {
  bool changed = fingerprint(backbone_->params()) != instr_.backbone_fingerprint;
  if (model_) changed = changed || fingerprint(model_->backbone().params()) != instr_.backbone_fingerprint;
  if (changed) ++instr_.backbone_mutations;
}

Tensor<float> Experiment::anchor_table(const Tensor<float>& images, const Tensor<float>& clean,
                                       std::span<const std::size_t> indices) {
  Model& m = *model_;
  const Tensor<float> feats = m.eval_features(images, &clean);
  const auto& ids = m.classifier().class_ids();
  const std::size_t dim = feats.cols();
  Tensor<float> anchors({ids.size(), dim});
  for (std::size_t k = 0; k < ids.size(); ++k) {
    std::vector<float> members;
    for (std::size_t i = 0; i < indices.size(); ++i) {
      if (dataset_->labels[indices[i]] != ids[k]) continue;
      const auto r = feats.row(i);
      members.insert(members.end(), r.begin(), r.end());
    }
    const std::size_t n = members.size() / dim;
    const Tensor<float> group({n, dim}, std::move(members));
    const std::vector<std::int64_t> all(n, ids[k]);
    const std::int64_t one[] = {ids[k]};
    const Tensor<float> mean = classifier::compute_prototypes(group, all, one);
    const std::size_t best = objective::select_anchor<float>(group, mean.data());
    std::copy(group.row(best).begin(), group.row(best).end(), anchors.row(k).begin());
  }
  return anchors;
}

void Experiment::train_base() {
  if (stage_ != Stage::pretrained) throw ContractError("train_base: needs a pretrained backbone and no prior base training");
  const RngStream root(config_.seed);
  RngStream init = root.split(kModelInit);
  model_.emplace(*backbone_, config_.effective_prompt(), config_.effective_loss(), class_ids(0), init);
  Model& m = *model_;

  const auto& base = stream_.tasks[0].train;
  const Tensor<float> all_images = view_.images(base);
  const Tensor<float> clean = m.backbone_features(all_images);
  const bool anchored = m.loss_config().lambda > 0.0;
  const auto trainable = m.trainable();
  const auto lr = static_cast<float>(config_.optim.lr);
  const std::size_t bs = config_.optim.batch_size;

  std::vector<std::size_t> order = base;
  base_loss_.clear();
  for (std::size_t e = 0; e < config_.optim.epochs; ++e) {
    // Epoch start: prompt average first, then anchors computed with it.
    m.refresh_p_avg(clean);
    std::optional<Tensor<float>> anchors;
    if (anchored) anchors = anchor_table(all_images, clean, base);
    RngStream rng = root.split(kBaseEpoch + e);
    rng.shuffle(order.begin(), order.end());
    double total = 0.0;
    std::size_t batches = 0;
    for (std::size_t start = 0; start < order.size(); start += bs) {
      const std::span<const std::size_t> idx(order.data() + start, std::min(bs, order.size() - start));
      const Tensor<float> images = view_.images(idx);
      const auto rows = rows_of(idx);
      Graph<float> g;
      const Var loss = m.training_loss(g, images, rows, anchors ? &*anchors : nullptr, rng);
      total += g.value(loss)[0];
      ++batches;
      g.backward(loss);
      tensor::sgd_step<float>(trainable, lr);
    }
    base_loss_.push_back(total / double(std::max<std::size_t>(batches, 1)));
  }
  // The average used from now on reflects the final encoder.
  m.refresh_p_avg(clean);
  const Tensor<float> feats = m.eval_features(all_images, &clean);
  std::vector<std::int64_t> labels;
  for (auto i : base) labels.push_back(dataset_->labels[i]);
  m.classifier().freeze_to_prototypes(classifier::compute_prototypes(feats, labels, class_ids(0)));
  m.freeze_prompts();
  instr_.base_reads_after_base = 0;
  stage_ = Stage::trained;
  check_backbone();
  record(evaluate(0));
}

void Experiment::incremental_step(std::size_t t) {
  if (stage_ != Stage::trained) throw ContractError("incremental_step: base training has not finished");
  if (t == 0 || t != tasks_done() || t >= stream_.tasks.size()) {
    throw ContractError("incremental_step: expected task " + std::to_string(tasks_done()) + ", got " +
                        std::to_string(t));
  }
  Model& m = *model_;
  const auto ids = class_ids(t);
  for (auto id : ids) {
    if (m.classifier().row_of(id)) throw ContractError("incremental_step: class " + std::to_string(id) + " already known");
  }
  const auto& base = stream_.tasks[0].train;
  const std::uint64_t base_reads = view_.reads(base);
  const std::uint64_t updates = tensor::update_counter().load();
  std::map<std::string, std::uint64_t> before;
  m.visit([&](const std::string& name, Tensor<float>& x) { before[name] = hash_tensor(name, x, 0); });
  const Tensor<float> old_rows = m.classifier().weights();

  const auto& task = stream_.tasks[t];
  const Tensor<float> images = view_.images(task.train);
  const Tensor<float> clean = m.backbone_features(images);
  m.ema_update(clean, t);
  const Tensor<float> feats = m.eval_features(images, &clean);
  std::vector<std::int64_t> labels;
  for (auto i : task.train) labels.push_back(dataset_->labels[i]);
  const Tensor<float> protos = classifier::compute_prototypes(feats, labels, ids);
  if (config_.refresh_base_prototypes) {
    const Tensor<float> base_images = view_.images(base);
    std::vector<std::int64_t> base_labels;
    for (auto i : base) base_labels.push_back(dataset_->labels[i]);
    const auto base_ids = class_ids(0);
    m.classifier().replace_prototypes(
        base_ids, classifier::compute_prototypes(m.eval_features(base_images), base_labels, base_ids));
  }
  m.classifier().append_prototypes(ids, protos);

  instr_.incremental_updates += tensor::update_counter().load() - updates;
  instr_.base_reads_after_base += view_.reads(base) - base_reads;
  std::set<std::string> modified;
  m.visit([&](const std::string& name, Tensor<float>& x) {
    if (name == "classifier.W") return;
    if (before.at(name) != hash_tensor(name, x, 0)) modified.insert(name);
  });
  const auto& w = m.classifier().weights();
  if (std::memcmp(w.data().data(), old_rows.data().data(), old_rows.numel() * sizeof(float)) != 0) {
    modified.insert("classifier.old_rows");
  }
  if (w.rows() > old_rows.rows()) modified.insert("classifier.new_rows");
  instr_.modified.push_back(std::move(modified));
  check_backbone();
  record(evaluate(t));
}

EvalResult Experiment::evaluate(std::size_t t) {
  if (!model_) throw ContractError("evaluate: no trained model");
  const auto idx = stream_.test_upto(t);
  const Tensor<float> images = view_.images(idx);
  const Tensor<float> feats = model_->eval_features(images);
  std::unordered_set<std::uint32_t> base(stream_.tasks[0].classes.begin(), stream_.tasks[0].classes.end());
  EvalResult r;
  std::size_t base_total = 0, base_correct = 0, novel_total = 0, novel_correct = 0;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const std::int64_t pred = model_->classifier().predict(feats.row(i));
    const std::uint32_t label = dataset_->labels[idx[i]];
    const bool ok = pred == label;
    r.predictions.push_back(pred);
    r.correct += ok;
    if (base.count(label)) {
      ++base_total;
      base_correct += ok;
    } else {
      ++novel_total;
      novel_correct += ok;
    }
  }
  r.total = idx.size();
  r.accuracy = r.total ? double(r.correct) / double(r.total) : 0.0;
  r.base_accuracy = base_total ? double(base_correct) / double(base_total) : 0.0;
  r.novel_accuracy = novel_total ? double(novel_correct) / double(novel_total) : 0.0;
  return r;
}

void Experiment::record(const EvalResult& r) {
  accuracy_.push_back(r.accuracy);
  base_accuracy_.push_back(r.base_accuracy);
  novel_accuracy_.push_back(r.novel_accuracy);
  instr_.classifier_sizes.push_back(model_->classifier().size());
}

metrics::MetricsReport Experiment::report() const {
  metrics::MetricsReport r;
  r.accuracy = accuracy_;
  r.base_accuracy = base_accuracy_;
  r.novel_accuracy = novel_accuracy_;
  r.config_hash = config_hash(config_);
  r.seed = config_.seed;
  r.finalize();
  return r;
}

void Experiment::set_shots(std::uint32_t shots) {
  if (tasks_done() > 1) throw ContractError("set_shots: incremental tasks already ran");
  RunConfig next = config_;
  next.split.shots = shots;
  next.validate();
  data::TaskStream s = data::split_fscil(*dataset_, next.effective_split());
  if (s.pretrain != stream_.pretrain || s.tasks[0].train != stream_.tasks[0].train || s.test != stream_.test) {
    throw ContractError("set_shots: the new split changes pretraining, base or test data");
  }
  config_ = next;
  stream_ = std::move(s);
}

metrics::MetricsReport Experiment::run(const std::optional<std::filesystem::path>& dir, bool resume) {
  auto path = [&](const std::string& stem) { return *dir / (stem + ".aspc"); };
  if (dir) std::filesystem::create_directories(*dir);
  if (dir && resume) {
    std::optional<std::filesystem::path> newest;
    for (std::size_t t = stream_.tasks.size(); t-- > 0;) {
      if (std::filesystem::exists(path("task" + std::to_string(t)))) {
        newest = path("task" + std::to_string(t));
        break;
      }
    }
    if (!newest && std::filesystem::exists(path("pretrain"))) newest = path("pretrain");
    if (newest) *this = load(*newest, *dataset_);
  }
  if (stage_ == Stage::created) {
    pretrain();
    if (dir) save(path("pretrain"));
  }
  if (stage_ == Stage::pretrained) {
    train_base();
    if (dir) save(path("task0"));
  }
  for (std::size_t t = tasks_done(); t < stream_.tasks.size(); ++t) {
    incremental_step(t);
    if (dir) save(path("task" + std::to_string(t)));
  }
  return report();
}

// -- checkpoints ------------------------------------------------------------------------

void Experiment::save(const std::filesystem::path& path) {
  CheckpointFile f;
  f.put("config", to_json(config_).dump());
  nlohmann::json meta = {
      {"stage", static_cast<std::uint32_t>(stage_)},
      {"dataset_hash", dataset_hash(*dataset_)},
      {"accuracy", accuracy_},
      {"base_accuracy", base_accuracy_},
      {"novel_accuracy", novel_accuracy_},
      {"pretrain_loss", pretrain_loss_},
      {"base_loss", base_loss_},
      {"rng_root", {RngStream(config_.seed).state().key, RngStream(config_.seed).state().counter}},
      {"instrumentation",
       {{"backbone_fingerprint", instr_.backbone_fingerprint},
        {"backbone_mutations", instr_.backbone_mutations},
        {"incremental_updates", instr_.incremental_updates},
        {"base_reads_after_base", instr_.base_reads_after_base},
        {"classifier_sizes", instr_.classifier_sizes},
        {"modified", instr_.modified}}},
  };
  if (model_) {
    meta["classifier_mode"] = static_cast<std::uint32_t>(model_->classifier().mode());
    meta["p_avg"] = {{"sample_count", model_->p_avg().sample_count}, {"task_index", model_->p_avg().task_index}};
  }
  f.put("meta", meta.dump());
  f.put("stream", data::to_json(stream_).dump());
  f.put("view.reads", view_.read_counts());
  if (model_) {
    std::vector<std::uint64_t> ids;
    for (auto id : model_->classifier().class_ids()) ids.push_back(static_cast<std::uint64_t>(id));
    f.put("classifier.ids", std::move(ids));
    model_->visit([&](const std::string& name, Tensor<float>& t) { f.put(name, t); });
  } else if (backbone_) {
    backbone_->params().visit([&](const std::string& name, Tensor<float>& t) { f.put(name, t); });
  }
  f.save(path);
}

Experiment Experiment::load(const std::filesystem::path& path, const data::Dataset& dataset) {
  const CheckpointFile f = CheckpointFile::load(path);
  nlohmann::json meta;
  RunConfig config;
  try {
    config = config_from_json(nlohmann::json::parse(f.at("config").text));
    meta = nlohmann::json::parse(f.at("meta").text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("ASPC: malformed metadata: ") + e.what());
  }
  Experiment x(config, dataset);
  try {
    if (meta.at("dataset_hash").get<std::uint64_t>() != dataset_hash(dataset)) {
      throw ConfigError("checkpoint was written for a different dataset");
    }
    x.stream_ = data::stream_from_json(nlohmann::json::parse(f.at("stream").text));
    x.view_.restore_reads(f.at("view.reads").u64);
    meta.at("accuracy").get_to(x.accuracy_);
    meta.at("base_accuracy").get_to(x.base_accuracy_);
    meta.at("novel_accuracy").get_to(x.novel_accuracy_);
    meta.at("pretrain_loss").get_to(x.pretrain_loss_);
    meta.at("base_loss").get_to(x.base_loss_);
    const auto& in = meta.at("instrumentation");
    in.at("backbone_fingerprint").get_to(x.instr_.backbone_fingerprint);
    in.at("backbone_mutations").get_to(x.instr_.backbone_mutations);
    in.at("incremental_updates").get_to(x.instr_.incremental_updates);
    in.at("base_reads_after_base").get_to(x.instr_.base_reads_after_base);
    in.at("classifier_sizes").get_to(x.instr_.classifier_sizes);
    in.at("modified").get_to(x.instr_.modified);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("ASPC: malformed metadata: ") + e.what());
  }
  auto fill = [&](const std::string& name, Tensor<float>& t) {
    const auto& r = f.at(name);
    if (r.kind != CheckpointFile::Kind::tensor || r.tensor.shape() != t.shape()) {
      throw FormatError("ASPC: record '" + name + "' has shape " + tensor::shape_string(r.tensor.shape()) +
                        ", expected " + tensor::shape_string(t.shape()));
    }
    t = r.tensor;
  };
  const auto stage = static_cast<Stage>(meta.at("stage").get<std::uint32_t>());
  if (stage == Stage::created) return x;
  RngStream dummy(0);
  auto vit = vit::VisionTransformer<float>::init(config.vit, dummy);
  vit.params().visit(fill);
  x.backbone_ = vit;
  x.stage_ = Stage::pretrained;
  if (stage == Stage::trained) {
    std::vector<std::int64_t> ids;
    for (auto id : f.at("classifier.ids").u64) ids.push_back(static_cast<std::int64_t>(id));
    x.model_.emplace(vit, config.effective_prompt(), config.effective_loss(), x.class_ids(0), dummy);
    Model& m = *x.model_;
    m.visit([&](const std::string& name, Tensor<float>& t) {
      if (name != "classifier.W") fill(name, t);
    });
    const auto mode = static_cast<classifier::Mode>(meta.at("classifier_mode").get<std::uint32_t>());
    m.classifier() = classifier::ClassifierState<float>(mode, f.at("classifier.W").tensor, ids);
    m.p_avg().sample_count = meta.at("p_avg").at("sample_count").get<std::size_t>();
    m.p_avg().task_index = meta.at("p_avg").at("task_index").get<std::size_t>();
    x.stage_ = Stage::trained;
  }
  return x;
}

metrics::MetricsReport run_experiment(const RunConfig& config) {
  const data::Dataset ds = data::generate(config.data);
  Experiment x(config, ds);
  return x.run();
}

}  // namespace asp::runner
