#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include "asp/errors.hpp"
#include "asp/runner/checkpoint.hpp"
#include "asp/runner/runner.hpp"

using namespace asp;
using namespace asp::runner;
namespace fs = std::filesystem;

namespace {

// 10 classes: 2 pretrain, 4 base, two 2-way tasks.
RunConfig micro_run(std::uint64_t seed = 1) {
  RunConfig c;
  c.vit.image_size = 8;
  c.vit.patch_size = 4;
  c.vit.embed_dim = 16;
  c.vit.num_layers = 2;
  c.vit.num_heads = 2;
  c.prompt.layers = {0, 1};
  c.prompt.tip_length = 2;
  c.prompt.tsp_length = 2;
  c.prompt.encoder_hidden = 16;
  c.optim.epochs = 1;
  c.optim.batch_size = 8;
  c.pretrain.epochs = 2;
  c.pretrain.batch_size = 8;
  c.data.num_classes = 10;
  c.data.per_class = 20;
  c.data.image_size = 8;
  c.data.seed = 4;
  c.split.pretrain_classes = 2;
  c.split.base_classes = 4;
  c.split.ways = 2;
  c.split.shots = 3;
  c.split.tasks = 2;
  c.split.test_per_class = 5;
  c.seed = seed;
  return c;
}

fs::path scratch(const std::string& name) {
  const auto dir = fs::temp_directory_path() / ("asp_runner_" + name);
  fs::remove_all(dir);
  fs::create_directories(dir);
  return dir;
}

}  // namespace

TEST_CASE("config: JSON round-trip, unknown keys and hashing") {
  const auto c = micro_run();
  CHECK(config_from_json(to_json(c)) == c);
  CHECK(config_from_json(nlohmann::json::parse(to_json(c).dump())) == c);
  CHECK(config_from_json(nlohmann::json::object()) == RunConfig{});
  auto j = to_json(c);
  j["vit"]["depth"] = 3;
  CHECK_THROWS_AS(config_from_json(j), ConfigError);
  CHECK_THROWS_AS(config_from_json(nlohmann::json{{"seed", "x"}}), ConfigError);
  auto d = c;
  d.prompt.alpha = 0.5;
  CHECK(config_hash(c) == config_hash(micro_run()));
  CHECK(config_hash(c) != config_hash(d));
}

TEST_CASE("ablation: names, parsing and the variant matrix") {
  const auto m = ablation_matrix();
  REQUIRE(m.size() == 5);
  const std::vector<std::string> names{"full", "no_tip", "no_tsp", "no_anchor", "diff_tip"};
  for (std::size_t i = 0; i < 5; ++i) {
    CHECK(m[i].name() == names[i]);
    CHECK(Ablation::from_name(names[i]) == m[i]);
  }
  CHECK(Ablation::from_name("no_tip+no_anchor").name() == "no_tip+no_anchor");
  CHECK_THROWS_AS(Ablation::from_name("no_everything"), ConfigError);
  CHECK_THROWS_AS(Ablation::from_name("no_tip+no_tsp").validate(), ConfigError);
  CHECK_THROWS_AS(Ablation::from_name("no_tip+diff_tip").validate(), ConfigError);

  RunConfig c;
  c.ablation = Ablation::from_name("no_anchor");
  CHECK(c.effective_loss().lambda == 0.0);
  c.ablation = Ablation::from_name("diff_tip");
  CHECK_FALSE(c.effective_prompt().tied_tip);
  c.ablation = Ablation::from_name("no_tsp");
  CHECK_FALSE(c.effective_prompt().use_tsp);
  CHECK(c.effective_prompt().use_tip);
}

TEST_CASE("ASPC: round-trip and corruption") {
  CheckpointFile f;
  tensor::Tensor<float> t({2, 3}, std::vector<float>{1, 2, 3, 4, 5, 6});
  f.put("w", t);
  f.put("ids", std::vector<std::uint64_t>{7, 0, ~0ull});
  f.put("meta", std::string("{\"a\":1}"));
  const auto bytes = f.encode();
  const auto back = CheckpointFile::decode(bytes);
  CHECK(back.encode() == bytes);
  CHECK(back.at("w").tensor.same_values(t));
  CHECK(back.at("ids").u64 == std::vector<std::uint64_t>{7, 0, ~0ull});
  CHECK(back.at("meta").text == "{\"a\":1}");
  CHECK_FALSE(back.contains("missing"));

  auto bad = bytes;
  bad[1] = 'Z';
  CHECK_THROWS_AS(CheckpointFile::decode(bad), FormatError);
  bad = bytes;
  bad[4] = 2;
  CHECK_THROWS_AS(CheckpointFile::decode(bad), FormatError);
  for (std::size_t cut : {std::size_t{3}, std::size_t{11}, bytes.size() / 2, bytes.size() - 1}) {
    CHECK_THROWS_AS(CheckpointFile::decode(std::span(bytes).first(cut)), FormatError);
  }
  bad = bytes;
  bad.push_back(0);
  CHECK_THROWS_AS(CheckpointFile::decode(bad), FormatError);
}

TEST_CASE("experiment: determinism, resume and checkpoint identity") {
  const auto c = micro_run();
  const auto ds = data::generate(c.data);
  Experiment a(c, ds);
  const auto ra = a.run();
  Experiment b(c, ds);
  const auto rb = b.run();
  CHECK(ra == rb);
  CHECK(metrics::to_json(ra).dump() == metrics::to_json(rb).dump());
  REQUIRE(ra.accuracy.size() == 3);

  // Interrupt after the base task, then resume from disk.
  const auto dir = scratch("resume");
  Experiment first(c, ds);
  first.pretrain();
  first.save(dir / "pretrain.aspc");
  first.train_base();
  first.save(dir / "task0.aspc");
  Experiment resumed(c, ds);
  CHECK(resumed.run(dir, true) == ra);

  // save -> load -> save is a byte identity.
  Experiment::load(dir / "task2.aspc", ds).save(dir / "again.aspc");
  std::ifstream x(dir / "task2.aspc", std::ios::binary), y(dir / "again.aspc", std::ios::binary);
  const std::string sx((std::istreambuf_iterator<char>(x)), {}), sy((std::istreambuf_iterator<char>(y)), {});
  CHECK(sx == sy);

  auto other = c;
  other.data.seed = 99;
  const auto ds2 = data::generate(other.data);
  CHECK_THROWS_AS(Experiment::load(dir / "task2.aspc", ds2), ConfigError);
  fs::remove_all(dir);
}

TEST_CASE("experiment: freeze and rehearsal-free instrumentation") {
  auto c = micro_run(2);
  c.split.tasks = 3;
  c.data.num_classes = 12;
  const auto ds = data::generate(c.data);
  Experiment e(c, ds);
  e.pretrain();
  CHECK_THROWS_AS(e.incremental_step(1), ContractError);
  e.train_base();
  CHECK_THROWS_AS(e.incremental_step(2), ContractError);
  for (std::size_t t = 1; t <= 3; ++t) e.incremental_step(t);
  const auto& in = e.instrumentation();
  CHECK(in.backbone_mutations == 0);
  CHECK(in.incremental_updates == 0);
  CHECK(in.base_reads_after_base == 0);
  CHECK(in.backbone_fingerprint == fingerprint(e.backbone().params()));
  REQUIRE(in.classifier_sizes.size() == 4);
  for (std::size_t t = 0; t <= 3; ++t) CHECK(in.classifier_sizes[t] == 4 + t * 2);
  REQUIRE(in.modified.size() == 3);
  const std::set<std::string> expected{"p_avg.0", "p_avg.1", "classifier.new_rows"};
  for (const auto& m : in.modified) CHECK(m == expected);
  CHECK_THROWS_AS(e.incremental_step(4), ContractError);
}

TEST_CASE("experiment: degenerate schedules and shot changes") {
  auto c = micro_run(3);
  c.split.tasks = 0;
  const auto ds = data::generate(c.data);
  Experiment only(c, ds);
  const auto r = only.run();
  CHECK(r.accuracy.size() == 1);
  CHECK(r.pd == 0.0);
  CHECK_FALSE(r.hacc.has_value());

  auto five = micro_run(3);
  five.data.num_classes = 16;
  five.split.tasks = 5;
  const auto ds5 = data::generate(five.data);
  Experiment e(five, ds5);
  e.pretrain();
  e.train_base();
  e.set_shots(1);
  CHECK(e.stream().tasks[1].train.size() == 2);
  CHECK_THROWS_AS(e.set_shots(40), ConfigError);
  const auto r5 = e.run();
  CHECK(r5.accuracy.size() == 6);
  CHECK(r5.hacc.has_value());
  CHECK_THROWS_AS(e.set_shots(3), ContractError);
}

TEST_CASE("experiment: frozen p_avg with alpha 1 keeps features fixed across tasks") {
  auto c = micro_run(4);
  c.prompt.alpha = 1.0;
  c.prompt.beta = 1.0;
  const auto ds = data::generate(c.data);
  Experiment e(c, ds);
  e.pretrain();
  e.train_base();
  const auto idx = e.stream().test_upto(0);
  const auto images = e.view().images(idx);
  const auto before = e.model().eval_features(images);
  e.incremental_step(1);
  e.incremental_step(2);
  CHECK(e.model().eval_features(images).same_values(before));
  for (const auto& m : e.instrumentation().modified) CHECK(m == std::set<std::string>{"classifier.new_rows"});
}

TEST_CASE("experiment: pretraining loss decreases and the trainable census") {
  auto c = micro_run(5);
  c.pretrain.epochs = 4;
  const auto ds = data::generate(c.data);
  Experiment e(c, ds);
  e.pretrain();
  const auto& loss = e.pretrain_loss();
  REQUIRE(loss.size() == 4);
  CHECK(loss.back() < loss.front());
  e.train_base();
  CHECK_FALSE(e.base_loss().empty());
  // After base training nothing is trainable.
  std::size_t trainable = 0;
  e.model().visit([&](const std::string&, tensor::Tensor<float>& x) { trainable += x.requires_grad(); });
  CHECK(trainable == 0);

  // The base-training census: invariant prompts, encoder and classifier, no backbone tensor.
  std::set<const tensor::Tensor<float>*> census;
  for (auto* p : e.model().trainable()) census.insert(p);
  std::set<std::string> kinds;
  e.model().visit([&](const std::string& name, tensor::Tensor<float>& x) {
    if (census.count(&x)) kinds.insert(name.substr(0, name.find('.')));
  });
  CHECK(kinds == std::set<std::string>{"tip", "encoder", "classifier"});
  CHECK(census.size() == e.model().trainable().size());
}

TEST_CASE("experiment: evaluate agrees with a per-sample recount") {
  auto c = micro_run(6);
  c.split.test_per_class = 5;
  const auto ds = data::generate(c.data);
  Experiment e(c, ds);
  e.pretrain();
  e.train_base();
  e.incremental_step(1);
  const auto r = e.evaluate(1);
  const auto idx = e.stream().test_upto(1);
  REQUIRE(idx.size() == 30);
  std::size_t correct = 0;
  for (std::size_t i = 0; i < idx.size(); ++i) {
    const std::vector<std::size_t> one{idx[i]};
    const auto f = e.model().eval_features(e.view().images(one));
    const auto pred = e.model().classifier().predict(f.row(0));
    CHECK(pred == r.predictions[i]);
    correct += pred == static_cast<std::int64_t>(ds.labels[idx[i]]);
  }
  CHECK(correct == r.correct);
  CHECK(r.total == 30);
  CHECK(r.accuracy == double(correct) / 30.0);
}

#ifdef ASP_CLI_PATH
namespace {

int run_cli(const std::string& args) {
  const std::string cmd = std::string(ASP_CLI_PATH) + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

void write_text(const fs::path& p, const std::string& s) { std::ofstream(p) << s; }

}  // namespace

TEST_CASE("cli: exit codes") {
  const auto dir = scratch("cli");
  const auto cfg = dir / "micro.json";
  write_text(cfg, to_json(micro_run()).dump());

  CHECK(run_cli("--help") == 0);
  CHECK(run_cli("run") == 2);
  CHECK(run_cli("frobnicate") == 2);

  write_text(dir / "bad.json", "{\"vit\": {\"depth\": 3}}");
  CHECK(run_cli("run --seed 0 --out-dir " + (dir / "o").string() + " --config " + (dir / "bad.json").string()) == 2);

  const auto data = dir / "d.aspd";
  CHECK(run_cli("gen --config " + cfg.string() + " --out " + data.string()) == 0);
  CHECK(fs::exists(data::split_sidecar_path(data)));
  {
    std::fstream f(data, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.put('Q');
  }
  CHECK(run_cli("run --seed 0 --out-dir " + (dir / "o").string() + " --config " + cfg.string() + " --data " +
                data.string()) == 3);
  write_text(dir / "junk.aspc", "ASPC garbage");
  CHECK(run_cli("metrics --checkpoint " + (dir / "junk.aspc").string()) == 3);

  CHECK(run_cli("run --seed 0 --out-dir " + (dir / "n").string() + " --config " + cfg.string() +
                " --pretrain-epochs 1 --lr 1e30") == 4);

  CHECK(run_cli("run --seed 0 --out-dir " + (dir / "ok").string() + " --config " + cfg.string()) == 0);
  CHECK(fs::exists(dir / "ok" / "report.json"));
  CHECK(run_cli("metrics --checkpoint " + (dir / "ok" / "checkpoints" / "task2.aspc").string()) == 0);
  fs::remove_all(dir);
}
#endif
