#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>

#include "polyprobe/core/checkpoint.hpp"
#include "polyprobe/harness/config.hpp"
#include "polyprobe/harness/pipeline.hpp"
#include "polyprobe/interference/interference.hpp"
#include "polyprobe/model/model_io.hpp"
#include "polyprobe/model/training.hpp"
#include "polyprobe/sae/sae.hpp"
#include "test_util.hpp"

using namespace polyprobe;
using namespace polyprobe::harness;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name) {
  const fs::path p = fs::temp_directory_path() / ("polyprobe_test_harness_" + name);
  fs::remove_all(p);
  return p;
}

json read(const fs::path& p) { return json::parse(core::read_file(p)); }

ErrorCode code_of(const std::function<void()>& f) {
  try {
    f();
  } catch (const Error& e) {
    return e.code();
  }
  FAIL("no error thrown");
  return ErrorCode::Io;
}

ExperimentConfig tiny() {
  ExperimentConfig c;
  c.run_id = "tiny";
  c.seed = 7;
  c.model.vocab_size = 64;
  c.model.d_model = 16;
  c.model.n_layers = 1;
  c.model.n_heads = 2;
  c.model.d_mlp = 32;
  c.model.context_length = 32;
  c.corpus = {4, 6, 64, 16};
  c.train.steps = 150;
  c.sae.k = 48;
  c.sae.steps = 150;
  c.targets.min_targets = 1;
  c.targets.max_targets = 4;
  c.targets.prompt_len = 8;
  c.targets.prompt_pool = 40;
  c.targets.prompts_per_target = 2;
  c.steering.feature_grid = {-4.0, -1.0, 1.0, 4.0};
  c.steering.gradient_grid = {-4.0, 4.0};
  c.injection.max_len = 4;
  c.neuron.scales = {0.0, 2.0};
  c.neuron.prompts = 1;
  c.report.resamples = 200;
  return c;
}

// One tiny pipeline shared by the cases below.
const fs::path& tiny_run() {
  static const fs::path dir = [] {
    const fs::path d = scratch("tiny");
    Run(tiny(), {d, false, true}).run_all();
    return d;
  }();
  return dir;
}

std::vector<json> outcomes(const std::string& family) {
  auto lines = read_jsonl(tiny_run() / ("outcomes_" + family + ".jsonl"));
  lines.erase(lines.begin());
  return lines;
}

}  // namespace

TEST_CASE("config: canonical json round-trips and hashes stably") {
  const ExperimentConfig d;
  const json j = to_json(d);
  CHECK(to_json(config_from_json(j)) == j);
  CHECK(config_hash(config_from_json(j)) == config_hash(d));
  CHECK(config_hash(d).size() == 16);
  CHECK(config_hash(d) == config_hash(ExperimentConfig{}));

  ExperimentConfig moved = d;
  moved.output_dir = "elsewhere";
  CHECK(config_hash(moved) == config_hash(d));
  ExperimentConfig reseeded = d;
  reseeded.seed = 2;
  CHECK(config_hash(reseeded) != config_hash(d));

  const ExperimentConfig t = config_from_json(to_json(tiny()));
  CHECK(config_hash(t) == config_hash(tiny()));
  CHECK(t.corpus.n_sequences == 64);
  CHECK(t.steering.gradient_grid == std::vector<double>{-4.0, 4.0});
}

TEST_CASE("config: partial documents take defaults") {
  const auto c = config_from_json(json{{"seed", 11}, {"train", {{"steps", 10}}}});
  CHECK(c.seed == 11);
  CHECK(c.train.steps == 10);
  CHECK(c.train.lr == ExperimentConfig{}.train.lr);
  CHECK(c.sae.lambda == ExperimentConfig{}.sae.lambda);
}

TEST_CASE("config: unknown keys, sub-seeds and bad values are ConfigError") {
  CHECK(code_of([] { config_from_json(json{{"sed", 1}}); }) == ErrorCode::ConfigError);
  CHECK(code_of([] { config_from_json(json{{"train", {{"stepz", 1}}}}); }) == ErrorCode::ConfigError);
  CHECK(code_of([] { config_from_json(json{{"analysis", {{"pairs", {{"bogus", 1}}}}}}); }) ==
        ErrorCode::ConfigError);
  CHECK(code_of([] { config_from_json(json{{"model", {{"seed", 3}}}}); }) == ErrorCode::ConfigError);
  CHECK(code_of([] { config_from_json(json{{"seed", "one"}}); }) == ErrorCode::ConfigError);
  CHECK(code_of([] { config_from_json(json::array()); }) == ErrorCode::ConfigError);

  auto bad = [](auto edit) {
    ExperimentConfig c;
    edit(c);
    return code_of([&] { validate(c); });
  };
  CHECK(bad([](ExperimentConfig& c) { c.analysis.cutoffs = {0.0}; }) == ErrorCode::ConfigError);
  CHECK(bad([](ExperimentConfig& c) { c.steering.feature_grid = {25.0}; }) == ErrorCode::ConfigError);
  CHECK(bad([](ExperimentConfig& c) { c.steering.guard_tv = 0.0; }) == ErrorCode::ConfigError);
  CHECK(bad([](ExperimentConfig& c) { c.targets.prompt_len = 1000; }) == ErrorCode::ConfigError);
  CHECK(bad([](ExperimentConfig& c) { c.neuron.scales = {30.0}; }) == ErrorCode::ConfigError);
  CHECK(bad([](ExperimentConfig& c) { c.injection.separator = 10000; }) == ErrorCode::ConfigError);
  CHECK(bad([](ExperimentConfig& c) { c.bins = {{0.5, 0.5}}; }) == ErrorCode::ConfigError);
  CHECK(bad([](ExperimentConfig& c) { c.model.d_model = 30; }) == ErrorCode::ConfigError);

  const fs::path p = scratch("badjson.json");
  core::write_file(p, "{\"seed\": ");
  CHECK(code_of([&] { load_config(p); }) == ErrorCode::ConfigError);
}

TEST_CASE("config: seed streams are deterministic and distinct") {
  const Seeds a = derive_seeds(5);
  const Seeds b = derive_seeds(5);
  CHECK(json(a) == json(b));
  CHECK(json(derive_seeds(6)) != json(a));
  const std::set<std::uint64_t> all{a.corpus, a.model_a, a.model_b, a.train, a.sae, a.experiment};
  CHECK(all.size() == 6);
}

TEST_CASE("stage names parse back") {
  for (Stage s : all_stages()) {
    CHECK(parse_stage(stage_name(s)) == s);
    CHECK_FALSE(stage_outputs(s).empty());
  }
  CHECK(all_stages().size() == 9);
  CHECK(code_of([] { parse_stage("train"); }) == ErrorCode::ConfigError);
}

TEST_CASE("run directory of another config is not overwritten") {
  const fs::path d = scratch("overwrite");
  ExperimentConfig c = tiny();
  Run(c, {d, false, true});
  const json before = read(d / "run.json");
  CHECK(before.at("config_hash") == config_hash(c));

  ExperimentConfig other = c;
  other.seed = 8;
  CHECK(code_of([&] { Run(other, {d, false, true}); }) == ErrorCode::ConfigError);
  CHECK(read(d / "run.json") == before);
  Run(c, {d, false, true});  // same config reopens

  Run forced(other, {d, true, true});
  CHECK(read(d / "run.json").at("config_hash") == config_hash(other));

  const fs::path foreign = scratch("foreign");
  fs::create_directories(foreign);
  core::write_file(foreign / "notes.txt", "x");
  CHECK(code_of([&] { Run(c, {foreign, false, true}); }) == ErrorCode::ConfigError);
}

TEST_CASE("stages fail with StageFailure naming the missing upstream") {
  const fs::path d = scratch("missing");
  Run r(tiny(), {d, false, true});
  try {
    r.execute(Stage::Analyze);
    FAIL("expected StageFailure");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::StageFailure);
    CHECK(std::string(e.what()).find("analyze: gen-corpus") != std::string::npos);
  }
  CHECK(r.execute(Stage::GenCorpus));
  CHECK(r.execute(Stage::TrainModel));
  try {
    r.execute(Stage::Analyze);
    FAIL("expected StageFailure");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::StageFailure);
    CHECK(std::string(e.what()).find("train-sae") != std::string::npos);
  }
  CHECK_FALSE(r.execute(Stage::GenCorpus));  // cached
  CHECK(r.cached(Stage::TrainModel));

  // A corrupted upstream artifact surfaces as a StageFailure of the consumer.
  const std::string bytes = core::read_file(d / "model_a.ckpt");
  core::write_file(d / "model_a.ckpt", bytes.substr(0, bytes.size() / 2));
  try {
    r.execute(Stage::TrainSae);
    FAIL("expected StageFailure");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::StageFailure);
    CHECK(std::string(e.what()).rfind("StageFailure: train-sae:", 0) == 0);
  }
  CHECK_FALSE(r.cached(Stage::TrainSae));
}

TEST_CASE("truncated checkpoints and logs are CorruptFile") {
  const fs::path d = tiny_run();
  const fs::path t = scratch("truncated");
  fs::create_directories(t);
  for (const std::string name : {"model_a.ckpt", "sae_a.ckpt", "interference_a.ckpt"}) {
    const std::string bytes = core::read_file(d / name);
    for (std::size_t cut : {std::size_t{0}, std::size_t{7}, bytes.size() / 2, bytes.size() - 1}) {
      core::write_file(t / name, bytes.substr(0, cut));
      CHECK(code_of([&] { core::load_checkpoint(t / name); }) == ErrorCode::CorruptFile);
    }
  }
  const std::string log = core::read_file(d / "outcomes_feature.jsonl");
  core::write_file(t / "log.jsonl", log.substr(0, log.size() - 5));
  CHECK(code_of([&] { read_jsonl(t / "log.jsonl"); }) == ErrorCode::CorruptFile);
}

TEST_CASE("every artifact carries the config hash") {
  const fs::path d = tiny_run();
  const std::string h = read(d / "run.json").at("config_hash");
  CHECK(h == config_hash(tiny()));
  for (const std::string name : {"corpus.json", "train_report.json", "sae_report.json", "analysis_a.json",
                                 "analysis_b.json", "neurons.json", "shared_pairs.json", "targets.json",
                                 "report.json"}) {
    CAPTURE(name);
    CHECK(read(d / name).at("provenance").at("config_hash") == h);
  }
  for (const std::string name : {"model_a.ckpt", "sae_b.ckpt", "interference_a.ckpt"}) {
    CAPTURE(name);
    CHECK(core::load_checkpoint(d / name).header.at("provenance").at("config_hash") == h);
  }
  for (const std::string f : {"feature", "gradient", "inject", "neuron"}) {
    const auto lines = read_jsonl(d / ("outcomes_" + f + ".jsonl"));
    REQUIRE_FALSE(lines.empty());
    CHECK(lines.front().at("kind") == "header");
    CHECK(lines.front().at("config_hash") == h);
    for (std::size_t i = 1; i < lines.size(); ++i) {
      CHECK(lines[i].at("config_hash") == h);
    }
  }
  for (const auto& g : read_jsonl(d / "glosses_a.jsonl")) {
    CHECK(g.at("config_hash") == h);
  }
  for (const std::string name : {"bins_feature.csv", "bins_gradient.csv", "bins_inject.csv", "neuron_groups.csv"}) {
    CHECK(core::read_file(d / name).rfind("# config_hash=" + h + "\n", 0) == 0);
  }
}

TEST_CASE("cached stages are reused and leave outputs untouched") {
  const fs::path d = tiny_run();
  const std::string report = core::read_file(d / "report.json");
  Run r(tiny(), {d, false, true});
  for (Stage s : all_stages()) {
    CHECK(r.cached(s));
    CHECK_FALSE(r.execute(s));
  }
  CHECK(core::read_file(d / "report.json") == report);
}

TEST_CASE("report statistics recompute from the outcome logs") {
  const json rep = read(tiny_run() / "report.json");
  const ExperimentConfig c = tiny();
  const Seeds seeds = derive_seeds(c.seed);
  for (const std::string f : {"feature", "gradient", "inject"}) {
    CAPTURE(f);
    const auto lines = outcomes(f);
    const json& s = rep.at("families").at(f);
    CHECK(summarize_family(lines, c, seeds) == s);

    // Bin means and counts, by hand.
    std::map<std::size_t, std::vector<double>> by_bin;
    std::map<std::string, std::vector<double>> by_cond;
    for (const auto& l : lines) {
      if (l.at("value").is_null()) {
        continue;
      }
      if (l.at("condition") == "bin") {
        by_bin[l.at("bin").get<std::size_t>()].push_back(l.at("value").get<double>());
      } else {
        by_cond[l.at("condition").get<std::string>()].push_back(l.at("value").get<double>());
      }
    }
    auto mean = [](const std::vector<double>& v) {
      return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
    };
    if (!s.at("bins").is_null()) {
      const auto& bins = s.at("bins").at("bins");
      REQUIRE(bins.size() == c.bins.size());
      for (std::size_t b = 0; b < bins.size(); ++b) {
        CHECK(bins[b].at("n").get<std::size_t>() == by_bin[b].size());
        if (!by_bin[b].empty()) {
          CHECK(bins[b].at("mean").get<double>() == doctest::Approx(mean(by_bin[b])).epsilon(1e-12));
        }
      }
    }
    for (const std::string cond : {"original", "random"}) {
      CHECK(s.at(cond).at("n").get<std::size_t>() == by_cond[cond].size());
      if (!by_cond[cond].empty()) {
        CHECK(s.at(cond).at("mean").get<double>() == doctest::Approx(mean(by_cond[cond])).epsilon(1e-12));
      }
    }
    // Every trial value is the mean of its defined per-prompt values.
    for (const auto& l : lines) {
      std::vector<double> v;
      for (const auto& p : l.at("prompts")) {
        if (p.contains("value") && !p.at("value").is_null()) {
          v.push_back(p.at("value").get<double>());
        }
      }
      CHECK(l.at("n_defined").get<std::size_t>() == v.size());
      if (v.empty()) {
        CHECK(l.at("value").is_null());
      } else {
        CHECK(l.at("value").get<double>() == doctest::Approx(mean(v)).epsilon(1e-12));
      }
    }
  }
  const auto neuron_lines = outcomes("neuron");
  CHECK(summarize_neurons(neuron_lines, c) == rep.at("neuron"));
  std::set<std::size_t> degrees;
  for (const auto& l : neuron_lines) {
    degrees.insert(l.at("degree").get<std::size_t>());
  }
  CHECK(rep.at("neuron").at("populated_groups").get<std::size_t>() == degrees.size());
}

TEST_CASE("checkpoints reproduce their models and interference") {
  const fs::path d = tiny_run();
  const ExperimentConfig c = tiny();
  const json train = read(d / "train_report.json").at("models").at("a");
  const json corpus = read(d / "corpus.json");

  model::ModelConfig mc = c.model;
  mc.seed = train.at("init_seed").get<std::uint64_t>();
  model::TrainHyper hyper = c.train;
  hyper.seed = train.at("train_seed").get<std::uint64_t>();
  const auto retrained =
      model::train(model::init_model(mc), corpus.at("sequences").get<model::Corpus>(), hyper).model;
  const auto loaded = model::load_model(d / "model_a.ckpt");
  const std::vector<model::TokenId> prompt{1, 5, 9, 2, 30, 17};
  const auto a = model::forward(retrained, prompt).final_logits;
  const auto b = model::forward(loaded, prompt).final_logits;
  REQUIRE(a.size() == b.size());
  for (std::size_t i = 0; i < a.size(); ++i) {
    CHECK(a[i] == b[i]);
  }

  const auto sae = sae::sae_from_checkpoint(core::load_checkpoint(d / "sae_a.ckpt"));
  const auto stored = interference::interference_from_checkpoint(core::load_checkpoint(d / "interference_a.ckpt"));
  const auto recomputed = interference::interference_matrix(sae, stored.features);
  CHECK(recomputed.features == stored.features);
  CHECK(std::equal(recomputed.values.values().begin(), recomputed.values.values().end(),
                   stored.values.values().begin(), stored.values.values().end()));
}

TEST_CASE("a fresh run of the same config is byte-identical") {
  const fs::path d = scratch("repeat");
  Run(tiny(), {d, false, true}).run_all();
  for (Stage s : all_stages()) {
    for (const auto& name : stage_outputs(s)) {
      CAPTURE(name);
      CHECK(core::read_file(d / name) == core::read_file(tiny_run() / name));
    }
  }
}
