#include "polyprobe/harness/config.hpp"

#include <cmath>
#include <cstdio>
#include <set>

#include "polyprobe/core/checkpoint.hpp"
#include "polyprobe/core/error.hpp"
#include "polyprobe/core/rng.hpp"
#include "polyprobe/interventions/interventions.hpp"

namespace polyprobe::harness {

using nlohmann::json;

ExperimentConfig::ExperimentConfig() {
  train.lr = 0.3;
  train.steps = 1500;
  sae.lambda = 1.0;
  sae.steps = 1500;
  steering.feature_grid = interventions::feature_grid();
  steering.gradient_grid = interventions::gradient_grid();
}

Seeds derive_seeds(std::uint64_t master) {
  const core::Rng root(master);
  Seeds s;
  s.corpus = root.split("corpus").next_u64();
  s.model_a = root.split("model_a").next_u64();
  s.model_b = root.split("model_b").next_u64();
  s.train = root.split("train").next_u64();
  s.sae = root.split("sae").next_u64();
  s.experiment = root.split("experiment").next_u64();
  return s;
}

void to_json(json& j, const Seeds& s) {
  j = json{{"corpus", s.corpus}, {"model_a", s.model_a}, {"model_b", s.model_b},
           {"train", s.train},   {"sae", s.sae},         {"experiment", s.experiment}};
}

namespace {

json without_seed(json j) {
  j.erase("seed");
  return j;
}

json section(const json& j, const char* name) {
  if (!j.contains(name)) {
    return json::object();
  }
  const json& s = j.at(name);
  require(s.is_object(), ErrorCode::ConfigError, std::string("section '") + name + "' must be an object");
  return s;
}

// Rejects keys that the canonical form of the same section does not have.
void check_keys(const json& given, const json& canonical, const std::string& where) {
  for (const auto& [key, value] : given.items()) {
    if (!canonical.contains(key)) {
      fail(ErrorCode::ConfigError, "unknown key '" + key + "' in " + where);
    }
  }
}

template <class T>
T get_or(const json& j, const char* key, const T& fallback) {
  return j.contains(key) ? j.at(key).get<T>() : fallback;
}

json thresholds_json(const interference::PairThresholds& t) {
  return json{{"interference", t.interference}, {"semantic", t.semantic}, {"cross", t.cross}};
}

}  // namespace

json to_json(const ExperimentConfig& c) {
  json model;
  model::to_json(model, c.model);
  json train;
  model::to_json(train, c.train);
  json sae;
  sae::to_json(sae, c.sae);
  return json{
      {"run_id", c.run_id},
      {"seed", c.seed},
      {"model", without_seed(model)},
      {"train", without_seed(train)},
      {"corpus",
       {{"n_groups", c.corpus.n_groups},
        {"group_size", c.corpus.group_size},
        {"n_sequences", c.corpus.n_sequences},
        {"seq_len", c.corpus.seq_len}}},
      {"sae", without_seed(sae)},
      {"sae_site", c.sae_site.to_string()},
      {"analysis",
       {{"cutoffs", c.analysis.cutoffs},
        {"relevancy_cutoff", c.analysis.relevancy_cutoff},
        {"neuron_cutoff", c.analysis.neuron_cutoff},
        {"neuron_threshold", c.analysis.neuron_threshold},
        {"neuron_top", c.analysis.neuron_top},
        {"pairs", thresholds_json(c.analysis.pairs)}}},
      {"bins", c.bins},
      {"steering",
       {{"feature_grid", c.steering.feature_grid},
        {"gradient_grid", c.steering.gradient_grid},
        {"guard_tv", c.steering.guard_tv},
        {"metric", eval::metric_name(c.steering.metric)},
        {"prefilter", c.steering.prefilter},
        {"prefilter_threshold", c.steering.prefilter_threshold}}},
      {"targets",
       {{"max_targets", c.targets.max_targets},
        {"min_targets", c.targets.min_targets},
        {"per_bin", c.targets.per_bin},
        {"prompts_per_target", c.targets.prompts_per_target},
        {"prompt_len", c.targets.prompt_len},
        {"baseline_floor", c.targets.baseline_floor},
        {"prompt_pool", c.targets.prompt_pool}}},
      {"injection",
       {{"ratio", c.injection.ratio},
        {"max_len", c.injection.max_len},
        {"separator", c.injection.separator ? json(*c.injection.separator) : json(nullptr)}}},
      {"neuron", {{"scales", c.neuron.scales}, {"prompts", c.neuron.prompts}}},
      {"report", {{"resamples", c.report.resamples}, {"level", c.report.level}}},
  };
}

ExperimentConfig config_from_json(const json& j) {
  require(j.is_object(), ErrorCode::ConfigError, "config must be a JSON object");
  const ExperimentConfig d;
  const json canon = to_json(d);
  ExperimentConfig c;
  try {
    json top = canon;
    top["output_dir"] = "";
    check_keys(j, top, "config");
    for (const char* name : {"model", "train", "corpus", "sae", "analysis", "steering", "targets", "injection",
                             "neuron", "report"}) {
      check_keys(section(j, name), canon.at(name), std::string("'") + name + "'");
    }
    check_keys(section(section(j, "analysis"), "pairs"), canon.at("analysis").at("pairs"), "'analysis.pairs'");

    c.run_id = get_or(j, "run_id", d.run_id);
    c.seed = get_or(j, "seed", d.seed);
    if (j.contains("output_dir")) {
      c.output_dir = j.at("output_dir").get<std::string>();
    }

    json model = canon.at("model");
    model.update(section(j, "model"));
    model::from_json(model, c.model);
    json train = canon.at("train");
    train.update(section(j, "train"));
    model::from_json(train, c.train);
    json sae = canon.at("sae");
    sae.update(section(j, "sae"));
    sae::from_json(sae, c.sae);

    const json corpus = section(j, "corpus");
    c.corpus.n_groups = get_or(corpus, "n_groups", d.corpus.n_groups);
    c.corpus.group_size = get_or(corpus, "group_size", d.corpus.group_size);
    c.corpus.n_sequences = get_or(corpus, "n_sequences", d.corpus.n_sequences);
    c.corpus.seq_len = get_or(corpus, "seq_len", d.corpus.seq_len);

    if (j.contains("sae_site")) {
      c.sae_site = model::Site::parse(j.at("sae_site").get<std::string>());
    }

    const json an = section(j, "analysis");
    c.analysis.cutoffs = get_or(an, "cutoffs", d.analysis.cutoffs);
    c.analysis.relevancy_cutoff = get_or(an, "relevancy_cutoff", d.analysis.relevancy_cutoff);
    c.analysis.neuron_cutoff = get_or(an, "neuron_cutoff", d.analysis.neuron_cutoff);
    c.analysis.neuron_threshold = get_or(an, "neuron_threshold", d.analysis.neuron_threshold);
    c.analysis.neuron_top = get_or(an, "neuron_top", d.analysis.neuron_top);
    const json pairs = section(an, "pairs");
    c.analysis.pairs.interference = get_or(pairs, "interference", d.analysis.pairs.interference);
    c.analysis.pairs.semantic = get_or(pairs, "semantic", d.analysis.pairs.semantic);
    c.analysis.pairs.cross = get_or(pairs, "cross", d.analysis.pairs.cross);

    if (j.contains("bins")) {
      c.bins = j.at("bins").get<std::vector<interference::Bin>>();
    }

    const json st = section(j, "steering");
    c.steering.feature_grid = get_or(st, "feature_grid", d.steering.feature_grid);
    c.steering.gradient_grid = get_or(st, "gradient_grid", d.steering.gradient_grid);
    c.steering.guard_tv = get_or(st, "guard_tv", d.steering.guard_tv);
    if (st.contains("metric")) {
      c.steering.metric = eval::parse_metric(st.at("metric").get<std::string>());
    }
    c.steering.prefilter = get_or(st, "prefilter", d.steering.prefilter);
    c.steering.prefilter_threshold = get_or(st, "prefilter_threshold", d.steering.prefilter_threshold);

    const json tg = section(j, "targets");
    c.targets.max_targets = get_or(tg, "max_targets", d.targets.max_targets);
    c.targets.min_targets = get_or(tg, "min_targets", d.targets.min_targets);
    c.targets.per_bin = get_or(tg, "per_bin", d.targets.per_bin);
    c.targets.prompts_per_target = get_or(tg, "prompts_per_target", d.targets.prompts_per_target);
    c.targets.prompt_len = get_or(tg, "prompt_len", d.targets.prompt_len);
    c.targets.baseline_floor = get_or(tg, "baseline_floor", d.targets.baseline_floor);
    c.targets.prompt_pool = get_or(tg, "prompt_pool", d.targets.prompt_pool);

    const json inj = section(j, "injection");
    c.injection.ratio = get_or(inj, "ratio", d.injection.ratio);
    c.injection.max_len = get_or(inj, "max_len", d.injection.max_len);
    if (inj.contains("separator") && !inj.at("separator").is_null()) {
      c.injection.separator = inj.at("separator").get<model::TokenId>();
    }

    const json ne = section(j, "neuron");
    c.neuron.scales = get_or(ne, "scales", d.neuron.scales);
    c.neuron.prompts = get_or(ne, "prompts", d.neuron.prompts);

    const json rp = section(j, "report");
    c.report.resamples = get_or(rp, "resamples", d.report.resamples);
    c.report.level = get_or(rp, "level", d.report.level);
  } catch (const json::exception& e) {
    fail(ErrorCode::ConfigError, e.what());
  } catch (const Error& e) {
    if (e.code() == ErrorCode::ConfigError) {
      throw;
    }
    fail(ErrorCode::ConfigError, e.what());
  }
  validate(c);
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path) {
  std::string text;
  try {
    text = core::read_file(path);
  } catch (const Error& e) {
    fail(ErrorCode::ConfigError, e.what());
  }
  json j = json::parse(text, nullptr, false);
  require(!j.is_discarded(), ErrorCode::ConfigError, "config " + path.string() + " is not valid JSON");
  return config_from_json(j);
}

void validate(const ExperimentConfig& c) {
  auto check = [](bool ok, const std::string& what) { require(ok, ErrorCode::ConfigError, what); };
  try {
    c.model.validate();
    model::validate_site(c.model, c.sae_site);
  } catch (const Error& e) {
    fail(ErrorCode::ConfigError, e.what());
  }
  check(!c.run_id.empty(), "run_id must be non-empty");
  check(c.train.steps > 0 && c.train.batch > 0 && c.train.lr > 0.0, "train needs positive steps, batch and lr");
  check(c.corpus.n_groups > 0 && c.corpus.group_size > 0, "corpus needs at least one non-empty group");
  check(c.corpus.n_groups * c.corpus.group_size <= c.model.vocab_size, "corpus groups exceed the vocabulary");
  check(c.corpus.n_sequences > 0 && c.corpus.seq_len >= 2, "corpus needs sequences of length >= 2");
  check(c.corpus.seq_len <= c.model.context_length, "corpus sequences exceed the context length");
  check(c.sae.steps > 0 && c.sae.lambda >= 0.0, "sae needs positive steps and lambda >= 0");
  check(c.sae.k == 0 || c.sae.k >= c.model.d_model, "sae k must be >= d_model");
  check(!c.analysis.cutoffs.empty(), "analysis.cutoffs must be non-empty");
  for (double x : c.analysis.cutoffs) {
    check(x > 0.0 && x < 1.0, "cutoffs must lie in (0, 1)");
  }
  check(c.analysis.relevancy_cutoff > 0.0 && c.analysis.relevancy_cutoff < 1.0, "relevancy_cutoff must lie in (0, 1)");
  check(c.analysis.neuron_cutoff > 0.0 && c.analysis.neuron_cutoff < 1.0, "neuron_cutoff must lie in (0, 1)");
  check(c.analysis.neuron_top > 0, "neuron_top must be positive");
  check(!c.bins.empty(), "bins must be non-empty");
  for (const auto& b : c.bins) {
    check(b.lo < b.hi, "every bin needs lo < hi");
  }
  for (const auto* grid : {&c.steering.feature_grid, &c.steering.gradient_grid}) {
    check(!grid->empty(), "steering grids must be non-empty");
    for (double a : *grid) {
      check(std::abs(a) <= interventions::kMaxAlpha, "steering scales must lie in [-20, 20]");
    }
  }
  check(c.steering.guard_tv > 0.0, "guard_tv must be positive");
  check(c.targets.max_targets >= c.targets.min_targets && c.targets.max_targets > 0, "max_targets < min_targets");
  check(c.targets.per_bin > 0 && c.targets.prompts_per_target > 0, "per_bin and prompts_per_target must be positive");
  check(c.targets.prompt_len > 0 && c.targets.prompt_len <= c.corpus.seq_len, "prompt_len must be in [1, seq_len]");
  check(c.targets.prompt_pool >= c.targets.prompts_per_target, "prompt_pool smaller than prompts_per_target");
  check(c.injection.ratio > 0.0 && c.injection.ratio <= 1.0, "injection.ratio must lie in (0, 1]");
  const std::size_t snippet_cap = c.injection.max_len > 0 ? c.injection.max_len : sae::kRecordWindow;
  check(c.targets.prompt_len + snippet_cap + 1 <= c.model.context_length,
        "prompt plus snippet exceeds the context length");
  check(!c.injection.separator || *c.injection.separator < c.model.vocab_size, "separator outside the vocabulary");
  check(!c.neuron.scales.empty() && c.neuron.prompts > 0, "neuron study needs scales and prompts");
  for (double s : c.neuron.scales) {
    check(s >= 0.0 && s <= interventions::kMaxAlpha, "neuron scales must lie in [0, 20]");
  }
  check(c.report.resamples > 0 && c.report.level > 0.0 && c.report.level < 1.0, "bad report settings");
}

std::string config_hash(const ExperimentConfig& c) {
  char buf[17];
  std::snprintf(buf, sizeof buf, "%016llx",
                static_cast<unsigned long long>(core::fnv1a64(to_json(c).dump())));
  return buf;
}

}  // namespace polyprobe::harness
