#include <algorithm>
#include <cmath>
#include <map>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>

#include "internal.hpp"
#include "polyprobe/core/checkpoint.hpp"
#include "polyprobe/core/error.hpp"
#include "polyprobe/core/parallel.hpp"
#include "polyprobe/core/rng.hpp"
#include "polyprobe/interference/interference.hpp"
#include "polyprobe/interventions/interventions.hpp"
#include "polyprobe/model/model_io.hpp"
#include "polyprobe/model/training.hpp"

namespace polyprobe::harness::detail {

namespace iv = interventions;
namespace itf = interference;
using model::TokenId;

void write_json(const std::filesystem::path& path, const json& j) { core::write_file(path, j.dump(1) + "\n"); }

json read_json(const std::filesystem::path& path) {
  json j = json::parse(core::read_file(path), nullptr, false);
  require(!j.is_discarded(), ErrorCode::CorruptFile, path.string() + " is not valid JSON");
  return j;
}

void write_jsonl(const std::filesystem::path& path, const json& header, const std::vector<json>& lines) {
  std::string out = header.dump();
  out += '\n';
  for (const auto& l : lines) {
    out += l.dump();
    out += '\n';
  }
  core::write_file(path, out);
}

std::string fmt(double x) { return json(x).dump(); }

namespace {

core::Checkpoint stamped(core::Checkpoint c, const Run& run) {
  c.header["provenance"] = run.provenance();
  return c;
}

const char* kTags[] = {"a", "b"};

std::uint64_t stream(const Run& run, std::string_view label) {
  return core::Rng(run.seeds().experiment).split(label).next_u64();
}

model::FrozenNorms corpus_norms(const Run& run, const model::Transformer& m, const model::Corpus& corpus) {
  return model::estimate_frozen_norms(
      m, model::sample_windows(corpus, 64, run.config().targets.prompt_len, stream(run, "frozen_norms")));
}

sae::GlossTable load_glosses(const Run& run, const std::string& tag, const model::Site& site) {
  return sae::read_glosses(core::read_file(run.path("glosses_" + tag + ".jsonl")), site);
}

std::map<std::size_t, std::vector<TokenId>> token_sets(const json& analysis) {
  std::map<std::size_t, std::vector<TokenId>> out;
  for (const auto& e : analysis.at("token_sets")) {
    out[e.at("feature").get<std::size_t>()] = e.at("tokens").get<std::vector<TokenId>>();
  }
  return out;
}

}  // namespace

CorpusArtifact load_corpus(const Run& run) {
  const json j = read_json(run.path("corpus.json"));
  return {j.at("spec").get<model::CorpusSpec>(), j.at("sequences").get<model::Corpus>()};
}

model::Transformer load_model(const Run& run, const std::string& tag) {
  return model::load_model(run.path("model_" + tag + ".ckpt"));
}

sae::Sae load_sae(const Run& run, const std::string& tag) {
  return sae::sae_from_checkpoint(core::load_checkpoint(run.path("sae_" + tag + ".ckpt")));
}

void gen_corpus(const Run& run) {
  const auto& c = run.config();
  const auto spec = model::make_planted_spec(c.model.vocab_size, c.corpus.n_groups, c.corpus.group_size,
                                             c.corpus.n_sequences, c.corpus.seq_len, run.seeds().corpus);
  const auto sequences = model::synth_corpus(spec);
  write_json(run.path("corpus.json"), json{{"provenance", run.provenance()}, {"spec", spec}, {"sequences", sequences}});
}

void train_models(const Run& run) {
  const auto& c = run.config();
  const auto corpus = load_corpus(run);
  json reports = json::object();
  for (const std::string tag : kTags) {
    model::ModelConfig mc = c.model;
    mc.seed = tag == "a" ? run.seeds().model_a : run.seeds().model_b;
    model::TrainHyper h = c.train;
    h.seed = core::Rng(run.seeds().train).split(tag).next_u64();
    const auto r = model::train(model::init_model(mc), corpus.sequences, h);
    core::save_checkpoint(run.path("model_" + tag + ".ckpt"), stamped(model::to_checkpoint(r.model), run));
    reports[tag] = {{"init_seed", mc.seed},
                    {"train_seed", h.seed},
                    {"initial_heldout_loss", r.report.initial_heldout_loss},
                    {"final_heldout_loss", r.report.final_heldout_loss},
                    {"step_losses", r.report.step_losses}};
  }
  write_json(run.path("train_report.json"), json{{"provenance", run.provenance()}, {"models", reports}});
}

void train_saes(const Run& run) {
  const auto& c = run.config();
  const auto corpus = load_corpus(run);
  json reports = json::object();
  for (const std::string tag : kTags) {
    const auto m = load_model(run, tag);
    const auto data = sae::harvest_activations(m, corpus.sequences, c.sae_site);
    sae::SaeConfig sc = c.sae;
    sc.seed = core::Rng(run.seeds().sae).split(tag).next_u64();
    const auto r = sae::train_sae(data, sc);
    core::save_checkpoint(run.path("sae_" + tag + ".ckpt"), stamped(sae::to_checkpoint(r.sae), run));
    reports[tag] = {{"seed", sc.seed},
                    {"site", c.sae_site.to_string()},
                    {"k", r.sae.k()},
                    {"rows", data.acts.rows()},
                    {"initial_heldout_mse", r.report.initial_heldout_mse},
                    {"final_heldout_mse", r.report.final_heldout_mse},
                    {"heldout_mean_l0", r.report.heldout_mean_l0},
                    {"worst_norm_deviation", r.report.worst_norm_deviation}};
  }
  write_json(run.path("sae_report.json"), json{{"provenance", run.provenance()}, {"saes", reports}});
}

namespace {

struct ModelAnalysis {
  sae::FeatureScan scan;
  std::vector<std::size_t> live;
  sae::GlossTable glosses;
  itf::InterferenceMatrix interference;
};

ModelAnalysis analyze_model(const Run& run, const std::string& tag, const CorpusArtifact& corpus,
                            const model::Transformer& m, const sae::Sae& s) {
  const auto& c = run.config();
  ModelAnalysis a{sae::scan_features(s, m, corpus.sequences), {}, {}, {}};
  a.live = a.scan.live_features();
  a.glosses = sae::synthesize_glosses(a.scan, corpus.spec, a.live);
  a.interference = itf::interference_matrix(s, a.live);
  core::save_checkpoint(run.path("interference_" + tag + ".ckpt"), stamped(itf::to_checkpoint(a.interference), run));

  std::string gl;
  for (const auto& [id, v] : a.glosses.vectors) {
    gl += json{{"feature_id", id}, {"site", a.glosses.site.to_string()}, {"vector", v}, {"config_hash", run.hash()}}
              .dump();
    gl += '\n';
  }
  core::write_file(run.path("glosses_" + tag + ".jsonl"), gl);

  json sets = json::array();
  for (std::size_t f : a.live) {
    sets.push_back({{"feature", f}, {"tokens", sae::top_activating_tokens(a.scan, f, 0.8).tokens}});
  }
  json semantic = json::array();
  json by_interference = json::array();
  for (double cutoff : c.analysis.cutoffs) {
    semantic.push_back(itf::cluster_glosses(a.glosses, cutoff));
    by_interference.push_back(itf::cluster_interference(a.interference, cutoff));
  }
  write_json(run.path("analysis_" + tag + ".json"), json{{"provenance", run.provenance()},
                                                         {"site", s.site.to_string()},
                                                         {"live", a.live},
                                                         {"token_sets", sets},
                                                         {"semantic_clusters", semantic},
                                                         {"interference_clusters", by_interference}});
  return a;
}

struct Qualified {
  std::size_t feature = 0;
  std::vector<TokenId> tokens;
  std::vector<model::Sequence> prompts;
  std::vector<double> baseline_c;
  std::vector<itf::BinCandidates> bins;
};

// Corpus windows free of T_f whose baseline c(O, T_f) clears the floor.
std::optional<Qualified> qualify(const Run& run, const model::Transformer& m, const model::Corpus& corpus,
                                 const eval::EmbeddingTable& emb, std::size_t f, std::vector<TokenId> tokens,
                                 std::vector<itf::BinCandidates> bins) {
  const auto& t = run.config().targets;
  Qualified q{f, std::move(tokens), {}, {}, std::move(bins)};
  const auto profile = eval::target_profile(q.tokens, emb);
  const std::set<TokenId> excluded(q.tokens.begin(), q.tokens.end());
  const auto pool = model::sample_windows(corpus, t.prompt_pool, t.prompt_len,
                                          core::Rng(stream(run, "prompts")).split(f).next_u64());
  for (const auto& w : pool) {
    if (q.prompts.size() == t.prompts_per_target) {
      break;
    }
    if (std::any_of(w.begin(), w.end(), [&](TokenId x) { return excluded.count(x) > 0; })) {
      continue;
    }
    const double c0 = eval::weighted_cosine(iv::baseline(m, w), profile);
    if (c0 > t.baseline_floor) {
      q.prompts.push_back(w);
      q.baseline_c.push_back(c0);
    }
  }
  if (q.prompts.size() < t.prompts_per_target) {
    return std::nullopt;
  }
  return q;
}

json select_targets(const Run& run, const CorpusArtifact& corpus, const model::Transformer& m, const sae::Sae& s,
                    const ModelAnalysis& a) {
  const auto& c = run.config();
  const auto clusters = itf::cluster_glosses(a.glosses, c.analysis.relevancy_cutoff);
  const auto emb = eval::embedding_table(m);
  auto order = a.live;
  core::Rng(stream(run, "target_order")).shuffle(order);

  const auto found = core::parallel_map(order.size(), [&](std::size_t i) -> std::optional<Qualified> {
    const std::size_t f = order[i];
    auto bins = itf::sample_interference_pairs(f, clusters, a.interference, a.glosses, c.bins,
                                               c.analysis.relevancy_cutoff, c.targets.per_bin, stream(run, "pairs"));
    if (std::any_of(bins.begin(), bins.end(), [](const auto& b) { return b.empty(); })) {
      return std::nullopt;
    }
    return qualify(run, m, corpus.sequences, emb, f, sae::top_activating_tokens(a.scan, f, 0.8).tokens,
                   std::move(bins));
  });
  std::vector<Qualified> qualified;
  for (const auto& q : found) {
    if (q) {
      qualified.push_back(*q);
    }
  }

  json prefilter = nullptr;
  std::set<std::size_t> kept;
  if (c.steering.prefilter) {
    const iv::Transporter tr(m, corpus_norms(run, m, corpus.sequences));
    std::vector<iv::TargetContext> ctx;
    for (const auto& q : qualified) {
      ctx.push_back({q.feature, eval::target_profile(q.tokens, emb), q.prompts});
    }
    const auto r = iv::prefilter_targets(m, s, tr, ctx, c.steering.prefilter_threshold, c.steering.feature_grid,
                                         c.steering.guard_tv);
    kept.insert(r.kept.begin(), r.kept.end());
    prefilter = r;
  } else {
    for (const auto& q : qualified) {
      kept.insert(q.feature);
    }
  }

  json targets = json::array();
  for (const auto& q : qualified) {
    if (!kept.count(q.feature) || targets.size() == c.targets.max_targets) {
      continue;
    }
    json bins = json::array();
    for (const auto& b : q.bins) {
      json inter = json::array();
      for (std::size_t j : b.sampled) {
        inter.push_back(a.interference.at(q.feature, j));
      }
      bins.push_back({{"label", b.bin.label()}, {"eligible", b.eligible.size()}, {"sampled", b.sampled},
                      {"interference", inter}});
    }
    targets.push_back({{"feature", q.feature},
                       {"tokens", q.tokens},
                       {"prompts", q.prompts},
                       {"baseline_c", q.baseline_c},
                       {"bins", bins}});
  }
  return json{{"provenance", run.provenance()},
              {"considered", order.size()},
              {"qualified", qualified.size()},
              {"prefilter", prefilter},
              {"selected", targets.size()},
              {"underpowered", targets.size() < c.targets.min_targets},
              {"targets", targets}};
}

}  // namespace

void analyze(const Run& run) {
  const auto& c = run.config();
  const auto corpus = load_corpus(run);
  const auto model_a = load_model(run, "a");
  const auto sae_a = load_sae(run, "a");
  const auto a = analyze_model(run, "a", corpus, model_a, sae_a);
  const auto model_b = load_model(run, "b");
  const auto sae_b = load_sae(run, "b");
  const auto b = analyze_model(run, "b", corpus, model_b, sae_b);

  const auto neuron_clusters = itf::cluster_glosses(a.glosses, c.analysis.neuron_cutoff);
  const auto profiles =
      itf::neuron_polysemanticity(sae_a, neuron_clusters, c.analysis.neuron_threshold, c.analysis.neuron_top);
  std::map<std::size_t, std::size_t> histogram;
  for (const auto& p : profiles) {
    ++histogram[p.degree()];
  }
  json hist = json::array();
  for (const auto& [d, n] : histogram) {
    hist.push_back({{"degree", d}, {"neurons", n}});
  }
  write_json(run.path("neurons.json"), json{{"provenance", run.provenance()},
                                            {"cutoff", c.analysis.neuron_cutoff},
                                            {"threshold", c.analysis.neuron_threshold},
                                            {"top", c.analysis.neuron_top},
                                            {"clusters", neuron_clusters},
                                            {"profiles", profiles},
                                            {"degree_histogram", hist}});

  const itf::PairArtifacts pa{a.interference, a.glosses};
  const itf::PairArtifacts pb{b.interference, b.glosses};
  const auto& t = c.analysis.pairs;
  const auto qa = itf::qualifying_pairs(pa, t);
  const auto qb = itf::qualifying_pairs(pb, t);
  const auto shared = itf::mine_shared_pairs(pa, pb, t);
  const auto self = itf::mine_shared_pairs(pa, pa, t);
  std::size_t matched_self = 0;
  for (const auto& p : self) {
    matched_self += p.a.i == p.b.i && p.a.j == p.b.j;
  }
  auto pairs_json = [](const std::vector<itf::WithinPair>& ps) {
    json out = json::array();
    for (const auto& p : ps) {
      out.push_back({{"i", p.i}, {"j", p.j}, {"interference", p.interference}, {"semantic", p.semantic}});
    }
    return out;
  };
  write_json(run.path("shared_pairs.json"),
             json{{"provenance", run.provenance()},
                  {"thresholds", {{"interference", t.interference}, {"semantic", t.semantic}, {"cross", t.cross}}},
                  {"qualifying_a", pairs_json(qa)},
                  {"qualifying_b", pairs_json(qb)},
                  {"shared", shared},
                  {"self_check", {{"qualifying", qa.size()}, {"self_matches", self.size()}, {"identity", matched_self}}}});

  write_json(run.path("targets.json"), select_targets(run, corpus, model_a, sae_a, a));
}

namespace {

// Everything an intervention family reads back from the analysis.
struct Lab {
  CorpusArtifact corpus;
  model::Transformer model;
  sae::Sae sae;
  sae::GlossTable glosses;
  itf::InterferenceMatrix interference;
  eval::EmbeddingTable emb;
  json targets;
};

Lab open_lab(const Run& run) {
  Lab lab{load_corpus(run), load_model(run, "a"), load_sae(run, "a"), {}, {}, {}, read_json(run.path("targets.json"))};
  lab.glosses = load_glosses(run, "a", lab.sae.site);
  lab.interference = itf::interference_from_checkpoint(core::load_checkpoint(run.path("interference_a.ckpt")));
  lab.emb = eval::embedding_table(lab.model);
  return lab;
}

struct Trial {
  std::size_t target_index = 0;
  std::string condition;  // "bin", "original", "random"
  std::optional<std::size_t> bin;
  std::optional<std::size_t> candidate;
};

std::vector<Trial> plan_trials(const json& targets) {
  std::vector<Trial> out;
  for (std::size_t ti = 0; ti < targets.size(); ++ti) {
    const auto& bins = targets[ti].at("bins");
    for (std::size_t b = 0; b < bins.size(); ++b) {
      for (const auto& j : bins[b].at("sampled")) {
        out.push_back({ti, "bin", b, j.get<std::size_t>()});
      }
    }
    out.push_back({ti, "original", std::nullopt, targets[ti].at("feature").get<std::size_t>()});
    out.push_back({ti, "random", std::nullopt, std::nullopt});
  }
  return out;
}

json trial_header(const Run& run, const Lab& lab, const std::string& family, std::size_t id, const Trial& t) {
  const json& target = lab.targets.at("targets")[t.target_index];
  const std::size_t f = target.at("feature").get<std::size_t>();
  json line{{"config_hash", run.hash()}, {"family", family},        {"trial", id},
            {"target", f},               {"condition", t.condition}, {"bin", nullptr},
            {"bin_label", nullptr},      {"midpoint", nullptr},     {"candidate", nullptr},
            {"interference", nullptr},   {"semantic", nullptr}};
  if (t.bin) {
    const auto& bin = run.config().bins[*t.bin];
    line["bin"] = *t.bin;
    line["bin_label"] = bin.label();
    line["midpoint"] = bin.midpoint();
  }
  if (t.candidate) {
    line["candidate"] = *t.candidate;
    line["interference"] = lab.interference.at(f, *t.candidate);
    line["semantic"] = itf::semantic_relatedness(lab.glosses, f, *t.candidate);
  }
  return line;
}

std::vector<double> random_unit(std::uint64_t seed, std::size_t d) {
  core::Rng rng(seed);
  std::vector<double> v(d);
  for (double& x : v) {
    x = rng.normal();
  }
  const double n = std::sqrt(std::inner_product(v.begin(), v.end(), v.begin(), 0.0));
  for (double& x : v) {
    x /= n;
  }
  return v;
}

// Mean metric value over the prompts where it is defined.
void finish_line(json& line, json prompts) {
  double sum = 0.0;
  std::size_t n = 0;
  for (const auto& p : prompts) {
    if (p.contains("value") && !p.at("value").is_null()) {
      sum += p.at("value").get<double>();
      ++n;
    }
  }
  line["prompts"] = std::move(prompts);
  line["n_defined"] = n;
  line["value"] = n > 0 ? json(sum / static_cast<double>(n)) : json(nullptr);
}

json error_json(const Error& e) { return json{{"code", std::string(error_code_name(e.code()))}, {"message", e.what()}}; }

json header_line(const Run& run, const std::string& family) {
  json h = run.provenance();
  h["kind"] = "header";
  h["family"] = family;
  return h;
}

}  // namespace

void intervene_steering(const Run& run, bool gradient) {
  const auto& c = run.config();
  const std::string family = gradient ? "gradient" : "feature";
  const Lab lab = open_lab(run);
  const iv::Transporter tr(lab.model, corpus_norms(run, lab.model, lab.corpus.sequences));
  std::optional<sae::FeatureScan> scan;
  if (gradient) {
    scan = sae::scan_features(lab.sae, lab.model, lab.corpus.sequences);
  }
  const auto& grid = gradient ? c.steering.gradient_grid : c.steering.feature_grid;
  const auto trials = plan_trials(lab.targets.at("targets"));

  const auto lines = core::parallel_map(trials.size(), [&](std::size_t id) {
    const Trial& t = trials[id];
    json line = trial_header(run, lab, family, id, t);
    const json& target = lab.targets.at("targets")[t.target_index];
    const std::size_t f = target.at("feature").get<std::size_t>();
    const auto profile = eval::target_profile(target.at("tokens").get<std::vector<TokenId>>(), lab.emb);
    iv::SteeringPlan plan;
    try {
      if (t.condition == "random") {
        plan = iv::steering_from_feature(lab.sae, f, lab.sae.site, tr);
        plan.raw = random_unit(core::Rng(stream(run, family + "_random")).split(f).next_u64(), lab.sae.d());
        plan.direction = plan.raw;
      } else if (gradient) {
        const auto record = sae::activation_records(lab.sae, lab.model, lab.corpus.sequences, *scan, *t.candidate, 1);
        plan = iv::steering_from_record(lab.model, lab.sae, record, iv::feature_probe(lab.sae, *t.candidate),
                                        lab.sae.site);
      } else {
        plan = iv::steering_from_feature(lab.sae, *t.candidate, lab.sae.site, tr);
      }
    } catch (const Error& e) {
      line["error"] = error_json(e);
      finish_line(line, json::array());
      return line;
    }
    line["plan"] = plan;
    json prompts = json::array();
    const auto& ps = target.at("prompts");
    for (std::size_t p = 0; p < ps.size(); ++p) {
      const auto prompt = ps[p].get<std::vector<TokenId>>();
      try {
        const auto r = iv::optimize_scale(lab.model, prompt, plan, grid, c.steering.metric, c.steering.guard_tv, profile);
        prompts.push_back({{"prompt", p},
                           {"best_alpha", r.best_alpha},
                           {"value", eval::metric_value(r.best.metrics, c.steering.metric)},
                           {"guard_violations", r.guard_violations},
                           {"total_variation", r.best.total_variation},
                           {"metrics", r.best.metrics}});
      } catch (const Error& e) {
        prompts.push_back({{"prompt", p}, {"error", error_json(e)}});
      }
    }
    finish_line(line, std::move(prompts));
    return line;
  });
  write_jsonl(run.path("outcomes_" + family + ".jsonl"), header_line(run, family), lines);
}

void intervene_inject(const Run& run) {
  const auto& c = run.config();
  const Lab lab = open_lab(run);
  const auto scan = sae::scan_features(lab.sae, lab.model, lab.corpus.sequences);
  const auto trials = plan_trials(lab.targets.at("targets"));
  const iv::SnippetPolicy policy{c.injection.ratio, c.injection.max_len};

  auto snippet_of = [&](std::size_t feature) {
    const auto record = sae::activation_records(lab.sae, lab.model, lab.corpus.sequences, scan, feature, 1);
    auto spec = iv::extract_snippet(record.windows.front(), policy);
    spec.separator = c.injection.separator;
    return spec;
  };

  const auto lines = core::parallel_map(trials.size(), [&](std::size_t id) {
    const Trial& t = trials[id];
    json line = trial_header(run, lab, "inject", id, t);
    const json& target = lab.targets.at("targets")[t.target_index];
    const std::size_t f = target.at("feature").get<std::size_t>();
    const auto tokens = target.at("tokens").get<std::vector<TokenId>>();
    const auto profile = eval::target_profile(tokens, lab.emb);
    iv::InjectionSpec spec;
    try {
      if (t.condition == "random") {
        // Same length as the target's own snippet, tokens outside T_f.
        const std::size_t len = snippet_of(f).snippet.size();
        const std::set<TokenId> excluded(tokens.begin(), tokens.end());
        core::Rng rng = core::Rng(stream(run, "inject_random")).split(f);
        while (spec.snippet.size() < len) {
          const auto tok = static_cast<TokenId>(rng.below(lab.model.config.vocab_size));
          if (!excluded.count(tok)) {
            spec.snippet.push_back(tok);
          }
        }
        spec.separator = c.injection.separator;
        spec.feature = f;
      } else {
        spec = snippet_of(*t.candidate);
        spec.allow_overlap = t.condition == "original";
      }
    } catch (const Error& e) {
      line["error"] = error_json(e);
      finish_line(line, json::array());
      return line;
    }
    line["snippet"] = spec;
    json prompts = json::array();
    const auto& ps = target.at("prompts");
    for (std::size_t p = 0; p < ps.size(); ++p) {
      const auto prompt = ps[p].get<std::vector<TokenId>>();
      try {
        const auto o = iv::prompt_inject(lab.model, prompt, spec, profile);
        const double v = eval::metric_value(o.metrics, c.steering.metric);
        prompts.push_back({{"prompt", p},
                           {"value", std::isnan(v) ? json(nullptr) : json(v)},
                           {"total_variation", o.total_variation},
                           {"metrics", o.metrics}});
      } catch (const Error& e) {
        prompts.push_back({{"prompt", p}, {"error", error_json(e)}});
      }
    }
    finish_line(line, std::move(prompts));
    return line;
  });
  write_jsonl(run.path("outcomes_inject.jsonl"), header_line(run, "inject"), lines);
}

void intervene_neuron(const Run& run) {
  const auto& c = run.config();
  const auto corpus = load_corpus(run);
  const auto m = load_model(run, "a");
  const auto s = load_sae(run, "a");
  const auto emb = eval::embedding_table(m);
  const json neurons = read_json(run.path("neurons.json"));
  const auto sets = token_sets(read_json(run.path("analysis_a.json")));
  const auto clusters = neurons.at("clusters").get<itf::FeatureCluster>();

  std::vector<eval::TargetProfile> cluster_targets;
  for (const auto& members : clusters.clusters) {
    std::set<TokenId> tokens;
    for (std::size_t f : members) {
      const auto it = sets.find(f);
      if (it != sets.end()) {
        tokens.insert(it->second.begin(), it->second.end());
      }
    }
    cluster_targets.push_back(eval::target_profile({tokens.begin(), tokens.end()}, emb));
  }
  const auto prompts =
      model::sample_windows(corpus.sequences, c.neuron.prompts, c.targets.prompt_len, stream(run, "neuron_prompts"));

  struct Job {
    std::size_t neuron;
    std::vector<std::pair<std::size_t, double>> connections;
    double scale;
    std::size_t prompt;
  };
  std::vector<Job> jobs;
  for (const auto& p : neurons.at("profiles")) {
    std::vector<std::pair<std::size_t, double>> conn;
    for (const auto& e : p.at("clusters")) {
      conn.emplace_back(e.at("cluster").get<std::size_t>(), e.at("alignment").get<double>());
    }
    if (conn.empty()) {
      continue;
    }
    for (double scale : c.neuron.scales) {
      for (std::size_t q = 0; q < prompts.size(); ++q) {
        jobs.push_back({p.at("neuron").get<std::size_t>(), conn, scale, q});
      }
    }
  }

  const auto lines = core::parallel_map(jobs.size(), [&](std::size_t id) {
    const Job& job = jobs[id];
    std::vector<eval::TargetProfile> targets;
    for (const auto& [cl, align] : job.connections) {
      targets.push_back(cluster_targets.at(cl));
    }
    const auto outcomes = iv::neuron_intervene(m, s.site, job.neuron, job.scale, prompts[job.prompt], targets);
    json out = json::array();
    for (std::size_t k = 0; k < outcomes.size(); ++k) {
      json o;
      iv::to_json(o, outcomes[k], true);
      o["cluster"] = job.connections[k].first;
      o["alignment"] = job.connections[k].second;
      out.push_back(std::move(o));
    }
    const char* kind = job.scale == 0.0 ? "mask" : job.scale > 1.0 ? "amplify" : job.scale == 1.0 ? "identity" : "attenuate";
    return json{{"config_hash", run.hash()},
                {"family", "neuron"},
                {"trial", id},
                {"site", s.site.to_string()},
                {"neuron", job.neuron},
                {"degree", job.connections.size()},
                {"scale", job.scale},
                {"kind", kind},
                {"prompt", job.prompt},
                {"prompt_tokens", prompts[job.prompt]},
                {"outcomes", out}};
  });
  write_jsonl(run.path("outcomes_neuron.jsonl"), header_line(run, "neuron"), lines);
}

}  // namespace polyprobe::harness::detail
