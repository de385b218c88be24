#include <algorithm>
#include <map>
#include <numeric>
#include <set>

#include "internal.hpp"
#include "polyprobe/core/checkpoint.hpp"
#include "polyprobe/core/error.hpp"
#include "polyprobe/core/rng.hpp"
#include "polyprobe/eval/stats.hpp"

namespace polyprobe::harness {

using nlohmann::json;

namespace {

json condition_stats(const std::vector<double>& values, std::uint64_t seed, const ReportConfig& rc) {
  if (values.empty()) {
    return json{{"n", 0}, {"mean", nullptr}, {"ci", nullptr}};
  }
  const double mean = std::accumulate(values.begin(), values.end(), 0.0) / static_cast<double>(values.size());
  return json{{"n", values.size()}, {"mean", mean}, {"ci", eval::bootstrap_mean_ci(values, seed, rc.resamples, rc.level)}};
}

json quantiles(std::vector<double> v) {
  if (v.empty()) {
    return json{{"n", 0}, {"mean", nullptr}, {"q10", nullptr}, {"q50", nullptr}, {"q90", nullptr}};
  }
  std::sort(v.begin(), v.end());
  const double mean = std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  return json{{"n", v.size()},
              {"mean", mean},
              {"q10", eval::sorted_quantile(v, 0.1)},
              {"q50", eval::sorted_quantile(v, 0.5)},
              {"q90", eval::sorted_quantile(v, 0.9)}};
}

}  // namespace

json summarize_family(const std::vector<json>& lines, const ExperimentConfig& config, const Seeds& seeds) {
  const std::string family = lines.empty() ? "empty" : lines.front().at("family").get<std::string>();
  const core::Rng base = core::Rng(seeds.experiment).split("report").split(family);

  std::vector<eval::BinSample> samples;
  for (const auto& b : config.bins) {
    samples.push_back({b.label(), b.midpoint(), {}});
  }
  std::map<std::string, std::vector<double>> values;
  std::map<std::string, std::size_t> undefined;
  std::map<std::string, std::size_t> errors;
  std::map<std::string, std::pair<std::size_t, std::size_t>> w_up;  // condition -> (increases, prompts)
  for (const auto& line : lines) {
    const std::string cond = line.at("condition").get<std::string>();
    if (line.contains("error")) {
      ++errors[cond];
    }
    for (const auto& p : line.at("prompts")) {
      if (p.contains("metrics")) {
        const auto& m = p.at("metrics");
        auto& [up, n] = w_up[cond];
        up += m.at("w_after").get<double>() > m.at("w_before").get<double>();
        ++n;
      }
    }
    if (line.at("value").is_null()) {
      ++undefined[cond];
      continue;
    }
    const double v = line.at("value").get<double>();
    if (cond == "bin") {
      samples.at(line.at("bin").get<std::size_t>()).values.push_back(v);
    } else {
      values[cond].push_back(v);
    }
  }

  json out{{"family", family}, {"trials", lines.size()}, {"metric", eval::metric_name(config.steering.metric)}};
  std::optional<eval::BinSummary> bins;
  if (std::any_of(samples.begin(), samples.end(), [](const auto& s) { return !s.values.empty(); })) {
    bins = eval::bin_summary(samples, base.split("bins").next_u64(), config.report.resamples, config.report.level);
    out["bins"] = *bins;
    out["trend"] = {{"rho", bins->rho},
                    {"rho_ci", bins->rho_ci},
                    {"rho_pooled", bins->rho_pooled},
                    {"ci_excludes_zero", bins->rho_ci.excludes_zero()},
                    {"positive", bins->rho > 0.0 && bins->rho_ci.lo > 0.0}};
  } else {
    out["bins"] = nullptr;
    out["trend"] = nullptr;
  }
  for (const std::string cond : {"original", "random"}) {
    out[cond] = condition_stats(values[cond], base.split(cond).next_u64(), config.report);
  }
  if (bins && !values["original"].empty()) {
    double best = -std::numeric_limits<double>::infinity();
    for (const auto& b : bins->bins) {
      if (b.n > 0) {
        best = std::max(best, b.mean);
      }
    }
    out["original_ge_all_bins"] = out["original"]["mean"].get<double>() >= best;
  } else {
    out["original_ge_all_bins"] = nullptr;
  }
  json signs = json::object();
  for (const std::string cond : {"bin", "original", "random"}) {
    const auto [up, n] = w_up[cond];
    signs[cond] = {{"prompts", n}, {"w_increases", up}, {"p_value", n > 0 ? json(eval::sign_test_p(up, n)) : json(nullptr)}};
  }
  out["w_sign_test"] = signs;
  json dropped = json::object();
  for (const std::string cond : {"bin", "original", "random"}) {
    dropped[cond] = {{"undefined", undefined[cond]}, {"errors", errors[cond]}};
  }
  out["dropped"] = dropped;
  return out;
}

json summarize_neurons(const std::vector<json>& lines, const ExperimentConfig& config) {
  struct Cell {
    std::string kind;
    std::vector<double> delta_w;
    std::vector<double> delta_c;
  };
  std::map<std::size_t, std::map<double, Cell>> groups;
  std::map<std::size_t, std::set<std::size_t>> neurons;
  for (const auto& line : lines) {
    const std::size_t degree = line.at("degree").get<std::size_t>();
    const double scale = line.at("scale").get<double>();
    neurons[degree].insert(line.at("neuron").get<std::size_t>());
    Cell& cell = groups[degree][scale];
    cell.kind = line.at("kind").get<std::string>();
    for (const auto& o : line.at("outcomes")) {
      const auto& m = o.at("metrics");
      cell.delta_w.push_back(m.at("delta_w").get<double>());
      if (!m.at("delta_c").is_null()) {
        cell.delta_c.push_back(m.at("delta_c").get<double>());
      }
    }
  }
  json out = json::array();
  for (const auto& [degree, scales] : groups) {
    json rows = json::array();
    for (const auto& [scale, cell] : scales) {
      rows.push_back({{"scale", scale},
                      {"kind", cell.kind},
                      {"delta_w", quantiles(cell.delta_w)},
                      {"delta_c", quantiles(cell.delta_c)},
                      {"delta_w_values", cell.delta_w}});
    }
    out.push_back({{"degree", degree}, {"neurons", neurons[degree].size()}, {"scales", rows}});
  }
  return json{{"groups", out}, {"populated_groups", groups.size()}, {"scales", config.neuron.scales}};
}

namespace detail {

namespace {

std::vector<json> outcome_lines(const Run& run, const std::string& family) {
  auto lines = read_jsonl(run.path("outcomes_" + family + ".jsonl"));
  require(!lines.empty() && lines.front().value("kind", "") == "header", ErrorCode::CorruptFile,
          "outcomes_" + family + ".jsonl has no header");
  require(lines.front().at("config_hash") == run.hash(), ErrorCode::CorruptFile,
          "outcomes_" + family + ".jsonl belongs to another configuration");
  lines.erase(lines.begin());
  return lines;
}

std::string csv_preamble(const Run& run) {
  return "# config_hash=" + run.hash() + "\n# seeds=" + json(run.seeds()).dump() +
         "\n# config=" + to_json(run.config()).dump() + "\n";
}

std::string cell(const json& v) {
  if (v.is_null()) {
    return "";
  }
  if (v.is_number_float()) {
    return fmt(v.get<double>());
  }
  return v.is_string() ? v.get<std::string>() : v.dump();
}

std::string family_csv(const Run& run, const json& s) {
  std::string out = csv_preamble(run) + "row,label,midpoint,n,mean,ci_lo,ci_hi\n";
  auto row = [&](const std::string& kind, const json& label, const json& mid, const json& n, const json& mean,
                 const json& ci) {
    out += kind + ",\"" + cell(label) + "\"," + cell(mid) + "," + cell(n) + "," + cell(mean) + "," +
           (ci.is_null() ? "," : cell(ci[0]) + "," + cell(ci[1])) + "\n";
  };
  if (!s.at("bins").is_null()) {
    for (const auto& b : s.at("bins").at("bins")) {
      row("bin", b.at("label"), b.at("midpoint"), b.at("n"), b.at("n") == 0 ? json(nullptr) : b.at("mean"),
          b.at("n") == 0 ? json(nullptr) : b.at("ci"));
    }
  }
  for (const std::string cond : {"original", "random"}) {
    const auto& c = s.at(cond);
    row(cond, cond, nullptr, c.at("n"), c.at("mean"), c.at("ci"));
  }
  if (!s.at("trend").is_null()) {
    const auto& t = s.at("trend");
    row("spearman", "rho", nullptr, nullptr, t.at("rho"), t.at("rho_ci"));
    row("spearman_pooled", "rho_pooled", nullptr, nullptr, t.at("rho_pooled"), nullptr);
  }
  return out;
}

std::string neuron_csv(const Run& run, const json& s) {
  std::string out = csv_preamble(run) +
                    "degree,neurons,scale,kind,n,mean_delta_w,q10_delta_w,q50_delta_w,q90_delta_w,n_delta_c,"
                    "mean_delta_c\n";
  for (const auto& g : s.at("groups")) {
    for (const auto& r : g.at("scales")) {
      const auto& w = r.at("delta_w");
      const auto& c = r.at("delta_c");
      out += cell(g.at("degree")) + "," + cell(g.at("neurons")) + "," + cell(r.at("scale")) + "," +
             cell(r.at("kind")) + "," + cell(w.at("n")) + "," + cell(w.at("mean")) + "," + cell(w.at("q10")) + "," +
             cell(w.at("q50")) + "," + cell(w.at("q90")) + "," + cell(c.at("n")) + "," + cell(c.at("mean")) + "\n";
    }
  }
  return out;
}

json cluster_counts(const json& clusters) {
  json out = json::array();
  for (const auto& c : clusters) {
    out.push_back({{"cutoff", c.at("cutoff")}, {"clusters", c.at("clusters").size()}});
  }
  return out;
}

}  // namespace

void report(const Run& run) {
  const auto& c = run.config();
  json families = json::object();
  for (const std::string family : {"feature", "gradient", "inject"}) {
    const json s = summarize_family(outcome_lines(run, family), c, run.seeds());
    core::write_file(run.path("bins_" + family + ".csv"), family_csv(run, s));
    families[family] = s;
  }
  const json neuron = summarize_neurons(outcome_lines(run, "neuron"), c);
  core::write_file(run.path("neuron_groups.csv"), neuron_csv(run, neuron));

  const json train = read_json(run.path("train_report.json")).at("models");
  const json saes = read_json(run.path("sae_report.json")).at("saes");
  json models = json::object();
  json analysis = json::object();
  for (const std::string tag : {"a", "b"}) {
    models[tag] = {{"initial_heldout_loss", train.at(tag).at("initial_heldout_loss")},
                   {"final_heldout_loss", train.at(tag).at("final_heldout_loss")},
                   {"sae", saes.at(tag)}};
    const json a = read_json(run.path("analysis_" + tag + ".json"));
    analysis[tag] = {{"live_features", a.at("live").size()},
                     {"semantic_clusters", cluster_counts(a.at("semantic_clusters"))},
                     {"interference_clusters", cluster_counts(a.at("interference_clusters"))}};
  }
  const json neurons = read_json(run.path("neurons.json"));
  const json pairs = read_json(run.path("shared_pairs.json"));
  const json targets = read_json(run.path("targets.json"));
  json prefilter = nullptr;
  if (!targets.at("prefilter").is_null()) {
    prefilter = {{"threshold", targets.at("prefilter").at("threshold")},
                 {"kept", targets.at("prefilter").at("kept").size()},
                 {"dropped", targets.at("prefilter").at("dropped").size()}};
  }
  const json rep{{"provenance", run.provenance()},
                 {"models", models},
                 {"analysis", analysis},
                 {"neuron_degrees", neurons.at("degree_histogram")},
                 {"shared_pairs",
                  {{"qualifying_a", pairs.at("qualifying_a").size()},
                   {"qualifying_b", pairs.at("qualifying_b").size()},
                   {"shared", pairs.at("shared").size()},
                   {"self_check", pairs.at("self_check")}}},
                 {"targets",
                  {{"considered", targets.at("considered")},
                   {"qualified", targets.at("qualified")},
                   {"selected", targets.at("selected")},
                   {"underpowered", targets.at("underpowered")},
                   {"prefilter", prefilter}}},
                 {"families", families},
                 {"neuron", neuron}};
  write_json(run.path("report.json"), rep);
}

}  // namespace detail

}  // namespace polyprobe::harness
