#include <CLI11.hpp>
#include <iostream>
#include <optional>
#include <string>

#include "polyprobe/core/error.hpp"
#include "polyprobe/harness/config.hpp"
#include "polyprobe/harness/pipeline.hpp"

namespace {

namespace h = polyprobe::harness;
using polyprobe::Error;
using polyprobe::ErrorCode;

constexpr int kExitStageFailure = 2;
constexpr int kExitConfig = 3;

struct Common {
  std::string config;
  std::string out;
  std::optional<std::uint64_t> seed;
  bool force = false;
  bool quiet = false;
};

void add_common(CLI::App* cmd, Common& c) {
  cmd->add_option("-c,--config", c.config, "Experiment config (JSON); defaults when omitted")->check(CLI::ExistingFile);
  cmd->add_option("-o,--out", c.out, "Run directory (overrides output_dir)");
  cmd->add_option("-s,--seed", c.seed, "Master seed (overrides the config)");
  cmd->add_flag("-f,--force", c.force, "Recompute cached stages and overwrite a foreign run directory");
  cmd->add_flag("-q,--quiet", c.quiet, "No progress output");
}

h::ExperimentConfig make_config(const Common& c) {
  h::ExperimentConfig cfg = c.config.empty() ? h::ExperimentConfig{} : h::load_config(c.config);
  if (c.seed) {
    cfg.seed = *c.seed;
  }
  h::validate(cfg);
  return cfg;
}

h::Run open_run(const Common& c) {
  return h::Run(make_config(c), h::RunOptions{c.out, c.force, c.quiet});
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Polysemanticity probes on a toy transformer"};
  app.require_subcommand(1);
  Common common;

  auto* run = app.add_subcommand("run", "Run every stage, reusing cached ones");
  add_common(run, common);

  std::vector<std::pair<CLI::App*, h::Stage>> single;
  for (h::Stage s : {h::Stage::GenCorpus, h::Stage::TrainModel, h::Stage::TrainSae, h::Stage::Analyze,
                     h::Stage::Report}) {
    auto* cmd = app.add_subcommand(h::stage_name(s), "Run the " + h::stage_name(s) + " stage");
    add_common(cmd, common);
    single.emplace_back(cmd, s);
  }

  std::string family;
  auto* intervene = app.add_subcommand("intervene", "Run an intervention family");
  intervene->add_option("family", family, "feature, gradient, inject, neuron or all")
      ->required()
      ->check(CLI::IsMember({"feature", "gradient", "inject", "neuron", "all"}));
  add_common(intervene, common);

  auto* status = app.add_subcommand("status", "List which stages are cached for the config");
  add_common(status, common);

  auto* print = app.add_subcommand("print-config", "Print the canonical config and its hash");
  add_common(print, common);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : kExitConfig;
  }

  try {
    if (print->parsed()) {
      const auto cfg = make_config(common);
      std::cout << h::to_json(cfg).dump(2) << "\n";
      std::cerr << "config_hash " << h::config_hash(cfg) << "\n";
      return 0;
    }
    h::Run r = open_run(common);
    if (status->parsed()) {
      std::cout << "run " << r.dir().string() << " config_hash " << r.hash() << "\n";
      for (h::Stage s : h::all_stages()) {
        std::cout << (r.cached(s) ? "cached  " : "pending ") << h::stage_name(s) << "\n";
      }
      return 0;
    }
    if (run->parsed()) {
      r.run_all();
    } else if (intervene->parsed()) {
      if (family == "all") {
        for (auto s : {h::Stage::InterveneFeature, h::Stage::InterveneGradient, h::Stage::InterveneInject,
                       h::Stage::InterveneNeuron}) {
          r.execute(s);
        }
      } else {
        r.execute(h::parse_stage("intervene-" + family));
      }
    } else {
      for (const auto& [cmd, s] : single) {
        if (cmd->parsed()) {
          r.execute(s);
        }
      }
    }
    if (r.cached(h::Stage::Report)) {
      std::cout << r.path("report.json").string() << "\n";
    }
    return 0;
  } catch (const Error& e) {
    std::cerr << "polyprobe: " << e.what() << "\n";
    return e.code() == ErrorCode::ConfigError ? kExitConfig : kExitStageFailure;
  } catch (const std::exception& e) {
    std::cerr << "polyprobe: " << e.what() << "\n";
    return 1;
  }
}
