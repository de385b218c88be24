#include "polyprobe/model/training.hpp"

#include <cmath>
#include <numeric>

#include "polyprobe/core/error.hpp"
#include "polyprobe/core/rng.hpp"

namespace polyprobe::model {

using core::Tape;
using core::Var;
namespace ops = core::ops;

void to_json(nlohmann::json& j, const TrainHyper& h) {
  j = nlohmann::json{{"lr", h.lr},       {"steps", h.steps}, {"batch", h.batch},
                     {"clip", h.clip},   {"holdout_fraction", h.holdout_fraction}, {"seed", h.seed}};
}

void from_json(const nlohmann::json& j, TrainHyper& h) {
  TrainHyper d;
  h.lr = j.value("lr", d.lr);
  h.steps = j.value("steps", d.steps);
  h.batch = j.value("batch", d.batch);
  h.clip = j.value("clip", d.clip);
  h.holdout_fraction = j.value("holdout_fraction", d.holdout_fraction);
  h.seed = j.value("seed", d.seed);
}

namespace {

Var sequence_loss(Tape& tape, const ModelConfig& cfg, const ParamSet<Var>& params, const Sequence& seq) {
  std::vector<std::size_t> inputs(seq.begin(), seq.end() - 1);
  std::vector<std::size_t> targets(seq.begin() + 1, seq.end());
  const Var emb = ops::gather_rows(tape, params.tok_embed, inputs);
  const GraphOutputs g = build_graph(tape, cfg, params, emb, {});
  return ops::cross_entropy(tape, g.logits, std::move(targets));
}

void check_tokens(const ModelConfig& cfg, const Corpus& corpus) {
  for (const auto& seq : corpus) {
    for (TokenId t : seq) {
      if (t >= cfg.vocab_size) {
        fail(ErrorCode::ShapeMismatch, "corpus token " + std::to_string(t) + " outside vocabulary");
      }
    }
  }
}

}  // namespace

double mean_loss(const Transformer& model, const Corpus& sequences) {
  double total = 0.0;
  std::size_t count = 0;
  for (const auto& seq : sequences) {
    if (seq.size() < 2) {
      continue;
    }
    Tape tape;
    const ParamSet<Var> params = bind_params(tape, model.params, false);
    const Var loss = sequence_loss(tape, model.config, params, seq);
    total += tape.value(loss).item() * static_cast<double>(seq.size() - 1);
    count += seq.size() - 1;
  }
  require(count > 0, ErrorCode::EmptyCorpus, "no sequence with at least two tokens");
  return total / static_cast<double>(count);
}

TrainResult train(const Transformer& model, const Corpus& corpus, const TrainHyper& hyper) {
  require(!corpus.empty(), ErrorCode::EmptyCorpus, "training corpus is empty");
  require(hyper.batch >= 1 && hyper.lr > 0.0 && hyper.clip > 0.0, ErrorCode::InvalidConfig,
          "batch, lr and clip must be positive");
  require(hyper.holdout_fraction > 0.0 && hyper.holdout_fraction < 1.0, ErrorCode::InvalidConfig,
          "holdout_fraction must lie in (0, 1)");
  check_tokens(model.config, corpus);

  core::Rng rng = core::Rng(hyper.seed).split("train");
  std::vector<std::size_t> order(corpus.size());
  std::iota(order.begin(), order.end(), 0);
  rng.shuffle(order);
  const std::size_t n_hold =
      std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(hyper.holdout_fraction * corpus.size())));
  require(corpus.size() > n_hold, ErrorCode::EmptyCorpus, "corpus too small for a held-out split");
  Corpus heldout;
  for (std::size_t i = 0; i < n_hold; ++i) {
    heldout.push_back(corpus[order[i]]);
  }
  std::vector<std::size_t> train_ids(order.begin() + static_cast<std::ptrdiff_t>(n_hold), order.end());

  TrainResult result{model, {}};
  result.report.initial_heldout_loss = mean_loss(model, heldout);
  Transformer& m = result.model;

  for (std::size_t step = 0; step < hyper.steps; ++step) {
    Tape tape;
    const ParamSet<Var> params = bind_params(tape, m.params, true);
    std::vector<Var> losses;
    for (std::size_t b = 0; b < hyper.batch; ++b) {
      const Sequence& seq = corpus[train_ids[rng.below(train_ids.size())]];
      if (seq.size() >= 2) {
        losses.push_back(sequence_loss(tape, m.config, params, seq));
      }
    }
    require(!losses.empty(), ErrorCode::EmptyCorpus, "training batch has no sequence with two tokens");
    Var total = losses[0];
    for (std::size_t i = 1; i < losses.size(); ++i) {
      total = ops::add(tape, total, losses[i]);
    }
    total = ops::scale(tape, total, 1.0 / static_cast<double>(losses.size()));
    const double loss = tape.value(total).item();
    if (!std::isfinite(loss)) {
      fail(ErrorCode::Divergence, "loss became non-finite at step " + std::to_string(step));
    }
    result.report.step_losses.push_back(loss);

    const core::Gradients grads = core::backprop(tape, total);
    double sq = 0.0;
    params.visit([&](const std::string&, const Var& v) {
      if (grads.has(v)) {
        for (double g : grads.at(v).values()) {
          sq += g * g;
        }
      }
    });
    if (!std::isfinite(sq)) {
      fail(ErrorCode::Divergence, "gradient became non-finite at step " + std::to_string(step));
    }
    const double gnorm = std::sqrt(sq);
    const double factor = hyper.lr * (gnorm > hyper.clip ? hyper.clip / gnorm : 1.0);

    std::vector<const Tensor*> grad_list;
    params.visit([&](const std::string&, const Var& v) { grad_list.push_back(grads.has(v) ? &grads.at(v) : nullptr); });
    std::size_t i = 0;
    m.params.visit([&](const std::string&, Tensor& p) {
      if (const Tensor* g = grad_list[i++]) {
        core::axpy(-factor, *g, p);
      }
    });
  }
  result.report.final_heldout_loss = mean_loss(m, heldout);
  require(std::isfinite(result.report.final_heldout_loss), ErrorCode::Divergence, "held-out loss is non-finite");
  return result;
}

}  // namespace polyprobe::model
