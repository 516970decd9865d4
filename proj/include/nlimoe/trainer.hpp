#pragma once

// Training loop, the train/eval commands and their on-disk outputs.
//
// Output directory of a training run:
//   config.ini    resolved configuration
//   vocab.txt     vocabulary built from the training corpus
//   metrics.tsv   one row per dev evaluation
//   best.ckpt     parameters with the best dev accuracy (earliest step on ties)
//   final.ckpt    parameters after the last step

#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <numeric>
#include <optional>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "nlimoe/adam.hpp"
#include "nlimoe/checkpoint.hpp"
#include "nlimoe/config.hpp"
#include "nlimoe/corpus.hpp"
#include "nlimoe/encoder.hpp"
#include "nlimoe/errors.hpp"
#include "nlimoe/evaluate.hpp"
#include "nlimoe/model.hpp"
#include "nlimoe/rng.hpp"
#include "nlimoe/stats.hpp"

namespace nlimoe {

struct EvalRow {
  std::size_t step = 0;
  std::size_t epoch = 0;
  LossBreakdown train;  // mean over the steps since the previous row
  double dev_accuracy = 0.0;
  double dev_macro_f1 = 0.0;
  LossBreakdown dev;
  double mean_active_experts = 0.0;
  double fallback_rate = 0.0;
  double utilization_skew = 0.0;
  double seconds = 0.0;
};

struct TrainHooks {
  // Called before every optimizer step with the global step index.
  std::function<void(NliMoeModel&, std::size_t)> before_step;
  // Called after each dev evaluation.
  std::function<void(const EvalRow&)> on_eval;
};

struct TrainResult {
  NliMoeModel model;  // parameters after the last step
  Vocab vocab;
  std::size_t steps = 0;
  std::size_t epochs_run = 0;
  double best_dev_accuracy = -1.0;
  std::size_t best_step = 0;
  std::string best_checkpoint;  // serialized, see checkpoint.hpp
  std::vector<EvalRow> log;
  bool reached_target = false;
  double seconds = 0.0;
};

inline void write_metrics_header(std::ostream& out) {
  out << "step\tepoch\ttrain_ce\ttrain_dynamic\ttrain_balance\ttrain_total\tdev_accuracy\tdev_macro_f1\tdev_ce\t"
         "dev_dynamic\tdev_balance\tdev_total\tmean_active_experts\tfallback_rate\tutilization_skew\tseconds\n";
}

inline void write_metrics_row(std::ostream& out, const EvalRow& r) {
  const auto old = out.precision(17);
  out << r.step << '\t' << r.epoch << '\t' << r.train.ce << '\t' << r.train.dynamic << '\t' << r.train.balance << '\t'
      << r.train.total << '\t' << r.dev_accuracy << '\t' << r.dev_macro_f1 << '\t' << r.dev.ce << '\t' << r.dev.dynamic
      << '\t' << r.dev.balance << '\t' << r.dev.total << '\t' << r.mean_active_experts << '\t' << r.fallback_rate
      << '\t' << r.utilization_skew << '\t' << r.seconds << '\n';
  out.precision(old);
}

/// Learning rate for optimizer step `step` (0-based) of `total_steps`.
inline double learning_rate_at(const RunConfig& cfg, std::size_t step, std::size_t total_steps) {
  double lr = cfg.optimizer.learning_rate;
  if (step < cfg.warmup_steps) {
    return lr * static_cast<double>(step + 1) / static_cast<double>(cfg.warmup_steps);
  }
  if (cfg.linear_decay && total_steps > cfg.warmup_steps) {
    lr *= static_cast<double>(total_steps - step) / static_cast<double>(total_steps - cfg.warmup_steps);
  }
  return lr;
}

/// Trains on `train_set`, evaluating on `dev_set` every eval_frequency
/// optimizer steps and once more after the last step if it fell between
/// evaluations. With cfg.paths.out set, the directory receives the files
/// listed at the top of this header.
inline TrainResult train(const RunConfig& cfg, std::vector<NliExample> train_set, std::vector<NliExample> dev_set,
                         std::ostream* progress = nullptr, const TrainHooks& hooks = {}) {
  validate(cfg);
  if (train_set.empty()) throw DataError("training corpus is empty");
  if (dev_set.empty()) throw DataError("dev corpus is empty");
  if (cfg.hypothesis_only) {
    train_set = hypothesis_only_view(train_set);
    dev_set = hypothesis_only_view(dev_set);
  }
  const auto clock_start = std::chrono::steady_clock::now();
  auto elapsed = [&] { return std::chrono::duration<double>(std::chrono::steady_clock::now() - clock_start).count(); };

  Vocab vocab = Vocab::build(train_set, cfg.min_freq);
  const auto train_pairs = encode_corpus(train_set, vocab, cfg.encoder.max_length);
  const auto dev_pairs = encode_corpus(dev_set, vocab, cfg.encoder.max_length);
  const auto train_golds = gold_labels(train_set);

  TrainResult result{NliMoeModel(model_config(cfg), vocab.size(), cfg.seed), vocab, 0, 0, -1.0, 0, {}, {}, false, 0.0};
  NliMoeModel& model = result.model;
  std::vector<Tensor> params = model.trainable_parameters(cfg.freeze_complexity_gate);
  AdamState adam;
  adam.config = cfg.optimizer;
  const std::size_t total_steps = cfg.epochs * ((train_set.size() + cfg.batch_size - 1) / cfg.batch_size);

  namespace fs = std::filesystem;
  std::ofstream metrics;
  const bool persist = !cfg.paths.out.empty();
  const fs::path out_dir(cfg.paths.out);
  if (persist) {
    fs::create_directories(out_dir);
    detail::open_output(out_dir / "config.ini") << to_config_text(cfg);
    vocab.save((out_dir / "vocab.txt").string());
    metrics = detail::open_output(out_dir / "metrics.tsv");
    write_metrics_header(metrics);
  }

  const CounterRng root(cfg.seed);
  CounterRng shuffle_rng = root.split(101);
  const CounterRng dropout_root = root.split(102);
  std::vector<std::size_t> order(train_set.size());

  double acc_ce = 0.0, acc_dyn = 0.0, acc_bal = 0.0, acc_total = 0.0;
  std::size_t acc_steps = 0;
  std::size_t epoch = 0;
  bool evaluated_last = false;

  auto run_eval = [&]() {
    const EvalReport dev = evaluate(model, dev_set, dev_pairs, cfg.batch_size, cfg.loss);
    EvalRow row;
    row.step = result.steps;
    row.epoch = epoch;
    const double n = acc_steps ? static_cast<double>(acc_steps) : 1.0;
    row.train = total_loss(acc_ce / n, acc_dyn / n, acc_bal / n, cfg.loss);
    row.train.total = acc_total / n;
    row.dev_accuracy = dev.accuracy;
    row.dev_macro_f1 = dev.macro_f1;
    row.dev = dev.mean_loss;
    row.mean_active_experts = dev.mean_active_experts;
    row.fallback_rate = dev.fallback_rate;
    row.utilization_skew = dev.utilization_skew;
    row.seconds = elapsed();
    acc_ce = acc_dyn = acc_bal = acc_total = 0.0;
    acc_steps = 0;
    result.log.push_back(row);
    if (persist) {
      write_metrics_row(metrics, row);
      metrics.flush();
    }
    if (progress) {
      *progress << std::fixed << std::setprecision(4) << "step " << row.step << " epoch " << row.epoch << " train_loss "
                << row.train.total << " dev_acc " << row.dev_accuracy << " dev_f1 " << row.dev_macro_f1 << " active "
                << row.mean_active_experts << " (" << std::setprecision(1) << row.seconds << "s)" << std::endl;
      progress->unsetf(std::ios::floatfield);
    }
    if (hooks.on_eval) hooks.on_eval(row);
    if (dev.accuracy > result.best_dev_accuracy) {
      result.best_dev_accuracy = dev.accuracy;
      result.best_step = result.steps;
      const nlohmann::json snapshot = {{"dev_accuracy", dev.accuracy},
                                       {"dev_macro_f1", dev.macro_f1},
                                       {"dev_loss", loss_json(dev.mean_loss)}};
      result.best_checkpoint = serialize_checkpoint(model, vocab, cfg, result.steps, snapshot);
      if (persist) {
        std::ofstream out(out_dir / "best.ckpt", std::ios::binary | std::ios::trunc);
        out.write(result.best_checkpoint.data(), static_cast<std::streamsize>(result.best_checkpoint.size()));
        if (!out) throw Error("cannot write " + (out_dir / "best.ckpt").string());
      }
    }
    evaluated_last = true;
    return cfg.target_dev_accuracy > 0.0 && dev.accuracy >= cfg.target_dev_accuracy;
  };

  bool stop = false;
  for (std::size_t e = 1; e <= cfg.epochs && !stop; ++e) {
    epoch = e;
    std::iota(order.begin(), order.end(), std::size_t{0});
    nlimoe::shuffle(order.begin(), order.end(), shuffle_rng);
    for (std::size_t start = 0; start < order.size() && !stop; start += cfg.batch_size) {
      const std::size_t n = std::min(cfg.batch_size, order.size() - start);
      std::vector<EncodedPair> batch;
      std::vector<int> labels;
      for (std::size_t k = 0; k < n; ++k) {
        batch.push_back(train_pairs[order[start + k]]);
        labels.push_back(train_golds[order[start + k]]);
      }
      if (hooks.before_step) hooks.before_step(model, result.steps);
      model.zero_grad();
      const CounterRng step_rng = dropout_root.split(result.steps);
      BatchOptions options;
      options.mode = ForwardMode::train;
      options.rng = &step_rng;
      const BatchOutput out = model.forward_batch(batch, labels, cfg.loss, options);
      if (!std::isfinite(out.breakdown.total)) {
        throw Error("non-finite training loss at epoch " + std::to_string(epoch) + ", batch index " +
                    std::to_string(start / cfg.batch_size) + " (optimizer step " + std::to_string(result.steps) +
                    ", first example \"" + train_set[order[start]].id + "\")");
      }
      backward(out.loss);
      adam.config.learning_rate = learning_rate_at(cfg, result.steps, total_steps);
      adam_step(params, adam);
      ++result.steps;
      acc_ce += out.breakdown.ce;
      acc_dyn += out.breakdown.dynamic;
      acc_bal += out.breakdown.balance;
      acc_total += out.breakdown.total;
      ++acc_steps;
      evaluated_last = false;
      if (result.steps % cfg.eval_frequency == 0 && run_eval()) {
        result.reached_target = true;
        stop = true;
      }
    }
    result.epochs_run = epoch;
  }
  if (!evaluated_last) {
    result.reached_target = run_eval() || result.reached_target;
  }
  if (persist) {
    save_checkpoint((out_dir / "final.ckpt").string(), model, vocab, cfg, result.steps,
                    {{"dev_accuracy", result.log.back().dev_accuracy}});
  }
  result.seconds = elapsed();
  return result;
}

namespace detail {

inline void require_file(const std::string& path, const char* what) {
  if (path.empty()) throw ConfigError(std::string("no ") + what + " corpus path configured");
  if (!std::filesystem::exists(path)) throw ConfigError(std::string(what) + " corpus " + path + " does not exist");
}

}  // namespace detail

/// Loads the configured corpora and trains. Paths are checked before any work.
inline TrainResult cmd_train(const RunConfig& cfg, std::ostream* progress = nullptr) {
  validate(cfg);
  detail::require_file(cfg.paths.train, "train");
  detail::require_file(cfg.paths.dev, "dev");
  if (!cfg.paths.test.empty()) detail::require_file(cfg.paths.test, "test");
  return train(cfg, load_corpus(cfg.paths.train), load_corpus(cfg.paths.dev), progress);
}

struct EvalOptions {
  std::string out_dir;                       // empty: nothing written
  std::optional<std::string> routing;        // overrides the checkpoint's routing rule
};

/// Evaluates a checkpoint on a corpus in eval mode. The corpus is encoded
/// with the checkpoint's vocabulary; a hypothesis-only checkpoint sees the
/// hypothesis-only view of the corpus.
inline EvalReport cmd_eval(Checkpoint& ck, std::vector<NliExample> corpus, const EvalOptions& options = {}) {
  if (options.routing) {
    RouterConfig r = ck.model.config().router;
    parse_routing(*options.routing, r);
    ck.model.set_router(r);
  }
  if (ck.config.hypothesis_only) corpus = hypothesis_only_view(corpus);
  const EvalReport report = evaluate(ck.model, ck.vocab, corpus, ck.config.batch_size, ck.config.loss);
  if (!options.out_dir.empty()) write_eval_outputs(options.out_dir, report, corpus);
  return report;
}

inline EvalReport cmd_eval(const std::string& checkpoint_path, const std::string& corpus_path,
                           const EvalOptions& options = {}) {
  Checkpoint ck = load_checkpoint(checkpoint_path);
  return cmd_eval(ck, load_corpus(corpus_path), options);
}

}  // namespace nlimoe
