#pragma once

// Corpus encoding, batched evaluation and report files.

#include <array>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <map>
#include <ostream>
#include <string>
#include <utility>
#include <vector>

#include <json.hpp>

#include "nlimoe/corpus.hpp"
#include "nlimoe/encoder.hpp"
#include "nlimoe/errors.hpp"
#include "nlimoe/metrics.hpp"
#include "nlimoe/model.hpp"
#include "nlimoe/moe.hpp"
#include "nlimoe/stats.hpp"

namespace nlimoe {

/// Encodes every example; failures name the example id and source line.
inline std::vector<EncodedPair> encode_corpus(const std::vector<NliExample>& corpus, const Vocab& vocab,
                                              std::size_t max_length) {
  std::vector<EncodedPair> out;
  out.reserve(corpus.size());
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    try {
      out.push_back(encode_pair(corpus[i].premise, corpus[i].hypothesis, vocab, max_length, i));
    } catch (const DataError& e) {
      throw DataError("example \"" + corpus[i].id + "\"" +
                      (corpus[i].line ? " (line " + std::to_string(corpus[i].line) + ")" : std::string()) + ": " +
                      e.what());
    }
  }
  return out;
}

inline std::vector<int> gold_labels(const std::vector<NliExample>& corpus) {
  std::vector<int> out;
  out.reserve(corpus.size());
  for (const auto& ex : corpus) out.push_back(label_index(ex.label));
  return out;
}

struct EvalReport {
  std::size_t examples = 0;
  double accuracy = 0.0;
  double macro_f1 = 0.0;
  ConfusionMatrix confusion;
  std::array<LabelScores, kNumLabels> per_label{};
  LossBreakdown mean_loss;  // batch losses weighted by batch size
  std::vector<int> predictions;
  std::vector<RoutingTrace> traces;
  std::vector<double> utilization;  // empty when the expert block is disabled
  std::map<std::string, std::vector<double>> utilization_by_type;
  double mean_active_experts = 0.0;
  double fallback_rate = 0.0;
  double utilization_skew = 0.0;
  std::vector<std::pair<Bucketer, std::vector<BucketAccuracy>>> stratified;
};

/// Eval-mode pass over `pairs` in order, `batch_size` examples at a time.
inline EvalReport evaluate(const NliMoeModel& model, const std::vector<NliExample>& corpus,
                           const std::vector<EncodedPair>& pairs, std::size_t batch_size, const LossWeights& weights) {
  if (corpus.empty()) throw ContractError("evaluate: empty corpus");
  if (pairs.size() != corpus.size()) throw ContractError("evaluate: encoded pairs do not match the corpus");
  if (batch_size == 0) throw ConfigError("evaluate: batch size must be at least 1");
  const auto golds = gold_labels(corpus);
  EvalReport r;
  r.examples = corpus.size();
  double ce = 0.0, dyn = 0.0, bal = 0.0, total = 0.0;
  for (std::size_t start = 0; start < pairs.size(); start += batch_size) {
    const std::size_t n = std::min(batch_size, pairs.size() - start);
    const std::span<const EncodedPair> batch(pairs.data() + start, n);
    const std::span<const int> labels(golds.data() + start, n);
    BatchOutput out = model.forward_batch(batch, labels, weights);
    const double b = static_cast<double>(n);
    ce += b * out.breakdown.ce;
    dyn += b * out.breakdown.dynamic;
    bal += b * out.breakdown.balance;
    total += b * out.breakdown.total;
    r.predictions.insert(r.predictions.end(), out.predictions.begin(), out.predictions.end());
    for (auto& t : out.traces) r.traces.push_back(std::move(t));
  }
  const double count = static_cast<double>(corpus.size());
  r.mean_loss = total_loss(ce / count, dyn / count, bal / count, weights, corpus.size());
  r.mean_loss.total = total / count;

  r.accuracy = accuracy(r.predictions, golds);
  r.macro_f1 = macro_f1(r.predictions, golds);
  r.confusion = confusion(r.predictions, golds);
  r.per_label = label_scores(r.confusion);

  if (model.config().router.enabled) {
    r.utilization = expert_utilization(r.traces);
    r.utilization_skew = nlimoe::utilization_skew(r.utilization);
    std::vector<std::vector<std::string>> tags;
    bool tagged = false;
    for (const auto& ex : corpus) {
      tags.push_back(ex.inference_types);
      tagged = tagged || !ex.inference_types.empty();
    }
    if (tagged) r.utilization_by_type = expert_utilization_by_tag(r.traces, tags);
    for (const auto& t : r.traces) {
      r.mean_active_experts += static_cast<double>(t.active_count);
      r.fallback_rate += t.fallback ? 1.0 : 0.0;
    }
    r.mean_active_experts /= count;
    r.fallback_rate /= count;
  }
  for (auto b : kAllBucketers) r.stratified.emplace_back(b, stratified_accuracy(corpus, r.predictions, b));
  return r;
}

inline EvalReport evaluate(const NliMoeModel& model, const Vocab& vocab, const std::vector<NliExample>& corpus,
                           std::size_t batch_size, const LossWeights& weights) {
  if (vocab.size() != model.vocab_size()) {
    throw ContractError("evaluate: vocabulary has " + std::to_string(vocab.size()) + " tokens but the model embeds " +
                        std::to_string(model.vocab_size()));
  }
  return evaluate(model, corpus, encode_corpus(corpus, vocab, model.config().encoder.max_length), batch_size, weights);
}

inline nlohmann::json loss_json(const LossBreakdown& l) {
  return {{"ce", l.ce}, {"dynamic", l.dynamic}, {"balance", l.balance}, {"total", l.total},
          {"alpha", l.alpha}, {"beta", l.beta}};
}

inline nlohmann::json report_json(const EvalReport& r) {
  nlohmann::json j;
  j["examples"] = r.examples;
  j["accuracy"] = r.accuracy;
  j["macro_f1"] = r.macro_f1;
  j["loss"] = loss_json(r.mean_loss);
  nlohmann::json labels = nlohmann::json::object();
  for (std::size_t l = 0; l < kNumLabels; ++l) {
    const auto& s = r.per_label[l];
    labels[std::string(kLabelNames[l])] = {
        {"precision", s.precision}, {"recall", s.recall}, {"f1", s.f1}, {"support", s.support}};
  }
  j["per_label"] = labels;
  j["confusion"] = r.confusion.counts;
  if (!r.utilization.empty()) {
    j["utilization"] = r.utilization;
    j["utilization_skew"] = r.utilization_skew;
    j["mean_active_experts"] = r.mean_active_experts;
    j["fallback_rate"] = r.fallback_rate;
    if (!r.utilization_by_type.empty()) j["utilization_by_type"] = r.utilization_by_type;
  }
  nlohmann::json strat = nlohmann::json::object();
  for (const auto& [b, rows] : r.stratified) {
    nlohmann::json list = nlohmann::json::array();
    for (const auto& row : rows) {
      list.push_back({{"bucket", row.range}, {"count", row.count}, {"correct", row.correct}, {"accuracy", row.accuracy}});
    }
    strat[std::string(bucketer_name(b))] = list;
  }
  j["stratified"] = strat;
  return j;
}

/// Plain-text summary: accuracy, macro-F1, per-label scores, confusion counts
/// and the mean loss breakdown.
inline void write_report_text(std::ostream& out, const EvalReport& r) {
  const auto old = out.precision(6);
  out << std::fixed;
  out << "examples     " << r.examples << "\n";
  out << "accuracy     " << r.accuracy << "\n";
  out << "macro_f1     " << r.macro_f1 << "\n\n";
  out << "label           precision  recall     f1         support\n";
  for (std::size_t l = 0; l < kNumLabels; ++l) {
    const auto& s = r.per_label[l];
    out << std::left << std::setw(16) << kLabelNames[l] << std::right << std::setw(9) << s.precision << "  "
        << std::setw(9) << s.recall << "  " << std::setw(9) << s.f1 << "  " << s.support << "\n";
  }
  out << "\nconfusion (rows gold, columns predicted)\n" << std::setw(16) << "";
  for (auto name : kLabelNames) out << std::setw(15) << name;
  out << "\n";
  for (std::size_t g = 0; g < kNumLabels; ++g) {
    out << std::left << std::setw(16) << kLabelNames[g] << std::right;
    for (std::size_t p = 0; p < kNumLabels; ++p) out << std::setw(15) << r.confusion.counts[g][p];
    out << "\n";
  }
  out << "\nloss ce " << r.mean_loss.ce << "  dynamic " << r.mean_loss.dynamic << "  balance " << r.mean_loss.balance
      << "  total " << r.mean_loss.total << "\n";
  if (!r.utilization.empty()) {
    out << "\nexpert utilization";
    for (double f : r.utilization) out << ' ' << f;
    out << "\nmean active experts " << r.mean_active_experts << ", fallback rate " << r.fallback_rate << "\n";
  }
  out.unsetf(std::ios::floatfield);
  out.precision(old);
}

namespace detail {

inline std::ofstream open_output(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw Error("cannot write " + path.string());
  return out;
}

}  // namespace detail

/// report.json, report.txt, predictions.tsv, traces.tsv, utilization.tsv and
/// one stratified_<bucketer>.tsv per bucketer.
inline void write_eval_outputs(const std::string& dir, const EvalReport& r, const std::vector<NliExample>& corpus) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  const fs::path root(dir);
  detail::open_output(root / "report.json") << report_json(r).dump(2) << "\n";
  {
    auto out = detail::open_output(root / "report.txt");
    write_report_text(out, r);
  }
  {
    auto out = detail::open_output(root / "predictions.tsv");
    out << "id\tgold\tpredicted\n";
    for (std::size_t i = 0; i < corpus.size(); ++i) {
      out << corpus[i].id << '\t' << label_name(corpus[i].label) << '\t'
          << kLabelNames[static_cast<std::size_t>(r.predictions[i])] << '\n';
    }
  }
  for (const auto& [b, rows] : r.stratified) {
    auto out = detail::open_output(root / ("stratified_" + std::string(bucketer_name(b)) + ".tsv"));
    out << "bucket\trange\tcount\tcorrect\taccuracy\n" << std::setprecision(17);
    for (const auto& row : rows) {
      out << row.bucket << '\t' << row.range << '\t' << row.count << '\t' << row.correct << '\t' << row.accuracy << '\n';
    }
  }
  if (!r.utilization.empty()) {
    std::vector<std::string> ids;
    for (const auto& ex : corpus) ids.push_back(ex.id);
    auto traces = detail::open_output(root / "traces.tsv");
    write_traces(traces, r.traces, ids);
    auto out = detail::open_output(root / "utilization.tsv");
    out << "group\texpert\tfrequency\n" << std::setprecision(17);
    for (std::size_t i = 0; i < r.utilization.size(); ++i) out << "all\t" << i << '\t' << r.utilization[i] << '\n';
    for (const auto& [tag, freq] : r.utilization_by_type)
      for (std::size_t i = 0; i < freq.size(); ++i) out << tag << '\t' << i << '\t' << freq[i] << '\n';
  }
}

}  // namespace nlimoe
