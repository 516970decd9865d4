#pragma once

// Model-level gradient check, corpus analysis and synthetic-corpus commands.

#include <chrono>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <map>
#include <ostream>
#include <string>
#include <vector>

#include <json.hpp>

#include "nlimoe/checkpoint.hpp"
#include "nlimoe/config.hpp"
#include "nlimoe/corpus.hpp"
#include "nlimoe/errors.hpp"
#include "nlimoe/evaluate.hpp"
#include "nlimoe/gradcheck.hpp"
#include "nlimoe/model.hpp"
#include "nlimoe/stats.hpp"
#include "nlimoe/synth.hpp"

namespace nlimoe {

// ---------------------------------------------------------------------------
// gradcheck

inline constexpr std::size_t kGradcheckParameterLimit = 5000;
inline constexpr double kGradcheckTolerance = 1e-4;
inline constexpr double kGradcheckStep = 1e-4;

struct GradcheckOutcome {
  GradCheckReport report;
  std::size_t parameter_count = 0;
  std::vector<std::string> no_gradient_path;
  double tolerance = kGradcheckTolerance;
  bool passed = false;
  double seconds = 0.0;
};

/// Finite-difference check of the full training objective on one batch of
/// synthetic examples. Dropout is off and the expert masks found at the
/// starting point are held fixed, so the objective is smooth in every
/// parameter. `loss_hook`, when set, is applied to the objective before
/// differentiation (negative controls use it to inject a broken op).
inline GradcheckOutcome cmd_gradcheck(const RunConfig& cfg,
                                      const std::function<Tensor(const Tensor&)>& loss_hook = {}) {
  validate(cfg);
  const auto start = std::chrono::steady_clock::now();
  synth::SynthConfig sc;
  sc.train = cfg.batch_size;
  sc.dev = 0;
  sc.seed = cfg.seed;
  auto corpus = synth::synth_generate(sc).train;
  if (cfg.hypothesis_only) corpus = hypothesis_only_view(corpus);
  const Vocab vocab = Vocab::build(corpus, 1);
  const NliMoeModel model(model_config(cfg), vocab.size(), cfg.seed);

  GradcheckOutcome outcome;
  outcome.parameter_count = model.parameter_count();
  if (outcome.parameter_count > kGradcheckParameterLimit) {
    throw ConfigError("gradcheck: model has " + std::to_string(outcome.parameter_count) +
                      " parameters, finite differences are limited to " + std::to_string(kGradcheckParameterLimit));
  }
  const auto pairs = encode_corpus(corpus, vocab, cfg.encoder.max_length);
  const auto labels = gold_labels(corpus);
  const BatchOutput start_point = model.forward_batch(pairs, labels, cfg.loss);
  std::vector<ExpertMask> masks;
  for (const auto& t : start_point.traces) masks.push_back({t.mask, t.fallback});

  BatchOptions options;
  options.mode = ForwardMode::eval;
  if (cfg.router.enabled) options.forced_masks = &masks;
  auto objective = [&]() {
    Tensor loss = model.forward_batch(pairs, labels, cfg.loss, options).loss;
    return loss_hook ? loss_hook(loss) : loss;
  };

  std::vector<Tensor> params;
  std::vector<std::string> names;
  for (const auto& p : model.named_parameters()) {
    const bool gate = p.name == "moe.complexity_w" || p.name == "moe.complexity_b";
    if (cfg.freeze_complexity_gate && gate) {
      outcome.no_gradient_path.push_back(p.name);
      continue;
    }
    params.push_back(p.tensor);
    names.push_back(p.name);
  }
  outcome.report = finite_diff_check(objective, params, kGradcheckStep, names);
  for (const auto& pc : outcome.report.parameters)
    if (pc.no_gradient_path) outcome.no_gradient_path.push_back(pc.name);
  outcome.passed = outcome.report.passed(outcome.tolerance);
  outcome.seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  return outcome;
}

inline void write_gradcheck_report(std::ostream& out, const GradcheckOutcome& g) {
  out << "parameters " << g.parameter_count << ", coordinates " << g.report.coordinates << ", step "
      << g.report.step << "\n";
  out << std::scientific << std::setprecision(3);
  for (const auto& p : g.report.parameters) {
    out << "  " << std::left << std::setw(28) << p.name << std::right << " max_rel_err " << p.max_relative_error
        << (p.no_gradient_path ? "  (no gradient path)" : "") << "\n";
  }
  for (const auto& name : g.no_gradient_path) out << "no gradient path: " << name << "\n";
  out << "max relative error " << g.report.max_relative_error << " (tolerance " << g.tolerance << ")\n";
  out.unsetf(std::ios::floatfield);
  out << (g.passed ? "PASS" : "FAIL") << "\n";
}

// ---------------------------------------------------------------------------
// analyze

struct RoundSummary {
  std::array<std::size_t, kNumLabels> labels{};
  LengthStats lengths;
  OverlapReport overlap;
};

struct AnalysisBundle {
  std::array<std::size_t, kNumLabels> labels{};
  LengthStats lengths;
  OverlapReport overlap;
  PmiTable pmi;
  std::map<std::string, RoundSummary> rounds;  // empty unless examples carry a round
};

inline AnalysisBundle analyze_corpus(const std::vector<NliExample>& corpus, double pmi_k = 1.0,
                                     std::size_t pmi_min_count = 5) {
  AnalysisBundle b;
  b.labels = label_distribution(corpus);
  b.lengths = length_stats(corpus);
  b.overlap = corpus_overlap_report(corpus);
  b.pmi = pmi_scores(corpus, pmi_k, pmi_min_count);
  std::map<std::string, std::vector<NliExample>> by_round;
  for (const auto& ex : corpus)
    if (ex.round) by_round[*ex.round].push_back(ex);
  for (const auto& [round, subset] : by_round) {
    b.rounds[round] = {label_distribution(subset), length_stats(subset), corpus_overlap_report(subset)};
  }
  return b;
}

namespace detail {

inline nlohmann::json overlap_json(const OverlapStats& s) {
  return {{"count", s.count},
          {"mean_jaccard_pct", s.mean_jaccard_pct},
          {"mean_new_word_pct", s.mean_new_word_pct},
          {"jaccard_buckets", s.jaccard_buckets},
          {"new_word_buckets", s.new_word_buckets}};
}

inline nlohmann::json lengths_json(const LengthStats& s) {
  nlohmann::json ph = nlohmann::json::object(), hh = nlohmann::json::object();
  for (const auto& [b, c] : s.premise_histogram) ph[bucket_range(b, Bucketer::premise_length_5)] = c;
  for (const auto& [b, c] : s.hypothesis_histogram) hh[bucket_range(b, Bucketer::hypothesis_length_5)] = c;
  return {{"count", s.count},
          {"mean_premise", s.mean_premise},
          {"mean_hypothesis", s.mean_hypothesis},
          {"premise_histogram", ph},
          {"hypothesis_histogram", hh}};
}

inline nlohmann::json labels_json(const std::array<std::size_t, kNumLabels>& counts) {
  nlohmann::json j = nlohmann::json::object();
  for (std::size_t l = 0; l < kNumLabels; ++l) j[std::string(kLabelNames[l])] = counts[l];
  return j;
}

inline nlohmann::json overlap_report_json(const OverlapReport& r) {
  nlohmann::json per = nlohmann::json::object();
  for (std::size_t l = 0; l < kNumLabels; ++l) per[std::string(kLabelNames[l])] = overlap_json(r.per_label[l]);
  return {{"overall", overlap_json(r.overall)}, {"per_label", per}};
}

}  // namespace detail

inline nlohmann::json analysis_json(const AnalysisBundle& b) {
  nlohmann::json j;
  j["labels"] = detail::labels_json(b.labels);
  j["lengths"] = detail::lengths_json(b.lengths);
  j["overlap"] = detail::overlap_report_json(b.overlap);
  j["pmi"] = {{"smoothing", b.pmi.smoothing},
              {"min_count", b.pmi.min_count},
              {"events", b.pmi.events},
              {"vocabulary", b.pmi.vocabulary}};
  if (!b.rounds.empty()) {
    nlohmann::json rounds = nlohmann::json::object();
    for (const auto& [name, r] : b.rounds) {
      rounds[name] = {{"labels", detail::labels_json(r.labels)},
                      {"lengths", detail::lengths_json(r.lengths)},
                      {"overlap", detail::overlap_report_json(r.overlap)}};
    }
    j["rounds"] = rounds;
  }
  return j;
}

/// Writes summary.json plus labels.tsv, lengths.tsv, overlap.tsv,
/// new_words.tsv, pmi.tsv and, when rounds are present, rounds.tsv.
inline AnalysisBundle cmd_analyze(const std::vector<NliExample>& corpus, const std::string& out_dir,
                                  double pmi_k = 1.0, std::size_t pmi_min_count = 5) {
  namespace fs = std::filesystem;
  const AnalysisBundle b = analyze_corpus(corpus, pmi_k, pmi_min_count);
  fs::create_directories(out_dir);
  const fs::path root(out_dir);
  detail::open_output(root / "summary.json") << analysis_json(b).dump(2) << "\n";
  {
    auto out = detail::open_output(root / "labels.tsv");
    out << "label\tcount\n";
    for (std::size_t l = 0; l < kNumLabels; ++l) out << kLabelNames[l] << '\t' << b.labels[l] << '\n';
  }
  {
    auto out = detail::open_output(root / "lengths.tsv");
    out << std::setprecision(17) << "side\tbucket\tcount\n";
    for (const auto& [k, c] : b.lengths.premise_histogram)
      out << "premise\t" << bucket_range(k, Bucketer::premise_length_5) << '\t' << c << '\n';
    for (const auto& [k, c] : b.lengths.hypothesis_histogram)
      out << "hypothesis\t" << bucket_range(k, Bucketer::hypothesis_length_5) << '\t' << c << '\n';
    out << "premise\tmean\t" << b.lengths.mean_premise << '\n';
    out << "hypothesis\tmean\t" << b.lengths.mean_hypothesis << '\n';
  }
  auto bucket_table = [&](const char* file, bool jaccard_side) {
    auto out = detail::open_output(root / file);
    out << std::setprecision(17) << "label\tmean_pct";
    for (std::size_t k = 0; k < 10; ++k) out << '\t' << bucket_range(k, Bucketer::jaccard_10);
    out << '\n';
    auto row = [&](std::string_view name, const OverlapStats& s) {
      out << name << '\t' << (jaccard_side ? s.mean_jaccard_pct : s.mean_new_word_pct);
      const auto& buckets = jaccard_side ? s.jaccard_buckets : s.new_word_buckets;
      for (auto c : buckets) out << '\t' << c;
      out << '\n';
    };
    for (std::size_t l = 0; l < kNumLabels; ++l) row(kLabelNames[l], b.overlap.per_label[l]);
    row("all", b.overlap.overall);
  };
  bucket_table("overlap.tsv", true);
  bucket_table("new_words.tsv", false);
  {
    auto out = detail::open_output(root / "pmi.tsv");
    out << std::setprecision(17) << "label\trank\tword\tpmi\tcount\ttotal_count\n";
    for (std::size_t l = 0; l < kNumLabels; ++l) {
      std::size_t rank = 1;
      for (const auto& e : b.pmi.per_label[l]) {
        out << kLabelNames[l] << '\t' << rank++ << '\t' << e.word << '\t' << e.score << '\t' << e.count << '\t'
            << e.total_count << '\n';
      }
    }
  }
  if (!b.rounds.empty()) {
    auto out = detail::open_output(root / "rounds.tsv");
    out << std::setprecision(17)
        << "round\tentailment\tcontradiction\tneutral\tmean_premise\tmean_hypothesis\tmean_jaccard_pct\t"
           "mean_new_word_pct\n";
    for (const auto& [name, r] : b.rounds) {
      out << name << '\t' << r.labels[0] << '\t' << r.labels[1] << '\t' << r.labels[2] << '\t' << r.lengths.mean_premise
          << '\t' << r.lengths.mean_hypothesis << '\t' << r.overlap.overall.mean_jaccard_pct << '\t'
          << r.overlap.overall.mean_new_word_pct << '\n';
    }
  }
  return b;
}

// ---------------------------------------------------------------------------
// synth

/// Writes train.jsonl, dev.jsonl and (when requested) test.jsonl.
inline synth::SynthCorpus cmd_synth(const synth::SynthConfig& cfg, const std::string& out_dir) {
  namespace fs = std::filesystem;
  auto corpus = synth::synth_generate(cfg);
  fs::create_directories(out_dir);
  const fs::path root(out_dir);
  save_corpus((root / "train.jsonl").string(), corpus.train);
  if (!corpus.dev.empty()) save_corpus((root / "dev.jsonl").string(), corpus.dev);
  if (!corpus.test.empty()) save_corpus((root / "test.jsonl").string(), corpus.test);
  return corpus;
}

}  // namespace nlimoe
