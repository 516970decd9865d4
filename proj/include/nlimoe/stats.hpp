#pragma once

// Dataset-difficulty statistics over whitespace tokens: word overlap,
// new-word rate, lengths, per-label PMI of hypothesis words and accuracy
// stratified by those quantities.

#include <algorithm>
#include <array>
#include <cmath>
#include <map>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "nlimoe/corpus.hpp"
#include "nlimoe/errors.hpp"

namespace nlimoe {

inline constexpr std::string_view kEmptyPremise = "[EMPTY]";

namespace detail {

inline std::set<std::string_view> unique(std::span<const std::string> tokens) {
  return {tokens.begin(), tokens.end()};
}

// 10-point percentage bin of a fraction in [0,1]; 100% joins the top bin.
inline std::size_t decile(double fraction) {
  const auto b = static_cast<std::size_t>(std::floor(fraction * 10.0 + 1e-9));
  return std::min<std::size_t>(b, 9);
}

}  // namespace detail

/// |P n H| / |P u H| over unique tokens.
inline double jaccard(std::span<const std::string> premise, std::span<const std::string> hypothesis) {
  if (premise.empty() || hypothesis.empty()) throw ContractError("jaccard: empty token list");
  const auto p = detail::unique(premise);
  const auto h = detail::unique(hypothesis);
  std::size_t common = 0;
  for (const auto& t : h) common += p.count(t);
  return static_cast<double>(common) / static_cast<double>(p.size() + h.size() - common);
}

/// Share of unique hypothesis tokens that never occur in the premise.
inline double new_word_rate(std::span<const std::string> premise, std::span<const std::string> hypothesis) {
  if (hypothesis.empty()) throw ContractError("new_word_rate: empty hypothesis");
  const auto p = detail::unique(premise);
  const auto h = detail::unique(hypothesis);
  std::size_t novel = 0;
  for (const auto& t : h) novel += p.count(t) ? 0 : 1;
  return static_cast<double>(novel) / static_cast<double>(h.size());
}

struct OverlapStats {
  std::size_t count = 0;
  double mean_jaccard_pct = 0.0;
  double mean_new_word_pct = 0.0;
  std::array<std::size_t, 10> jaccard_buckets{};
  std::array<std::size_t, 10> new_word_buckets{};
};

struct OverlapReport {
  std::array<OverlapStats, kNumLabels> per_label{};
  OverlapStats overall;
};

inline OverlapReport corpus_overlap_report(const std::vector<NliExample>& corpus) {
  if (corpus.empty()) throw ContractError("corpus_overlap_report: empty corpus");
  OverlapReport r;
  auto accumulate = [](OverlapStats& s, double j, double n) {
    ++s.count;
    s.mean_jaccard_pct += 100.0 * j;
    s.mean_new_word_pct += 100.0 * n;
    ++s.jaccard_buckets[detail::decile(j)];
    ++s.new_word_buckets[detail::decile(n)];
  };
  for (const auto& ex : corpus) {
    const auto p = tokenize(ex.premise);
    const auto h = tokenize(ex.hypothesis);
    const double j = jaccard(p, h);
    const double n = new_word_rate(p, h);
    accumulate(r.per_label[static_cast<std::size_t>(ex.label)], j, n);
    accumulate(r.overall, j, n);
  }
  auto finish = [](OverlapStats& s) {
    if (s.count == 0) return;
    s.mean_jaccard_pct /= static_cast<double>(s.count);
    s.mean_new_word_pct /= static_cast<double>(s.count);
  };
  for (auto& s : r.per_label) finish(s);
  finish(r.overall);
  return r;
}

struct LengthStats {
  std::size_t count = 0;
  double mean_premise = 0.0;
  double mean_hypothesis = 0.0;
  // bucket b covers lengths [5b, 5b + 5)
  std::map<std::size_t, std::size_t> premise_histogram;
  std::map<std::size_t, std::size_t> hypothesis_histogram;
};

inline LengthStats length_stats(const std::vector<NliExample>& corpus) {
  if (corpus.empty()) throw ContractError("length_stats: empty corpus");
  LengthStats s;
  for (const auto& ex : corpus) {
    const auto np = tokenize(ex.premise).size();
    const auto nh = tokenize(ex.hypothesis).size();
    s.mean_premise += static_cast<double>(np);
    s.mean_hypothesis += static_cast<double>(nh);
    ++s.premise_histogram[np / 5];
    ++s.hypothesis_histogram[nh / 5];
  }
  s.count = corpus.size();
  s.mean_premise /= static_cast<double>(s.count);
  s.mean_hypothesis /= static_cast<double>(s.count);
  return s;
}

struct PmiEntry {
  std::string word;
  double score = 0.0;
  std::size_t count = 0;        // occurrences of the word under this label
  std::size_t total_count = 0;  // occurrences under any label
};

struct PmiTable {
  std::array<std::vector<PmiEntry>, kNumLabels> per_label;
  double smoothing = 1.0;
  std::size_t min_count = 5;
  std::size_t events = 0;      // T: (token, label) events
  std::size_t vocabulary = 0;  // V: distinct hypothesis tokens
};

/// Add-k smoothed PMI between hypothesis words and labels:
///
///   PMI(w, l) = log2[ (c(w,l) + k) (T + kLV) / ((c(w) + kL) (c(l) + kV)) ]
///
/// i.e. the log-ratio of the smoothed joint to the product of its
/// marginals. Every token occurrence is one event. Words with c(w) below
/// min_count are omitted; each label's list is sorted by score, then word.
inline PmiTable pmi_scores(const std::vector<NliExample>& corpus, double k = 1.0, std::size_t min_count = 5) {
  if (corpus.empty()) throw ContractError("pmi_scores: empty corpus");
  if (!(k > 0.0)) throw ConfigError("pmi_scores: smoothing constant must be positive");
  std::map<std::string, std::array<std::size_t, kNumLabels>> joint;
  std::array<std::size_t, kNumLabels> per_label{};
  std::size_t total = 0;
  for (const auto& ex : corpus) {
    const auto l = static_cast<std::size_t>(ex.label);
    for (auto& t : tokenize(ex.hypothesis)) {
      ++joint[t][l];
      ++per_label[l];
      ++total;
    }
  }
  PmiTable table;
  table.smoothing = k;
  table.min_count = min_count;
  table.events = total;
  table.vocabulary = joint.size();
  const double L = static_cast<double>(kNumLabels);
  const double V = static_cast<double>(joint.size());
  const double T = static_cast<double>(total) + k * L * V;
  for (const auto& [word, counts] : joint) {
    std::size_t cw = 0;
    for (auto c : counts) cw += c;
    if (cw < min_count) continue;
    for (std::size_t l = 0; l < kNumLabels; ++l) {
      const double num = (static_cast<double>(counts[l]) + k) * T;
      const double den = (static_cast<double>(cw) + k * L) * (static_cast<double>(per_label[l]) + k * V);
      table.per_label[l].push_back({word, std::log2(num / den), counts[l], cw});
    }
  }
  for (auto& list : table.per_label) {
    std::stable_sort(list.begin(), list.end(), [](const PmiEntry& a, const PmiEntry& b) { return a.score > b.score; });
  }
  return table;
}

enum class Bucketer { premise_length_5, hypothesis_length_5, jaccard_10, new_word_10 };

inline constexpr std::array<Bucketer, 4> kAllBucketers = {Bucketer::premise_length_5, Bucketer::hypothesis_length_5,
                                                          Bucketer::jaccard_10, Bucketer::new_word_10};

inline std::string_view bucketer_name(Bucketer b) {
  switch (b) {
    case Bucketer::premise_length_5:
      return "premise-length-5";
    case Bucketer::hypothesis_length_5:
      return "hypothesis-length-5";
    case Bucketer::jaccard_10:
      return "jaccard-10";
    case Bucketer::new_word_10:
      return "new-word-10";
  }
  return "";
}

inline std::size_t bucket_of(const NliExample& ex, Bucketer b) {
  const auto p = tokenize(ex.premise);
  const auto h = tokenize(ex.hypothesis);
  switch (b) {
    case Bucketer::premise_length_5:
      return p.size() / 5;
    case Bucketer::hypothesis_length_5:
      return h.size() / 5;
    case Bucketer::jaccard_10:
      return detail::decile(jaccard(p, h));
    case Bucketer::new_word_10:
      return detail::decile(new_word_rate(p, h));
  }
  return 0;
}

inline std::string bucket_range(std::size_t bucket, Bucketer b) {
  if (b == Bucketer::premise_length_5 || b == Bucketer::hypothesis_length_5) {
    return "[" + std::to_string(bucket * 5) + "," + std::to_string(bucket * 5 + 5) + ")";
  }
  return bucket == 9 ? "[90,100]%" : "[" + std::to_string(bucket * 10) + "," + std::to_string(bucket * 10 + 10) + ")%";
}

struct BucketAccuracy {
  std::size_t bucket = 0;
  std::string range;
  std::size_t count = 0;
  std::size_t correct = 0;
  double accuracy = 0.0;
};

/// Accuracy per non-empty bucket, ordered by bucket index.
inline std::vector<BucketAccuracy> stratified_accuracy(const std::vector<NliExample>& corpus,
                                                       std::span<const int> predictions, Bucketer b) {
  if (predictions.size() != corpus.size()) {
    throw ContractError("stratified_accuracy: " + std::to_string(predictions.size()) + " predictions for " +
                        std::to_string(corpus.size()) + " examples");
  }
  std::map<std::size_t, BucketAccuracy> groups;
  for (std::size_t i = 0; i < corpus.size(); ++i) {
    const auto key = bucket_of(corpus[i], b);
    auto& g = groups[key];
    g.bucket = key;
    ++g.count;
    g.correct += predictions[i] == label_index(corpus[i].label) ? 1 : 0;
  }
  std::vector<BucketAccuracy> out;
  for (auto& [key, g] : groups) {
    g.range = bucket_range(key, b);
    g.accuracy = static_cast<double>(g.correct) / static_cast<double>(g.count);
    out.push_back(g);
  }
  return out;
}

/// Same corpus with every premise replaced by the placeholder "[EMPTY]".
inline std::vector<NliExample> hypothesis_only_view(const std::vector<NliExample>& corpus) {
  std::vector<NliExample> out = corpus;
  for (auto& ex : out) ex.premise = std::string(kEmptyPremise);
  return out;
}

}  // namespace nlimoe
