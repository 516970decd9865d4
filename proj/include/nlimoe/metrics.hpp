#pragma once

#include <array>
#include <cstddef>
#include <span>
#include <string>
#include <vector>

#include "nlimoe/corpus.hpp"
#include "nlimoe/errors.hpp"

namespace nlimoe {

/// Rows are gold labels, columns predictions.
struct ConfusionMatrix {
  std::array<std::array<std::size_t, kNumLabels>, kNumLabels> counts{};

  std::size_t total() const {
    std::size_t n = 0;
    for (const auto& row : counts)
      for (auto c : row) n += c;
    return n;
  }
  std::size_t correct() const {
    std::size_t n = 0;
    for (std::size_t i = 0; i < kNumLabels; ++i) n += counts[i][i];
    return n;
  }
  std::size_t gold_count(std::size_t label) const {
    std::size_t n = 0;
    for (auto c : counts[label]) n += c;
    return n;
  }
  std::size_t predicted_count(std::size_t label) const {
    std::size_t n = 0;
    for (const auto& row : counts) n += row[label];
    return n;
  }
};

struct LabelScores {
  double precision = 0.0;
  double recall = 0.0;
  double f1 = 0.0;
  std::size_t support = 0;
};

namespace detail {

inline void check_aligned(std::span<const int> preds, std::span<const int> golds, const char* what) {
  if (preds.size() != golds.size()) {
    throw ContractError(std::string(what) + ": " + std::to_string(preds.size()) + " predictions for " +
                        std::to_string(golds.size()) + " gold labels");
  }
  if (preds.empty()) throw ContractError(std::string(what) + ": no examples");
}

}  // namespace detail

inline ConfusionMatrix confusion(std::span<const int> preds, std::span<const int> golds) {
  if (preds.size() != golds.size()) throw ContractError("confusion: prediction and gold counts differ");
  ConfusionMatrix m;
  for (std::size_t i = 0; i < preds.size(); ++i) {
    const int g = golds[i], p = preds[i];
    if (g < 0 || g >= static_cast<int>(kNumLabels) || p < 0 || p >= static_cast<int>(kNumLabels)) {
      throw DataError("confusion: label out of range at position " + std::to_string(i));
    }
    ++m.counts[static_cast<std::size_t>(g)][static_cast<std::size_t>(p)];
  }
  return m;
}

/// C / N.
inline double accuracy(std::span<const int> preds, std::span<const int> golds) {
  detail::check_aligned(preds, golds, "accuracy");
  std::size_t correct = 0;
  for (std::size_t i = 0; i < preds.size(); ++i) correct += preds[i] == golds[i] ? 1 : 0;
  return static_cast<double>(correct) / static_cast<double>(preds.size());
}

/// Precision, recall and F1 per label; a zero denominator yields 0.
inline std::array<LabelScores, kNumLabels> label_scores(const ConfusionMatrix& m) {
  std::array<LabelScores, kNumLabels> out{};
  for (std::size_t l = 0; l < kNumLabels; ++l) {
    const double tp = static_cast<double>(m.counts[l][l]);
    const double predicted = static_cast<double>(m.predicted_count(l));
    const double gold = static_cast<double>(m.gold_count(l));
    auto& s = out[l];
    s.support = m.gold_count(l);
    s.precision = predicted > 0 ? tp / predicted : 0.0;
    s.recall = gold > 0 ? tp / gold : 0.0;
    s.f1 = s.precision + s.recall > 0 ? 2.0 * s.precision * s.recall / (s.precision + s.recall) : 0.0;
  }
  return out;
}

/// Unweighted mean of the three per-label F1 scores.
inline double macro_f1(std::span<const int> preds, std::span<const int> golds) {
  detail::check_aligned(preds, golds, "macro_f1");
  const auto scores = label_scores(confusion(preds, golds));
  double total = 0.0;
  for (const auto& s : scores) total += s.f1;
  return total / static_cast<double>(kNumLabels);
}

}  // namespace nlimoe
