#pragma once

// Templated synthetic NLI corpus.
//
// A hypothesis states one fact (person, slot, value). It is drawn before
// the label and independently of it, so the hypothesis alone carries no
// label information. The premise then states two or three facts about the
// same person:
//   entailment     the hypothesis slot with the same value (often paraphrased)
//   contradiction  the hypothesis slot with another value, or the same value negated
//   neutral        only slots other than the hypothesis slot
// Dev and test hypotheses use (person, slot) combinations never seen in
// training hypotheses.

#include <algorithm>
#include <array>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include "nlimoe/corpus.hpp"
#include "nlimoe/errors.hpp"
#include "nlimoe/rng.hpp"

namespace nlimoe::synth {

inline constexpr std::array<std::string_view, 20> kPersons = {
    "anna", "binh", "chi", "dung", "emma", "farid", "giang", "hoa", "ivan", "jun",
    "khoa", "lan",  "minh", "nam", "olga", "phuc",  "quan",  "rosa", "son", "tuan"};

// Templates use P for the person and V for the value.
struct Slot {
  std::string_view name;
  std::array<std::string_view, 8> values;
  std::array<std::string_view, 2> premise;
  std::string_view negated;
  std::array<std::string_view, 2> hypothesis;
};

inline const std::array<Slot, 5>& slots() {
  static const std::array<Slot, 5> table = {{
      {"car",
       {"red", "blue", "green", "black", "white", "yellow", "silver", "brown"},
       {"P drives a V car", "the car of P is V"},
       "P does not drive a V car",
       {"the car of P is V", "P owns a V car"}},
      {"city",
       {"hanoi", "hue", "danang", "saigon", "paris", "london", "tokyo", "berlin"},
       {"P lives in V", "the home of P is in V"},
       "P does not live in V",
       {"P lives in V", "P resides in V"}},
      {"job",
       {"teacher", "doctor", "farmer", "pilot", "singer", "lawyer", "chef", "nurse"},
       {"P works as a V", "the job of P is V"},
       "P does not work as a V",
       {"P is a V", "P works as a V"}},
      {"cats",
       {"one", "two", "three", "four", "five", "six", "seven", "eight"},
       {"P has V cats", "P keeps V cats at home"},
       "P does not have V cats",
       {"P owns V cats", "the number of cats of P is V"}},
      {"sport",
       {"football", "tennis", "chess", "swimming", "boxing", "golf", "hockey", "cycling"},
       {"P plays V every week", "the favorite sport of P is V"},
       "P does not play V",
       {"P enjoys V", "P plays V"}},
  }};
  return table;
}

struct Fact {
  std::size_t person = 0;
  std::size_t slot = 0;
  std::size_t value = 0;
  bool negated = false;

  bool operator==(const Fact&) const = default;
};

inline std::string render(std::string_view tmpl, const Fact& f) {
  std::string out;
  for (const auto& tok : tokenize(tmpl)) {
    if (!out.empty()) out += ' ';
    if (tok == "P") {
      out += kPersons[f.person];
    } else if (tok == "V") {
      out += slots()[f.slot].values[f.value];
    } else {
      out += tok;
    }
  }
  return out;
}

struct SynthConfig {
  std::size_t train = 2000;
  std::size_t dev = 500;
  std::size_t test = 0;
  std::uint64_t seed = 20240917;
  double heldout_fraction = 0.2;  // share of (person, slot) combinations reserved for dev/test
  double negation_rate = 0.25;    // share of contradictions expressed by negation
  std::size_t min_facts = 2;      // premise facts per example
  std::size_t max_facts = 3;
  std::size_t values = 8;         // values used per slot, at most 8
};

struct SynthCorpus {
  std::vector<NliExample> train, dev, test;
};

namespace detail {

inline std::vector<NliExample> generate_split(std::size_t size, const std::vector<std::pair<std::size_t, std::size_t>>& combos,
                                              const SynthConfig& cfg, CounterRng rng, const std::string& prefix) {
  const auto& table = slots();
  std::vector<Label> labels(size);
  for (std::size_t i = 0; i < size; ++i) labels[i] = static_cast<Label>(i % kNumLabels);
  nlimoe::shuffle(labels.begin(), labels.end(), rng);

  std::vector<NliExample> out;
  out.reserve(size);
  for (std::size_t i = 0; i < size; ++i) {
    // Hypothesis first, independent of the label.
    const auto [person, slot] = combos[rng.below(combos.size())];
    Fact hyp{person, slot, rng.below(cfg.values), false};
    const auto& hyp_tmpl = table[slot].hypothesis[rng.below(2)];

    const Label label = labels[i];
    const std::size_t facts = cfg.min_facts + rng.below(cfg.max_facts - cfg.min_facts + 1);
    std::vector<std::size_t> other;
    for (std::size_t s = 0; s < table.size(); ++s)
      if (s != slot) other.push_back(s);
    nlimoe::shuffle(other.begin(), other.end(), rng);

    std::vector<Fact> premise;
    if (label == Label::neutral) {
      for (std::size_t k = 0; k < facts; ++k) premise.push_back({person, other[k], rng.below(cfg.values), false});
    } else {
      Fact key = hyp;
      if (label == Label::contradiction) {
        if (rng.uniform() < cfg.negation_rate) {
          key.negated = true;
        } else {
          key.value = (hyp.value + 1 + rng.below(cfg.values - 1)) % cfg.values;
        }
      }
      premise.push_back(key);
      for (std::size_t k = 0; k + 1 < facts; ++k) premise.push_back({person, other[k], rng.below(cfg.values), false});
      nlimoe::shuffle(premise.begin(), premise.end(), rng);
    }

    std::string text;
    for (const auto& f : premise) {
      if (!text.empty()) text += " and ";
      const auto& s = table[f.slot];
      text += render(f.negated ? s.negated : s.premise[rng.below(2)], f);
    }

    NliExample ex;
    ex.id = prefix + std::to_string(i);
    ex.premise = std::move(text);
    ex.hypothesis = render(hyp_tmpl, hyp);
    ex.label = label;
    ex.topic = std::string(table[slot].name);
    out.push_back(std::move(ex));
  }
  return out;
}

}  // namespace detail

inline SynthCorpus synth_generate(const SynthConfig& cfg) {
  if (cfg.train == 0) throw ConfigError("synthetic train size must be at least 1");
  if (!(cfg.heldout_fraction > 0.0 && cfg.heldout_fraction < 1.0)) {
    throw ConfigError("heldout_fraction must be in (0,1)");
  }
  if (cfg.min_facts < 1 || cfg.max_facts < cfg.min_facts || cfg.max_facts >= slots().size()) {
    throw ConfigError("premise facts must satisfy 1 <= min_facts <= max_facts < " + std::to_string(slots().size()));
  }
  if (cfg.values < 2 || cfg.values > 8) throw ConfigError("values per slot must be in [2,8]");
  CounterRng root(cfg.seed);
  std::vector<std::pair<std::size_t, std::size_t>> combos;
  for (std::size_t p = 0; p < kPersons.size(); ++p)
    for (std::size_t s = 0; s < slots().size(); ++s) combos.emplace_back(p, s);
  CounterRng split_rng = root.split(0);
  nlimoe::shuffle(combos.begin(), combos.end(), split_rng);
  const auto heldout = static_cast<std::size_t>(static_cast<double>(combos.size()) * cfg.heldout_fraction);
  const std::vector<std::pair<std::size_t, std::size_t>> eval_combos(combos.begin(), combos.begin() + heldout);
  const std::vector<std::pair<std::size_t, std::size_t>> train_combos(combos.begin() + heldout, combos.end());

  SynthCorpus out;
  out.train = detail::generate_split(cfg.train, train_combos, cfg, root.split(1), "train-");
  out.dev = detail::generate_split(cfg.dev, eval_combos, cfg, root.split(2), "dev-");
  out.test = detail::generate_split(cfg.test, eval_combos, cfg, root.split(3), "test-");
  return out;
}

// ---------------------------------------------------------------------------
// Template inversion

namespace detail {

inline std::optional<Fact> match(const std::vector<std::string>& clause, std::string_view tmpl, std::size_t slot) {
  const auto pattern = tokenize(tmpl);
  if (pattern.size() != clause.size()) return std::nullopt;
  Fact f;
  f.slot = slot;
  bool have_person = false, have_value = false;
  for (std::size_t i = 0; i < pattern.size(); ++i) {
    if (pattern[i] == "P") {
      const auto it = std::find(kPersons.begin(), kPersons.end(), clause[i]);
      if (it == kPersons.end()) return std::nullopt;
      f.person = static_cast<std::size_t>(it - kPersons.begin());
      have_person = true;
    } else if (pattern[i] == "V") {
      const auto& values = slots()[slot].values;
      const auto it = std::find(values.begin(), values.end(), clause[i]);
      if (it == values.end()) return std::nullopt;
      f.value = static_cast<std::size_t>(it - values.begin());
      have_value = true;
    } else if (pattern[i] != clause[i]) {
      return std::nullopt;
    }
  }
  if (!have_person || !have_value) return std::nullopt;
  return f;
}

inline std::optional<Fact> parse_clause(const std::vector<std::string>& clause, bool hypothesis) {
  const auto& table = slots();
  for (std::size_t s = 0; s < table.size(); ++s) {
    if (hypothesis) {
      for (auto t : table[s].hypothesis)
        if (auto f = match(clause, t, s)) return f;
    } else {
      for (auto t : table[s].premise)
        if (auto f = match(clause, t, s)) return f;
      if (auto f = match(clause, table[s].negated, s)) {
        f->negated = true;
        return f;
      }
    }
  }
  return std::nullopt;
}

}  // namespace detail

/// Facts stated by a generated premise, or nullopt if any clause is not a template instance.
inline std::optional<std::vector<Fact>> parse_premise(std::string_view premise) {
  std::vector<Fact> facts;
  std::vector<std::string> clause;
  auto flush = [&]() -> bool {
    auto f = detail::parse_clause(clause, false);
    if (!f) return false;
    facts.push_back(*f);
    clause.clear();
    return true;
  };
  for (auto& tok : tokenize(premise)) {
    if (tok == "and") {
      if (!flush()) return std::nullopt;
    } else {
      clause.push_back(std::move(tok));
    }
  }
  if (!flush()) return std::nullopt;
  return facts;
}

inline std::optional<Fact> parse_hypothesis(std::string_view hypothesis) {
  return detail::parse_clause(tokenize(hypothesis), true);
}

/// Label implied by the facts, recomputed from the rendered text.
inline std::optional<Label> oracle_label(std::string_view premise, std::string_view hypothesis) {
  const auto facts = parse_premise(premise);
  const auto hyp = parse_hypothesis(hypothesis);
  if (!facts || !hyp) return std::nullopt;
  for (const auto& f : *facts) {
    if (f.person != hyp->person || f.slot != hyp->slot) continue;
    if (f.negated) return f.value == hyp->value ? std::optional<Label>(Label::contradiction) : std::nullopt;
    return f.value == hyp->value ? Label::entailment : Label::contradiction;
  }
  return Label::neutral;
}

/// In-sample accuracy of the best predictor that sees a single hypothesis
/// feature (person, slot, value or template) and outputs that feature
/// value's majority label. An optimistic ceiling for hypothesis-only models.
inline double hypothesis_feature_ceiling(const std::vector<NliExample>& corpus) {
  if (corpus.empty()) throw ContractError("hypothesis_feature_ceiling: empty corpus");
  std::array<std::map<std::string, std::array<std::size_t, kNumLabels>>, 4> tables;
  for (const auto& ex : corpus) {
    const auto h = parse_hypothesis(ex.hypothesis);
    if (!h) throw DataError("hypothesis is not a template instance: " + ex.hypothesis);
    const auto tokens = tokenize(ex.hypothesis);
    const auto l = static_cast<std::size_t>(ex.label);
    ++tables[0][std::to_string(h->person)][l];
    ++tables[1][std::to_string(h->slot)][l];
    ++tables[2][std::to_string(h->slot) + ":" + std::to_string(h->value)][l];
    std::string shape;
    for (const auto& t : tokens) {
      const bool is_person = std::find(kPersons.begin(), kPersons.end(), t) != kPersons.end();
      const auto& values = slots()[h->slot].values;
      const bool is_value = std::find(values.begin(), values.end(), t) != values.end();
      shape += is_person ? "P " : is_value ? "V " : t + " ";
    }
    ++tables[3][shape][l];
  }
  double best = 0.0;
  for (const auto& t : tables) {
    std::size_t correct = 0;
    for (const auto& [key, counts] : t) correct += *std::max_element(counts.begin(), counts.end());
    best = std::max(best, static_cast<double>(correct) / static_cast<double>(corpus.size()));
  }
  return best;
}

}  // namespace nlimoe::synth
