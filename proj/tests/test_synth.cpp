#include <gtest/gtest.h>

#include <cmath>
#include <map>
#include <set>
#include <string>
#include <vector>

#include "nlimoe/synth.hpp"

using namespace nlimoe;
using namespace nlimoe::synth;

namespace {

// Independent labeller: locate person and value words by lookup instead of
// inverting templates. Value words are unique across slots.
struct Word {
  int slot = -1;
  std::string value;
};

Word value_word(const std::string& t) {
  for (std::size_t s = 0; s < slots().size(); ++s)
    for (auto v : slots()[s].values)
      if (t == v) return {static_cast<int>(s), t};
  return {};
}

std::vector<std::vector<std::string>> clauses(const std::string& premise) {
  std::vector<std::vector<std::string>> out(1);
  for (auto& t : tokenize(premise)) {
    if (t == "and") {
      out.emplace_back();
    } else {
      out.back().push_back(t);
    }
  }
  return out;
}

Label lookup_oracle(const NliExample& ex) {
  std::string person;
  Word hv;
  for (const auto& t : tokenize(ex.hypothesis)) {
    if (std::find(kPersons.begin(), kPersons.end(), t) != kPersons.end()) person = t;
    if (auto w = value_word(t); w.slot >= 0) hv = w;
  }
  for (const auto& c : clauses(ex.premise)) {
    if (std::find(c.begin(), c.end(), person) == c.end()) continue;
    for (const auto& t : c) {
      const auto w = value_word(t);
      if (w.slot != hv.slot) continue;
      const bool negated = std::find(c.begin(), c.end(), "not") != c.end();
      return negated || w.value != hv.value ? Label::contradiction : Label::entailment;
    }
  }
  return Label::neutral;
}

SynthConfig small(std::size_t train, std::size_t dev, std::uint64_t seed = 7) {
  SynthConfig c;
  c.train = train;
  c.dev = dev;
  c.test = dev;
  c.seed = seed;
  return c;
}

}  // namespace

TEST(Synth, BalancedLabels) {
  const auto c = synth_generate(small(300, 30));
  ASSERT_EQ(c.train.size(), 300u);
  const auto d = label_distribution(c.train);
  EXPECT_EQ(d[0], 100u);
  EXPECT_EQ(d[1], 100u);
  EXPECT_EQ(d[2], 100u);
  const auto dd = label_distribution(c.dev);
  EXPECT_EQ(dd[0] + dd[1] + dd[2], 30u);
  EXPECT_EQ(dd[0], 10u);
}

TEST(Synth, DeterministicPerSeed) {
  const auto a = synth_generate(small(200, 50, 3));
  const auto b = synth_generate(small(200, 50, 3));
  const auto c = synth_generate(small(200, 50, 4));
  std::size_t differ = 0;
  for (std::size_t i = 0; i < a.train.size(); ++i) {
    EXPECT_EQ(a.train[i].premise, b.train[i].premise);
    EXPECT_EQ(a.train[i].hypothesis, b.train[i].hypothesis);
    EXPECT_EQ(a.train[i].label, b.train[i].label);
    differ += a.train[i].premise != c.train[i].premise;
  }
  EXPECT_GT(differ, 100u);
}

TEST(Synth, LabelsAgreeWithLookupOracle) {
  for (std::uint64_t seed : {1, 2, 3}) {
    const auto c = synth_generate(small(1500, 300, seed));
    for (const auto* split : {&c.train, &c.dev, &c.test})
      for (const auto& ex : *split) {
        EXPECT_EQ(lookup_oracle(ex), ex.label) << ex.premise << " || " << ex.hypothesis;
        const auto inv = oracle_label(ex.premise, ex.hypothesis);
        ASSERT_TRUE(inv.has_value()) << ex.premise;
        EXPECT_EQ(*inv, ex.label);
      }
  }
}

TEST(Synth, HeldOutCombinationsAreDisjoint) {
  const auto c = synth_generate(small(3000, 600));
  auto combos = [](const std::vector<NliExample>& split) {
    std::set<std::pair<std::size_t, std::size_t>> out;
    for (const auto& ex : split) {
      const auto h = parse_hypothesis(ex.hypothesis);
      out.emplace(h->person, h->slot);
    }
    return out;
  };
  const auto tr = combos(c.train), dv = combos(c.dev), ts = combos(c.test);
  for (const auto& k : dv) EXPECT_EQ(tr.count(k), 0u);
  for (const auto& k : ts) EXPECT_EQ(tr.count(k), 0u);
  // 20% of the 100 combinations are held out.
  EXPECT_EQ(tr.size(), 80u);
  EXPECT_LE(dv.size(), 20u);
}

TEST(Synth, ClosedVocabulary) {
  std::set<std::string> lexicon(kPersons.begin(), kPersons.end());
  lexicon.insert("and");
  for (const auto& s : slots()) {
    for (auto v : s.values) lexicon.emplace(v);
    std::vector<std::string_view> templates(s.premise.begin(), s.premise.end());
    templates.insert(templates.end(), s.hypothesis.begin(), s.hypothesis.end());
    templates.push_back(s.negated);
    for (auto t : templates)
      for (const auto& w : tokenize(t))
        if (w != "P" && w != "V") lexicon.insert(w);
  }
  const auto c = synth_generate(small(2000, 500));
  std::set<std::string> train_words;
  for (const auto& ex : c.train)
    for (const auto* text : {&ex.premise, &ex.hypothesis})
      for (const auto& w : tokenize(*text)) {
        EXPECT_EQ(lexicon.count(w), 1u) << w;
        train_words.insert(w);
      }
  for (const auto& ex : c.dev)
    for (const auto* text : {&ex.premise, &ex.hypothesis})
      for (const auto& w : tokenize(*text)) EXPECT_EQ(train_words.count(w), 1u) << w;
}

TEST(Synth, FactCountValuesAndNegationRate) {
  auto cfg = small(3000, 10);
  cfg.min_facts = 1;
  cfg.max_facts = 2;
  cfg.values = 3;
  const auto c = synth_generate(cfg);
  std::size_t contradictions = 0, negated = 0;
  for (const auto& ex : c.train) {
    const auto facts = parse_premise(ex.premise);
    ASSERT_TRUE(facts.has_value());
    EXPECT_GE(facts->size(), 1u);
    EXPECT_LE(facts->size(), 2u);
    for (const auto& f : *facts) EXPECT_LT(f.value, 3u);
    EXPECT_LT(parse_hypothesis(ex.hypothesis)->value, 3u);
    if (ex.label == Label::contradiction) {
      ++contradictions;
      for (const auto& f : *facts) negated += f.negated;
    }
  }
  // Binomial(1000, 0.25): mean 250, sd 13.7.
  EXPECT_EQ(contradictions, 1000u);
  EXPECT_NEAR(static_cast<double>(negated), 250.0, 4 * std::sqrt(1000 * 0.25 * 0.75));
}

TEST(Synth, ConfigValidation) {
  auto bad = [](auto edit) {
    auto c = small(10, 10);
    edit(c);
    return c;
  };
  EXPECT_THROW(synth_generate(bad([](SynthConfig& c) { c.train = 0; })), ConfigError);
  EXPECT_THROW(synth_generate(bad([](SynthConfig& c) { c.heldout_fraction = 0.0; })), ConfigError);
  EXPECT_THROW(synth_generate(bad([](SynthConfig& c) { c.heldout_fraction = 1.0; })), ConfigError);
  EXPECT_THROW(synth_generate(bad([](SynthConfig& c) { c.min_facts = 0; })), ConfigError);
  EXPECT_THROW(synth_generate(bad([](SynthConfig& c) { c.min_facts = 3, c.max_facts = 2; })), ConfigError);
  EXPECT_THROW(synth_generate(bad([](SynthConfig& c) { c.max_facts = 5; })), ConfigError);
  EXPECT_THROW(synth_generate(bad([](SynthConfig& c) { c.values = 1; })), ConfigError);
  EXPECT_THROW(synth_generate(bad([](SynthConfig& c) { c.values = 9; })), ConfigError);
  EXPECT_NO_THROW(synth_generate(bad([](SynthConfig& c) { c.max_facts = 4; })));
}

TEST(Synth, HypothesisCarriesNoLabelSignal) {
  const auto c = synth_generate(small(6000, 10));
  // Majority label per single feature stays near chance; with at most a few
  // hundred feature values over 6000 balanced examples the in-sample excess is small.
  EXPECT_LT(hypothesis_feature_ceiling(c.train), 0.40);

  // Chi-square of template shape against label, 3 shapes-per-slot x 3 labels.
  std::map<std::string, std::array<double, 3>> table;
  for (const auto& ex : c.train) {
    const auto h = parse_hypothesis(ex.hypothesis);
    auto tokens = tokenize(ex.hypothesis);
    table[std::to_string(h->slot) + tokens[1]][static_cast<std::size_t>(ex.label)] += 1;
  }
  double chi2 = 0.0;
  for (const auto& [key, counts] : table) {
    const double row = counts[0] + counts[1] + counts[2];
    for (double o : counts) {
      const double e = row / 3.0;
      chi2 += (o - e) * (o - e) / e;
    }
  }
  const double dof = 2.0 * static_cast<double>(table.size());
  EXPECT_LT(chi2, dof + 5.0 * std::sqrt(2.0 * dof));
}

TEST(Synth, CeilingDetectsLeakage) {
  // A corpus where the slot decides the label: the ceiling must reach 1.
  std::vector<NliExample> leaky;
  for (std::size_t i = 0; i < 30; ++i) {
    NliExample ex;
    const std::size_t slot = i % 3;
    ex.hypothesis = render(slots()[slot].hypothesis[0], Fact{i % 20, slot, i % 8, false});
    ex.premise = "x";
    ex.label = static_cast<Label>(slot);
    leaky.push_back(ex);
  }
  EXPECT_EQ(hypothesis_feature_ceiling(leaky), 1.0);
  EXPECT_THROW(hypothesis_feature_ceiling({}), ContractError);
}

TEST(Synth, RenderAndParseRoundTrip) {
  CounterRng rng(9);
  for (int t = 0; t < 2000; ++t) {
    const Fact f{rng.below(20), rng.below(5), rng.below(8), false};
    const auto& s = slots()[f.slot];
    EXPECT_EQ(parse_hypothesis(render(s.hypothesis[rng.below(2)], f)), f);
    const auto premise = render(s.premise[rng.below(2)], f) + " and " + render(s.negated, f);
    const auto facts = parse_premise(premise);
    ASSERT_TRUE(facts.has_value());
    ASSERT_EQ(facts->size(), 2u);
    EXPECT_EQ((*facts)[0], f);
    EXPECT_TRUE((*facts)[1].negated);
  }
  EXPECT_FALSE(parse_hypothesis("nobody likes tea").has_value());
}
