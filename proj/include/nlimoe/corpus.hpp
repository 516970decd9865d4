#pragma once

#include <algorithm>
#include <array>
#include <cstddef>
#include <fstream>
#include <istream>
#include <optional>
#include <ostream>
#include <string>
#include <string_view>
#include <vector>

#include <json.hpp>

#include "nlimoe/errors.hpp"

namespace nlimoe {

enum class Label : int { entailment = 0, contradiction = 1, neutral = 2 };

inline constexpr std::size_t kNumLabels = 3;
inline constexpr std::array<std::string_view, kNumLabels> kLabelNames = {"entailment", "contradiction", "neutral"};
inline constexpr std::array<std::string_view, 3> kRounds = {"ViA1", "ViA2", "ViA3"};
inline constexpr std::array<std::string_view, 7> kInferenceTypes = {"NaQR", "RaN", "SLI", "LR", "TLI", "EKR", "CaCI"};

inline std::string_view label_name(Label l) { return kLabelNames.at(static_cast<std::size_t>(l)); }
inline int label_index(Label l) { return static_cast<int>(l); }

inline std::optional<Label> parse_label(std::string_view s) {
  std::string lower(s);
  std::transform(lower.begin(), lower.end(), lower.begin(), [](unsigned char c) { return std::tolower(c); });
  for (std::size_t i = 0; i < kNumLabels; ++i)
    if (lower == kLabelNames[i]) return static_cast<Label>(i);
  return std::nullopt;
}

struct NliExample {
  std::string id;
  std::string premise;
  std::string hypothesis;
  Label label = Label::entailment;
  std::optional<std::string> topic;
  std::optional<std::string> round;
  std::vector<std::string> inference_types;
  std::size_t line = 0;  // 1-based source line, 0 when not loaded from a file
};

/// Whitespace tokenizer shared by the vocabulary and every corpus statistic.
inline std::vector<std::string> tokenize(std::string_view text) {
  std::vector<std::string> out;
  std::size_t i = 0;
  auto space = [](char c) { return c == ' ' || c == '\t' || c == '\n' || c == '\r' || c == '\f' || c == '\v'; };
  while (i < text.size()) {
    while (i < text.size() && space(text[i])) ++i;
    const std::size_t start = i;
    while (i < text.size() && !space(text[i])) ++i;
    if (i > start) out.emplace_back(text.substr(start, i - start));
  }
  return out;
}

namespace detail {

inline std::string require_string(const nlohmann::json& rec, const char* key, const std::string& where) {
  const auto it = rec.find(key);
  if (it == rec.end()) throw DataError(where + ": missing field \"" + key + "\"");
  if (!it->is_string()) throw DataError(where + ": field \"" + key + "\" must be a string");
  return it->get<std::string>();
}

inline std::optional<std::string> optional_string(const nlohmann::json& rec, const char* key, const std::string& where) {
  const auto it = rec.find(key);
  if (it == rec.end() || it->is_null()) return std::nullopt;
  if (!it->is_string()) throw DataError(where + ": field \"" + key + "\" must be a string");
  return it->get<std::string>();
}

}  // namespace detail

/// Parses one corpus record. `where` prefixes every error message.
inline NliExample parse_record(std::string_view line, const std::string& where) {
  nlohmann::json rec;
  try {
    rec = nlohmann::json::parse(line);
  } catch (const nlohmann::json::parse_error& e) {
    throw DataError(where + ": malformed record (" + e.what() + ")");
  }
  if (!rec.is_object()) throw DataError(where + ": record is not an object");

  NliExample ex;
  ex.premise = detail::require_string(rec, "premise", where);
  ex.hypothesis = detail::require_string(rec, "hypothesis", where);
  const auto label = detail::require_string(rec, "label", where);
  const auto parsed = parse_label(label);
  if (!parsed) throw DataError(where + ": unknown label \"" + label + "\"");
  ex.label = *parsed;
  if (tokenize(ex.premise).empty()) throw DataError(where + ": empty premise");
  if (tokenize(ex.hypothesis).empty()) throw DataError(where + ": empty hypothesis");

  if (auto id = rec.find("id"); id != rec.end() && !id->is_null()) {
    ex.id = id->is_string() ? id->get<std::string>() : id->dump();
  }
  ex.topic = detail::optional_string(rec, "topic", where);
  ex.round = detail::optional_string(rec, "round", where);
  if (ex.round && std::find(kRounds.begin(), kRounds.end(), *ex.round) == kRounds.end()) {
    throw DataError(where + ": unknown round \"" + *ex.round + "\"");
  }
  if (auto types = rec.find("inference_types"); types != rec.end() && !types->is_null()) {
    if (!types->is_array()) throw DataError(where + ": field \"inference_types\" must be an array");
    for (const auto& t : *types) {
      if (!t.is_string()) throw DataError(where + ": inference type must be a string");
      auto name = t.get<std::string>();
      if (std::find(kInferenceTypes.begin(), kInferenceTypes.end(), name) == kInferenceTypes.end()) {
        throw DataError(where + ": unknown inference type \"" + name + "\"");
      }
      ex.inference_types.push_back(std::move(name));
    }
  }
  return ex;
}

/// Reads line-delimited JSON records. Blank lines are skipped; fields other
/// than the documented ones are ignored.
inline std::vector<NliExample> parse_corpus(std::istream& in, const std::string& source) {
  std::vector<NliExample> out;
  std::string line;
  std::size_t number = 0;
  while (std::getline(in, line)) {
    ++number;
    if (tokenize(line).empty()) continue;
    auto ex = parse_record(line, source + ":" + std::to_string(number));
    ex.line = number;
    if (ex.id.empty()) ex.id = std::to_string(number);
    out.push_back(std::move(ex));
  }
  return out;
}

inline std::vector<NliExample> load_corpus(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open corpus file " + path);
  return parse_corpus(in, path);
}

inline nlohmann::json to_json(const NliExample& ex) {
  nlohmann::json rec;
  if (!ex.id.empty()) rec["id"] = ex.id;
  rec["premise"] = ex.premise;
  rec["hypothesis"] = ex.hypothesis;
  rec["label"] = std::string(label_name(ex.label));
  if (ex.topic) rec["topic"] = *ex.topic;
  if (ex.round) rec["round"] = *ex.round;
  if (!ex.inference_types.empty()) rec["inference_types"] = ex.inference_types;
  return rec;
}

inline void write_corpus(std::ostream& out, const std::vector<NliExample>& corpus) {
  for (const auto& ex : corpus) out << to_json(ex).dump() << '\n';
}

inline void save_corpus(const std::string& path, const std::vector<NliExample>& corpus) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write corpus file " + path);
  write_corpus(out, corpus);
}

inline std::array<std::size_t, kNumLabels> label_distribution(const std::vector<NliExample>& corpus) {
  std::array<std::size_t, kNumLabels> counts{};
  for (const auto& ex : corpus) ++counts[static_cast<std::size_t>(ex.label)];
  return counts;
}

}  // namespace nlimoe
