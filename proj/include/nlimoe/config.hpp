#pragma once

// Run configuration: flat `key = value` INI text with section headers.
//
// Three presets exist. "paper" carries the published hyperparameters with a
// large encoder; "desk" keeps them where they make sense but shrinks the
// encoder to something a CPU trains in minutes; "toy" is the tiny model used
// for finite-difference gradient checks.

#include <charconv>
#include <cstdint>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>
#include <string>
#include <string_view>

#include <boost/property_tree/ini_parser.hpp>
#include <boost/property_tree/ptree.hpp>

#include "nlimoe/adam.hpp"
#include "nlimoe/encoder.hpp"
#include "nlimoe/errors.hpp"
#include "nlimoe/moe.hpp"
#include "nlimoe/objectives.hpp"

namespace nlimoe {

struct RunPaths {
  std::string train;
  std::string dev;
  std::string test;
  std::string out;

  bool operator==(const RunPaths&) const = default;
};

struct RunConfig {
  EncoderConfig encoder;
  std::size_t min_freq = 1;
  RouterConfig router;
  LossWeights loss;
  AdamConfig optimizer;
  std::size_t warmup_steps = 0;  // linear ramp of the learning rate from 0
  bool linear_decay = false;     // then linear decay to 0 at the last step
  std::size_t batch_size = 16;
  std::size_t epochs = 7;
  std::size_t eval_frequency = 400;  // optimizer steps between dev evaluations
  std::uint64_t seed = 42;
  double target_dev_accuracy = 0.0;  // stop once reached; 0 disables
  bool hypothesis_only = false;
  bool freeze_complexity_gate = false;
  RunPaths paths;

  bool operator==(const RunConfig&) const = default;
};

inline RunConfig paper_profile() {
  RunConfig c;
  c.encoder = {1024, 24, 16, 4096, 256, PositionalEncoding::sinusoidal};
  c.router = {7, RoutingMode::dynamic, 1, 0.1, 0.1, 0.4, true};
  c.loss = {1e-3, 1e-2};
  c.optimizer = {1e-5, 1e-8, 0.9, 0.999};
  c.batch_size = 16;
  c.epochs = 7;
  c.eval_frequency = 400;
  return c;
}

inline RunConfig desk_profile() {
  RunConfig c = paper_profile();
  c.encoder = {64, 2, 4, 128, 64, PositionalEncoding::sinusoidal};
  // Small models from scratch need a short warmup and a larger step.
  c.optimizer.learning_rate = 2e-3;
  c.warmup_steps = 250;
  c.linear_decay = true;
  c.router.expert_dropout = 0.1;
  c.epochs = 20;
  c.eval_frequency = 125;
  return c;
}

inline RunConfig toy_profile() {
  RunConfig c = paper_profile();
  c.encoder = {8, 1, 2, 16, 24, PositionalEncoding::sinusoidal};
  c.router.num_experts = 3;
  c.batch_size = 4;
  c.epochs = 1;
  c.eval_frequency = 10;
  c.optimizer.learning_rate = 1e-3;
  return c;
}

inline RunConfig profile(std::string_view name) {
  if (name == "paper") return paper_profile();
  if (name == "desk") return desk_profile();
  if (name == "toy") return toy_profile();
  throw ConfigError("unknown profile \"" + std::string(name) + "\" (expected paper, desk or toy)");
}

inline void validate(const RunConfig& c) {
  validate(c.encoder);
  validate(c.router);
  if (c.min_freq == 0) throw ConfigError("min_freq must be at least 1");
  if (c.batch_size == 0) throw ConfigError("batch_size must be at least 1");
  if (c.epochs == 0) throw ConfigError("epochs must be at least 1");
  if (c.eval_frequency == 0) throw ConfigError("eval_frequency must be at least 1");
  if (!(c.loss.alpha >= 0.0) || !(c.loss.beta >= 0.0)) throw ConfigError("loss weights must be non-negative");
  if (!(c.optimizer.learning_rate > 0.0)) throw ConfigError("learning_rate must be positive");
  if (!(c.optimizer.epsilon > 0.0)) throw ConfigError("adam epsilon must be positive");
  if (!(c.optimizer.beta1 >= 0.0 && c.optimizer.beta1 < 1.0) || !(c.optimizer.beta2 >= 0.0 && c.optimizer.beta2 < 1.0)) {
    throw ConfigError("adam betas must be in [0,1)");
  }
}

namespace detail {

inline std::string format_double(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.17g", v);
  return buf;
}

inline std::size_t parse_count(const std::string& key, const std::string& v) {
  std::size_t out = 0;
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError("config key " + key + ": expected a count, got \"" + v + "\"");
  return out;
}

inline std::uint64_t parse_u64(const std::string& key, const std::string& v) {
  std::uint64_t out = 0;
  const auto* end = v.data() + v.size();
  const auto [ptr, ec] = std::from_chars(v.data(), end, out);
  if (ec != std::errc() || ptr != end) throw ConfigError("config key " + key + ": expected an integer, got \"" + v + "\"");
  return out;
}

inline double parse_real(const std::string& key, const std::string& v) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    used = 0;
  }
  if (used == 0 || used != v.size()) throw ConfigError("config key " + key + ": expected a number, got \"" + v + "\"");
  return out;
}

inline bool parse_flag(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ConfigError("config key " + key + ": expected true or false, got \"" + v + "\"");
}

}  // namespace detail

inline std::string to_config_text(const RunConfig& c) {
  using detail::format_double;
  std::ostringstream out;
  out << "[encoder]\n"
      << "dim = " << c.encoder.dim << "\n"
      << "layers = " << c.encoder.layers << "\n"
      << "heads = " << c.encoder.heads << "\n"
      << "ff_width = " << c.encoder.ff_width << "\n"
      << "max_length = " << c.encoder.max_length << "\n"
      << "positions = " << (c.encoder.positions == PositionalEncoding::learned ? "learned" : "sinusoidal") << "\n"
      << "min_freq = " << c.min_freq << "\n\n"
      << "[router]\n"
      << "num_experts = " << c.router.num_experts << "\n"
      << "routing = " << routing_name(c.router) << "\n"
      << "rho_static = " << format_double(c.router.rho_static) << "\n"
      << "gamma = " << format_double(c.router.gamma) << "\n"
      << "expert_dropout = " << format_double(c.router.expert_dropout) << "\n"
      << "enabled = " << (c.router.enabled ? "true" : "false") << "\n\n"
      << "[loss]\n"
      << "alpha = " << format_double(c.loss.alpha) << "\n"
      << "beta = " << format_double(c.loss.beta) << "\n\n"
      << "[optimizer]\n"
      << "learning_rate = " << format_double(c.optimizer.learning_rate) << "\n"
      << "epsilon = " << format_double(c.optimizer.epsilon) << "\n"
      << "beta1 = " << format_double(c.optimizer.beta1) << "\n"
      << "beta2 = " << format_double(c.optimizer.beta2) << "\n"
      << "warmup_steps = " << c.warmup_steps << "\n"
      << "linear_decay = " << (c.linear_decay ? "true" : "false") << "\n\n"
      << "[train]\n"
      << "batch_size = " << c.batch_size << "\n"
      << "epochs = " << c.epochs << "\n"
      << "eval_frequency = " << c.eval_frequency << "\n"
      << "seed = " << c.seed << "\n"
      << "target_dev_accuracy = " << format_double(c.target_dev_accuracy) << "\n\n"
      << "[mode]\n"
      << "hypothesis_only = " << (c.hypothesis_only ? "true" : "false") << "\n"
      << "freeze_complexity_gate = " << (c.freeze_complexity_gate ? "true" : "false") << "\n\n"
      << "[paths]\n"
      << "train = " << c.paths.train << "\n"
      << "dev = " << c.paths.dev << "\n"
      << "test = " << c.paths.test << "\n"
      << "out = " << c.paths.out << "\n";
  return out.str();
}

/// Applies the keys present in `text` on top of `base`. Unknown sections or
/// keys are errors.
inline RunConfig parse_config_text(const std::string& text, RunConfig base, const std::string& source = "<config>") {
  boost::property_tree::ptree tree;
  std::istringstream in(text);
  try {
    boost::property_tree::ini_parser::read_ini(in, tree);
  } catch (const boost::property_tree::ini_parser_error& e) {
    throw ConfigError(source + ":" + std::to_string(e.line()) + ": " + e.message());
  }
  using namespace detail;
  RunConfig& c = base;
  for (const auto& [section, keys] : tree) {
    if (keys.empty() && !keys.data().empty()) throw ConfigError(source + ": key \"" + section + "\" outside a section");
    for (const auto& [key, node] : keys) {
      const std::string name = section + "." + key;
      const std::string v = node.get_value<std::string>();
      if (name == "encoder.dim") c.encoder.dim = parse_count(name, v);
      else if (name == "encoder.layers") c.encoder.layers = parse_count(name, v);
      else if (name == "encoder.heads") c.encoder.heads = parse_count(name, v);
      else if (name == "encoder.ff_width") c.encoder.ff_width = parse_count(name, v);
      else if (name == "encoder.max_length") c.encoder.max_length = parse_count(name, v);
      else if (name == "encoder.positions") {
        if (v == "sinusoidal") c.encoder.positions = PositionalEncoding::sinusoidal;
        else if (v == "learned") c.encoder.positions = PositionalEncoding::learned;
        else throw ConfigError("config key " + name + ": expected sinusoidal or learned");
      } else if (name == "encoder.min_freq") c.min_freq = parse_count(name, v);
      else if (name == "router.num_experts") c.router.num_experts = parse_count(name, v);
      else if (name == "router.routing") parse_routing(v, c.router);
      else if (name == "router.rho_static") c.router.rho_static = parse_real(name, v);
      else if (name == "router.gamma") c.router.gamma = parse_real(name, v);
      else if (name == "router.expert_dropout") c.router.expert_dropout = parse_real(name, v);
      else if (name == "router.enabled") c.router.enabled = parse_flag(name, v);
      else if (name == "loss.alpha") c.loss.alpha = parse_real(name, v);
      else if (name == "loss.beta") c.loss.beta = parse_real(name, v);
      else if (name == "optimizer.learning_rate") c.optimizer.learning_rate = parse_real(name, v);
      else if (name == "optimizer.epsilon") c.optimizer.epsilon = parse_real(name, v);
      else if (name == "optimizer.beta1") c.optimizer.beta1 = parse_real(name, v);
      else if (name == "optimizer.beta2") c.optimizer.beta2 = parse_real(name, v);
      else if (name == "optimizer.warmup_steps") c.warmup_steps = parse_count(name, v);
      else if (name == "optimizer.linear_decay") c.linear_decay = parse_flag(name, v);
      else if (name == "train.batch_size") c.batch_size = parse_count(name, v);
      else if (name == "train.epochs") c.epochs = parse_count(name, v);
      else if (name == "train.eval_frequency") c.eval_frequency = parse_count(name, v);
      else if (name == "train.seed") c.seed = parse_u64(name, v);
      else if (name == "train.target_dev_accuracy") c.target_dev_accuracy = parse_real(name, v);
      else if (name == "mode.hypothesis_only") c.hypothesis_only = parse_flag(name, v);
      else if (name == "mode.freeze_complexity_gate") c.freeze_complexity_gate = parse_flag(name, v);
      else if (name == "paths.train") c.paths.train = v;
      else if (name == "paths.dev") c.paths.dev = v;
      else if (name == "paths.test") c.paths.test = v;
      else if (name == "paths.out") c.paths.out = v;
      else throw ConfigError(source + ": unknown config key \"" + name + "\"");
    }
  }
  return c;
}

inline RunConfig load_config(const std::string& path, RunConfig base) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file " + path);
  std::stringstream buffer;
  buffer << in.rdbuf();
  return parse_config_text(buffer.str(), std::move(base), path);
}

}  // namespace nlimoe
