#include <cstdlib>
#include <exception>
#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "nlimoe.hpp"

namespace {

struct CommonFlags {
  std::string config;
  std::string profile;
  std::optional<std::uint64_t> seed;
  std::string out;
  std::string routing;
  bool hypothesis_only = false;
  bool freeze_gate = false;
};

void add_common(CLI::App* cmd, CommonFlags& f, const std::string& default_profile) {
  f.profile = default_profile;
  cmd->add_option("--config", f.config, "INI file applied on top of the profile");
  cmd->add_option("--profile", f.profile, "Preset: paper, desk or toy")
      ->check(CLI::IsMember({"paper", "desk", "toy"}))
      ->capture_default_str();
  cmd->add_option("--seed", f.seed, "Random seed");
  cmd->add_option("--routing", f.routing, "dynamic, dense or topk:K");
  cmd->add_flag("--hypothesis-only", f.hypothesis_only, "Replace every premise with a placeholder");
  cmd->add_flag("--freeze-complexity-gate", f.freeze_gate, "Keep the complexity gate out of the optimizer");
}

nlimoe::RunConfig resolve(const CommonFlags& f) {
  nlimoe::RunConfig cfg = nlimoe::profile(f.profile);
  if (!f.config.empty()) cfg = nlimoe::load_config(f.config, cfg);
  if (f.seed) cfg.seed = *f.seed;
  if (!f.out.empty()) cfg.paths.out = f.out;
  if (!f.routing.empty()) nlimoe::parse_routing(f.routing, cfg.router);
  if (f.hypothesis_only) cfg.hypothesis_only = true;
  if (f.freeze_gate) cfg.freeze_complexity_gate = true;
  nlimoe::validate(cfg);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Dynamic-threshold mixture-of-experts NLI classifier"};
  app.require_subcommand(1);

  CommonFlags train_flags;
  std::string train_path, dev_path, test_path;
  auto* train_cmd = app.add_subcommand("train", "Train a model and write checkpoints plus a metrics log");
  add_common(train_cmd, train_flags, "desk");
  train_cmd->add_option("--out", train_flags.out, "Output directory");
  train_cmd->add_option("--train", train_path, "Training corpus (JSONL)");
  train_cmd->add_option("--dev", dev_path, "Dev corpus (JSONL)");
  train_cmd->add_option("--test", test_path, "Test corpus (JSONL), evaluated with the best checkpoint");

  std::string ckpt_path, eval_corpus, eval_out, eval_routing;
  auto* eval_cmd = app.add_subcommand("eval", "Evaluate a checkpoint on a corpus");
  eval_cmd->add_option("--checkpoint", ckpt_path, "Checkpoint file")->required();
  eval_cmd->add_option("--corpus", eval_corpus, "Corpus (JSONL)")->required();
  eval_cmd->add_option("--out", eval_out, "Directory for report, tables and traces");
  eval_cmd->add_option("--routing", eval_routing, "Override the routing rule: dynamic, dense or topk:K");

  std::string analyze_corpus, analyze_out;
  double pmi_k = 1.0;
  std::size_t pmi_min = 5;
  bool analyze_hyp_only = false;
  auto* analyze_cmd = app.add_subcommand("analyze", "Corpus statistics: lengths, overlap, new words, PMI, labels");
  analyze_cmd->add_option("--corpus", analyze_corpus, "Corpus (JSONL)")->required();
  analyze_cmd->add_option("--out", analyze_out, "Output directory")->required();
  analyze_cmd->add_option("--pmi-k", pmi_k, "Add-k smoothing constant")->capture_default_str();
  analyze_cmd->add_option("--min-count", pmi_min, "Minimum word count for PMI")->capture_default_str();
  analyze_cmd->add_flag("--hypothesis-only", analyze_hyp_only, "Analyze the hypothesis-only view");

  CommonFlags grad_flags;
  auto* grad_cmd = app.add_subcommand("gradcheck", "Finite-difference check of the full training objective");
  add_common(grad_cmd, grad_flags, "toy");

  nlimoe::synth::SynthConfig synth_cfg;
  std::string synth_out;
  auto* synth_cmd = app.add_subcommand("synth", "Write a templated synthetic NLI corpus");
  synth_cmd->add_option("--out", synth_out, "Output directory")->required();
  synth_cmd->add_option("--seed", synth_cfg.seed, "Generator seed")->capture_default_str();
  synth_cmd->add_option("--train-size", synth_cfg.train, "Training examples")->capture_default_str();
  synth_cmd->add_option("--dev-size", synth_cfg.dev, "Dev examples")->capture_default_str();
  synth_cmd->add_option("--test-size", synth_cfg.test, "Test examples")->capture_default_str();
  synth_cmd->add_option("--min-facts", synth_cfg.min_facts, "Fewest facts per premise")->capture_default_str();
  synth_cmd->add_option("--max-facts", synth_cfg.max_facts, "Most facts per premise")->capture_default_str();
  synth_cmd->add_option("--values", synth_cfg.values, "Values used per slot (2-8)")->capture_default_str();

  CLI11_PARSE(app, argc, argv);

  try {
    if (*train_cmd) {
      nlimoe::RunConfig cfg = resolve(train_flags);
      if (!train_path.empty()) cfg.paths.train = train_path;
      if (!dev_path.empty()) cfg.paths.dev = dev_path;
      if (!test_path.empty()) cfg.paths.test = test_path;
      const auto result = nlimoe::cmd_train(cfg, &std::cerr);
      std::cout << "steps " << result.steps << ", best dev accuracy " << result.best_dev_accuracy << " at step "
                << result.best_step << ", " << result.seconds << " s\n";
      if (!cfg.paths.test.empty()) {
        nlimoe::Checkpoint ck = nlimoe::parse_checkpoint(result.best_checkpoint, "best checkpoint");
        nlimoe::EvalOptions options;
        if (!cfg.paths.out.empty()) options.out_dir = cfg.paths.out + "/test";
        const auto report = nlimoe::cmd_eval(ck, nlimoe::load_corpus(cfg.paths.test), options);
        std::cout << "test accuracy " << report.accuracy << ", macro-F1 " << report.macro_f1 << "\n";
      }
    } else if (*eval_cmd) {
      nlimoe::EvalOptions options;
      options.out_dir = eval_out;
      if (!eval_routing.empty()) options.routing = eval_routing;
      const auto report = nlimoe::cmd_eval(ckpt_path, eval_corpus, options);
      nlimoe::write_report_text(std::cout, report);
    } else if (*analyze_cmd) {
      auto corpus = nlimoe::load_corpus(analyze_corpus);
      if (analyze_hyp_only) corpus = nlimoe::hypothesis_only_view(corpus);
      const auto bundle = nlimoe::cmd_analyze(corpus, analyze_out, pmi_k, pmi_min);
      std::cout << nlimoe::analysis_json(bundle).dump(2) << "\n";
    } else if (*grad_cmd) {
      const auto outcome = nlimoe::cmd_gradcheck(resolve(grad_flags));
      nlimoe::write_gradcheck_report(std::cout, outcome);
      return outcome.passed ? EXIT_SUCCESS : EXIT_FAILURE;
    } else if (*synth_cmd) {
      const auto corpus = nlimoe::cmd_synth(synth_cfg, synth_out);
      std::cout << "wrote " << corpus.train.size() << " train, " << corpus.dev.size() << " dev, " << corpus.test.size()
                << " test examples to " << synth_out << "\n";
    }
  } catch (const nlimoe::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  return EXIT_SUCCESS;
}
