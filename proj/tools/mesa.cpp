#include <iostream>
#include <optional>
#include <string>

#include <CLI11.hpp>

#include "mesa/mesa.hpp"

int main(int argc, char** argv) {
  CLI::App app{"mesa: train, verify and analyze autoregressive sequence models"};
  app.require_subcommand(1);

  std::string config_path, out, checkpoint, suite = "all", tokens;
  std::optional<std::uint64_t> seed;
  bool resume = false, inject = false;

  auto add_common = [&](CLI::App* sub, bool needs_config) {
    auto* opt = sub->add_option("--config", config_path, "experiment config (JSON)");
    if (needs_config) opt->required()->check(CLI::ExistingFile);
    sub->add_option("--seed", seed, "run a single seed instead of the config's list");
    sub->add_option("--out", out, "output directory");
  };

  auto* gen = app.add_subcommand("gen", "generate and freeze a sequence batch");
  add_common(gen, true);
  auto* train = app.add_subcommand("train", "train one model per seed");
  add_common(train, true);
  train->add_flag("--resume", resume, "continue from the seed's checkpoint");
  train->add_option("--checkpoint", checkpoint, "checkpoint to resume from");
  auto* verify = app.add_subcommand("verify", "run equivalence and oracle suites");
  add_common(verify, false);
  verify->add_option("--suite", suite, "prop1|prop2|mesa|gradients|oracles|all");
  verify->add_flag("--inject-bad-lambda", inject, "feed lambda <= 0 into the mesa suite");
  verify->allow_extras();

  std::vector<CLI::App*> analyses;
  for (const char* name : {"probe", "icl", "distill", "maps", "sensitivity", "tune"}) {
    auto* sub = app.add_subcommand(name, std::string("run the ") + name + " analysis on a checkpoint");
    add_common(sub, true);
    sub->add_option("--checkpoint", checkpoint, "checkpoint file (default: <out>/seed_N/checkpoint.mesa)");
    sub->add_option("--tokens", tokens, "tuned prompt-token file");
    analyses.push_back(sub);
  }

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? mesa::kExitOk : mesa::kExitUsage;
  }

  try {
    if (verify->parsed()) {
      // `mesa verify all` is accepted as a positional suite name.
      const auto extras = verify->remaining();
      if (!extras.empty()) suite = extras.front();
      mesa::VerifyOptions vo;
      vo.seed = seed.value_or(0);
      vo.inject_bad_lambda = inject;
      const char* env = std::getenv("MESA_OUTPUT_DIR");
      const std::string dir = !out.empty() ? out : (env && *env ? env : "runs");
      return mesa::cmd_verify(suite, dir, vo);
    }
    const mesa::ExperimentConfig cfg = mesa::load_experiment(config_path);
    const auto dir = mesa::resolve_output_dir(cfg, out);
    if (gen->parsed()) return mesa::cmd_gen(cfg, dir, seed);
    if (train->parsed()) return mesa::cmd_train(cfg, dir, {seed, resume, checkpoint});
    for (auto* sub : analyses) {
      if (!sub->parsed()) continue;
      const std::string kind = sub->get_name() == "tune" ? "prompt" : sub->get_name();
      return mesa::cmd_analyze(kind, cfg, dir, {seed, checkpoint, tokens});
    }
  } catch (const mesa::DivergedTraining& e) {
    std::cerr << "error: " << e.what() << "\n";
    return mesa::kExitDiverged;
  } catch (const mesa::Error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return mesa::kExitUsage;
  }
  return mesa::kExitUsage;
}
