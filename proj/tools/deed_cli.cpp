// deed: train, evaluate and sweep multi-exit decoders with step-level early
// exit.
//
//   deed gen-data --config run.json --out data/
//   deed train    --config run.json --seed 42 --out runs/ref
//   deed eval     --config run.json --ckpt runs/ref/model.ckpt --strategy deed --tau 0.9
//   deed sweep    --config run.json --ckpt runs/ref/model.ckpt --strategy deed,dat --tau 0.5,0.9,0.99
//   deed ablate   --config run.json --out runs/ablate
//   deed inspect-ckpt --ckpt runs/ref/model.ckpt

#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "deed/harness.hpp"

int main(int argc, char** argv) {
  CLI::App app{"Step-level dynamic early exit for encoder-decoder transformers"};
  app.require_subcommand(1);

  std::string config_path;
  std::string ckpt;
  std::string strategy;
  std::string tau;
  std::optional<std::uint64_t> seed;
  std::string out_dir;
  std::string data;
  std::string traces;

  auto add_common = [&](CLI::App* cmd) {
    cmd->add_option("--config", config_path, "Run config (UTF-8 JSON)");
    cmd->add_option("--seed", seed, "Seed (u64)");
    cmd->add_option("--out", out_dir, "Output directory");
  };
  auto add_eval_flags = [&](CLI::App* cmd) {
    cmd->add_option("--ckpt", ckpt, "Checkpoint path");
    cmd->add_option("--strategy", strategy, "deed|full|dat|slex|ftex, comma separated for sweep");
    cmd->add_option("--tau", tau, "Confidence threshold(s), comma separated");
    cmd->add_option("--data", data, "Evaluation dataset (JSONL); overrides eval_data");
  };

  auto* train = app.add_subcommand("train", "Train a multi-exit model with deep supervision");
  add_common(train);
  train->add_option("--data", data, "Training dataset (JSONL); overrides train_data");
  auto* eval = app.add_subcommand("eval", "Decode a dataset and report accuracy and compute");
  add_common(eval);
  add_eval_flags(eval);
  eval->add_option("--traces", traces, "Re-aggregate an existing trace file instead of decoding");
  auto* sweep = app.add_subcommand("sweep", "Evaluate strategies across thresholds");
  add_common(sweep);
  add_eval_flags(sweep);
  auto* ablate = app.add_subcommand("ablate", "Train and compare head/adaptation/objective variants");
  add_common(ablate);
  auto* gen = app.add_subcommand("gen-data", "Write synthetic train/eval datasets");
  add_common(gen);
  auto* inspect = app.add_subcommand("inspect-ckpt", "Print checkpoint config, tensors and parameter counts");
  add_common(inspect);
  inspect->add_option("--ckpt", ckpt, "Checkpoint path");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int rc = app.exit(e);
    return rc == 0 ? 0 : deed::kExitConfig;
  }

  deed::RunConfig config;
  try {
    if (!config_path.empty()) config = deed::load_run_config(config_path);
    if (seed) config.seed = seed;
    if (!out_dir.empty()) config.out_dir = out_dir;
    if (!ckpt.empty()) config.checkpoint = ckpt;
    if (!strategy.empty()) config.strategies = deed::parse_strategy_list(strategy);
    if (!tau.empty()) config.taus = deed::parse_tau_list(tau);
    if (!traces.empty()) config.traces = traces;
    if (!data.empty()) (train->parsed() ? config.train_data : config.eval_data) = data;
    config.validate_taus();
  } catch (const std::exception& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return deed::kExitConfig;
  }

  if (train->parsed()) return deed::cmd_train(config, std::cout, std::cerr);
  if (eval->parsed()) return deed::cmd_eval(config, std::cout, std::cerr);
  if (sweep->parsed()) return deed::cmd_sweep(config, std::cout, std::cerr);
  if (ablate->parsed()) return deed::cmd_ablate(config, std::cout, std::cerr);
  if (gen->parsed()) return deed::cmd_gen_data(config, std::cout, std::cerr);
  return deed::cmd_inspect_ckpt(config, std::cout, std::cerr);
}
