#pragma once

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "deed/decode.hpp"
#include "deed/metrics.hpp"
#include "deed/model.hpp"
#include "deed/training.hpp"

namespace deed {

enum ExitCode : int {
  kExitOk = 0,
  kExitConfig = 2,
  kExitArtifact = 3,
  kExitNumeric = 4,
};

// Everything a CLI verb may need. Loaded from a JSON file and then
// overridden by command-line flags.
//
//   {
//     "model": {...} | "model.json",
//     "train": {...} | "train.json",
//     "train_data": "train.jsonl",
//     "eval_data": "eval.jsonl",
//     "strategy": "deed" | ["deed", "dat"],
//     "tau": [0.5, 0.9],
//     "out": "runs/x",
//     "seed": 42,
//     "gen": {"kinds": ["copy"], "train_count": 1000, "eval_count": 200},
//     "ablate": {"seeds": [1, 2, 3]}
//   }
struct RunConfig {
  std::optional<ModelConfig> model;
  TrainConfig train;
  std::string train_data;
  std::string eval_data;
  std::vector<Strategy> strategies{Strategy::deed};
  std::vector<float> taus{0.9F};
  std::filesystem::path out_dir = "out";
  std::optional<std::uint64_t> seed;
  std::optional<std::filesystem::path> checkpoint;
  std::optional<std::filesystem::path> traces;  // eval: re-aggregate instead of decoding
  std::vector<TaskKind> gen_kinds{TaskKind::copy, TaskKind::reverse, TaskKind::addition};
  std::size_t gen_train_count = 2000;
  std::size_t gen_eval_count = 200;
  std::vector<std::uint64_t> ablate_seeds;

  // Throws ValidationError.
  void validate_taus() const;
};

// Throws ValidationError on unreadable or malformed JSON.
RunConfig load_run_config(const std::filesystem::path& path);
RunConfig parse_run_config(const nlohmann::json& j);

std::vector<float> parse_tau_list(const std::string& text);
std::vector<Strategy> parse_strategy_list(const std::string& text);

struct SweepRow {
  Strategy strategy = Strategy::deed;
  float tau = 0.0F;
  EvalReport report;
};

void write_sweep_csv(const std::filesystem::path& path, const std::vector<SweepRow>& rows, std::size_t layers);
std::vector<SweepRow> run_sweep(const MultiExitModel& model, std::span<const TaskSample> samples,
                                std::span<const Strategy> strategies, std::span<const float> taus);

struct AblationRow {
  std::string variant;
  std::string objective;
  std::uint64_t seed = 0;
  std::size_t layer = 0;
  double exact_match = 0.0;
  double anls = 0.0;
};

// The architecture variants: baseline (unshared heads, no adaptation), SH,
// AM, SH+AM.
struct AblationVariant {
  std::string name;
  bool shared_head;
  bool adaptation_modules;
};
std::vector<AblationVariant> ablation_variants();

std::vector<AblationRow> run_ablation(const ModelConfig& base, const TrainConfig& train_config,
                                      std::span<const TaskSample> train_data, std::span<const TaskSample> eval_data,
                                      std::span<const AblationVariant> variants, std::span<const Objective> objectives,
                                      std::span<const std::uint64_t> seeds);
void write_ablation_csv(const std::filesystem::path& path, const std::vector<AblationRow>& rows);

// CLI verbs. Each returns an ExitCode and reports problems on `err`.
int cmd_train(const RunConfig& config, std::ostream& out, std::ostream& err);
int cmd_eval(const RunConfig& config, std::ostream& out, std::ostream& err);
int cmd_sweep(const RunConfig& config, std::ostream& out, std::ostream& err);
int cmd_ablate(const RunConfig& config, std::ostream& out, std::ostream& err);
int cmd_gen_data(const RunConfig& config, std::ostream& out, std::ostream& err);
int cmd_inspect_ckpt(const RunConfig& config, std::ostream& out, std::ostream& err);

}  // namespace deed
