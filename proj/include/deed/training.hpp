#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "deed/model.hpp"
#include "deed/tasks.hpp"
#include "json.hpp"

namespace deed {

enum class Objective {
  avg,             // mean of the per-layer losses
  avg_plus_final,  // mean + final-layer loss again
  alternating,     // even steps final layer only, odd steps the mean
  final_only,
};

std::string_view objective_name(Objective o);
Objective parse_objective(std::string_view name);

struct TrainConfig {
  Objective objective = Objective::avg_plus_final;
  float learning_rate = 1e-3F;
  std::size_t batch_size = 16;
  std::size_t steps = 1000;
  std::uint64_t seed = 42;
  float beta1 = 0.9F;
  float beta2 = 0.999F;
  float adam_eps = 1e-8F;

  void validate() const;
  bool operator==(const TrainConfig&) const = default;
};

void to_json(nlohmann::json& j, const TrainConfig& c);
void from_json(const nlohmann::json& j, TrainConfig& c);

struct LossReport {
  std::vector<float> per_layer;  // L_1..L_N
  float average = 0.0F;          // L_avg
  float total = 0.0F;            // objective value
};

// Differentiable losses plus their values.
struct DeepSupervisionLoss {
  std::vector<Tensor> per_layer;
  Tensor average;
  Tensor total;

  LossReport report() const;
};

// L_n is the mean cross-entropy of exit n over non-PAD label positions.
// `step` only matters for the alternating objective.
DeepSupervisionLoss loss_deep_supervision(std::span<const Tensor> per_layer_logits, std::span<const int> labels,
                                          Objective objective, std::uint64_t step = 0);

// Parity rule of alternating training: even step -> L_N, odd step -> L_avg.
Tensor loss_alternating(std::uint64_t step, std::span<const Tensor> per_layer_logits, std::span<const int> labels);

class AdamOptimizer {
 public:
  AdamOptimizer(std::vector<Tensor> params, float lr, float beta1, float beta2, float eps);
  void zero_grad();
  void step();

 private:
  std::vector<Tensor> params_;
  std::vector<std::vector<float>> m_, v_;
  float lr_, beta1_, beta2_, eps_;
  std::uint64_t t_ = 0;
};

struct LossCurveRow {
  std::size_t step = 0;
  LossReport loss;  // batch means
};

struct TrainResult {
  MultiExitModel model;
  std::vector<LossCurveRow> curve;
};

using TrainCallback = std::function<void(const LossCurveRow&)>;

// Teacher-forced training from scratch. Model weights are seeded with
// train_config.seed; batches are drawn with a seed derived from it.
// Throws NumericError if a loss becomes non-finite.
TrainResult train(const ModelConfig& model_config, const TrainConfig& train_config,
                  std::span<const TaskSample> dataset, const TrainCallback& on_step = {});

// Continues training an existing model in place.
std::vector<LossCurveRow> train_model(MultiExitModel& model, const TrainConfig& train_config,
                                      std::span<const TaskSample> dataset, const TrainCallback& on_step = {});

// Header `step,l1,...,lN,l_avg,l_total`.
void write_loss_curve_csv(const std::filesystem::path& path, std::span<const LossCurveRow> curve,
                          std::size_t layers);

// Fraction of non-PAD label positions where exit `layer` predicts the label
// under teacher forcing.
double teacher_forced_accuracy(const MultiExitModel& model, std::span<const TaskSample> samples, std::size_t layer);

}  // namespace deed
