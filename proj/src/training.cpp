#include "deed/training.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>

#include "deed/random.hpp"

namespace deed {

std::string_view objective_name(Objective o) {
  switch (o) {
    case Objective::avg:
      return "avg";
    case Objective::avg_plus_final:
      return "avg_plus_final";
    case Objective::alternating:
      return "alternating";
    case Objective::final_only:
      return "final_only";
  }
  return "unknown";
}

Objective parse_objective(std::string_view name) {
  if (name == "avg") return Objective::avg;
  if (name == "avg_plus_final") return Objective::avg_plus_final;
  if (name == "alternating") return Objective::alternating;
  if (name == "final_only") return Objective::final_only;
  throw ValidationError("unknown objective '" + std::string(name) + "'");
}

void TrainConfig::validate() const {
  if (steps < 1) throw ValidationError("train steps must be at least 1");
  if (!(learning_rate > 0.0F)) throw ValidationError("learning rate must be positive");
  if (batch_size < 1) throw ValidationError("batch size must be at least 1");
}

void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = nlohmann::json{{"objective", std::string(objective_name(c.objective))},
                     {"learning_rate", c.learning_rate},
                     {"batch_size", c.batch_size},
                     {"steps", c.steps},
                     {"seed", c.seed},
                     {"beta1", c.beta1},
                     {"beta2", c.beta2},
                     {"adam_eps", c.adam_eps}};
}

void from_json(const nlohmann::json& j, TrainConfig& c) {
  TrainConfig d;
  c.objective = parse_objective(j.value("objective", std::string(objective_name(d.objective))));
  c.learning_rate = j.value("learning_rate", d.learning_rate);
  c.batch_size = j.value("batch_size", d.batch_size);
  c.steps = j.value("steps", d.steps);
  c.seed = j.value("seed", d.seed);
  c.beta1 = j.value("beta1", d.beta1);
  c.beta2 = j.value("beta2", d.beta2);
  c.adam_eps = j.value("adam_eps", d.adam_eps);
}

LossReport DeepSupervisionLoss::report() const {
  LossReport r;
  for (const auto& l : per_layer) r.per_layer.push_back(l.item());
  r.average = average.item();
  r.total = total.item();
  return r;
}

DeepSupervisionLoss loss_deep_supervision(std::span<const Tensor> per_layer_logits, std::span<const int> labels,
                                          Objective objective, std::uint64_t step) {
  if (per_layer_logits.empty()) throw ValidationError("deep supervision needs at least one layer");
  DeepSupervisionLoss out;
  for (const auto& logits : per_layer_logits) out.per_layer.push_back(cross_entropy_rows(logits, labels, kPad));
  Tensor acc = out.per_layer.front();
  for (std::size_t n = 1; n < out.per_layer.size(); ++n) acc = add(acc, out.per_layer[n]);
  out.average = scale(acc, 1.0F / static_cast<float>(out.per_layer.size()));
  const Tensor& last = out.per_layer.back();
  switch (objective) {
    case Objective::avg:
      out.total = out.average;
      break;
    case Objective::avg_plus_final:
      out.total = add(out.average, last);
      break;
    case Objective::alternating:
      out.total = step % 2 == 0 ? last : out.average;
      break;
    case Objective::final_only:
      out.total = last;
      break;
  }
  return out;
}

Tensor loss_alternating(std::uint64_t step, std::span<const Tensor> per_layer_logits, std::span<const int> labels) {
  return loss_deep_supervision(per_layer_logits, labels, Objective::alternating, step).total;
}

AdamOptimizer::AdamOptimizer(std::vector<Tensor> params, float lr, float beta1, float beta2, float eps)
    : params_(std::move(params)), lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {
  for (const auto& p : params_) {
    m_.emplace_back(p.numel(), 0.0F);
    v_.emplace_back(p.numel(), 0.0F);
  }
}

void AdamOptimizer::zero_grad() {
  for (auto& p : params_) p.zero_grad();
}

void AdamOptimizer::step() {
  ++t_;
  const float bc1 = 1.0F - std::pow(beta1_, static_cast<float>(t_));
  const float bc2 = 1.0F - std::pow(beta2_, static_cast<float>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    auto& p = params_[i];
    if (!p.has_grad()) continue;
    auto w = p.mutable_data();
    auto g = p.grad();
    auto& m = m_[i];
    auto& v = v_[i];
    for (std::size_t k = 0; k < w.size(); ++k) {
      m[k] = beta1_ * m[k] + (1.0F - beta1_) * g[k];
      v[k] = beta2_ * v[k] + (1.0F - beta2_) * g[k] * g[k];
      const float mhat = m[k] / bc1;
      const float vhat = v[k] / bc2;
      w[k] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

std::vector<LossCurveRow> train_model(MultiExitModel& model, const TrainConfig& tc, std::span<const TaskSample> dataset,
                                      const TrainCallback& on_step) {
  tc.validate();
  if (dataset.empty()) throw ValidationError("training dataset is empty");
  std::vector<EncodedSample> encoded;
  encoded.reserve(dataset.size());
  for (const auto& s : dataset) {
    encoded.push_back(encode_sample(s));
    const auto& e = encoded.back();
    if (e.source.size() > model.config().max_len || e.decoder_input.size() > model.config().max_len)
      throw ValidationError("sample '" + s.source + "' does not fit max_len " + std::to_string(model.config().max_len));
  }
  std::vector<Tensor> params;
  for (auto& [name, t] : model.parameters()) params.push_back(t);
  AdamOptimizer opt(params, tc.learning_rate, tc.beta1, tc.beta2, tc.adam_eps);
  Rng order(tc.seed ^ 0x9E3779B97F4A7C15ULL);
  const std::size_t layers = model.num_layers();
  const float inv_batch = 1.0F / static_cast<float>(tc.batch_size);

  std::vector<LossCurveRow> curve;
  curve.reserve(tc.steps);
  for (std::size_t step = 0; step < tc.steps; ++step) {
    opt.zero_grad();
    LossCurveRow row;
    row.step = step;
    row.loss.per_layer.assign(layers, 0.0F);
    for (std::size_t b = 0; b < tc.batch_size; ++b) {
      const auto& e = encoded[order.range(0, encoded.size() - 1)];
      const auto logits = model.forward_teacher_forced(e.source, e.decoder_input);
      const auto loss = loss_deep_supervision(logits, e.labels, tc.objective, step);
      const LossReport r = loss.report();
      if (!std::isfinite(r.total))
        throw NumericError("training diverged at step " + std::to_string(step) + " (loss " + std::to_string(r.total) + ")");
      backward(scale(loss.total, inv_batch));
      for (std::size_t n = 0; n < layers; ++n) row.loss.per_layer[n] += r.per_layer[n] * inv_batch;
      row.loss.average += r.average * inv_batch;
      row.loss.total += r.total * inv_batch;
    }
    opt.step();
    if (on_step) on_step(row);
    curve.push_back(std::move(row));
  }
  return curve;
}

TrainResult train(const ModelConfig& model_config, const TrainConfig& train_config, std::span<const TaskSample> dataset,
                  const TrainCallback& on_step) {
  train_config.validate();
  if (dataset.empty()) throw ValidationError("training dataset is empty");
  TrainResult result{MultiExitModel::initialize(model_config, train_config.seed), {}};
  result.curve = train_model(result.model, train_config, dataset, on_step);
  return result;
}

void write_loss_curve_csv(const std::filesystem::path& path, std::span<const LossCurveRow> curve, std::size_t layers) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ArtifactError("cannot write loss curve " + path.string());
  out << "step";
  for (std::size_t n = 1; n <= layers; ++n) out << ",l" << n;
  out << ",l_avg,l_total\n";
  out << std::setprecision(9);
  for (const auto& row : curve) {
    out << row.step;
    for (float l : row.loss.per_layer) out << ',' << l;
    out << ',' << row.loss.average << ',' << row.loss.total << '\n';
  }
}

double teacher_forced_accuracy(const MultiExitModel& model, std::span<const TaskSample> samples, std::size_t layer) {
  NoGradGuard no_grad;
  std::size_t hits = 0;
  std::size_t total = 0;
  for (const auto& s : samples) {
    const auto e = encode_sample(s);
    const auto logits = model.forward_teacher_forced(e.source, e.decoder_input);
    const auto& l = logits.at(layer - 1);
    for (std::size_t t = 0; t < e.labels.size(); ++t) {
      if (e.labels[t] == kPad) continue;
      ++total;
      hits += argmax_row(l, t) == e.labels[t] ? 1 : 0;
    }
  }
  return total == 0 ? 0.0 : static_cast<double>(hits) / static_cast<double>(total);
}

}  // namespace deed
