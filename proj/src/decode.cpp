#include "deed/decode.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <stdexcept>

namespace deed {

std::string_view strategy_name(Strategy s) {
  switch (s) {
    case Strategy::deed:
      return "deed";
    case Strategy::full:
      return "full";
    case Strategy::dat:
      return "dat";
    case Strategy::slex:
      return "slex";
    case Strategy::ftex:
      return "ftex";
  }
  return "unknown";
}

Strategy parse_strategy(std::string_view name) {
  if (name == "deed") return Strategy::deed;
  if (name == "full") return Strategy::full;
  if (name == "dat") return Strategy::dat;
  if (name == "slex") return Strategy::slex;
  if (name == "ftex") return Strategy::ftex;
  throw ValidationError("unknown strategy '" + std::string(name) + "'");
}

std::vector<int> ExitTrace::tokens() const {
  std::vector<int> out;
  for (const auto& s : steps) out.push_back(s.token);
  return out;
}

std::vector<std::size_t> ExitTrace::exits() const {
  std::vector<std::size_t> out;
  for (const auto& s : steps) out.push_back(s.exit_layer);
  return out;
}

// ---- cache -------------------------------------------------------------------

DecoderCacheState::DecoderCacheState(std::size_t layers, std::size_t d_model)
    : d_model_(d_model), kv_(layers), hidden_(layers + 1), cross_(layers) {
  for (auto& b : kv_) b = {Tensor({0, d_model}, {}), Tensor({0, d_model}, {})};
  for (auto& h : hidden_) h = Tensor({0, d_model}, {});
}

std::size_t DecoderCacheState::kv_length(std::size_t layer) const { return kv(layer).steps(); }

std::size_t DecoderCacheState::hidden_length(std::size_t layer) const { return hidden(layer).rows(); }

const KvBlock& DecoderCacheState::kv(std::size_t layer) const {
  if (layer < 1 || layer > kv_.size()) throw IndexError("cache layer out of range");
  return kv_[layer - 1];
}

const Tensor& DecoderCacheState::hidden(std::size_t layer) const {
  if (layer >= hidden_.size()) throw IndexError("hidden store layer out of range");
  return hidden_[layer];
}

void DecoderCacheState::append_kv(std::size_t layer, const KvBlock& block) {
  if (layer < 1 || layer > kv_.size()) throw IndexError("cache layer out of range");
  auto& b = kv_[layer - 1];
  b.keys = concat_rows(b.keys, block.keys);
  b.values = concat_rows(b.values, block.values);
}

void DecoderCacheState::append_hidden(std::size_t layer, const Tensor& rows) {
  if (layer >= hidden_.size()) throw IndexError("hidden store layer out of range");
  hidden_[layer] = concat_rows(hidden_[layer], rows);
}

bool DecoderCacheState::has_cross(std::size_t layer) const { return layer >= 1 && layer <= cross_.size() && cross_[layer - 1].has_value(); }

const KvBlock& DecoderCacheState::cross(std::size_t layer) const {
  if (!has_cross(layer)) throw IndexError("cross-attention cache for layer not built");
  return *cross_[layer - 1];
}

void DecoderCacheState::set_cross(std::size_t layer, KvBlock block) {
  if (layer < 1 || layer > cross_.size()) throw IndexError("cache layer out of range");
  cross_[layer - 1] = std::move(block);
}

std::uint64_t DecoderCacheState::total_kv_length() const {
  std::uint64_t total = 0;
  for (std::size_t n = 1; n <= kv_.size(); ++n) total += kv_length(n);
  return total;
}

void DecoderCacheState::check_invariants() const {
  for (std::size_t n = 1; n <= kv_.size(); ++n) {
    if (n > 1 && kv_length(n) > kv_length(n - 1))
      throw std::logic_error("cache depth increases from layer " + std::to_string(n - 1) + " to " + std::to_string(n));
    if (hidden_length(n) != kv_length(n))
      throw std::logic_error("layer " + std::to_string(n) + " hidden store and key/value cache lengths differ");
  }
}

// ---- engine ----------------------------------------------------------------

float confidence(const Tensor& logits) {
  NoGradGuard no_grad;
  const Tensor p = softmax(logits);
  return *std::max_element(p.data().begin(), p.data().end());
}

namespace {

using Clock = std::chrono::steady_clock;
using ExitRule = std::function<bool(std::size_t step, std::size_t layer, float confidence)>;

std::uint64_t elapsed_ns(Clock::time_point start) {
  return static_cast<std::uint64_t>(std::chrono::duration_cast<std::chrono::nanoseconds>(Clock::now() - start).count());
}

std::size_t step_limit(const MultiExitModel& model, const DecodeOptions& options) {
  return std::min(options.max_steps, model.config().max_len);
}

void check_tau(float tau) {
  if (!(tau >= 0.0F && tau <= kMaxTau)) throw ValidationError("threshold must lie in [0, 1.01]");
}

struct ExitProbe {
  int token;
  float confidence;
  Tensor logits;
};

ExitProbe probe_exit(const MultiExitModel& model, std::size_t layer, const Tensor& hidden, std::size_t step,
                     const DecodeOptions& options) {
  const std::size_t r = hidden.rows();
  Tensor logits = model.exit_logits(layer, slice_rows(hidden, r - 1, r));
  float c = confidence(logits);
  if (options.confidence_hook) c = options.confidence_hook(step, layer, c);
  return {argmax_row(logits, 0), c, std::move(logits)};
}

const KvBlock& ensure_cross(DecoderCacheState& cache, const MultiExitModel& model, std::size_t layer,
                            const Tensor& memory) {
  if (!cache.has_cross(layer)) cache.set_cross(layer, model.cross_kv(layer, memory));
  return cache.cross(layer);
}

// Shared loop of every strategy that keeps caches semantically aligned:
// entering layer n at step i first runs the layer over all steps j+1..i whose
// keys/values it has not seen yet.
DecodeResult run_jit(const MultiExitModel& model, const Tensor& memory, const ExitRule& rule,
                     const DecodeOptions& options, Strategy strategy) {
  NoGradGuard no_grad;
  const auto start = Clock::now();
  const std::size_t layers = model.num_layers();
  const std::size_t limit = step_limit(model, options);
  DecodeResult result;
  result.strategy = strategy;
  result.cache = DecoderCacheState(layers, model.config().d_model);
  auto& cache = result.cache;
  std::vector<std::size_t> before(layers + 1);

  for (std::size_t step = 1; step <= limit; ++step) {
    const int input = step == 1 ? kBos : result.tokens.back();
    const int ids[1] = {input};
    cache.append_hidden(0, model.embed_targets(ids, step - 1));
    for (std::size_t n = 1; n <= layers; ++n) before[n] = cache.kv_length(n);

    StepTrace st;
    Tensor exit_logits;
    for (std::size_t n = 1; n <= layers; ++n) {
      const std::size_t j = cache.kv_length(n);
      if (cache.hidden_length(n - 1) != step)
        throw CacheContiguityError("layer " + std::to_string(n - 1) + " hidden states missing at step " + std::to_string(step));
      const Tensor pending = slice_rows(cache.hidden(n - 1), j, step);
      const KvBlock& cross = ensure_cross(cache, model, n, memory);
      LayerOutput out = model.decoder_layer_forward(n, pending, cache.kv(n), cross, j);
      cache.append_kv(n, out.kv);
      cache.append_hidden(n, out.hidden);
      result.compute_units += step - j;

      ExitProbe probe = probe_exit(model, n, out.hidden, step, options);
      st.confidences.push_back(probe.confidence);
      if (rule(step, n, probe.confidence) || n == layers) {
        st.token = probe.token;
        st.exit_layer = n;
        exit_logits = std::move(probe.logits);
        break;
      }
    }

    cache.check_invariants();
    for (std::size_t n = 1; n <= layers; ++n) {
      const std::size_t expect = n <= st.exit_layer ? step : before[n];
      if (cache.kv_length(n) != expect)
        throw std::logic_error("layer " + std::to_string(n) + " cache length " + std::to_string(cache.kv_length(n)) +
                               " after step " + std::to_string(step) + ", expected " + std::to_string(expect));
    }
    if (options.record_logits) result.step_logits.emplace_back(exit_logits.data().begin(), exit_logits.data().end());
    result.tokens.push_back(st.token);
    result.trace.steps.push_back(std::move(st));
    if (result.tokens.back() == kEos) break;
  }
  if (result.compute_units != cache.total_kv_length())
    throw std::logic_error("compute units differ from the summed cache lengths");
  result.wall_ns = elapsed_ns(start);
  return result;
}

}  // namespace

DecodeResult deed_decode(const MultiExitModel& model, const Tensor& memory, const DecodeOptions& options) {
  check_tau(options.tau);
  const float tau = options.tau;
  return run_jit(
      model, memory, [tau](std::size_t, std::size_t, float c) { return c > tau; }, options, Strategy::deed);
}

DecodeResult full_decode(const MultiExitModel& model, const Tensor& memory, const DecodeOptions& options) {
  auto r = run_jit(
      model, memory, [](std::size_t, std::size_t, float) { return false; }, options, Strategy::full);
  r.depth = model.num_layers();
  return r;
}

DecodeResult fixed_depth_decode(const MultiExitModel& model, const Tensor& memory, std::size_t depth,
                                const DecodeOptions& options) {
  if (depth < 1 || depth > model.num_layers()) throw ValidationError("fixed depth outside 1..N");
  auto r = run_jit(
      model, memory, [depth](std::size_t, std::size_t layer, float) { return layer == depth; }, options,
      Strategy::full);
  r.depth = depth;
  return r;
}

DecodeResult ftex_decode(const MultiExitModel& model, const Tensor& memory, const DecodeOptions& options) {
  check_tau(options.tau);
  const float tau = options.tau;
  const std::size_t layers = model.num_layers();
  std::size_t chosen = 0;
  auto r = run_jit(
      model, memory,
      [tau, layers, &chosen](std::size_t step, std::size_t layer, float c) {
        if (step == 1) {
          if (c > tau || layer == layers) chosen = layer;
          return c > tau;
        }
        return layer == chosen;
      },
      options, Strategy::ftex);
  r.depth = chosen;
  return r;
}

DecodeResult slex_decode(const MultiExitModel& model, const Tensor& memory, const DecodeOptions& options) {
  check_tau(options.tau);
  const std::size_t layers = model.num_layers();
  std::uint64_t units = 0;
  std::uint64_t wall = 0;
  for (std::size_t m = 1; m <= layers; ++m) {
    DecodeResult r = fixed_depth_decode(model, memory, m, options);
    units += r.compute_units;
    wall += r.wall_ns;
    double log_sum = 0.0;
    for (const auto& st : r.trace.steps) log_sum += std::log(static_cast<double>(st.confidences.back()));
    const double accumulated = std::exp(log_sum / static_cast<double>(std::max<std::size_t>(1, r.trace.steps.size())));
    if (accumulated > static_cast<double>(options.tau) || m == layers) {
      r.strategy = Strategy::slex;
      r.compute_units = units;
      r.wall_ns = wall;
      return r;
    }
  }
  throw std::logic_error("unreachable: slex accepts depth N");
}

DecodeResult dat_decode(const MultiExitModel& model, const Tensor& memory, const DecodeOptions& options) {
  check_tau(options.tau);
  NoGradGuard no_grad;
  const auto start = Clock::now();
  const std::size_t layers = model.num_layers();
  const std::size_t limit = step_limit(model, options);
  DecodeResult result;
  result.strategy = Strategy::dat;
  result.cache = DecoderCacheState(layers, model.config().d_model);
  auto& cache = result.cache;
  std::vector<Tensor> deepest;  // per step, output of its exit layer

  for (std::size_t step = 1; step <= limit; ++step) {
    const int input = step == 1 ? kBos : result.tokens.back();
    const int ids[1] = {input};
    Tensor h = model.embed_targets(ids, step - 1);
    cache.append_hidden(0, h);
    StepTrace st;
    Tensor exit_logits;
    for (std::size_t n = 1; n <= layers; ++n) {
      // Earlier steps that halted below n: copy from their deepest state.
      while (cache.kv_length(n) < step - 1) {
        const std::size_t missing = cache.kv_length(n);
        cache.append_kv(n, model.project_kv(n, deepest[missing]));
      }
      const KvBlock& cross = ensure_cross(cache, model, n, memory);
      LayerOutput out = model.decoder_layer_forward(n, h, cache.kv(n), cross, step - 1);
      cache.append_kv(n, out.kv);
      h = out.hidden;
      result.compute_units += 1;
      ExitProbe probe = probe_exit(model, n, h, step, options);
      st.confidences.push_back(probe.confidence);
      if (probe.confidence > options.tau || n == layers) {
        st.token = probe.token;
        st.exit_layer = n;
        exit_logits = std::move(probe.logits);
        break;
      }
    }
    deepest.push_back(h);
    if (options.record_logits) result.step_logits.emplace_back(exit_logits.data().begin(), exit_logits.data().end());
    result.tokens.push_back(st.token);
    result.trace.steps.push_back(std::move(st));
    if (result.tokens.back() == kEos) break;
  }
  result.wall_ns = elapsed_ns(start);
  return result;
}

DecodeResult decode(Strategy strategy, const MultiExitModel& model, const Tensor& memory,
                    const DecodeOptions& options) {
  switch (strategy) {
    case Strategy::deed:
      return deed_decode(model, memory, options);
    case Strategy::full:
      return full_decode(model, memory, options);
    case Strategy::dat:
      return dat_decode(model, memory, options);
    case Strategy::slex:
      return slex_decode(model, memory, options);
    case Strategy::ftex:
      return ftex_decode(model, memory, options);
  }
  throw ValidationError("unknown strategy");
}

double verify_cache_fidelity(const MultiExitModel& model, const DecodeResult& result, const Tensor& memory) {
  NoGradGuard no_grad;
  const std::size_t layers = model.num_layers();
  const std::size_t steps = result.cache.kv_length(1);
  if (steps == 0) return 0.0;
  std::vector<int> inputs{kBos};
  for (std::size_t i = 0; i + 1 < steps; ++i) inputs.push_back(result.tokens.at(i));

  const std::size_t d = model.config().d_model;
  const KvBlock empty{Tensor({0, d}, {}), Tensor({0, d}, {})};
  Tensor h = model.embed_targets(inputs, 0);
  double worst = 0.0;
  for (std::size_t n = 1; n <= layers; ++n) {
    LayerOutput out = model.decoder_layer_forward(n, h, empty, model.cross_kv(n, memory), 0);
    const std::size_t j = result.cache.kv_length(n);
    const KvBlock& cached = result.cache.kv(n);
    for (auto [ref, got] : {std::pair{&out.kv.keys, &cached.keys}, std::pair{&out.kv.values, &cached.values}}) {
      double max_diff = 0.0;
      double max_ref = 0.0;
      for (std::size_t k = 0; k < j * d; ++k) {
        max_diff = std::max(max_diff, std::abs(static_cast<double>(ref->data()[k]) - got->data()[k]));
        max_ref = std::max(max_ref, std::abs(static_cast<double>(ref->data()[k])));
      }
      if (max_diff > 0.0) worst = std::max(worst, max_diff / std::max(max_ref, 1e-30));
    }
    h = out.hidden;
  }
  return worst;
}

nlohmann::json trace_to_json(const DecodeResult& result) {
  nlohmann::json conf = nlohmann::json::array();
  for (const auto& st : result.trace.steps) conf.push_back(st.confidences);
  return nlohmann::json{{"tokens", result.tokens},
                        {"exits", result.trace.exits()},
                        {"confidences", conf},
                        {"compute_units", result.compute_units},
                        {"wall_ns", result.wall_ns}};
}

}  // namespace deed
