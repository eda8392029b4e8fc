#pragma once

#include <cstdint>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "deed/model.hpp"
#include "json.hpp"

namespace deed {

enum class Strategy { deed, full, dat, slex, ftex };

std::string_view strategy_name(Strategy s);
Strategy parse_strategy(std::string_view name);

// Thresholds above 1 can never be exceeded by a probability, which forces
// full depth.
inline constexpr float kMaxTau = 1.01F;

// Lets tests script confidences: receives the 1-based step and layer plus the
// computed confidence, returns the value the exit rule should see.
using ConfidenceHook = std::function<float(std::size_t step, std::size_t layer, float computed)>;

struct DecodeOptions {
  float tau = 0.9F;
  std::size_t max_steps = 32;  // also capped by the model's max_len
  ConfidenceHook confidence_hook;
  bool record_logits = false;  // keep exit-layer logits per step
};

struct StepTrace {
  int token = kPad;
  std::size_t exit_layer = 0;       // m_i
  std::vector<float> confidences;   // c_1..c_{m_i}
};

struct ExitTrace {
  std::vector<StepTrace> steps;

  std::vector<int> tokens() const;
  std::vector<std::size_t> exits() const;
};

// Per-layer caches of one decode session. Layer 0 of the hidden store holds
// the embedded decoder inputs; layers 1..N hold decoder outputs. Keys/values
// exist for layers 1..N.
class DecoderCacheState {
 public:
  DecoderCacheState() = default;
  DecoderCacheState(std::size_t layers, std::size_t d_model);

  std::size_t layers() const { return kv_.size(); }
  std::size_t kv_length(std::size_t layer) const;      // j_n
  std::size_t hidden_length(std::size_t layer) const;  // k_n

  const KvBlock& kv(std::size_t layer) const;
  const Tensor& hidden(std::size_t layer) const;
  void append_kv(std::size_t layer, const KvBlock& block);
  void append_hidden(std::size_t layer, const Tensor& rows);

  bool has_cross(std::size_t layer) const;
  const KvBlock& cross(std::size_t layer) const;
  void set_cross(std::size_t layer, KvBlock block);

  std::uint64_t total_kv_length() const;

  // j_1 >= ... >= j_N and k_n == j_n for n >= 1. Throws std::logic_error.
  void check_invariants() const;

 private:
  std::size_t d_model_ = 0;
  std::vector<KvBlock> kv_;
  std::vector<Tensor> hidden_;  // layers+1 entries
  std::vector<std::optional<KvBlock>> cross_;
};

struct DecodeResult {
  Strategy strategy = Strategy::deed;
  std::vector<int> tokens;  // emitted tokens, EOS included when produced
  ExitTrace trace;
  std::uint64_t compute_units = 0;  // decoder-layer x token-position applications
  std::uint64_t wall_ns = 0;
  std::size_t depth = 0;  // fixed depth chosen by slex/ftex, N for full
  DecoderCacheState cache;
  std::vector<std::vector<float>> step_logits;  // only with record_logits
};

// Max softmax probability.
float confidence(const Tensor& logits);

// Per-step layer traversal that computes missing deeper-layer
// key/value features of earlier steps just in time.
DecodeResult deed_decode(const MultiExitModel& model, const Tensor& memory, const DecodeOptions& options);
DecodeResult full_decode(const MultiExitModel& model, const Tensor& memory, const DecodeOptions& options);
// Every step exits at `depth`.
DecodeResult fixed_depth_decode(const MultiExitModel& model, const Tensor& memory, std::size_t depth,
                                const DecodeOptions& options);
// Halt-and-copy: missing deeper-layer keys/values of earlier steps are
// projected from the deepest hidden state those steps computed.
DecodeResult dat_decode(const MultiExitModel& model, const Tensor& memory, const DecodeOptions& options);
// Sequence-level exit: whole sequences at depth 1, 2, ... until the geometric
// mean step confidence exceeds tau.
DecodeResult slex_decode(const MultiExitModel& model, const Tensor& memory, const DecodeOptions& options);
// Depth chosen by the first token's confidence, then fixed.
DecodeResult ftex_decode(const MultiExitModel& model, const Tensor& memory, const DecodeOptions& options);

DecodeResult decode(Strategy strategy, const MultiExitModel& model, const Tensor& memory,
                    const DecodeOptions& options);

// Recomputes, without any cache, every layer's key/value features for the
// realized token prefix and returns the worst relative error against the
// cached ones (max abs difference over max abs reference, per layer).
double verify_cache_fidelity(const MultiExitModel& model, const DecodeResult& result, const Tensor& memory);

// {tokens, exits, confidences, compute_units, wall_ns}
nlohmann::json trace_to_json(const DecodeResult& result);

}  // namespace deed
