#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "deed/tensor.hpp"
#include "json.hpp"

namespace deed {

// Reserved token ids of the character vocabulary.
inline constexpr int kPad = 0;
inline constexpr int kBos = 1;
inline constexpr int kEos = 2;
inline constexpr int kUnk = 3;

struct ModelConfig {
  std::size_t d_model = 64;
  std::size_t n_heads = 4;
  std::size_t d_ff = 128;
  std::size_t n_enc_layers = 4;
  std::size_t n_dec_layers = 6;
  std::size_t vocab_size = 44;
  std::size_t max_len = 32;
  bool shared_head = true;
  bool adaptation_modules = true;
  std::string positional = "sinusoidal";

  // Throws ValidationError describing the first violated constraint.
  void validate() const;
  bool operator==(const ModelConfig&) const = default;
};

void to_json(nlohmann::json& j, const ModelConfig& c);
void from_json(const nlohmann::json& j, ModelConfig& c);

struct ParameterCount {
  std::uint64_t embedding = 0;
  std::uint64_t encoder = 0;
  std::uint64_t decoder = 0;
  std::uint64_t adaptation_module = 0;  // one module
  std::uint64_t adaptation_total = 0;
  std::uint64_t head = 0;  // one generation head
  std::uint64_t heads_total = 0;
  std::uint64_t total = 0;
};

ParameterCount count_parameters(const ModelConfig& config);

// Self-attention key/value features of one decoder layer for a contiguous run
// of decoding steps, one row per step.
struct KvBlock {
  Tensor keys;
  Tensor values;

  std::size_t steps() const { return keys.empty() ? 0 : keys.rows(); }
};

struct LayerOutput {
  Tensor hidden;  // h_n for the processed steps
  KvBlock kv;     // p_n for the same steps
};

struct AttentionWeights {
  Tensor wq, wk, wv, wo;
};

struct EncoderLayer {
  Tensor norm_attn;
  AttentionWeights attn;
  Tensor norm_ff;
  Tensor ff_in, ff_out;
};

struct DecoderLayer {
  Tensor norm_self;
  AttentionWeights self_attn;
  Tensor norm_cross;
  AttentionWeights cross_attn;
  Tensor norm_ff;
  Tensor ff_in, ff_out;
};

// Linear (no bias) followed by scale-only normalization.
struct AdaptationModule {
  Tensor weight;  // [d x d]
  Tensor scale;   // [d]
};

using NamedTensor = std::pair<std::string, Tensor>;

// Encoder-decoder transformer with an exit after every decoder layer. Layers
// are addressed 1..N as in the exit-layer numbering used everywhere else.
class MultiExitModel {
 public:
  static MultiExitModel initialize(const ModelConfig& config, std::uint64_t seed);

  const ModelConfig& config() const { return config_; }
  std::size_t num_layers() const { return config_.n_dec_layers; }

  // Token embedding plus sinusoidal position for positions offset..offset+n-1.
  Tensor embed_targets(std::span<const int> tokens, std::size_t offset) const;
  Tensor encode(std::span<const int> source) const;

  // Cross-attention keys/values of `layer` over the encoder memory.
  KvBlock cross_kv(std::size_t layer, const Tensor& memory) const;

  // Runs decoder layer `layer` on hidden states of layer-1 for the steps
  // first_step+1..first_step+r. `past` must hold exactly first_step steps.
  LayerOutput decoder_layer_forward(std::size_t layer, const Tensor& h_prev, const KvBlock& past,
                                    const KvBlock& cross, std::size_t first_step) const;

  // The self-attention key/value projection `layer` would store for inputs
  // `h_prev`, without running attention.
  KvBlock project_kv(std::size_t layer, const Tensor& h_prev) const;

  // Vocabulary logits of exit `layer` for each row of `hidden`.
  Tensor exit_logits(std::size_t layer, const Tensor& hidden) const;

  // All N exits at every target position: result[n-1] is [T x V].
  std::vector<Tensor> forward_teacher_forced(std::span<const int> source,
                                             std::span<const int> target_inputs) const;

  // Parameter handles in a fixed order. The handles share storage with the
  // model.
  std::vector<NamedTensor> parameters() const;

  Tensor& head(std::size_t layer);
  const Tensor& head(std::size_t layer) const;
  AdaptationModule& adaptation(std::size_t layer);

  // Deep copy with independent storage.
  MultiExitModel clone() const;

 private:
  explicit MultiExitModel(const ModelConfig& config);
  void check_layer(std::size_t layer) const;

  ModelConfig config_;
  Tensor embedding_;
  Tensor positions_;  // [max_len x d], constant
  std::vector<EncoderLayer> encoder_;
  Tensor encoder_norm_;
  std::vector<DecoderLayer> decoder_;
  std::vector<AdaptationModule> adapters_;  // N-1 entries when enabled
  std::vector<Tensor> heads_;               // 1 when shared, N otherwise
};

}  // namespace deed
