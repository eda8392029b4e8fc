#include "deed/model.hpp"

#include <cmath>

#include "deed/random.hpp"

namespace deed {

void ModelConfig::validate() const {
  if (d_model == 0 || n_heads == 0 || d_model % n_heads != 0)
    throw ValidationError("d_model must be a positive multiple of n_heads");
  if (d_ff == 0) throw ValidationError("d_ff must be positive");
  if (n_dec_layers < 1) throw ValidationError("n_dec_layers must be at least 1");
  if (vocab_size < 4) throw ValidationError("vocab_size must be at least 4 (PAD/BOS/EOS/UNK)");
  if (max_len < 2) throw ValidationError("max_len must be at least 2");
  if (positional != "sinusoidal") throw ValidationError("unsupported positional encoding '" + positional + "'");
}

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"d_model", c.d_model},
                     {"n_heads", c.n_heads},
                     {"d_ff", c.d_ff},
                     {"n_enc_layers", c.n_enc_layers},
                     {"n_dec_layers", c.n_dec_layers},
                     {"vocab_size", c.vocab_size},
                     {"max_len", c.max_len},
                     {"shared_head", c.shared_head},
                     {"adaptation_modules", c.adaptation_modules},
                     {"positional", c.positional}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  ModelConfig d;
  c.d_model = j.value("d_model", d.d_model);
  c.n_heads = j.value("n_heads", d.n_heads);
  c.d_ff = j.value("d_ff", d.d_ff);
  c.n_enc_layers = j.value("n_enc_layers", d.n_enc_layers);
  c.n_dec_layers = j.value("n_dec_layers", d.n_dec_layers);
  c.vocab_size = j.value("vocab_size", d.vocab_size);
  c.max_len = j.value("max_len", d.max_len);
  c.shared_head = j.value("shared_head", d.shared_head);
  c.adaptation_modules = j.value("adaptation_modules", d.adaptation_modules);
  c.positional = j.value("positional", d.positional);
}

ParameterCount count_parameters(const ModelConfig& c) {
  const std::uint64_t d = c.d_model;
  const std::uint64_t ff = c.d_ff;
  const std::uint64_t v = c.vocab_size;
  const std::uint64_t n = c.n_dec_layers;
  ParameterCount p;
  p.embedding = v * d;
  p.encoder = c.n_enc_layers * (4 * d * d + 2 * d * ff + 2 * d) + d;
  p.decoder = n * (8 * d * d + 2 * d * ff + 3 * d);
  p.adaptation_module = d * d + d;
  p.adaptation_total = c.adaptation_modules ? (n - 1) * p.adaptation_module : 0;
  p.head = d * v;
  p.heads_total = (c.shared_head ? 1 : n) * p.head;
  p.total = p.embedding + p.encoder + p.decoder + p.adaptation_total + p.heads_total;
  return p;
}

namespace {

Tensor uniform_param(Shape shape, float bound, Rng& rng) {
  std::vector<float> data(shape_numel(shape));
  for (auto& x : data) x = rng.uniform(-bound, bound);
  return Tensor(std::move(shape), std::move(data), true);
}

Tensor linear_param(std::size_t fan_in, std::size_t fan_out, Rng& rng) {
  return uniform_param({fan_in, fan_out}, 1.0F / std::sqrt(static_cast<float>(fan_in)), rng);
}

Tensor ones(std::size_t d) { return Tensor::full({d}, 1.0F, true); }

AttentionWeights attention_params(std::size_t d, Rng& rng) {
  AttentionWeights w;
  w.wq = linear_param(d, d, rng);
  w.wk = linear_param(d, d, rng);
  w.wv = linear_param(d, d, rng);
  w.wo = linear_param(d, d, rng);
  return w;
}

Tensor feed_forward(const Tensor& x, const Tensor& w_in, const Tensor& w_out) {
  return matmul(relu(matmul(x, w_in)), w_out);
}

}  // namespace

MultiExitModel::MultiExitModel(const ModelConfig& config) : config_(config) {
  config_.validate();
  const std::size_t d = config_.d_model;
  std::vector<float> pe(config_.max_len * d);
  for (std::size_t pos = 0; pos < config_.max_len; ++pos) {
    for (std::size_t i = 0; i < d; i += 2) {
      const double freq = std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(d));
      pe[pos * d + i] = static_cast<float>(std::sin(static_cast<double>(pos) * freq));
      if (i + 1 < d) pe[pos * d + i + 1] = static_cast<float>(std::cos(static_cast<double>(pos) * freq));
    }
  }
  positions_ = Tensor({config_.max_len, d}, std::move(pe));
}

MultiExitModel MultiExitModel::initialize(const ModelConfig& config, std::uint64_t seed) {
  MultiExitModel m(config);
  const auto& c = m.config_;
  const std::size_t d = c.d_model;
  Rng rng(seed);
  m.embedding_ = uniform_param({c.vocab_size, d}, 1.0F, rng);
  for (std::size_t l = 0; l < c.n_enc_layers; ++l) {
    EncoderLayer e;
    e.norm_attn = ones(d);
    e.attn = attention_params(d, rng);
    e.norm_ff = ones(d);
    e.ff_in = linear_param(d, c.d_ff, rng);
    e.ff_out = linear_param(c.d_ff, d, rng);
    m.encoder_.push_back(std::move(e));
  }
  m.encoder_norm_ = ones(d);
  for (std::size_t l = 0; l < c.n_dec_layers; ++l) {
    DecoderLayer dl;
    dl.norm_self = ones(d);
    dl.self_attn = attention_params(d, rng);
    dl.norm_cross = ones(d);
    dl.cross_attn = attention_params(d, rng);
    dl.norm_ff = ones(d);
    dl.ff_in = linear_param(d, c.d_ff, rng);
    dl.ff_out = linear_param(c.d_ff, d, rng);
    m.decoder_.push_back(std::move(dl));
  }
  if (c.adaptation_modules) {
    for (std::size_t l = 0; l + 1 < c.n_dec_layers; ++l) {
      // Identity plus small noise.
      Tensor w = uniform_param({d, d}, 0.01F, rng);
      auto wd = w.mutable_data();
      for (std::size_t i = 0; i < d; ++i) wd[i * d + i] += 1.0F;
      m.adapters_.push_back({std::move(w), ones(d)});
    }
  }
  const std::size_t n_heads = c.shared_head ? 1 : c.n_dec_layers;
  for (std::size_t h = 0; h < n_heads; ++h) m.heads_.push_back(linear_param(d, c.vocab_size, rng));
  return m;
}

void MultiExitModel::check_layer(std::size_t layer) const {
  if (layer < 1 || layer > config_.n_dec_layers) {
    throw IndexError("decoder layer " + std::to_string(layer) + " outside 1.." +
                     std::to_string(config_.n_dec_layers));
  }
}

Tensor MultiExitModel::embed_targets(std::span<const int> tokens, std::size_t offset) const {
  const std::size_t d = config_.d_model;
  if (tokens.empty()) return Tensor({0, d}, {});
  if (offset + tokens.size() > config_.max_len) {
    throw CapacityError("position " + std::to_string(offset + tokens.size() - 1) + " exceeds max_len " +
                        std::to_string(config_.max_len));
  }
  Tensor tok = embedding(embedding_, tokens);
  return add(tok, slice_rows(positions_, offset, offset + tokens.size()));
}

Tensor MultiExitModel::encode(std::span<const int> source) const {
  if (source.empty()) throw ValidationError("cannot encode an empty source sequence");
  Tensor x = embed_targets(source, 0);
  for (const auto& layer : encoder_) {
    const Tensor a = rms_norm(x, layer.norm_attn);
    const Tensor ctx = attention(matmul(a, layer.attn.wq), matmul(a, layer.attn.wk), matmul(a, layer.attn.wv),
                                 config_.n_heads, -1);
    x = add(x, matmul(ctx, layer.attn.wo));
    x = add(x, feed_forward(rms_norm(x, layer.norm_ff), layer.ff_in, layer.ff_out));
  }
  return rms_norm(x, encoder_norm_);
}

KvBlock MultiExitModel::cross_kv(std::size_t layer, const Tensor& memory) const {
  check_layer(layer);
  const auto& w = decoder_[layer - 1].cross_attn;
  return {matmul(memory, w.wk), matmul(memory, w.wv)};
}

KvBlock MultiExitModel::project_kv(std::size_t layer, const Tensor& h_prev) const {
  check_layer(layer);
  const auto& dl = decoder_[layer - 1];
  const Tensor x = rms_norm(h_prev, dl.norm_self);
  return {matmul(x, dl.self_attn.wk), matmul(x, dl.self_attn.wv)};
}

LayerOutput MultiExitModel::decoder_layer_forward(std::size_t layer, const Tensor& h_prev, const KvBlock& past,
                                                  const KvBlock& cross, std::size_t first_step) const {
  check_layer(layer);
  const std::size_t d = config_.d_model;
  if (past.steps() != first_step) {
    throw CacheContiguityError("layer " + std::to_string(layer) + " cache holds " + std::to_string(past.steps()) +
                               " steps but input starts after step " + std::to_string(first_step));
  }
  if (h_prev.numel() == 0) return {Tensor({0, d}, {}), {Tensor({0, d}, {}), Tensor({0, d}, {})}};
  if (h_prev.dim() != 2 || h_prev.cols() != d) throw ShapeError("decoder input must be [r x d_model]");
  const auto& dl = decoder_[layer - 1];

  const Tensor x = rms_norm(h_prev, dl.norm_self);
  const Tensor q = matmul(x, dl.self_attn.wq);
  KvBlock fresh{matmul(x, dl.self_attn.wk), matmul(x, dl.self_attn.wv)};
  const Tensor keys = concat_rows(past.keys, fresh.keys);
  const Tensor values = concat_rows(past.values, fresh.values);
  const Tensor self_ctx =
      attention(q, keys, values, config_.n_heads, static_cast<std::ptrdiff_t>(first_step));
  Tensor h = add(h_prev, matmul(self_ctx, dl.self_attn.wo));

  const Tensor y = rms_norm(h, dl.norm_cross);
  const Tensor cross_ctx = attention(matmul(y, dl.cross_attn.wq), cross.keys, cross.values, config_.n_heads, -1);
  h = add(h, matmul(cross_ctx, dl.cross_attn.wo));

  h = add(h, feed_forward(rms_norm(h, dl.norm_ff), dl.ff_in, dl.ff_out));
  return {std::move(h), std::move(fresh)};
}

Tensor MultiExitModel::exit_logits(std::size_t layer, const Tensor& hidden) const {
  check_layer(layer);
  if (config_.adaptation_modules && layer < config_.n_dec_layers) {
    const auto& a = adapters_[layer - 1];
    return matmul(rms_norm(matmul(hidden, a.weight), a.scale), head(layer));
  }
  return matmul(hidden, head(layer));
}

std::vector<Tensor> MultiExitModel::forward_teacher_forced(std::span<const int> source,
                                                           std::span<const int> target_inputs) const {
  if (source.size() > config_.max_len || target_inputs.size() > config_.max_len)
    throw CapacityError("sequence longer than max_len " + std::to_string(config_.max_len));
  const Tensor memory = encode(source);
  Tensor h = embed_targets(target_inputs, 0);
  const KvBlock empty{Tensor({0, config_.d_model}, {}), Tensor({0, config_.d_model}, {})};
  std::vector<Tensor> logits;
  logits.reserve(num_layers());
  for (std::size_t n = 1; n <= num_layers(); ++n) {
    h = decoder_layer_forward(n, h, empty, cross_kv(n, memory), 0).hidden;
    logits.push_back(exit_logits(n, h));
  }
  return logits;
}

std::vector<NamedTensor> MultiExitModel::parameters() const {
  std::vector<NamedTensor> out;
  out.emplace_back("embedding", embedding_);
  auto attn = [&out](const std::string& p, const AttentionWeights& w) {
    out.emplace_back(p + ".wq", w.wq);
    out.emplace_back(p + ".wk", w.wk);
    out.emplace_back(p + ".wv", w.wv);
    out.emplace_back(p + ".wo", w.wo);
  };
  for (std::size_t l = 0; l < encoder_.size(); ++l) {
    const auto p = "encoder." + std::to_string(l);
    const auto& e = encoder_[l];
    out.emplace_back(p + ".norm_attn", e.norm_attn);
    attn(p + ".attn", e.attn);
    out.emplace_back(p + ".norm_ff", e.norm_ff);
    out.emplace_back(p + ".ff_in", e.ff_in);
    out.emplace_back(p + ".ff_out", e.ff_out);
  }
  out.emplace_back("encoder.norm", encoder_norm_);
  for (std::size_t l = 0; l < decoder_.size(); ++l) {
    const auto p = "decoder." + std::to_string(l + 1);
    const auto& dl = decoder_[l];
    out.emplace_back(p + ".norm_self", dl.norm_self);
    attn(p + ".self", dl.self_attn);
    out.emplace_back(p + ".norm_cross", dl.norm_cross);
    attn(p + ".cross", dl.cross_attn);
    out.emplace_back(p + ".norm_ff", dl.norm_ff);
    out.emplace_back(p + ".ff_in", dl.ff_in);
    out.emplace_back(p + ".ff_out", dl.ff_out);
  }
  for (std::size_t l = 0; l < adapters_.size(); ++l) {
    const auto p = "adapter." + std::to_string(l + 1);
    out.emplace_back(p + ".weight", adapters_[l].weight);
    out.emplace_back(p + ".scale", adapters_[l].scale);
  }
  for (std::size_t h = 0; h < heads_.size(); ++h) out.emplace_back("head." + std::to_string(h + 1), heads_[h]);
  return out;
}

Tensor& MultiExitModel::head(std::size_t layer) {
  check_layer(layer);
  return heads_[config_.shared_head ? 0 : layer - 1];
}

const Tensor& MultiExitModel::head(std::size_t layer) const {
  check_layer(layer);
  return heads_[config_.shared_head ? 0 : layer - 1];
}

AdaptationModule& MultiExitModel::adaptation(std::size_t layer) {
  check_layer(layer);
  if (!config_.adaptation_modules || layer == config_.n_dec_layers)
    throw IndexError("layer " + std::to_string(layer) + " has no adaptation module");
  return adapters_[layer - 1];
}

MultiExitModel MultiExitModel::clone() const {
  MultiExitModel copy = *this;
  auto deep = [](Tensor& t) { t = t.clone(); };
  deep(copy.embedding_);
  for (auto& e : copy.encoder_) {
    for (Tensor* t : {&e.norm_attn, &e.attn.wq, &e.attn.wk, &e.attn.wv, &e.attn.wo, &e.norm_ff, &e.ff_in, &e.ff_out})
      deep(*t);
  }
  deep(copy.encoder_norm_);
  for (auto& dl : copy.decoder_) {
    for (Tensor* t : {&dl.norm_self, &dl.self_attn.wq, &dl.self_attn.wk, &dl.self_attn.wv, &dl.self_attn.wo,
                      &dl.norm_cross, &dl.cross_attn.wq, &dl.cross_attn.wk, &dl.cross_attn.wv, &dl.cross_attn.wo,
                      &dl.norm_ff, &dl.ff_in, &dl.ff_out})
      deep(*t);
  }
  for (auto& a : copy.adapters_) {
    deep(a.weight);
    deep(a.scale);
  }
  for (auto& h : copy.heads_) deep(h);
  return copy;
}

}  // namespace deed
