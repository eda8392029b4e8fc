#include <cmath>
#include <numeric>

#include "deed/decode.hpp"
#include "deed/training.hpp"
#include "doctest.h"
#include "reference_model.hpp"
#include "test_support.hpp"

using namespace deed;
using namespace deed::testing;

namespace {

// Confidence 1 at the scripted exit layer of each step, 0 elsewhere.
ConfidenceHook scripted_exits(std::vector<std::size_t> exits) {
  return [exits = std::move(exits)](std::size_t step, std::size_t layer, float) {
    return layer == exits.at(step - 1) ? 1.0F : 0.0F;
  };
}

// Hand count of the just-in-time engine: entering layer n at step i computes every step
// after the last one that reached n.
std::pair<std::vector<std::size_t>, std::uint64_t> simulate_jit(const std::vector<std::size_t>& exits,
                                                                 std::size_t layers) {
  std::vector<std::size_t> j(layers, 0);
  std::uint64_t units = 0;
  for (std::size_t i = 1; i <= exits.size(); ++i) {
    for (std::size_t n = 1; n <= exits[i - 1]; ++n) {
      units += i - j[n - 1];
      j[n - 1] = i;
    }
  }
  return {j, units};
}

const MultiExitModel& trained_model() {
  static const MultiExitModel model = [] {
    auto cfg = tiny_config(16, 3);
    TrainConfig tc;
    tc.steps = 150;
    tc.batch_size = 8;
    tc.learning_rate = 3e-3F;
    const TaskKind kinds[] = {TaskKind::copy, TaskKind::reverse};
    return train(cfg, tc, gen_mixture(kinds, 400, 3)).model;
  }();
  return model;
}

Tensor memory_for(const MultiExitModel& model, Rng& rng) {
  NoGradGuard g;
  return model.encode(random_tokens(rng, rng.range(1, 12), model.config().vocab_size));
}

DecodeOptions opts(float tau, std::size_t max_steps = 12) {
  DecodeOptions o;
  o.tau = tau;
  o.max_steps = max_steps;
  return o;
}

}  // namespace

TEST_CASE("confidence") {
  CHECK(confidence(Tensor::vector({0, 0, 0, 0})) == doctest::Approx(0.25));
  CHECK(confidence(Tensor::vector({0, 20, 0, 0})) == doctest::Approx(1.0).epsilon(1e-6));
  CHECK(confidence(Tensor::vector({1, 0})) == doctest::Approx(0.73106).epsilon(1e-5));
}

TEST_CASE("deed at the threshold limits") {
  const auto model = MultiExitModel::initialize(tiny_config(16, 3), 1);
  Rng rng(1);
  for (int trial = 0; trial < 5; ++trial) {
    const auto memory = memory_for(model, rng);
    const auto never = deed_decode(model, memory, opts(kMaxTau));
    const auto full = full_decode(model, memory, opts(kMaxTau));
    CHECK(never.tokens == full.tokens);
    CHECK(never.compute_units == 3 * never.tokens.size());
    CHECK(full.compute_units == 3 * full.tokens.size());
    for (auto m : never.trace.exits()) CHECK(m == 3);

    const auto always = deed_decode(model, memory, opts(0.0F));
    CHECK(always.compute_units == always.tokens.size());
    for (auto m : always.trace.exits()) CHECK(m == 1);
  }
  CHECK_THROWS_AS(deed_decode(model, memory_for(model, rng), opts(1.5F)), ValidationError);
  CHECK_THROWS_AS(deed_decode(model, memory_for(model, rng), opts(-0.1F)), ValidationError);
}

TEST_CASE("scripted exits [1,3,2]") {
  const auto model = MultiExitModel::initialize(tiny_config(16, 3), 2);
  Rng rng(2);
  const auto memory = memory_for(model, rng);
  auto o = opts(0.5F, 3);
  o.confidence_hook = scripted_exits({1, 3, 2});

  const auto deed = deed_decode(model, memory, o);
  REQUIRE(deed.tokens.size() == 3);
  CHECK(deed.trace.exits() == std::vector<std::size_t>{1, 3, 2});
  CHECK(deed.cache.kv_length(1) == 3);
  CHECK(deed.cache.kv_length(2) == 3);
  CHECK(deed.cache.kv_length(3) == 2);
  CHECK(deed.compute_units == 8);
  CHECK(simulate_jit({1, 3, 2}, 3).second == 8);

  CHECK(dat_decode(model, memory, o).compute_units == 6);
  CHECK(full_decode(model, memory, opts(0.5F, 3)).compute_units == 9);
}

TEST_CASE("compute units follow the hand simulation for random exit scripts") {
  const auto model = MultiExitModel::initialize(tiny_config(16, 4), 3);
  Rng rng(3);
  const auto memory = memory_for(model, rng);
  for (int trial = 0; trial < 30; ++trial) {
    const std::size_t steps = rng.range(1, 10);
    std::vector<std::size_t> exits(steps);
    for (auto& m : exits) m = rng.range(1, 4);
    auto o = opts(0.5F, steps);
    o.confidence_hook = scripted_exits(exits);
    const auto r = deed_decode(model, memory, o);
    const auto n_steps = r.tokens.size();
    exits.resize(n_steps);
    const auto [lengths, units] = simulate_jit(exits, 4);
    CHECK(r.compute_units == units);
    for (std::size_t n = 1; n <= 4; ++n) CHECK(r.cache.kv_length(n) == lengths[n - 1]);
    CHECK(dat_decode(model, memory, o).compute_units == std::accumulate(exits.begin(), exits.end(), std::uint64_t{0}));
  }
}

TEST_CASE("full decode logits match the teacher-forced forward") {
  for (const MultiExitModel* model : {&trained_model()}) {
    Rng rng(4);
    for (int trial = 0; trial < 5; ++trial) {
      std::vector<int> src = random_tokens(rng, rng.range(2, 10), model->config().vocab_size);
      NoGradGuard g;
      const auto memory = model->encode(src);
      auto o = opts(kMaxTau);
      o.record_logits = true;
      const auto r = full_decode(*model, memory, o);
      std::vector<int> inputs{kBos};
      inputs.insert(inputs.end(), r.tokens.begin(), r.tokens.end() - 1);
      const auto tf = model->forward_teacher_forced(src, inputs).back();
      for (std::size_t i = 0; i < r.tokens.size(); ++i) {
        CHECK(rel_err(r.step_logits[i], slice_rows(tf, i, i + 1).data()) <= 1e-5);
      }
    }
  }
}

TEST_CASE("deed caches equal an uncached re-implementation") {
  for (float tau : {0.0F, 0.3F, 0.6F, 0.9F, kMaxTau}) {
    const auto& model = trained_model();
    Rng rng(static_cast<std::uint64_t>(tau * 100) + 5);
    const std::vector<int> src = random_tokens(rng, 8, model.config().vocab_size);
    NoGradGuard g;
    const auto memory = model.encode(src);
    const auto r = deed_decode(model, memory, opts(tau));
    CHECK(verify_cache_fidelity(model, r, memory) <= 1e-5);

    const ReferenceModel ref(model);
    std::vector<int> inputs{kBos};
    inputs.insert(inputs.end(), r.tokens.begin(), r.tokens.end() - 1);
    const auto layers = ref.decode_all(ref.encode(src), inputs);
    const std::size_t d = model.config().d_model;
    for (std::size_t n = 1; n <= model.num_layers(); ++n) {
      const std::size_t j = r.cache.kv_length(n);
      Mat keys(j, d);
      std::copy_n(layers[n - 1].keys.v.begin(), j * d, keys.v.begin());
      CHECK(mat_rel_err(r.cache.kv(n).keys.data(), keys) <= 1e-5);
    }
  }
}

TEST_CASE("halt-and-copy caches are misaligned") {
  const auto model = MultiExitModel::initialize(tiny_config(16, 4), 6);
  Rng rng(6);
  const auto memory = memory_for(model, rng);
  auto o = opts(0.5F, 8);
  o.confidence_hook = scripted_exits({1, 4, 1, 4, 2, 4, 1, 4});
  const auto dat = dat_decode(model, memory, o);
  const auto deed = deed_decode(model, memory, o);
  CHECK(verify_cache_fidelity(model, deed, memory) <= 1e-5);
  CHECK(verify_cache_fidelity(model, dat, memory) > 1e-3);

  CHECK(dat_decode(model, memory, opts(kMaxTau)).tokens == full_decode(model, memory, opts(kMaxTau)).tokens);
}

TEST_CASE("ftex and slex") {
  const auto model = MultiExitModel::initialize(tiny_config(16, 3), 7);
  Rng rng(7);
  const auto memory = memory_for(model, rng);

  const auto zero = ftex_decode(model, memory, opts(0.0F));
  CHECK(zero.depth == 1);
  CHECK(zero.compute_units == zero.tokens.size());

  auto o = opts(0.5F, 6);
  o.confidence_hook = [](std::size_t step, std::size_t layer, float c) {
    if (step == 1) return layer == 1 ? 0.3F : 0.8F;
    return c;
  };
  const auto scripted = ftex_decode(model, memory, o);
  const std::uint64_t t = scripted.tokens.size();
  CHECK(scripted.depth == 2);
  CHECK(scripted.compute_units == 2 + 2 * (t - 1));
  for (std::size_t i = 1; i < t; ++i) CHECK(scripted.trace.steps[i].exit_layer == 2);

  const auto ftex_full = ftex_decode(model, memory, opts(kMaxTau));
  CHECK(ftex_full.depth == 3);
  CHECK(ftex_full.tokens == full_decode(model, memory, opts(kMaxTau)).tokens);

  const auto s0 = slex_decode(model, memory, opts(0.0F));
  CHECK(s0.depth == 1);
  CHECK(s0.compute_units == s0.tokens.size());

  const auto s_all = slex_decode(model, memory, opts(kMaxTau));
  CHECK(s_all.depth == 3);
  std::uint64_t expected = 0;
  for (std::size_t m = 1; m <= 3; ++m) expected += m * fixed_depth_decode(model, memory, m, opts(kMaxTau)).tokens.size();
  CHECK(s_all.compute_units == expected);
  CHECK(s_all.tokens == full_decode(model, memory, opts(kMaxTau)).tokens);

  auto stub = opts(0.0F, 5);
  stub.confidence_hook = [](std::size_t, std::size_t layer, float c) { return layer == 1 ? 0.9F : c; };
  stub.tau = 0.89F;
  CHECK(slex_decode(model, memory, stub).depth == 1);
  stub.tau = 0.9F;
  CHECK(slex_decode(model, memory, stub).depth > 1);
}

TEST_CASE("invariants hold across strategies, thresholds and models") {
  Rng rng(8);
  const auto random_model = MultiExitModel::initialize(tiny_config(16, 4), 8);
  for (const MultiExitModel* model : {&random_model, &trained_model()}) {
    const std::size_t layers = model->num_layers();
    for (int trial = 0; trial < 40; ++trial) {
      const auto memory = memory_for(*model, rng);
      const float tau = rng.uniform(0.0F, 1.01F);
      const auto deed = deed_decode(*model, memory, opts(tau));
      deed.cache.check_invariants();
      CHECK(deed.compute_units == deed.cache.total_kv_length());
      CHECK(deed.cache.hidden_length(0) == deed.tokens.size());
      for (const auto& st : deed.trace.steps) {
        REQUIRE(st.confidences.size() == st.exit_layer);
        for (float c : st.confidences) CHECK((c > 0.0F && c <= 1.0F));
        for (std::size_t n = 0; n + 1 < st.exit_layer; ++n) CHECK(st.confidences[n] <= tau);
        if (st.exit_layer < layers) CHECK(st.confidences.back() > tau);
      }
      // Frozen history: a shorter run emits a prefix of the longer one.
      const auto shorter = deed_decode(*model, memory, opts(tau, 4));
      const std::size_t k = std::min<std::size_t>(4, deed.tokens.size());
      CHECK(std::equal(shorter.tokens.begin(), shorter.tokens.end(), deed.tokens.begin(), deed.tokens.begin() + k));

      const auto full = full_decode(*model, memory, opts(tau));
      CHECK(deed_decode(*model, memory, opts(kMaxTau)).tokens == full.tokens);
      for (auto s : {Strategy::dat, Strategy::slex, Strategy::ftex}) {
        const auto r = decode(s, *model, memory, opts(tau));
        CHECK(r.tokens.size() == r.trace.steps.size());
        CHECK(!r.tokens.empty());
      }
    }
  }
}

TEST_CASE("cache state bookkeeping") {
  DecoderCacheState cache(2, 4);
  CHECK(cache.kv_length(1) == 0);
  CHECK_THROWS_AS(cache.kv(0), IndexError);
  const KvBlock one{Tensor::zeros({1, 4}), Tensor::zeros({1, 4})};
  cache.append_kv(2, one);
  cache.append_hidden(2, Tensor::zeros({1, 4}));
  CHECK_THROWS_AS(cache.check_invariants(), std::logic_error);
  cache.append_kv(1, one);
  cache.append_hidden(1, Tensor::zeros({1, 4}));
  CHECK_NOTHROW(cache.check_invariants());
  CHECK(cache.total_kv_length() == 2);
}

TEST_CASE("trace json") {
  const auto model = MultiExitModel::initialize(tiny_config(), 9);
  Rng rng(9);
  const auto r = deed_decode(model, memory_for(model, rng), opts(0.5F, 4));
  const auto j = trace_to_json(r);
  CHECK(j.at("tokens").size() == r.tokens.size());
  CHECK(j.at("exits").size() == r.tokens.size());
  CHECK(j.at("confidences").size() == r.tokens.size());
  CHECK(j.at("compute_units").get<std::uint64_t>() == r.compute_units);
  CHECK(j.contains("wall_ns"));
  for (auto s : {Strategy::deed, Strategy::full, Strategy::dat, Strategy::slex, Strategy::ftex})
    CHECK(parse_strategy(strategy_name(s)) == s);
  CHECK_THROWS_AS(parse_strategy("beam"), ValidationError);
}
