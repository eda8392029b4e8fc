#include "deed/metrics.hpp"

#include <algorithm>
#include <cctype>
#include <chrono>

namespace deed {

std::string normalize_answer(std::string_view s) {
  std::size_t b = 0;
  std::size_t e = s.size();
  while (b < e && std::isspace(static_cast<unsigned char>(s[b]))) ++b;
  while (e > b && std::isspace(static_cast<unsigned char>(s[e - 1]))) --e;
  std::string out(s.substr(b, e - b));
  for (auto& c : out) c = static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  return out;
}

std::size_t levenshtein(std::string_view a, std::string_view b) {
  std::vector<std::size_t> prev(b.size() + 1);
  std::vector<std::size_t> cur(b.size() + 1);
  for (std::size_t j = 0; j <= b.size(); ++j) prev[j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i) {
    cur[0] = i;
    for (std::size_t j = 1; j <= b.size(); ++j) {
      const std::size_t sub = prev[j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1);
      cur[j] = std::min({prev[j] + 1, cur[j - 1] + 1, sub});
    }
    std::swap(prev, cur);
  }
  return prev[b.size()];
}

double anls(std::string_view prediction, std::string_view gold) {
  const auto p = normalize_answer(prediction);
  const auto g = normalize_answer(gold);
  const std::size_t longest = std::max(p.size(), g.size());
  if (longest == 0) return 1.0;
  const double nl = static_cast<double>(levenshtein(p, g)) / static_cast<double>(longest);
  return nl < 0.5 ? 1.0 - nl : 0.0;
}

int exact_match(std::string_view prediction, std::string_view gold) {
  return normalize_answer(prediction) == normalize_answer(gold) ? 1 : 0;
}

std::vector<std::uint64_t> exit_histogram(std::span<const ExitTrace> traces, std::size_t layers) {
  std::vector<std::uint64_t> counts(layers, 0);
  for (const auto& t : traces) {
    for (const auto& st : t.steps) {
      if (st.exit_layer < 1 || st.exit_layer > layers) throw IndexError("exit layer outside 1..N");
      ++counts[st.exit_layer - 1];
    }
  }
  return counts;
}

nlohmann::json record_to_json(const SequenceRecord& r) {
  return nlohmann::json{{"tokens", r.tokens},         {"exits", r.exits},     {"confidences", r.confidences},
                        {"compute_units", r.compute_units}, {"wall_ns", r.wall_ns}, {"encoder_ns", r.encoder_ns}};
}

SequenceRecord record_from_json(const nlohmann::json& j) {
  SequenceRecord r;
  r.tokens = j.at("tokens").get<std::vector<int>>();
  r.exits = j.at("exits").get<std::vector<std::size_t>>();
  r.confidences = j.at("confidences").get<std::vector<std::vector<float>>>();
  r.compute_units = j.at("compute_units").get<std::uint64_t>();
  r.wall_ns = j.at("wall_ns").get<std::uint64_t>();
  r.encoder_ns = j.value("encoder_ns", std::uint64_t{0});
  return r;
}

nlohmann::json report_to_json(const EvalReport& r) {
  return nlohmann::json{{"strategy", r.strategy},
                        {"tau", r.tau},
                        {"layers", r.layers},
                        {"sequences", r.sequences},
                        {"emitted_tokens", r.emitted_tokens},
                        {"exact_match", r.exact_match},
                        {"anls", r.anls},
                        {"mean_compute_units", r.mean_compute_units},
                        {"total_compute_units", r.total_compute_units},
                        {"mean_decoder_wall_ns", r.mean_wall_ns},
                        {"mean_encoder_wall_ns", r.mean_encoder_wall_ns},
                        {"exit_histogram", r.exit_histogram}};
}

EvalReport aggregate(std::span<const SequenceRecord> records, std::span<const TaskSample> gold, std::size_t layers,
                     std::string strategy, float tau) {
  if (records.size() != gold.size()) throw ValidationError("record count does not match the dataset");
  EvalReport rep;
  rep.strategy = std::move(strategy);
  rep.tau = tau;
  rep.layers = layers;
  rep.sequences = records.size();
  rep.exit_histogram.assign(layers, 0);
  double em = 0.0;
  double an = 0.0;
  double wall = 0.0;
  double enc = 0.0;
  for (std::size_t i = 0; i < records.size(); ++i) {
    const auto& r = records[i];
    const auto pred = Vocabulary::decode(r.tokens);
    em += exact_match(pred, gold[i].target);
    an += anls(pred, gold[i].target);
    rep.total_compute_units += r.compute_units;
    rep.emitted_tokens += r.tokens.size();
    wall += static_cast<double>(r.wall_ns);
    enc += static_cast<double>(r.encoder_ns);
    for (auto m : r.exits) {
      if (m < 1 || m > layers) throw ValidationError("exit layer outside 1..N in record");
      ++rep.exit_histogram[m - 1];
    }
  }
  if (!records.empty()) {
    const double n = static_cast<double>(records.size());
    rep.exact_match = em / n;
    rep.anls = an / n;
    rep.mean_compute_units = static_cast<double>(rep.total_compute_units) / n;
    rep.mean_wall_ns = wall / n;
    rep.mean_encoder_wall_ns = enc / n;
  }
  return rep;
}

namespace {

template <typename DecodeFn>
std::vector<SequenceRecord> run_all(const MultiExitModel& model, std::span<const TaskSample> samples, DecodeFn&& fn) {
  using Clock = std::chrono::steady_clock;
  NoGradGuard no_grad;
  std::vector<SequenceRecord> records;
  records.reserve(samples.size());
  for (const auto& s : samples) {
    const auto src = encode_source(s);
    const auto t0 = Clock::now();
    const Tensor memory = model.encode(src);
    const auto enc_ns = std::chrono::duration_cast<std::chrono::nanoseconds>(Clock::now() - t0).count();
    const DecodeResult r = fn(memory);
    SequenceRecord rec;
    rec.tokens = r.tokens;
    rec.exits = r.trace.exits();
    for (const auto& st : r.trace.steps) rec.confidences.push_back(st.confidences);
    rec.compute_units = r.compute_units;
    rec.wall_ns = r.wall_ns;
    rec.encoder_ns = static_cast<std::uint64_t>(enc_ns);
    records.push_back(std::move(rec));
  }
  return records;
}

}  // namespace

EvalRun evaluate(const MultiExitModel& model, std::span<const TaskSample> samples, Strategy strategy, float tau) {
  DecodeOptions opts;
  opts.tau = tau;
  opts.max_steps = model.config().max_len;
  EvalRun run;
  run.records = run_all(model, samples, [&](const Tensor& mem) { return decode(strategy, model, mem, opts); });
  run.report = aggregate(run.records, samples, model.num_layers(), std::string(strategy_name(strategy)), tau);
  return run;
}

EvalRun fixed_depth_eval(const MultiExitModel& model, std::span<const TaskSample> samples, std::size_t depth) {
  DecodeOptions opts;
  opts.max_steps = model.config().max_len;
  EvalRun run;
  run.records =
      run_all(model, samples, [&](const Tensor& mem) { return fixed_depth_decode(model, mem, depth, opts); });
  run.report = aggregate(run.records, samples, model.num_layers(), "fixed_" + std::to_string(depth), 0.0F);
  return run;
}

}  // namespace deed
