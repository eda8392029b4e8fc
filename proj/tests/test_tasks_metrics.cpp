#include <algorithm>
#include <filesystem>
#include <fstream>
#include <numeric>

#include "deed/metrics.hpp"
#include "doctest.h"
#include "test_support.hpp"

using namespace deed;
using namespace deed::testing;

namespace {

// Textbook full-matrix edit distance.
std::size_t edit_distance_oracle(const std::string& a, const std::string& b) {
  std::vector<std::vector<std::size_t>> dp(a.size() + 1, std::vector<std::size_t>(b.size() + 1));
  for (std::size_t i = 0; i <= a.size(); ++i) dp[i][0] = i;
  for (std::size_t j = 0; j <= b.size(); ++j) dp[0][j] = j;
  for (std::size_t i = 1; i <= a.size(); ++i)
    for (std::size_t j = 1; j <= b.size(); ++j)
      dp[i][j] = std::min({dp[i - 1][j] + 1, dp[i][j - 1] + 1, dp[i - 1][j - 1] + (a[i - 1] == b[j - 1] ? 0 : 1)});
  return dp[a.size()][b.size()];
}

std::string random_string(Rng& rng, std::size_t max_len, std::string_view alphabet) {
  std::string s(rng.range(0, max_len), ' ');
  for (auto& c : s) c = alphabet[rng.range(0, alphabet.size() - 1)];
  return s;
}

}  // namespace

TEST_CASE("gen_task examples") {
  const auto copy = gen_task(TaskKind::copy, 5, 7);
  REQUIRE(copy.size() == 5);
  CHECK(copy[0].source == copy[0].target);

  for (const auto& s : gen_task(TaskKind::reverse, 50, 1)) {
    std::string r(s.source.rbegin(), s.source.rend());
    CHECK(s.target == r);
    CHECK(s.source.size() >= 1);
    CHECK(s.source.size() <= 20);
  }
  for (const auto& s : gen_task("addition", 200, 3)) {
    const auto plus = s.source.find('+');
    REQUIRE(plus != std::string::npos);
    const long long a = std::stoll(s.source.substr(0, plus));
    const long long b = std::stoll(s.source.substr(plus + 1));
    CHECK(std::to_string(a + b) == s.target);
    CHECK(s.source.size() <= 20);
    CHECK(plus <= 6);
    CHECK(s.source.size() - plus - 1 <= 6);
  }
  CHECK_THROWS_AS(gen_task("sorting", 3, 1), ValidationError);
  CHECK(gen_task(TaskKind::copy, 20, 11) == gen_task(TaskKind::copy, 20, 11));
  CHECK(gen_task(TaskKind::copy, 20, 11) != gen_task(TaskKind::copy, 20, 12));

  const TaskKind kinds[] = {TaskKind::copy, TaskKind::reverse, TaskKind::addition};
  const auto mix = gen_mixture(kinds, 9, 4);
  for (std::size_t i = 0; i < mix.size(); ++i) CHECK(mix[i].task == kinds[i % 3]);
}

TEST_CASE("vocabulary") {
  CHECK(Vocabulary::size() == 44);
  const auto ids = Vocabulary::encode("17+25");
  CHECK(Vocabulary::decode(ids) == "17+25");
  std::vector<int> with_eos = Vocabulary::encode("abc");
  with_eos.push_back(kEos);
  with_eos.push_back(Vocabulary::id('z'));
  CHECK(Vocabulary::decode(with_eos) == "abc");
  CHECK(Vocabulary::id('!') == kUnk);

  const auto e = encode_sample({"abc", "cba", TaskKind::reverse});
  CHECK(e.source.front() == Vocabulary::id(Vocabulary::task_tag(TaskKind::reverse)));
  CHECK(e.decoder_input.front() == kBos);
  CHECK(e.labels.back() == kEos);
  CHECK(e.decoder_input.size() == e.labels.size());
}

TEST_CASE("anls examples") {
  CHECK(anls("abc", "abc") == 1.0);
  CHECK(anls("hello", "hallo") == doctest::Approx(0.8));
  CHECK(anls("abc", "xyz") == 0.0);
  CHECK(anls("", "") == 1.0);
  CHECK(anls(" Hello ", "hello") == 1.0);
}

TEST_CASE("anls agrees with a brute-force edit-distance oracle") {
  Rng rng(10);
  for (int trial = 0; trial < 200; ++trial) {
    const auto a = random_string(rng, 10, "abcd");
    const auto b = random_string(rng, 10, "abcd");
    CHECK(levenshtein(a, b) == edit_distance_oracle(a, b));
    const std::size_t longest = std::max(a.size(), b.size());
    const double nl = longest == 0 ? 0.0 : static_cast<double>(edit_distance_oracle(a, b)) / static_cast<double>(longest);
    const double expected = nl < 0.5 ? 1.0 - nl : 0.0;
    CHECK(anls(a, b) == expected);
    CHECK(anls(a, b) == anls(b, a));
    CHECK(anls(a, b) >= 0.0);
    CHECK(anls(a, b) <= 1.0);
    CHECK((anls(a, b) == 1.0) == (a == b));
  }
}

TEST_CASE("exact_match") {
  CHECK(exact_match("42", "42") == 1);
  CHECK(exact_match("42", "43") == 0);
  CHECK(exact_match(" 42 ", "42") == 1);
  CHECK(normalize_answer("  AbC\t") == "abc");
}

TEST_CASE("exit_histogram") {
  ExitTrace t;
  for (std::size_t m : {1, 1, 12}) t.steps.push_back({5, m, {}});
  const ExitTrace one[] = {t};
  const auto h = exit_histogram(one, 12);
  CHECK(h[0] == 2);
  CHECK(h[11] == 1);
  CHECK(std::count(h.begin(), h.end(), 0) == 10);
  CHECK(exit_histogram(std::span<const ExitTrace>{}, 4) == std::vector<std::uint64_t>(4, 0));

  Rng rng(12);
  std::vector<ExitTrace> traces(100);
  std::uint64_t total = 0;
  for (auto& tr : traces) {
    const std::size_t len = rng.range(0, 15);
    for (std::size_t i = 0; i < len; ++i) tr.steps.push_back({5, rng.range(1, 6), {}});
    total += len;
  }
  const auto hist = exit_histogram(traces, 6);
  CHECK(std::accumulate(hist.begin(), hist.end(), std::uint64_t{0}) == total);
}

TEST_CASE("fixed_depth_eval") {
  const auto model = MultiExitModel::initialize(tiny_config(16, 3), 13);
  const auto samples = gen_task(TaskKind::copy, 10, 13);
  const auto full = evaluate(model, samples, Strategy::full, kMaxTau);
  const auto at_n = fixed_depth_eval(model, samples, 3);
  CHECK(at_n.report.exact_match == full.report.exact_match);
  CHECK(at_n.report.anls == full.report.anls);
  CHECK(at_n.report.total_compute_units == full.report.total_compute_units);
  for (std::size_t m = 1; m <= 3; ++m) {
    const auto run = fixed_depth_eval(model, samples, m);
    for (const auto& r : run.records) CHECK(r.compute_units == m * r.tokens.size());
    CHECK(run.report.exit_histogram[m - 1] == run.report.emitted_tokens);
  }
  CHECK_THROWS_AS(fixed_depth_eval(model, samples, 4), ValidationError);
}

TEST_CASE("aggregate and records") {
  const auto model = MultiExitModel::initialize(tiny_config(16, 3), 14);
  const auto samples = gen_task(TaskKind::reverse, 8, 14);
  const auto run = evaluate(model, samples, Strategy::deed, 0.5F);
  const auto& r = run.report;
  CHECK(r.sequences == 8);
  CHECK(std::accumulate(r.exit_histogram.begin(), r.exit_histogram.end(), std::uint64_t{0}) == r.emitted_tokens);
  CHECK(r.mean_compute_units == doctest::Approx(static_cast<double>(r.total_compute_units) / 8.0));

  std::vector<SequenceRecord> round;
  for (const auto& rec : run.records) round.push_back(record_from_json(nlohmann::json::parse(record_to_json(rec).dump())));
  const auto again = aggregate(round, samples, 3, "deed", 0.5F);
  CHECK(report_to_json(again) == report_to_json(r));

  SequenceRecord right;
  right.tokens = Vocabulary::encode("abc");
  right.tokens.push_back(kEos);
  right.exits = {1, 1, 2, 3};
  SequenceRecord wrong = right;
  wrong.tokens[0] = Vocabulary::id('x');
  const SequenceRecord recs[] = {right, wrong};
  const TaskSample gold[] = {{"abc", "abc", TaskKind::copy}, {"abc", "abc", TaskKind::copy}};
  const auto agg = aggregate(recs, gold, 3, "deed", 0.9F);
  CHECK(agg.exact_match == 0.5);
  CHECK(agg.anls == doctest::Approx((1.0 + 2.0 / 3.0) / 2.0));
  CHECK(agg.exit_histogram == std::vector<std::uint64_t>{4, 2, 2});
}

TEST_CASE("dataset files round-trip") {
  const TaskKind kinds[] = {TaskKind::copy, TaskKind::addition};
  const auto samples = gen_mixture(kinds, 12, 15);
  const auto path = std::filesystem::temp_directory_path() / "deed_test_dataset.jsonl";
  write_dataset(path, samples);
  CHECK(read_dataset(path) == samples);
  {
    std::ofstream bad(path);
    bad << "{\"src\": \"ab\"}\n";
  }
  CHECK_THROWS_AS(read_dataset(path), ValidationError);
  std::filesystem::remove(path);
}
