#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "deed/decode.hpp"
#include "deed/tasks.hpp"
#include "json.hpp"

namespace deed {

// Lowercase + trim surrounding whitespace.
std::string normalize_answer(std::string_view s);
std::size_t levenshtein(std::string_view a, std::string_view b);

// Normalized Levenshtein similarity with the 0.5 cut-off.
double anls(std::string_view prediction, std::string_view gold);
int exact_match(std::string_view prediction, std::string_view gold);

// counts[n-1] = number of emitted tokens that exited at layer n.
std::vector<std::uint64_t> exit_histogram(std::span<const ExitTrace> traces, std::size_t layers);

// What a decoding run produced for one sample; the unit traces are
// serialized from.
struct SequenceRecord {
  std::vector<int> tokens;
  std::vector<std::size_t> exits;
  std::vector<std::vector<float>> confidences;
  std::uint64_t compute_units = 0;
  std::uint64_t wall_ns = 0;     // decoder
  std::uint64_t encoder_ns = 0;
};

nlohmann::json record_to_json(const SequenceRecord& r);
SequenceRecord record_from_json(const nlohmann::json& j);

struct EvalReport {
  std::string strategy;
  float tau = 0.0F;
  std::size_t layers = 0;
  std::size_t sequences = 0;
  std::uint64_t emitted_tokens = 0;
  double exact_match = 0.0;
  double anls = 0.0;
  double mean_compute_units = 0.0;
  std::uint64_t total_compute_units = 0;
  double mean_wall_ns = 0.0;          // decoder
  double mean_encoder_wall_ns = 0.0;
  std::vector<std::uint64_t> exit_histogram;
};

nlohmann::json report_to_json(const EvalReport& r);

// Pure reduction of per-sequence records against their gold answers.
EvalReport aggregate(std::span<const SequenceRecord> records, std::span<const TaskSample> gold, std::size_t layers,
                     std::string strategy, float tau);

struct EvalRun {
  EvalReport report;
  std::vector<SequenceRecord> records;
};

// Greedy-decodes every sample (batch size 1) with `strategy`.
EvalRun evaluate(const MultiExitModel& model, std::span<const TaskSample> samples, Strategy strategy, float tau);

// Every step forced to exit at `depth`.
EvalRun fixed_depth_eval(const MultiExitModel& model, std::span<const TaskSample> samples, std::size_t depth);

}  // namespace deed
