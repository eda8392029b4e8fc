#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace deed {

enum class TaskKind { copy, reverse, addition };

std::string_view task_name(TaskKind kind);
// Throws ValidationError for an unknown name.
TaskKind parse_task_kind(std::string_view name);

struct TaskSample {
  std::string source;
  std::string target;
  TaskKind task = TaskKind::copy;

  bool operator==(const TaskSample&) const = default;
};

// Deterministic in (kind, count, seed). Copy/reverse sources are 1..20
// lowercase letters; addition operands have 1..6 digits each.
std::vector<TaskSample> gen_task(TaskKind kind, std::size_t count, std::uint64_t seed);
std::vector<TaskSample> gen_task(std::string_view kind, std::size_t count, std::uint64_t seed);
// Round-robin over `kinds`, each stream seeded independently from `seed`.
std::vector<TaskSample> gen_mixture(std::span<const TaskKind> kinds, std::size_t count, std::uint64_t seed);

// Character vocabulary: ids 0..3 are PAD/BOS/EOS/UNK, then one id per
// character of kCharset. The model sees the source prefixed with a task tag
// character so copy and reverse inputs are distinguishable.
class Vocabulary {
 public:
  static constexpr std::string_view kCharset = "0123456789abcdefghijklmnopqrstuvwxyz+<>=";
  static constexpr std::size_t size() { return 4 + kCharset.size(); }

  static int id(char c);
  static char character(int id);  // '?' for reserved ids
  static char task_tag(TaskKind kind);

  static std::vector<int> encode(std::string_view text);
  // Characters up to the first EOS; reserved ids are dropped.
  static std::string decode(std::span<const int> ids);
};

// Token ids ready for teacher forcing: decoder_input = BOS + target,
// labels = target + EOS.
struct EncodedSample {
  std::vector<int> source;
  std::vector<int> decoder_input;
  std::vector<int> labels;
};

EncodedSample encode_sample(const TaskSample& sample);
std::vector<int> encode_source(const TaskSample& sample);

// One JSON object per line: {"src": "...", "tgt": "...", "task": "copy"}.
void write_dataset(const std::filesystem::path& path, std::span<const TaskSample> samples);
std::vector<TaskSample> read_dataset(const std::filesystem::path& path);

}  // namespace deed
