#include "deed/tasks.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>

#include "deed/errors.hpp"
#include "deed/model.hpp"
#include "deed/random.hpp"
#include "json.hpp"

namespace deed {

std::string_view task_name(TaskKind kind) {
  switch (kind) {
    case TaskKind::copy:
      return "copy";
    case TaskKind::reverse:
      return "reverse";
    case TaskKind::addition:
      return "addition";
  }
  return "unknown";
}

TaskKind parse_task_kind(std::string_view name) {
  if (name == "copy") return TaskKind::copy;
  if (name == "reverse") return TaskKind::reverse;
  if (name == "addition") return TaskKind::addition;
  throw ValidationError("unknown task kind '" + std::string(name) + "'");
}

namespace {

constexpr std::size_t kMaxTextLen = 20;

std::string random_word(Rng& rng) {
  const auto len = rng.range(1, kMaxTextLen);
  std::string s;
  for (std::uint64_t i = 0; i < len; ++i) s.push_back(static_cast<char>('a' + rng.range(0, 25)));
  return s;
}

std::uint64_t random_operand(Rng& rng) {
  const auto digits = rng.range(1, 6);
  if (digits == 1) return rng.range(0, 9);
  std::uint64_t v = rng.range(1, 9);
  for (std::uint64_t i = 1; i < digits; ++i) v = v * 10 + rng.range(0, 9);
  return v;
}

TaskSample make_sample(TaskKind kind, Rng& rng) {
  switch (kind) {
    case TaskKind::copy: {
      auto s = random_word(rng);
      return {s, s, kind};
    }
    case TaskKind::reverse: {
      auto s = random_word(rng);
      return {s, std::string(s.rbegin(), s.rend()), kind};
    }
    case TaskKind::addition: {
      const auto a = random_operand(rng);
      const auto b = random_operand(rng);
      return {std::to_string(a) + "+" + std::to_string(b), std::to_string(a + b), kind};
    }
  }
  throw ValidationError("unknown task kind");
}

}  // namespace

std::vector<TaskSample> gen_task(TaskKind kind, std::size_t count, std::uint64_t seed) {
  if (count < 1) throw ValidationError("gen_task count must be at least 1");
  Rng rng(seed);
  std::vector<TaskSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) out.push_back(make_sample(kind, rng));
  return out;
}

std::vector<TaskSample> gen_task(std::string_view kind, std::size_t count, std::uint64_t seed) {
  return gen_task(parse_task_kind(kind), count, seed);
}

std::vector<TaskSample> gen_mixture(std::span<const TaskKind> kinds, std::size_t count, std::uint64_t seed) {
  if (kinds.empty()) throw ValidationError("gen_mixture needs at least one task kind");
  if (count < 1) throw ValidationError("gen_mixture count must be at least 1");
  std::vector<Rng> streams;
  for (std::size_t k = 0; k < kinds.size(); ++k) streams.emplace_back(seed * 1000003ULL + k);
  std::vector<TaskSample> out;
  out.reserve(count);
  for (std::size_t i = 0; i < count; ++i) {
    const auto k = i % kinds.size();
    out.push_back(make_sample(kinds[k], streams[k]));
  }
  return out;
}

int Vocabulary::id(char c) {
  const auto pos = kCharset.find(c);
  return pos == std::string_view::npos ? kUnk : static_cast<int>(4 + pos);
}

char Vocabulary::character(int id) {
  if (id < 4 || static_cast<std::size_t>(id) >= size()) return '?';
  return kCharset[static_cast<std::size_t>(id - 4)];
}

char Vocabulary::task_tag(TaskKind kind) {
  switch (kind) {
    case TaskKind::copy:
      return '>';
    case TaskKind::reverse:
      return '<';
    case TaskKind::addition:
      return '=';
  }
  return '?';
}

std::vector<int> Vocabulary::encode(std::string_view text) {
  std::vector<int> ids;
  ids.reserve(text.size());
  for (char c : text) ids.push_back(id(c));
  return ids;
}

std::string Vocabulary::decode(std::span<const int> ids) {
  std::string out;
  for (int t : ids) {
    if (t == kEos) break;
    if (t >= 4) out.push_back(character(t));
  }
  return out;
}

std::vector<int> encode_source(const TaskSample& sample) {
  std::vector<int> ids{Vocabulary::id(Vocabulary::task_tag(sample.task))};
  const auto body = Vocabulary::encode(sample.source);
  ids.insert(ids.end(), body.begin(), body.end());
  return ids;
}

EncodedSample encode_sample(const TaskSample& sample) {
  EncodedSample e;
  e.source = encode_source(sample);
  const auto tgt = Vocabulary::encode(sample.target);
  e.decoder_input.push_back(kBos);
  e.decoder_input.insert(e.decoder_input.end(), tgt.begin(), tgt.end());
  e.labels = tgt;
  e.labels.push_back(kEos);
  return e;
}

void write_dataset(const std::filesystem::path& path, std::span<const TaskSample> samples) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw ArtifactError("cannot write dataset " + path.string());
  for (const auto& s : samples) {
    out << nlohmann::json{{"src", s.source}, {"tgt", s.target}, {"task", std::string(task_name(s.task))}}.dump()
        << '\n';
  }
}

std::vector<TaskSample> read_dataset(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open dataset " + path.string());
  std::vector<TaskSample> out;
  std::string line;
  std::size_t lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (std::all_of(line.begin(), line.end(), [](unsigned char c) { return std::isspace(c); })) continue;
    try {
      const auto j = nlohmann::json::parse(line);
      out.push_back({j.at("src").get<std::string>(), j.at("tgt").get<std::string>(),
                     parse_task_kind(j.value("task", std::string("copy")))});
    } catch (const nlohmann::json::exception& e) {
      throw ValidationError(path.string() + ":" + std::to_string(lineno) + ": " + e.what());
    }
  }
  return out;
}

}  // namespace deed
