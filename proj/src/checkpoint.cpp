#include "deed/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace deed {

namespace {

constexpr char kMagic[4] = {'D', 'E', 'E', 'D'};

template <typename T>
void put_le(std::string& out, T value) {
  for (std::size_t i = 0; i < sizeof(T); ++i) out.push_back(static_cast<char>((value >> (8 * i)) & 0xFF));
}

template <typename T>
T get_le(const std::string& in, std::size_t pos) {
  if (pos + sizeof(T) > in.size()) throw ArtifactError("checkpoint truncated");
  T value = 0;
  for (std::size_t i = 0; i < sizeof(T); ++i)
    value |= static_cast<T>(static_cast<unsigned char>(in[pos + i])) << (8 * i);
  return value;
}

struct Header {
  ModelConfig config;
  nlohmann::json tensors;
  std::size_t blob_start = 0;
};

Header parse_header(const std::string& bytes) {
  if (bytes.size() < 16 || std::memcmp(bytes.data(), kMagic, 4) != 0) throw ArtifactError("not a DEED checkpoint");
  const auto version = get_le<std::uint32_t>(bytes, 4);
  if (version != kCheckpointVersion)
    throw ArtifactError("unsupported checkpoint version " + std::to_string(version));
  const auto header_len = get_le<std::uint64_t>(bytes, 8);
  if (16 + header_len > bytes.size()) throw ArtifactError("checkpoint header truncated");
  Header h;
  try {
    const auto json = nlohmann::json::parse(bytes.begin() + 16, bytes.begin() + 16 + static_cast<std::ptrdiff_t>(header_len));
    h.config = json.at("config").get<ModelConfig>();
    h.config.validate();
    h.tensors = json.at("tensors");
  } catch (const nlohmann::json::exception& e) {
    throw ArtifactError(std::string("bad checkpoint header: ") + e.what());
  } catch (const ValidationError& e) {
    throw ArtifactError(std::string("bad checkpoint config: ") + e.what());
  }
  h.blob_start = 16 + header_len;
  return h;
}

std::string read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ArtifactError("cannot open checkpoint " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

}  // namespace

std::string serialize_checkpoint(const MultiExitModel& model) {
  nlohmann::json tensors = nlohmann::json::array();
  std::string blobs;
  for (const auto& [name, t] : model.parameters()) {
    tensors.push_back({{"name", name}, {"shape", t.shape()}, {"offset", blobs.size()}, {"nbytes", t.numel() * 4}});
    for (float v : t.data()) put_le(blobs, std::bit_cast<std::uint32_t>(v));
  }
  const std::string header = nlohmann::json{{"config", model.config()}, {"tensors", tensors}}.dump();
  std::string out(kMagic, 4);
  put_le(out, kCheckpointVersion);
  put_le(out, static_cast<std::uint64_t>(header.size()));
  out += header;
  out += blobs;
  return out;
}

void save_checkpoint(const MultiExitModel& model, const std::filesystem::path& path) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ArtifactError("cannot write checkpoint " + path.string());
  const auto bytes = serialize_checkpoint(model);
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw ArtifactError("failed writing checkpoint " + path.string());
}

MultiExitModel deserialize_checkpoint(const std::string& bytes) {
  const Header h = parse_header(bytes);
  std::map<std::string, nlohmann::json> entries;
  for (const auto& e : h.tensors) entries[e.at("name").get<std::string>()] = e;
  MultiExitModel model = MultiExitModel::initialize(h.config, 0);
  for (auto& [name, t] : model.parameters()) {
    auto it = entries.find(name);
    if (it == entries.end()) throw ArtifactError("checkpoint is missing tensor " + name);
    const auto shape = it->second.at("shape").get<Shape>();
    if (shape != t.shape())
      throw ArtifactError("tensor " + name + " has shape " + shape_str(shape) + ", expected " + shape_str(t.shape()));
    const auto offset = it->second.at("offset").get<std::size_t>();
    const auto nbytes = it->second.at("nbytes").get<std::size_t>();
    if (nbytes != t.numel() * 4 || h.blob_start + offset + nbytes > bytes.size())
      throw ArtifactError("tensor " + name + " blob out of range");
    auto dst = t.mutable_data();
    for (std::size_t i = 0; i < dst.size(); ++i)
      dst[i] = std::bit_cast<float>(get_le<std::uint32_t>(bytes, h.blob_start + offset + 4 * i));
    entries.erase(it);
  }
  if (!entries.empty()) throw ArtifactError("checkpoint has unexpected tensor " + entries.begin()->first);
  return model;
}

MultiExitModel load_checkpoint(const std::filesystem::path& path) { return deserialize_checkpoint(read_file(path)); }

ModelConfig peek_checkpoint_config(const std::filesystem::path& path) { return parse_header(read_file(path)).config; }

}  // namespace deed
