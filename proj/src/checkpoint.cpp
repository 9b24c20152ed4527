#include "rba/checkpoint.hpp"

#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>

namespace rba {

namespace {

constexpr char kMagic[8] = {'R', 'B', 'A', 'C', 'K', 'P', 'T', '1'};

std::uint64_t fnv1a(const std::vector<char>& bytes) {
  std::uint64_t hash = 14695981039346656037ULL;
  for (char c : bytes) {
    hash ^= static_cast<unsigned char>(c);
    hash *= 1099511628211ULL;
  }
  return hash;
}

template <typename T>
void append(std::vector<char>& buf, const T& v) {
  const char* p = reinterpret_cast<const char*>(&v);
  buf.insert(buf.end(), p, p + sizeof(T));
}

template <typename T>
T read(const std::vector<char>& buf, std::size_t& pos) {
  if (pos + sizeof(T) > buf.size()) {
    throw CheckpointError("checkpoint truncated");
  }
  T v;
  std::memcpy(&v, buf.data() + pos, sizeof(T));
  pos += sizeof(T);
  return v;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path,
                     const NamedTensors& params) {
  std::vector<char> payload;
  append(payload, static_cast<std::uint64_t>(params.size()));
  for (const auto& [name, tensor] : params) {
    append(payload, static_cast<std::uint32_t>(name.size()));
    payload.insert(payload.end(), name.begin(), name.end());
    append(payload, static_cast<std::uint32_t>(tensor.rank()));
    for (int e : tensor.shape()) append(payload, static_cast<std::int32_t>(e));
    for (double v : tensor.values()) append(payload, v);
  }
  const std::uint64_t hash = fnv1a(payload);

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) {
    throw CheckpointError("cannot open " + path.string() + " for writing");
  }
  out.write(kMagic, sizeof(kMagic));
  out.write(payload.data(), static_cast<std::streamsize>(payload.size()));
  out.write(reinterpret_cast<const char*>(&hash), sizeof(hash));
  if (!out) throw CheckpointError("write failed for " + path.string());
}

NamedTensors load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CheckpointError("cannot open " + path.string());
  std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                          std::istreambuf_iterator<char>());
  if (bytes.size() < sizeof(kMagic) + sizeof(std::uint64_t) * 2 ||
      std::memcmp(bytes.data(), kMagic, sizeof(kMagic)) != 0) {
    throw CheckpointError("not a checkpoint file: " + path.string());
  }
  std::vector<char> payload(bytes.begin() + sizeof(kMagic),
                            bytes.end() - sizeof(std::uint64_t));
  std::uint64_t stored;
  std::memcpy(&stored, bytes.data() + bytes.size() - sizeof(stored), sizeof(stored));
  if (fnv1a(payload) != stored) {
    throw CheckpointError("checksum mismatch in " + path.string() +
                          " (file corrupted)");
  }

  std::size_t pos = 0;
  const std::uint64_t count = read<std::uint64_t>(payload, pos);
  NamedTensors result;
  result.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    const std::uint32_t name_len = read<std::uint32_t>(payload, pos);
    if (pos + name_len > payload.size()) throw CheckpointError("checkpoint truncated");
    std::string name(payload.data() + pos, name_len);
    pos += name_len;
    const std::uint32_t rank = read<std::uint32_t>(payload, pos);
    Shape shape;
    for (std::uint32_t r = 0; r < rank; ++r) {
      shape.push_back(read<std::int32_t>(payload, pos));
    }
    const std::size_t numel = shape_numel(shape);
    std::vector<double> values(numel);
    for (std::size_t v = 0; v < numel; ++v) values[v] = read<double>(payload, pos);
    result.emplace_back(std::move(name), Tensor(std::move(shape), std::move(values)));
  }
  if (pos != payload.size()) {
    throw CheckpointError("trailing bytes in " + path.string());
  }
  return result;
}

void apply_checkpoint(NamedTensors& params, const NamedTensors& loaded) {
  std::map<std::string, const Tensor*> by_name;
  for (const auto& [name, tensor] : loaded) by_name[name] = &tensor;
  if (by_name.size() != params.size() || loaded.size() != params.size()) {
    throw CheckpointError("checkpoint holds " + std::to_string(loaded.size()) +
                          " tensors, model expects " +
                          std::to_string(params.size()));
  }
  for (auto& [name, tensor] : params) {
    auto it = by_name.find(name);
    if (it == by_name.end()) {
      throw CheckpointError("checkpoint is missing tensor '" + name + "'");
    }
    if (it->second->shape() != tensor.shape()) {
      throw CheckpointError("shape mismatch for '" + name + "': checkpoint " +
                            shape_to_string(it->second->shape()) + ", model " +
                            shape_to_string(tensor.shape()));
    }
    tensor.values() = it->second->values();
  }
}

}  // namespace rba
