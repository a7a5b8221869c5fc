#include "amecam/checkpoint.hpp"

#include <bit>
#include <cstdint>
#include <cstdio>
#include <cstring>
#include <fstream>

#include "amecam/error.hpp"

namespace amecam {

namespace {

constexpr char kMagic[8] = {'A', 'M', 'E', 'C', 'K', 'P', 'T', '1'};

static_assert(std::endian::native == std::endian::little, "checkpoint format is little-endian");

template <typename T>
void put(std::ofstream& out, T v) {
  out.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& in, const std::filesystem::path& path) {
  T v{};
  in.read(reinterpret_cast<char*>(&v), sizeof(T));
  if (!in) throw Error(ErrorCode::CorruptHeader, "truncated checkpoint " + path.string());
  return v;
}

struct Fnv {
  std::uint64_t h = 1469598103934665603ull;
  void add(const void* data, std::size_t n) {
    const auto* p = static_cast<const unsigned char*>(data);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= p[i];
      h *= 1099511628211ull;
    }
  }
};

}  // namespace

void save_checkpoint(const Checkpoint& ckpt, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::UnwritablePath, path.string());
  out.write(kMagic, sizeof(kMagic));
  const std::string meta = ckpt.metadata.dump();
  put<std::uint64_t>(out, meta.size());
  out.write(meta.data(), static_cast<std::streamsize>(meta.size()));
  put<std::uint32_t>(out, static_cast<std::uint32_t>(ckpt.params.size()));
  for (const auto& [name, t] : ckpt.params) {
    put<std::uint32_t>(out, static_cast<std::uint32_t>(name.size()));
    out.write(name.data(), static_cast<std::streamsize>(name.size()));
    put<std::uint32_t>(out, static_cast<std::uint32_t>(t.rank()));
    for (int d : t.shape()) put<std::int32_t>(out, d);
    out.write(reinterpret_cast<const char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
  }
  if (!out) throw Error(ErrorCode::UnwritablePath, path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::MissingFile, path.string());
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw Error(ErrorCode::CorruptHeader, "not a checkpoint: " + path.string());
  }
  Checkpoint ckpt;
  const auto meta_len = get<std::uint64_t>(in, path);
  std::string meta(meta_len, '\0');
  in.read(meta.data(), static_cast<std::streamsize>(meta_len));
  try {
    ckpt.metadata = nlohmann::json::parse(meta);
  } catch (const nlohmann::json::exception& ex) {
    throw Error(ErrorCode::CorruptHeader, std::string("checkpoint metadata: ") + ex.what());
  }
  const auto count = get<std::uint32_t>(in, path);
  for (std::uint32_t i = 0; i < count; ++i) {
    const auto name_len = get<std::uint32_t>(in, path);
    std::string name(name_len, '\0');
    in.read(name.data(), name_len);
    const auto rank = get<std::uint32_t>(in, path);
    if (rank > 8) throw Error(ErrorCode::CorruptHeader, "implausible tensor rank in " + path.string());
    std::vector<int> shape(rank);
    for (auto& d : shape) d = get<std::int32_t>(in, path);
    Tensor t(shape);
    in.read(reinterpret_cast<char*>(t.data()), static_cast<std::streamsize>(t.size() * sizeof(float)));
    if (!in) throw Error(ErrorCode::CorruptHeader, "truncated tensor " + name);
    ckpt.params.emplace(std::move(name), std::move(t));
  }
  return ckpt;
}

void store_parameters(const nn::ParameterList& params, Checkpoint& ckpt) {
  for (const auto& p : params) ckpt.params[p.name] = p.param->value;
}

void restore_parameters(const Checkpoint& ckpt, const nn::ParameterList& params) {
  for (const auto& p : params) {
    const auto it = ckpt.params.find(p.name);
    if (it == ckpt.params.end()) throw Error(ErrorCode::IncompatibleCheckpoint, "missing tensor " + p.name);
    if (it->second.shape() != p.param->value.shape()) {
      throw Error(ErrorCode::IncompatibleCheckpoint, p.name + " has shape " + it->second.shape_string() +
                                                         ", model expects " + p.param->value.shape_string());
    }
    p.param->value = it->second;
  }
}

std::string parameter_hash(const nn::ParameterList& params) {
  Fnv fnv;
  for (const auto& p : params) {
    fnv.add(p.name.data(), p.name.size());
    for (int d : p.param->value.shape()) fnv.add(&d, sizeof(d));
    fnv.add(p.param->value.data(), p.param->value.size() * sizeof(float));
  }
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(fnv.h));
  return buf;
}

}  // namespace amecam
