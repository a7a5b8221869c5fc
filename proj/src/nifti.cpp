#include "amecam/nifti.hpp"

#include <zlib.h>

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <string>

#include "amecam/error.hpp"

namespace amecam::nifti {

namespace {

constexpr int kHeaderSize = 348;

enum DataType : std::int16_t {
  DT_UINT8 = 2,
  DT_INT16 = 4,
  DT_INT32 = 8,
  DT_FLOAT32 = 16,
  DT_FLOAT64 = 64,
  DT_INT8 = 256,
  DT_UINT16 = 512,
  DT_UINT32 = 768,
};

bool is_gzip(const std::filesystem::path& p) { return p.extension() == ".gz"; }

std::vector<char> read_all(const std::filesystem::path& path) {
  if (!std::filesystem::exists(path)) throw Error(ErrorCode::MissingFile, path.string());
  std::vector<char> bytes;
  if (is_gzip(path)) {
    gzFile f = gzopen(path.string().c_str(), "rb");
    if (!f) throw Error(ErrorCode::MissingFile, path.string());
    char buf[1 << 16];
    int n;
    while ((n = gzread(f, buf, sizeof(buf))) > 0) bytes.insert(bytes.end(), buf, buf + n);
    const bool failed = n < 0;
    gzclose(f);
    if (failed) throw Error(ErrorCode::CorruptHeader, "gzip stream error in " + path.string());
  } else {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw Error(ErrorCode::MissingFile, path.string());
    bytes.assign(std::istreambuf_iterator<char>(in), {});
  }
  return bytes;
}

template <typename T>
T load(const char* p, bool swap) {
  T v;
  std::memcpy(&v, p, sizeof(T));
  if (swap && sizeof(T) > 1) {
    auto* b = reinterpret_cast<unsigned char*>(&v);
    std::reverse(b, b + sizeof(T));
  }
  return v;
}

template <typename T>
void store(char* p, T v) {
  std::memcpy(p, &v, sizeof(T));
}

}  // namespace

Volume read(const std::filesystem::path& path) {
  const auto bytes = read_all(path);
  if (bytes.size() < kHeaderSize) throw Error(ErrorCode::CorruptHeader, "truncated header in " + path.string());
  const char* h = bytes.data();

  bool swap = false;
  std::int32_t sizeof_hdr = load<std::int32_t>(h, false);
  if (sizeof_hdr != kHeaderSize) {
    swap = true;
    sizeof_hdr = load<std::int32_t>(h, true);
    if (sizeof_hdr != kHeaderSize) throw Error(ErrorCode::CorruptHeader, "sizeof_hdr != 348 in " + path.string());
  }
  if (std::memcmp(h + 344, "n+1", 4) != 0) {
    throw Error(ErrorCode::CorruptHeader, "not a single-file NIfTI-1 image: " + path.string());
  }

  const auto ndim = load<std::int16_t>(h + 40, swap);
  if (ndim < 1 || ndim > 7) throw Error(ErrorCode::CorruptHeader, "bad dim[0] in " + path.string());
  Volume vol;
  for (int i = 0; i < 3; ++i) {
    const auto d = i < ndim ? load<std::int16_t>(h + 42 + 2 * i, swap) : std::int16_t{1};
    if (d < 1) throw Error(ErrorCode::CorruptHeader, "non-positive dimension in " + path.string());
    vol.dims[i] = d;
  }
  const auto datatype = load<std::int16_t>(h + 70, swap);
  const auto bitpix = load<std::int16_t>(h + 72, swap);
  const auto vox_offset = static_cast<std::size_t>(load<float>(h + 108, swap));
  float slope = load<float>(h + 112, swap);
  const float inter = load<float>(h + 116, swap);
  if (slope == 0.0f || !std::isfinite(slope)) slope = 1.0f;

  const std::size_t count = static_cast<std::size_t>(vol.dims[0]) * vol.dims[1] * vol.dims[2];
  const std::size_t elem = static_cast<std::size_t>(bitpix) / 8;
  if (elem == 0 || vox_offset < kHeaderSize || bytes.size() < vox_offset + count * elem) {
    throw Error(ErrorCode::CorruptHeader, "voxel data truncated in " + path.string());
  }

  vol.data.resize(count);
  const char* src = h + vox_offset;
  for (std::size_t i = 0; i < count; ++i) {
    const char* p = src + i * elem;
    double v;
    switch (datatype) {
      case DT_UINT8: v = static_cast<unsigned char>(*p); break;
      case DT_INT8: v = static_cast<signed char>(*p); break;
      case DT_INT16: v = load<std::int16_t>(p, swap); break;
      case DT_UINT16: v = load<std::uint16_t>(p, swap); break;
      case DT_INT32: v = load<std::int32_t>(p, swap); break;
      case DT_UINT32: v = load<std::uint32_t>(p, swap); break;
      case DT_FLOAT32: v = load<float>(p, swap); break;
      case DT_FLOAT64: v = load<double>(p, swap); break;
      default: throw Error(ErrorCode::CorruptHeader, "unsupported datatype " + std::to_string(datatype));
    }
    vol.data[i] = static_cast<float>(v * slope + inter);
  }
  return vol;
}

void write(const std::filesystem::path& path, const Volume& vol) {
  static_assert(std::endian::native == std::endian::little);
  std::vector<char> out(352 + vol.data.size() * sizeof(float), 0);
  char* h = out.data();
  store<std::int32_t>(h, kHeaderSize);
  store<std::int16_t>(h + 40, 3);
  for (int i = 0; i < 3; ++i) store<std::int16_t>(h + 42 + 2 * i, static_cast<std::int16_t>(vol.dims[i]));
  for (int i = 3; i < 7; ++i) store<std::int16_t>(h + 42 + 2 * i, 1);
  store<std::int16_t>(h + 70, DT_FLOAT32);
  store<std::int16_t>(h + 72, 32);
  for (int i = 0; i < 4; ++i) store<float>(h + 76 + 4 * i, 1.0f);  // pixdim
  store<float>(h + 108, 352.0f);
  store<float>(h + 112, 1.0f);
  std::memcpy(h + 344, "n+1\0", 4);
  std::memcpy(h + 352, vol.data.data(), vol.data.size() * sizeof(float));

  if (is_gzip(path)) {
    gzFile f = gzopen(path.string().c_str(), "wb");
    if (!f) throw Error(ErrorCode::UnwritablePath, path.string());
    const int written = gzwrite(f, out.data(), static_cast<unsigned>(out.size()));
    gzclose(f);
    if (written != static_cast<int>(out.size())) throw Error(ErrorCode::UnwritablePath, path.string());
  } else {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw Error(ErrorCode::UnwritablePath, path.string());
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
  }
}

}  // namespace amecam::nifti
