#include "amecam/data_pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numbers>
#include <random>
#include <set>

#include "amecam/error.hpp"
#include "amecam/nifti.hpp"

namespace amecam {

namespace fs = std::filesystem;
using json = nlohmann::json;

std::string to_string(Modality m) {
  switch (m) {
    case Modality::T1: return "T1";
    case Modality::T1CE: return "T1CE";
    case Modality::T2: return "T2";
    case Modality::T2FLAIR: return "T2FLAIR";
    case Modality::SYNTH: return "SYNTH";
  }
  return "SYNTH";
}

Modality modality_from_string(const std::string& s) {
  std::string u;
  for (char c : s) {
    if (c != '-' && c != '_') u += static_cast<char>(std::toupper(static_cast<unsigned char>(c)));
  }
  if (u == "T1") return Modality::T1;
  if (u == "T1CE" || u == "T1GD") return Modality::T1CE;
  if (u == "T2") return Modality::T2;
  if (u == "T2FLAIR" || u == "FLAIR") return Modality::T2FLAIR;
  if (u == "SYNTH") return Modality::SYNTH;
  throw Error(ErrorCode::BadConfig, "unknown modality '" + s + "'");
}

std::string to_string(Split s) {
  switch (s) {
    case Split::Train: return "train";
    case Split::Val: return "val";
    case Split::Test: return "test";
  }
  return "train";
}

Split split_from_string(const std::string& s) {
  if (s == "train") return Split::Train;
  if (s == "val") return Split::Val;
  if (s == "test") return Split::Test;
  throw Error(ErrorCode::BadConfig, "unknown split '" + s + "'");
}

std::vector<ManifestEntry> DatasetManifest::split_entries(Split s) const {
  std::vector<ManifestEntry> out;
  std::copy_if(entries.begin(), entries.end(), std::back_inserter(out), [s](const auto& e) { return e.split == s; });
  return out;
}

// ------------------------------------------------------------ manifest I/O

json manifest_to_json(const DatasetManifest& m) {
  json entries = json::array();
  for (const auto& e : m.entries) {
    entries.push_back({{"case_id", e.case_id}, {"z_index", e.z_index}, {"split", to_string(e.split)}, {"label", e.label}});
  }
  return {
      {"entries", entries},
      {"seed", m.seed},
      {"counts", {{"train", m.counts[0]}, {"val", m.counts[1]}, {"test", m.counts[2]}}},
      {"case_counts", {{"train", m.case_counts[0]}, {"val", m.case_counts[1]}, {"test", m.case_counts[2]}}},
      {"data_dir", m.data_dir},
  };
}

DatasetManifest manifest_from_json(const json& j) {
  DatasetManifest m;
  try {
    for (const auto& e : j.at("entries")) {
      m.entries.push_back({e.at("case_id").get<std::string>(), e.at("z_index").get<int>(),
                           split_from_string(e.at("split").get<std::string>()), e.at("label").get<int>()});
    }
    m.seed = j.at("seed").get<std::uint64_t>();
    const auto& c = j.at("counts");
    m.counts = {c.at("train").get<int>(), c.at("val").get<int>(), c.at("test").get<int>()};
    if (j.contains("case_counts")) {
      const auto& cc = j.at("case_counts");
      m.case_counts = {cc.at("train").get<int>(), cc.at("val").get<int>(), cc.at("test").get<int>()};
    }
    m.data_dir = j.value("data_dir", std::string{});
  } catch (const json::exception& ex) {
    throw Error(ErrorCode::CorruptHeader, std::string("manifest: ") + ex.what());
  }
  std::array<int, 3> tally{};
  for (const auto& e : m.entries) ++tally[static_cast<int>(e.split)];
  if (tally != m.counts) throw Error(ErrorCode::CorruptHeader, "manifest counts disagree with entries");
  return m;
}

void save_manifest(const DatasetManifest& m, const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw Error(ErrorCode::UnwritablePath, path.string());
  out << manifest_to_json(m).dump(2) << "\n";
}

DatasetManifest load_manifest(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::MissingFile, path.string());
  json j;
  try {
    in >> j;
  } catch (const json::exception& ex) {
    throw Error(ErrorCode::CorruptHeader, path.string() + ": " + ex.what());
  }
  return manifest_from_json(j);
}

// ----------------------------------------------------------- volume I/O

namespace {

std::vector<char> read_binary(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw Error(ErrorCode::MissingFile, path.string());
  return {std::istreambuf_iterator<char>(in), {}};
}

void check_finite(const VolumeRecord& vol, const fs::path& path) {
  if (!std::all_of(vol.voxels.begin(), vol.voxels.end(), [](float v) { return std::isfinite(v); })) {
    throw Error(ErrorCode::NonFiniteVoxels, path.string());
  }
}

std::string strip_nifti_ext(const fs::path& p) {
  std::string name = p.filename().string();
  for (const std::string ext : {".nii.gz", ".nii"}) {
    if (name.size() > ext.size() && name.ends_with(ext)) return name.substr(0, name.size() - ext.size());
  }
  return p.stem().string();
}

bool is_nifti(const fs::path& p) {
  const auto name = p.filename().string();
  return name.ends_with(".nii") || name.ends_with(".nii.gz");
}

struct RawHeader {
  std::array<int, 3> dims{};
  std::string case_id;
  Modality modality = Modality::SYNTH;
};

RawHeader read_raw_header(const fs::path& json_path) {
  std::ifstream in(json_path);
  if (!in) throw Error(ErrorCode::MissingFile, json_path.string());
  RawHeader h;
  try {
    json j;
    in >> j;
    const auto dims = j.at("dims").get<std::vector<int>>();
    if (dims.size() != 3) throw Error(ErrorCode::CorruptHeader, "dims must have 3 entries");
    if (j.at("dtype").get<std::string>() != "f32") throw Error(ErrorCode::CorruptHeader, "dtype must be f32");
    if (j.value("byte_order", std::string("little-endian")) != "little-endian") {
      throw Error(ErrorCode::CorruptHeader, "byte_order must be little-endian");
    }
    h.dims = {dims[0], dims[1], dims[2]};
    h.case_id = j.value("case_id", json_path.stem().string());
    h.modality = modality_from_string(j.value("modality", std::string("SYNTH")));
  } catch (const json::exception& ex) {
    throw Error(ErrorCode::CorruptHeader, json_path.string() + ": " + ex.what());
  }
  if (h.dims[0] < 1 || h.dims[1] < 1 || h.dims[2] < 1) throw Error(ErrorCode::CorruptHeader, "non-positive dims");
  return h;
}

std::vector<float> read_mask_values(const fs::path& path, std::size_t* count_out, std::array<int, 3>* dims_out) {
  if (is_nifti(path)) {
    auto m = nifti::read(path);
    *count_out = m.data.size();
    *dims_out = {m.dims[2], m.dims[1], m.dims[0]};
    return std::move(m.data);
  }
  if (!fs::exists(path)) throw Error(ErrorCode::MissingFile, path.string());
  const auto bytes = read_binary(path);
  // Raw masks are stored as one byte per voxel.
  std::vector<float> values(bytes.size());
  for (std::size_t i = 0; i < bytes.size(); ++i) values[i] = static_cast<unsigned char>(bytes[i]);
  *count_out = bytes.size();
  *dims_out = {-1, -1, -1};
  return values;
}

}  // namespace

VolumeRecord load_volume(const fs::path& path, const std::optional<fs::path>& mask_path) {
  if (!fs::exists(path)) throw Error(ErrorCode::MissingFile, path.string());
  VolumeRecord vol;

  if (is_nifti(path)) {
    auto nii = nifti::read(path);
    vol.case_id = strip_nifti_ext(path);
    vol.width = nii.dims[0];
    vol.height = nii.dims[1];
    vol.depth = nii.dims[2];
    vol.voxels = std::move(nii.data);
    vol.modality = Modality::SYNTH;
    const auto underscore = vol.case_id.rfind('_');
    if (underscore != std::string::npos) {
      try {
        vol.modality = modality_from_string(vol.case_id.substr(underscore + 1));
        vol.case_id = vol.case_id.substr(0, underscore);
      } catch (const Error&) {
      }
    }
  } else {
    fs::path json_path = path;
    json_path.replace_extension(".json");
    fs::path bin_path = path;
    bin_path.replace_extension(".bin");
    const auto header = read_raw_header(json_path);
    vol.case_id = header.case_id;
    vol.modality = header.modality;
    vol.depth = header.dims[0];
    vol.height = header.dims[1];
    vol.width = header.dims[2];
    const auto bytes = read_binary(bin_path);
    if (bytes.size() != vol.voxel_count() * sizeof(float)) {
      throw Error(ErrorCode::CorruptHeader, bin_path.string() + " size does not match dims");
    }
    vol.voxels.resize(vol.voxel_count());
    std::memcpy(vol.voxels.data(), bytes.data(), bytes.size());
  }
  check_finite(vol, path);

  if (mask_path) {
    std::size_t count = 0;
    std::array<int, 3> dims{};
    const auto values = read_mask_values(*mask_path, &count, &dims);
    const bool dims_known = dims[0] >= 0;
    if (count != vol.voxel_count() ||
        (dims_known && dims != std::array<int, 3>{vol.depth, vol.height, vol.width})) {
      throw Error(ErrorCode::ShapeMismatch, "mask " + mask_path->string() + " does not match volume dims");
    }
    std::vector<std::uint8_t> mask(count);
    for (std::size_t i = 0; i < count; ++i) mask[i] = values[i] > 0.0f ? 1 : 0;
    vol.mask = std::move(mask);
  }
  return vol;
}

void save_volume_raw(const VolumeRecord& vol, const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  const fs::path bin = dir / (vol.case_id + ".bin");
  std::ofstream out(bin, std::ios::binary);
  if (!out) throw Error(ErrorCode::UnwritablePath, bin.string());
  out.write(reinterpret_cast<const char*>(vol.voxels.data()),
            static_cast<std::streamsize>(vol.voxels.size() * sizeof(float)));

  const json header = {{"case_id", vol.case_id},
                       {"modality", to_string(vol.modality)},
                       {"dims", {vol.depth, vol.height, vol.width}},
                       {"dtype", "f32"},
                       {"byte_order", "little-endian"},
                       {"has_mask", vol.mask.has_value()}};
  std::ofstream hj(dir / (vol.case_id + ".json"));
  if (!hj) throw Error(ErrorCode::UnwritablePath, (dir / (vol.case_id + ".json")).string());
  hj << header.dump(2) << "\n";

  if (vol.mask) {
    std::ofstream mo(dir / (vol.case_id + ".mask.bin"), std::ios::binary);
    mo.write(reinterpret_cast<const char*>(vol.mask->data()), static_cast<std::streamsize>(vol.mask->size()));
  }
}

std::vector<VolumeRecord> load_dataset_dir(const fs::path& dir, std::optional<Modality> modality) {
  if (!fs::is_directory(dir)) throw Error(ErrorCode::MissingFile, dir.string());
  std::vector<fs::path> files;
  for (const auto& entry : fs::directory_iterator(dir)) {
    if (entry.is_regular_file()) files.push_back(entry.path());
  }
  std::sort(files.begin(), files.end());

  std::vector<VolumeRecord> out;
  for (const auto& p : files) {
    const auto name = p.filename().string();
    if (p.extension() == ".json" && !name.ends_with(".cam.json")) {
      fs::path mask = p;
      mask.replace_extension(".mask.bin");
      auto vol = load_volume(p, fs::exists(mask) ? std::optional<fs::path>(mask) : std::nullopt);
      out.push_back(std::move(vol));
    } else if (is_nifti(p)) {
      const std::string stem = strip_nifti_ext(p);
      if (stem.ends_with("_seg")) continue;
      const auto underscore = stem.rfind('_');
      std::optional<fs::path> mask;
      if (underscore != std::string::npos) {
        const std::string base = stem.substr(0, underscore);
        for (const std::string ext : {".nii.gz", ".nii"}) {
          const auto candidate = dir / (base + "_seg" + ext);
          if (fs::exists(candidate)) {
            mask = candidate;
            break;
          }
        }
      }
      out.push_back(load_volume(p, mask));
    }
  }
  if (modality) {
    std::erase_if(out, [&](const VolumeRecord& v) { return v.modality != *modality; });
  }
  std::sort(out.begin(), out.end(), [](const auto& a, const auto& b) { return a.case_id < b.case_id; });
  return out;
}

// -------------------------------------------------------------- slicing

int derive_slice_label(const Mask& mask_plane) {
  return std::any_of(mask_plane.values.begin(), mask_plane.values.end(), [](auto v) { return v != 0; }) ? 1 : 0;
}

int derive_slice_label(const SliceSample& sample) {
  if (!sample.gt_mask) {
    throw Error(ErrorCode::MissingMask, sample.case_id + " z=" + std::to_string(sample.z_index));
  }
  return derive_slice_label(*sample.gt_mask);
}

namespace {

float normalize_value(float v, float min, double range) {
  return range > 0.0 ? static_cast<float>(std::clamp((v - static_cast<double>(min)) / range, 0.0, 1.0)) : 0.0f;
}

}  // namespace

std::vector<SliceSample> slice_volume(const VolumeRecord& vol) {
  std::vector<SliceSample> out;
  out.reserve(vol.depth);
  const std::size_t plane = static_cast<std::size_t>(vol.height) * vol.width;
  for (int z = 0; z < vol.depth; ++z) {
    SliceSample s;
    s.case_id = vol.case_id;
    s.z_index = z;
    s.modality = vol.modality;
    s.image = Image(vol.height, vol.width);
    const float* src = vol.voxels.data() + z * plane;
    const auto [lo, hi] = std::minmax_element(src, src + plane);
    s.raw_min = *lo;
    s.raw_max = *hi;
    const double range = static_cast<double>(s.raw_max) - s.raw_min;
    for (std::size_t i = 0; i < plane; ++i) {
      s.image.values[i] = normalize_value(src[i], s.raw_min, range);
    }
    if (vol.mask) {
      s.gt_mask = Mask(vol.height, vol.width);
      std::copy(vol.mask->begin() + z * plane, vol.mask->begin() + (z + 1) * plane, s.gt_mask->values.begin());
      s.label = derive_slice_label(*s.gt_mask);
    }
    out.push_back(std::move(s));
  }
  return out;
}

std::vector<float> denormalize_slice(const SliceSample& s) {
  std::vector<float> raw(s.image.size());
  const double range = static_cast<double>(s.raw_max) - s.raw_min;
  for (std::size_t i = 0; i < raw.size(); ++i) {
    const float x = s.image.values[i];
    const float guess = static_cast<float>(s.raw_min + x * range);
    raw[i] = guess;
    // Normalization is monotone, so the raw value sits within a few ulps of the
    // guess; pick the float that normalizes back to x. This is exact whenever
    // normalization is injective on the slice (in practice for non-negative data).
    float up = guess, down = guess;
    for (int step = 0; step <= 4; ++step) {
      if (normalize_value(up, s.raw_min, range) == x) {
        raw[i] = up;
        break;
      }
      if (normalize_value(down, s.raw_min, range) == x) {
        raw[i] = down;
        break;
      }
      up = std::nextafter(up, INFINITY);
      down = std::nextafter(down, -INFINITY);
    }
  }
  return raw;
}

// ------------------------------------------------------ synthetic phantom

std::vector<VolumeRecord> generate_synthetic(int n_cases, int d, int h, int w, double tumor_fraction,
                                             std::uint64_t seed) {
  if (n_cases < 1 || d < 8 || h < 8 || w < 8) {
    throw Error(ErrorCode::BadDimensions, "need n_cases >= 1 and d,h,w >= 8");
  }
  if (!(tumor_fraction >= 0.0 && tumor_fraction <= 1.0)) {
    throw Error(ErrorCode::BadDimensions, "tumor_fraction must lie in [0,1]");
  }
  std::vector<VolumeRecord> cases;
  cases.reserve(n_cases);
  const double side = std::min(h, w);

  for (int c = 0; c < n_cases; ++c) {
    std::seed_seq seq{static_cast<std::uint32_t>(seed), static_cast<std::uint32_t>(seed >> 32),
                      static_cast<std::uint32_t>(c)};
    std::mt19937_64 rng(seq);
    std::uniform_real_distribution<double> u01(0.0, 1.0);
    auto uniform = [&](double a, double b) { return a + (b - a) * u01(rng); };
    std::normal_distribution<double> noise(0.0, 1.0);

    VolumeRecord vol;
    char id[32];
    std::snprintf(id, sizeof(id), "synth_%04d", c);
    vol.case_id = id;
    vol.modality = Modality::SYNTH;
    vol.depth = d;
    vol.height = h;
    vol.width = w;
    vol.voxels.assign(vol.voxel_count(), 0.0f);
    std::vector<std::uint8_t> mask(vol.voxel_count(), 0);

    // Head: a textured disk per slice whose radius shrinks mildly away from
    // mid-depth, wrapped in a bright rim. The rim carries the slice maximum, so
    // per-slice normalization does not reveal whether a tumor is present.
    const double cy = h / 2.0 + uniform(-0.04, 0.04) * side;
    const double cx = w / 2.0 + uniform(-0.04, 0.04) * side;
    const double radius = uniform(0.36, 0.42) * side;
    const double brain_level = uniform(0.35, 0.5);
    const double rim = std::max(1.0, 0.05 * side);
    const double rim_level = uniform(0.9, 1.0);
    const double sigma = 0.035;
    const double texture_freq = uniform(1.5, 3.0) * 2.0 * std::numbers::pi / side;
    const double texture_phase = uniform(0.0, 2.0 * std::numbers::pi);

    const bool has_tumor = u01(rng) < tumor_fraction;
    double tz = 0, ty = 0, tx = 0, az = 1, ay = 1, ax = 1, contrast = 0;
    if (has_tumor) {
      const double min_radius = radius * std::sqrt(1.0 - 0.55 * 0.55);
      ay = uniform(0.09, 0.16) * side;
      ax = uniform(0.09, 0.16) * side;
      az = uniform(0.2, 0.35) * d;
      tz = uniform(0.35, 0.65) * (d - 1);
      const double reach = std::max(0.0, min_radius - rim - std::max(ay, ax) - 1.0);
      const double angle = uniform(0.0, 2.0 * std::numbers::pi);
      const double dist = uniform(0.0, reach);
      ty = cy + dist * std::sin(angle);
      tx = cx + dist * std::cos(angle);
      contrast = uniform(0.3, 0.4);
    }

    for (int z = 0; z < d; ++z) {
      const double dz = (z - (d - 1) / 2.0) / d;
      const double rz = radius * std::sqrt(std::max(0.0, 1.0 - dz * dz * 1.2));
      for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
          const std::size_t i = vol.index(z, y, x);
          const double r = std::hypot(y - cy, x - cx);
          double v = std::abs(noise(rng)) * 0.01;
          if (r <= rz) {
            v = brain_level * (1.0 + 0.08 * std::sin(texture_freq * x + texture_phase) * std::cos(texture_freq * y)) +
                sigma * noise(rng);
            if (r > rz - rim) v = rim_level + sigma * noise(rng);
          }
          if (has_tumor) {
            const double q = ((z - tz) / az) * ((z - tz) / az) + ((y - ty) / ay) * ((y - ty) / ay) +
                             ((x - tx) / ax) * ((x - tx) / ax);
            if (q <= 1.0 && r < rz - rim) {
              v += contrast;
              mask[i] = 1;
            }
          }
          vol.voxels[i] = static_cast<float>(std::max(0.0, v));
        }
      }
    }
    vol.mask = std::move(mask);
    cases.push_back(std::move(vol));
  }
  return cases;
}

// ------------------------------------------------------------ manifest

DatasetManifest build_manifest(const std::vector<VolumeRecord>& cases, std::array<double, 3> ratios,
                               std::uint64_t seed) {
  if (cases.empty()) throw Error(ErrorCode::EmptyCaseList, "no cases");
  double total = 0.0;
  for (double r : ratios) {
    if (!(r >= 0.0)) throw Error(ErrorCode::BadRatios, "ratios must be non-negative");
    total += r;
  }
  if (std::abs(total - 1.0) > 1e-9) throw Error(ErrorCode::BadRatios, "ratios must sum to 1");

  std::set<std::string> unique;
  for (const auto& c : cases) unique.insert(c.case_id);
  std::vector<std::string> ids(unique.begin(), unique.end());
  const int n = static_cast<int>(ids.size());
  const int nonzero = static_cast<int>(std::count_if(ratios.begin(), ratios.end(), [](double r) { return r > 0; }));
  if (n < nonzero) {
    throw Error(ErrorCode::InsufficientCases,
                std::to_string(n) + " case(s) cannot populate " + std::to_string(nonzero) + " splits");
  }

  std::mt19937_64 rng(seed);
  for (int i = n - 1; i > 0; --i) {
    const auto j = static_cast<int>(rng() % static_cast<std::uint64_t>(i + 1));
    std::swap(ids[i], ids[j]);
  }

  // Largest-remainder apportionment, then make sure every nonzero split has a case.
  std::array<int, 3> n_cases{};
  std::array<double, 3> remainder{};
  int assigned = 0;
  for (int s = 0; s < 3; ++s) {
    const double exact = ratios[s] * n;
    n_cases[s] = static_cast<int>(std::floor(exact + 1e-9));
    remainder[s] = exact - n_cases[s];
    assigned += n_cases[s];
  }
  while (assigned < n) {
    const int s = static_cast<int>(std::max_element(remainder.begin(), remainder.end()) - remainder.begin());
    ++n_cases[s];
    remainder[s] = -1.0;
    ++assigned;
  }
  for (int s = 0; s < 3; ++s) {
    if (ratios[s] > 0 && n_cases[s] == 0) {
      const int donor = static_cast<int>(std::max_element(n_cases.begin(), n_cases.end()) - n_cases.begin());
      --n_cases[donor];
      ++n_cases[s];
    }
  }

  std::map<std::string, Split> assignment;
  int cursor = 0;
  for (int s = 0; s < 3; ++s) {
    for (int k = 0; k < n_cases[s]; ++k) assignment[ids[cursor++]] = static_cast<Split>(s);
  }

  DatasetManifest m;
  m.seed = seed;
  m.case_counts = n_cases;
  std::vector<const VolumeRecord*> ordered;
  for (const auto& c : cases) ordered.push_back(&c);
  std::stable_sort(ordered.begin(), ordered.end(), [](auto* a, auto* b) { return a->case_id < b->case_id; });
  for (const auto* c : ordered) {
    if (!c->mask) throw Error(ErrorCode::MissingMask, "case " + c->case_id + " has no mask to derive labels");
    const Split split = assignment.at(c->case_id);
    const std::size_t plane = static_cast<std::size_t>(c->height) * c->width;
    for (int z = 0; z < c->depth; ++z) {
      const auto first = c->mask->begin() + z * plane;
      const int label = std::any_of(first, first + plane, [](auto v) { return v != 0; }) ? 1 : 0;
      m.entries.push_back({c->case_id, z, split, label});
      ++m.counts[static_cast<int>(split)];
    }
  }
  return m;
}

}  // namespace amecam
