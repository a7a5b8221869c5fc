#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "amecam/tensor.hpp"

namespace amecam {

enum class Modality { T1, T1CE, T2, T2FLAIR, SYNTH };

std::string to_string(Modality m);
Modality modality_from_string(const std::string& s);

// A 3D scan stored D x H x W (z slowest, x fastest).
struct VolumeRecord {
  std::string case_id;
  Modality modality = Modality::SYNTH;
  int depth = 0;
  int height = 0;
  int width = 0;
  std::vector<float> voxels;
  std::optional<std::vector<std::uint8_t>> mask;

  std::size_t voxel_count() const { return static_cast<std::size_t>(depth) * height * width; }
  std::size_t index(int z, int y, int x) const {
    return (static_cast<std::size_t>(z) * height + y) * width + x;
  }
};

struct SliceSample {
  std::string case_id;
  int z_index = 0;
  Image image;  // values in [0,1]
  int label = 0;
  std::optional<Mask> gt_mask;
  Modality modality = Modality::SYNTH;
  // Raw intensity range of the plane before normalization.
  float raw_min = 0.0f;
  float raw_max = 0.0f;
};

enum class Split { Train, Val, Test };

std::string to_string(Split s);
Split split_from_string(const std::string& s);

struct ManifestEntry {
  std::string case_id;
  int z_index = 0;
  Split split = Split::Train;
  int label = 0;

  bool operator==(const ManifestEntry&) const = default;
};

struct DatasetManifest {
  std::vector<ManifestEntry> entries;
  std::uint64_t seed = 0;
  std::array<int, 3> counts{};       // slices per split (train, val, test)
  std::array<int, 3> case_counts{};  // cases per split
  std::string data_dir;              // where the volumes live; empty when built in memory

  std::vector<ManifestEntry> split_entries(Split s) const;
  bool operator==(const DatasetManifest&) const = default;
};

nlohmann::json manifest_to_json(const DatasetManifest& m);
DatasetManifest manifest_from_json(const nlohmann::json& j);
void save_manifest(const DatasetManifest& m, const std::filesystem::path& path);
DatasetManifest load_manifest(const std::filesystem::path& path);

// Loads a NIfTI-1 (.nii / .nii.gz) file or a raw float32 volume described by
// a JSON sidecar (path may name either the .json or the .bin). Mask values are
// binarized with (value > 0).
VolumeRecord load_volume(const std::filesystem::path& path,
                         const std::optional<std::filesystem::path>& mask_path = std::nullopt);

// Writes <case_id>.bin, <case_id>.json and, when a mask exists, <case_id>.mask.bin.
void save_volume_raw(const VolumeRecord& vol, const std::filesystem::path& dir);

// Loads every volume in a directory: raw sidecar volumes, and NIfTI files
// paired with <case>_seg.nii[.gz] masks. Sorted by case_id.
std::vector<VolumeRecord> load_dataset_dir(const std::filesystem::path& dir,
                                           std::optional<Modality> modality = std::nullopt);

int derive_slice_label(const Mask& mask_plane);
int derive_slice_label(const SliceSample& sample);

std::vector<SliceSample> slice_volume(const VolumeRecord& vol);

// Inverse of the per-slice normalization.
std::vector<float> denormalize_slice(const SliceSample& s);

std::vector<VolumeRecord> generate_synthetic(int n_cases, int d, int h, int w, double tumor_fraction,
                                             std::uint64_t seed);

DatasetManifest build_manifest(const std::vector<VolumeRecord>& cases, std::array<double, 3> ratios,
                               std::uint64_t seed);

}  // namespace amecam
