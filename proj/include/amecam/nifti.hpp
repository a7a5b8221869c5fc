#pragma once

#include <array>
#include <filesystem>
#include <vector>

namespace amecam::nifti {

struct Volume {
  std::array<int, 3> dims{};  // nx, ny, nz
  std::vector<float> data;    // x fastest, scaled by scl_slope/scl_inter
};

// Reads a single-file NIfTI-1 image (.nii or gzip-compressed .nii.gz).
// Only the first 3D volume of a 4D file is returned.
Volume read(const std::filesystem::path& path);

// Writes an uncompressed or gzip-compressed (by extension) float32 NIfTI-1 file.
void write(const std::filesystem::path& path, const Volume& vol);

}  // namespace amecam::nifti
