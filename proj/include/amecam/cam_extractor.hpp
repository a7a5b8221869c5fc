#pragma once

#include <span>
#include <string>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "amecam/multi_exit_net.hpp"
#include "amecam/tensor.hpp"

namespace amecam {

enum class MapSource { Exit1, Exit2, Exit3, Exit4, Averaged, Attentive, GradCam };

std::string to_string(MapSource s);
MapSource map_source_from_string(const std::string& s);
MapSource exit_source(int k);

// Single-channel map with values in [0,1]; min-max normalized unless all zero.
struct ActivationMap {
  Image values;
  MapSource source = MapSource::Averaged;
  std::pair<int, int> native_resolution{0, 0};
};

// (m - min) / (max - min); a zero-range map becomes all zero.
Image minmax_normalize(const Image& m);

// ReLU of the class-weighted channel sum, min-max normalized, at the exit's
// native resolution. features is [C, H, W].
ActivationMap compute_exit_cam(const Tensor& features, const ExitHead& head, int target_class);

// Corner-aligned bilinear interpolation to a target size no smaller than the source.
Image upsample_map(const Image& m, int target_h, int target_w);

// Adjoint of upsample_map: distributes a target-grid gradient back onto the source grid.
Image upsample_map_backward(const Image& grad, int source_h, int source_w);

// Sum of the terms in ascending order (sorts in place). Order-independent, so
// averaging is exactly permutation invariant and a uniform 1/K convex
// combination reproduces the mean bit-for-bit.
float sorted_sum(std::span<float> terms);

// Pixel-wise mean, then min-max normalization.
ActivationMap average_aggregate(std::span<const ActivationMap> cams);

// Exit CAMs for one image, upsampled to input resolution (index k-1 = exit k).
std::vector<ActivationMap> extract_exit_cams(const MultiExitOutput& out, MultiExitNet& net, int target_class);

// Grad-CAM on the exit-4 features: channel weights are the spatial mean of
// d logit[target] / d features.
ActivationMap grad_cam_reference(const Image& image, MultiExitNet& net, int target_class);

// Bilinear resize with half-pixel centers; used to bring arbitrary slices to
// the network input size.
Image resize_bilinear(const Image& m, int target_h, int target_w);
Mask resize_nearest(const Mask& m, int target_h, int target_w);

// On-disk CAM export: <stem>.bin (float32, row-major) + <stem>.json sidecar.
struct CamRecord {
  std::string case_id;
  int z_index = 0;
  ActivationMap map;
};

void save_cam(const CamRecord& rec, const std::string& dir);
CamRecord load_cam(const std::string& json_path);
std::vector<CamRecord> load_cam_dir(const std::string& dir);
std::string cam_stem(const std::string& case_id, int z_index);

}  // namespace amecam
