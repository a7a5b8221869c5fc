#pragma once

#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "amecam/cam_extractor.hpp"
#include "amecam/tensor.hpp"

namespace amecam {

struct SegmentationMask {
  Mask values;
  double threshold_used = 0.5;
};

// pixel = 1 iff value > threshold; threshold must lie in (0,1).
SegmentationMask threshold_map(const ActivationMap& m, double threshold);

double dice(const Mask& pred, const Mask& gt);
double iou(const Mask& pred, const Mask& gt);

// Pixels that are set and have an unset or out-of-bounds 4-neighbour.
std::vector<std::pair<int, int>> boundary_pixels(const Mask& m);

// 95th percentile (linear interpolation) of the pooled directed nearest
// boundary distances in both directions, in pixels.
double hd95(const Mask& pred, const Mask& gt);

// Linear-interpolation percentile of an unsorted sample, q in [0,100].
double percentile(std::vector<double> values, double q);

struct SampleMetrics {
  std::string case_id;
  int z_index = 0;
  double dice = 0.0;
  double iou = 0.0;
  std::optional<double> hd95;  // undefined when the prediction is empty
};

struct MetricSummary {
  std::optional<double> mean;
  std::optional<double> std;  // population standard deviation
};

struct MetricsReport {
  std::vector<SampleMetrics> per_sample;
  MetricSummary dice, iou, hd95;
  int n_evaluated = 0;
  int n_skipped = 0;
};

struct EvalItem {
  std::string case_id;
  int z_index = 0;
  Mask pred;
  std::optional<Mask> gt;
};

// Scores every item with a non-empty ground truth; items with empty or
// missing ground truth are skipped and counted.
MetricsReport evaluate_dataset(const std::vector<EvalItem>& items);

// Thresholds each map, then evaluates.
MetricsReport evaluate_maps(const std::vector<CamRecord>& maps, const std::vector<std::optional<Mask>>& gts,
                            double threshold);

MetricSummary summarize(const std::vector<double>& values);

nlohmann::json report_to_json(const MetricsReport& r, const nlohmann::json& config_echo);
std::string report_to_csv(const MetricsReport& r);

// Writes an RGB PNG: the grayscale image with the map alpha-blended in red,
// or, for a mask, its boundary drawn in green.
void render_overlay(const Image& image, const ActivationMap& map, const std::filesystem::path& out_path);
void render_overlay(const Image& image, const Mask& mask, const std::filesystem::path& out_path);
void write_gray_png(const Image& image, const std::filesystem::path& out_path);

// Reads back an 8-bit PNG as interleaved bytes (used for verification).
struct PngImage {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<unsigned char> pixels;
};
PngImage read_png(const std::filesystem::path& path);

}  // namespace amecam
