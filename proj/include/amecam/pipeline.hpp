#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "amecam/data_pipeline.hpp"
#include "amecam/evaluation.hpp"
#include "amecam/training.hpp"

// Command implementations behind the amecam CLI. Each takes plain options so
// tests can drive the pipeline without spawning processes.
namespace amecam::pipeline {

namespace fs = std::filesystem;

struct SynthOptions {
  int cases = 20;
  std::array<int, 3> dims{16, 64, 64};  // D, H, W
  double tumor_fraction = 0.5;
  std::uint64_t seed = 0;
  fs::path out;
};
void synth(const SynthOptions& o);

struct ManifestOptions {
  fs::path data;
  std::array<double, 3> ratios{0.8, 0.1, 0.1};
  std::uint64_t seed = 0;
  fs::path out;
  std::optional<Modality> modality;
};
DatasetManifest manifest(const ManifestOptions& o);

// Training configuration file (JSON):
//   { "seed": 0, "manifest": "manifest.json",
//     "backbone": {...}, "aggregation": {...},
//     "phases": { "pretrain": {...}, "multi_exit": {...}, "aggregation": {...} } }
// Relative paths are resolved against the config file's directory.
struct RunConfig {
  std::uint64_t seed = 0;
  fs::path manifest;
  BackboneConfig backbone;
  AggregationConfig aggregation;
  bool has_backbone = false;
  bool has_aggregation = false;
  PhaseConfig pretrain = default_phase_config(Phase::Pretrain);
  PhaseConfig multi_exit = default_phase_config(Phase::MultiExit);
  PhaseConfig aggregation_phase = default_phase_config(Phase::Aggregation);
};
RunConfig load_run_config(const fs::path& path);
RunConfig run_config_from_json(const nlohmann::json& j, const fs::path& base_dir);

// Slices of one split, resized to the network input size.
std::vector<LabeledImage> load_split(const DatasetManifest& m, const fs::path& manifest_path, Split split,
                                     int input_size);

struct TrainOptions {
  Phase phase = Phase::MultiExit;
  fs::path config;
  fs::path ckpt_out;
  std::optional<fs::path> resume;
};
// Runs one phase, writes the checkpoint and <ckpt_out>.metrics.csv.
Checkpoint train(const TrainOptions& o);

struct CamOptions {
  fs::path ckpt;
  Split split = Split::Test;
  MapSource mode = MapSource::Attentive;
  fs::path out;
  std::optional<fs::path> manifest;  // defaults to the one recorded in the checkpoint
};
// Returns the number of maps written.
int cam(const CamOptions& o);

struct EvalOptions {
  fs::path cams;
  fs::path manifest;
  double threshold = 0.5;
  std::optional<std::array<double, 3>> sweep;  // start, stop, step
  std::optional<fs::path> report;
  std::optional<fs::path> csv;
};
nlohmann::json eval(const EvalOptions& o);

// Parses "A:B:STEP" into the inclusive threshold list.
std::vector<double> sweep_thresholds(const std::array<double, 3>& range);

struct OverlayOptions {
  fs::path cams;
  fs::path images;  // dataset directory holding the source volumes
  fs::path out;
};
int overlay(const OverlayOptions& o);

}  // namespace amecam::pipeline
