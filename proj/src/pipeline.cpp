#include "amecam/pipeline.hpp"

#include <cmath>
#include <fstream>
#include <map>
#include <set>
#include <utility>

#include "amecam/error.hpp"
#include "amecam/log.hpp"

namespace amecam::pipeline {

using json = nlohmann::json;

namespace {

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw Error(ErrorCode::MissingFile, path.string());
  try {
    return json::parse(in);
  } catch (const json::exception& ex) {
    throw Error(ErrorCode::BadConfig, path.string() + ": " + ex.what());
  }
}

void write_text(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) {
    std::error_code ec;
    fs::create_directories(path.parent_path(), ec);
  }
  std::ofstream out(path, std::ios::binary);
  if (!out) throw Error(ErrorCode::UnwritablePath, path.string());
  out << text;
  if (!out) throw Error(ErrorCode::UnwritablePath, path.string());
}

void ensure_dir(const fs::path& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (!fs::is_directory(dir)) throw Error(ErrorCode::UnwritablePath, dir.string());
}

fs::path resolve(const fs::path& p, const fs::path& base) { return p.is_absolute() ? p : base / p; }

fs::path data_dir_of(const DatasetManifest& m, const fs::path& manifest_path) {
  if (m.data_dir.empty()) throw Error(ErrorCode::BadConfig, "manifest has no data_dir");
  return resolve(m.data_dir, fs::absolute(manifest_path).parent_path());
}

using SliceKey = std::pair<std::string, int>;

// Slices of the listed volumes, keyed by (case, z).
std::map<SliceKey, SliceSample> load_slices(const fs::path& data_dir, const std::set<std::string>& cases) {
  std::map<SliceKey, SliceSample> out;
  for (auto& vol : load_dataset_dir(data_dir)) {
    if (!cases.count(vol.case_id)) continue;
    for (auto& s : slice_volume(vol)) out.emplace(SliceKey{s.case_id, s.z_index}, std::move(s));
  }
  return out;
}

Image fit(const Image& img, int h, int w) {
  return img.height == h && img.width == w ? img : resize_bilinear(img, h, w);
}

Mask fit(const Mask& m, int h, int w) { return m.height == h && m.width == w ? m : resize_nearest(m, h, w); }

PhaseConfig phase_from(const json& phases, const char* key, Phase phase, std::uint64_t seed) {
  json j = phases.contains(key) ? phases.at(key) : json::object();
  if (!j.contains("seed")) j["seed"] = seed;
  return phase_config_from_json(j, phase);
}

}  // namespace

// ------------------------------------------------------------------ synth

void synth(const SynthOptions& o) {
  ensure_dir(o.out);
  const auto cases = generate_synthetic(o.cases, o.dims[0], o.dims[1], o.dims[2], o.tumor_fraction, o.seed);
  for (const auto& c : cases) save_volume_raw(c, o.out);
  log_info("wrote " + std::to_string(cases.size()) + " synthetic cases to " + o.out.string());
}

DatasetManifest manifest(const ManifestOptions& o) {
  const auto cases = load_dataset_dir(o.data, o.modality);
  auto m = build_manifest(cases, o.ratios, o.seed);
  // Stored relative to the manifest so the pair can be moved together.
  const fs::path out_dir = fs::absolute(o.out).parent_path();
  m.data_dir = fs::absolute(o.data).lexically_proximate(out_dir).generic_string();
  save_manifest(m, o.out);
  log_info("manifest: " + std::to_string(m.counts[0]) + "/" + std::to_string(m.counts[1]) + "/" +
           std::to_string(m.counts[2]) + " slices");
  return m;
}

// ----------------------------------------------------------------- config

RunConfig run_config_from_json(const json& j, const fs::path& base_dir) {
  RunConfig c;
  try {
    c.seed = j.value("seed", std::uint64_t{0});
    if (j.contains("manifest")) c.manifest = resolve(j.at("manifest").get<std::string>(), base_dir);
    if (j.contains("backbone")) {
      c.backbone = backbone_from_json(j.at("backbone"));
      c.has_backbone = true;
    }
    if (j.contains("aggregation")) {
      c.aggregation = aggregation_from_json(j.at("aggregation"));
      c.has_aggregation = true;
    }
    const json phases = j.value("phases", json::object());
    c.pretrain = phase_from(phases, "pretrain", Phase::Pretrain, c.seed);
    c.multi_exit = phase_from(phases, "multi_exit", Phase::MultiExit, c.seed);
    c.aggregation_phase = phase_from(phases, "aggregation", Phase::Aggregation, c.seed);
  } catch (const json::exception& ex) {
    throw Error(ErrorCode::BadConfig, ex.what());
  }
  return c;
}

RunConfig load_run_config(const fs::path& path) {
  return run_config_from_json(read_json(path), fs::absolute(path).parent_path());
}

std::vector<LabeledImage> load_split(const DatasetManifest& m, const fs::path& manifest_path, Split split,
                                     int input_size) {
  const auto entries = m.split_entries(split);
  std::set<std::string> cases;
  for (const auto& e : entries) cases.insert(e.case_id);
  auto slices = load_slices(data_dir_of(m, manifest_path), cases);
  std::vector<LabeledImage> out;
  out.reserve(entries.size());
  for (const auto& e : entries) {
    auto it = slices.find({e.case_id, e.z_index});
    if (it == slices.end()) {
      throw Error(ErrorCode::MissingFile, "slice " + e.case_id + ":" + std::to_string(e.z_index) + " not found");
    }
    LabeledImage li;
    li.case_id = e.case_id;
    li.z_index = e.z_index;
    li.image = fit(it->second.image, input_size, input_size);
    li.label = e.label;
    if (it->second.gt_mask) li.gt_mask = fit(*it->second.gt_mask, input_size, input_size);
    out.push_back(std::move(li));
  }
  return out;
}

// ------------------------------------------------------------------ train

Checkpoint train(const TrainOptions& o) {
  const RunConfig rc = load_run_config(o.config);
  if (rc.manifest.empty()) throw Error(ErrorCode::BadConfig, "config has no manifest");

  Checkpoint init;
  if (o.resume) {
    init = load_checkpoint(*o.resume);
    if (rc.has_backbone && init.metadata.contains("backbone") &&
        backbone_from_json(init.metadata.at("backbone")) != rc.backbone) {
      throw Error(ErrorCode::IncompatibleCheckpoint, "backbone config differs from the resumed checkpoint");
    }
    // The aggregation arm (loss, epsilon, freezing) may be chosen per run.
    if (rc.has_aggregation) init.metadata["aggregation"] = to_json(rc.aggregation);
  } else {
    if (o.phase == Phase::Aggregation) {
      throw Error(ErrorCode::IncompatibleCheckpoint, "train-aggregator needs --resume <classifier checkpoint>");
    }
    init = initial_checkpoint(rc.backbone, rc.aggregation, rc.seed);
  }
  const BackboneConfig backbone = backbone_from_json(init.metadata.at("backbone"));

  const DatasetManifest m = load_manifest(rc.manifest);
  TrainingData data;
  data.train = load_split(m, rc.manifest, Split::Train, backbone.input_size);
  if (o.phase == Phase::MultiExit) data.val = load_split(m, rc.manifest, Split::Val, backbone.input_size);

  Checkpoint out;
  switch (o.phase) {
    case Phase::Pretrain: out = run_pretrain_phase(rc.pretrain, data, init); break;
    case Phase::MultiExit: out = run_multi_exit_phase(rc.multi_exit, data, init); break;
    case Phase::Aggregation: out = run_aggregation_phase(rc.aggregation_phase, data, init); break;
  }
  out.metadata["manifest"] = fs::absolute(rc.manifest).lexically_normal().generic_string();
  out.metadata["seed"] = rc.seed;
  save_checkpoint(out, o.ckpt_out);
  write_text(o.ckpt_out.string() + ".metrics.csv", metrics_csv(metrics_trail(out)));
  return out;
}

// -------------------------------------------------------------------- cam

int cam(const CamOptions& o) {
  const Checkpoint ckpt = load_checkpoint(o.ckpt);
  AmeCamModel model(ckpt);
  fs::path manifest_path;
  if (o.manifest) {
    manifest_path = *o.manifest;
  } else if (ckpt.metadata.contains("manifest")) {
    manifest_path = ckpt.metadata.at("manifest").get<std::string>();
  } else {
    throw Error(ErrorCode::BadConfig, "checkpoint records no manifest; pass --manifest");
  }
  const DatasetManifest m = load_manifest(manifest_path);
  const auto slices = load_split(m, manifest_path, o.split, model.backbone.input_size);
  ensure_dir(o.out);
  for (const auto& s : slices) {
    save_cam({s.case_id, s.z_index, compute_map(model, s.image, o.mode)}, o.out.string());
  }
  log_info("wrote " + std::to_string(slices.size()) + " " + to_string(o.mode) + " maps to " + o.out.string());
  return static_cast<int>(slices.size());
}

// ------------------------------------------------------------------- eval

std::vector<double> sweep_thresholds(const std::array<double, 3>& range) {
  const auto [start, stop, step] = range;
  if (!(step > 0.0) || stop < start) throw Error(ErrorCode::BadThreshold, "sweep needs start <= stop and step > 0");
  const int n = static_cast<int>(std::floor((stop - start) / step + 1e-9)) + 1;
  std::vector<double> out;
  for (int i = 0; i < n; ++i) {
    const double t = start + i * step;
    if (!(t > 0.0 && t < 1.0)) throw Error(ErrorCode::BadThreshold, "sweep threshold outside (0,1)");
    out.push_back(t);
  }
  return out;
}

json eval(const EvalOptions& o) {
  const auto maps = load_cam_dir(o.cams.string());
  if (maps.empty()) throw Error(ErrorCode::NoEvaluableSamples, "no maps in " + o.cams.string());
  const DatasetManifest m = load_manifest(o.manifest);
  std::set<std::string> cases;
  for (const auto& r : maps) cases.insert(r.case_id);
  const auto slices = load_slices(data_dir_of(m, o.manifest), cases);

  std::vector<std::optional<Mask>> gts;
  for (const auto& r : maps) {
    auto it = slices.find({r.case_id, r.z_index});
    if (it == slices.end() || !it->second.gt_mask) {
      gts.emplace_back();
      continue;
    }
    gts.push_back(fit(*it->second.gt_mask, r.map.values.height, r.map.values.width));
  }

  json echo = {{"threshold", o.threshold},
               {"source", to_string(maps.front().map.source)},
               {"n_maps", maps.size()}};
  const auto report = evaluate_maps(maps, gts, o.threshold);
  json out = report_to_json(report, echo);

  if (o.sweep) {
    json rows = json::array();
    double best_t = 0.0, best_d = -1.0;
    for (double t : sweep_thresholds(*o.sweep)) {
      const auto r = evaluate_maps(maps, gts, t);
      const double d = r.dice.mean.value_or(0.0);
      rows.push_back({{"threshold", t}, {"dice_mean", d}, {"n_evaluated", r.n_evaluated}});
      if (d > best_d) {
        best_d = d;
        best_t = t;
      }
    }
    out["threshold_sweep"] = {{"per_threshold", rows}, {"best_threshold", best_t}, {"best_dice", best_d}};
  }

  if (o.report) write_text(*o.report, out.dump(2) + "\n");
  if (o.csv) write_text(*o.csv, report_to_csv(report));
  return out;
}

// ---------------------------------------------------------------- overlay

int overlay(const OverlayOptions& o) {
  const auto maps = load_cam_dir(o.cams.string());
  std::set<std::string> cases;
  for (const auto& r : maps) cases.insert(r.case_id);
  const auto slices = load_slices(o.images, cases);
  ensure_dir(o.out);
  int written = 0;
  for (const auto& r : maps) {
    auto it = slices.find({r.case_id, r.z_index});
    if (it == slices.end()) {
      log_warn("no source slice for " + cam_stem(r.case_id, r.z_index));
      continue;
    }
    const int h = r.map.values.height, w = r.map.values.width;
    const std::string stem = cam_stem(r.case_id, r.z_index);
    const Image image = fit(it->second.image, h, w);
    render_overlay(image, r.map, o.out / (stem + ".png"));
    if (it->second.gt_mask) render_overlay(image, fit(*it->second.gt_mask, h, w), o.out / (stem + "_gt.png"));
    ++written;
  }
  return written;
}

}  // namespace amecam::pipeline
