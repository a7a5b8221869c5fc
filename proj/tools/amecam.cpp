// amecam: synthetic data, training phases, CAM export, evaluation, overlays.
#include <cstdio>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "amecam/error.hpp"
#include "amecam/log.hpp"
#include "amecam/pipeline.hpp"

namespace {

using namespace amecam;
namespace pl = amecam::pipeline;

template <std::size_t N>
std::array<double, N> parse_list(const std::string& text, char sep, const char* what) {
  std::array<double, N> out{};
  std::stringstream ss(text);
  std::string item;
  std::size_t i = 0;
  while (std::getline(ss, item, sep)) {
    if (i == N) break;
    try {
      std::size_t used = 0;
      out[i] = std::stod(item, &used);
      if (used != item.size()) throw std::invalid_argument(item);
    } catch (const std::exception&) {
      throw CLI::ValidationError(what, "cannot parse '" + text + "'");
    }
    ++i;
  }
  if (i != N || std::getline(ss, item, sep)) {
    throw CLI::ValidationError(what, "expected " + std::to_string(N) + " values, got '" + text + "'");
  }
  return out;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"AME-CAM: multi-exit class activation maps with attentive aggregation"};
  app.require_subcommand(1);
  bool quiet = false;
  app.add_flag("-q,--quiet", quiet, "Only print warnings");

  // synth
  pl::SynthOptions synth;
  std::string synth_dims = "16,64,64";
  auto* c_synth = app.add_subcommand("synth", "Generate synthetic phantom volumes");
  c_synth->add_option("--cases", synth.cases, "Number of cases")->check(CLI::PositiveNumber);
  c_synth->add_option("--dims", synth_dims, "Volume size D,H,W");
  c_synth->add_option("--tumor-frac", synth.tumor_fraction, "Fraction of cases with a tumor")
      ->check(CLI::Range(0.0, 1.0));
  c_synth->add_option("--seed", synth.seed, "Random seed");
  c_synth->add_option("--out", synth.out, "Output directory")->required();

  // manifest
  pl::ManifestOptions man;
  std::string ratios = "0.8,0.1,0.1";
  std::string modality;
  auto* c_man = app.add_subcommand("manifest", "Split a dataset directory by case");
  c_man->add_option("--data", man.data, "Dataset directory")->required();
  c_man->add_option("--ratios", ratios, "Train,val,test ratios");
  c_man->add_option("--seed", man.seed, "Split seed");
  c_man->add_option("--modality", modality, "Restrict to one modality (t1, t1ce, t2, t2flair, synth)");
  c_man->add_option("--out", man.out, "Manifest JSON path")->required();

  // training phases
  pl::TrainOptions train;
  std::string resume;
  std::vector<std::pair<CLI::App*, Phase>> train_cmds;
  for (auto [name, phase, help] : {std::tuple{"pretrain", Phase::Pretrain, "Supervised contrastive pretraining"},
                                   std::tuple{"train-classifier", Phase::MultiExit, "Multi-exit classifier training"},
                                   std::tuple{"train-aggregator", Phase::Aggregation, "Attentive aggregation training"}}) {
    auto* c = app.add_subcommand(name, help);
    c->add_option("--config", train.config, "Run configuration (JSON)")->required()->check(CLI::ExistingFile);
    c->add_option("--ckpt-out", train.ckpt_out, "Checkpoint to write")->required();
    c->add_option("--resume", resume, "Checkpoint to start from")->check(CLI::ExistingFile);
    train_cmds.emplace_back(c, phase);
  }

  // cam
  pl::CamOptions cam;
  std::string split = "test", mode = "attentive", cam_manifest;
  auto* c_cam = app.add_subcommand("cam", "Export activation maps for a split");
  c_cam->add_option("--ckpt", cam.ckpt, "Checkpoint")->required()->check(CLI::ExistingFile);
  c_cam->add_option("--split", split, "train, val or test");
  c_cam->add_option("--mode", mode, "exit1..exit4, avg, attentive or gradcam");
  c_cam->add_option("--manifest", cam_manifest, "Override the manifest recorded in the checkpoint");
  c_cam->add_option("--out", cam.out, "Output directory")->required();

  // eval
  pl::EvalOptions ev;
  std::string sweep, report, csv;
  auto* c_eval = app.add_subcommand("eval", "Score exported maps against ground truth");
  c_eval->add_option("--cams", ev.cams, "Map directory")->required();
  c_eval->add_option("--manifest", ev.manifest, "Manifest JSON")->required()->check(CLI::ExistingFile);
  c_eval->add_option("--threshold", ev.threshold, "Binarization threshold in (0,1)");
  c_eval->add_option("--threshold-sweep", sweep, "Also sweep thresholds A:B:STEP");
  c_eval->add_option("--report", report, "Report JSON path");
  c_eval->add_option("--csv", csv, "Per-sample CSV path");

  // overlay
  pl::OverlayOptions ov;
  auto* c_ov = app.add_subcommand("overlay", "Render map overlays as PNG");
  c_ov->add_option("--cams", ov.cams, "Map directory")->required();
  c_ov->add_option("--images", ov.images, "Dataset directory with the source volumes")->required();
  c_ov->add_option("--out", ov.out, "Output directory")->required();

  CLI11_PARSE(app, argc, argv);
  if (quiet) set_log_level(LogLevel::Warn);

  try {
    if (c_synth->parsed()) {
      const auto d = parse_list<3>(synth_dims, ',', "--dims");
      for (int i = 0; i < 3; ++i) synth.dims[i] = static_cast<int>(d[i]);
      pl::synth(synth);
    } else if (c_man->parsed()) {
      man.ratios = parse_list<3>(ratios, ',', "--ratios");
      if (!modality.empty()) man.modality = modality_from_string(modality);
      pl::manifest(man);
    } else if (c_cam->parsed()) {
      cam.split = split_from_string(split);
      cam.mode = map_source_from_string(mode);
      if (!cam_manifest.empty()) cam.manifest = cam_manifest;
      pl::cam(cam);
    } else if (c_eval->parsed()) {
      if (!sweep.empty()) ev.sweep = parse_list<3>(sweep, ':', "--threshold-sweep");
      if (!report.empty()) ev.report = report;
      if (!csv.empty()) ev.csv = csv;
      const auto out = pl::eval(ev);
      const auto& s = out.at("summary");
      auto fmt = [](const nlohmann::json& m) {
        if (m.at("mean").is_null()) return std::string("n/a");
        char buf[64];
        std::snprintf(buf, sizeof(buf), "%.3f +- %.3f", m.at("mean").get<double>(), m.at("std").get<double>());
        return std::string(buf);
      };
      std::printf("dice %s  iou %s  hd95 %s  (n=%d, skipped %d)\n", fmt(s.at("dice")).c_str(),
                  fmt(s.at("iou")).c_str(), fmt(s.at("hd95")).c_str(), out.at("n_evaluated").get<int>(),
                  out.at("n_skipped").get<int>());
    } else if (c_ov->parsed()) {
      pl::overlay(ov);
    } else {
      for (auto& [cmd, phase] : train_cmds) {
        if (!cmd->parsed()) continue;
        train.phase = phase;
        if (!resume.empty()) train.resume = resume;
        pl::train(train);
      }
    }
  } catch (const CLI::Error& e) {
    return app.exit(e);
  } catch (const Error& e) {
    std::fprintf(stderr, "amecam: %s\n", e.what());
    return 2;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "amecam: unexpected failure: %s\n", e.what());
    return 3;
  }
  return 0;
}
