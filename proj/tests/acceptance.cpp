// Acceptance run: one PASS/FAIL line per criterion, exit status 1 if any fails.
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iterator>
#include <numbers>
#include <random>
#include <set>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "amecam/attentive_aggregation.hpp"
#include "amecam/data_pipeline.hpp"
#include "amecam/error.hpp"
#include "amecam/evaluation.hpp"
#include "amecam/log.hpp"
#include "amecam/multi_exit_net.hpp"
#include "amecam/training.hpp"

using namespace amecam;
namespace fs = std::filesystem;
using Clock = std::chrono::steady_clock;

namespace {

struct Outcome {
  bool pass = true;
  std::string detail;
};

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(const char* f, auto... args) {
  char buf[512];
  std::snprintf(buf, sizeof(buf), f, args...);
  return buf;
}

double rel_err(double a, double b) { return std::abs(a - b) / std::max({std::abs(a), std::abs(b), 1e-6}); }

// ------------------------------------------------------------------ oracles

// Overlap counts straight from the definition.
std::pair<double, double> dice_iou_oracle(const Mask& a, const Mask& b) {
  long inter = 0, sa = 0, sb = 0;
  for (std::size_t i = 0; i < a.values.size(); ++i) {
    inter += a.values[i] && b.values[i];
    sa += a.values[i] != 0;
    sb += b.values[i] != 0;
  }
  return {2.0 * inter / double(sa + sb), double(inter) / double(sa + sb - inter)};
}

// Every boundary pixel against every other: O(N^2) symmetric 95th percentile.
double hd95_oracle(const Mask& a, const Mask& b) {
  auto boundary = [](const Mask& m) {
    std::vector<std::pair<int, int>> out;
    for (int y = 0; y < m.height; ++y)
      for (int x = 0; x < m.width; ++x) {
        if (!m(y, x)) continue;
        const bool edge = y == 0 || x == 0 || y == m.height - 1 || x == m.width - 1 || !m(y - 1, x) ||
                          !m(y + 1, x) || !m(y, x - 1) || !m(y, x + 1);
        if (edge) out.emplace_back(y, x);
      }
    return out;
  };
  const auto ba = boundary(a), bb = boundary(b);
  std::vector<double> d;
  auto directed = [&](const auto& from, const auto& to) {
    for (auto [y, x] : from) {
      double best = 1e300;
      for (auto [v, u] : to) best = std::min(best, std::sqrt(double(y - v) * (y - v) + double(x - u) * (x - u)));
      d.push_back(best);
    }
  };
  directed(ba, bb);
  directed(bb, ba);
  std::sort(d.begin(), d.end());
  const double rank = 0.95 * (d.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(rank));
  const auto hi = std::min(lo + 1, d.size() - 1);
  return d[lo] + (rank - lo) * (d[hi] - d[lo]);
}

// Noise masks of random density, or filled ellipses; never empty.
Mask random_mask(std::mt19937_64& rng, int size) {
  Mask m(size, size, 0);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  if (u(rng) < 0.5) {
    const double p = 0.05 + 0.5 * u(rng);
    for (auto& v : m.values) v = u(rng) < p;
  } else {
    std::uniform_int_distribution<int> c(0, size - 1), r(1, size / 3);
    const int cy = c(rng), cx = c(rng), ry = r(rng), rx = r(rng);
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x)
        m(y, x) = double(y - cy) * (y - cy) / (ry * ry) + double(x - cx) * (x - cx) / (rx * rx) <= 1.0;
  }
  if (std::count(m.values.begin(), m.values.end(), 1) == 0) m(size / 2, size / 2) = 1;
  return m;
}

Image random_image(std::mt19937_64& rng, int size) {
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  Image img(size, size);
  for (auto& v : img.values) v = u(rng);
  return img;
}

BackboneConfig small_backbone(int size) {
  BackboneConfig c;
  c.stage_channels = {8, 16, 16, 32};
  c.input_size = size;
  c.projector_dim = 8;
  return c;
}

// ------------------------------------------------------------------ criteria

Outcome metric_oracle() {
  const auto t0 = Clock::now();
  std::mt19937_64 rng(101);
  double worst_dice = 0, worst_iou = 0;
  int hd_mismatch = 0;
  for (int i = 0; i < 200; ++i) {
    const Mask a = random_mask(rng, 32), b = random_mask(rng, 32);
    const auto [d, j] = dice_iou_oracle(a, b);
    worst_dice = std::max(worst_dice, std::abs(dice(a, b) - d));
    worst_iou = std::max(worst_iou, std::abs(iou(a, b) - j));
    hd_mismatch += hd95(a, b) != hd95_oracle(a, b);
  }
  const double t = seconds_since(t0);
  return {worst_dice <= 1e-12 && worst_iou <= 1e-12 && hd_mismatch == 0 && t < 10.0,
          fmt("max|dDice| %.1e, max|dIoU| %.1e, hd95 mismatches %d, %.2f s", worst_dice, worst_iou, hd_mismatch, t)};
}

Outcome dice_iou_identity() {
  std::mt19937_64 rng(202);
  double worst = 0;
  for (int i = 0; i < 200; ++i) {
    const Mask a = random_mask(rng, 32), b = random_mask(rng, 32);
    const double j = iou(a, b);
    worst = std::max(worst, std::abs(dice(a, b) - 2 * j / (1 + j)));
  }
  return {worst <= 1e-12, fmt("max |Dice - 2J/(1+J)| = %.1e over 200 pairs", worst)};
}

Outcome hd95_anchors() {
  std::mt19937_64 rng(303);
  const Mask m = random_mask(rng, 32);
  Mask p(8, 8, 0), q(8, 8, 0);
  p(0, 0) = 1;
  q(3, 4) = 1;
  const double same = hd95(m, m), single = hd95(p, q);
  return {same == 0.0 && single == 5.0, fmt("identical %.17g, single pixels %.17g", same, single)};
}

Outcome attention_convexity() {
  std::mt19937_64 rng(404);
  std::normal_distribution<float> n(0.0f, 1.0f);
  std::uniform_real_distribution<float> scale(0.1f, 30.0f);
  int bad = 0;
  double worst_sum = 0;
  for (int draw = 0; draw < 10000; ++draw) {
    Tensor logits({1, kNumExits, 3, 3});
    const float s = scale(rng);
    for (auto& v : logits.storage()) v = s * n(rng);
    const auto f = softmax_field(logits, 0);
    for (int p = 0; p < 9; ++p) {
      double sum = 0;
      for (int k = 0; k < kNumExits; ++k) {
        const float w = f.weights[k * 9 + p];
        bad += !(w >= 0.0f);
        sum += w;
      }
      worst_sum = std::max(worst_sum, std::abs(sum - 1.0));
    }
  }

  // Endpoints on CAMs from a real network.
  MultiExitNet net(small_backbone(64), 4);
  const Image img = random_image(rng, 64);
  const auto cams = extract_exit_cams(forward_multi_exit(img, net), net, 1);
  bool onehot_exact = true;
  for (int k = 0; k < kNumExits; ++k) {
    AttentionField field(kNumExits, 64, 64, 0.0f);
    std::fill_n(field.weights.begin() + static_cast<long>(k) * 64 * 64, 64 * 64, 1.0f);
    onehot_exact &= convex_combination(cams, field) == cams[k].values;
    onehot_exact &= attentive_aggregate(cams, field).values == minmax_normalize(cams[k].values);
  }
  AttentionNet att(kNumExits, 8, 5);
  const auto uniform = attention_forward(img, cams, att);
  const bool all_quarter = std::all_of(uniform.weights.begin(), uniform.weights.end(), [](float w) { return w == 0.25f; });
  const bool avg_exact = attentive_aggregate(cams, uniform).values == average_aggregate(cams).values;
  return {bad == 0 && worst_sum <= 1e-6 && onehot_exact && all_quarter && avg_exact,
          fmt("negative weights %d, max|sum-1| %.1e, one-hot exact %s, uniform init %s, uniform == Avg. ME %s", bad,
              worst_sum, onehot_exact ? "yes" : "no", all_quarter ? "yes" : "no", avg_exact ? "yes" : "no")};
}

std::vector<double> gaussian_vec(std::mt19937_64& rng, int d) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(d);
  for (auto& x : v) x = n(rng);
  return v;
}

Outcome finite_differences() {
  const double h = 1e-4;
  std::mt19937_64 rng(505);
  double worst_c2am = 0, worst_supcon = 0, worst_ce = 0;

  for (int trial = 0; trial < 20; ++trial) {
    const int b = 2 + trial % 4, d = 3 + trial % 5;
    std::vector<FgBgEmbedding> batch(b);
    for (auto& e : batch) {
      e.fg = gaussian_vec(rng, d);
      e.bg = gaussian_vec(rng, d);
    }
    C2amGradients g;
    c2am_loss(batch, 1e-6, &g);
    for (int i = 0; i < b; ++i)
      for (int which = 0; which < 2; ++which)
        for (int c = 0; c < d; ++c) {
          auto& v = which ? batch[i].bg : batch[i].fg;
          const double keep = v[c];
          v[c] = keep + h;
          const double up = c2am_loss(batch, 1e-6);
          v[c] = keep - h;
          const double down = c2am_loss(batch, 1e-6);
          v[c] = keep;
          worst_c2am = std::max(worst_c2am, rel_err(which ? g.bg[i][c] : g.fg[i][c], (up - down) / (2 * h)));
        }
  }

  for (int trial = 0; trial < 20; ++trial) {
    const int n = 4 + 2 * (trial % 3), d = 3 + trial % 4;
    std::vector<std::vector<double>> z;
    std::vector<int> y;
    for (int i = 0; i < n; ++i) {
      auto v = gaussian_vec(rng, d);
      double s = 0;
      for (double x : v) s += x * x;
      for (auto& x : v) x /= std::sqrt(s);
      z.push_back(v);
      y.push_back(i % 2);
    }
    std::vector<std::vector<double>> g;
    detail::supcon_loss_unchecked(z, y, 0.5, &g);
    for (int i = 0; i < n; ++i)
      for (int c = 0; c < d; ++c) {
        const double keep = z[i][c];
        z[i][c] = keep + h;
        const double up = detail::supcon_loss_unchecked(z, y, 0.5, nullptr);
        z[i][c] = keep - h;
        const double down = detail::supcon_loss_unchecked(z, y, 0.5, nullptr);
        z[i][c] = keep;
        worst_supcon = std::max(worst_supcon, rel_err(g[i][c], (up - down) / (2 * h)));
      }
  }

  std::normal_distribution<double> wide(0.0, 3.0);
  for (int trial = 0; trial < 20; ++trial) {
    std::array<std::vector<double>, kNumExits> logits;
    for (auto& v : logits) v = {wide(rng), wide(rng)};
    const int label = trial % 2;
    ExitLogitGrads g;
    multi_exit_ce_loss(logits, label, &g);
    for (int k = 0; k < kNumExits; ++k)
      for (int c = 0; c < 2; ++c) {
        const double keep = logits[k][c];
        logits[k][c] = keep + h;
        const double up = multi_exit_ce_loss(logits, label);
        logits[k][c] = keep - h;
        const double down = multi_exit_ce_loss(logits, label);
        logits[k][c] = keep;
        worst_ce = std::max(worst_ce, rel_err(g.grads[k][c], (up - down) / (2 * h)));
      }
  }
  return {worst_c2am < 1e-4 && worst_supcon < 1e-4 && worst_ce < 1e-4,
          fmt("max relative error: c2am %.1e, supcon %.1e, multi-exit CE %.1e (20 instances each)", worst_c2am,
              worst_supcon, worst_ce)};
}

Outcome loss_anchors() {
  std::array<std::vector<double>, kNumExits> zero;
  for (auto& v : zero) v = {0.0, 0.0};
  const double ce = multi_exit_ce_loss(zero, 1);
  const std::vector<std::vector<double>> same(3, {1.0, 0.0, 0.0});
  const double sc = supcon_loss(same, {0, 0, 0}, 0.07);
  const double eps = 1e-6;
  const FgBgEmbedding e{{1.0, 0.0}, {0.0, 1.0}, 1.0, 1.0, false};
  const double c2 = c2am_loss({e, e}, eps);
  const double dce = std::abs(ce - 4 * std::log(2.0)), dsc = std::abs(sc - 3 * std::log(2.0)),
               dc2 = std::abs(c2 + std::log(0.5 + eps));
  return {dce <= 1e-9 && dsc <= 1e-6 && dc2 <= 1e-6,
          fmt("|CE - 4ln2| %.1e, |SupCon - 3ln2| %.1e, |c2am + log(0.5+eps)| %.1e", dce, dsc, dc2)};
}

Outcome gradcam_equivalence() {
  double worst = 0;
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    MultiExitNet net(small_backbone(128), 700 + seed);
    std::mt19937_64 rng(seed);
    const Image img = random_image(rng, 128);
    const auto gc = grad_cam_reference(img, net, 1);
    const auto cam = compute_exit_cam(forward_multi_exit(img, net).features[3], net.head(4), 1);
    if (!gc.values.same_shape(cam.values)) return {false, "shape mismatch"};
    for (std::size_t i = 0; i < cam.values.size(); ++i)
      worst = std::max(worst, double(std::abs(gc.values.values[i] - cam.values.values[i])));
  }
  return {worst <= 1e-5, fmt("max |Grad-CAM - exit-4 CAM| = %.1e over 10 models", worst)};
}

Outcome resolution_ladder() {
  const auto backbone = small_backbone(128);
  AggregationConfig agg;
  agg.attention_hidden = 8;
  agg.projector_dim = 8;
  AmeCamModel model(backbone, agg, 9);
  std::mt19937_64 rng(808);
  const Image img = random_image(rng, 128);
  const auto out = forward_multi_exit(img, model.net);
  bool ok = true;
  std::string sizes;
  const int expect[] = {32, 16, 8, 4};
  for (int k = 0; k < kNumExits; ++k) {
    ok &= out.features[k].dim(1) == expect[k] && out.features[k].dim(2) == expect[k];
    sizes += std::to_string(out.features[k].dim(1)) + (k + 1 < kNumExits ? "/" : "");
  }
  for (MapSource s : {MapSource::Exit1, MapSource::Exit2, MapSource::Exit3, MapSource::Exit4, MapSource::Averaged,
                      MapSource::Attentive, MapSource::GradCam}) {
    const auto m = compute_map(model, img, s);
    ok &= m.values.height == 128 && m.values.width == 128;
  }
  const auto cams = extract_exit_cams(out, model.net, 1);
  bool corners = true;
  for (int k = 0; k < kNumExits; ++k) {
    const auto native = compute_exit_cam(out.features[k], model.net.head(k + 1), 1).values;
    const int n = native.height - 1;
    corners &= cams[k].values(0, 0) == native(0, 0) && cams[k].values(0, 127) == native(0, n) &&
               cams[k].values(127, 0) == native(n, 0) && cams[k].values(127, 127) == native(n, n);
  }
  return {ok && corners, "exits " + sizes + ", exported maps 128x128: " + (ok ? "yes" : "no") +
                             ", corners bit-exact: " + (corners ? "yes" : "no")};
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return {std::istreambuf_iterator<char>(in), {}};
}

int run_cli(const std::string& args) {
  const std::string cmd = std::string(AMECAM_CLI) + " -q " + args;
  const int status = std::system(cmd.c_str());
  return WIFEXITED(status) ? WEXITSTATUS(status) : -1;
}

Outcome cli_determinism() {
  const fs::path root = fs::temp_directory_path() / "amecam_acceptance_cli";
  fs::remove_all(root);
  const nlohmann::json cfg = {
      {"seed", 11},
      {"manifest", "manifest.json"},
      {"backbone", {{"stage_channels", {4, 8, 8, 16}}, {"input_size", 32}, {"projector_dim", 8}}},
      {"aggregation", {{"attention_hidden", 4}, {"projector_dim", 4}}},
      {"phases",
       {{"pretrain", {{"epochs", 1}, {"batch_size", 8}}},
        {"multi_exit", {{"epochs", 2}, {"batch_size", 8}, {"lr_init", 1e-3}}},
        {"aggregation", {{"epochs", 2}, {"batch_size", 8}, {"lr_init", 1e-2}}}}}};
  std::vector<std::string> reports;
  for (const char* run : {"a", "b"}) {
    const fs::path dir = root / run;
    fs::create_directories(dir);
    std::ofstream(dir / "run.json") << cfg.dump(2);
    const std::string d = dir.string();
    const int rc = run_cli("synth --cases 10 --dims 8,32,32 --tumor-frac 1.0 --seed 4 --out " + d + "/data") |
                   run_cli("manifest --data " + d + "/data --seed 2 --out " + d + "/manifest.json") |
                   run_cli("pretrain --config " + d + "/run.json --ckpt-out " + d + "/pre.ckpt") |
                   run_cli("train-classifier --config " + d + "/run.json --resume " + d + "/pre.ckpt --ckpt-out " +
                           d + "/cls.ckpt") |
                   run_cli("train-aggregator --config " + d + "/run.json --resume " + d + "/cls.ckpt --ckpt-out " +
                           d + "/agg.ckpt") |
                   run_cli("cam --ckpt " + d + "/agg.ckpt --split test --mode attentive --out " + d + "/cams") |
                   run_cli("eval --cams " + d + "/cams --manifest " + d + "/manifest.json --report " + d +
                           "/report.json >/dev/null");
    if (rc != 0) {
      fs::remove_all(root);
      return {false, std::string("pipeline run ") + run + " failed"};
    }
    reports.push_back(slurp(dir / "report.json"));
  }
  fs::remove_all(root);
  const bool same = !reports[0].empty() && reports[0] == reports[1];
  return {same, fmt("report.json %zu vs %zu bytes, identical: %s", reports[0].size(), reports[1].size(),
                    same ? "yes" : "no")};
}

std::vector<LabeledImage> labeled_split(const std::vector<VolumeRecord>& vols, const DatasetManifest& m, Split s) {
  std::vector<LabeledImage> out;
  std::set<std::string> cases;
  for (const auto& e : m.split_entries(s)) cases.insert(e.case_id);
  for (const auto& v : vols) {
    if (!cases.count(v.case_id)) continue;
    for (auto& sl : slice_volume(v)) out.push_back({sl.case_id, sl.z_index, sl.image, sl.label, sl.gt_mask});
  }
  return out;
}

double mean_dice(AmeCamModel& model, const std::vector<LabeledImage>& test, MapSource source) {
  std::vector<CamRecord> maps;
  std::vector<std::optional<Mask>> gts;
  for (const auto& t : test) {
    maps.push_back({t.case_id, t.z_index, compute_map(model, t.image, source)});
    gts.push_back(t.gt_mask);
  }
  return evaluate_maps(maps, gts, 0.5).dice.mean.value_or(0.0);
}

Outcome synthetic_run() {
  const auto t0 = Clock::now();
  const int size = 128;
  const auto vols = generate_synthetic(64, 12, size, size, 0.7, 17);
  const auto manifest = build_manifest(vols, {0.7, 0.15, 0.15}, 17);
  TrainingData data;
  data.train = labeled_split(vols, manifest, Split::Train);
  data.val = labeled_split(vols, manifest, Split::Val);
  const auto test = labeled_split(vols, manifest, Split::Test);
  const std::size_t total = data.train.size() + data.val.size() + test.size();

  BackboneConfig backbone;
  backbone.stage_channels = {16, 32, 64, 128};
  backbone.input_size = size;
  backbone.projector_dim = 32;
  const AggregationConfig agg;  // defaults: fixed exit-1 features

  auto cls_cfg = default_phase_config(Phase::MultiExit);
  cls_cfg.epochs = 20;
  cls_cfg.batch_size = 16;
  cls_cfg.lr_init = 3e-3;
  cls_cfg.seed = 7;
  auto agg_cfg = default_phase_config(Phase::Aggregation);
  agg_cfg.epochs = 10;
  agg_cfg.batch_size = 16;
  agg_cfg.lr_init = 1e-2;
  agg_cfg.seed = 7;

  const auto cls = run_multi_exit_phase(cls_cfg, data, initial_checkpoint(backbone, agg, 7));
  int epochs = 0;
  for (const auto& e : metrics_trail(cls)) epochs += e.phase == Phase::MultiExit;
  AmeCamModel classifier(cls);
  const auto acc = exit_accuracy(classifier.net, data.val);
  const auto trained = run_aggregation_phase(agg_cfg, data, cls);
  AmeCamModel model(trained);
  const double att = mean_dice(model, test, MapSource::Attentive);
  const double avg = mean_dice(model, test, MapSource::Averaged);
  const double t = seconds_since(t0);

  const bool acc_ok = *std::min_element(acc.begin(), acc.end()) >= 0.9;
  const bool ok = total >= 500 && epochs <= 20 && acc_ok && att >= 0.5 && att >= avg && t < 1800.0;
  return {ok, fmt("%zu slices at %d px, %d classifier epochs, val acc %.3f/%.3f/%.3f/%.3f, held-out Dice@0.5 "
                  "attentive %.3f vs Avg. ME %.3f, %.0f s",
                  total, size, epochs, acc[0], acc[1], acc[2], acc[3], att, avg, t)};
}

Outcome frozen_backbone() {
  auto backbone = small_backbone(32);
  AggregationConfig agg;
  agg.attention_hidden = 4;
  agg.projector_dim = 4;
  TrainingData data;
  const auto vols = generate_synthetic(6, 8, 32, 32, 0.8, 3);
  for (const auto& v : vols)
    for (auto& s : slice_volume(v)) data.train.push_back({s.case_id, s.z_index, s.image, s.label, s.gt_mask});
  data.val = data.train;
  auto cls_cfg = default_phase_config(Phase::MultiExit);
  cls_cfg.epochs = 1;
  cls_cfg.batch_size = 8;
  const auto cls = run_multi_exit_phase(cls_cfg, data, initial_checkpoint(backbone, agg, 1));
  auto agg_cfg = default_phase_config(Phase::Aggregation);
  agg_cfg.epochs = 2;
  agg_cfg.batch_size = 4;
  agg_cfg.lr_init = 0.1;
  const auto out = run_aggregation_phase(agg_cfg, data, cls);
  const auto before = out.metadata.at("backbone_hash_before"), after = out.metadata.at("backbone_hash_after");
  int backbone_changed = 0, agg_changed = 0;
  for (const auto& [name, t] : cls.params) {
    const bool agg_param = name.rfind("attention.", 0) == 0 || name.rfind("fg_projector.", 0) == 0 ||
                           name.rfind("ce_head.", 0) == 0;
    (agg_param ? agg_changed : backbone_changed) += out.params.at(name) != t;
  }
  return {before == after && backbone_changed == 0 && agg_changed > 0,
          fmt("hash before %s after %s, backbone tensors changed %d, aggregation tensors changed %d",
              before.dump().c_str(), after.dump().c_str(), backbone_changed, agg_changed)};
}

Outcome cosine_anchors() {
  const double a = cosine_lr(0, 10, 1e-4, 5e-6), b = cosine_lr(10, 10, 1e-4, 5e-6), c = cosine_lr(5, 10, 1e-4, 5e-6);
  bool mono = true;
  for (int t = 1; t <= 1000; ++t) mono &= cosine_lr(t, 1000, 1e-4, 5e-6) <= cosine_lr(t - 1, 1000, 1e-4, 5e-6);
  const bool ok = std::abs(a - 1e-4) <= 1e-16 && std::abs(b - 5e-6) <= 1e-16 && std::abs(c - 5.25e-5) <= 1e-16 && mono;
  return {ok, fmt("lr(0) %.6g, lr(T) %.6g, lr(T/2) %.6g, monotone %s", a, b, c, mono ? "yes" : "no")};
}

}  // namespace

// Optional arguments select criteria by number; the default runs all of them.
int main(int argc, char** argv) {
  set_log_level(LogLevel::Warn);
  std::set<std::size_t> only;
  for (int i = 1; i < argc; ++i) only.insert(std::stoul(argv[i]));
  const std::vector<std::pair<const char*, std::function<Outcome()>>> criteria = {
      {"metric oracle", metric_oracle},
      {"dice/iou identity", dice_iou_identity},
      {"hd95 anchors", hd95_anchors},
      {"attention convexity and endpoints", attention_convexity},
      {"finite-difference gradients", finite_differences},
      {"loss anchors", loss_anchors},
      {"grad-cam equivalence", gradcam_equivalence},
      {"resolution ladder", resolution_ladder},
      {"cli determinism", cli_determinism},
      {"synthetic end-to-end run", synthetic_run},
      {"frozen backbone", frozen_backbone},
      {"cosine schedule anchors", cosine_anchors},
  };
  int failed = 0, run = 0;
  for (std::size_t i = 0; i < criteria.size(); ++i) {
    if (!only.empty() && !only.count(i + 1)) continue;
    ++run;
    Outcome o;
    try {
      o = criteria[i].second();
    } catch (const std::exception& e) {
      o = {false, std::string("threw: ") + e.what()};
    }
    failed += !o.pass;
    std::printf("%s %2zu %s: %s\n", o.pass ? "PASS" : "FAIL", i + 1, criteria[i].first, o.detail.c_str());
    std::fflush(stdout);
  }
  std::printf("%d/%d criteria passed\n", run - failed, run);
  return failed == 0 ? 0 : 1;
}
