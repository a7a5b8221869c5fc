#include "amecam/cam_extractor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "amecam/error.hpp"

namespace amecam {

namespace fs = std::filesystem;

std::string to_string(MapSource s) {
  switch (s) {
    case MapSource::Exit1: return "exit1";
    case MapSource::Exit2: return "exit2";
    case MapSource::Exit3: return "exit3";
    case MapSource::Exit4: return "exit4";
    case MapSource::Averaged: return "avg";
    case MapSource::Attentive: return "attentive";
    case MapSource::GradCam: return "gradcam";
  }
  return "avg";
}

MapSource map_source_from_string(const std::string& s) {
  for (auto src : {MapSource::Exit1, MapSource::Exit2, MapSource::Exit3, MapSource::Exit4, MapSource::Averaged,
                   MapSource::Attentive, MapSource::GradCam}) {
    if (to_string(src) == s) return src;
  }
  if (s == "averaged") return MapSource::Averaged;
  throw Error(ErrorCode::BadConfig, "unknown map source '" + s + "'");
}

MapSource exit_source(int k) {
  if (k < 1 || k > kNumExits) throw Error(ErrorCode::BadConfig, "exit index out of range");
  return static_cast<MapSource>(k - 1);
}

Image minmax_normalize(const Image& m) {
  if (!std::all_of(m.values.begin(), m.values.end(), [](float v) { return std::isfinite(v); })) {
    throw Error(ErrorCode::NonFiniteInput, "minmax_normalize input contains NaN/Inf");
  }
  Image out(m.height, m.width, 0.0f);
  if (m.values.empty()) return out;
  const auto [lo, hi] = std::minmax_element(m.values.begin(), m.values.end());
  const double min = *lo, range = static_cast<double>(*hi) - *lo;
  if (!(range > 0.0)) return out;
  for (std::size_t i = 0; i < m.size(); ++i) {
    out.values[i] = static_cast<float>(std::clamp((m.values[i] - min) / range, 0.0, 1.0));
  }
  return out;
}

ActivationMap compute_exit_cam(const Tensor& features, const ExitHead& head, int target_class) {
  if (features.rank() != 3) throw Error(ErrorCode::ShapeMismatch, "features must be [C,H,W]");
  const int c = features.dim(0), h = features.dim(1), w = features.dim(2);
  if (c != head.channels()) {
    throw Error(ErrorCode::ChannelMismatch,
                "features have " + std::to_string(c) + " channels, head expects " + std::to_string(head.channels()));
  }
  if (target_class < 0 || target_class >= head.num_classes()) {
    throw Error(ErrorCode::BadConfig, "target_class out of range");
  }
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  std::vector<double> raw(plane, 0.0);
  for (int ch = 0; ch < c; ++ch) {
    const double wt = head.weight[static_cast<std::size_t>(target_class) * c + ch];
    const float* f = features.data() + ch * plane;
    for (std::size_t i = 0; i < plane; ++i) raw[i] += wt * f[i];
  }
  Image relu(h, w);
  for (std::size_t i = 0; i < plane; ++i) relu.values[i] = static_cast<float>(std::max(raw[i], 0.0));
  return {minmax_normalize(relu), exit_source(head.exit_index), {h, w}};
}

namespace {

struct Tap {
  int lo, hi;
  double frac;
};

std::vector<Tap> corner_taps(int source, int target) {
  std::vector<Tap> taps(target);
  for (int i = 0; i < target; ++i) {
    const double pos = target > 1 ? static_cast<double>(i) * (source - 1) / (target - 1) : 0.0;
    const int lo = std::min(static_cast<int>(std::floor(pos)), source - 1);
    const int hi = std::min(lo + 1, source - 1);
    taps[i] = {lo, hi, pos - lo};
  }
  return taps;
}

}  // namespace

Image upsample_map(const Image& m, int target_h, int target_w) {
  if (m.height < 1 || m.width < 1 || target_h < m.height || target_w < m.width) {
    throw Error(ErrorCode::BadTargetSize, std::to_string(m.height) + "x" + std::to_string(m.width) + " -> " +
                                              std::to_string(target_h) + "x" + std::to_string(target_w));
  }
  const auto ty = corner_taps(m.height, target_h);
  const auto tx = corner_taps(m.width, target_w);
  const bool unit_range = std::all_of(m.values.begin(), m.values.end(), [](float v) { return v >= 0.0f && v <= 1.0f; });
  Image out(target_h, target_w);
  for (int y = 0; y < target_h; ++y) {
    for (int x = 0; x < target_w; ++x) {
      const auto& a = ty[y];
      const auto& b = tx[x];
      const double top = m(a.lo, b.lo) * (1.0 - b.frac) + m(a.lo, b.hi) * b.frac;
      const double bottom = m(a.hi, b.lo) * (1.0 - b.frac) + m(a.hi, b.hi) * b.frac;
      double v = top * (1.0 - a.frac) + bottom * a.frac;
      if (unit_range) v = std::clamp(v, 0.0, 1.0);
      out(y, x) = static_cast<float>(v);
    }
  }
  return out;
}

Image upsample_map_backward(const Image& grad, int source_h, int source_w) {
  const auto ty = corner_taps(source_h, grad.height);
  const auto tx = corner_taps(source_w, grad.width);
  std::vector<double> acc(static_cast<std::size_t>(source_h) * source_w, 0.0);
  for (int y = 0; y < grad.height; ++y) {
    for (int x = 0; x < grad.width; ++x) {
      const double g = grad(y, x);
      const auto& a = ty[y];
      const auto& b = tx[x];
      acc[a.lo * source_w + b.lo] += g * (1.0 - a.frac) * (1.0 - b.frac);
      acc[a.lo * source_w + b.hi] += g * (1.0 - a.frac) * b.frac;
      acc[a.hi * source_w + b.lo] += g * a.frac * (1.0 - b.frac);
      acc[a.hi * source_w + b.hi] += g * a.frac * b.frac;
    }
  }
  Image out(source_h, source_w);
  for (std::size_t i = 0; i < acc.size(); ++i) out.values[i] = static_cast<float>(acc[i]);
  return out;
}

float sorted_sum(std::span<float> terms) {
  std::sort(terms.begin(), terms.end());
  float sum = 0.0f;
  for (float t : terms) sum += t;
  return sum;
}

ActivationMap average_aggregate(std::span<const ActivationMap> cams) {
  if (cams.empty()) throw Error(ErrorCode::EmptyList, "average_aggregate needs at least one map");
  const int h = cams[0].values.height, w = cams[0].values.width;
  for (const auto& c : cams) {
    if (c.values.height != h || c.values.width != w) throw Error(ErrorCode::MixedResolutions, "maps differ in size");
  }
  Image mean(h, w);
  const float k = static_cast<float>(cams.size());
  std::vector<float> terms(cams.size());
  for (std::size_t i = 0; i < mean.size(); ++i) {
    for (std::size_t j = 0; j < cams.size(); ++j) terms[j] = cams[j].values.values[i];
    mean.values[i] = sorted_sum(terms) / k;
  }
  return {minmax_normalize(mean), MapSource::Averaged, {h, w}};
}

std::vector<ActivationMap> extract_exit_cams(const MultiExitOutput& out, MultiExitNet& net, int target_class) {
  const int size = net.config().input_size;
  std::vector<ActivationMap> cams;
  cams.reserve(kNumExits);
  for (int k = 1; k <= kNumExits; ++k) {
    auto cam = compute_exit_cam(out.features[k - 1], net.head(k), target_class);
    cam.values = upsample_map(cam.values, size, size);
    cams.push_back(std::move(cam));
  }
  return cams;
}

ActivationMap grad_cam_reference(const Image& image, MultiExitNet& net, int target_class) {
  const Image* ptr = &image;
  auto batch = net.forward(make_batch(std::span<const Image* const>(&ptr, 1)), nn::Mode::Eval);
  const int classes = net.config().num_classes;
  if (target_class < 0 || target_class >= classes) throw Error(ErrorCode::BadConfig, "target_class out of range");
  Tensor onehot({1, classes});
  onehot[target_class] = 1.0f;
  const Tensor grad = net.exit_feature_gradient(kNumExits, onehot);
  const Tensor& f = batch.features[kNumExits - 1];
  const int c = f.dim(1), h = f.dim(2), w = f.dim(3);
  const std::size_t plane = static_cast<std::size_t>(h) * w;

  std::vector<double> raw(plane, 0.0);
  for (int ch = 0; ch < c; ++ch) {
    double alpha = 0.0;
    for (std::size_t i = 0; i < plane; ++i) alpha += grad[ch * plane + i];
    alpha /= static_cast<double>(plane);
    for (std::size_t i = 0; i < plane; ++i) raw[i] += alpha * f[ch * plane + i];
  }
  Image relu(h, w);
  for (std::size_t i = 0; i < plane; ++i) relu.values[i] = static_cast<float>(std::max(raw[i], 0.0));
  return {minmax_normalize(relu), MapSource::GradCam, {h, w}};
}

Image resize_bilinear(const Image& m, int target_h, int target_w) {
  if (m.height == target_h && m.width == target_w) return m;
  Image out(target_h, target_w);
  const double sy = static_cast<double>(m.height) / target_h, sx = static_cast<double>(m.width) / target_w;
  for (int y = 0; y < target_h; ++y) {
    const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, m.height - 1.0);
    const int y0 = static_cast<int>(fy), y1 = std::min(y0 + 1, m.height - 1);
    const double wy = fy - y0;
    for (int x = 0; x < target_w; ++x) {
      const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, m.width - 1.0);
      const int x0 = static_cast<int>(fx), x1 = std::min(x0 + 1, m.width - 1);
      const double wx = fx - x0;
      const double v = (m(y0, x0) * (1 - wx) + m(y0, x1) * wx) * (1 - wy) + (m(y1, x0) * (1 - wx) + m(y1, x1) * wx) * wy;
      out(y, x) = static_cast<float>(v);
    }
  }
  return out;
}

Mask resize_nearest(const Mask& m, int target_h, int target_w) {
  if (m.height == target_h && m.width == target_w) return m;
  Mask out(target_h, target_w);
  for (int y = 0; y < target_h; ++y) {
    const int sy = std::min(static_cast<int>((y + 0.5) * m.height / target_h), m.height - 1);
    for (int x = 0; x < target_w; ++x) {
      const int sx = std::min(static_cast<int>((x + 0.5) * m.width / target_w), m.width - 1);
      out(y, x) = m(sy, sx);
    }
  }
  return out;
}

// ---------------------------------------------------------------- export

std::string cam_stem(const std::string& case_id, int z_index) {
  char buf[16];
  std::snprintf(buf, sizeof(buf), "_z%04d", z_index);
  return case_id + buf;
}

void save_cam(const CamRecord& rec, const std::string& dir) {
  std::error_code ec;
  fs::create_directories(dir, ec);
  const auto stem = fs::path(dir) / cam_stem(rec.case_id, rec.z_index);
  const auto& v = rec.map.values;
  {
    std::ofstream out(stem.string() + ".bin", std::ios::binary);
    if (!out) throw Error(ErrorCode::UnwritablePath, stem.string() + ".bin");
    out.write(reinterpret_cast<const char*>(v.values.data()), static_cast<std::streamsize>(v.size() * sizeof(float)));
  }
  const nlohmann::json meta = {{"case_id", rec.case_id},
                               {"z_index", rec.z_index},
                               {"shape", {v.height, v.width}},
                               {"source", to_string(rec.map.source)},
                               {"native_resolution", {rec.map.native_resolution.first, rec.map.native_resolution.second}},
                               {"dtype", "f32"}};
  std::ofstream out(stem.string() + ".json");
  if (!out) throw Error(ErrorCode::UnwritablePath, stem.string() + ".json");
  out << meta.dump(2) << "\n";
}

CamRecord load_cam(const std::string& json_path) {
  std::ifstream in(json_path);
  if (!in) throw Error(ErrorCode::MissingFile, json_path);
  CamRecord rec;
  try {
    nlohmann::json meta;
    in >> meta;
    rec.case_id = meta.at("case_id").get<std::string>();
    rec.z_index = meta.at("z_index").get<int>();
    const auto shape = meta.at("shape").get<std::vector<int>>();
    if (shape.size() != 2) throw Error(ErrorCode::CorruptHeader, "CAM shape must be 2D");
    rec.map.source = map_source_from_string(meta.at("source").get<std::string>());
    const auto native = meta.value("native_resolution", shape);
    rec.map.native_resolution = {native.at(0), native.at(1)};
    rec.map.values = Image(shape[0], shape[1]);
  } catch (const nlohmann::json::exception& ex) {
    throw Error(ErrorCode::CorruptHeader, json_path + ": " + ex.what());
  }
  fs::path bin = json_path;
  bin.replace_extension(".bin");
  std::ifstream data(bin, std::ios::binary);
  if (!data) throw Error(ErrorCode::MissingFile, bin.string());
  data.read(reinterpret_cast<char*>(rec.map.values.values.data()),
            static_cast<std::streamsize>(rec.map.values.size() * sizeof(float)));
  if (data.gcount() != static_cast<std::streamsize>(rec.map.values.size() * sizeof(float))) {
    throw Error(ErrorCode::CorruptHeader, bin.string() + " is truncated");
  }
  return rec;
}

std::vector<CamRecord> load_cam_dir(const std::string& dir) {
  if (!fs::is_directory(dir)) throw Error(ErrorCode::MissingFile, dir);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(dir)) {
    if (e.path().extension() == ".json") files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::vector<CamRecord> out;
  for (const auto& f : files) out.push_back(load_cam(f.string()));
  return out;
}

}  // namespace amecam
