#include "amecam/evaluation.hpp"

#include <png.h>

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <memory>

#include "amecam/error.hpp"

namespace amecam {

SegmentationMask threshold_map(const ActivationMap& m, double threshold) {
  if (!(threshold > 0.0 && threshold < 1.0)) throw Error(ErrorCode::BadThreshold, std::to_string(threshold));
  SegmentationMask out{Mask(m.values.height, m.values.width), threshold};
  for (std::size_t i = 0; i < m.values.size(); ++i) out.values.values[i] = m.values.values[i] > threshold ? 1 : 0;
  return out;
}

namespace {

struct Counts {
  long long pred = 0, gt = 0, both = 0;
};

Counts count_overlap(const Mask& pred, const Mask& gt) {
  if (!pred.same_shape(gt)) throw Error(ErrorCode::ShapeMismatch, "prediction and ground truth differ in shape");
  Counts c;
  for (std::size_t i = 0; i < pred.size(); ++i) {
    const bool p = pred.values[i] != 0, g = gt.values[i] != 0;
    c.pred += p;
    c.gt += g;
    c.both += p && g;
  }
  if (c.gt == 0) throw Error(ErrorCode::EmptyGroundTruth, "ground truth mask is empty");
  return c;
}

bool any_set(const Mask& m) {
  return std::any_of(m.values.begin(), m.values.end(), [](auto v) { return v != 0; });
}

constexpr double kFar = 1e20;

// 1D squared distance transform (lower envelope of parabolas).
void edt_1d(const double* f, int n, double* d, std::vector<int>& v, std::vector<double>& z) {
  v.assign(n, 0);
  z.assign(n + 1, 0.0);
  auto intersect = [&](int q, int p) {
    return ((f[q] + static_cast<double>(q) * q) - (f[p] + static_cast<double>(p) * p)) / (2.0 * q - 2.0 * p);
  };
  int k = 0;
  z[0] = -std::numeric_limits<double>::infinity();
  z[1] = std::numeric_limits<double>::infinity();
  for (int q = 1; q < n; ++q) {
    double s = intersect(q, v[k]);
    while (s <= z[k]) {
      --k;
      s = intersect(q, v[k]);
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = std::numeric_limits<double>::infinity();
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    const double dq = q - v[k];
    d[q] = dq * dq + f[v[k]];
  }
}

// Exact squared Euclidean distance to the nearest seed pixel.
std::vector<double> squared_edt(int h, int w, const std::vector<std::pair<int, int>>& seeds) {
  std::vector<double> grid(static_cast<std::size_t>(h) * w, kFar);
  for (auto [y, x] : seeds) grid[static_cast<std::size_t>(y) * w + x] = 0.0;
  std::vector<int> v;
  std::vector<double> z;
  std::vector<double> col(h), out(std::max(h, w));
  for (int x = 0; x < w; ++x) {
    for (int y = 0; y < h; ++y) col[y] = grid[static_cast<std::size_t>(y) * w + x];
    edt_1d(col.data(), h, out.data(), v, z);
    for (int y = 0; y < h; ++y) grid[static_cast<std::size_t>(y) * w + x] = out[y];
  }
  std::vector<double> row(w);
  for (int y = 0; y < h; ++y) {
    std::copy_n(grid.begin() + static_cast<std::ptrdiff_t>(y) * w, w, row.begin());
    edt_1d(row.data(), w, out.data(), v, z);
    std::copy_n(out.begin(), w, grid.begin() + static_cast<std::ptrdiff_t>(y) * w);
  }
  return grid;
}

}  // namespace

double dice(const Mask& pred, const Mask& gt) {
  const auto c = count_overlap(pred, gt);
  return 2.0 * static_cast<double>(c.both) / static_cast<double>(c.pred + c.gt);
}

double iou(const Mask& pred, const Mask& gt) {
  const auto c = count_overlap(pred, gt);
  return static_cast<double>(c.both) / static_cast<double>(c.pred + c.gt - c.both);
}

std::vector<std::pair<int, int>> boundary_pixels(const Mask& m) {
  std::vector<std::pair<int, int>> out;
  auto unset = [&](int y, int x) { return y < 0 || x < 0 || y >= m.height || x >= m.width || m(y, x) == 0; };
  for (int y = 0; y < m.height; ++y) {
    for (int x = 0; x < m.width; ++x) {
      if (m(y, x) && (unset(y - 1, x) || unset(y + 1, x) || unset(y, x - 1) || unset(y, x + 1))) {
        out.emplace_back(y, x);
      }
    }
  }
  return out;
}

double percentile(std::vector<double> values, double q) {
  if (values.empty()) throw Error(ErrorCode::EmptyList, "percentile of empty sample");
  std::sort(values.begin(), values.end());
  const double pos = q / 100.0 * static_cast<double>(values.size() - 1);
  const auto lo = static_cast<std::size_t>(std::floor(pos));
  const std::size_t hi = std::min(lo + 1, values.size() - 1);
  return values[lo] + (pos - static_cast<double>(lo)) * (values[hi] - values[lo]);
}

double hd95(const Mask& pred, const Mask& gt) {
  if (!pred.same_shape(gt)) throw Error(ErrorCode::ShapeMismatch, "prediction and ground truth differ in shape");
  if (!any_set(pred) || !any_set(gt)) throw Error(ErrorCode::EmptyMask, "hd95 needs two non-empty masks");
  const auto bp = boundary_pixels(pred);
  const auto bg = boundary_pixels(gt);
  const auto to_gt = squared_edt(gt.height, gt.width, bg);
  const auto to_pred = squared_edt(pred.height, pred.width, bp);
  std::vector<double> d;
  d.reserve(bp.size() + bg.size());
  for (auto [y, x] : bp) d.push_back(std::sqrt(to_gt[static_cast<std::size_t>(y) * gt.width + x]));
  for (auto [y, x] : bg) d.push_back(std::sqrt(to_pred[static_cast<std::size_t>(y) * pred.width + x]));
  return percentile(std::move(d), 95.0);
}

// ---------------------------------------------------------------- reports

MetricSummary summarize(const std::vector<double>& values) {
  if (values.empty()) return {};
  double sum = 0.0;
  for (double v : values) sum += v;
  const double mean = sum / static_cast<double>(values.size());
  double sq = 0.0;
  for (double v : values) sq += (v - mean) * (v - mean);
  return {mean, std::sqrt(sq / static_cast<double>(values.size()))};
}

MetricsReport evaluate_dataset(const std::vector<EvalItem>& items) {
  MetricsReport r;
  std::vector<double> dices, ious, hds;
  for (const auto& item : items) {
    if (!item.gt || !any_set(*item.gt)) {
      ++r.n_skipped;
      continue;
    }
    SampleMetrics s{item.case_id, item.z_index, dice(item.pred, *item.gt), iou(item.pred, *item.gt), std::nullopt};
    if (any_set(item.pred)) s.hd95 = hd95(item.pred, *item.gt);
    dices.push_back(s.dice);
    ious.push_back(s.iou);
    if (s.hd95) hds.push_back(*s.hd95);
    r.per_sample.push_back(std::move(s));
  }
  r.n_evaluated = static_cast<int>(r.per_sample.size());
  if (r.n_evaluated == 0) throw Error(ErrorCode::NoEvaluableSamples, "no sample has a non-empty ground truth");
  r.dice = summarize(dices);
  r.iou = summarize(ious);
  r.hd95 = summarize(hds);
  return r;
}

MetricsReport evaluate_maps(const std::vector<CamRecord>& maps, const std::vector<std::optional<Mask>>& gts,
                            double threshold) {
  if (maps.size() != gts.size()) throw Error(ErrorCode::ShapeMismatch, "maps and ground truths differ in count");
  std::vector<EvalItem> items;
  items.reserve(maps.size());
  for (std::size_t i = 0; i < maps.size(); ++i) {
    items.push_back({maps[i].case_id, maps[i].z_index, threshold_map(maps[i].map, threshold).values, gts[i]});
  }
  return evaluate_dataset(items);
}

namespace {

nlohmann::json optional_number(const std::optional<double>& v) {
  return v ? nlohmann::json(*v) : nlohmann::json(nullptr);
}

nlohmann::json summary_json(const MetricSummary& s) {
  return {{"mean", optional_number(s.mean)}, {"std", optional_number(s.std)}};
}

std::string format_number(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.10g", v);
  return buf;
}

}  // namespace

nlohmann::json report_to_json(const MetricsReport& r, const nlohmann::json& config_echo) {
  nlohmann::json rows = nlohmann::json::array();
  for (const auto& s : r.per_sample) {
    rows.push_back({{"case_id", s.case_id},
                    {"z_index", s.z_index},
                    {"dice", s.dice},
                    {"iou", s.iou},
                    {"hd95", optional_number(s.hd95)}});
  }
  return {{"per_sample", rows},
          {"summary", {{"dice", summary_json(r.dice)}, {"iou", summary_json(r.iou)}, {"hd95", summary_json(r.hd95)}}},
          {"n_evaluated", r.n_evaluated},
          {"n_skipped", r.n_skipped},
          {"config", config_echo}};
}

std::string report_to_csv(const MetricsReport& r) {
  std::string out = "case_id,z_index,dice,iou,hd95\n";
  for (const auto& s : r.per_sample) {
    out += s.case_id + "," + std::to_string(s.z_index) + "," + format_number(s.dice) + "," + format_number(s.iou) +
           "," + (s.hd95 ? format_number(*s.hd95) : std::string()) + "\n";
  }
  return out;
}

// ---------------------------------------------------------------- overlays

namespace {

struct FileCloser {
  void operator()(std::FILE* f) const {
    if (f) std::fclose(f);
  }
};

void write_rgb_png(const std::vector<unsigned char>& rgb, int h, int w, const std::filesystem::path& path) {
  std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(path.string().c_str(), "wb"));
  if (!fp) throw Error(ErrorCode::UnwritablePath, path.string());
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_write_struct(&png, &info);
    throw Error(ErrorCode::UnwritablePath, "libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw Error(ErrorCode::UnwritablePath, "libpng write failed for " + path.string());
  }
  png_init_io(png, fp.get());
  png_set_IHDR(png, info, w, h, 8, PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT,
               PNG_FILTER_TYPE_DEFAULT);
  png_write_info(png, info);
  for (int y = 0; y < h; ++y) {
    png_write_row(png, const_cast<png_bytep>(rgb.data() + static_cast<std::size_t>(y) * w * 3));
  }
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
}

unsigned char to_byte(double v) { return static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)); }

std::vector<unsigned char> gray_rgb(const Image& image) {
  std::vector<unsigned char> rgb(image.size() * 3);
  for (std::size_t i = 0; i < image.size(); ++i) {
    const unsigned char g = to_byte(image.values[i]);
    rgb[3 * i] = rgb[3 * i + 1] = rgb[3 * i + 2] = g;
  }
  return rgb;
}

constexpr std::array<double, 3> kHeat{255.0, 0.0, 0.0};
constexpr std::array<unsigned char, 3> kContour{0, 255, 0};
constexpr double kMaxAlpha = 0.5;

}  // namespace

void write_gray_png(const Image& image, const std::filesystem::path& out_path) {
  write_rgb_png(gray_rgb(image), image.height, image.width, out_path);
}

void render_overlay(const Image& image, const ActivationMap& map, const std::filesystem::path& out_path) {
  if (!image.same_shape(map.values)) throw Error(ErrorCode::ShapeMismatch, "image and map differ in shape");
  auto rgb = gray_rgb(image);
  for (std::size_t i = 0; i < image.size(); ++i) {
    const double alpha = kMaxAlpha * std::clamp(static_cast<double>(map.values.values[i]), 0.0, 1.0);
    if (alpha <= 0.0) continue;
    for (int c = 0; c < 3; ++c) {
      rgb[3 * i + c] = static_cast<unsigned char>(std::lround((1.0 - alpha) * rgb[3 * i + c] + alpha * kHeat[c]));
    }
  }
  write_rgb_png(rgb, image.height, image.width, out_path);
}

void render_overlay(const Image& image, const Mask& mask, const std::filesystem::path& out_path) {
  if (image.height != mask.height || image.width != mask.width) {
    throw Error(ErrorCode::ShapeMismatch, "image and mask differ in shape");
  }
  auto rgb = gray_rgb(image);
  for (auto [y, x] : boundary_pixels(mask)) {
    const std::size_t i = static_cast<std::size_t>(y) * image.width + x;
    for (int c = 0; c < 3; ++c) rgb[3 * i + c] = kContour[c];
  }
  write_rgb_png(rgb, image.height, image.width, out_path);
}

PngImage read_png(const std::filesystem::path& path) {
  std::unique_ptr<std::FILE, FileCloser> fp(std::fopen(path.string().c_str(), "rb"));
  if (!fp) throw Error(ErrorCode::MissingFile, path.string());
  png_structp png = png_create_read_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  png_infop info = png ? png_create_info_struct(png) : nullptr;
  if (!png || !info) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error(ErrorCode::CorruptHeader, "libpng initialisation failed");
  }
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_read_struct(&png, &info, nullptr);
    throw Error(ErrorCode::CorruptHeader, "not a readable PNG: " + path.string());
  }
  png_init_io(png, fp.get());
  png_read_info(png, info);
  PngImage img;
  img.width = static_cast<int>(png_get_image_width(png, info));
  img.height = static_cast<int>(png_get_image_height(png, info));
  img.channels = png_get_channels(png, info);
  img.pixels.resize(static_cast<std::size_t>(img.width) * img.height * img.channels);
  for (int y = 0; y < img.height; ++y) {
    png_read_row(png, img.pixels.data() + static_cast<std::size_t>(y) * img.width * img.channels, nullptr);
  }
  png_destroy_read_struct(&png, &info, nullptr);
  return img;
}

}  // namespace amecam
