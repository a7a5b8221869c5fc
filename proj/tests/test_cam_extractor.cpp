#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <random>

#include "amecam/cam_extractor.hpp"
#include "amecam/error.hpp"

using namespace amecam;
namespace fs = std::filesystem;

namespace {

Image grid(int h, int w, std::initializer_list<float> v) {
  Image m(h, w);
  std::copy(v.begin(), v.end(), m.values.begin());
  return m;
}

ExitHead make_head(int k, int classes, int channels, std::vector<float> w) {
  ExitHead h;
  h.exit_index = k;
  h.weight = Tensor({classes, channels});
  h.bias = Tensor({classes});
  std::copy(w.begin(), w.end(), h.weight.data());
  return h;
}

Tensor random_features(std::mt19937_64& rng, int c, int h, int w) {
  std::normal_distribution<float> n(0.0f, 1.0f);
  Tensor t({c, h, w});
  for (auto& v : t.storage()) v = n(rng);
  return t;
}

void check_normalized(const Image& m) {
  const auto [lo, hi] = std::minmax_element(m.values.begin(), m.values.end());
  CHECK(*lo >= 0.0f);
  CHECK(*hi <= 1.0f);
  if (*hi > 0.0f) {
    CHECK(*lo == 0.0f);
    CHECK(*hi == 1.0f);
  }
}

// Independent bilinear reference written from the interpolation formula.
double bilinear_oracle(const Image& m, int th, int tw, int y, int x) {
  const double py = th > 1 ? double(y) * (m.height - 1) / (th - 1) : 0.0;
  const double px = tw > 1 ? double(x) * (m.width - 1) / (tw - 1) : 0.0;
  double acc = 0.0;
  for (int sy = 0; sy < m.height; ++sy)
    for (int sx = 0; sx < m.width; ++sx) {
      const double wy = std::max(0.0, 1.0 - std::abs(py - sy));
      const double wx = std::max(0.0, 1.0 - std::abs(px - sx));
      acc += wy * wx * m(sy, sx);
    }
  return acc;
}

}  // namespace

TEST_CASE("exit CAM: hand-computed weighted channel sum") {
  Tensor f({2, 2, 2});
  const float vals[] = {1, 0, 0, 1, 0, 2, 2, 0};
  std::copy(std::begin(vals), std::end(vals), f.data());
  const auto head = make_head(2, 2, 2, {0.3f, 0.7f, 1.0f, -0.5f});
  const auto cam = compute_exit_cam(f, head, 1);
  CHECK(cam.values == grid(2, 2, {1, 0, 0, 1}));
  CHECK(cam.source == MapSource::Exit2);
  CHECK(cam.native_resolution == std::pair{2, 2});

  CHECK(compute_exit_cam(Tensor({2, 2, 2}), head, 1).values == Image(2, 2, 0.0f));
  CHECK(compute_exit_cam(f, make_head(1, 2, 2, {0, 0, 0, 0}), 0).values == Image(2, 2, 0.0f));
  CHECK_THROWS_AS(compute_exit_cam(Tensor({3, 2, 2}), head, 1), Error);
  try {
    compute_exit_cam(Tensor({3, 2, 2}), head, 1);
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::ChannelMismatch);
  }
}

TEST_CASE("exit CAM: normalization invariants and positive homogeneity") {
  std::mt19937_64 rng(3);
  std::normal_distribution<float> n(0.0f, 1.0f);
  std::uniform_real_distribution<float> scale(0.01f, 100.0f);
  for (int trial = 0; trial < 200; ++trial) {
    const auto f = random_features(rng, 5, 6, 6);
    std::vector<float> w(10);
    for (auto& v : w) v = n(rng);
    const auto cam = compute_exit_cam(f, make_head(3, 2, 5, w), 1);
    check_normalized(cam.values);
    // Positive scaling is a power of two so the double-precision sum scales exactly.
    const float lambda = std::exp2(std::round(std::log2(scale(rng))));
    for (auto& v : w) v *= lambda;
    const auto scaled = compute_exit_cam(f, make_head(3, 2, 5, w), 1);
    for (std::size_t i = 0; i < cam.values.size(); ++i) CHECK(scaled.values.values[i] == doctest::Approx(cam.values.values[i]).epsilon(1e-6));
  }
}

TEST_CASE("minmax normalize") {
  CHECK(minmax_normalize(grid(1, 2, {1, 3})) == grid(1, 2, {0, 1}));
  CHECK(minmax_normalize(grid(2, 2, {5, 5, 5, 5})) == Image(2, 2, 0.0f));
  const auto unit = grid(2, 2, {0, 0.25f, 1, 0.5f});
  CHECK(minmax_normalize(unit) == unit);
  CHECK_THROWS_AS(minmax_normalize(grid(1, 2, {0, NAN})), Error);
  CHECK_THROWS_AS(minmax_normalize(grid(1, 2, {0, INFINITY})), Error);
}

TEST_CASE("upsample: anchors, identity and bilinear oracle") {
  CHECK(upsample_map(grid(1, 1, {0.7f}), 4, 5) == Image(4, 5, 0.7f));
  const auto mid = upsample_map(grid(2, 2, {0, 1, 0, 1}), 3, 3);
  for (int y = 0; y < 3; ++y) {
    CHECK(mid(y, 0) == 0.0f);
    CHECK(mid(y, 1) == 0.5f);
    CHECK(mid(y, 2) == 1.0f);
  }

  std::mt19937_64 rng(9);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  std::uniform_int_distribution<int> dims(1, 9), extra(0, 20);
  for (int trial = 0; trial < 100; ++trial) {
    Image m(dims(rng), dims(rng));
    for (auto& v : m.values) v = u(rng);
    CHECK(upsample_map(m, m.height, m.width) == m);
    const int th = m.height + extra(rng), tw = m.width + extra(rng);
    const auto up = upsample_map(m, th, tw);
    CHECK(up(0, 0) == m(0, 0));
    CHECK(up(0, tw - 1) == m(0, m.width - 1));
    CHECK(up(th - 1, 0) == m(m.height - 1, 0));
    CHECK(up(th - 1, tw - 1) == m(m.height - 1, m.width - 1));
    for (int y = 0; y < th; ++y)
      for (int x = 0; x < tw; ++x) REQUIRE(up(y, x) == doctest::Approx(bilinear_oracle(m, th, tw, y, x)).epsilon(1e-6));
  }
  CHECK_THROWS_AS(upsample_map(Image(4, 4), 3, 8), Error);
  CHECK_THROWS_AS(upsample_map(Image(0, 0), 3, 3), Error);
}

TEST_CASE("upsample backward is the adjoint of upsample") {
  std::mt19937_64 rng(4);
  std::normal_distribution<float> n(0.0f, 1.0f);
  Image m(4, 5), g(9, 13);
  for (auto& v : m.values) v = n(rng);
  for (auto& v : g.values) v = n(rng);
  const auto up = upsample_map(m, 9, 13);
  const auto back = upsample_map_backward(g, 4, 5);
  double lhs = 0.0, rhs = 0.0;
  for (std::size_t i = 0; i < up.size(); ++i) lhs += double(up.values[i]) * g.values[i];
  for (std::size_t i = 0; i < m.size(); ++i) rhs += double(m.values[i]) * back.values[i];
  CHECK(lhs == doctest::Approx(rhs).epsilon(1e-5));
}

TEST_CASE("average aggregate") {
  const ActivationMap a{grid(2, 2, {0, 0.5f, 1, 0.25f}), MapSource::Exit1, {2, 2}};
  std::vector<ActivationMap> same(4, a);
  CHECK(average_aggregate(same).values == a.values);
  CHECK(average_aggregate(same).source == MapSource::Averaged);

  std::vector<ActivationMap> degenerate{{grid(1, 1, {0}), MapSource::Exit1, {1, 1}},
                                        {grid(1, 1, {1}), MapSource::Exit2, {1, 1}}};
  CHECK(average_aggregate(degenerate).values == Image(1, 1, 0.0f));

  CHECK_THROWS_AS(average_aggregate(std::vector<ActivationMap>{}), Error);
  std::vector<ActivationMap> mixed{a, {Image(3, 3), MapSource::Exit2, {3, 3}}};
  CHECK_THROWS_AS(average_aggregate(mixed), Error);

  std::mt19937_64 rng(5);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<ActivationMap> cams(4);
    for (int k = 0; k < 4; ++k) {
      cams[k].values = Image(8, 8);
      for (auto& v : cams[k].values.values) v = u(rng);
      cams[k].values = minmax_normalize(cams[k].values);
    }
    const auto ref = average_aggregate(cams);
    check_normalized(ref.values);
    auto perm = cams;
    std::shuffle(perm.begin(), perm.end(), rng);
    CHECK(average_aggregate(perm).values == ref.values);
    // Pre-normalization mean lies between the pixelwise min and max.
    for (std::size_t p = 0; p < 64; ++p) {
      float terms[4];
      float lo = 1.0f, hi = 0.0f;
      for (int k = 0; k < 4; ++k) {
        terms[k] = cams[k].values.values[p];
        lo = std::min(lo, terms[k]);
        hi = std::max(hi, terms[k]);
      }
      const float mean = sorted_sum(terms) / 4.0f;
      CHECK(mean >= lo);
      CHECK(mean <= hi);
    }
  }
}

TEST_CASE("sorted sum is order independent") {
  std::mt19937_64 rng(6);
  std::uniform_real_distribution<float> u(-1e3f, 1e3f);
  for (int trial = 0; trial < 100; ++trial) {
    std::vector<float> v(7);
    for (auto& x : v) x = u(rng);
    auto w = v;
    std::shuffle(w.begin(), w.end(), rng);
    CHECK(sorted_sum(v) == sorted_sum(w));
  }
}

TEST_CASE("Grad-CAM equals the exit-4 CAM for a GAP+linear head") {
  BackboneConfig cfg;
  cfg.stage_channels = {4, 8, 8, 16};
  cfg.input_size = 64;
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    MultiExitNet net(cfg, seed);
    std::mt19937_64 rng(seed + 100);
    std::uniform_real_distribution<float> u(0.0f, 1.0f);
    Image img(64, 64);
    for (auto& v : img.values) v = u(rng);
    const auto gc = grad_cam_reference(img, net, 1);
    const auto out = forward_multi_exit(img, net);
    const auto cam = compute_exit_cam(out.features[3], net.head(4), 1);
    CHECK(gc.source == MapSource::GradCam);
    REQUIRE(gc.values.same_shape(cam.values));
    for (std::size_t i = 0; i < cam.values.size(); ++i) CHECK(std::abs(gc.values.values[i] - cam.values.values[i]) <= 1e-5);
    CHECK(grad_cam_reference(img, net, 1).values == gc.values);
  }
}

TEST_CASE("extracted exit CAMs are at input resolution") {
  BackboneConfig cfg;
  cfg.stage_channels = {4, 8, 8, 16};
  cfg.input_size = 64;
  MultiExitNet net(cfg, 1);
  Image img(64, 64, 0.3f);
  img(10, 20) = 1.0f;
  const auto out = forward_multi_exit(img, net);
  const auto cams = extract_exit_cams(out, net, 1);
  REQUIRE(cams.size() == 4);
  for (int k = 0; k < 4; ++k) {
    CHECK(cams[k].values.height == 64);
    CHECK(cams[k].native_resolution == std::pair{cfg.exit_size(k + 1), cfg.exit_size(k + 1)});
    CHECK(cams[k].source == exit_source(k + 1));
    const auto native = compute_exit_cam(out.features[k], net.head(k + 1), 1).values;
    const int n = native.height - 1;
    CHECK(cams[k].values(0, 0) == native(0, 0));
    CHECK(cams[k].values(0, 63) == native(0, n));
    CHECK(cams[k].values(63, 0) == native(n, 0));
    CHECK(cams[k].values(63, 63) == native(n, n));
  }
}

TEST_CASE("resize helpers") {
  const auto img = grid(2, 2, {0, 1, 2, 3});
  CHECK(resize_bilinear(img, 2, 2) == img);
  const auto up = resize_bilinear(img, 4, 4);
  CHECK(up(0, 0) == 0.0f);
  CHECK(up(3, 3) == 3.0f);
  CHECK(up(0, 1) == doctest::Approx(0.25));
  Mask m(2, 2, 0);
  m(1, 1) = 1;
  const auto big = resize_nearest(m, 4, 4);
  CHECK(big(3, 3) == 1);
  CHECK(big(2, 2) == 1);
  CHECK(big(1, 1) == 0);
}

TEST_CASE("CAM export round trip") {
  const auto dir = fs::temp_directory_path() / "amecam_cam_export";
  fs::remove_all(dir);
  CamRecord rec{"case_007", 12, {grid(2, 3, {0, 0.125f, 1, 0.5f, 0.25f, 0.75f}), MapSource::Attentive, {1, 2}}};
  save_cam(rec, dir.string());
  CHECK(fs::exists(dir / "case_007_z0012.bin"));
  CHECK(fs::file_size(dir / "case_007_z0012.bin") == 6 * sizeof(float));
  const auto back = load_cam((dir / "case_007_z0012.json").string());
  CHECK(back.case_id == rec.case_id);
  CHECK(back.z_index == 12);
  CHECK(back.map.values == rec.map.values);
  CHECK(back.map.source == MapSource::Attentive);
  CHECK(back.map.native_resolution == std::pair{1, 2});
  CHECK(load_cam_dir(dir.string()).size() == 1);
  CHECK_THROWS_AS(load_cam((dir / "missing.json").string()), Error);
  fs::resize_file(dir / "case_007_z0012.bin", 8);
  CHECK_THROWS_AS(load_cam((dir / "case_007_z0012.json").string()), Error);
  fs::remove_all(dir);
}

TEST_CASE("map source names round trip") {
  for (auto s : {MapSource::Exit1, MapSource::Exit2, MapSource::Exit3, MapSource::Exit4, MapSource::Averaged,
                 MapSource::Attentive, MapSource::GradCam}) {
    CHECK(map_source_from_string(to_string(s)) == s);
  }
  CHECK_THROWS_AS(map_source_from_string("scorecam"), Error);
}
