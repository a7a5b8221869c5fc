#include <doctest.h>

#include <cmath>
#include <random>
#include <set>

#include "amecam/error.hpp"
#include "amecam/multi_exit_net.hpp"

using namespace amecam;

namespace {

BackboneConfig small_config(int size = 64) {
  BackboneConfig c;
  c.stage_channels = {4, 8, 8, 16};
  c.input_size = size;
  c.projector_dim = 8;
  return c;
}

Image random_image(int size, std::mt19937_64& rng) {
  Image img(size, size);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (auto& v : img.values) v = u(rng);
  return img;
}

std::vector<double> unit_vector(int d, std::mt19937_64& rng) {
  std::normal_distribution<double> n(0.0, 1.0);
  std::vector<double> v(d);
  double s = 0;
  for (auto& x : v) {
    x = n(rng);
    s += x * x;
  }
  for (auto& x : v) x /= std::sqrt(s);
  return v;
}

// Brute-force double loop over the SupCon definition.
double supcon_oracle(const std::vector<std::vector<double>>& z, const std::vector<int>& y, double tau) {
  const std::size_t n = z.size();
  auto dot = [&](std::size_t i, std::size_t j) {
    double s = 0;
    for (std::size_t k = 0; k < z[i].size(); ++k) s += z[i][k] * z[j][k];
    return s;
  };
  double total = 0;
  for (std::size_t i = 0; i < n; ++i) {
    double denom = 0;
    for (std::size_t a = 0; a < n; ++a)
      if (a != i) denom += std::exp(dot(i, a) / tau);
    double s = 0;
    int np = 0;
    for (std::size_t p = 0; p < n; ++p) {
      if (p == i || y[p] != y[i]) continue;
      s += std::log(std::exp(dot(i, p) / tau) / denom);
      ++np;
    }
    total += -s / np;
  }
  return total;
}

}  // namespace

TEST_CASE("backbone config validation and json round trip") {
  BackboneConfig c;
  CHECK_NOTHROW(c.validate());
  c.input_size = 100;
  CHECK_THROWS_AS(c.validate(), Error);
  c = small_config();
  CHECK(backbone_from_json(to_json(c)) == c);
  CHECK(c.exit_size(1) == 16);
  CHECK(c.exit_size(4) == 2);
}

TEST_CASE("resolution ladder and GAP consistency") {
  std::mt19937_64 rng(1);
  auto cfg = small_config(128);
  MultiExitNet net(cfg, 3);
  const auto out = forward_multi_exit(random_image(128, rng), net);
  const int sizes[] = {32, 16, 8, 4};
  for (int k = 0; k < kNumExits; ++k) {
    REQUIRE(out.features[k].rank() == 3);
    CHECK(out.features[k].dim(0) == cfg.stage_channels[k]);
    CHECK(out.features[k].dim(1) == sizes[k]);
    CHECK(out.features[k].dim(2) == sizes[k]);
    REQUIRE(out.logits[k].size() == 2);
    // Independent GAP + matmul.
    const ExitHead head = net.head(k + 1);
    const int c = head.channels(), hw = sizes[k] * sizes[k];
    for (int cls = 0; cls < 2; ++cls) {
      double z = head.bias[cls];
      for (int ch = 0; ch < c; ++ch) {
        double mean = 0;
        for (int p = 0; p < hw; ++p) mean += out.features[k][ch * hw + p];
        z += head.weight[cls * c + ch] * mean / hw;
      }
      CHECK(std::isfinite(out.logits[k][cls]));
      CHECK(std::abs(z - out.logits[k][cls]) < 1e-5);
    }
  }
}

TEST_CASE("inference is deterministic and seeded init is reproducible") {
  std::mt19937_64 rng(2);
  const Image img = random_image(64, rng);
  MultiExitNet a(small_config(), 9), b(small_config(), 9), c(small_config(), 10);
  const auto oa = forward_multi_exit(img, a);
  const auto oa2 = forward_multi_exit(img, a);
  const auto ob = forward_multi_exit(img, b);
  const auto oc = forward_multi_exit(img, c);
  for (int k = 0; k < kNumExits; ++k) {
    CHECK(oa.features[k] == oa2.features[k]);
    CHECK(oa.logits[k] == ob.logits[k]);
  }
  CHECK(oa.logits[3] != oc.logits[3]);
}

TEST_CASE("forward rejects bad input") {
  MultiExitNet net(small_config(), 0);
  std::mt19937_64 rng(3);
  CHECK_THROWS_AS(forward_multi_exit(random_image(32, rng), net), Error);
  Image bad = random_image(64, rng);
  bad(3, 3) = std::nanf("");
  try {
    forward_multi_exit(bad, net);
    FAIL("expected an error");
  } catch (const Error& e) {
    CHECK((e.code() == ErrorCode::NonFiniteInput || e.code() == ErrorCode::NonFiniteActivation));
  }
}

TEST_CASE("parameter names are unique and cover backbone and projector") {
  MultiExitNet net(small_config(), 0);
  std::set<std::string> names;
  for (const auto& p : net.parameters()) CHECK(names.insert(p.name).second);
  CHECK(names.count("stem.conv.weight"));
  CHECK(names.count("exits.3.weight"));
  CHECK(names.count("projector.fc2.weight"));
  CHECK(net.backbone_parameters().size() + net.projector_parameters().size() == net.parameters().size());
}

TEST_CASE("multi-exit cross-entropy anchors and oracle") {
  std::array<std::vector<double>, kNumExits> zero;
  for (auto& v : zero) v = {0.0, 0.0};
  CHECK(std::abs(multi_exit_ce_loss(zero, 1) - 4 * std::log(2.0)) < 1e-9);
  std::array<std::vector<double>, kNumExits> sure;
  for (auto& v : sure) v = {0.0, 20.0};
  CHECK(multi_exit_ce_loss(sure, 1) < 1e-8 * 4 + 1e-8);

  std::mt19937_64 rng(4);
  std::normal_distribution<double> n(0.0, 3.0);
  for (int t = 0; t < 20; ++t) {
    std::array<std::vector<double>, kNumExits> l;
    for (auto& v : l) v = {n(rng), n(rng)};
    const int y = t % 2;
    double oracle = 0;
    for (const auto& v : l) oracle += -std::log(std::exp(v[y]) / (std::exp(v[0]) + std::exp(v[1])));
    CHECK(std::abs(multi_exit_ce_loss(l, y) - oracle) < 1e-6);
  }
  CHECK_THROWS_AS(softmax_cross_entropy(std::vector<double>{0.0, 0.0}, 2), Error);
}

TEST_CASE("supcon anchors, errors, oracle and rotation invariance") {
  const std::vector<std::vector<double>> same(3, {1.0, 0.0, 0.0});
  CHECK(std::abs(supcon_loss(same, {0, 0, 0}, 0.07) - 3 * std::log(2.0)) < 1e-6);
  CHECK_THROWS_AS(supcon_loss(same, {0, 0, 1}, 0.07), Error);
  CHECK_THROWS_AS(supcon_loss({{2.0, 0.0}, {1.0, 0.0}}, {0, 0}, 0.07), Error);

  std::mt19937_64 rng(5);
  for (int t = 0; t < 10; ++t) {
    std::vector<std::vector<double>> z;
    std::vector<int> y;
    for (int i = 0; i < 8; ++i) {
      z.push_back(unit_vector(5, rng));
      y.push_back(i % 2);
    }
    const double loss = supcon_loss(z, y, 0.5);
    CHECK(std::abs(loss - supcon_oracle(z, y, 0.5)) < 1e-6);
    CHECK(loss >= 0.0);
    // A rotation in the (0,1) plane.
    const double th = 0.7 * (t + 1);
    auto r = z;
    for (auto& v : r) {
      const double a = v[0], b = v[1];
      v[0] = std::cos(th) * a - std::sin(th) * b;
      v[1] = std::sin(th) * a + std::cos(th) * b;
    }
    CHECK(std::abs(supcon_loss(r, y, 0.5) - loss) < 1e-6);
  }
}

TEST_CASE("backbone backward matches finite differences of an exit logit") {
  std::mt19937_64 rng(6);
  auto cfg = small_config(32);
  MultiExitNet net(cfg, 1);
  const Image img = random_image(32, rng);
  const Image* ptr = &img;
  Tensor batch = make_batch(std::span<const Image* const>(&ptr, 1));
  auto logit = [&](const Tensor& x, int k) { return net.forward(x, nn::Mode::Eval).logits[k][1]; };
  for (int k = 0; k < kNumExits; ++k) {
    net.forward(batch, nn::Mode::Eval);
    std::array<Tensor, kNumExits> g;
    g[k] = Tensor({1, 2});
    g[k][1] = 1.0f;
    nn::zero_grads(net.parameters());
    const Tensor dx = net.backward(g);
    std::uniform_int_distribution<int> pick(0, 32 * 32 - 1);
    for (int t = 0; t < 6; ++t) {
      const int i = pick(rng);
      Tensor xp = batch, xm = batch;
      xp[i] += 1e-2f;
      xm[i] -= 1e-2f;
      const double numeric = (logit(xp, k) - logit(xm, k)) / 2e-2;
      CHECK(std::abs(numeric - dx[i]) <= 3e-2 * std::max(1.0, std::abs(numeric)) + 1e-4);
    }
  }
}

TEST_CASE("exit feature gradient leaves parameter gradients untouched") {
  std::mt19937_64 rng(7);
  MultiExitNet net(small_config(), 2);
  const Image img = random_image(64, rng);
  CHECK_THROWS_AS(net.exit_feature_gradient(4, Tensor({1, 2})), Error);
  const Image* ptr = &img;
  net.forward(make_batch(std::span<const Image* const>(&ptr, 1)), nn::Mode::Eval);
  nn::zero_grads(net.parameters());
  Tensor g({1, 2});
  g[1] = 1.0f;
  const Tensor d = net.exit_feature_gradient(4, g);
  CHECK(d.shape() == std::vector<int>{1, 16, 2, 2});
  // dlogit/dfeature under GAP is w / (h*w) at every position.
  const ExitHead head = net.head(4);
  CHECK(d[0] == doctest::Approx(head.weight[16 + 0] / 4.0f).epsilon(1e-5));
  for (const auto& p : net.parameters())
    for (float v : p.param->grad.storage()) CHECK(v == 0.0f);
}

TEST_CASE("projector emits unit rows") {
  std::mt19937_64 rng(8);
  MultiExitNet net(small_config(), 3);
  std::vector<Image> imgs{random_image(64, rng), random_image(64, rng), random_image(64, rng)};
  std::vector<const Image*> ptrs{&imgs[0], &imgs[1], &imgs[2]};
  const auto out = net.forward(make_batch(ptrs), nn::Mode::Train);
  const Tensor e = net.project(out.features[3]);
  REQUIRE(e.shape() == std::vector<int>{3, 8});
  for (int i = 0; i < 3; ++i) {
    double s = 0;
    for (int j = 0; j < 8; ++j) s += e[i * 8 + j] * e[i * 8 + j];
    CHECK(s == doctest::Approx(1.0).epsilon(1e-5));
  }
}
