#include "amecam/attentive_aggregation.hpp"

#include <algorithm>
#include <cmath>

#include "amecam/error.hpp"
#include "amecam/log.hpp"
#include "amecam/multi_exit_net.hpp"

namespace amecam {

void AggregationConfig::validate() const {
  if (!(epsilon > 0.0)) throw Error(ErrorCode::BadConfig, "epsilon must be > 0");
  if (attention_hidden < 1) throw Error(ErrorCode::BadConfig, "attention_hidden must be positive");
  if (projector_dim < 0) throw Error(ErrorCode::BadConfig, "projector_dim must be >= 0");
  if (feature_exits.empty()) throw Error(ErrorCode::BadConfig, "feature_exits must not be empty");
  std::array<bool, kNumExits> seen{};
  bool image = false;
  for (int k : feature_exits) {
    if (k < 0 || k > kNumExits || (k == 0 ? image : seen[k - 1])) {
      throw Error(ErrorCode::BadConfig, "feature_exits needs distinct entries in 0.." + std::to_string(kNumExits));
    }
    (k == 0 ? image : seen[k - 1]) = true;
  }
}

bool AggregationConfig::uses_image_features() const {
  return std::find(feature_exits.begin(), feature_exits.end(), 0) != feature_exits.end();
}

std::array<bool, kNumExits> AggregationConfig::feature_mask() const {
  std::array<bool, kNumExits> m{};
  for (int k : feature_exits) {
    if (k > 0) m[k - 1] = true;
  }
  return m;
}

nlohmann::json to_json(const AggregationConfig& c) {
  return {{"loss", c.loss == AggregationLoss::C2AM ? "c2am" : "cross_entropy"},
          {"epsilon", c.epsilon},
          {"freeze_backbone", c.freeze_backbone},
          {"attention_hidden", c.attention_hidden},
          {"projector_dim", c.projector_dim},
          {"feature_exits", c.feature_exits},
          {"warm_start", c.warm_start}};
}

AggregationConfig aggregation_from_json(const nlohmann::json& j) {
  AggregationConfig c;
  try {
    const auto loss = j.value("loss", std::string("c2am"));
    if (loss == "c2am") c.loss = AggregationLoss::C2AM;
    else if (loss == "cross_entropy") c.loss = AggregationLoss::CrossEntropy;
    else throw Error(ErrorCode::BadConfig, "unknown aggregation loss '" + loss + "'");
    c.epsilon = j.value("epsilon", c.epsilon);
    c.freeze_backbone = j.value("freeze_backbone", c.freeze_backbone);
    c.attention_hidden = j.value("attention_hidden", c.attention_hidden);
    c.projector_dim = j.value("projector_dim", c.projector_dim);
    c.feature_exits = j.value("feature_exits", c.feature_exits);
    c.warm_start = j.value("warm_start", c.warm_start);
  } catch (const nlohmann::json::exception& ex) {
    throw Error(ErrorCode::BadConfig, std::string("aggregation: ") + ex.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------- AttentionNet

AttentionNet::AttentionNet(int num_maps, int hidden, std::uint64_t seed)
    : num_maps_(num_maps), conv1_(1 + num_maps, hidden, 3, 1, 1, true), conv2_(hidden, hidden, 3, 1, 1, true),
      conv3_(hidden, num_maps, 3, 1, 1, true) {
  nn::Rng rng(seed);
  conv1_.init_kaiming(rng);
  conv2_.init_kaiming(rng);
  conv3_.init_zero();
}

Tensor AttentionNet::forward(const Tensor& input) {
  if (input.rank() != 4 || input.dim(1) != 1 + num_maps_) {
    throw Error(ErrorCode::ResolutionMismatch, "attention input must be [N,1+K,H,W], got " + input.shape_string());
  }
  return conv3_.forward(relu2_.forward(conv2_.forward(relu1_.forward(conv1_.forward(input)))));
}

Tensor AttentionNet::backward(const Tensor& grad_logits) {
  return conv1_.backward(relu1_.backward(conv2_.backward(relu2_.backward(conv3_.backward(grad_logits)))));
}

void AttentionNet::bias_toward(int k, float logit) {
  if (k >= num_maps_) throw Error(ErrorCode::BadConfig, "bias_toward: map index out of range");
  auto& b = conv3_.bias().value;
  for (int i = 0; i < num_maps_; ++i) b[i] = i == k ? logit : 0.0f;
}

nn::ParameterList AttentionNet::parameters() {
  nn::ParameterList out;
  conv1_.collect("attention.conv1", out);
  conv2_.collect("attention.conv2", out);
  conv3_.collect("attention.conv3", out);
  return out;
}

// ------------------------------------------------------ FeatureProjector

FeatureProjector::FeatureProjector(const std::array<int, kNumExits>& in_channels, int out_dim, std::uint64_t seed,
                                   const std::array<bool, kNumExits>& use, bool use_image)
    : learned_(out_dim > 0), use_image_(use_image), in_channels_(in_channels), use_(use) {
  if (!use_image && std::none_of(use.begin(), use.end(), [](bool u) { return u; })) {
    throw Error(ErrorCode::BadConfig, "feature projector needs at least one source");
  }
  if (!learned_) return;
  nn::Rng rng(seed);
  bool bias = true;
  if (use_image_) {
    image_conv_ = nn::Conv2d(kImageChannels, out_dim, 1, 1, 0, true);
    image_conv_.init_kaiming(rng);
    bias = false;
  }
  for (int k = 0; k < kNumExits; ++k) {
    if (!use_[k]) continue;
    convs_[k] = nn::Conv2d(in_channels[k], out_dim, 1, 1, 0, bias);
    convs_[k].init_kaiming(rng);
    bias = false;
  }
}

int FeatureProjector::out_dim() const {
  if (learned_) return use_image_ ? image_conv_.out_channels() : convs_[first_exit()].out_channels();
  int d = use_image_ ? kImageChannels : 0;
  for (int k = 0; k < kNumExits; ++k) d += use_[k] ? in_channels_[k] : 0;
  return d;
}

int FeatureProjector::first_exit() const {
  return static_cast<int>(std::find(use_.begin(), use_.end(), true) - use_.begin());
}

double FeatureProjector::block_scale() const {
  return 1.0 / std::sqrt(static_cast<double>(std::count(use_.begin(), use_.end(), true) + (use_image_ ? 1 : 0)));
}

namespace {

// Adds upsample(src[c]) into dst[offset + c] for every channel of a [C, h, w] tensor.
void upsample_channels_into(const float* src, int channels, int h, int w, Tensor& dst, int offset) {
  const int height = dst.dim(1), width = dst.dim(2);
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  Image native(h, w);
  for (int c = 0; c < channels; ++c) {
    std::copy(src + static_cast<std::size_t>(c) * h * w, src + static_cast<std::size_t>(c + 1) * h * w,
              native.values.begin());
    const Image up = upsample_map(native, height, width);
    float* out = dst.data() + static_cast<std::size_t>(offset + c) * plane;
    for (std::size_t p = 0; p < plane; ++p) out[p] += up.values[p];
  }
}

// Adjoint of upsample_channels_into.
Tensor downsample_channels(const Tensor& grad, int offset, int channels, int h, int w) {
  const int height = grad.dim(1), width = grad.dim(2);
  const std::size_t plane = static_cast<std::size_t>(height) * width;
  Tensor out({channels, h, w});
  Image big(height, width);
  for (int c = 0; c < channels; ++c) {
    const float* src = grad.data() + static_cast<std::size_t>(offset + c) * plane;
    std::copy(src, src + plane, big.values.begin());
    const Image back = upsample_map_backward(big, h, w);
    std::copy(back.values.begin(), back.values.end(), out.data() + static_cast<std::size_t>(c) * h * w);
  }
  return out;
}

// Per-pixel L2 normalization of channel block [begin, end) scaled by `scale`, and its backward.
void normalize_block(const Tensor& raw, Tensor& out, int begin, int end, double scale) {
  const std::size_t plane = static_cast<std::size_t>(raw.dim(1)) * raw.dim(2);
  for (std::size_t p = 0; p < plane; ++p) {
    double sq = 0.0;
    for (int c = begin; c < end; ++c) sq += static_cast<double>(raw[c * plane + p]) * raw[c * plane + p];
    const double norm = std::max(std::sqrt(sq), 1e-12);
    for (int c = begin; c < end; ++c) out[c * plane + p] = static_cast<float>(scale * raw[c * plane + p] / norm);
  }
}

void normalize_block_backward(const Tensor& raw, const Tensor& out, const Tensor& grad, Tensor& d_raw, int begin,
                              int end, double scale) {
  const std::size_t plane = static_cast<std::size_t>(raw.dim(1)) * raw.dim(2);
  for (std::size_t p = 0; p < plane; ++p) {
    double sq = 0.0, dot = 0.0;
    for (int c = begin; c < end; ++c) {
      sq += static_cast<double>(raw[c * plane + p]) * raw[c * plane + p];
      dot += static_cast<double>(grad[c * plane + p]) * out[c * plane + p];
    }
    const double norm = std::max(std::sqrt(sq), 1e-12);
    for (int c = begin; c < end; ++c) {
      const std::size_t i = c * plane + p;
      d_raw[i] = static_cast<float>((scale * grad[i] - dot * out[i] / scale) / norm);
    }
  }
}

}  // namespace

Tensor FeatureProjector::forward(const std::array<Tensor, kNumExits>& features, int height, int width,
                                 const Image* image) {
  const int d = out_dim();
  raw_ = Tensor({d, height, width});
  output_ = Tensor(raw_.shape());
  int offset = 0;
  if (use_image_) {
    if (!image || image->height != height || image->width != width) {
      throw Error(ErrorCode::ResolutionMismatch, "feature projector needs the input image at map resolution");
    }
    // Intensity as a unit direction: [I, 1 - I] separates dark from bright pixels by angle.
    const std::size_t plane = image->size();
    Tensor x({1, kImageChannels, height, width});
    for (std::size_t p = 0; p < plane; ++p) {
      x[p] = image->values[p];
      x[plane + p] = 1.0f - image->values[p];
    }
    if (learned_) {
      const Tensor proj = image_conv_.forward(x);
      std::copy(proj.data(), proj.data() + proj.size(), raw_.data());
    } else {
      std::copy(x.data(), x.data() + x.size(), raw_.data());
      normalize_block(raw_, output_, 0, kImageChannels, block_scale());
      offset = kImageChannels;
    }
  }
  for (int k = 0; k < kNumExits; ++k) {
    const Tensor& f = features[k];
    if (f.rank() != 3 || f.dim(0) != in_channels_[k]) {
      throw Error(ErrorCode::ChannelMismatch, "exit " + std::to_string(k + 1) + " features " + f.shape_string());
    }
    native_shapes_[k] = f.shape();
    if (!use_[k]) continue;
    const int h = f.dim(1), w = f.dim(2);
    if (learned_) {
      Tensor x = f;
      x.reshape({1, f.dim(0), h, w});
      const Tensor proj = convs_[k].forward(x);
      upsample_channels_into(proj.data(), d, h, w, raw_, 0);
    } else {
      upsample_channels_into(f.data(), f.dim(0), h, w, raw_, offset);
      normalize_block(raw_, output_, offset, offset + f.dim(0), block_scale());
      offset += f.dim(0);
    }
  }
  if (learned_) normalize_block(raw_, output_, 0, d, 1.0);
  return output_;
}

std::array<Tensor, kNumExits> FeatureProjector::backward(const Tensor& grad_out) {
  const int d = raw_.dim(0);
  Tensor d_raw(raw_.shape());
  std::array<Tensor, kNumExits> grads;
  if (learned_) {
    normalize_block_backward(raw_, output_, grad_out, d_raw, 0, d, 1.0);
    if (use_image_) {
      Tensor g = d_raw;
      g.reshape({1, d, raw_.dim(1), raw_.dim(2)});
      image_conv_.backward(g);
    }
    for (int k = 0; k < kNumExits; ++k) {
      if (!use_[k]) {
        grads[k] = Tensor(native_shapes_[k]);
        continue;
      }
      const int h = native_shapes_[k][1], w = native_shapes_[k][2];
      Tensor d_proj = downsample_channels(d_raw, 0, d, h, w);
      d_proj.reshape({1, d, h, w});
      grads[k] = convs_[k].backward(d_proj);
      grads[k].reshape(native_shapes_[k]);
    }
    return grads;
  }
  int offset = use_image_ ? kImageChannels : 0;
  for (int k = 0; k < kNumExits; ++k) {
    if (!use_[k]) {
      grads[k] = Tensor(native_shapes_[k]);
      continue;
    }
    const int c = native_shapes_[k][0], h = native_shapes_[k][1], w = native_shapes_[k][2];
    normalize_block_backward(raw_, output_, grad_out, d_raw, offset, offset + c, block_scale());
    grads[k] = downsample_channels(d_raw, offset, c, h, w);
    offset += c;
  }
  return grads;
}

nn::ParameterList FeatureProjector::parameters() {
  nn::ParameterList out;
  if (!learned_) return out;
  if (use_image_) image_conv_.collect("fg_projector.image", out);
  for (int k = 0; k < kNumExits; ++k) {
    if (use_[k]) convs_[k].collect("fg_projector." + std::to_string(k), out);
  }
  return out;
}

// ------------------------------------------------------- attention field

Tensor stack_attention_input(const Image& image, std::span<const ActivationMap> cams) {
  const int h = image.height, w = image.width;
  const int k = static_cast<int>(cams.size());
  Tensor input({1, 1 + k, h, w});
  std::copy(image.values.begin(), image.values.end(), input.data());
  for (int i = 0; i < k; ++i) {
    const auto& c = cams[i].values;
    if (c.height != h || c.width != w) {
      throw Error(ErrorCode::ResolutionMismatch, "CAM " + std::to_string(i + 1) + " is not at image resolution");
    }
    std::copy(c.values.begin(), c.values.end(), input.data() + static_cast<std::size_t>(i + 1) * h * w);
  }
  return input;
}

AttentionField softmax_field(const Tensor& logits, int n) {
  const int k = logits.dim(1), h = logits.dim(2), w = logits.dim(3);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  AttentionField field(k, h, w);
  const float* base = logits.data() + static_cast<std::size_t>(n) * k * plane;
  std::vector<double> e(k);
  for (std::size_t p = 0; p < plane; ++p) {
    double max = base[p];
    for (int j = 1; j < k; ++j) max = std::max(max, static_cast<double>(base[j * plane + p]));
    double sum = 0.0;
    for (int j = 0; j < k; ++j) {
      e[j] = std::exp(base[j * plane + p] - max);
      sum += e[j];
    }
    for (int j = 0; j < k; ++j) field.weights[j * plane + p] = static_cast<float>(e[j] / sum);
  }
  return field;
}

AttentionField attention_forward(const Image& image, std::span<const ActivationMap> cams, AttentionNet& net) {
  if (static_cast<int>(cams.size()) != net.num_maps()) {
    throw Error(ErrorCode::ResolutionMismatch, "attention net expects " + std::to_string(net.num_maps()) + " maps");
  }
  return softmax_field(net.forward(stack_attention_input(image, cams)), 0);
}

Image convex_combination(std::span<const ActivationMap> cams, const AttentionField& att) {
  if (static_cast<int>(cams.size()) != att.num_maps) throw Error(ErrorCode::ShapeMismatch, "map count mismatch");
  Image out(att.height, att.width, 0.0f);
  const std::size_t plane = out.size();
  for (const auto& c : cams) {
    if (c.values.height != att.height || c.values.width != att.width) {
      throw Error(ErrorCode::ShapeMismatch, "CAM and attention field sizes differ");
    }
  }
  std::vector<float> terms(att.num_maps);
  for (std::size_t p = 0; p < plane; ++p) {
    for (int k = 0; k < att.num_maps; ++k) terms[k] = att.weights[k * plane + p] * cams[k].values.values[p];
    out.values[p] = sorted_sum(terms);
  }
  return out;
}

ActivationMap attentive_aggregate(std::span<const ActivationMap> cams, const AttentionField& att) {
  return {minmax_normalize(convex_combination(cams, att)), MapSource::Attentive, {att.height, att.width}};
}

// --------------------------------------------------------- fg/bg pooling

namespace {

struct Pooled {
  std::vector<double> sum;  // sum_x weight(x) f(x)
  double mass = 0.0;
  double denom = 0.0;       // max(mass, eps)
  std::vector<double> mean;
  double norm = 0.0;
  std::vector<double> unit;
};

Pooled pool(const Image& map, const Tensor& f, double eps, bool background) {
  const int d = f.dim(0);
  const std::size_t plane = map.size();
  Pooled p;
  p.sum.assign(d, 0.0);
  for (std::size_t x = 0; x < plane; ++x) {
    const double wgt = background ? 1.0 - map.values[x] : map.values[x];
    p.mass += wgt;
    for (int c = 0; c < d; ++c) p.sum[c] += wgt * f[c * plane + x];
  }
  p.denom = std::max(p.mass, eps);
  p.mean.resize(d);
  double sq = 0.0;
  for (int c = 0; c < d; ++c) {
    p.mean[c] = p.sum[c] / p.denom;
    sq += p.mean[c] * p.mean[c];
  }
  p.norm = std::max(std::sqrt(sq), 1e-12);
  p.unit.resize(d);
  for (int c = 0; c < d; ++c) p.unit[c] = p.mean[c] / p.norm;
  return p;
}

void check_pool_shapes(const Image& map, const Tensor& f) {
  if (f.rank() != 3 || f.dim(1) != map.height || f.dim(2) != map.width) {
    throw Error(ErrorCode::ShapeMismatch, "features " + f.shape_string() + " vs map " + std::to_string(map.height) +
                                              "x" + std::to_string(map.width));
  }
}

void pool_backward(const Image& map, const Tensor& f, const Pooled& p, std::span<const double> d_unit, bool background,
                   Image& d_map, Tensor& d_f) {
  const int d = f.dim(0);
  const std::size_t plane = map.size();
  double dot = 0.0;
  for (int c = 0; c < d; ++c) dot += d_unit[c] * p.unit[c];
  std::vector<double> d_mean(d), d_sum(d);
  double d_denom = 0.0;
  for (int c = 0; c < d; ++c) {
    d_mean[c] = (d_unit[c] - dot * p.unit[c]) / p.norm;
    d_sum[c] = d_mean[c] / p.denom;
    d_denom -= d_mean[c] * p.mean[c] / p.denom;
  }
  const double d_mass = p.mass > 0.0 && p.mass >= p.denom ? d_denom : 0.0;
  const double sign = background ? -1.0 : 1.0;
  for (std::size_t x = 0; x < plane; ++x) {
    const double wgt = background ? 1.0 - map.values[x] : map.values[x];
    double g = d_mass;
    for (int c = 0; c < d; ++c) {
      g += d_sum[c] * f[c * plane + x];
      d_f[c * plane + x] += static_cast<float>(wgt * d_sum[c]);
    }
    d_map.values[x] += static_cast<float>(sign * g);
  }
}

}  // namespace

FgBgEmbedding fg_bg_embed(const Image& map, const Tensor& features, double epsilon) {
  check_pool_shapes(map, features);
  const auto fg = pool(map, features, epsilon, false);
  const auto bg = pool(map, features, epsilon, true);
  FgBgEmbedding e{fg.unit, bg.unit, fg.mass, bg.mass, false};
  const double floor = epsilon * static_cast<double>(map.size());
  if (fg.mass < floor || bg.mass < floor) {
    e.low_mass = true;
    log_warn(fg.mass < floor ? "fg_bg_embed: foreground mass below epsilon*H*W"
                             : "fg_bg_embed: background mass below epsilon*H*W");
  }
  return e;
}

FgBgGradients fg_bg_embed_backward(const Image& map, const Tensor& features, double epsilon,
                                   std::span<const double> d_fg, std::span<const double> d_bg) {
  check_pool_shapes(map, features);
  FgBgGradients g{Image(map.height, map.width, 0.0f), Tensor(features.shape())};
  pool_backward(map, features, pool(map, features, epsilon, false), d_fg, false, g.d_map, g.d_features);
  pool_backward(map, features, pool(map, features, epsilon, true), d_bg, true, g.d_map, g.d_features);
  return g;
}

// -------------------------------------------------------------- C2AM loss

namespace {

double norm(const std::vector<double>& v) {
  double sq = 0.0;
  for (double x : v) sq += x * x;
  return std::sqrt(sq);
}

// s(u,v) = (cos(u,v) + 1) / 2; optionally adds coef * ds/du, coef * ds/dv.
double half_cos_similarity(const std::vector<double>& u, const std::vector<double>& v, double coef,
                           std::vector<double>* du, std::vector<double>* dv) {
  const double nu = std::max(norm(u), 1e-12), nv = std::max(norm(v), 1e-12);
  double dot = 0.0;
  for (std::size_t i = 0; i < u.size(); ++i) dot += u[i] * v[i];
  const double cos = dot / (nu * nv);
  if (du && dv) {
    for (std::size_t i = 0; i < u.size(); ++i) {
      (*du)[i] += coef * 0.5 * (v[i] / (nu * nv) - cos * u[i] / (nu * nu));
      (*dv)[i] += coef * 0.5 * (u[i] / (nu * nv) - cos * v[i] / (nv * nv));
    }
  }
  return 0.5 * (cos + 1.0);
}

// -log(min(x, 1)) and its derivative w.r.t. x; the cap keeps each term >= 0.
double neg_log_capped(double x, double* dx) {
  if (x >= 1.0) {
    *dx = 0.0;
    return 0.0;
  }
  *dx = -1.0 / x;
  return -std::log(x);
}

}  // namespace

double c2am_loss(const std::vector<FgBgEmbedding>& batch, double epsilon, C2amGradients* grads) {
  const std::size_t b = batch.size();
  if (b < 2) throw Error(ErrorCode::BatchTooSmall, "c2am_loss needs B >= 2");
  const std::size_t d = batch[0].fg.size();
  if (grads) {
    grads->fg.assign(b, std::vector<double>(d, 0.0));
    grads->bg.assign(b, std::vector<double>(d, 0.0));
  }
  const double neg_scale = 1.0 / static_cast<double>(b * b);
  const double pos_scale = 2.0 / static_cast<double>(b * (b - 1));
  double l_neg = 0.0, l_fg = 0.0, l_bg = 0.0;

  // Two passes: first values (to get dL/ds), then similarity gradients.
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < b; ++j) {
      const double s = half_cos_similarity(batch[i].fg, batch[j].bg, 0.0, nullptr, nullptr);
      double dx;
      l_neg += neg_scale * neg_log_capped(1.0 - s + epsilon, &dx);
      if (grads) half_cos_similarity(batch[i].fg, batch[j].bg, -neg_scale * dx, &grads->fg[i], &grads->bg[j]);
    }
  }
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = i + 1; j < b; ++j) {
      double dx;
      const double sf = half_cos_similarity(batch[i].fg, batch[j].fg, 0.0, nullptr, nullptr);
      l_fg += pos_scale * neg_log_capped(sf + epsilon, &dx);
      if (grads) half_cos_similarity(batch[i].fg, batch[j].fg, pos_scale * dx, &grads->fg[i], &grads->fg[j]);
      const double sb = half_cos_similarity(batch[i].bg, batch[j].bg, 0.0, nullptr, nullptr);
      l_bg += pos_scale * neg_log_capped(sb + epsilon, &dx);
      if (grads) half_cos_similarity(batch[i].bg, batch[j].bg, pos_scale * dx, &grads->bg[i], &grads->bg[j]);
    }
  }
  return l_fg + l_bg + l_neg;
}

double aggregation_ce_loss(const Image& map, int label, const MapClassifierHead& head, MapCeGradients* grads) {
  double mean = 0.0;
  for (float v : map.values) mean += v;
  mean /= static_cast<double>(std::max<std::size_t>(map.size(), 1));
  const std::array<double, 2> logits{head.weight[0] * mean + head.bias[0], head.weight[1] * mean + head.bias[1]};
  std::vector<double> g;
  const double loss = softmax_cross_entropy(logits, label, grads ? &g : nullptr);
  if (grads) {
    grads->d_mean = g[0] * head.weight[0] + g[1] * head.weight[1];
    grads->d_weight = {g[0] * mean, g[1] * mean};
    grads->d_bias = {g[0], g[1]};
  }
  return loss;
}

// ------------------------------------------------------ AggregationModel

AggregationModel::AggregationModel(const AggregationConfig& cfg, const std::array<int, kNumExits>& exit_channels,
                                   std::uint64_t seed)
    : cfg_(cfg), attention_(kNumExits, cfg.attention_hidden, seed),
      projector_(exit_channels, cfg.projector_dim, seed + 1, cfg.feature_mask(), cfg.uses_image_features()) {
  cfg_.validate();
}

MapClassifierHead AggregationModel::ce_head() const {
  return {{ce_weight_.value[0], ce_weight_.value[1]}, {ce_bias_.value[0], ce_bias_.value[1]}};
}

nn::ParameterList AggregationModel::parameters() {
  auto out = attention_.parameters();
  auto proj = projector_.parameters();
  out.insert(out.end(), proj.begin(), proj.end());
  out.push_back({"ce_head.weight", &ce_weight_});
  out.push_back({"ce_head.bias", &ce_bias_});
  return out;
}

AggregationModel::StepResult AggregationModel::train_step(std::span<const AggregationSample* const> batch) {
  if (batch.empty()) throw Error(ErrorCode::EmptyList, "empty aggregation batch");
  const int n = static_cast<int>(batch.size());
  const int h = batch[0]->image->height, w = batch[0]->image->width;
  const std::size_t plane = static_cast<std::size_t>(h) * w;

  Tensor input({n, 1 + kNumExits, h, w});
  for (int s = 0; s < n; ++s) {
    const Tensor one = stack_attention_input(*batch[s]->image, batch[s]->cams);
    std::copy(one.data(), one.data() + one.size(), input.data() + static_cast<std::size_t>(s) * one.size());
  }
  const Tensor logits = attention_.forward(input);
  std::vector<AttentionField> fields;
  fields.reserve(n);
  for (int s = 0; s < n; ++s) fields.push_back(softmax_field(logits, s));

  std::vector<Image> d_maps(n, Image(h, w, 0.0f));
  StepResult result;
  result.loss = cfg_.loss == AggregationLoss::C2AM ? c2am_step(batch, fields, d_maps, result.d_features)
                                                   : ce_step(batch, fields, d_maps);

  // dM -> d weights -> softmax backward.
  Tensor d_logits(logits.shape());
  for (int s = 0; s < n; ++s) {
    const auto& f = fields[s];
    for (std::size_t p = 0; p < plane; ++p) {
      double dot = 0.0;
      std::array<double, kNumExits> dw{};
      for (int k = 0; k < kNumExits; ++k) {
        dw[k] = static_cast<double>(d_maps[s].values[p]) * batch[s]->cams[k].values.values[p];
        dot += dw[k] * f.weights[k * plane + p];
      }
      for (int k = 0; k < kNumExits; ++k) {
        d_logits[(static_cast<std::size_t>(s) * kNumExits + k) * plane + p] =
            static_cast<float>(f.weights[k * plane + p] * (dw[k] - dot));
      }
    }
  }
  attention_.backward(d_logits);
  return result;
}

double AggregationModel::c2am_loss_of(std::span<const AggregationSample* const> batch,
                                      const std::array<float, kNumExits>& weights) {
  if (batch.empty()) throw Error(ErrorCode::EmptyList, "empty aggregation batch");
  const int h = batch[0]->image->height, w = batch[0]->image->width;
  AttentionField field(kNumExits, h, w);
  const std::size_t plane = static_cast<std::size_t>(h) * w;
  for (int k = 0; k < kNumExits; ++k) {
    std::fill_n(field.weights.begin() + k * plane, plane, weights[k]);
  }
  std::vector<FgBgEmbedding> embeddings;
  for (const auto* s : batch) {
    const Image m = convex_combination(s->cams, field);
    const Tensor f = projector_.forward(s->features, h, w, s->image);
    const auto fg = pool(m, f, cfg_.epsilon, false);
    const auto bg = pool(m, f, cfg_.epsilon, true);
    embeddings.push_back({fg.unit, bg.unit, fg.mass, bg.mass, false});
  }
  return c2am_loss(embeddings, cfg_.epsilon);
}

AggregationModel::WarmStart AggregationModel::warm_start(std::span<const AggregationSample* const> samples,
                                                         int batch_size) {
  if (batch_size < 2) throw Error(ErrorCode::BatchTooSmall, "warm start needs batches of at least 2");
  WarmStart ws;
  for (int c = 0; c <= kNumExits; ++c) {
    std::array<float, kNumExits> weights;
    weights.fill(c == kNumExits ? 1.0f / kNumExits : 0.0f);
    if (c < kNumExits) weights[c] = 1.0f;
    double sum = 0.0;
    int batches = 0;
    for (std::size_t start = 0; start + 2 <= samples.size(); start += batch_size) {
      const std::size_t end = std::min(samples.size(), start + static_cast<std::size_t>(batch_size));
      if (end - start < 2) continue;
      sum += c2am_loss_of(samples.subspan(start, end - start), weights);
      ++batches;
    }
    if (batches == 0) throw Error(ErrorCode::BatchTooSmall, "warm start needs at least 2 samples");
    ws.losses[c] = sum / batches;
  }
  // An exit replaces the uniform start only when strictly better; ties go to the shallower exit.
  for (int c = 0; c < kNumExits; ++c) {
    if (ws.losses[c] < ws.losses[ws.chosen]) ws.chosen = c;
  }
  attention_.bias_toward(ws.chosen < kNumExits ? ws.chosen : -1, kWarmStartLogit);
  return ws;
}

double AggregationModel::c2am_step(std::span<const AggregationSample* const> batch,
                                   const std::vector<AttentionField>& fields, std::vector<Image>& d_maps,
                                   std::array<Tensor, kNumExits>& d_features) {
  const int n = static_cast<int>(batch.size());
  const int h = fields[0].height, w = fields[0].width;

  // Per-sample features are large at image resolution, so they are rebuilt in
  // the backward pass instead of being held for the whole batch.
  std::vector<Image> maps;
  std::vector<FgBgEmbedding> embeddings;
  for (int s = 0; s < n; ++s) {
    maps.push_back(convex_combination(batch[s]->cams, fields[s]));
    const Tensor f = projector_.forward(batch[s]->features, h, w, batch[s]->image);
    const auto fg = pool(maps.back(), f, cfg_.epsilon, false);
    const auto bg = pool(maps.back(), f, cfg_.epsilon, true);
    embeddings.push_back({fg.unit, bg.unit, fg.mass, bg.mass, false});
  }

  C2amGradients grads;
  const double loss = c2am_loss(embeddings, cfg_.epsilon, &grads);

  for (int k = 0; k < kNumExits; ++k) {
    const Tensor& f0 = batch[0]->features[k];
    d_features[k] = Tensor({n, f0.dim(0), f0.dim(1), f0.dim(2)});
  }
  for (int s = 0; s < n; ++s) {
    const Tensor f = projector_.forward(batch[s]->features, h, w, batch[s]->image);
    auto g = fg_bg_embed_backward(maps[s], f, cfg_.epsilon, grads.fg[s], grads.bg[s]);
    d_maps[s] = std::move(g.d_map);
    const auto df = projector_.backward(g.d_features);
    for (int k = 0; k < kNumExits; ++k) {
      if (df[k].shape() != std::vector<int>(d_features[k].shape().begin() + 1, d_features[k].shape().end())) {
        throw Error(ErrorCode::ShapeMismatch, "exit features differ within a batch");
      }
      std::copy(df[k].data(), df[k].data() + df[k].size(), d_features[k].data() + static_cast<std::size_t>(s) * df[k].size());
    }
  }
  return loss;
}

double AggregationModel::ce_step(std::span<const AggregationSample* const> batch,
                                 const std::vector<AttentionField>& fields, std::vector<Image>& d_maps) {
  const int n = static_cast<int>(batch.size());
  const MapClassifierHead head = ce_head();
  double total = 0.0;
  for (int s = 0; s < n; ++s) {
    const Image m = convex_combination(batch[s]->cams, fields[s]);
    MapCeGradients g;
    total += aggregation_ce_loss(m, batch[s]->label, head, &g);
    const float d_pixel = static_cast<float>(g.d_mean / static_cast<double>(m.size()) / n);
    std::fill(d_maps[s].values.begin(), d_maps[s].values.end(), d_pixel);
    for (int c = 0; c < 2; ++c) {
      ce_weight_.grad[c] += static_cast<float>(g.d_weight[c] / n);
      ce_bias_.grad[c] += static_cast<float>(g.d_bias[c] / n);
    }
  }
  return total / n;
}

}  // namespace amecam
