#include "amecam/multi_exit_net.hpp"

#include <cmath>
#include <limits>
#include <string>

#include "amecam/error.hpp"

namespace amecam {

void BackboneConfig::validate() const {
  if (num_exits != kNumExits) throw Error(ErrorCode::BadConfig, "num_exits must be 4");
  for (int c : stage_channels) {
    if (c < 1) throw Error(ErrorCode::BadConfig, "stage_channels must be positive");
  }
  if (num_classes < 2) throw Error(ErrorCode::BadConfig, "num_classes must be >= 2");
  // Stem and max-pool halve twice, stages 2-4 halve three more times.
  if (input_size < 32 || input_size % 32 != 0) {
    throw Error(ErrorCode::BadConfig, "input_size must be a positive multiple of 32");
  }
  if (projector_dim < 1) throw Error(ErrorCode::BadConfig, "projector_dim must be positive");
}

nlohmann::json to_json(const BackboneConfig& c) {
  return {{"stage_channels", c.stage_channels},
          {"num_classes", c.num_classes},
          {"input_size", c.input_size},
          {"num_exits", c.num_exits},
          {"projector_dim", c.projector_dim}};
}

BackboneConfig backbone_from_json(const nlohmann::json& j) {
  BackboneConfig c;
  try {
    if (j.contains("stage_channels")) {
      const auto v = j.at("stage_channels").get<std::vector<int>>();
      if (v.size() != kNumExits) throw Error(ErrorCode::BadConfig, "stage_channels needs 4 entries");
      std::copy(v.begin(), v.end(), c.stage_channels.begin());
    }
    c.num_classes = j.value("num_classes", c.num_classes);
    c.input_size = j.value("input_size", c.input_size);
    c.num_exits = j.value("num_exits", c.num_exits);
    c.projector_dim = j.value("projector_dim", c.projector_dim);
  } catch (const nlohmann::json::exception& ex) {
    throw Error(ErrorCode::BadConfig, std::string("backbone: ") + ex.what());
  }
  c.validate();
  return c;
}

// ---------------------------------------------------------- MultiExitNet

MultiExitNet::MultiExitNet(BackboneConfig cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  const auto& ch = cfg_.stage_channels;
  stem_conv_ = nn::Conv2d(1, ch[0], 7, 2, 3, false);
  stem_bn_ = nn::BatchNorm2d(ch[0]);
  int in = ch[0];
  for (int k = 0; k < kNumExits; ++k) {
    const int stride = k == 0 ? 1 : 2;
    stages_[k][0] = nn::BasicBlock(in, ch[k], stride);
    stages_[k][1] = nn::BasicBlock(ch[k], ch[k], 1);
    heads_[k] = nn::Linear(ch[k], cfg_.num_classes);
    in = ch[k];
  }
  proj_fc1_ = nn::Linear(ch[3], ch[3]);
  proj_fc2_ = nn::Linear(ch[3], cfg_.projector_dim);

  nn::Rng rng(seed);
  stem_conv_.init_kaiming(rng);
  for (auto& stage : stages_) {
    for (auto& block : stage) block.init(rng);
  }
  for (auto& h : heads_) h.init_uniform(rng);
  proj_fc1_.init_uniform(rng);
  proj_fc2_.init_uniform(rng);
}

MultiExitBatch MultiExitNet::forward(const Tensor& images, nn::Mode mode) {
  if (images.rank() != 4 || images.dim(1) != 1 || images.dim(2) != cfg_.input_size ||
      images.dim(3) != cfg_.input_size) {
    throw Error(ErrorCode::ShapeMismatch, "expected [N,1," + std::to_string(cfg_.input_size) + "," +
                                              std::to_string(cfg_.input_size) + "], got " + images.shape_string());
  }
  if (!images.all_finite()) throw Error(ErrorCode::NonFiniteInput, "input batch contains NaN/Inf");

  MultiExitBatch out;
  Tensor x = stem_pool_.forward(stem_relu_.forward(stem_bn_.forward(stem_conv_.forward(images), mode)));
  for (int k = 0; k < kNumExits; ++k) {
    x = stages_[k][1].forward(stages_[k][0].forward(x, mode), mode);
    out.logits[k] = heads_[k].forward(exit_pools_[k].forward(x));
    if (!x.all_finite() || !out.logits[k].all_finite()) {
      throw Error(ErrorCode::NonFiniteActivation, "exit " + std::to_string(k + 1));
    }
    out.features[k] = x;
  }
  has_forward_ = true;
  return out;
}

Tensor MultiExitNet::backward(const std::array<Tensor, kNumExits>& logit_grads,
                              const std::array<Tensor, kNumExits>& feature_grads) {
  if (!has_forward_) throw Error(ErrorCode::GradientUnavailable, "backward without forward");
  Tensor carry;
  for (int k = kNumExits - 1; k >= 0; --k) {
    Tensor g;
    if (logit_grads[k].size() > 0) g = exit_pools_[k].backward(heads_[k].backward(logit_grads[k]));
    if (feature_grads[k].size() > 0) {
      if (g.size() == 0) g = feature_grads[k];
      else add_inplace(g, feature_grads[k]);
    }
    if (carry.size() > 0) {
      if (g.size() == 0) g = std::move(carry);
      else add_inplace(g, carry);
    }
    if (g.size() == 0) {
      carry = Tensor();
      continue;
    }
    carry = stages_[k][0].backward(stages_[k][1].backward(g));
  }
  if (carry.size() == 0) return carry;
  return stem_conv_.backward(stem_bn_.backward(stem_relu_.backward(stem_pool_.backward(carry))));
}

Tensor MultiExitNet::project(const Tensor& exit4_features) {
  return proj_norm_.forward(proj_fc2_.forward(proj_relu_.forward(proj_fc1_.forward(proj_pool_.forward(exit4_features)))));
}

Tensor MultiExitNet::project_backward(const Tensor& grad_embeddings) {
  return proj_pool_.backward(
      proj_fc1_.backward(proj_relu_.backward(proj_fc2_.backward(proj_norm_.backward(grad_embeddings)))));
}

Tensor MultiExitNet::exit_feature_gradient(int k, const Tensor& logit_grad) {
  if (!has_forward_) throw Error(ErrorCode::GradientUnavailable, "no forward pass recorded");
  if (k < 1 || k > kNumExits) throw Error(ErrorCode::BadConfig, "exit index out of range");
  // Route through a copy of the head so parameter gradients stay untouched.
  nn::Linear head = heads_[k - 1];
  nn::GlobalAvgPool pool = exit_pools_[k - 1];
  Tensor g = pool.backward(head.backward(logit_grad));
  if (!g.all_finite()) throw Error(ErrorCode::GradientUnavailable, "non-finite feature gradient");
  return g;
}

ExitHead MultiExitNet::head(int k) const {
  if (k < 1 || k > kNumExits) throw Error(ErrorCode::BadConfig, "exit index out of range");
  return {k, heads_[k - 1].weight().value, heads_[k - 1].bias().value};
}

nn::ParameterList MultiExitNet::backbone_parameters() {
  nn::ParameterList out;
  stem_conv_.collect("stem.conv", out);
  stem_bn_.collect("stem.bn", out);
  for (int k = 0; k < kNumExits; ++k) {
    for (int b = 0; b < 2; ++b) {
      stages_[k][b].collect("stages." + std::to_string(k) + "." + std::to_string(b), out);
    }
    heads_[k].collect("exits." + std::to_string(k), out);
  }
  return out;
}

nn::ParameterList MultiExitNet::projector_parameters() {
  nn::ParameterList out;
  proj_fc1_.collect("projector.fc1", out);
  proj_fc2_.collect("projector.fc2", out);
  return out;
}

nn::ParameterList MultiExitNet::parameters() {
  auto out = backbone_parameters();
  auto proj = projector_parameters();
  out.insert(out.end(), proj.begin(), proj.end());
  return out;
}

// ------------------------------------------------------------- helpers

Tensor make_batch(std::span<const Image* const> images) {
  if (images.empty()) throw Error(ErrorCode::EmptyList, "empty batch");
  const int h = images[0]->height, w = images[0]->width;
  Tensor batch({static_cast<int>(images.size()), 1, h, w});
  for (std::size_t i = 0; i < images.size(); ++i) {
    if (images[i]->height != h || images[i]->width != w) throw Error(ErrorCode::ShapeMismatch, "mixed image sizes");
    std::copy(images[i]->values.begin(), images[i]->values.end(), batch.data() + i * h * w);
  }
  return batch;
}

MultiExitOutput forward_multi_exit(const Image& image, MultiExitNet& net) {
  const Image* ptr = &image;
  auto batch = net.forward(make_batch(std::span<const Image* const>(&ptr, 1)), nn::Mode::Eval);
  MultiExitOutput out;
  for (int k = 0; k < kNumExits; ++k) {
    const auto& f = batch.features[k];
    out.features[k] = Tensor({f.dim(1), f.dim(2), f.dim(3)});
    std::copy(f.data(), f.data() + f.size(), out.features[k].data());
    out.logits[k].assign(batch.logits[k].data(), batch.logits[k].data() + batch.logits[k].size());
  }
  return out;
}

// -------------------------------------------------------------- losses

double softmax_cross_entropy(std::span<const double> logits, int label, std::vector<double>* grad) {
  if (label < 0 || static_cast<std::size_t>(label) >= logits.size()) {
    throw Error(ErrorCode::BadConfig, "label out of range");
  }
  double max = logits[0];
  for (double v : logits) max = std::max(max, v);
  double sum = 0.0;
  for (double v : logits) sum += std::exp(v - max);
  const double log_z = max + std::log(sum);
  if (grad) {
    grad->resize(logits.size());
    for (std::size_t c = 0; c < logits.size(); ++c) {
      (*grad)[c] = std::exp(logits[c] - log_z) - (static_cast<int>(c) == label ? 1.0 : 0.0);
    }
  }
  return log_z - logits[label];
}

double multi_exit_ce_loss(const std::array<std::vector<double>, kNumExits>& logits, int label, ExitLogitGrads* grads) {
  double total = 0.0;
  for (int k = 0; k < kNumExits; ++k) {
    total += softmax_cross_entropy(logits[k], label, grads ? &grads->grads[k] : nullptr);
  }
  return total;
}

double multi_exit_ce_loss(const MultiExitOutput& out, int label, ExitLogitGrads* grads) {
  return multi_exit_ce_loss(out.logits, label, grads);
}

namespace detail {

double supcon_loss_unchecked(const std::vector<std::vector<double>>& z, const std::vector<int>& labels,
                             double temperature, std::vector<std::vector<double>>* grads) {
  const std::size_t n = z.size();
  const std::size_t d = n ? z[0].size() : 0;
  std::vector<double> sim(n * n);
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t j = 0; j < n; ++j) {
      double dot = 0.0;
      for (std::size_t c = 0; c < d; ++c) dot += z[i][c] * z[j][c];
      sim[i * n + j] = dot / temperature;
    }
  }
  if (grads) grads->assign(n, std::vector<double>(d, 0.0));

  double loss = 0.0;
  std::vector<double> coef(n);
  for (std::size_t i = 0; i < n; ++i) {
    double max = -std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < n; ++a) {
      if (a != i) max = std::max(max, sim[i * n + a]);
    }
    double denom = 0.0;
    for (std::size_t a = 0; a < n; ++a) {
      if (a != i) denom += std::exp(sim[i * n + a] - max);
    }
    const double log_denom = max + std::log(denom);
    std::size_t positives = 0;
    double pos_sum = 0.0;
    for (std::size_t p = 0; p < n; ++p) {
      if (p != i && labels[p] == labels[i]) {
        ++positives;
        pos_sum += sim[i * n + p];
      }
    }
    loss += -(pos_sum / static_cast<double>(positives)) + log_denom;

    if (grads) {
      // d term_i / d sim[i][a] = softmax_a - [a in P(i)] / |P(i)|
      for (std::size_t a = 0; a < n; ++a) {
        coef[a] = 0.0;
        if (a == i) continue;
        coef[a] = std::exp(sim[i * n + a] - log_denom);
        if (labels[a] == labels[i]) coef[a] -= 1.0 / static_cast<double>(positives);
      }
      for (std::size_t a = 0; a < n; ++a) {
        if (a == i) continue;
        const double c = coef[a] / temperature;
        for (std::size_t k = 0; k < d; ++k) {
          (*grads)[i][k] += c * z[a][k];
          (*grads)[a][k] += c * z[i][k];
        }
      }
    }
  }
  return loss;
}

}  // namespace detail

double supcon_loss(const std::vector<std::vector<double>>& embeddings, const std::vector<int>& labels,
                   double temperature, std::vector<std::vector<double>>* grads) {
  if (embeddings.size() < 2 || labels.size() != embeddings.size()) {
    throw Error(ErrorCode::NoPositivePair, "need >= 2 labelled embeddings");
  }
  for (const auto& e : embeddings) {
    double sq = 0.0;
    for (double v : e) sq += v * v;
    if (std::abs(std::sqrt(sq) - 1.0) > 1e-6) throw Error(ErrorCode::UnnormalizedEmbedding, "embedding norm != 1");
  }
  for (std::size_t i = 0; i < labels.size(); ++i) {
    bool found = false;
    for (std::size_t j = 0; j < labels.size() && !found; ++j) found = j != i && labels[j] == labels[i];
    if (!found) throw Error(ErrorCode::NoPositivePair, "anchor " + std::to_string(i) + " has no positive");
  }
  return detail::supcon_loss_unchecked(embeddings, labels, temperature, grads);
}

}  // namespace amecam
