#pragma once

#include <array>
#include <cstdint>
#include <optional>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "amecam/nn/layers.hpp"
#include "amecam/tensor.hpp"

namespace amecam {

inline constexpr int kNumExits = 4;

struct BackboneConfig {
  std::array<int, kNumExits> stage_channels{64, 128, 256, 512};
  int num_classes = 2;
  int input_size = 128;
  int num_exits = kNumExits;
  int projector_dim = 64;

  void validate() const;
  // Spatial size of exit k (1-based): input_size / 2^(k+1).
  int exit_size(int k) const { return input_size >> (k + 1); }
  bool operator==(const BackboneConfig&) const = default;
};

nlohmann::json to_json(const BackboneConfig& c);
BackboneConfig backbone_from_json(const nlohmann::json& j);

// Linear classifier applied to the global average of one exit's features.
struct ExitHead {
  int exit_index = 1;  // 1..4
  Tensor weight;       // [num_classes, C_k]
  Tensor bias;         // [num_classes]

  int channels() const { return weight.dim(1); }
  int num_classes() const { return weight.dim(0); }
};

// Single-image view of the four exits.
struct MultiExitOutput {
  std::array<Tensor, kNumExits> features;  // [C_k, H_k, W_k]
  std::array<std::vector<double>, kNumExits> logits;
};

// Batched training view; features are NCHW, logits [N, num_classes].
struct MultiExitBatch {
  std::array<Tensor, kNumExits> features;
  std::array<Tensor, kNumExits> logits;
};

// ResNet-18 topology (7x7/2 stem, 3x3/2 max-pool, four stages of two basic
// blocks) with a GAP+linear classifier after every stage and an MLP projector
// on the last stage used for contrastive pretraining.
class MultiExitNet {
 public:
  explicit MultiExitNet(BackboneConfig cfg = {}, std::uint64_t seed = 0);

  const BackboneConfig& config() const { return cfg_; }

  MultiExitBatch forward(const Tensor& images, nn::Mode mode);
  // Backpropagates per-exit logit gradients (and optional direct feature
  // gradients) through heads and backbone, accumulating parameter gradients.
  // Empty tensors are treated as zero. Returns the gradient w.r.t. the input.
  Tensor backward(const std::array<Tensor, kNumExits>& logit_grads,
                  const std::array<Tensor, kNumExits>& feature_grads = {});

  // Projector head over GAP(exit-4 features); output rows are unit vectors.
  Tensor project(const Tensor& exit4_features);
  Tensor project_backward(const Tensor& grad_embeddings);

  // Gradient of the exit-k logits w.r.t. that exit's features, routed only
  // through the exit head. Requires a preceding forward().
  Tensor exit_feature_gradient(int k, const Tensor& logit_grad);

  ExitHead head(int k) const;

  nn::ParameterList parameters();
  nn::ParameterList backbone_parameters();
  nn::ParameterList projector_parameters();

 private:
  BackboneConfig cfg_;
  nn::Conv2d stem_conv_;
  nn::BatchNorm2d stem_bn_;
  nn::ReLU stem_relu_;
  nn::MaxPool2d stem_pool_;
  std::array<std::array<nn::BasicBlock, 2>, kNumExits> stages_;
  std::array<nn::GlobalAvgPool, kNumExits> exit_pools_;
  std::array<nn::Linear, kNumExits> heads_;
  nn::GlobalAvgPool proj_pool_;
  nn::Linear proj_fc1_, proj_fc2_;
  nn::ReLU proj_relu_;
  nn::L2Normalize proj_norm_;
  bool has_forward_ = false;
};

// Packs single-channel images into an [N,1,S,S] batch.
Tensor make_batch(std::span<const Image* const> images);

// Inference-mode forward of one image.
MultiExitOutput forward_multi_exit(const Image& image, MultiExitNet& net);

// Softmax cross-entropy of one logit vector; optionally writes d/dlogits.
double softmax_cross_entropy(std::span<const double> logits, int label, std::vector<double>* grad = nullptr);

struct ExitLogitGrads {
  std::array<std::vector<double>, kNumExits> grads;
};

// Unweighted sum over exits of softmax cross-entropy.
double multi_exit_ce_loss(const std::array<std::vector<double>, kNumExits>& logits, int label,
                          ExitLogitGrads* grads = nullptr);
double multi_exit_ce_loss(const MultiExitOutput& out, int label, ExitLogitGrads* grads = nullptr);

// Supervised contrastive loss summed over anchors. Embeddings must be unit
// vectors (within 1e-6) and every anchor needs a same-class partner.
double supcon_loss(const std::vector<std::vector<double>>& embeddings, const std::vector<int>& labels,
                   double temperature, std::vector<std::vector<double>>* grads = nullptr);

namespace detail {
// supcon_loss without the unit-norm precondition; gradients treat each
// embedding as a free vector.
double supcon_loss_unchecked(const std::vector<std::vector<double>>& embeddings, const std::vector<int>& labels,
                             double temperature, std::vector<std::vector<double>>* grads);
}  // namespace detail

}  // namespace amecam
