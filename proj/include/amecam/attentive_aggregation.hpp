#pragma once

#include <array>
#include <cstdint>
#include <span>
#include <vector>

#include <nlohmann/json.hpp>

#include "amecam/cam_extractor.hpp"
#include "amecam/nn/layers.hpp"
#include "amecam/tensor.hpp"

namespace amecam {

// Per-pixel convex weights over K maps, stored [K, H, W].
struct AttentionField {
  int num_maps = 0;
  int height = 0;
  int width = 0;
  std::vector<float> weights;

  AttentionField() = default;
  AttentionField(int k, int h, int w, float fill = 0.0f)
      : num_maps(k), height(h), width(w), weights(static_cast<std::size_t>(k) * h * w, fill) {}

  float& at(int k, int y, int x) { return weights[(static_cast<std::size_t>(k) * height + y) * width + x]; }
  float at(int k, int y, int x) const { return weights[(static_cast<std::size_t>(k) * height + y) * width + x]; }
};

enum class AggregationLoss { C2AM, CrossEntropy };

struct AggregationConfig {
  AggregationLoss loss = AggregationLoss::C2AM;
  double epsilon = 1e-6;
  bool freeze_backbone = true;
  int attention_hidden = 32;
  int projector_dim = 0;               // 0: fixed per-pixel-normalized features, no learned projection
  std::vector<int> feature_exits{1};  // exits (1-based) feeding fg/bg pooling; 0 is the input image
  bool warm_start = true;              // c2am arm: start attention at the lowest-loss single exit

  std::array<bool, kNumExits> feature_mask() const;
  bool uses_image_features() const;

  void validate() const;
  bool operator==(const AggregationConfig&) const = default;
};

nlohmann::json to_json(const AggregationConfig& c);
AggregationConfig aggregation_from_json(const nlohmann::json& j);

struct FgBgEmbedding {
  std::vector<double> fg;
  std::vector<double> bg;
  double fg_mass = 0.0;
  double bg_mass = 0.0;
  bool low_mass = false;  // either mass fell below epsilon * H * W
};

// Three 3x3 convolutions over [image; cam_1..cam_K] emitting K logit maps.
// The last layer starts at zero, so an untrained net attends uniformly.
class AttentionNet {
 public:
  AttentionNet() = default;
  AttentionNet(int num_maps, int hidden, std::uint64_t seed);

  Tensor forward(const Tensor& input);  // [N, 1+K, H, W] -> [N, K, H, W]
  Tensor backward(const Tensor& grad_logits);
  nn::ParameterList parameters();
  int num_maps() const { return num_maps_; }
  // Output bias `logit` on map k and 0 elsewhere; k < 0 restores the uniform start.
  void bias_toward(int k, float logit);

 private:
  int num_maps_ = 0;
  nn::Conv2d conv1_, conv2_, conv3_;
  nn::ReLU relu1_, relu2_;
};

// Multi-scale pixel features for fg/bg pooling, one sample at a time. Every
// exit's features are brought to image resolution and L2-normalized per
// pixel. With out_dim > 0 a learned 1x1 projection of each exit is summed
// (projection runs on the native grid; it commutes with bilinear upsampling)
// and the sum is normalized. With out_dim == 0 the features are used as is:
// per-exit unit blocks scaled by 1/sqrt(K) and concatenated.
class FeatureProjector {
 public:
  FeatureProjector() = default;
  static constexpr int kImageChannels = 2;

  // use[k]: whether exit k+1 contributes; unused exits get zero gradients.
  // use_image adds the input intensity as a [I, 1 - I] block.
  FeatureProjector(const std::array<int, kNumExits>& in_channels, int out_dim, std::uint64_t seed,
                   const std::array<bool, kNumExits>& use = {true, true, true, true}, bool use_image = false);

  // features[k]: [C_k, h_k, w_k] -> [d, height, width]; image is required when use_image is set.
  Tensor forward(const std::array<Tensor, kNumExits>& features, int height, int width,
                 const Image* image = nullptr);
  // Gradient w.r.t. the inputs of the last forward; accumulates projection gradients.
  std::array<Tensor, kNumExits> backward(const Tensor& grad_out);
  nn::ParameterList parameters();
  int out_dim() const;
  bool learned() const { return learned_; }

 private:
  double block_scale() const;
  int first_exit() const;

  bool learned_ = false;
  bool use_image_ = false;
  nn::Conv2d image_conv_;
  std::array<int, kNumExits> in_channels_{};
  std::array<bool, kNumExits> use_{true, true, true, true};
  std::array<nn::Conv2d, kNumExits> convs_;
  std::array<std::vector<int>, kNumExits> native_shapes_;
  Tensor raw_;     // pre-normalization features at image resolution
  Tensor output_;
};

// Linear classifier on the spatial mean of an aggregated map (ablation arm).
struct MapClassifierHead {
  std::array<double, 2> weight{};
  std::array<double, 2> bias{};
};

Tensor stack_attention_input(const Image& image, std::span<const ActivationMap> cams);

// Softmax over the map axis of an [N, K, H, W] logit tensor, for sample n.
AttentionField softmax_field(const Tensor& logits, int n);

AttentionField attention_forward(const Image& image, std::span<const ActivationMap> cams, AttentionNet& net);

// Sum_k att[k] * cam_k before normalization.
Image convex_combination(std::span<const ActivationMap> cams, const AttentionField& att);

ActivationMap attentive_aggregate(std::span<const ActivationMap> cams, const AttentionField& att);

// Foreground / background pooling of per-pixel features f ([d, H, W]) under M and 1-M.
FgBgEmbedding fg_bg_embed(const Image& map, const Tensor& features, double epsilon);

struct FgBgGradients {
  Image d_map;
  Tensor d_features;
};

FgBgGradients fg_bg_embed_backward(const Image& map, const Tensor& features, double epsilon,
                                   std::span<const double> d_fg, std::span<const double> d_bg);

struct C2amGradients {
  std::vector<std::vector<double>> fg;
  std::vector<std::vector<double>> bg;
};

// Contrastive foreground/background loss over a batch of embeddings:
// pulls foregrounds together, backgrounds together, pushes fg from bg.
double c2am_loss(const std::vector<FgBgEmbedding>& batch, double epsilon, C2amGradients* grads = nullptr);

struct MapCeGradients {
  double d_mean = 0.0;
  std::array<double, 2> d_weight{};
  std::array<double, 2> d_bias{};
};

double aggregation_ce_loss(const Image& map, int label, const MapClassifierHead& head, MapCeGradients* grads = nullptr);

// One training sample for the aggregation phase. Backbone outputs are
// precomputed because the backbone is frozen.
struct AggregationSample {
  const Image* image = nullptr;
  std::vector<ActivationMap> cams;  // K maps at image resolution
  std::array<Tensor, kNumExits> features;  // per exit [C_k, h_k, w_k]
  int label = 0;
};

// Trainable state of the aggregation phase: attention net, feature projector
// and the ablation classifier head.
class AggregationModel {
 public:
  AggregationModel() = default;
  AggregationModel(const AggregationConfig& cfg, const std::array<int, kNumExits>& exit_channels, std::uint64_t seed);

  const AggregationConfig& config() const { return cfg_; }
  AttentionNet& attention() { return attention_; }

  struct StepResult {
    double loss = 0.0;
    std::array<Tensor, kNumExits> d_features;  // per exit [N, C_k, h_k, w_k]; empty for the cross-entropy arm
  };

  // Forward + backward over a mini-batch; accumulates parameter gradients.
  StepResult train_step(std::span<const AggregationSample* const> batch);

  // c2am loss of a fixed convex combination with the same weights at every
  // pixel; no gradients.
  double c2am_loss_of(std::span<const AggregationSample* const> batch, const std::array<float, kNumExits>& weights);

  // Scores each single exit and the uniform average by mean c2am loss over
  // consecutive batches and biases the attention toward the best. Softmax
  // attention trained from the uniform start tends to lock onto whichever
  // exit wins early, which can be a worse optimum than a single exit.
  struct WarmStart {
    std::array<double, kNumExits + 1> losses{};  // exit1..exitK, uniform
    int chosen = kNumExits;                       // index into losses
  };
  WarmStart warm_start(std::span<const AggregationSample* const> samples, int batch_size);
  static constexpr float kWarmStartLogit = 3.0f;

  nn::ParameterList parameters();

  MapClassifierHead ce_head() const;

 private:
  double c2am_step(std::span<const AggregationSample* const> batch, const std::vector<AttentionField>& fields,
                   std::vector<Image>& d_maps, std::array<Tensor, kNumExits>& d_features);
  double ce_step(std::span<const AggregationSample* const> batch, const std::vector<AttentionField>& fields,
                 std::vector<Image>& d_maps);

  AggregationConfig cfg_;
  AttentionNet attention_;
  FeatureProjector projector_;
  nn::Parameter ce_weight_{{2}}, ce_bias_{{2}};
};

}  // namespace amecam
