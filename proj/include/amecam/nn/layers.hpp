#pragma once

// Minimal layer library with explicit forward/backward passes. Each layer
// caches what its backward pass needs from the most recent forward call, so a
// layer instance has a single owner and forward/backward must be paired.

#include <cstdint>
#include <random>
#include <string>
#include <vector>

#include "amecam/tensor.hpp"

namespace amecam::nn {

enum class Mode { Train, Eval };

struct Parameter {
  Tensor value;
  Tensor grad;
  // Buffers (e.g. batch-norm running statistics) are checkpointed but never
  // touched by optimizers.
  bool is_buffer = false;

  explicit Parameter(std::vector<int> shape = {}, bool buffer = false)
      : value(shape), grad(buffer ? std::vector<int>{} : shape), is_buffer(buffer) {}
  void zero_grad() { grad.fill(0.0f); }
};

struct NamedParameter {
  std::string name;
  Parameter* param;
};

using ParameterList = std::vector<NamedParameter>;

inline std::string join_name(const std::string& prefix, const std::string& name) {
  return prefix.empty() ? name : prefix + "." + name;
}

using Rng = std::mt19937_64;

class Conv2d {
 public:
  Conv2d() = default;
  Conv2d(int in_channels, int out_channels, int kernel, int stride, int padding, bool bias);

  void init_kaiming(Rng& rng);
  void init_zero();

  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& grad_out);
  void collect(const std::string& prefix, ParameterList& out);

  int in_channels() const { return in_; }
  int out_channels() const { return out_; }
  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }

 private:
  int in_ = 0, out_ = 0, kernel_ = 1, stride_ = 1, padding_ = 0;
  bool has_bias_ = false;
  Parameter weight_, bias_;
  Tensor input_;
  std::vector<float> columns_;
  int out_h_ = 0, out_w_ = 0;

  void im2col(const Tensor& x, int sample);
};

class BatchNorm2d {
 public:
  BatchNorm2d() = default;
  explicit BatchNorm2d(int channels);

  Tensor forward(const Tensor& x, Mode mode);
  Tensor backward(const Tensor& grad_out);
  void collect(const std::string& prefix, ParameterList& out);

 private:
  int channels_ = 0;
  float momentum_ = 0.1f;
  float eps_ = 1e-5f;
  Parameter gamma_, beta_, running_mean_, running_var_;
  Mode last_mode_ = Mode::Eval;
  Tensor normalized_;
  std::vector<float> inv_std_;
};

class ReLU {
 public:
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& grad_out) const;

 private:
  std::vector<std::uint8_t> active_;
};

class MaxPool2d {
 public:
  MaxPool2d(int kernel = 3, int stride = 2, int padding = 1) : kernel_(kernel), stride_(stride), padding_(padding) {}
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& grad_out) const;

 private:
  int kernel_, stride_, padding_;
  std::vector<int> input_shape_;
  std::vector<std::size_t> argmax_;
};

// NCHW -> NC mean over spatial positions.
class GlobalAvgPool {
 public:
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& grad_out) const;

 private:
  std::vector<int> input_shape_;
};

class Linear {
 public:
  Linear() = default;
  Linear(int in_features, int out_features);

  void init_uniform(Rng& rng);
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& grad_out);
  void collect(const std::string& prefix, ParameterList& out);

  int in_features() const { return in_; }
  int out_features() const { return out_; }
  Parameter& weight() { return weight_; }
  Parameter& bias() { return bias_; }
  const Parameter& weight() const { return weight_; }
  const Parameter& bias() const { return bias_; }

 private:
  int in_ = 0, out_ = 0;
  Parameter weight_, bias_;
  Tensor input_;
};

// Two 3x3 conv-bn pairs with an identity or 1x1 projection shortcut.
class BasicBlock {
 public:
  BasicBlock() = default;
  BasicBlock(int in_channels, int out_channels, int stride);

  void init(Rng& rng);
  Tensor forward(const Tensor& x, Mode mode);
  Tensor backward(const Tensor& grad_out);
  void collect(const std::string& prefix, ParameterList& out);

 private:
  Conv2d conv1_, conv2_, down_conv_;
  BatchNorm2d bn1_, bn2_, down_bn_;
  ReLU relu1_, relu_out_;
  bool has_downsample_ = false;
};

// Per-sample L2 normalization of an N x D tensor, with backward.
class L2Normalize {
 public:
  Tensor forward(const Tensor& x);
  Tensor backward(const Tensor& grad_out) const;

 private:
  Tensor output_;
  std::vector<float> norms_;
};

void zero_grads(const ParameterList& params);

}  // namespace amecam::nn
