#include "amecam/nn/layers.hpp"

#include <Eigen/Core>
#include <cmath>
#include <limits>

#include "amecam/error.hpp"

namespace amecam::nn {

namespace {

using RowMatrix = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatrixMap = Eigen::Map<RowMatrix>;
using ConstMatrixMap = Eigen::Map<const RowMatrix>;

void require_rank4(const Tensor& x, const char* who) {
  if (x.rank() != 4) throw Error(ErrorCode::ShapeMismatch, std::string(who) + " expects NCHW, got " + x.shape_string());
}

}  // namespace

void zero_grads(const ParameterList& params) {
  for (const auto& p : params) {
    if (!p.param->is_buffer) p.param->zero_grad();
  }
}

// ---------------------------------------------------------------- Conv2d

Conv2d::Conv2d(int in_channels, int out_channels, int kernel, int stride, int padding, bool bias)
    : in_(in_channels), out_(out_channels), kernel_(kernel), stride_(stride), padding_(padding),
      has_bias_(bias), weight_({out_channels, in_channels, kernel, kernel}),
      bias_(bias ? std::vector<int>{out_channels} : std::vector<int>{0}) {}

void Conv2d::init_kaiming(Rng& rng) {
  const float fan_in = static_cast<float>(in_ * kernel_ * kernel_);
  std::normal_distribution<float> dist(0.0f, std::sqrt(2.0f / fan_in));
  for (auto& w : weight_.value.storage()) w = dist(rng);
  bias_.value.fill(0.0f);
}

void Conv2d::init_zero() {
  weight_.value.fill(0.0f);
  bias_.value.fill(0.0f);
}

void Conv2d::im2col(const Tensor& x, int s) {
  const int h = x.dim(2), w = x.dim(3);
  const std::size_t plane = static_cast<std::size_t>(out_h_) * out_w_;
  columns_.assign(static_cast<std::size_t>(in_) * kernel_ * kernel_ * plane, 0.0f);
  // columns_[r, p], r = (c, ky, kx), p = (oy, ox)
  for (int c = 0; c < in_; ++c) {
    const float* src_plane = x.data() + (static_cast<std::size_t>(s) * in_ + c) * h * w;
    for (int ky = 0; ky < kernel_; ++ky) {
      for (int kx = 0; kx < kernel_; ++kx) {
        const std::size_t r = (static_cast<std::size_t>(c) * kernel_ + ky) * kernel_ + kx;
        float* row = columns_.data() + r * plane;
        for (int oy = 0; oy < out_h_; ++oy) {
          const int iy = oy * stride_ - padding_ + ky;
          if (iy < 0 || iy >= h) continue;
          const float* src = src_plane + static_cast<std::size_t>(iy) * w;
          float* dst = row + static_cast<std::size_t>(oy) * out_w_;
          for (int ox = 0; ox < out_w_; ++ox) {
            const int ix = ox * stride_ - padding_ + kx;
            if (ix >= 0 && ix < w) dst[ox] = src[ix];
          }
        }
      }
    }
  }
}

Tensor Conv2d::forward(const Tensor& x) {
  require_rank4(x, "Conv2d");
  if (x.dim(1) != in_) {
    throw Error(ErrorCode::ChannelMismatch, "Conv2d expects " + std::to_string(in_) + " channels, got " + x.shape_string());
  }
  const int n = x.dim(0), h = x.dim(2), w = x.dim(3);
  out_h_ = (h + 2 * padding_ - kernel_) / stride_ + 1;
  out_w_ = (w + 2 * padding_ - kernel_) / stride_ + 1;
  input_ = x;

  const int rows = in_ * kernel_ * kernel_;
  const auto plane = static_cast<Eigen::Index>(out_h_) * out_w_;
  const ConstMatrixMap weights(weight_.value.data(), out_, rows);
  Tensor out({n, out_, out_h_, out_w_});
  // One sample at a time keeps the column buffer small at full resolution.
  for (int s = 0; s < n; ++s) {
    im2col(x, s);
    MatrixMap y(out.data() + static_cast<std::size_t>(s) * out_ * plane, out_, plane);
    y.noalias() = weights * ConstMatrixMap(columns_.data(), rows, plane);
    if (has_bias_) {
      for (int o = 0; o < out_; ++o) y.row(o).array() += bias_.value[o];
    }
  }
  return out;
}

Tensor Conv2d::backward(const Tensor& grad_out) {
  const int n = input_.dim(0), h = input_.dim(2), w = input_.dim(3);
  const int rows = in_ * kernel_ * kernel_;
  const auto plane = static_cast<Eigen::Index>(out_h_) * out_w_;
  if (grad_out.shape() != std::vector<int>{n, out_, out_h_, out_w_}) {
    throw Error(ErrorCode::ShapeMismatch, "Conv2d backward got " + grad_out.shape_string());
  }

  const ConstMatrixMap weights(weight_.value.data(), out_, rows);
  MatrixMap dweights(weight_.grad.data(), out_, rows);
  RowMatrix dcols(rows, plane);
  Tensor dx(input_.shape());
  for (int s = 0; s < n; ++s) {
    const ConstMatrixMap dy(grad_out.data() + static_cast<std::size_t>(s) * out_ * plane, out_, plane);
    im2col(input_, s);
    dweights.noalias() += dy * ConstMatrixMap(columns_.data(), rows, plane).transpose();
    if (has_bias_) {
      for (int o = 0; o < out_; ++o) bias_.grad[o] += dy.row(o).sum();
    }
    dcols.noalias() = weights.transpose() * dy;

    for (int c = 0; c < in_; ++c) {
      float* dst_plane = dx.data() + (static_cast<std::size_t>(s) * in_ + c) * h * w;
      for (int ky = 0; ky < kernel_; ++ky) {
        for (int kx = 0; kx < kernel_; ++kx) {
          const std::size_t r = (static_cast<std::size_t>(c) * kernel_ + ky) * kernel_ + kx;
          const float* row = dcols.data() + r * plane;
          for (int oy = 0; oy < out_h_; ++oy) {
            const int iy = oy * stride_ - padding_ + ky;
            if (iy < 0 || iy >= h) continue;
            const float* src = row + static_cast<std::size_t>(oy) * out_w_;
            float* dst = dst_plane + static_cast<std::size_t>(iy) * w;
            for (int ox = 0; ox < out_w_; ++ox) {
              const int ix = ox * stride_ - padding_ + kx;
              if (ix >= 0 && ix < w) dst[ix] += src[ox];
            }
          }
        }
      }
    }
  }
  return dx;
}

void Conv2d::collect(const std::string& prefix, ParameterList& out) {
  out.push_back({join_name(prefix, "weight"), &weight_});
  if (has_bias_) out.push_back({join_name(prefix, "bias"), &bias_});
}

// ----------------------------------------------------------- BatchNorm2d

BatchNorm2d::BatchNorm2d(int channels)
    : channels_(channels), gamma_({channels}), beta_({channels}),
      running_mean_({channels}, true), running_var_({channels}, true) {
  gamma_.value.fill(1.0f);
  running_var_.value.fill(1.0f);
}

Tensor BatchNorm2d::forward(const Tensor& x, Mode mode) {
  require_rank4(x, "BatchNorm2d");
  if (x.dim(1) != channels_) throw Error(ErrorCode::ChannelMismatch, "BatchNorm2d got " + x.shape_string());
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  const double count = static_cast<double>(n) * plane;
  last_mode_ = mode;
  normalized_ = Tensor(x.shape());
  inv_std_.assign(c, 0.0f);
  Tensor out(x.shape());

  for (int ch = 0; ch < c; ++ch) {
    float mean, var;
    if (mode == Mode::Train) {
      double sum = 0.0, sq = 0.0;
      for (int s = 0; s < n; ++s) {
        const float* p = x.data() + (static_cast<std::size_t>(s) * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) sum += p[i];
      }
      const double m = sum / count;
      for (int s = 0; s < n; ++s) {
        const float* p = x.data() + (static_cast<std::size_t>(s) * c + ch) * plane;
        for (std::size_t i = 0; i < plane; ++i) sq += (p[i] - m) * (p[i] - m);
      }
      mean = static_cast<float>(m);
      var = static_cast<float>(sq / count);
      const float unbiased = count > 1 ? static_cast<float>(sq / (count - 1)) : var;
      running_mean_.value[ch] = (1 - momentum_) * running_mean_.value[ch] + momentum_ * mean;
      running_var_.value[ch] = (1 - momentum_) * running_var_.value[ch] + momentum_ * unbiased;
    } else {
      mean = running_mean_.value[ch];
      var = running_var_.value[ch];
    }
    const float inv = 1.0f / std::sqrt(var + eps_);
    inv_std_[ch] = inv;
    const float g = gamma_.value[ch], b = beta_.value[ch];
    for (int s = 0; s < n; ++s) {
      const std::size_t off = (static_cast<std::size_t>(s) * c + ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        const float xh = (x[off + i] - mean) * inv;
        normalized_[off + i] = xh;
        out[off + i] = g * xh + b;
      }
    }
  }
  return out;
}

Tensor BatchNorm2d::backward(const Tensor& grad_out) {
  const int n = grad_out.dim(0), c = grad_out.dim(1);
  const std::size_t plane = static_cast<std::size_t>(grad_out.dim(2)) * grad_out.dim(3);
  const double count = static_cast<double>(n) * plane;
  Tensor dx(grad_out.shape());
  for (int ch = 0; ch < c; ++ch) {
    double sum_dy = 0.0, sum_dy_xh = 0.0;
    for (int s = 0; s < n; ++s) {
      const std::size_t off = (static_cast<std::size_t>(s) * c + ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        sum_dy += grad_out[off + i];
        sum_dy_xh += static_cast<double>(grad_out[off + i]) * normalized_[off + i];
      }
    }
    gamma_.grad[ch] += static_cast<float>(sum_dy_xh);
    beta_.grad[ch] += static_cast<float>(sum_dy);
    const float g = gamma_.value[ch] * inv_std_[ch];
    const float mean_dy = static_cast<float>(sum_dy / count);
    const float mean_dy_xh = static_cast<float>(sum_dy_xh / count);
    for (int s = 0; s < n; ++s) {
      const std::size_t off = (static_cast<std::size_t>(s) * c + ch) * plane;
      for (std::size_t i = 0; i < plane; ++i) {
        if (last_mode_ == Mode::Train) {
          dx[off + i] = g * (grad_out[off + i] - mean_dy - normalized_[off + i] * mean_dy_xh);
        } else {
          dx[off + i] = g * grad_out[off + i];
        }
      }
    }
  }
  return dx;
}

void BatchNorm2d::collect(const std::string& prefix, ParameterList& out) {
  out.push_back({join_name(prefix, "weight"), &gamma_});
  out.push_back({join_name(prefix, "bias"), &beta_});
  out.push_back({join_name(prefix, "running_mean"), &running_mean_});
  out.push_back({join_name(prefix, "running_var"), &running_var_});
}

// ------------------------------------------------------------------ ReLU

Tensor ReLU::forward(const Tensor& x) {
  Tensor out(x.shape());
  active_.resize(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    active_[i] = x[i] > 0.0f;
    out[i] = active_[i] ? x[i] : 0.0f;
  }
  return out;
}

Tensor ReLU::backward(const Tensor& grad_out) const {
  Tensor dx(grad_out.shape());
  for (std::size_t i = 0; i < dx.size(); ++i) dx[i] = active_[i] ? grad_out[i] : 0.0f;
  return dx;
}

// ------------------------------------------------------------- MaxPool2d

Tensor MaxPool2d::forward(const Tensor& x) {
  require_rank4(x, "MaxPool2d");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const int oh = (h + 2 * padding_ - kernel_) / stride_ + 1;
  const int ow = (w + 2 * padding_ - kernel_) / stride_ + 1;
  input_shape_ = x.shape();
  Tensor out({n, c, oh, ow});
  argmax_.assign(out.size(), 0);
  std::size_t o = 0;
  for (int s = 0; s < n; ++s) {
    for (int ch = 0; ch < c; ++ch) {
      const std::size_t base = (static_cast<std::size_t>(s) * c + ch) * h * w;
      for (int oy = 0; oy < oh; ++oy) {
        for (int ox = 0; ox < ow; ++ox, ++o) {
          float best = -std::numeric_limits<float>::infinity();
          std::size_t best_idx = base;
          for (int ky = 0; ky < kernel_; ++ky) {
            const int iy = oy * stride_ - padding_ + ky;
            if (iy < 0 || iy >= h) continue;
            for (int kx = 0; kx < kernel_; ++kx) {
              const int ix = ox * stride_ - padding_ + kx;
              if (ix < 0 || ix >= w) continue;
              const std::size_t idx = base + static_cast<std::size_t>(iy) * w + ix;
              if (x[idx] > best) {
                best = x[idx];
                best_idx = idx;
              }
            }
          }
          out[o] = best;
          argmax_[o] = best_idx;
        }
      }
    }
  }
  return out;
}

Tensor MaxPool2d::backward(const Tensor& grad_out) const {
  Tensor dx(input_shape_);
  for (std::size_t o = 0; o < grad_out.size(); ++o) dx[argmax_[o]] += grad_out[o];
  return dx;
}

// --------------------------------------------------------- GlobalAvgPool

Tensor GlobalAvgPool::forward(const Tensor& x) {
  require_rank4(x, "GlobalAvgPool");
  input_shape_ = x.shape();
  const int n = x.dim(0), c = x.dim(1);
  const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
  Tensor out({n, c});
  for (std::size_t i = 0; i < static_cast<std::size_t>(n) * c; ++i) {
    double sum = 0.0;
    const float* p = x.data() + i * plane;
    for (std::size_t j = 0; j < plane; ++j) sum += p[j];
    out[i] = static_cast<float>(sum / static_cast<double>(plane));
  }
  return out;
}

Tensor GlobalAvgPool::backward(const Tensor& grad_out) const {
  Tensor dx(input_shape_);
  const std::size_t plane = static_cast<std::size_t>(input_shape_[2]) * input_shape_[3];
  const float scale = 1.0f / static_cast<float>(plane);
  for (std::size_t i = 0; i < grad_out.size(); ++i) {
    float* p = dx.data() + i * plane;
    for (std::size_t j = 0; j < plane; ++j) p[j] = grad_out[i] * scale;
  }
  return dx;
}

// ---------------------------------------------------------------- Linear

Linear::Linear(int in_features, int out_features)
    : in_(in_features), out_(out_features), weight_({out_features, in_features}), bias_({out_features}) {}

void Linear::init_uniform(Rng& rng) {
  const float bound = 1.0f / std::sqrt(static_cast<float>(in_));
  std::uniform_real_distribution<float> dist(-bound, bound);
  for (auto& w : weight_.value.storage()) w = dist(rng);
  for (auto& b : bias_.value.storage()) b = dist(rng);
}

Tensor Linear::forward(const Tensor& x) {
  if (x.rank() != 2 || x.dim(1) != in_) {
    throw Error(ErrorCode::ChannelMismatch, "Linear expects [N," + std::to_string(in_) + "], got " + x.shape_string());
  }
  input_ = x;
  const int n = x.dim(0);
  Tensor out({n, out_});
  MatrixMap y(out.data(), n, out_);
  y.noalias() = ConstMatrixMap(x.data(), n, in_) * ConstMatrixMap(weight_.value.data(), out_, in_).transpose();
  for (int s = 0; s < n; ++s)
    for (int o = 0; o < out_; ++o) y(s, o) += bias_.value[o];
  return out;
}

Tensor Linear::backward(const Tensor& grad_out) {
  const int n = input_.dim(0);
  ConstMatrixMap dy(grad_out.data(), n, out_);
  MatrixMap(weight_.grad.data(), out_, in_).noalias() += dy.transpose() * ConstMatrixMap(input_.data(), n, in_);
  for (int o = 0; o < out_; ++o) bias_.grad[o] += dy.col(o).sum();
  Tensor dx({n, in_});
  MatrixMap(dx.data(), n, in_).noalias() = dy * ConstMatrixMap(weight_.value.data(), out_, in_);
  return dx;
}

void Linear::collect(const std::string& prefix, ParameterList& out) {
  out.push_back({join_name(prefix, "weight"), &weight_});
  out.push_back({join_name(prefix, "bias"), &bias_});
}

// ------------------------------------------------------------ BasicBlock

BasicBlock::BasicBlock(int in_channels, int out_channels, int stride)
    : conv1_(in_channels, out_channels, 3, stride, 1, false), conv2_(out_channels, out_channels, 3, 1, 1, false),
      bn1_(out_channels), bn2_(out_channels), has_downsample_(stride != 1 || in_channels != out_channels) {
  if (has_downsample_) {
    down_conv_ = Conv2d(in_channels, out_channels, 1, stride, 0, false);
    down_bn_ = BatchNorm2d(out_channels);
  }
}

void BasicBlock::init(Rng& rng) {
  conv1_.init_kaiming(rng);
  conv2_.init_kaiming(rng);
  if (has_downsample_) down_conv_.init_kaiming(rng);
}

Tensor BasicBlock::forward(const Tensor& x, Mode mode) {
  Tensor y = relu1_.forward(bn1_.forward(conv1_.forward(x), mode));
  y = bn2_.forward(conv2_.forward(y), mode);
  if (has_downsample_) {
    add_inplace(y, down_bn_.forward(down_conv_.forward(x), mode));
  } else {
    add_inplace(y, x);
  }
  return relu_out_.forward(y);
}

Tensor BasicBlock::backward(const Tensor& grad_out) {
  Tensor g = relu_out_.backward(grad_out);
  Tensor dx = has_downsample_ ? down_conv_.backward(down_bn_.backward(g)) : g;
  Tensor gm = conv2_.backward(bn2_.backward(g));
  gm = conv1_.backward(bn1_.backward(relu1_.backward(gm)));
  add_inplace(dx, gm);
  return dx;
}

void BasicBlock::collect(const std::string& prefix, ParameterList& out) {
  conv1_.collect(join_name(prefix, "conv1"), out);
  bn1_.collect(join_name(prefix, "bn1"), out);
  conv2_.collect(join_name(prefix, "conv2"), out);
  bn2_.collect(join_name(prefix, "bn2"), out);
  if (has_downsample_) {
    down_conv_.collect(join_name(prefix, "downsample.0"), out);
    down_bn_.collect(join_name(prefix, "downsample.1"), out);
  }
}

// ----------------------------------------------------------- L2Normalize

Tensor L2Normalize::forward(const Tensor& x) {
  const int n = x.dim(0), d = x.dim(1);
  output_ = Tensor(x.shape());
  norms_.assign(n, 0.0f);
  for (int s = 0; s < n; ++s) {
    double sq = 0.0;
    for (int j = 0; j < d; ++j) sq += static_cast<double>(x[s * d + j]) * x[s * d + j];
    const float norm = static_cast<float>(std::max(std::sqrt(sq), 1e-12));
    norms_[s] = norm;
    for (int j = 0; j < d; ++j) output_[s * d + j] = x[s * d + j] / norm;
  }
  return output_;
}

Tensor L2Normalize::backward(const Tensor& grad_out) const {
  const int n = output_.dim(0), d = output_.dim(1);
  Tensor dx(output_.shape());
  for (int s = 0; s < n; ++s) {
    double dot = 0.0;
    for (int j = 0; j < d; ++j) dot += static_cast<double>(grad_out[s * d + j]) * output_[s * d + j];
    for (int j = 0; j < d; ++j) {
      dx[s * d + j] = static_cast<float>((grad_out[s * d + j] - dot * output_[s * d + j]) / norms_[s]);
    }
  }
  return dx;
}

}  // namespace amecam::nn
