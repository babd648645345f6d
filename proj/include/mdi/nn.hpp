#pragma once

#include <memory>
#include <string>
#include <vector>

#include "mdi/common.hpp"
#include "mdi/rng.hpp"
#include "mdi/tensor.hpp"

namespace mdi::nn {

/// A learnable array plus its gradient accumulator.
struct Param {
  std::string name;
  std::vector<int> shape;
  FloatVec value;
  FloatVec grad;

  std::size_t size() const { return value.size(); }
  void zero_grad() { std::fill(grad.begin(), grad.end(), 0.0f); }
};

/// Base class for layers with cached activations. forward() must be called
/// before backward(); backward() accumulates parameter gradients and returns
/// the gradient with respect to the layer input.
class Layer {
 public:
  virtual ~Layer() = default;
  virtual Tensor forward(const Tensor& x, bool training) = 0;
  virtual Tensor backward(const Tensor& dy) = 0;
  virtual void collect_params(std::vector<Param*>&) {}
  virtual std::string descriptor() const = 0;
};

class Dense : public Layer {
 public:
  Dense(const std::string& name, int in_dim, int out_dim, Rng& rng,
        float init_scale = -1.0f);
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& dy) override;
  void collect_params(std::vector<Param*>& out) override;
  std::string descriptor() const override;

 private:
  int in_dim_, out_dim_;
  Param w_, b_;
  Tensor x_;  // cached input, flattened
};

class Conv2d : public Layer {
 public:
  Conv2d(const std::string& name, int in_c, int out_c, int kernel, int stride,
         int pad, Rng& rng);
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& dy) override;
  void collect_params(std::vector<Param*>& out) override;
  std::string descriptor() const override;

  int out_h(int h) const { return (h + 2 * pad_ - kernel_) / stride_ + 1; }
  int out_w(int w) const { return (w + 2 * pad_ - kernel_) / stride_ + 1; }

 private:
  void im2col(const float* x, int h, int w, float* col) const;
  void col2im_accum(const float* col, int h, int w, float* dx) const;

  int in_c_, out_c_, kernel_, stride_, pad_;
  Param w_, b_;  // w: out_c x (in_c*k*k)
  Tensor x_;
};

/// Batch normalization over the channel axis (N, H, W reduced). With
/// 1x1 spatial dims this doubles as BatchNorm1d. Eval mode normalizes with
/// running statistics and backpropagates only to the input.
class BatchNorm : public Layer {
 public:
  BatchNorm(const std::string& name, int channels, float momentum = 0.1f,
            float eps = 1e-5f);
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& dy) override;
  void collect_params(std::vector<Param*>& out) override;
  std::string descriptor() const override;

 private:
  int channels_;
  float momentum_, eps_;
  Param gamma_, beta_, running_mean_, running_var_;  // running stats are
                                                     // state, not trained
  Tensor xhat_;
  std::vector<float> inv_std_;
  bool training_mode_ = false;
};

class ReLU : public Layer {
 public:
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& dy) override;
  std::string descriptor() const override { return "relu"; }

 private:
  Tensor y_;
};

class LeakyReLU : public Layer {
 public:
  explicit LeakyReLU(float slope = 0.2f) : slope_(slope) {}
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& dy) override;
  std::string descriptor() const override;

 private:
  float slope_;
  Tensor x_;
};

class Tanh : public Layer {
 public:
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& dy) override;
  std::string descriptor() const override { return "tanh"; }

 private:
  Tensor y_;
};

/// Nearest-neighbour 2x upsampling.
class Upsample2x : public Layer {
 public:
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& dy) override;
  std::string descriptor() const override { return "up2x"; }

 private:
  int in_h_ = 0, in_w_ = 0, c_ = 0;
};

class GlobalAvgPool : public Layer {
 public:
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& dy) override;
  std::string descriptor() const override { return "gap"; }

 private:
  int h_ = 0, w_ = 0, c_ = 0;
};

/// Reinterprets N x (c*h*w) as N x c x h x w (and back on backward).
class Reshape : public Layer {
 public:
  Reshape(int c, int h, int w) : c_(c), h_(h), w_(w) {}
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& dy) override;
  std::string descriptor() const override;

 private:
  int c_, h_, w_;
  int in_c_ = 0, in_h_ = 0, in_w_ = 0;
};

class Sequential : public Layer {
 public:
  Sequential() = default;
  void add(std::unique_ptr<Layer> layer) { layers_.push_back(std::move(layer)); }
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& dy) override;
  void collect_params(std::vector<Param*>& out) override;
  std::string descriptor() const override;
  std::size_t size() const { return layers_.size(); }

 private:
  std::vector<std::unique_ptr<Layer>> layers_;
};

/// Pre-activation-free basic residual block: conv-bn-relu-conv-bn plus a
/// projection shortcut when shape changes, ReLU after the sum.
class ResidualBlock : public Layer {
 public:
  ResidualBlock(const std::string& name, int in_c, int out_c, int stride,
                Rng& rng);
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& dy) override;
  void collect_params(std::vector<Param*>& out) override;
  std::string descriptor() const override;

 private:
  Sequential main_;
  std::unique_ptr<Sequential> projection_;  // null for identity shortcut
  Tensor sum_;                              // pre-ReLU sum, cached for mask
};

// ---- losses -------------------------------------------------------------

/// Row-wise softmax of N x C logits.
Tensor softmax_rows(const Tensor& logits);

/// Mean cross-entropy of probabilities against integer labels. If dlogits is
/// non-null it receives (probs - onehot) / N, the gradient with respect to
/// the logits.
float cross_entropy(const Tensor& probs, const std::vector<int>& labels,
                    Tensor* dlogits);

// ---- optimizers ----------------------------------------------------------

class Optimizer {
 public:
  virtual ~Optimizer() = default;
  virtual void step(const std::vector<Param*>& params) = 0;
  /// Flat state vectors for checkpointing, one per tracked slot.
  virtual std::vector<std::vector<float>> state() const = 0;
  virtual void set_state(const std::vector<std::vector<float>>& s) = 0;
  virtual std::int64_t step_count() const = 0;
  virtual void set_step_count(std::int64_t t) = 0;
};

class Sgd : public Optimizer {
 public:
  Sgd(float lr, float momentum, float weight_decay)
      : lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {}
  void step(const std::vector<Param*>& params) override;
  std::vector<std::vector<float>> state() const override { return velocity_; }
  void set_state(const std::vector<std::vector<float>>& s) override {
    velocity_ = s;
  }
  std::int64_t step_count() const override { return t_; }
  void set_step_count(std::int64_t t) override { t_ = t; }
  void set_lr(float lr) { lr_ = lr; }

 private:
  float lr_, momentum_, weight_decay_;
  std::int64_t t_ = 0;
  std::vector<std::vector<float>> velocity_;
};

class Adam : public Optimizer {
 public:
  Adam(float lr, float beta1, float beta2, float eps = 1e-8f)
      : lr_(lr), beta1_(beta1), beta2_(beta2), eps_(eps) {}
  void step(const std::vector<Param*>& params) override;
  std::vector<std::vector<float>> state() const override;
  void set_state(const std::vector<std::vector<float>>& s) override;
  std::int64_t step_count() const override { return t_; }
  void set_step_count(std::int64_t t) override { t_ = t; }

 private:
  float lr_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
  std::vector<std::vector<float>> m_, v_;
};

// ---- utilities -----------------------------------------------------------

void zero_grads(const std::vector<Param*>& params);

/// Clamps every parameter value into [-c, c]; the weight constraint of a
/// Wasserstein critic.
void clip_params(const std::vector<Param*>& params, float c);

/// Digest over parameter names, shapes and values.
std::string params_digest(const std::vector<Param*>& params);

}  // namespace mdi::nn
