#include "mdi/nn.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <sstream>

#include "mdi/common.hpp"
#include "mdi/digest.hpp"

namespace mdi::nn {

using RowMat =
    Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using ConstMatMap = Eigen::Map<const RowMat>;

namespace {

Param make_param(const std::string& name, std::vector<int> shape) {
  Param p;
  p.name = name;
  p.shape = std::move(shape);
  std::size_t n = 1;
  for (int d : p.shape) n *= static_cast<std::size_t>(d);
  p.value.assign(n, 0.0f);
  p.grad.assign(n, 0.0f);
  return p;
}

void fill_gaussian(Param& p, float std, Rng& rng) {
  for (auto& v : p.value) v = static_cast<float>(rng.normal() * std);
}

}  // namespace

// ---- Dense ----------------------------------------------------------------

Dense::Dense(const std::string& name, int in_dim, int out_dim, Rng& rng,
             float init_scale)
    : in_dim_(in_dim), out_dim_(out_dim) {
  check(in_dim > 0 && out_dim > 0, "dense dims must be positive");
  w_ = make_param(name + ".w", {out_dim, in_dim});
  b_ = make_param(name + ".b", {out_dim});
  float std = init_scale > 0.0f ? init_scale
                                : std::sqrt(2.0f / static_cast<float>(in_dim));
  fill_gaussian(w_, std, rng);
}

Tensor Dense::forward(const Tensor& x, bool) {
  check(x.c() * x.h() * x.w() == in_dim_, "dense: input dim ", x.c() * x.h() * x.w(),
        " != ", in_dim_);
  x_ = x;
  Tensor y = Tensor::vectors(x.n(), out_dim_);
  ConstMatMap xm(x.data(), x.n(), in_dim_);
  ConstMatMap wm(w_.value.data(), out_dim_, in_dim_);
  MatMap ym(y.data(), x.n(), out_dim_);
  ym.noalias() = xm * wm.transpose();
  Eigen::Map<const Eigen::VectorXf> bv(b_.value.data(), out_dim_);
  ym.rowwise() += bv.transpose();
  return y;
}

Tensor Dense::backward(const Tensor& dy) {
  check(dy.n() == x_.n() && dy.c() * dy.h() * dy.w() == out_dim_, "dense: bad dy shape");
  ConstMatMap dym(dy.data(), dy.n(), out_dim_);
  ConstMatMap xm(x_.data(), x_.n(), in_dim_);
  ConstMatMap wm(w_.value.data(), out_dim_, in_dim_);
  MatMap dwm(w_.grad.data(), out_dim_, in_dim_);
  dwm.noalias() += dym.transpose() * xm;
  Eigen::Map<Eigen::VectorXf> dbv(b_.grad.data(), out_dim_);
  dbv.noalias() += dym.colwise().sum().transpose();
  Tensor dx(x_.n(), x_.c(), x_.h(), x_.w());
  MatMap dxm(dx.data(), x_.n(), in_dim_);
  dxm.noalias() = dym * wm;
  return dx;
}

void Dense::collect_params(std::vector<Param*>& out) {
  out.push_back(&w_);
  out.push_back(&b_);
}

std::string Dense::descriptor() const {
  std::ostringstream os;
  os << "dense(" << in_dim_ << "->" << out_dim_ << ")";
  return os.str();
}

// ---- Conv2d ---------------------------------------------------------------

Conv2d::Conv2d(const std::string& name, int in_c, int out_c, int kernel,
               int stride, int pad, Rng& rng)
    : in_c_(in_c), out_c_(out_c), kernel_(kernel), stride_(stride), pad_(pad) {
  check(in_c > 0 && out_c > 0 && kernel > 0 && stride > 0 && pad >= 0,
        "conv2d: bad geometry");
  int fan_in = in_c * kernel * kernel;
  w_ = make_param(name + ".w", {out_c, fan_in});
  b_ = make_param(name + ".b", {out_c});
  fill_gaussian(w_, std::sqrt(2.0f / static_cast<float>(fan_in)), rng);
}

void Conv2d::im2col(const float* x, int h, int w, float* col) const {
  int oh = out_h(h), ow = out_w(w);
  int ohw = oh * ow;
  for (int ci = 0; ci < in_c_; ++ci) {
    const float* xc = x + static_cast<std::size_t>(ci) * h * w;
    for (int ky = 0; ky < kernel_; ++ky) {
      for (int kx = 0; kx < kernel_; ++kx) {
        float* row =
            col + static_cast<std::size_t>((ci * kernel_ + ky) * kernel_ + kx) *
                      ohw;
        for (int oy = 0; oy < oh; ++oy) {
          int iy = oy * stride_ - pad_ + ky;
          if (iy < 0 || iy >= h) {
            std::fill(row + oy * ow, row + (oy + 1) * ow, 0.0f);
            continue;
          }
          for (int ox = 0; ox < ow; ++ox) {
            int ix = ox * stride_ - pad_ + kx;
            row[oy * ow + ox] =
                (ix >= 0 && ix < w) ? xc[iy * w + ix] : 0.0f;
          }
        }
      }
    }
  }
}

void Conv2d::col2im_accum(const float* col, int h, int w, float* dx) const {
  int oh = out_h(h), ow = out_w(w);
  int ohw = oh * ow;
  for (int ci = 0; ci < in_c_; ++ci) {
    float* xc = dx + static_cast<std::size_t>(ci) * h * w;
    for (int ky = 0; ky < kernel_; ++ky) {
      for (int kx = 0; kx < kernel_; ++kx) {
        const float* row =
            col + static_cast<std::size_t>((ci * kernel_ + ky) * kernel_ + kx) *
                      ohw;
        for (int oy = 0; oy < oh; ++oy) {
          int iy = oy * stride_ - pad_ + ky;
          if (iy < 0 || iy >= h) continue;
          for (int ox = 0; ox < ow; ++ox) {
            int ix = ox * stride_ - pad_ + kx;
            if (ix >= 0 && ix < w) xc[iy * w + ix] += row[oy * ow + ox];
          }
        }
      }
    }
  }
}

Tensor Conv2d::forward(const Tensor& x, bool) {
  check(x.c() == in_c_, "conv2d: input channels ", x.c(), " != ", in_c_);
  x_ = x;
  int oh = out_h(x.h()), ow = out_w(x.w());
  check(oh > 0 && ow > 0, "conv2d: output collapsed to zero");
  Tensor y(x.n(), out_c_, oh, ow);
  int fan_in = in_c_ * kernel_ * kernel_;
  std::vector<float> col(static_cast<std::size_t>(fan_in) * oh * ow);
  ConstMatMap wm(w_.value.data(), out_c_, fan_in);
  Eigen::Map<const Eigen::VectorXf> bv(b_.value.data(), out_c_);
  for (int n = 0; n < x.n(); ++n) {
    im2col(x.item(n), x.h(), x.w(), col.data());
    ConstMatMap cm(col.data(), fan_in, oh * ow);
    MatMap ym(y.item(n), out_c_, oh * ow);
    ym.noalias() = wm * cm;
    ym.colwise() += bv;
  }
  return y;
}

Tensor Conv2d::backward(const Tensor& dy) {
  int oh = out_h(x_.h()), ow = out_w(x_.w());
  check(dy.n() == x_.n() && dy.c() == out_c_ && dy.h() == oh && dy.w() == ow,
        "conv2d: bad dy shape");
  int fan_in = in_c_ * kernel_ * kernel_;
  std::vector<float> col(static_cast<std::size_t>(fan_in) * oh * ow);
  std::vector<float> dcol(col.size());
  ConstMatMap wm(w_.value.data(), out_c_, fan_in);
  MatMap dwm(w_.grad.data(), out_c_, fan_in);
  Eigen::Map<Eigen::VectorXf> dbv(b_.grad.data(), out_c_);
  Tensor dx(x_.n(), x_.c(), x_.h(), x_.w());
  dx.zero();
  for (int n = 0; n < x_.n(); ++n) {
    im2col(x_.item(n), x_.h(), x_.w(), col.data());
    ConstMatMap cm(col.data(), fan_in, oh * ow);
    ConstMatMap dym(dy.item(n), out_c_, oh * ow);
    dwm.noalias() += dym * cm.transpose();
    dbv.noalias() += dym.rowwise().sum();
    MatMap dcm(dcol.data(), fan_in, oh * ow);
    dcm.noalias() = wm.transpose() * dym;
    col2im_accum(dcol.data(), x_.h(), x_.w(), dx.item(n));
  }
  return dx;
}

void Conv2d::collect_params(std::vector<Param*>& out) {
  out.push_back(&w_);
  out.push_back(&b_);
}

std::string Conv2d::descriptor() const {
  std::ostringstream os;
  os << "conv(" << in_c_ << "->" << out_c_ << ",k" << kernel_ << ",s"
     << stride_ << ",p" << pad_ << ")";
  return os.str();
}

// ---- BatchNorm ------------------------------------------------------------

BatchNorm::BatchNorm(const std::string& name, int channels, float momentum,
                     float eps)
    : channels_(channels), momentum_(momentum), eps_(eps) {
  gamma_ = make_param(name + ".gamma", {channels});
  beta_ = make_param(name + ".beta", {channels});
  running_mean_ = make_param(name + ".running_mean", {channels});
  running_var_ = make_param(name + ".running_var", {channels});
  std::fill(gamma_.value.begin(), gamma_.value.end(), 1.0f);
  std::fill(running_var_.value.begin(), running_var_.value.end(), 1.0f);
}

Tensor BatchNorm::forward(const Tensor& x, bool training) {
  check(x.c() == channels_, "batchnorm: channels ", x.c(), " != ", channels_);
  training_mode_ = training;
  int hw = x.h() * x.w();
  std::size_t m = static_cast<std::size_t>(x.n()) * hw;
  check(m > 0, "batchnorm: empty batch");
  Tensor y(x.n(), x.c(), x.h(), x.w());
  if (training) {
    check(m > 1, "batchnorm: training batch needs more than one value");
    xhat_ = Tensor(x.n(), x.c(), x.h(), x.w());
    inv_std_.assign(channels_, 0.0f);
    for (int c = 0; c < channels_; ++c) {
      double mean = 0.0;
      for (int n = 0; n < x.n(); ++n) {
        const float* p = x.item(n) + static_cast<std::size_t>(c) * hw;
        for (int i = 0; i < hw; ++i) mean += p[i];
      }
      mean /= static_cast<double>(m);
      double var = 0.0;
      for (int n = 0; n < x.n(); ++n) {
        const float* p = x.item(n) + static_cast<std::size_t>(c) * hw;
        for (int i = 0; i < hw; ++i) {
          double d = p[i] - mean;
          var += d * d;
        }
      }
      var /= static_cast<double>(m);  // biased, matches eval normalizer
      float inv = 1.0f / std::sqrt(static_cast<float>(var) + eps_);
      inv_std_[c] = inv;
      float g = gamma_.value[c], b = beta_.value[c];
      for (int n = 0; n < x.n(); ++n) {
        const float* p = x.item(n) + static_cast<std::size_t>(c) * hw;
        float* xh = xhat_.item(n) + static_cast<std::size_t>(c) * hw;
        float* yo = y.item(n) + static_cast<std::size_t>(c) * hw;
        for (int i = 0; i < hw; ++i) {
          xh[i] = (p[i] - static_cast<float>(mean)) * inv;
          yo[i] = g * xh[i] + b;
        }
      }
      running_mean_.value[c] = (1.0f - momentum_) * running_mean_.value[c] +
                               momentum_ * static_cast<float>(mean);
      running_var_.value[c] = (1.0f - momentum_) * running_var_.value[c] +
                              momentum_ * static_cast<float>(var);
    }
  } else {
    inv_std_.assign(channels_, 0.0f);
    for (int c = 0; c < channels_; ++c) {
      float inv = 1.0f / std::sqrt(running_var_.value[c] + eps_);
      inv_std_[c] = inv;
      float g = gamma_.value[c], b = beta_.value[c];
      float mu = running_mean_.value[c];
      for (int n = 0; n < x.n(); ++n) {
        const float* p = x.item(n) + static_cast<std::size_t>(c) * hw;
        float* yo = y.item(n) + static_cast<std::size_t>(c) * hw;
        for (int i = 0; i < hw; ++i) yo[i] = g * (p[i] - mu) * inv + b;
      }
    }
  }
  return y;
}

Tensor BatchNorm::backward(const Tensor& dy) {
  check(dy.c() == channels_, "batchnorm: bad dy shape");
  int hw = dy.h() * dy.w();
  Tensor dx(dy.n(), dy.c(), dy.h(), dy.w());
  if (!training_mode_) {
    // Running statistics are constants: the map is affine per channel.
    for (int c = 0; c < channels_; ++c) {
      float k = gamma_.value[c] * inv_std_[c];
      for (int n = 0; n < dy.n(); ++n) {
        const float* d = dy.item(n) + static_cast<std::size_t>(c) * hw;
        float* o = dx.item(n) + static_cast<std::size_t>(c) * hw;
        for (int i = 0; i < hw; ++i) o[i] = d[i] * k;
      }
    }
    return dx;
  }
  check(xhat_.n() == dy.n() && xhat_.h() == dy.h() && xhat_.w() == dy.w(),
        "batchnorm: backward before forward");
  float m = static_cast<float>(static_cast<std::size_t>(dy.n()) * hw);
  for (int c = 0; c < channels_; ++c) {
    double sum_dy = 0.0, sum_dy_xhat = 0.0;
    for (int n = 0; n < dy.n(); ++n) {
      const float* d = dy.item(n) + static_cast<std::size_t>(c) * hw;
      const float* xh = xhat_.item(n) + static_cast<std::size_t>(c) * hw;
      for (int i = 0; i < hw; ++i) {
        sum_dy += d[i];
        sum_dy_xhat += static_cast<double>(d[i]) * xh[i];
      }
    }
    gamma_.grad[c] += static_cast<float>(sum_dy_xhat);
    beta_.grad[c] += static_cast<float>(sum_dy);
    float k = gamma_.value[c] * inv_std_[c] / m;
    for (int n = 0; n < dy.n(); ++n) {
      const float* d = dy.item(n) + static_cast<std::size_t>(c) * hw;
      const float* xh = xhat_.item(n) + static_cast<std::size_t>(c) * hw;
      float* o = dx.item(n) + static_cast<std::size_t>(c) * hw;
      for (int i = 0; i < hw; ++i) {
        o[i] = k * (m * d[i] - static_cast<float>(sum_dy) -
                    xh[i] * static_cast<float>(sum_dy_xhat));
      }
    }
  }
  return dx;
}

void BatchNorm::collect_params(std::vector<Param*>& out) {
  out.push_back(&gamma_);
  out.push_back(&beta_);
  out.push_back(&running_mean_);
  out.push_back(&running_var_);
}

std::string BatchNorm::descriptor() const {
  std::ostringstream os;
  os << "bn(" << channels_ << ")";
  return os.str();
}

// ---- activations ----------------------------------------------------------

Tensor ReLU::forward(const Tensor& x, bool) {
  y_ = x;
  for (auto& v : y_) v = v > 0.0f ? v : 0.0f;
  return y_;
}

Tensor ReLU::backward(const Tensor& dy) {
  check(dy.same_shape(y_), "relu: bad dy shape");
  Tensor dx = dy;
  for (std::size_t i = 0; i < dx.size(); ++i)
    if (y_[i] <= 0.0f) dx[i] = 0.0f;
  return dx;
}

Tensor LeakyReLU::forward(const Tensor& x, bool) {
  x_ = x;
  Tensor y = x;
  for (auto& v : y) v = v > 0.0f ? v : slope_ * v;
  return y;
}

Tensor LeakyReLU::backward(const Tensor& dy) {
  check(dy.same_shape(x_), "leaky_relu: bad dy shape");
  Tensor dx = dy;
  for (std::size_t i = 0; i < dx.size(); ++i)
    if (x_[i] <= 0.0f) dx[i] *= slope_;
  return dx;
}

std::string LeakyReLU::descriptor() const {
  std::ostringstream os;
  os << "lrelu(" << slope_ << ")";
  return os.str();
}

Tensor Tanh::forward(const Tensor& x, bool) {
  y_ = x;
  for (auto& v : y_) v = std::tanh(v);
  return y_;
}

Tensor Tanh::backward(const Tensor& dy) {
  check(dy.same_shape(y_), "tanh: bad dy shape");
  Tensor dx = dy;
  for (std::size_t i = 0; i < dx.size(); ++i)
    dx[i] *= 1.0f - y_[i] * y_[i];
  return dx;
}

// ---- shape layers ----------------------------------------------------------

Tensor Upsample2x::forward(const Tensor& x, bool) {
  in_h_ = x.h();
  in_w_ = x.w();
  c_ = x.c();
  Tensor y(x.n(), x.c(), x.h() * 2, x.w() * 2);
  for (int n = 0; n < x.n(); ++n)
    for (int c = 0; c < x.c(); ++c)
      for (int i = 0; i < x.h(); ++i)
        for (int j = 0; j < x.w(); ++j) {
          float v = x.at(n, c, i, j);
          y.at(n, c, 2 * i, 2 * j) = v;
          y.at(n, c, 2 * i, 2 * j + 1) = v;
          y.at(n, c, 2 * i + 1, 2 * j) = v;
          y.at(n, c, 2 * i + 1, 2 * j + 1) = v;
        }
  return y;
}

Tensor Upsample2x::backward(const Tensor& dy) {
  check(dy.c() == c_ && dy.h() == in_h_ * 2 && dy.w() == in_w_ * 2,
        "up2x: bad dy shape");
  Tensor dx(dy.n(), c_, in_h_, in_w_);
  for (int n = 0; n < dy.n(); ++n)
    for (int c = 0; c < c_; ++c)
      for (int i = 0; i < in_h_; ++i)
        for (int j = 0; j < in_w_; ++j)
          dx.at(n, c, i, j) = dy.at(n, c, 2 * i, 2 * j) +
                              dy.at(n, c, 2 * i, 2 * j + 1) +
                              dy.at(n, c, 2 * i + 1, 2 * j) +
                              dy.at(n, c, 2 * i + 1, 2 * j + 1);
  return dx;
}

Tensor GlobalAvgPool::forward(const Tensor& x, bool) {
  h_ = x.h();
  w_ = x.w();
  c_ = x.c();
  Tensor y = Tensor::vectors(x.n(), x.c());
  float inv = 1.0f / static_cast<float>(x.h() * x.w());
  for (int n = 0; n < x.n(); ++n)
    for (int c = 0; c < x.c(); ++c) {
      const float* p = x.item(n) + static_cast<std::size_t>(c) * x.h() * x.w();
      double s = 0.0;
      for (int i = 0; i < x.h() * x.w(); ++i) s += p[i];
      y.at(n, c, 0, 0) = static_cast<float>(s) * inv;
    }
  return y;
}

Tensor GlobalAvgPool::backward(const Tensor& dy) {
  check(dy.c() == c_ && dy.h() == 1 && dy.w() == 1, "gap: bad dy shape");
  Tensor dx(dy.n(), c_, h_, w_);
  float inv = 1.0f / static_cast<float>(h_ * w_);
  for (int n = 0; n < dy.n(); ++n)
    for (int c = 0; c < c_; ++c) {
      float g = dy.at(n, c, 0, 0) * inv;
      float* p = dx.item(n) + static_cast<std::size_t>(c) * h_ * w_;
      std::fill(p, p + h_ * w_, g);
    }
  return dx;
}

Tensor Reshape::forward(const Tensor& x, bool) {
  check(x.c() * x.h() * x.w() == c_ * h_ * w_, "reshape: element count mismatch");
  in_c_ = x.c();
  in_h_ = x.h();
  in_w_ = x.w();
  Tensor y = x;
  y.reshape_items(c_, h_, w_);
  return y;
}

Tensor Reshape::backward(const Tensor& dy) {
  check(dy.c() == c_ && dy.h() == h_ && dy.w() == w_, "reshape: bad dy shape");
  Tensor dx = dy;
  dx.reshape_items(in_c_, in_h_, in_w_);
  return dx;
}

std::string Reshape::descriptor() const {
  std::ostringstream os;
  os << "reshape(" << c_ << "x" << h_ << "x" << w_ << ")";
  return os.str();
}

// ---- Sequential -------------------------------------------------------------

Tensor Sequential::forward(const Tensor& x, bool training) {
  Tensor h = x;
  for (auto& layer : layers_) h = layer->forward(h, training);
  return h;
}

Tensor Sequential::backward(const Tensor& dy) {
  Tensor g = dy;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it)
    g = (*it)->backward(g);
  return g;
}

void Sequential::collect_params(std::vector<Param*>& out) {
  for (auto& layer : layers_) layer->collect_params(out);
}

std::string Sequential::descriptor() const {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < layers_.size(); ++i) {
    if (i) os << " ";
    os << layers_[i]->descriptor();
  }
  os << "]";
  return os.str();
}

// ---- ResidualBlock ----------------------------------------------------------

ResidualBlock::ResidualBlock(const std::string& name, int in_c, int out_c,
                             int stride, Rng& rng) {
  main_.add(std::make_unique<Conv2d>(name + ".c1", in_c, out_c, 3, stride, 1,
                                     rng));
  main_.add(std::make_unique<BatchNorm>(name + ".bn1", out_c));
  main_.add(std::make_unique<ReLU>());
  main_.add(std::make_unique<Conv2d>(name + ".c2", out_c, out_c, 3, 1, 1, rng));
  main_.add(std::make_unique<BatchNorm>(name + ".bn2", out_c));
  if (stride != 1 || in_c != out_c) {
    projection_ = std::make_unique<Sequential>();
    projection_->add(std::make_unique<Conv2d>(name + ".proj", in_c, out_c, 1,
                                              stride, 0, rng));
    projection_->add(std::make_unique<BatchNorm>(name + ".projbn", out_c));
  }
}

Tensor ResidualBlock::forward(const Tensor& x, bool training) {
  Tensor main = main_.forward(x, training);
  Tensor skip = projection_ ? projection_->forward(x, training) : x;
  check(main.same_shape(skip), "residual: branch shape mismatch");
  sum_ = main;
  for (std::size_t i = 0; i < sum_.size(); ++i)
    sum_[i] += skip[i];
  Tensor y = sum_;
  for (auto& v : y) v = v > 0.0f ? v : 0.0f;
  return y;
}

Tensor ResidualBlock::backward(const Tensor& dy) {
  check(dy.same_shape(sum_), "residual: bad dy shape");
  Tensor dsum = dy;
  for (std::size_t i = 0; i < dsum.size(); ++i)
    if (sum_[i] <= 0.0f) dsum[i] = 0.0f;
  Tensor dx = main_.backward(dsum);
  if (projection_) {
    Tensor dskip = projection_->backward(dsum);
    check(dx.same_shape(dskip), "residual: grad shape mismatch");
    for (std::size_t i = 0; i < dx.size(); ++i)
      dx[i] += dskip[i];
  } else {
    for (std::size_t i = 0; i < dx.size(); ++i)
      dx[i] += dsum[i];
  }
  return dx;
}

void ResidualBlock::collect_params(std::vector<Param*>& out) {
  main_.collect_params(out);
  if (projection_) projection_->collect_params(out);
}

std::string ResidualBlock::descriptor() const {
  std::ostringstream os;
  os << "res{" << main_.descriptor();
  if (projection_) os << " proj:" << projection_->descriptor();
  os << "}";
  return os.str();
}

// ---- losses -----------------------------------------------------------------

Tensor softmax_rows(const Tensor& logits) {
  check(logits.h() == 1 && logits.w() == 1, "softmax: expected N x C vectors");
  Tensor probs = logits;
  for (int n = 0; n < logits.n(); ++n) {
    float* row = probs.item(n);
    float mx = row[0];
    for (int c = 1; c < logits.c(); ++c) mx = std::max(mx, row[c]);
    double sum = 0.0;
    for (int c = 0; c < logits.c(); ++c) {
      row[c] = std::exp(row[c] - mx);
      sum += row[c];
    }
    check(sum > 0.0, "softmax: degenerate row");
    for (int c = 0; c < logits.c(); ++c)
      row[c] = static_cast<float>(row[c] / sum);
  }
  return probs;
}

float cross_entropy(const Tensor& probs, const std::vector<int>& labels,
                    Tensor* dlogits) {
  check(static_cast<std::size_t>(probs.n()) == labels.size(),
        "cross_entropy: label count mismatch");
  double loss = 0.0;
  for (int n = 0; n < probs.n(); ++n) {
    int y = labels[static_cast<std::size_t>(n)];
    check(y >= 0 && y < probs.c(), "cross_entropy: label out of range");
    double p = std::max(static_cast<double>(probs.item(n)[y]), 1e-12);
    loss -= std::log(p);
  }
  loss /= static_cast<double>(probs.n());
  if (dlogits) {
    *dlogits = probs;
    float inv_n = 1.0f / static_cast<float>(probs.n());
    for (int n = 0; n < probs.n(); ++n) {
      float* row = dlogits->item(n);
      row[labels[static_cast<std::size_t>(n)]] -= 1.0f;
      for (int c = 0; c < probs.c(); ++c) row[c] *= inv_n;
    }
  }
  return static_cast<float>(loss);
}

// ---- optimizers ---------------------------------------------------------------

namespace {

// Running statistics ride along in the param list for serialization but are
// not learnable; optimizers must skip them.
bool is_trainable(const Param& p) {
  auto ends_with = [&](const char* s) {
    std::string_view sv(s);
    return p.name.size() >= sv.size() &&
           p.name.compare(p.name.size() - sv.size(), sv.size(), sv) == 0;
  };
  return !ends_with(".running_mean") && !ends_with(".running_var");
}

}  // namespace

void Sgd::step(const std::vector<Param*>& params) {
  if (velocity_.empty()) {
    velocity_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i)
      velocity_[i].assign(params[i]->size(), 0.0f);
  }
  check(velocity_.size() == params.size(), "sgd: param set changed");
  for (std::size_t i = 0; i < params.size(); ++i) {
    Param& p = *params[i];
    if (!is_trainable(p)) continue;
    check(velocity_[i].size() == p.size(), "sgd: param size changed");
    for (std::size_t j = 0; j < p.size(); ++j) {
      float g = p.grad[j] + weight_decay_ * p.value[j];
      velocity_[i][j] = momentum_ * velocity_[i][j] + g;
      p.value[j] -= lr_ * velocity_[i][j];
    }
  }
  ++t_;
}

void Adam::step(const std::vector<Param*>& params) {
  if (m_.empty()) {
    m_.resize(params.size());
    v_.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      m_[i].assign(params[i]->size(), 0.0f);
      v_[i].assign(params[i]->size(), 0.0f);
    }
  }
  check(m_.size() == params.size(), "adam: param set changed");
  ++t_;
  float bc1 = 1.0f - std::pow(beta1_, static_cast<float>(t_));
  float bc2 = 1.0f - std::pow(beta2_, static_cast<float>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Param& p = *params[i];
    if (!is_trainable(p)) continue;
    check(m_[i].size() == p.size(), "adam: param size changed");
    for (std::size_t j = 0; j < p.size(); ++j) {
      float g = p.grad[j];
      m_[i][j] = beta1_ * m_[i][j] + (1.0f - beta1_) * g;
      v_[i][j] = beta2_ * v_[i][j] + (1.0f - beta2_) * g * g;
      float mhat = m_[i][j] / bc1;
      float vhat = v_[i][j] / bc2;
      p.value[j] -= lr_ * mhat / (std::sqrt(vhat) + eps_);
    }
  }
}

std::vector<std::vector<float>> Adam::state() const {
  std::vector<std::vector<float>> s = m_;
  s.insert(s.end(), v_.begin(), v_.end());
  return s;
}

void Adam::set_state(const std::vector<std::vector<float>>& s) {
  check(s.size() % 2 == 0, "adam: bad state vector count");
  std::size_t half = s.size() / 2;
  m_.assign(s.begin(), s.begin() + static_cast<std::ptrdiff_t>(half));
  v_.assign(s.begin() + static_cast<std::ptrdiff_t>(half), s.end());
}

// ---- utilities ------------------------------------------------------------------

void zero_grads(const std::vector<Param*>& params) {
  for (Param* p : params) p->zero_grad();
}

void clip_params(const std::vector<Param*>& params, float c) {
  check(c > 0.0f, "clip: bound must be positive");
  for (Param* p : params) {
    if (!is_trainable(*p)) continue;
    for (auto& v : p->value) v = std::clamp(v, -c, c);
  }
}

std::string params_digest(const std::vector<Param*>& params) {
  Digest d;
  for (const Param* p : params) {
    d.str(p->name);
    for (int dim : p->shape) d.pod(dim);
    d.vec(p->value);
  }
  return d.hex();
}

}  // namespace mdi::nn
