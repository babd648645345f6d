#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "mdi/common.hpp"
#include "mdi/digest.hpp"

namespace mdi {

/// Dense float32 tensor in NCHW layout. Vectors are modeled as N x C x 1 x 1.
class Tensor {
 public:
  Tensor() = default;
  Tensor(int n, int c, int h, int w)
      : n_(n), c_(c), h_(h), w_(w), data_(std::size_t(n) * c * h * w, 0.0f) {
    check(n >= 0 && c >= 0 && h >= 0 && w >= 0, "tensor: negative dimension");
  }

  static Tensor vectors(int n, int dim) { return Tensor(n, dim, 1, 1); }

  int n() const { return n_; }
  int c() const { return c_; }
  int h() const { return h_; }
  int w() const { return w_; }
  std::size_t size() const { return data_.size(); }
  std::size_t per_item() const { return std::size_t(c_) * h_ * w_; }

  float* data() { return data_.data(); }
  const float* data() const { return data_.data(); }

  float* begin() { return data_.data(); }
  float* end() { return data_.data() + data_.size(); }
  const float* begin() const { return data_.data(); }
  const float* end() const { return data_.data() + data_.size(); }

  /// Reinterprets the per-item layout; the element count must not change.
  void reshape_items(int c, int h, int w) {
    check(std::size_t(c) * h * w == per_item(),
          "tensor: reshape changes the item size");
    c_ = c;
    h_ = h;
    w_ = w;
  }

  float& at(int n, int c, int h, int w) {
    return data_[((std::size_t(n) * c_ + c) * h_ + h) * w_ + w];
  }
  float at(int n, int c, int h, int w) const {
    return data_[((std::size_t(n) * c_ + c) * h_ + h) * w_ + w];
  }

  float& operator[](std::size_t i) { return data_[i]; }
  float operator[](std::size_t i) const { return data_[i]; }

  float* item(int n) { return data_.data() + std::size_t(n) * per_item(); }
  const float* item(int n) const {
    return data_.data() + std::size_t(n) * per_item();
  }

  bool same_shape(const Tensor& o) const {
    return n_ == o.n_ && c_ == o.c_ && h_ == o.h_ && w_ == o.w_;
  }

  void fill(float v) { std::fill(data_.begin(), data_.end(), v); }

  void zero() { fill(0.0f); }

  bool all_finite() const {
    for (float v : data_)
      if (!std::isfinite(v)) return false;
    return true;
  }

  /// Copies item `src_idx` of `src` into item `dst_idx` of this tensor.
  void copy_item_from(const Tensor& src, int src_idx, int dst_idx) {
    check(per_item() == src.per_item(), "tensor: item shape mismatch");
    std::copy_n(src.item(src_idx), per_item(), item(dst_idx));
  }

  /// Returns the tensor restricted to the given item indices, in order.
  Tensor gather(const std::vector<int>& idx) const {
    Tensor out(int(idx.size()), c_, h_, w_);
    for (std::size_t i = 0; i < idx.size(); ++i)
      out.copy_item_from(*this, idx[i], int(i));
    return out;
  }

  void add_digest(Digest& d) const {
    d.pod(n_).pod(c_).pod(h_).pod(w_);
    d.vec(data_);
  }

 private:
  int n_ = 0, c_ = 0, h_ = 0, w_ = 0;
  FloatVec data_;
};

}  // namespace mdi
