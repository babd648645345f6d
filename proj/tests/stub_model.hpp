#pragma once

#include <cmath>
#include <vector>

#include "mdi/digest.hpp"
#include "mdi/rng.hpp"
#include "mdi/target_model.hpp"
#include "mdi/tensor.hpp"

namespace mdi {

/// Analytic classifier for gradient tests: logit_k(x) = -0.5 * ||x - mu_k||^2
/// with fixed per-class prototypes mu_k. Closed forms:
///   p = softmax(logits)
///   d log p_c / dx = (mu_c - x) - sum_k p_k (mu_k - x) = mu_c - sum_k p_k mu_k
struct PrototypeModel : TargetModel {
  std::vector<Tensor> mu;  // one (1,c,h,w) prototype per class
  int c = 1, h = kImageSize, w = kImageSize;

  explicit PrototypeModel(int num_classes, std::uint64_t seed = 17) {
    Rng rng(seed);
    for (int k = 0; k < num_classes; ++k) {
      Tensor m(1, c, h, w);
      for (float& v : m) v = static_cast<float>(rng.uniform(-0.5, 0.5));
      mu.push_back(std::move(m));
    }
  }

  int num_classes() const override { return static_cast<int>(mu.size()); }

  std::vector<double> logits_of(const Tensor& images, int n) const {
    std::vector<double> lg(mu.size());
    for (std::size_t k = 0; k < mu.size(); ++k) {
      double s = 0.0;
      const float* x = images.item(n);
      const float* m = mu[k].data();
      for (std::size_t i = 0; i < images.per_item(); ++i) {
        double d = static_cast<double>(x[i]) - static_cast<double>(m[i]);
        s += d * d;
      }
      lg[k] = -0.5 * s;
    }
    return lg;
  }

  std::vector<double> probs_of(const Tensor& images, int n) const {
    std::vector<double> lg = logits_of(images, n);
    double mx = lg[0];
    for (double v : lg) mx = std::max(mx, v);
    double z = 0.0;
    for (double v : lg) z += std::exp(v - mx);
    std::vector<double> p(lg.size());
    for (std::size_t k = 0; k < lg.size(); ++k)
      p[k] = std::exp(lg[k] - mx) / z;
    return p;
  }

  Tensor predict(const Tensor& images) const override {
    Tensor out = Tensor::vectors(images.n(), num_classes());
    for (int n = 0; n < images.n(); ++n) {
      std::vector<double> p = probs_of(images, n);
      for (int k = 0; k < num_classes(); ++k)
        out.item(n)[k] = static_cast<float>(p[static_cast<std::size_t>(k)]);
    }
    return out;
  }

  Tensor log_prob_input_gradient(
      const Tensor& images, const std::vector<int>& classes) const override {
    Tensor g(images.n(), images.c(), images.h(), images.w());
    for (int n = 0; n < images.n(); ++n) {
      std::vector<double> p = probs_of(images, n);
      const float* mc = mu[static_cast<std::size_t>(classes
          [static_cast<std::size_t>(n)])].data();
      for (std::size_t i = 0; i < images.per_item(); ++i) {
        double v = mc[i];
        for (std::size_t k = 0; k < mu.size(); ++k)
          v -= p[k] * static_cast<double>(mu[k].data()[i]);
        g.item(n)[i] = static_cast<float>(v);
      }
    }
    return g;
  }

  std::string parameter_digest() const override {
    Digest d;
    for (const auto& m : mu) m.add_digest(d);
    return d.hex();
  }

  std::string descriptor() const override { return "prototype_stub"; }
};

}  // namespace mdi
