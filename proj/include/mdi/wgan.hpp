#pragma once

#include <memory>
#include <string>
#include <vector>

#include "mdi/checkpoint.hpp"
#include "mdi/dataset.hpp"
#include "mdi/nn.hpp"
#include "mdi/rng.hpp"
#include "mdi/tensor.hpp"

namespace mdi {

/// Architecture and optimizer constants for a class-conditional
/// weight-clipped Wasserstein GAN on 36x36x1 images.
struct GanConfig {
  int latent_dim = 100;
  int num_classes = kNumClasses;
  // generator: dense -> g1 x 9 x 9, two upsample+conv stages, 1-channel tanh
  int g1 = 24;
  int g2 = 12;
  int g3 = 8;
  // critic: three stride-2 convs over image + one-hot label planes
  int d1 = 12;
  int d2 = 24;
  int d3 = 24;
  float lr = 0.003f;
  float beta1 = 0.5f;
  float beta2 = 0.999f;
  float clip_c = 0.01f;
  int n_critic = 5;
  int batch = 20;
  std::uint64_t init_seed = 1;
};

struct GanTrainStats {
  std::int64_t steps_run = 0;
  float last_loss_g = 0.0f;
  float last_loss_d = 0.0f;
};

/// Generator + critic pair with persistent Adam state, step counter and RNG
/// stream; everything needed to reproduce or resume training.
class Wgan {
 public:
  explicit Wgan(const GanConfig& cfg);

  const GanConfig& config() const { return cfg_; }
  std::int64_t step() const { return step_; }
  const std::string& parent_digest() const { return parent_digest_; }
  void set_parent_digest(const std::string& d) { parent_digest_ = d; }

  /// Latent batch: rows are [z ~ N(0,1)^latent_dim, onehot(label)].
  Tensor make_latent(const std::vector<int>& labels, Rng& rng) const;

  Tensor g_forward(const Tensor& zlab, bool training);
  Tensor g_backward(const Tensor& dimages);
  /// Critic score per image (scalar, no sigmoid). Labels become one-hot
  /// planes concatenated to the image channel.
  Tensor d_forward(const Tensor& images, const std::vector<int>& labels,
                   bool training);
  /// Returns the gradient with respect to the image channel only.
  Tensor d_backward(const Tensor& dscores);

  const std::vector<nn::Param*>& g_params() { return g_params_; }
  const std::vector<nn::Param*>& d_params() { return d_params_; }

  /// Weight-clipped WGAN training with n_critic critic updates per
  /// generator update. Appends `step,loss_g,loss_d,accuracy` rows when
  /// metrics_csv is non-empty. Aborts on non-finite losses.
  GanTrainStats train(const LabeledDataset& data, int steps,
                      const std::string& metrics_csv = "");

  /// n_per_class samples per class in class-major order, deterministic in
  /// (snapshot, n_per_class, seed); provenance gan_generated.
  LabeledDataset generate(int n_per_class, std::uint64_t seed,
                          const std::string& source_id) const;

  /// Digest over config, parameters and step counter; identifies the
  /// snapshot for lineage checks.
  std::string digest() const;

  Checkpoint to_checkpoint() const;
  static std::unique_ptr<Wgan> from_checkpoint(const Checkpoint& ck);
  std::unique_ptr<Wgan> clone() const;

  std::string descriptor() const;

 private:
  void build(Rng& init_rng);
  Tensor critic_input(const Tensor& images, const std::vector<int>& labels) const;

  GanConfig cfg_;
  nn::Sequential g_, d_;
  std::vector<nn::Param*> g_params_, d_params_;
  nn::Adam opt_g_, opt_d_;
  Rng rng_;
  std::int64_t step_ = 0;
  std::string parent_digest_;
};

}  // namespace mdi
