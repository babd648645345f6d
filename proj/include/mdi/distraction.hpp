#pragma once

#include <memory>
#include <string>

#include "mdi/dataset.hpp"
#include "mdi/target_model.hpp"
#include "mdi/wgan.hpp"

namespace mdi {

/// Hyper-parameters of the distracted continuation phase. The generator and
/// critic both switch from Adam to plain momentum SGD here.
struct DistractionConfig {
  float lambda = 500.0f;  // weight of the target-model identity loss
  float lr = 0.02f;
  float momentum = 0.9f;
  int batch = 20;
  int steps = 0;
  std::uint64_t seed = 1;
  std::string metrics_csv;  // per-step loss rows appended when non-empty
};

/// -log of the top class probability, floored at 1e-12. Zero when the model
/// is fully confident. Rejects rows off the probability simplex.
float identity_loss(const std::vector<float>& prob);

/// The generator's Wasserstein term for one critic score: just the sign flip.
float prior_loss(float critic_score);

struct DistractionStats {
  std::int64_t steps_run = 0;
  float last_loss_prior = 0.0f;
  float last_loss_id = 0.0f;
  float last_loss_total = 0.0f;
};

/// Continues training a deep copy of `base` for cfg.steps: each generator
/// update minimizes mean[-D(G(z)) + lambda * identity_loss(T(G(z)))] while
/// the critic keeps standard clipped WGAN updates against the landmark data.
/// The target model is consumed strictly through its forward evaluation; its
/// parameter digest is verified unchanged. The returned snapshot carries
/// parent_digest = base.digest().
std::unique_ptr<Wgan> distract(const Wgan& base, const TargetModel& target,
                               const LabeledDataset& landmark,
                               const DistractionConfig& cfg,
                               DistractionStats* stats = nullptr);

}  // namespace mdi
