#pragma once

#include <cstdint>
#include <string>

#include "mdi/dataset.hpp"
#include "mdi/otdd.hpp"
#include "mdi/target_model.hpp"

namespace mdi {

enum class InversionInit : std::uint8_t {
  aux_sample = 0,
  uniform_noise = 1,
};

struct InversionConfig {
  int steps = 100;
  float step_size = 0.1f;
  InversionInit init = InversionInit::aux_sample;
  float tv_weight = 1e-3f;
  int per_class_count = 100;
  std::uint64_t seed = 1;
};

/// Smoothness penalty: sum of squared horizontal and vertical neighbor
/// differences over one 36x36 image. grad may be null.
double tv_penalty(const float* img, float* grad);

/// Projected gradient ascent on log p(class_id | x) - tv_weight * penalty.
/// Initialization comes from random aux samples (any class) or uniform
/// noise. Monotone per-image line search; a non-finite objective triggers a
/// fresh restart (at most 3 per image). Pixels stay in [-1, 1].
/// aux may be null only in uniform_noise mode.
Tensor invert_class(const TargetModel& target, int class_id,
                    const LabeledDataset* aux, const InversionConfig& cfg);

/// Runs invert_class for every class and assembles the reconstruction,
/// labeled with the intended classes.
LabeledDataset invert_dataset(const TargetModel& target,
                              const LabeledDataset* aux,
                              const InversionConfig& cfg);

/// Distance between the model's reconstruction (landmark as aux) and the
/// landmark itself: small when the landmark matches the training domain.
double reconstruction_similarity(const TargetModel& target,
                                 const LabeledDataset& landmark,
                                 const InversionConfig& cfg,
                                 const OtddConfig& otdd_cfg);

/// Target-model accuracy on the reconstruction; higher means the inversion
/// recovered class-consistent structure.
float attack_accuracy(const TargetModel& target,
                      const LabeledDataset& reconstructed);

}  // namespace mdi
