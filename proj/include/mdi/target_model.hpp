#pragma once

#include <memory>
#include <mutex>
#include <string>
#include <vector>

#include "mdi/checkpoint.hpp"
#include "mdi/dataset.hpp"
#include "mdi/nn.hpp"
#include "mdi/tensor.hpp"

namespace mdi {

/// Black-box classifier interface. Attack code may only consume the outputs
/// of these calls; nothing here permits parameter mutation.
class TargetModel {
 public:
  virtual ~TargetModel() = default;
  virtual int num_classes() const = 0;
  /// N x K probability rows (each on the simplex), inference mode.
  virtual Tensor predict(const Tensor& images) const = 0;
  /// Gradient of log p(classes[n] | x_n) with respect to x_n, one class
  /// index per sample, inference mode.
  virtual Tensor log_prob_input_gradient(
      const Tensor& images, const std::vector<int>& classes) const = 0;
  virtual std::string parameter_digest() const = 0;
  virtual std::string descriptor() const = 0;
};

/// Widths and depth of the reduced residual classifier.
struct ClassifierConfig {
  int stem_channels = 8;
  std::vector<int> stage_channels = {8, 16, 32};
  std::vector<int> stage_blocks = {1, 1, 1};
  int num_classes = kNumClasses;
  std::uint64_t init_seed = 1;
};

struct FitConfig {
  int epochs = 10;
  int batch = 100;
  float lr = 0.01f;
  float momentum = 0.9f;
  float weight_decay = 1e-4f;
  std::uint64_t seed = 1;
  std::string metrics_csv;  // per-epoch rows appended when non-empty
};

struct FitReport {
  int epochs = 0;
  float final_loss = 0.0f;
  float train_accuracy = 0.0f;
  float test_accuracy = 0.0f;  // -1 when no test set was given
};

/// Residual convolutional classifier: stem conv, three (configurable)
/// residual stages with stride-2 downsampling after the first, global
/// average pooling, linear head.
class ResidualClassifier : public TargetModel {
 public:
  explicit ResidualClassifier(const ClassifierConfig& cfg);

  int num_classes() const override { return cfg_.num_classes; }
  Tensor predict(const Tensor& images) const override;
  Tensor log_prob_input_gradient(
      const Tensor& images, const std::vector<int>& classes) const override;
  std::string parameter_digest() const override;
  std::string descriptor() const override;

  /// Training-mode forward returning logits; caller drives the optimizer.
  Tensor train_forward(const Tensor& images);
  Tensor train_backward(const Tensor& dlogits);
  const std::vector<nn::Param*>& params() { return params_; }

  Checkpoint to_checkpoint(const std::string& metadata_json) const;
  static std::unique_ptr<ResidualClassifier> from_checkpoint(
      const Checkpoint& ck);

  const ClassifierConfig& config() const { return cfg_; }

 private:
  ClassifierConfig cfg_;
  mutable nn::Sequential net_;
  std::vector<nn::Param*> params_;
  mutable std::mutex mutex_;  // predict() is safe for concurrent callers
};

/// SGD classification training. Aborts with the step index if the loss goes
/// non-finite. test may be empty (no generalization row in the report).
FitReport fit_classifier(ResidualClassifier& model, const LabeledDataset& train,
                         const LabeledDataset& test, const FitConfig& fit);

/// Convenience wrapper: build + train + metadata checkpoint fields.
std::unique_ptr<ResidualClassifier> train_target(const LabeledDataset& train,
                                                 const LabeledDataset& test,
                                                 const ClassifierConfig& cfg,
                                                 const FitConfig& fit,
                                                 FitReport* report = nullptr);

/// Fraction of samples whose argmax prediction equals the label.
float evaluate_accuracy(const TargetModel& model, const LabeledDataset& data,
                        int batch = 100);

}  // namespace mdi
