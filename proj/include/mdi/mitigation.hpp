#pragma once

#include <Eigen/Dense>
#include <atomic>
#include <memory>
#include <string>
#include <vector>

#include "mdi/dataset.hpp"
#include "mdi/rng.hpp"
#include "mdi/target_model.hpp"

namespace mdi {

enum class MitigationMethod : std::uint8_t {
  none = 0,
  rmt = 1,
  instahide = 2,
};

const char* mitigation_name(MitigationMethod m);
MitigationMethod mitigation_from_name(const std::string& s);

// ---- randomized matrix transformation ---------------------------------------

/// Secret per-block-position transformation matrices. The grid is square:
/// block_count must be a perfect square whose root divides the image side.
struct RmtKey {
  int block_count = 4;
  int block = 18;  // block side length in pixels
  float sigma = 0.0f;
  std::uint64_t seed = 0;
  std::vector<Eigen::MatrixXf> matrices;  // block_count of (block^2)^2

  int grid() const;  // blocks per image side
  void validate() const;
  std::string digest() const;
};

/// Orthogonal-times-diagonal sampling: singular values equal the diagonal
/// magnitudes, drawn from [0.5, 1.5], so every block matrix is invertible
/// without rejection loops.
RmtKey rmt_generate_key(int block_count, std::uint64_t seed,
                        float sigma = 0.0f);

/// Per-block linear map plus optional Gaussian noise. Output is unbounded;
/// noise_rng may be null when key.sigma == 0.
void rmt_transform_image(const float* in, float* out, const RmtKey& key,
                         Rng* noise_rng);

/// Inverse block maps; exact round trip when sigma == 0.
void rmt_inverse_image(const float* in, float* out, const RmtKey& key);

LabeledDataset rmt_transform_dataset(const LabeledDataset& ds,
                                     const RmtKey& key);

void rmt_save_key(const RmtKey& key, const std::string& path);
RmtKey rmt_load_key(const std::string& path);

// ---- instahide ---------------------------------------------------------------

/// One mixed image: the private image with weight weights[0] plus k-1 pool
/// images, then a per-pixel sign flip.
struct InstaHideRecipe {
  int k = 2;
  std::vector<int> pool_indices;     // k-1 entries
  std::vector<float> weights;        // k entries, simplex
  std::vector<signed char> sign_mask;  // one of {-1, +1} per pixel

  void validate(int pool_size) const;
};

InstaHideRecipe make_instahide_recipe(int k, int pool_size, Rng& rng);

void instahide_transform(const float* in, const LabeledDataset& pool,
                         const InstaHideRecipe& recipe, float* out);

LabeledDataset instahide_transform_dataset(
    const LabeledDataset& ds, const LabeledDataset& pool, int k,
    std::uint64_t seed, std::vector<InstaHideRecipe>* out_recipes = nullptr);

void instahide_save_recipes(const std::vector<InstaHideRecipe>& recipes,
                            const std::string& path);
std::vector<InstaHideRecipe> instahide_load_recipes(const std::string& path);

// ---- mitigated deployment ----------------------------------------------------

struct MitigationParams {
  MitigationMethod method = MitigationMethod::none;
  int rmt_block_count = 4;
  float rmt_sigma = 0.0f;
  int instahide_k = 2;
  std::uint64_t seed = 1;
};

/// Deployment wrapper: every query is transformed exactly the way the
/// training data was before it reaches the inner classifier. RMT applies the
/// fixed secret key; InstaHide draws a fresh recipe per call (the private
/// image weight scales the returned gradient). The inner model stays hidden.
class MitigatedModel : public TargetModel {
 public:
  MitigatedModel(std::unique_ptr<TargetModel> inner, MitigationMethod method,
                 RmtKey key, std::shared_ptr<const LabeledDataset> pool,
                 int instahide_k, std::uint64_t seed);

  int num_classes() const override;
  Tensor predict(const Tensor& images) const override;
  Tensor log_prob_input_gradient(
      const Tensor& images, const std::vector<int>& classes) const override;
  std::string parameter_digest() const override;
  std::string descriptor() const override;

  const TargetModel& inner() const { return *inner_; }

 private:
  Tensor transform_batch(const Tensor& images,
                         std::vector<InstaHideRecipe>* recipes) const;

  std::unique_ptr<TargetModel> inner_;
  MitigationMethod method_;
  RmtKey key_;
  std::shared_ptr<const LabeledDataset> pool_;
  int instahide_k_ = 2;
  std::uint64_t seed_ = 0;
  mutable std::atomic<std::uint64_t> call_counter_{0};
};

struct MitigatedTarget {
  std::unique_ptr<TargetModel> model;  // deployment view (wrapper when mitigated)
  MitigationMethod method = MitigationMethod::none;
  RmtKey key;                                // rmt only
  std::vector<InstaHideRecipe> train_recipes;  // instahide only
  FitReport fit;
  float test_accuracy = -1.0f;  // on identically transformed test data
};

/// Transforms the training set, trains a classifier on it, and evaluates on
/// identically transformed test data. pool is required for InstaHide and
/// ignored otherwise. method == none trains on the raw data (the baseline
/// arm of the resilience comparison).
MitigatedTarget mitigate_and_train(
    const LabeledDataset& train, const LabeledDataset& test,
    const MitigationParams& params, const ClassifierConfig& model_cfg,
    const FitConfig& fit_cfg,
    std::shared_ptr<const LabeledDataset> pool = nullptr);

}  // namespace mdi
