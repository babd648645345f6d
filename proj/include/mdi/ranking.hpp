#pragma once

#include <Eigen/Dense>
#include <map>
#include <string>
#include <vector>

#include "mdi/dataset.hpp"
#include "mdi/otdd.hpp"

namespace mdi {

enum class RankMethod : std::uint8_t {
  gan_differential = 0,
  gan_alternative = 1,
  reconstruction = 2,
};

const char* method_name(RankMethod m);
RankMethod method_from_name(const std::string& s);

/// Landmarks ordered ascending by inferred distance; ties broken by id.
struct RankingResult {
  std::string target_id;
  std::vector<std::string> landmark_ids;
  std::vector<double> distances;  // aligned with landmark_ids
  RankMethod method = RankMethod::gan_differential;
  std::uint64_t seed = 0;
};

/// Relevance scores for a target: score = d_max - d, so the nearest landmark
/// scores highest and the farthest scores zero.
struct GroundTruth {
  std::string target_id;
  std::vector<std::string> landmark_ids;
  std::vector<double> distances;  // aligned
  double d_max = 0.0;
  std::vector<double> scores;  // aligned, d_max - distance
};

/// Symmetric pairwise distance table; NaN marks a missing pair.
struct DistanceMatrix {
  std::vector<std::string> ids;
  Eigen::MatrixXd d;

  int index_of(const std::string& id) const;  // -1 if absent
};

/// Distance between the base snapshot's generation and its distracted
/// child's generation. The pull the target model exerted on the generator is
/// the only thing separating the two samples, so this isolates the target's
/// domain signal. Rejects pairs whose snapshot lineage does not link.
double differential_similarity(const LabeledDataset& gen0,
                               const LabeledDataset& gen1,
                               const OtddConfig& cfg,
                               OtddDiagnostics* diag = nullptr);

/// Baseline measure: distance from the landmark itself to the distracted
/// generation. Kept for the comparison experiment.
double alternative_similarity(const LabeledDataset& landmark,
                              const LabeledDataset& gen1,
                              const OtddConfig& cfg,
                              OtddDiagnostics* diag = nullptr);

RankingResult rank_landmarks(const std::map<std::string, double>& distances,
                             RankMethod method, const std::string& target_id,
                             std::uint64_t seed);

/// Extracts the target's row from the pairwise table and converts distances
/// to relevance scores.
GroundTruth ground_truth(const DistanceMatrix& pairwise,
                         const std::string& target_id);

/// DCG@m of the truth scores read in predicted order, discount
/// 1/log2(rank+1), normalized by the ideal DCG@m. Degenerate all-zero ideal
/// returns 1.
double ndcg_at_m(const RankingResult& predicted, const GroundTruth& truth,
                 int m);

}  // namespace mdi
