#include "mdi/ranking.hpp"

#include <algorithm>
#include <cmath>

#include "mdi/common.hpp"

namespace mdi {

const char* method_name(RankMethod m) {
  switch (m) {
    case RankMethod::gan_differential:
      return "gan_differential";
    case RankMethod::gan_alternative:
      return "gan_alternative";
    case RankMethod::reconstruction:
      return "reconstruction";
  }
  fail("unknown ranking method");
}

RankMethod method_from_name(const std::string& s) {
  if (s == "gan_differential") return RankMethod::gan_differential;
  if (s == "gan_alternative") return RankMethod::gan_alternative;
  if (s == "reconstruction") return RankMethod::reconstruction;
  fail("unknown ranking method: ", s);
}

int DistanceMatrix::index_of(const std::string& id) const {
  for (std::size_t i = 0; i < ids.size(); ++i)
    if (ids[i] == id) return static_cast<int>(i);
  return -1;
}

double differential_similarity(const LabeledDataset& gen0,
                               const LabeledDataset& gen1,
                               const OtddConfig& cfg, OtddDiagnostics* diag) {
  check(gen0.provenance == Provenance::gan_generated &&
            gen1.provenance == Provenance::gan_generated,
        "differential_similarity: both samples must be generated");
  check(!gen0.origin_digest.empty() && !gen1.origin_parent_digest.empty(),
        "differential_similarity: missing snapshot lineage");
  check(gen1.origin_parent_digest == gen0.origin_digest,
        "differential_similarity: lineage mismatch, second sample is not a "
        "distracted child of the first sample's snapshot");
  return otdd(gen0, gen1, cfg, diag);
}

double alternative_similarity(const LabeledDataset& landmark,
                              const LabeledDataset& gen1,
                              const OtddConfig& cfg, OtddDiagnostics* diag) {
  return otdd(landmark, gen1, cfg, diag);
}

RankingResult rank_landmarks(const std::map<std::string, double>& distances,
                             RankMethod method, const std::string& target_id,
                             std::uint64_t seed) {
  check(!distances.empty(), "rank_landmarks: no distances");
  std::vector<std::pair<double, std::string>> items;
  items.reserve(distances.size());
  for (const auto& [id, d] : distances) {
    check(std::isfinite(d), "rank_landmarks: non-finite distance for ", id);
    items.push_back({d, id});
  }
  std::sort(items.begin(), items.end());  // distance asc, then id asc
  RankingResult out;
  out.target_id = target_id;
  out.method = method;
  out.seed = seed;
  for (const auto& [d, id] : items) {
    out.landmark_ids.push_back(id);
    out.distances.push_back(d);
  }
  return out;
}

GroundTruth ground_truth(const DistanceMatrix& pairwise,
                         const std::string& target_id) {
  check(pairwise.ids.size() >= 2, "ground_truth: need at least one landmark");
  check(pairwise.d.rows() == static_cast<long>(pairwise.ids.size()) &&
            pairwise.d.cols() == pairwise.d.rows(),
        "ground_truth: table shape mismatch");
  int t = pairwise.index_of(target_id);
  check(t >= 0, "ground_truth: unknown target ", target_id);
  GroundTruth out;
  out.target_id = target_id;
  for (std::size_t i = 0; i < pairwise.ids.size(); ++i) {
    if (static_cast<int>(i) == t) continue;
    double d = pairwise.d(t, static_cast<long>(i));
    check(std::isfinite(d), "ground_truth: missing pair ", target_id, " vs ",
          pairwise.ids[i]);
    out.landmark_ids.push_back(pairwise.ids[i]);
    out.distances.push_back(d);
  }
  out.d_max = *std::max_element(out.distances.begin(), out.distances.end());
  for (double d : out.distances) out.scores.push_back(out.d_max - d);
  return out;
}

double ndcg_at_m(const RankingResult& predicted, const GroundTruth& truth,
                 int m) {
  const std::size_t n = truth.landmark_ids.size();
  check(m >= 1 && static_cast<std::size_t>(m) <= n,
        "ndcg: m out of range");
  check(predicted.landmark_ids.size() == n, "ndcg: landmark set size mismatch");
  std::map<std::string, double> score;
  for (std::size_t i = 0; i < n; ++i)
    score[truth.landmark_ids[i]] = truth.scores[i];
  double dcg = 0.0;
  for (int r = 1; r <= m; ++r) {
    auto it = score.find(predicted.landmark_ids[static_cast<std::size_t>(r - 1)]);
    check(it != score.end(), "ndcg: predicted landmark ",
          predicted.landmark_ids[static_cast<std::size_t>(r - 1)],
          " absent from ground truth");
    dcg += it->second / std::log2(static_cast<double>(r) + 1.0);
  }
  // also reject extra predicted ids that the truth lacks
  for (const auto& id : predicted.landmark_ids)
    check(score.count(id) == 1, "ndcg: predicted landmark ", id,
          " absent from ground truth");
  std::vector<double> ideal = truth.scores;
  std::sort(ideal.begin(), ideal.end(), std::greater<double>());
  double idcg = 0.0;
  for (int r = 1; r <= m; ++r)
    idcg += ideal[static_cast<std::size_t>(r - 1)] /
            std::log2(static_cast<double>(r) + 1.0);
  if (idcg <= 0.0) return 1.0;
  double v = dcg / idcg;
  check(v >= -1e-12 && v <= 1.0 + 1e-12, "ndcg: value out of range");
  return std::min(1.0, std::max(0.0, v));
}

}  // namespace mdi
