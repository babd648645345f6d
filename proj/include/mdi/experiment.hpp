#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "mdi/distraction.hpp"
#include "mdi/inversion.hpp"
#include "mdi/mitigation.hpp"
#include "mdi/otdd.hpp"
#include "mdi/target_model.hpp"
#include "mdi/wgan.hpp"

namespace mdi {

struct DataConfig {
  int landmark_per_class = 30;
  int target_train_per_class = 60;
  int target_test_per_class = 20;
};

/// Fit settings sized for the small experiment corpus; the classifier module
/// defaults assume thousands of images per epoch.
inline FitConfig default_target_fit() {
  FitConfig f;
  f.epochs = 40;
  f.batch = 20;
  return f;
}

/// The module default leaves steps at 0 (a no-op), which is never what an
/// experiment wants: the desk scale needs enough steps to move the generator.
inline DistractionConfig default_distraction() {
  DistractionConfig d;
  d.steps = 60;
  return d;
}

/// Everything one end-to-end run needs. The master seed is split into
/// per-stage streams with derive_seed, so two runs with equal configs are
/// bit-identical.
struct ExperimentConfig {
  std::uint64_t master_seed = 7;
  std::string scale = "desk";  // "desk" or "full"
  std::string target_id = "digits";
  std::vector<std::string> landmark_ids = {"letters", "fashion", "textures"};
  int n_seeds = 5;
  // Attacker-purity mode: the target's own dataset is never touched; ground
  // truth, NDCG and target-side diagnostics are skipped, rankings still run.
  bool withhold_target_data = false;
  std::vector<std::string> mitigation_arms = {"none", "rmt", "instahide"};
  std::vector<int> aux_ranks = {1, 2, 3};  // inversion aux arms besides no_aux

  DataConfig data;
  ClassifierConfig target_arch;
  FitConfig target_fit = default_target_fit();
  GanConfig gan;
  int gan_steps = 240;
  DistractionConfig distraction = default_distraction();
  int generate_per_class = 30;
  OtddConfig otdd_cfg;            // seed comes from master
  InversionConfig inversion;      // seed comes from master
  MitigationParams mitigation;    // seed comes from master

  void validate() const;
};

ExperimentConfig desk_config();
ExperimentConfig full_config();

ExperimentConfig load_experiment_config(const std::string& path);
void save_experiment_config(const ExperimentConfig& cfg,
                            const std::string& path);
std::string experiment_config_json(const ExperimentConfig& cfg);
std::string experiment_config_digest(const ExperimentConfig& cfg);

struct StageRecord {
  std::string stage;
  std::string status;  // "ok", "cached" or "failed: <reason>"
  std::uint64_t seed = 0;
  std::string config_digest;
  std::string inputs_digest;
  std::string outputs_digest;
  std::int64_t wall_ms = 0;
};

struct RunLedger {
  std::vector<StageRecord> records;

  const StageRecord* find(const std::string& stage) const;
};

/// Executes the full pipeline into out_dir: data preparation, target
/// training per mitigation arm, per-seed WGAN/distraction/generation,
/// distance measurement, ranking, evaluation, inversion arms, and report
/// files. With resume, stages whose ledger entry and artifacts match the
/// current config are loaded from disk instead of recomputed. Throws on
/// stage failure after recording it in the ledger.
RunLedger run_pipeline(const ExperimentConfig& cfg, const std::string& out_dir,
                       bool resume = false);

/// Digest per report file plus a "combined" entry; the determinism check
/// compares these across runs.
std::map<std::string, std::string> report_digests(const std::string& out_dir);

/// Rebuilds every report file from the artifacts already in out_dir without
/// recomputing any stage. Fails naming the missing stage when an artifact is
/// absent. Returns the fresh digests.
std::map<std::string, std::string> rebuild_reports(const std::string& out_dir);

/// OTDD between a dataset and data generated by a model trained on it;
/// lower is better generative quality.
double gan_quality(const LabeledDataset& real, const LabeledDataset& generated,
                   const OtddConfig& cfg);

}  // namespace mdi
