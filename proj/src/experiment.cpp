#include "mdi/experiment.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <limits>
#include <nlohmann/json.hpp>
#include <sstream>

#include "mdi/common.hpp"
#include "mdi/digest.hpp"
#include "mdi/ranking.hpp"
#include "mdi/rng.hpp"
#include "mdi/synth.hpp"
#include "mdi/pipeline.hpp"

namespace mdi {

namespace fs = std::filesystem;
using nlohmann::json;

// ---- config ------------------------------------------------------------------

void ExperimentConfig::validate() const {
  auto domains = synth_domains();
  auto known = [&](const std::string& id) {
    return std::find(domains.begin(), domains.end(), id) != domains.end();
  };
  check(scale == "desk" || scale == "full", "config: unknown scale ", scale);
  check(known(target_id), "config: unknown target dataset ", target_id);
  check(!landmark_ids.empty(), "config: no landmark datasets");
  for (const auto& id : landmark_ids) {
    check(known(id), "config: unknown landmark dataset ", id);
    check(id != target_id,
          "config: the target domain cannot appear among the landmarks");
  }
  for (std::size_t i = 0; i < landmark_ids.size(); ++i)
    for (std::size_t j = i + 1; j < landmark_ids.size(); ++j)
      check(landmark_ids[i] != landmark_ids[j],
            "config: duplicate landmark ", landmark_ids[i]);
  check(n_seeds >= 1, "config: need at least one seed");
  check(!mitigation_arms.empty(), "config: no mitigation arms");
  for (const auto& arm : mitigation_arms) mitigation_from_name(arm);
  for (int r : aux_ranks)
    check(r >= 1 && r <= static_cast<int>(landmark_ids.size()),
          "config: aux rank ", r, " out of range");
  check(data.landmark_per_class >= 2 && data.target_train_per_class >= 2 &&
            data.target_test_per_class >= 1,
        "config: implausible data sizes");
  check(gan_steps >= 0 && generate_per_class >= 1,
        "config: bad generation settings");
}

ExperimentConfig desk_config() {
  ExperimentConfig cfg;  // defaults are the desk preset
  return cfg;
}

ExperimentConfig full_config() {
  ExperimentConfig cfg;
  cfg.scale = "full";
  cfg.n_seeds = 10;
  cfg.data.landmark_per_class = 500;
  cfg.data.target_train_per_class = 700;
  cfg.data.target_test_per_class = 200;
  cfg.target_fit.epochs = 30;
  cfg.target_fit.batch = 100;
  cfg.gan_steps = 20000;
  cfg.distraction.steps = 4000;
  cfg.generate_per_class = 100;
  cfg.otdd_cfg.max_points = 700;
  cfg.inversion.steps = 100;
  cfg.inversion.per_class_count = 100;
  return cfg;
}

namespace {

json config_to_json(const ExperimentConfig& c) {
  json j;
  j["master_seed"] = c.master_seed;
  j["scale"] = c.scale;
  j["target_id"] = c.target_id;
  j["landmark_ids"] = c.landmark_ids;
  j["n_seeds"] = c.n_seeds;
  j["withhold_target_data"] = c.withhold_target_data;
  j["mitigation_arms"] = c.mitigation_arms;
  j["aux_ranks"] = c.aux_ranks;
  j["data"] = {{"landmark_per_class", c.data.landmark_per_class},
               {"target_train_per_class", c.data.target_train_per_class},
               {"target_test_per_class", c.data.target_test_per_class}};
  j["target_arch"] = {{"stem_channels", c.target_arch.stem_channels},
                      {"stage_channels", c.target_arch.stage_channels},
                      {"stage_blocks", c.target_arch.stage_blocks}};
  j["target_fit"] = {{"epochs", c.target_fit.epochs},
                     {"batch", c.target_fit.batch},
                     {"lr", c.target_fit.lr},
                     {"momentum", c.target_fit.momentum},
                     {"weight_decay", c.target_fit.weight_decay}};
  j["gan"] = {{"latent_dim", c.gan.latent_dim}, {"g1", c.gan.g1},
              {"g2", c.gan.g2},                 {"g3", c.gan.g3},
              {"d1", c.gan.d1},                 {"d2", c.gan.d2},
              {"d3", c.gan.d3},                 {"lr", c.gan.lr},
              {"beta1", c.gan.beta1},           {"beta2", c.gan.beta2},
              {"clip_c", c.gan.clip_c},         {"n_critic", c.gan.n_critic},
              {"batch", c.gan.batch}};
  j["gan_steps"] = c.gan_steps;
  j["distraction"] = {{"lambda", c.distraction.lambda},
                      {"lr", c.distraction.lr},
                      {"momentum", c.distraction.momentum},
                      {"batch", c.distraction.batch},
                      {"steps", c.distraction.steps}};
  j["generate_per_class"] = c.generate_per_class;
  j["otdd"] = {{"epsilon", c.otdd_cfg.epsilon},
               {"max_points", c.otdd_cfg.max_points},
               {"delta", c.otdd_cfg.delta},
               {"max_iter", c.otdd_cfg.max_iter},
               {"tol", c.otdd_cfg.tol},
               {"use_exact", c.otdd_cfg.use_exact}};
  j["inversion"] = {
      {"steps", c.inversion.steps},
      {"step_size", c.inversion.step_size},
      {"tv_weight", c.inversion.tv_weight},
      {"per_class_count", c.inversion.per_class_count}};
  j["mitigation"] = {{"rmt_block_count", c.mitigation.rmt_block_count},
                     {"rmt_sigma", c.mitigation.rmt_sigma},
                     {"instahide_k", c.mitigation.instahide_k}};
  return j;
}

ExperimentConfig config_from_json(const json& j) {
  ExperimentConfig c;
  c.master_seed = j.value("master_seed", c.master_seed);
  c.scale = j.value("scale", c.scale);
  if (c.scale == "full") c = full_config();
  c.master_seed = j.value("master_seed", c.master_seed);
  c.scale = j.value("scale", c.scale);
  c.target_id = j.value("target_id", c.target_id);
  if (j.contains("landmark_ids"))
    c.landmark_ids = j["landmark_ids"].get<std::vector<std::string>>();
  c.n_seeds = j.value("n_seeds", c.n_seeds);
  c.withhold_target_data =
      j.value("withhold_target_data", c.withhold_target_data);
  if (j.contains("mitigation_arms"))
    c.mitigation_arms = j["mitigation_arms"].get<std::vector<std::string>>();
  if (j.contains("aux_ranks"))
    c.aux_ranks = j["aux_ranks"].get<std::vector<int>>();
  if (j.contains("data")) {
    const json& d = j["data"];
    c.data.landmark_per_class =
        d.value("landmark_per_class", c.data.landmark_per_class);
    c.data.target_train_per_class =
        d.value("target_train_per_class", c.data.target_train_per_class);
    c.data.target_test_per_class =
        d.value("target_test_per_class", c.data.target_test_per_class);
  }
  if (j.contains("target_arch")) {
    const json& a = j["target_arch"];
    c.target_arch.stem_channels =
        a.value("stem_channels", c.target_arch.stem_channels);
    if (a.contains("stage_channels"))
      c.target_arch.stage_channels =
          a["stage_channels"].get<std::vector<int>>();
    if (a.contains("stage_blocks"))
      c.target_arch.stage_blocks = a["stage_blocks"].get<std::vector<int>>();
  }
  if (j.contains("target_fit")) {
    const json& f = j["target_fit"];
    c.target_fit.epochs = f.value("epochs", c.target_fit.epochs);
    c.target_fit.batch = f.value("batch", c.target_fit.batch);
    c.target_fit.lr = f.value("lr", c.target_fit.lr);
    c.target_fit.momentum = f.value("momentum", c.target_fit.momentum);
    c.target_fit.weight_decay =
        f.value("weight_decay", c.target_fit.weight_decay);
  }
  if (j.contains("gan")) {
    const json& g = j["gan"];
    c.gan.latent_dim = g.value("latent_dim", c.gan.latent_dim);
    c.gan.g1 = g.value("g1", c.gan.g1);
    c.gan.g2 = g.value("g2", c.gan.g2);
    c.gan.g3 = g.value("g3", c.gan.g3);
    c.gan.d1 = g.value("d1", c.gan.d1);
    c.gan.d2 = g.value("d2", c.gan.d2);
    c.gan.d3 = g.value("d3", c.gan.d3);
    c.gan.lr = g.value("lr", c.gan.lr);
    c.gan.beta1 = g.value("beta1", c.gan.beta1);
    c.gan.beta2 = g.value("beta2", c.gan.beta2);
    c.gan.clip_c = g.value("clip_c", c.gan.clip_c);
    c.gan.n_critic = g.value("n_critic", c.gan.n_critic);
    c.gan.batch = g.value("batch", c.gan.batch);
  }
  c.gan_steps = j.value("gan_steps", c.gan_steps);
  if (j.contains("distraction")) {
    const json& d = j["distraction"];
    c.distraction.lambda = d.value("lambda", c.distraction.lambda);
    c.distraction.lr = d.value("lr", c.distraction.lr);
    c.distraction.momentum = d.value("momentum", c.distraction.momentum);
    c.distraction.batch = d.value("batch", c.distraction.batch);
    c.distraction.steps = d.value("steps", c.distraction.steps);
  }
  c.generate_per_class = j.value("generate_per_class", c.generate_per_class);
  if (j.contains("otdd")) {
    const json& o = j["otdd"];
    c.otdd_cfg.epsilon = o.value("epsilon", c.otdd_cfg.epsilon);
    c.otdd_cfg.max_points = o.value("max_points", c.otdd_cfg.max_points);
    c.otdd_cfg.delta = o.value("delta", c.otdd_cfg.delta);
    c.otdd_cfg.max_iter = o.value("max_iter", c.otdd_cfg.max_iter);
    c.otdd_cfg.tol = o.value("tol", c.otdd_cfg.tol);
    c.otdd_cfg.use_exact = o.value("use_exact", c.otdd_cfg.use_exact);
  }
  if (j.contains("inversion")) {
    const json& i = j["inversion"];
    c.inversion.steps = i.value("steps", c.inversion.steps);
    c.inversion.step_size = i.value("step_size", c.inversion.step_size);
    c.inversion.tv_weight = i.value("tv_weight", c.inversion.tv_weight);
    c.inversion.per_class_count =
        i.value("per_class_count", c.inversion.per_class_count);
  }
  if (j.contains("mitigation")) {
    const json& m = j["mitigation"];
    c.mitigation.rmt_block_count =
        m.value("rmt_block_count", c.mitigation.rmt_block_count);
    c.mitigation.rmt_sigma = m.value("rmt_sigma", c.mitigation.rmt_sigma);
    c.mitigation.instahide_k =
        m.value("instahide_k", c.mitigation.instahide_k);
  }
  return c;
}

std::string fmt(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.9g", v);
  return buf;
}

}  // namespace

std::string experiment_config_json(const ExperimentConfig& cfg) {
  return config_to_json(cfg).dump(2);
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::ifstream is(path);
  check(is.good(), "config: cannot open ", path);
  json j = json::parse(is, nullptr, true, true);  // allow comments
  ExperimentConfig cfg = config_from_json(j);
  cfg.validate();
  return cfg;
}

void save_experiment_config(const ExperimentConfig& cfg,
                            const std::string& path) {
  std::ofstream os(path);
  check(os.good(), "config: cannot open ", path);
  os << experiment_config_json(cfg) << "\n";
  check(os.good(), "config: write failed for ", path);
}

std::string experiment_config_digest(const ExperimentConfig& cfg) {
  Digest d;
  d.str(config_to_json(cfg).dump());
  return d.hex();
}

// ---- ledger -------------------------------------------------------------------

const StageRecord* RunLedger::find(const std::string& stage) const {
  for (auto it = records.rbegin(); it != records.rend(); ++it)
    if (it->stage == stage) return &*it;
  return nullptr;
}

namespace {

constexpr const char* kLedgerHeader =
    "stage,status,seed,config_digest,inputs_digest,outputs_digest,wall_ms";

std::vector<StageRecord> read_ledger_csv(const fs::path& path) {
  std::vector<StageRecord> out;
  std::ifstream is(path);
  if (!is.good()) return out;
  std::string line;
  std::getline(is, line);  // header
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    StageRecord r;
    std::string seed, wall;
    std::getline(ls, r.stage, ',');
    std::getline(ls, r.status, ',');
    std::getline(ls, seed, ',');
    std::getline(ls, r.config_digest, ',');
    std::getline(ls, r.inputs_digest, ',');
    std::getline(ls, r.outputs_digest, ',');
    std::getline(ls, wall, ',');
    if (r.stage.empty()) continue;
    r.seed = std::strtoull(seed.c_str(), nullptr, 10);
    r.wall_ms = std::strtoll(wall.c_str(), nullptr, 10);
    out.push_back(std::move(r));
  }
  return out;
}

std::string file_digest(const fs::path& p) {
  std::ifstream is(p, std::ios::binary);
  check(is.good(), "ledger: cannot read ", p.string());
  Digest d;
  char buf[65536];
  while (is.read(buf, sizeof(buf)) || is.gcount() > 0)
    d.bytes(buf, static_cast<std::size_t>(is.gcount()));
  return d.hex();
}

std::string files_digest(const std::vector<fs::path>& files) {
  Digest d;
  for (const auto& f : files) {
    d.str(f.filename().string());
    d.str(file_digest(f));
  }
  return d.hex();
}

// ---- per-seed result bundle ----------------------------------------------------

struct SeedResults {
  int seed_index = 0;
  std::uint64_t seed_value = 0;
  // arm -> landmark -> differential distance
  std::map<std::string, std::map<std::string, double>> differential;
  std::map<std::string, double> alternative;     // landmark -> distance
  std::map<std::string, double> reconstruction;  // landmark -> distance
  std::map<std::string, double> quality;         // domain -> gan quality
  std::map<std::string, double> aux_accuracy;    // aux tag -> attack accuracy
};

json seed_results_to_json(const SeedResults& r) {
  json j;
  j["seed_index"] = r.seed_index;
  j["seed_value"] = r.seed_value;
  j["differential"] = r.differential;
  j["alternative"] = r.alternative;
  j["reconstruction"] = r.reconstruction;
  j["gan_quality"] = r.quality;
  j["aux_accuracy"] = r.aux_accuracy;
  return j;
}

SeedResults seed_results_from_json(const json& j) {
  SeedResults r;
  r.seed_index = j.at("seed_index").get<int>();
  r.seed_value = j.at("seed_value").get<std::uint64_t>();
  r.differential =
      j.at("differential")
          .get<std::map<std::string, std::map<std::string, double>>>();
  r.alternative = j.at("alternative").get<std::map<std::string, double>>();
  r.reconstruction =
      j.at("reconstruction").get<std::map<std::string, double>>();
  r.quality = j.at("gan_quality").get<std::map<std::string, double>>();
  r.aux_accuracy = j.at("aux_accuracy").get<std::map<std::string, double>>();
  return r;
}

GroundTruth load_truth_csv(const fs::path& gt_p, const ExperimentConfig& cfg) {
  DistanceMatrix dm;
  dm.ids.push_back(cfg.target_id);
  for (const auto& lm : cfg.landmark_ids) dm.ids.push_back(lm);
  long n = static_cast<long>(dm.ids.size());
  dm.d = Eigen::MatrixXd::Constant(n, n,
                                   std::numeric_limits<double>::quiet_NaN());
  for (long i = 0; i < n; ++i) dm.d(i, i) = 0.0;
  std::ifstream is(gt_p);
  check(is.good(), "ground truth: cannot read ", gt_p.string());
  std::string line;
  std::getline(is, line);
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    auto comma = line.find(',');
    check(comma != std::string::npos, "ground truth: malformed row");
    std::string lm = line.substr(0, comma);
    double d = std::strtod(line.c_str() + comma + 1, nullptr);
    int idx = dm.index_of(lm);
    check(idx > 0, "ground truth: unknown landmark ", lm);
    dm.d(0, idx) = d;
    dm.d(idx, 0) = d;
  }
  return ground_truth(dm, cfg.target_id);
}

// ---- pipeline state ------------------------------------------------------------

struct ArmTarget {
  std::unique_ptr<TargetModel> model;
  float test_accuracy = -1.0f;
};

struct PipelineRun {
  const ExperimentConfig& cfg;
  fs::path out;
  bool resume;
  std::string cfg_digest;
  std::map<std::string, StageRecord> previous;  // last record per stage
  RunLedger ledger;
  std::ofstream ledger_os;

  LabeledDataset target_train, target_test;
  std::map<std::string, LabeledDataset> landmarks;
  std::shared_ptr<LabeledDataset> pool;  // union of landmarks (instahide)
  std::map<std::string, ArmTarget> targets;
  GroundTruth truth;
  bool have_truth = false;
  std::vector<SeedResults> seeds;

  PipelineRun(const ExperimentConfig& c, const std::string& out_dir, bool res)
      : cfg(c), out(out_dir), resume(res) {
    cfg_digest = experiment_config_digest(cfg);
    fs::create_directories(out / "datasets");
    fs::create_directories(out / "targets");
    fs::create_directories(out / "reports");
    if (resume)
      for (auto& r : read_ledger_csv(out / "ledger.csv"))
        previous[r.stage] = r;
    bool fresh = !fs::exists(out / "ledger.csv");
    ledger_os.open(out / "ledger.csv", std::ios::app);
    check(ledger_os.good(), "pipeline: cannot open run ledger");
    if (fresh) ledger_os << kLedgerHeader << "\n";
    save_experiment_config(cfg, (out / "config.json").string());
  }

  void record(const StageRecord& r) {
    ledger.records.push_back(r);
    ledger_os << r.stage << "," << r.status << "," << r.seed << ","
              << r.config_digest << "," << r.inputs_digest << ","
              << r.outputs_digest << "," << r.wall_ms << "\n";
    ledger_os.flush();
  }

  bool cached(const std::string& id, const std::string& inputs,
              const std::vector<fs::path>& outputs) const {
    if (!resume) return false;
    auto it = previous.find(id);
    if (it == previous.end()) return false;
    const StageRecord& p = it->second;
    if (p.status != "ok" && p.status != "cached") return false;
    if (p.config_digest != cfg_digest || p.inputs_digest != inputs)
      return false;
    for (const auto& f : outputs)
      if (!fs::exists(f)) return false;
    return true;
  }

  /// Runs `compute` unless the stage is cached; records one ledger row
  /// either way. compute must (re)create every path in `outputs`.
  template <typename F>
  void stage(const std::string& id, std::uint64_t seed,
             const std::string& inputs, const std::vector<fs::path>& outputs,
             F&& compute) {
    StageRecord r;
    r.stage = id;
    r.seed = seed;
    r.config_digest = cfg_digest;
    r.inputs_digest = inputs;
    auto t0 = std::chrono::steady_clock::now();
    if (cached(id, inputs, outputs)) {
      r.status = "cached";
      r.outputs_digest = files_digest(outputs);
      r.wall_ms = 0;
      record(r);
      return;
    }
    try {
      compute();
    } catch (const std::exception& e) {
      r.status = std::string("failed: ") + e.what();
      r.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                      std::chrono::steady_clock::now() - t0)
                      .count();
      record(r);
      fail("stage ", id, " failed: ", e.what());
    }
    for (const auto& f : outputs)
      check(fs::exists(f), "stage ", id, " did not produce ", f.string());
    r.status = "ok";
    r.outputs_digest = files_digest(outputs);
    r.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                    std::chrono::steady_clock::now() - t0)
                    .count();
    record(r);
  }

  OtddConfig otdd_with(std::uint64_t seed) const {
    OtddConfig o = cfg.otdd_cfg;
    o.seed = seed;
    o.ledger_csv = (out / "distance_ledger.csv").string();
    return o;
  }

  void run();
  void prepare_data();
  void train_targets();
  void measure_ground_truth();
  void run_seed(int k);
  void write_reports();
};

void PipelineRun::prepare_data() {
  fs::path train_p = out / "datasets" / "target_train.bin";
  fs::path test_p = out / "datasets" / "target_test.bin";
  std::vector<fs::path> outputs = {train_p, test_p};
  for (const auto& lm : cfg.landmark_ids)
    outputs.push_back(out / "datasets" / (lm + ".bin"));
  stage("prepare", cfg.master_seed, "", outputs, [&] {
    int total_pc =
        cfg.data.target_train_per_class + cfg.data.target_test_per_class;
    LabeledDataset full = synth_dataset(
        cfg.target_id, total_pc,
        derive_seed(cfg.master_seed, "data/" + cfg.target_id));
    double ratio = static_cast<double>(cfg.data.target_train_per_class) /
                   static_cast<double>(total_pc);
    auto [tr, te] =
        split(full, ratio, derive_seed(cfg.master_seed, "data/split"));
    tr.source_id = cfg.target_id + "_train";
    te.source_id = cfg.target_id + "_test";
    save_dataset(tr, train_p.string());
    save_dataset(te, test_p.string());
    for (const auto& lm : cfg.landmark_ids) {
      LabeledDataset d = synth_dataset(
          lm, cfg.data.landmark_per_class,
          derive_seed(cfg.master_seed, "data/" + lm));
      save_dataset(d, (out / "datasets" / (lm + ".bin")).string());
    }
  });
  target_train = load_dataset(train_p.string());
  target_test = load_dataset(test_p.string());
  for (const auto& lm : cfg.landmark_ids)
    landmarks[lm] = load_dataset((out / "datasets" / (lm + ".bin")).string());

  // instahide mixing pool: the attacker-visible landmark union
  auto p = std::make_shared<LabeledDataset>();
  int total = 0;
  for (const auto& lm : cfg.landmark_ids) total += landmarks[lm].size();
  p->images = Tensor(total, 1, kImageSize, kImageSize);
  p->source_id = "landmark_pool";
  int row = 0;
  for (const auto& lm : cfg.landmark_ids) {
    const LabeledDataset& d = landmarks[lm];
    for (int i = 0; i < d.size(); ++i, ++row) {
      p->images.copy_item_from(d.images, i, row);
      p->labels.push_back(d.labels[static_cast<std::size_t>(i)]);
    }
  }
  p->validate();
  pool = std::move(p);
}

void PipelineRun::train_targets() {
  std::string inputs;
  {
    Digest d;
    d.str(target_train.digest()).str(target_test.digest());
    d.str(pool->digest());
    inputs = d.hex();
  }
  for (const auto& arm : cfg.mitigation_arms) {
    MitigationMethod method = mitigation_from_name(arm);
    fs::path ckpt = out / "targets" / (arm + ".ckpt");
    fs::path meta = out / "targets" / (arm + ".json");
    fs::path keyp = out / "targets" / (arm + ".key");
    fs::path recp = out / "targets" / (arm + ".recipes");
    std::vector<fs::path> outputs = {ckpt, meta};
    if (method == MitigationMethod::rmt) outputs.push_back(keyp);
    if (method == MitigationMethod::instahide) outputs.push_back(recp);
    std::uint64_t seed = derive_seed(cfg.master_seed, "mitigate/" + arm);
    stage("target/" + arm, seed, inputs, outputs, [&] {
      MitigationParams params = cfg.mitigation;
      params.method = method;
      params.seed = seed;
      ClassifierConfig arch = cfg.target_arch;
      arch.init_seed = derive_seed(cfg.master_seed, "target/init/" + arm);
      FitConfig fit = cfg.target_fit;
      fit.seed = derive_seed(cfg.master_seed, "target/fit/" + arm);
      fit.metrics_csv = (out / "targets" / (arm + ".metrics.csv")).string();
      std::error_code ec;
      fs::remove(fit.metrics_csv, ec);  // appended CSV: start clean
      MitigatedTarget mt = mitigate_and_train(target_train, target_test,
                                              params, arch, fit, pool);
      const TargetModel* inner = mt.model.get();
      if (auto* wrapped = dynamic_cast<const MitigatedModel*>(inner))
        inner = &wrapped->inner();
      const auto* clf = dynamic_cast<const ResidualClassifier*>(inner);
      check(clf != nullptr, "target: unexpected classifier type");
      json meta_j;
      meta_j["method"] = arm;
      meta_j["test_accuracy"] = mt.test_accuracy;
      meta_j["train_accuracy"] = mt.fit.train_accuracy;
      meta_j["final_loss"] = mt.fit.final_loss;
      meta_j["parameter_digest"] = mt.model->parameter_digest();
      clf->to_checkpoint(meta_j.dump()).save(ckpt.string());
      std::ofstream ms(meta);
      ms << meta_j.dump(2) << "\n";
      check(ms.good(), "target: cannot write ", meta.string());
      if (method == MitigationMethod::rmt) rmt_save_key(mt.key, keyp.string());
      if (method == MitigationMethod::instahide)
        instahide_save_recipes(mt.train_recipes, recp.string());
    });
    // load the deployment view back from the artifacts
    ArmTarget at;
    {
      std::ifstream ms(meta);
      json meta_j = json::parse(ms);
      at.test_accuracy = meta_j.at("test_accuracy").get<float>();
    }
    auto clf = ResidualClassifier::from_checkpoint(Checkpoint::load(ckpt.string()));
    switch (method) {
      case MitigationMethod::none:
        at.model = std::move(clf);
        break;
      case MitigationMethod::rmt:
        at.model = std::make_unique<MitigatedModel>(
            std::move(clf), method, rmt_load_key(keyp.string()), nullptr, 0,
            seed);
        break;
      case MitigationMethod::instahide:
        at.model = std::make_unique<MitigatedModel>(
            std::move(clf), method, RmtKey{}, pool, cfg.mitigation.instahide_k,
            seed);
        break;
    }
    targets[arm] = std::move(at);
  }
}

void PipelineRun::measure_ground_truth() {
  fs::path gt_p = out / "ground_truth.csv";
  std::string inputs;
  {
    Digest d;
    d.str(target_train.digest());
    for (const auto& lm : cfg.landmark_ids) d.str(landmarks[lm].digest());
    inputs = d.hex();
  }
  std::uint64_t seed = derive_seed(cfg.master_seed, "gt");
  stage("ground_truth", seed, inputs, {gt_p}, [&] {
    std::ofstream os(gt_p);
    check(os.good(), "ground truth: cannot write ", gt_p.string());
    os << "landmark,distance\n";
    for (const auto& lm : cfg.landmark_ids) {
      double d = otdd(target_train, landmarks[lm], otdd_with(seed));
      os << lm << "," << fmt(d) << "\n";
    }
    check(os.good(), "ground truth: write failed");
  });
  truth = load_truth_csv(gt_p, cfg);
  have_truth = true;
}

void PipelineRun::run_seed(int k) {
  const std::uint64_t sv =
      derive_seed(cfg.master_seed, "attack/" + std::to_string(k));
  fs::path sdir = out / "seeds" / ("s" + std::to_string(k));
  fs::path results_p = sdir / "results.json";
  std::string inputs;
  {
    Digest d;
    for (const auto& lm : cfg.landmark_ids) d.str(landmarks[lm].digest());
    for (const auto& arm : cfg.mitigation_arms)
      d.str(targets[arm].model->parameter_digest());
    if (!cfg.withhold_target_data) d.str(target_train.digest());
    inputs = d.hex();
  }
  stage("seed/" + std::to_string(k), sv, inputs, {results_p}, [&] {
    fs::create_directories(sdir / "gans");
    fs::create_directories(sdir / "gen");
    SeedResults res;
    res.seed_index = k;
    res.seed_value = sv;

    // base WGAN and its generation per landmark
    std::map<std::string, std::unique_ptr<Wgan>> gans;
    std::map<std::string, LabeledDataset> gen0;
    auto train_gan = [&](const std::string& id, const LabeledDataset& data) {
      GanConfig gc = cfg.gan;
      gc.init_seed = derive_seed(sv, "gan/" + id);
      auto gan = std::make_unique<Wgan>(gc);
      std::string csv = (sdir / "gans" / (id + ".metrics.csv")).string();
      std::error_code ec;
      fs::remove(csv, ec);
      gan->train(data, cfg.gan_steps, csv);
      gan->to_checkpoint().save((sdir / "gans" / (id + ".ckpt")).string());
      return gan;
    };
    for (const auto& lm : cfg.landmark_ids) {
      gans[lm] = train_gan(lm, landmarks[lm]);
      LabeledDataset g = gans[lm]->generate(
          cfg.generate_per_class, derive_seed(sv, "gen0/" + lm), lm + "#gen0");
      save_dataset(g, (sdir / "gen" / (lm + ".s0.bin")).string());
      res.quality[lm] = gan_quality(landmarks[lm], g,
                                    otdd_with(derive_seed(sv, "otdd/gq/" + lm)));
      gen0[lm] = std::move(g);
    }
    if (!cfg.withhold_target_data) {
      // evaluator-side diagnostic: generative difficulty of the target domain
      auto tg = train_gan(cfg.target_id, target_train);
      LabeledDataset g =
          tg->generate(cfg.generate_per_class,
                       derive_seed(sv, "gen0/" + cfg.target_id),
                       cfg.target_id + "#gen0");
      save_dataset(g, (sdir / "gen" / (cfg.target_id + ".s0.bin")).string());
      res.quality[cfg.target_id] = gan_quality(
          target_train, g, otdd_with(derive_seed(sv, "otdd/gq/target")));
    }

    // distraction, generation and distances per arm
    for (const auto& arm : cfg.mitigation_arms) {
      const TargetModel& tm = *targets[arm].model;
      for (const auto& lm : cfg.landmark_ids) {
        DistractionConfig dc = cfg.distraction;
        dc.seed = derive_seed(sv, "distract/" + lm + "/" + arm);
        dc.metrics_csv =
            (sdir / "gans" / (lm + ".distract." + arm + ".csv")).string();
        std::error_code ec;
        fs::remove(dc.metrics_csv, ec);
        std::unique_ptr<Wgan> child = distract(*gans[lm], tm, landmarks[lm], dc);
        if (arm == "none")
          child->to_checkpoint().save(
              (sdir / "gans" / (lm + ".distracted.ckpt")).string());
        LabeledDataset g1 = child->generate(
            cfg.generate_per_class,
            derive_seed(sv, "gen1/" + lm + "/" + arm), lm + "#gen1");
        save_dataset(g1,
                     (sdir / "gen" / (lm + ".s1." + arm + ".bin")).string());
        res.differential[arm][lm] = differential_similarity(
            gen0[lm], g1,
            otdd_with(derive_seed(sv, "otdd/diff/" + lm + "/" + arm)));
        if (arm == "none")
          res.alternative[lm] = alternative_similarity(
              landmarks[lm], g1,
              otdd_with(derive_seed(sv, "otdd/alt/" + lm)));
      }
    }

    // reconstruction-based ranking and auxiliary-data attacks (baseline arm)
    if (targets.count("none")) {
      const TargetModel& tm = *targets["none"].model;
      for (const auto& lm : cfg.landmark_ids) {
        InversionConfig ic = cfg.inversion;
        ic.seed = derive_seed(sv, "recon/" + lm);
        res.reconstruction[lm] = reconstruction_similarity(
            tm, landmarks[lm], ic,
            otdd_with(derive_seed(sv, "otdd/recon/" + lm)));
      }
      RankingResult rr =
          rank_landmarks(res.differential.at("none"),
                         RankMethod::gan_differential, cfg.target_id, sv);
      fs::create_directories(sdir / "recon");
      auto run_attack = [&](const std::string& tag, const LabeledDataset* aux) {
        InversionConfig ic = cfg.inversion;
        ic.seed = derive_seed(sv, "aux/" + tag);
        ic.init = aux ? InversionInit::aux_sample : InversionInit::uniform_noise;
        LabeledDataset rec = invert_dataset(tm, aux, ic);
        save_dataset(rec, (sdir / "recon" / (tag + ".bin")).string());
        res.aux_accuracy[tag] =
            static_cast<double>(attack_accuracy(tm, rec));
      };
      run_attack("no_aux", nullptr);
      for (int r : cfg.aux_ranks) {
        const std::string& lm =
            rr.landmark_ids[static_cast<std::size_t>(r - 1)];
        run_attack("rank" + std::to_string(r), &landmarks.at(lm));
      }
    }

    std::ofstream os(results_p);
    check(os.good(), "seed: cannot write ", results_p.string());
    os << seed_results_to_json(res).dump(2) << "\n";
    check(os.good(), "seed: write failed");
  });
  std::ifstream is(results_p);
  check(is.good(), "seed: cannot read ", results_p.string());
  seeds.push_back(seed_results_from_json(json::parse(is)));
}

namespace {

struct MeanStderr {
  double mean = 0.0;
  double stderr_ = 0.0;
  int n = 0;
};

MeanStderr mean_stderr(const std::vector<double>& xs) {
  MeanStderr m;
  m.n = static_cast<int>(xs.size());
  if (m.n == 0) return m;
  for (double x : xs) m.mean += x;
  m.mean /= m.n;
  if (m.n >= 2) {
    double ss = 0.0;
    for (double x : xs) ss += (x - m.mean) * (x - m.mean);
    m.stderr_ = std::sqrt(ss / (m.n - 1)) / std::sqrt(double(m.n));
  }
  return m;
}

struct ReportInputs {
  ExperimentConfig cfg;
  fs::path out;
  std::vector<SeedResults> seeds;
  bool have_truth = false;
  GroundTruth truth;
  std::map<std::string, float> arm_accuracy;
};

std::map<std::string, std::string> build_reports(const ReportInputs& in) {
  const ExperimentConfig& cfg = in.cfg;
  fs::path rdir = in.out / "reports";
  fs::create_directories(rdir);
  const int n_lm = static_cast<int>(cfg.landmark_ids.size());

  // rankings: every (arm, method, seed) with its ordered landmarks
  {
    std::ofstream os(rdir / "ranking.csv");
    os << "target,arm,method,seed,rank,landmark,distance\n";
    for (const auto& r : in.seeds) {
      auto emit = [&](const std::string& arm, RankMethod m,
                      const std::map<std::string, double>& d) {
        RankingResult rr =
            rank_landmarks(d, m, cfg.target_id, r.seed_value);
        for (std::size_t i = 0; i < rr.landmark_ids.size(); ++i)
          os << cfg.target_id << "," << arm << "," << method_name(m) << ","
             << r.seed_index << "," << (i + 1) << "," << rr.landmark_ids[i]
             << "," << fmt(rr.distances[i]) << "\n";
      };
      for (const auto& [arm, d] : r.differential)
        emit(arm, RankMethod::gan_differential, d);
      if (!r.alternative.empty())
        emit("none", RankMethod::gan_alternative, r.alternative);
      if (!r.reconstruction.empty())
        emit("none", RankMethod::reconstruction, r.reconstruction);
    }
    check(os.good(), "reports: ranking write failed");
  }

  // per-seed and aggregated NDCG (needs ground truth)
  std::map<std::string, std::map<int, std::vector<double>>> ndcg_by_method;
  std::map<std::string, std::vector<double>> ndcg1_by_arm;
  if (in.have_truth) {
    const GroundTruth& truth = in.truth;
    std::string best;
    {
      std::map<std::string, double> gd;
      for (std::size_t i = 0; i < truth.landmark_ids.size(); ++i)
        gd[truth.landmark_ids[i]] = truth.distances[i];
      best = rank_landmarks(gd, RankMethod::gan_differential, cfg.target_id, 0)
                 .landmark_ids[0];
    }
    std::ofstream os(rdir / "ndcg_per_seed.csv");
    os << "target,arm,method,seed,m,ndcg,top1_hit\n";
    auto emit = [&](const std::string& arm, RankMethod m, const SeedResults& r,
                    const std::map<std::string, double>& d) {
      RankingResult rr = rank_landmarks(d, m, cfg.target_id, r.seed_value);
      int hit = rr.landmark_ids[0] == best ? 1 : 0;
      for (int mm = 1; mm <= n_lm; ++mm) {
        double v = ndcg_at_m(rr, truth, mm);
        os << cfg.target_id << "," << arm << "," << method_name(m) << ","
           << r.seed_index << "," << mm << "," << fmt(v) << "," << hit << "\n";
        if (arm == "none") ndcg_by_method[method_name(m)][mm].push_back(v);
        if (m == RankMethod::gan_differential && mm == 1)
          ndcg1_by_arm[arm].push_back(v);
      }
    };
    for (const auto& r : in.seeds) {
      for (const auto& [arm, d] : r.differential)
        emit(arm, RankMethod::gan_differential, r, d);
      if (!r.alternative.empty())
        emit("none", RankMethod::gan_alternative, r, r.alternative);
      if (!r.reconstruction.empty())
        emit("none", RankMethod::reconstruction, r, r.reconstruction);
    }
    check(os.good(), "reports: per-seed ndcg write failed");

    std::ofstream ag(rdir / "ndcg.csv");
    ag << "target,method,m,ndcg,stderr,seeds\n";
    for (const auto& [mname, per_m] : ndcg_by_method)
      for (const auto& [mm, vals] : per_m) {
        MeanStderr ms = mean_stderr(vals);
        ag << cfg.target_id << "," << mname << "," << mm << "," << fmt(ms.mean)
           << "," << fmt(ms.stderr_) << "," << ms.n << "\n";
      }
    check(ag.good(), "reports: ndcg write failed");

    std::ofstream mg(rdir / "mitigation.csv");
    mg << "target,mitigation,ndcg1,ndcg1_stderr,model_accuracy,seeds\n";
    for (const auto& arm : cfg.mitigation_arms) {
      auto it = ndcg1_by_arm.find(arm);
      MeanStderr ms =
          it == ndcg1_by_arm.end() ? MeanStderr{} : mean_stderr(it->second);
      mg << cfg.target_id << "," << arm << "," << fmt(ms.mean) << ","
         << fmt(ms.stderr_) << "," << fmt(in.arm_accuracy.at(arm)) << ","
         << ms.n << "\n";
    }
    check(mg.good(), "reports: mitigation write failed");
  }

  // auxiliary-data attack accuracy
  {
    std::vector<std::string> tags = {"no_aux"};
    for (auto it = cfg.aux_ranks.rbegin(); it != cfg.aux_ranks.rend(); ++it)
      tags.push_back("rank" + std::to_string(*it));
    std::ofstream ps(rdir / "aux_per_seed.csv");
    ps << "target,aux,seed,attack_accuracy\n";
    std::ofstream ag(rdir / "aux_boost.csv");
    ag << "target,aux,attack_accuracy,stderr,seeds\n";
    for (const auto& tag : tags) {
      std::vector<double> vals;
      for (const auto& r : in.seeds) {
        auto it = r.aux_accuracy.find(tag);
        if (it == r.aux_accuracy.end()) continue;
        ps << cfg.target_id << "," << tag << "," << r.seed_index << ","
           << fmt(it->second) << "\n";
        vals.push_back(it->second);
      }
      MeanStderr ms = mean_stderr(vals);
      ag << cfg.target_id << "," << tag << "," << fmt(ms.mean) << ","
         << fmt(ms.stderr_) << "," << ms.n << "\n";
    }
    check(ps.good() && ag.good(), "reports: aux write failed");
  }

  // generative quality per domain
  {
    std::vector<std::string> domains;
    if (!cfg.withhold_target_data) domains.push_back(cfg.target_id);
    for (const auto& lm : cfg.landmark_ids) domains.push_back(lm);
    std::ofstream ps(rdir / "gan_quality_per_seed.csv");
    ps << "dataset,seed,gan_quality\n";
    std::ofstream ag(rdir / "gan_quality.csv");
    ag << "dataset,gan_quality,stderr,seeds\n";
    for (const auto& dom : domains) {
      std::vector<double> vals;
      for (const auto& r : in.seeds) {
        auto it = r.quality.find(dom);
        if (it == r.quality.end()) continue;
        ps << dom << "," << r.seed_index << "," << fmt(it->second) << "\n";
        vals.push_back(it->second);
      }
      MeanStderr ms = mean_stderr(vals);
      ag << dom << "," << fmt(ms.mean) << "," << fmt(ms.stderr_) << ","
         << ms.n << "\n";
    }
    check(ps.good() && ag.good(), "reports: gan quality write failed");
  }

  // digest index over every report file (excluding itself)
  auto digests = report_digests(in.out.string());
  std::ofstream ds(rdir / "digests.txt");
  for (const auto& [name, dg] : digests) ds << name << "," << dg << "\n";
  check(ds.good(), "reports: digest write failed");
  return digests;
}

}  // namespace

void PipelineRun::write_reports() {
  ReportInputs in;
  in.cfg = cfg;
  in.out = out;
  in.seeds = seeds;
  in.have_truth = have_truth;
  in.truth = truth;
  for (const auto& [arm, at] : targets) in.arm_accuracy[arm] = at.test_accuracy;
  build_reports(in);
}

void PipelineRun::run() {
  prepare_data();
  train_targets();
  if (!cfg.withhold_target_data) measure_ground_truth();
  for (int k = 0; k < cfg.n_seeds; ++k) run_seed(k);
  std::string inputs;
  {
    Digest d;
    for (const auto& r : seeds) {
      d.pod(r.seed_index);
      d.pod(r.seed_value);
    }
    inputs = d.hex();
  }
  StageRecord rep;
  rep.stage = "reports";
  rep.seed = cfg.master_seed;
  rep.config_digest = cfg_digest;
  rep.inputs_digest = inputs;
  auto t0 = std::chrono::steady_clock::now();
  try {
    write_reports();
  } catch (const std::exception& e) {
    rep.status = std::string("failed: ") + e.what();
    record(rep);
    fail("stage reports failed: ", e.what());
  }
  rep.status = "ok";
  rep.outputs_digest = report_digests(out.string()).at("combined");
  rep.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                    std::chrono::steady_clock::now() - t0)
                    .count();
  record(rep);
}

}  // namespace

RunLedger run_pipeline(const ExperimentConfig& cfg, const std::string& out_dir,
                       bool resume) {
  cfg.validate();
  PipelineRun run(cfg, out_dir, resume);
  run.run();
  return std::move(run.ledger);
}

std::map<std::string, std::string> rebuild_reports(const std::string& out_dir) {
  fs::path out(out_dir);
  fs::path cfg_p = out / "config.json";
  check(fs::exists(cfg_p), "report: missing stage prepare (no config.json in ",
        out_dir, ")");
  ReportInputs in;
  in.cfg = load_experiment_config(cfg_p.string());
  in.out = out;
  for (int k = 0; k < in.cfg.n_seeds; ++k) {
    fs::path rp = out / "seeds" / ("s" + std::to_string(k)) / "results.json";
    check(fs::exists(rp), "report: missing stage seed/", k);
    std::ifstream is(rp);
    in.seeds.push_back(seed_results_from_json(json::parse(is)));
  }
  if (!in.cfg.withhold_target_data) {
    fs::path gt = out / "ground_truth.csv";
    check(fs::exists(gt), "report: missing stage ground_truth");
    in.truth = load_truth_csv(gt, in.cfg);
    in.have_truth = true;
  }
  for (const auto& arm : in.cfg.mitigation_arms) {
    fs::path mp = out / "targets" / (arm + ".json");
    check(fs::exists(mp), "report: missing stage target/", arm);
    std::ifstream ms(mp);
    in.arm_accuracy[arm] = json::parse(ms).at("test_accuracy").get<float>();
  }
  return build_reports(in);
}

std::map<std::string, std::string> report_digests(const std::string& out_dir) {
  fs::path rdir = fs::path(out_dir) / "reports";
  check(fs::exists(rdir), "reports: no report directory under ", out_dir);
  std::vector<fs::path> files;
  for (const auto& e : fs::directory_iterator(rdir)) {
    if (!e.is_regular_file()) continue;
    if (e.path().filename() == "digests.txt") continue;
    files.push_back(e.path());
  }
  std::sort(files.begin(), files.end());
  std::map<std::string, std::string> out;
  Digest combined;
  for (const auto& f : files) {
    std::string dg = file_digest(f);
    out[f.filename().string()] = dg;
    combined.str(f.filename().string());
    combined.str(dg);
  }
  out["combined"] = combined.hex();
  return out;
}

double gan_quality(const LabeledDataset& real, const LabeledDataset& generated,
                   const OtddConfig& cfg) {
  check(!real.empty() && !generated.empty(), "gan_quality: empty dataset");
  check(real.present_classes() == generated.present_classes(),
        "gan_quality: class sets differ");
  return otdd(real, generated, cfg);
}

}  // namespace mdi
