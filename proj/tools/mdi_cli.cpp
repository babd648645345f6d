// Command-line front end for the domain inference pipeline. Every subcommand
// is a thin wrapper over the library; run-all executes the whole experiment.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>

#include "CLI11.hpp"
#include "mdi/checkpoint.hpp"
#include "mdi/common.hpp"
#include "mdi/dataset.hpp"
#include "mdi/distraction.hpp"
#include "mdi/experiment.hpp"
#include "mdi/inversion.hpp"
#include "mdi/mitigation.hpp"
#include "mdi/otdd.hpp"
#include "mdi/pipeline.hpp"
#include "mdi/ranking.hpp"
#include "mdi/rng.hpp"
#include "mdi/synth.hpp"
#include "mdi/target_model.hpp"
#include "mdi/wgan.hpp"

namespace fs = std::filesystem;
using namespace mdi;

namespace {

struct GlobalArgs {
  std::string config_path;
  std::uint64_t seed = 7;
  bool seed_set = false;
  std::string scale = "desk";
  bool scale_set = false;
  std::string out = "out";
  bool resume = false;
};

void add_common(CLI::App* sub, GlobalArgs& g) {
  sub->add_option("--config", g.config_path, "experiment config JSON");
  sub->add_option("--seed", g.seed, "master seed")
      ->each([&](const std::string&) { g.seed_set = true; });
  sub->add_option("--scale", g.scale, "preset scale: desk or full")
      ->check(CLI::IsMember({"desk", "full"}))
      ->each([&](const std::string&) { g.scale_set = true; });
  sub->add_option("--out", g.out, "output directory");
  sub->add_flag("--resume", g.resume, "reuse artifacts that match the config");
}

ExperimentConfig resolve_config(const GlobalArgs& g) {
  ExperimentConfig cfg;
  if (!g.config_path.empty()) {
    cfg = load_experiment_config(g.config_path);
    if (g.scale_set && g.scale != cfg.scale) {
      ExperimentConfig base = g.scale == "full" ? full_config() : desk_config();
      base.master_seed = cfg.master_seed;
      base.target_id = cfg.target_id;
      base.landmark_ids = cfg.landmark_ids;
      base.withhold_target_data = cfg.withhold_target_data;
      base.mitigation_arms = cfg.mitigation_arms;
      base.aux_ranks = cfg.aux_ranks;
      cfg = base;
    }
  } else {
    cfg = (g.scale_set && g.scale == "full") ? full_config() : desk_config();
  }
  if (g.seed_set) cfg.master_seed = g.seed;
  cfg.validate();
  return cfg;
}

std::unique_ptr<TargetModel> load_target(const std::string& ckpt_path,
                                         const std::string& mitigation,
                                         const std::string& key_path,
                                         const std::string& pool_path, int k,
                                         std::uint64_t seed) {
  auto clf = ResidualClassifier::from_checkpoint(Checkpoint::load(ckpt_path));
  MitigationMethod m = mitigation_from_name(mitigation);
  switch (m) {
    case MitigationMethod::none:
      return clf;
    case MitigationMethod::rmt: {
      check(!key_path.empty(), "rmt deployment needs --key");
      return std::make_unique<MitigatedModel>(std::move(clf), m,
                                              rmt_load_key(key_path), nullptr,
                                              0, seed);
    }
    case MitigationMethod::instahide: {
      check(!pool_path.empty(), "instahide deployment needs --pool");
      auto pool = std::make_shared<LabeledDataset>(load_dataset(pool_path));
      return std::make_unique<MitigatedModel>(std::move(clf), m, RmtKey{},
                                              std::move(pool), k, seed);
    }
  }
  fail("unknown mitigation ", mitigation);
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"model domain inference pipeline"};
  app.require_subcommand(1);
  GlobalArgs g;

  // prepare-data
  auto* prep = app.add_subcommand(
      "prepare-data", "synthesize the landmark corpus and the target split");
  add_common(prep, g);
  prep->callback([&] {
    ExperimentConfig cfg = resolve_config(g);
    fs::create_directories(fs::path(g.out) / "datasets");
    int total_pc =
        cfg.data.target_train_per_class + cfg.data.target_test_per_class;
    LabeledDataset full =
        synth_dataset(cfg.target_id, total_pc,
                      derive_seed(cfg.master_seed, "data/" + cfg.target_id));
    double ratio = double(cfg.data.target_train_per_class) / double(total_pc);
    auto [tr, te] =
        split(full, ratio, derive_seed(cfg.master_seed, "data/split"));
    tr.source_id = cfg.target_id + "_train";
    te.source_id = cfg.target_id + "_test";
    fs::path ddir = fs::path(g.out) / "datasets";
    save_dataset(tr, (ddir / "target_train.bin").string());
    save_dataset(te, (ddir / "target_test.bin").string());
    std::cout << "wrote " << (ddir / "target_train.bin").string() << " ("
              << tr.size() << " images)\n";
    std::cout << "wrote " << (ddir / "target_test.bin").string() << " ("
              << te.size() << " images)\n";
    for (const auto& lm : cfg.landmark_ids) {
      LabeledDataset d = synth_dataset(
          lm, cfg.data.landmark_per_class,
          derive_seed(cfg.master_seed, "data/" + lm));
      save_dataset(d, (ddir / (lm + ".bin")).string());
      std::cout << "wrote " << (ddir / (lm + ".bin")).string() << " ("
                << d.size() << " images)\n";
    }
  });

  // train-target
  auto* tt = app.add_subcommand("train-target",
                                "train the classifier under a mitigation arm");
  add_common(tt, g);
  std::string tt_train, tt_test, tt_mit = "none", tt_pool, tt_out = "target.ckpt";
  tt->add_option("--train", tt_train, "training dataset")->required();
  tt->add_option("--test", tt_test, "held-out dataset")->required();
  tt->add_option("--mitigation", tt_mit, "none, rmt or instahide");
  tt->add_option("--pool", tt_pool, "mixing pool dataset (instahide)");
  tt->add_option("--model-out", tt_out, "checkpoint path");
  tt->callback([&] {
    ExperimentConfig cfg = resolve_config(g);
    MitigationParams params = cfg.mitigation;
    params.method = mitigation_from_name(tt_mit);
    params.seed = derive_seed(cfg.master_seed, "mitigate/" + tt_mit);
    ClassifierConfig arch = cfg.target_arch;
    arch.init_seed = derive_seed(cfg.master_seed, "target/init/" + tt_mit);
    FitConfig fit = cfg.target_fit;
    fit.seed = derive_seed(cfg.master_seed, "target/fit/" + tt_mit);
    LabeledDataset train = load_dataset(tt_train);
    LabeledDataset test = load_dataset(tt_test);
    std::shared_ptr<LabeledDataset> pool;
    if (!tt_pool.empty())
      pool = std::make_shared<LabeledDataset>(load_dataset(tt_pool));
    MitigatedTarget mt =
        mitigate_and_train(train, test, params, arch, fit, pool);
    const TargetModel* inner = mt.model.get();
    if (auto* w = dynamic_cast<const MitigatedModel*>(inner))
      inner = &w->inner();
    const auto* clf = dynamic_cast<const ResidualClassifier*>(inner);
    check(clf != nullptr, "unexpected classifier type");
    clf->to_checkpoint("{}").save(tt_out);
    if (params.method == MitigationMethod::rmt)
      rmt_save_key(mt.key, tt_out + ".key");
    if (params.method == MitigationMethod::instahide)
      instahide_save_recipes(mt.train_recipes, tt_out + ".recipes");
    std::cout << "test_accuracy " << mt.test_accuracy << "\n";
    std::cout << "wrote " << tt_out << "\n";
  });

  // train-gan
  auto* tg = app.add_subcommand("train-gan", "train a WGAN on a dataset");
  add_common(tg, g);
  std::string tg_data, tg_out = "gan.ckpt", tg_metrics;
  int tg_steps = -1;
  tg->add_option("--data", tg_data, "training dataset")->required();
  tg->add_option("--model-out", tg_out, "checkpoint path");
  tg->add_option("--steps", tg_steps, "generator steps (default from scale)");
  tg->add_option("--metrics", tg_metrics, "per-step loss CSV");
  tg->callback([&] {
    ExperimentConfig cfg = resolve_config(g);
    GanConfig gc = cfg.gan;
    gc.init_seed = derive_seed(cfg.master_seed, "gan/cli");
    Wgan gan(gc);
    LabeledDataset data = load_dataset(tg_data);
    gan.train(data, tg_steps < 0 ? cfg.gan_steps : tg_steps, tg_metrics);
    gan.to_checkpoint().save(tg_out);
    std::cout << "wrote " << tg_out << "\n";
  });

  // distract
  auto* ds = app.add_subcommand(
      "distract", "pull a trained WGAN toward the target model's domain");
  add_common(ds, g);
  std::string ds_gan, ds_target, ds_landmark, ds_out = "distracted.ckpt";
  std::string ds_mit = "none", ds_key, ds_pool, ds_metrics;
  int ds_steps = -1;
  ds->add_option("--gan", ds_gan, "base WGAN checkpoint")->required();
  ds->add_option("--target", ds_target, "target classifier checkpoint")
      ->required();
  ds->add_option("--landmark", ds_landmark, "landmark dataset")->required();
  ds->add_option("--model-out", ds_out, "distracted checkpoint path");
  ds->add_option("--mitigation", ds_mit, "deployment wrapper of the target");
  ds->add_option("--key", ds_key, "rmt key file");
  ds->add_option("--pool", ds_pool, "instahide pool dataset");
  ds->add_option("--steps", ds_steps, "distraction steps");
  ds->add_option("--metrics", ds_metrics, "per-step loss CSV");
  ds->callback([&] {
    ExperimentConfig cfg = resolve_config(g);
    auto base = Wgan::from_checkpoint(Checkpoint::load(ds_gan));
    auto target = load_target(ds_target, ds_mit, ds_key, ds_pool,
                              cfg.mitigation.instahide_k,
                              derive_seed(cfg.master_seed, "mitigate/" + ds_mit));
    LabeledDataset landmark = load_dataset(ds_landmark);
    DistractionConfig dc = cfg.distraction;
    if (ds_steps >= 0) dc.steps = ds_steps;
    dc.seed = derive_seed(cfg.master_seed, "distract/cli");
    dc.metrics_csv = ds_metrics;
    DistractionStats stats;
    auto child = distract(*base, *target, landmark, dc, &stats);
    child->to_checkpoint().save(ds_out);
    std::cout << "wrote " << ds_out << "\n";
    std::cout << "steps " << stats.steps_run << " loss_prior "
              << stats.last_loss_prior << " loss_id " << stats.last_loss_id
              << "\n";
  });

  // distance
  auto* di = app.add_subcommand("distance",
                                "optimal transport distance between datasets");
  add_common(di, g);
  std::string di_a, di_b, di_ledger;
  bool di_exact = false;
  double di_eps = -1.0;
  int di_points = -1;
  di->add_option("--a", di_a, "first dataset")->required();
  di->add_option("--b", di_b, "second dataset")->required();
  di->add_flag("--exact", di_exact, "exact solver instead of sinkhorn");
  di->add_option("--epsilon", di_eps, "entropic regularization");
  di->add_option("--max-points", di_points, "subsample cap per side");
  di->add_option("--ledger", di_ledger, "append the measurement to this CSV");
  di->callback([&] {
    ExperimentConfig cfg = resolve_config(g);
    OtddConfig oc = cfg.otdd_cfg;
    oc.seed = derive_seed(cfg.master_seed, "distance/cli");
    if (di_exact) oc.use_exact = true;
    if (di_eps > 0) oc.epsilon = di_eps;
    if (di_points > 0) oc.max_points = di_points;
    oc.ledger_csv = di_ledger;
    LabeledDataset a = load_dataset(di_a);
    LabeledDataset b = load_dataset(di_b);
    OtddDiagnostics diag;
    double d = otdd(a, b, oc, &diag);
    std::cout << "distance " << d << "\n";
    std::cout << "points " << diag.points_a << " " << diag.points_b
              << " converged " << (diag.converged ? 1 : 0) << "\n";
    for (const auto& w : diag.warnings) std::cout << "warning " << w << "\n";
  });

  // rank
  auto* rk = app.add_subcommand("rank",
                                "order landmarks by a distance table");
  add_common(rk, g);
  std::string rk_distances, rk_method = "gan_differential", rk_target = "target";
  rk->add_option("--distances", rk_distances,
                 "CSV with landmark,distance rows")
      ->required();
  rk->add_option("--method", rk_method, "ranking method label");
  rk->add_option("--target-id", rk_target, "target identifier");
  rk->callback([&] {
    ExperimentConfig cfg = resolve_config(g);
    std::ifstream is(rk_distances);
    check(is.good(), "cannot open ", rk_distances);
    std::map<std::string, double> d;
    std::string line;
    std::getline(is, line);  // header
    while (std::getline(is, line)) {
      if (line.empty()) continue;
      auto comma = line.find(',');
      check(comma != std::string::npos, "malformed row: ", line);
      d[line.substr(0, comma)] =
          std::strtod(line.c_str() + comma + 1, nullptr);
    }
    RankingResult rr = rank_landmarks(d, method_from_name(rk_method),
                                      rk_target, cfg.master_seed);
    std::cout << "rank,landmark,distance\n";
    for (std::size_t i = 0; i < rr.landmark_ids.size(); ++i)
      std::cout << (i + 1) << "," << rr.landmark_ids[i] << ","
                << rr.distances[i] << "\n";
  });

  // evaluate
  auto* ev = app.add_subcommand(
      "evaluate", "recompute rankings against ground truth for a run");
  add_common(ev, g);
  ev->callback([&] {
    rebuild_reports(g.out);
    std::ifstream is(fs::path(g.out) / "reports" / "ndcg.csv");
    check(is.good(), "evaluate: run has no ndcg report (target data withheld?)");
    std::cout << is.rdbuf();
  });

  // invert
  auto* iv = app.add_subcommand("invert",
                                "reconstruct training-like images per class");
  add_common(iv, g);
  std::string iv_target, iv_aux, iv_out = "reconstruction.bin";
  std::string iv_mit = "none", iv_key, iv_pool;
  int iv_steps = -1, iv_count = -1;
  iv->add_option("--target", iv_target, "target classifier checkpoint")
      ->required();
  iv->add_option("--aux", iv_aux, "auxiliary dataset for initialization");
  iv->add_option("--recon-out", iv_out, "reconstructed dataset path");
  iv->add_option("--mitigation", iv_mit, "deployment wrapper of the target");
  iv->add_option("--key", iv_key, "rmt key file");
  iv->add_option("--pool", iv_pool, "instahide pool dataset");
  iv->add_option("--steps", iv_steps, "ascent steps");
  iv->add_option("--per-class", iv_count, "reconstructions per class");
  iv->callback([&] {
    ExperimentConfig cfg = resolve_config(g);
    auto target = load_target(iv_target, iv_mit, iv_key, iv_pool,
                              cfg.mitigation.instahide_k,
                              derive_seed(cfg.master_seed, "mitigate/" + iv_mit));
    InversionConfig ic = cfg.inversion;
    if (iv_steps >= 0) ic.steps = iv_steps;
    if (iv_count > 0) ic.per_class_count = iv_count;
    ic.seed = derive_seed(cfg.master_seed, "invert/cli");
    LabeledDataset aux;
    const LabeledDataset* aux_p = nullptr;
    if (!iv_aux.empty()) {
      aux = load_dataset(iv_aux);
      aux_p = &aux;
      ic.init = InversionInit::aux_sample;
    } else {
      ic.init = InversionInit::uniform_noise;
    }
    LabeledDataset rec = invert_dataset(*target, aux_p, ic);
    save_dataset(rec, iv_out);
    float acc = attack_accuracy(*target, rec);
    std::cout << "wrote " << iv_out << "\n";
    std::cout << "attack_accuracy " << acc << "\n";
  });

  // mitigate
  auto* mi = app.add_subcommand("mitigate",
                                "transform a dataset with a mitigation");
  add_common(mi, g);
  std::string mi_method, mi_data, mi_out = "mitigated.bin", mi_pool;
  mi->add_option("--method", mi_method, "rmt or instahide")->required();
  mi->add_option("--data", mi_data, "input dataset")->required();
  mi->add_option("--data-out", mi_out, "transformed dataset path");
  mi->add_option("--pool", mi_pool, "mixing pool dataset (instahide)");
  mi->callback([&] {
    ExperimentConfig cfg = resolve_config(g);
    LabeledDataset data = load_dataset(mi_data);
    MitigationMethod m = mitigation_from_name(mi_method);
    std::uint64_t seed = derive_seed(cfg.master_seed, "mitigate/cli");
    if (m == MitigationMethod::rmt) {
      RmtKey key = rmt_generate_key(cfg.mitigation.rmt_block_count, seed,
                                    cfg.mitigation.rmt_sigma);
      LabeledDataset out = rmt_transform_dataset(data, key);
      save_dataset(out, mi_out);
      rmt_save_key(key, mi_out + ".key");
      std::cout << "wrote " << mi_out << " and " << mi_out << ".key\n";
    } else if (m == MitigationMethod::instahide) {
      const LabeledDataset* pool = &data;
      LabeledDataset pool_data;
      if (!mi_pool.empty()) {
        pool_data = load_dataset(mi_pool);
        pool = &pool_data;
      }
      std::vector<InstaHideRecipe> recipes;
      LabeledDataset out = instahide_transform_dataset(
          data, *pool, cfg.mitigation.instahide_k, seed, &recipes);
      save_dataset(out, mi_out);
      instahide_save_recipes(recipes, mi_out + ".recipes");
      std::cout << "wrote " << mi_out << " and " << mi_out << ".recipes\n";
    } else {
      fail("mitigate: method must be rmt or instahide");
    }
  });

  // report
  auto* rp = app.add_subcommand("report",
                                "rebuild report files and print their digests");
  add_common(rp, g);
  rp->callback([&] {
    auto digests = rebuild_reports(g.out);
    for (const auto& [name, dg] : digests)
      std::cout << name << " " << dg << "\n";
  });

  // run-all
  auto* ra = app.add_subcommand("run-all", "execute the whole experiment");
  add_common(ra, g);
  ra->callback([&] {
    ExperimentConfig cfg = resolve_config(g);
    RunLedger ledger = run_pipeline(cfg, g.out, g.resume);
    int ok = 0, cached = 0;
    for (const auto& r : ledger.records) {
      if (r.status == "ok") ++ok;
      if (r.status == "cached") ++cached;
    }
    std::cout << "stages " << ledger.records.size() << " ok " << ok
              << " cached " << cached << "\n";
    auto digests = report_digests(g.out);
    std::cout << "report_digest " << digests.at("combined") << "\n";
  });

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
