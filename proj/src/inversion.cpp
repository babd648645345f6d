#include "mdi/inversion.hpp"

#include <algorithm>
#include <cmath>
#include <vector>

#include "mdi/common.hpp"
#include "mdi/rng.hpp"

namespace mdi {

namespace {

constexpr int kS = kImageSize;
constexpr int kDim = kS * kS;
constexpr double kProbFloor = 1e-12;

void validate_config(const InversionConfig& cfg) {
  check(cfg.per_class_count >= 1, "inversion: per-class count must be >= 1");
  check(cfg.step_size > 0.0f, "inversion: step size must be positive");
  check(cfg.steps >= 0, "inversion: negative step count");
  check(cfg.tv_weight >= 0.0f, "inversion: negative smoothness weight");
}

void draw_init(Rng& rng, const LabeledDataset* aux, InversionInit mode,
               float* out) {
  if (mode == InversionInit::aux_sample) {
    check(aux != nullptr && !aux->empty(),
          "inversion: aux initialization without aux data");
    int idx = rng.uniform_int(0, aux->size() - 1);
    std::copy_n(aux->images.item(idx), kDim, out);
  } else {
    for (int k = 0; k < kDim; ++k)
      out[k] = static_cast<float>(rng.uniform(-1.0, 1.0));
  }
}

// log p(c | x) with a floor so the objective stays finite at zero mass
std::vector<double> log_probs_of(const TargetModel& target, const Tensor& x,
                                 int class_id) {
  Tensor p = target.predict(x);
  std::vector<double> out(static_cast<std::size_t>(x.n()));
  for (int i = 0; i < x.n(); ++i)
    out[static_cast<std::size_t>(i)] = std::log(
        std::max(static_cast<double>(p.item(i)[class_id]), kProbFloor));
  return out;
}

}  // namespace

double tv_penalty(const float* img, float* grad) {
  if (grad) std::fill_n(grad, kDim, 0.0f);
  double value = 0.0;
  for (int i = 0; i < kS; ++i)
    for (int j = 0; j < kS; ++j) {
      if (j + 1 < kS) {
        double d = static_cast<double>(img[i * kS + j + 1]) -
                   static_cast<double>(img[i * kS + j]);
        value += d * d;
        if (grad) {
          grad[i * kS + j + 1] += static_cast<float>(2.0 * d);
          grad[i * kS + j] -= static_cast<float>(2.0 * d);
        }
      }
      if (i + 1 < kS) {
        double d = static_cast<double>(img[(i + 1) * kS + j]) -
                   static_cast<double>(img[i * kS + j]);
        value += d * d;
        if (grad) {
          grad[(i + 1) * kS + j] += static_cast<float>(2.0 * d);
          grad[i * kS + j] -= static_cast<float>(2.0 * d);
        }
      }
    }
  return value;
}

Tensor invert_class(const TargetModel& target, int class_id,
                    const LabeledDataset* aux, const InversionConfig& cfg) {
  validate_config(cfg);
  check(class_id >= 0 && class_id < target.num_classes(),
        "inversion: class id out of range");
  if (aux) aux->validate();
  const int n = cfg.per_class_count;
  Rng rng(derive_seed(cfg.seed, "invert/c" + std::to_string(class_id)));

  Tensor x(n, 1, kS, kS);
  std::vector<int> restarts(static_cast<std::size_t>(n), 0);
  for (int i = 0; i < n; ++i) draw_init(rng, aux, cfg.init, x.item(i));
  if (cfg.steps == 0) return x;

  const double tvw = static_cast<double>(cfg.tv_weight);
  std::vector<int> classes(static_cast<std::size_t>(n), class_id);
  std::vector<float> tvg(static_cast<std::size_t>(kDim));

  auto objective = [&](const Tensor& batch) {
    std::vector<double> obj = log_probs_of(target, batch, class_id);
    for (int i = 0; i < batch.n(); ++i)
      obj[static_cast<std::size_t>(i)] -= tvw * tv_penalty(batch.item(i),
                                                           nullptr);
    return obj;
  };
  auto restart_sample = [&](int i) {
    check(++restarts[static_cast<std::size_t>(i)] <= 3,
          "inversion: sample diverged after 3 restarts (class ", class_id,
          ")");
    draw_init(rng, aux, cfg.init, x.item(i));
  };

  std::vector<double> obj = objective(x);
  for (int i = 0; i < n; ++i)
    while (!std::isfinite(obj[static_cast<std::size_t>(i)])) {
      restart_sample(i);
      Tensor one(1, 1, kS, kS);
      one.copy_item_from(x, i, 0);
      obj[static_cast<std::size_t>(i)] = objective(one)[0];
    }

  for (int step = 0; step < cfg.steps; ++step) {
    Tensor grad = target.log_prob_input_gradient(x, classes);
    for (int i = 0; i < n; ++i) {
      tv_penalty(x.item(i), tvg.data());
      float* g = grad.item(i);
      for (int k = 0; k < kDim; ++k)
        g[k] -= static_cast<float>(tvw) * tvg[static_cast<std::size_t>(k)];
    }
    bool grad_bad = false;
    for (int i = 0; i < n && !grad_bad; ++i) {
      const float* g = grad.item(i);
      for (int k = 0; k < kDim; ++k)
        if (!std::isfinite(g[k])) {
          restart_sample(i);
          Tensor one(1, 1, kS, kS);
          one.copy_item_from(x, i, 0);
          obj[static_cast<std::size_t>(i)] = objective(one)[0];
          std::fill_n(grad.item(i), kDim, 0.0f);  // skip the move this step
          break;
        }
    }

    // monotone backtracking: each sample keeps halving its step until the
    // objective does not decrease, or stays put this iteration
    std::vector<float> step_size(static_cast<std::size_t>(n), cfg.step_size);
    std::vector<int> active(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) active[static_cast<std::size_t>(i)] = i;
    for (int trial = 0; trial < 4 && !active.empty(); ++trial) {
      Tensor cand(static_cast<int>(active.size()), 1, kS, kS);
      for (std::size_t ai = 0; ai < active.size(); ++ai) {
        int i = active[ai];
        const float* xi = x.item(i);
        const float* gi = grad.item(i);
        float* ci = cand.item(static_cast<int>(ai));
        float s = step_size[static_cast<std::size_t>(i)];
        for (int k = 0; k < kDim; ++k)
          ci[k] = std::clamp(xi[k] + s * gi[k], -1.0f, 1.0f);
      }
      std::vector<double> cobj = objective(cand);
      std::vector<int> still;
      for (std::size_t ai = 0; ai < active.size(); ++ai) {
        int i = active[ai];
        if (std::isfinite(cobj[ai]) &&
            cobj[ai] >= obj[static_cast<std::size_t>(i)]) {
          x.copy_item_from(cand, static_cast<int>(ai), i);
          obj[static_cast<std::size_t>(i)] = cobj[ai];
        } else {
          step_size[static_cast<std::size_t>(i)] *= 0.5f;
          still.push_back(i);
        }
      }
      active = std::move(still);
    }
  }
  check(x.all_finite(), "inversion: non-finite output");
  return x;
}

LabeledDataset invert_dataset(const TargetModel& target,
                              const LabeledDataset* aux,
                              const InversionConfig& cfg) {
  validate_config(cfg);
  const int k = target.num_classes();
  LabeledDataset out;
  out.images = Tensor(k * cfg.per_class_count, 1, kS, kS);
  out.provenance = Provenance::reconstructed;
  out.origin_digest = target.parameter_digest();
  std::string aux_tag = aux ? aux->source_id : "noaux";
  out.source_id = "reconstruction(" + aux_tag + ")";
  int row = 0;
  for (int c = 0; c < k; ++c) {
    Tensor xc = invert_class(target, c, aux, cfg);
    for (int i = 0; i < xc.n(); ++i, ++row) {
      out.images.copy_item_from(xc, i, row);
      out.labels.push_back(c);
    }
  }
  out.validate();
  return out;
}

double reconstruction_similarity(const TargetModel& target,
                                 const LabeledDataset& landmark,
                                 const InversionConfig& cfg,
                                 const OtddConfig& otdd_cfg) {
  landmark.validate();
  InversionConfig aux_cfg = cfg;
  aux_cfg.init = InversionInit::aux_sample;
  LabeledDataset recon = invert_dataset(target, &landmark, aux_cfg);
  return otdd(recon, landmark, otdd_cfg);
}

float attack_accuracy(const TargetModel& target,
                      const LabeledDataset& reconstructed) {
  return evaluate_accuracy(target, reconstructed);
}

}  // namespace mdi
