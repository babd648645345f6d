#include "mdi/distraction.hpp"

#include <cmath>
#include <fstream>

#include "mdi/common.hpp"

namespace mdi {

float identity_loss(const std::vector<float>& prob) {
  check(!prob.empty(), "identity_loss: empty probability vector");
  double sum = 0.0;
  float top = 0.0f;
  for (float p : prob) {
    check(p >= 0.0f, "identity_loss: negative probability ", p);
    sum += p;
    top = std::max(top, p);
  }
  check(std::abs(sum - 1.0) <= 1e-5, "identity_loss: probabilities sum to ",
        sum, ", not 1");
  double floored = std::max(static_cast<double>(top), 1e-12);
  return static_cast<float>(-std::log(floored));
}

float prior_loss(float critic_score) {
  check(std::isfinite(critic_score), "prior_loss: non-finite critic score");
  return -critic_score;
}

std::unique_ptr<Wgan> distract(const Wgan& base, const TargetModel& target,
                               const LabeledDataset& landmark,
                               const DistractionConfig& cfg,
                               DistractionStats* stats) {
  landmark.validate();
  check(cfg.lambda >= 0.0f, "distract: lambda must be nonnegative");
  check(cfg.steps >= 0, "distract: negative step count");
  check(cfg.batch >= 1, "distract: bad batch size");
  check(landmark.labels.size() >= static_cast<std::size_t>(cfg.batch),
        "distract: landmark smaller than one batch");
  check(target.num_classes() >= 2, "distract: degenerate target");

  const std::string target_digest_before = target.parameter_digest();
  std::unique_ptr<Wgan> gan = base.clone();
  gan->set_parent_digest(base.digest());
  const GanConfig& gc = gan->config();

  nn::Sgd opt_g(cfg.lr, cfg.momentum, 0.0f);
  nn::Sgd opt_d(cfg.lr, cfg.momentum, 0.0f);
  Rng rng(derive_seed(cfg.seed, "distract/stream"));

  std::ofstream csv;
  if (!cfg.metrics_csv.empty()) {
    csv.open(cfg.metrics_csv);
    check(csv.good(), "distract: cannot open metrics csv ", cfg.metrics_csv);
    csv << "step,loss_prior,loss_id,loss_total\n";
  }

  DistractionStats local;
  int total = static_cast<int>(landmark.labels.size());
  float invb = 1.0f / static_cast<float>(cfg.batch);
  auto sample_batch = [&](std::vector<int>& idx, std::vector<int>& labels) {
    idx.clear();
    labels.clear();
    for (int i = 0; i < cfg.batch; ++i) {
      int k = static_cast<int>(rng.uniform_int(0, total - 1));
      idx.push_back(k);
      labels.push_back(landmark.labels[static_cast<std::size_t>(k)]);
    }
  };
  std::vector<int> idx, labels;

  for (int s = 0; s < cfg.steps; ++s) {
    // critic: standard clipped WGAN updates against the landmark data
    for (int k = 0; k < gc.n_critic; ++k) {
      sample_batch(idx, labels);
      Tensor real = landmark.images.gather(idx);
      nn::zero_grads(gan->d_params());
      Tensor s_real = gan->d_forward(real, labels, true);
      Tensor d_real(s_real.n(), 1, 1, 1);
      d_real.fill(-invb);
      gan->d_backward(d_real);
      Tensor zlab = gan->make_latent(labels, rng);
      Tensor fake = gan->g_forward(zlab, true);
      Tensor s_fake = gan->d_forward(fake, labels, true);
      Tensor d_fake(s_fake.n(), 1, 1, 1);
      d_fake.fill(invb);
      gan->d_backward(d_fake);
      opt_d.step(gan->d_params());
      nn::clip_params(gan->d_params(), gc.clip_c);
    }

    // generator: prior loss plus lambda times the target identity loss
    sample_batch(idx, labels);
    Tensor zlab = gan->make_latent(labels, rng);
    nn::zero_grads(gan->g_params());
    nn::zero_grads(gan->d_params());
    Tensor fake = gan->g_forward(zlab, true);
    Tensor scores = gan->d_forward(fake, labels, true);

    double sum_prior = 0.0;
    for (int n = 0; n < scores.n(); ++n)
      sum_prior += prior_loss(scores.item(n)[0]);
    float loss_prior = static_cast<float>(sum_prior * invb);

    Tensor probs = target.predict(fake);
    check(probs.n() == fake.n() && probs.c() == target.num_classes(),
          "distract: target returned a malformed probability matrix");
    std::vector<int> top(static_cast<std::size_t>(probs.n()), 0);
    double sum_id = 0.0;
    for (int n = 0; n < probs.n(); ++n) {
      const float* row = probs.item(n);
      std::vector<float> p(row, row + probs.c());
      int arg = 0;
      for (int c = 1; c < probs.c(); ++c)
        if (row[c] > row[arg]) arg = c;
      top[static_cast<std::size_t>(n)] = arg;
      sum_id += identity_loss(p);
    }
    float loss_id = static_cast<float>(sum_id * invb);
    float loss_total = loss_prior + cfg.lambda * loss_id;
    check(std::isfinite(loss_total), "distract: loss diverged at step ",
          s + 1);

    Tensor dscores(scores.n(), 1, 1, 1);
    dscores.fill(-invb);
    Tensor dfake = gan->d_backward(dscores);
    if (cfg.lambda > 0.0f) {
      // d identity_loss / d x = -d log p_top / d x (the 1e-12 floor never
      // binds once the top probability exceeds it)
      Tensor glog = target.log_prob_input_gradient(fake, top);
      check(glog.same_shape(dfake), "distract: target gradient shape mismatch");
      float w = cfg.lambda * invb;
      for (std::size_t i = 0; i < dfake.size(); ++i)
        dfake[i] -= w * glog[i];
    }
    gan->g_backward(dfake);
    opt_g.step(gan->g_params());
    nn::zero_grads(gan->d_params());

    local.steps_run = s + 1;
    local.last_loss_prior = loss_prior;
    local.last_loss_id = loss_id;
    local.last_loss_total = loss_total;
    if (csv.is_open())
      csv << (s + 1) << "," << loss_prior << "," << loss_id << ","
          << loss_total << "\n";
  }

  check(target.parameter_digest() == target_digest_before,
        "distract: black-box contract violated, target parameters changed");
  if (stats) *stats = local;
  return gan;
}

}  // namespace mdi
