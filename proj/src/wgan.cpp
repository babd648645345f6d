#include "mdi/wgan.hpp"

#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "mdi/common.hpp"
#include "mdi/digest.hpp"

namespace mdi {

using nlohmann::json;

Wgan::Wgan(const GanConfig& cfg)
    : cfg_(cfg),
      opt_g_(cfg.lr, cfg.beta1, cfg.beta2),
      opt_d_(cfg.lr, cfg.beta1, cfg.beta2),
      rng_(derive_seed(cfg.init_seed, "wgan/stream")) {
  check(cfg.latent_dim > 0 && cfg.num_classes >= 2, "wgan: bad config");
  check(cfg.clip_c > 0.0f && cfg.n_critic >= 1 && cfg.batch >= 2,
        "wgan: bad training constants");
  Rng init_rng(derive_seed(cfg.init_seed, "wgan/init"));
  build(init_rng);
}

void Wgan::build(Rng& rng) {
  int zdim = cfg_.latent_dim + cfg_.num_classes;
  g_.add(std::make_unique<nn::Dense>("g.fc", zdim, cfg_.g1 * 9 * 9, rng));
  g_.add(std::make_unique<nn::Reshape>(cfg_.g1, 9, 9));
  g_.add(std::make_unique<nn::BatchNorm>("g.bn0", cfg_.g1));
  g_.add(std::make_unique<nn::ReLU>());
  g_.add(std::make_unique<nn::Upsample2x>());
  g_.add(std::make_unique<nn::Conv2d>("g.c1", cfg_.g1, cfg_.g2, 3, 1, 1, rng));
  g_.add(std::make_unique<nn::BatchNorm>("g.bn1", cfg_.g2));
  g_.add(std::make_unique<nn::ReLU>());
  g_.add(std::make_unique<nn::Upsample2x>());
  g_.add(std::make_unique<nn::Conv2d>("g.c2", cfg_.g2, cfg_.g3, 3, 1, 1, rng));
  g_.add(std::make_unique<nn::BatchNorm>("g.bn2", cfg_.g3));
  g_.add(std::make_unique<nn::ReLU>());
  g_.add(std::make_unique<nn::Conv2d>("g.c3", cfg_.g3, 1, 3, 1, 1, rng));
  g_.add(std::make_unique<nn::Tanh>());
  g_.collect_params(g_params_);

  int dc = 1 + cfg_.num_classes;
  // no normalization layers: weight clipping would fight the affine params
  d_.add(std::make_unique<nn::Conv2d>("d.c1", dc, cfg_.d1, 3, 2, 1, rng));
  d_.add(std::make_unique<nn::LeakyReLU>(0.2f));
  d_.add(std::make_unique<nn::Conv2d>("d.c2", cfg_.d1, cfg_.d2, 3, 2, 1, rng));
  d_.add(std::make_unique<nn::LeakyReLU>(0.2f));
  d_.add(std::make_unique<nn::Conv2d>("d.c3", cfg_.d2, cfg_.d3, 3, 2, 1, rng));
  d_.add(std::make_unique<nn::LeakyReLU>(0.2f));
  d_.add(std::make_unique<nn::Dense>("d.fc", cfg_.d3 * 5 * 5, 1, rng));
  d_.collect_params(d_params_);
}

Tensor Wgan::make_latent(const std::vector<int>& labels, Rng& rng) const {
  int zdim = cfg_.latent_dim + cfg_.num_classes;
  Tensor z = Tensor::vectors(static_cast<int>(labels.size()), zdim);
  for (int n = 0; n < z.n(); ++n) {
    float* row = z.item(n);
    for (int i = 0; i < cfg_.latent_dim; ++i)
      row[i] = static_cast<float>(rng.normal());
    int lab = labels[static_cast<std::size_t>(n)];
    check(lab >= 0 && lab < cfg_.num_classes, "wgan: label out of range");
    row[cfg_.latent_dim + lab] = 1.0f;
  }
  return z;
}

Tensor Wgan::g_forward(const Tensor& zlab, bool training) {
  check(zlab.c() == cfg_.latent_dim + cfg_.num_classes && zlab.h() == 1 &&
            zlab.w() == 1,
        "wgan: latent batch has wrong width");
  return g_.forward(zlab, training);
}

Tensor Wgan::g_backward(const Tensor& dimages) { return g_.backward(dimages); }

Tensor Wgan::critic_input(const Tensor& images,
                          const std::vector<int>& labels) const {
  check(images.c() == 1 && images.h() == kImageSize && images.w() == kImageSize,
        "wgan: critic expects 36x36x1 images");
  check(static_cast<std::size_t>(images.n()) == labels.size(),
        "wgan: one label per image required");
  Tensor x(images.n(), 1 + cfg_.num_classes, kImageSize, kImageSize);
  x.zero();
  int hw = kImageSize * kImageSize;
  for (int n = 0; n < images.n(); ++n) {
    std::copy(images.item(n), images.item(n) + hw, x.item(n));
    int lab = labels[static_cast<std::size_t>(n)];
    check(lab >= 0 && lab < cfg_.num_classes, "wgan: label out of range");
    float* plane = x.item(n) + static_cast<std::size_t>(1 + lab) * hw;
    std::fill(plane, plane + hw, 1.0f);
  }
  return x;
}

Tensor Wgan::d_forward(const Tensor& images, const std::vector<int>& labels,
                       bool training) {
  return d_.forward(critic_input(images, labels), training);
}

Tensor Wgan::d_backward(const Tensor& dscores) {
  Tensor dinput = d_.backward(dscores);
  // only the image channel feeds back; label planes are constants
  Tensor dimg(dinput.n(), 1, kImageSize, kImageSize);
  int hw = kImageSize * kImageSize;
  for (int n = 0; n < dinput.n(); ++n)
    std::copy(dinput.item(n), dinput.item(n) + hw, dimg.item(n));
  return dimg;
}

GanTrainStats Wgan::train(const LabeledDataset& data, int steps,
                          const std::string& metrics_csv) {
  data.validate();
  check(steps >= 0, "wgan: negative step count");
  check(data.labels.size() >= static_cast<std::size_t>(cfg_.batch),
        "wgan: dataset smaller than one batch");
  std::ofstream csv;
  if (!metrics_csv.empty()) {
    csv.open(metrics_csv, step_ == 0 ? std::ios::out : std::ios::app);
    check(csv.good(), "wgan: cannot open metrics csv ", metrics_csv);
    if (step_ == 0) csv << "step,loss_g,loss_d,accuracy\n";
  }
  GanTrainStats stats;
  int total = static_cast<int>(data.labels.size());
  float invb = 1.0f / static_cast<float>(cfg_.batch);
  auto sample_batch = [&](std::vector<int>& idx, std::vector<int>& labels) {
    idx.clear();
    labels.clear();
    for (int i = 0; i < cfg_.batch; ++i) {
      int k = static_cast<int>(rng_.uniform_int(0, total - 1));
      idx.push_back(k);
      labels.push_back(data.labels[static_cast<std::size_t>(k)]);
    }
  };
  std::vector<int> idx, labels;
  for (int s = 0; s < steps; ++s) {
    float loss_d = 0.0f;
    for (int k = 0; k < cfg_.n_critic; ++k) {
      sample_batch(idx, labels);
      Tensor real = data.images.gather(idx);
      nn::zero_grads(d_params_);
      // maximize D(real) - D(fake): accumulate both halves, then step
      Tensor s_real = d_forward(real, labels, true);
      Tensor d_real(s_real.n(), 1, 1, 1);
      d_real.fill(-invb);
      d_backward(d_real);
      Tensor zlab = make_latent(labels, rng_);
      Tensor fake = g_forward(zlab, true);
      Tensor s_fake = d_forward(fake, labels, true);
      Tensor d_fake(s_fake.n(), 1, 1, 1);
      d_fake.fill(invb);
      d_backward(d_fake);
      double mr = 0.0, mf = 0.0;
      for (int n = 0; n < s_real.n(); ++n) mr += s_real.item(n)[0];
      for (int n = 0; n < s_fake.n(); ++n) mf += s_fake.item(n)[0];
      loss_d = static_cast<float>((mf - mr) * invb);
      check(std::isfinite(loss_d), "wgan: critic loss diverged at step ",
            step_ + 1);
      opt_d_.step(d_params_);
      nn::clip_params(d_params_, cfg_.clip_c);
      for (const nn::Param* p : d_params_)
        for (float v : p->value)
          check(v >= -cfg_.clip_c && v <= cfg_.clip_c,
                "wgan: clip bound violated in ", p->name);
    }
    sample_batch(idx, labels);
    Tensor zlab = make_latent(labels, rng_);
    nn::zero_grads(g_params_);
    nn::zero_grads(d_params_);
    Tensor fake = g_forward(zlab, true);
    Tensor scores = d_forward(fake, labels, true);
    double ms = 0.0;
    for (int n = 0; n < scores.n(); ++n) ms += scores.item(n)[0];
    float loss_g = static_cast<float>(-ms * invb);
    check(std::isfinite(loss_g), "wgan: generator loss diverged at step ",
          step_ + 1);
    Tensor dscores(scores.n(), 1, 1, 1);
    dscores.fill(-invb);
    Tensor dfake = d_backward(dscores);
    g_backward(dfake);
    opt_g_.step(g_params_);
    nn::zero_grads(d_params_);  // generator pass must not leak into critic
    ++step_;
    ++stats.steps_run;
    stats.last_loss_g = loss_g;
    stats.last_loss_d = loss_d;
    if (csv.is_open())
      csv << step_ << "," << loss_g << "," << loss_d << ",0\n";
  }
  return stats;
}

LabeledDataset Wgan::generate(int n_per_class, std::uint64_t seed,
                              const std::string& source_id) const {
  check(n_per_class >= 0, "wgan: negative n_per_class");
  int total = n_per_class * cfg_.num_classes;
  LabeledDataset out;
  out.source_id = source_id;
  out.provenance = Provenance::gan_generated;
  out.origin_digest = digest();
  out.origin_parent_digest = parent_digest_;
  out.images = Tensor(total, 1, kImageSize, kImageSize);
  out.labels.reserve(static_cast<std::size_t>(total));
  if (total == 0) {
    out.validate();
    return out;
  }
  Rng rng(derive_seed(seed, "wgan/generate"));
  Wgan& self = const_cast<Wgan&>(*this);  // forward caches only
  int row = 0;
  const int chunk = 70;  // generation batch, any size gives identical output
  std::vector<int> labels;
  for (int cls = 0; cls < cfg_.num_classes; ++cls)
    for (int i = 0; i < n_per_class; ++i) out.labels.push_back(cls);
  while (row < total) {
    int take = std::min(chunk, total - row);
    labels.assign(out.labels.begin() + row, out.labels.begin() + row + take);
    Tensor zlab = make_latent(labels, rng);
    Tensor imgs = self.g_forward(zlab, /*training=*/false);
    for (int n = 0; n < take; ++n)
      out.images.copy_item_from(imgs, n, row + n);
    row += take;
  }
  out.validate();
  return out;
}

std::string Wgan::digest() const {
  Digest d;
  d.str("wgan");
  d.pod(cfg_.latent_dim);
  d.pod(cfg_.num_classes);
  d.pod(cfg_.g1);
  d.pod(cfg_.g2);
  d.pod(cfg_.g3);
  d.pod(cfg_.d1);
  d.pod(cfg_.d2);
  d.pod(cfg_.d3);
  d.pod(step_);
  Digest p;
  for (const nn::Param* q : g_params_) p.vec(q->value);
  for (const nn::Param* q : d_params_) p.vec(q->value);
  d.pod(p.value());
  return d.hex();
}

Checkpoint Wgan::to_checkpoint() const {
  Checkpoint ck;
  ck.kind = "wgan";
  ck.arch = descriptor();
  json meta;
  meta["config"] = {{"latent_dim", cfg_.latent_dim},
                    {"num_classes", cfg_.num_classes},
                    {"g1", cfg_.g1},
                    {"g2", cfg_.g2},
                    {"g3", cfg_.g3},
                    {"d1", cfg_.d1},
                    {"d2", cfg_.d2},
                    {"d3", cfg_.d3},
                    {"lr", cfg_.lr},
                    {"beta1", cfg_.beta1},
                    {"beta2", cfg_.beta2},
                    {"clip_c", cfg_.clip_c},
                    {"n_critic", cfg_.n_critic},
                    {"batch", cfg_.batch},
                    {"init_seed", cfg_.init_seed}};
  meta["step"] = step_;
  meta["parent_digest"] = parent_digest_;
  meta["rng_state"] = rng_.state();
  meta["opt_steps"] = {opt_g_.step_count(), opt_d_.step_count()};
  ck.metadata_json = meta.dump();
  export_params(g_params_, ck);
  export_params(d_params_, ck);
  auto add_opt = [&ck](const std::string& prefix,
                       const std::vector<std::vector<float>>& slots) {
    for (std::size_t i = 0; i < slots.size(); ++i) {
      if (slots[i].empty()) continue;
      ck.add_array(prefix + std::to_string(i),
                   {static_cast<int>(slots[i].size())}, slots[i]);
    }
  };
  add_opt("opt_g.", opt_g_.state());
  add_opt("opt_d.", opt_d_.state());
  return ck;
}

std::unique_ptr<Wgan> Wgan::from_checkpoint(const Checkpoint& ck) {
  check(ck.kind == "wgan", "checkpoint: kind ", ck.kind, " is not a wgan");
  json meta = json::parse(ck.metadata_json);
  const json& c = meta.at("config");
  GanConfig cfg;
  cfg.latent_dim = c.at("latent_dim").get<int>();
  cfg.num_classes = c.at("num_classes").get<int>();
  cfg.g1 = c.at("g1").get<int>();
  cfg.g2 = c.at("g2").get<int>();
  cfg.g3 = c.at("g3").get<int>();
  cfg.d1 = c.at("d1").get<int>();
  cfg.d2 = c.at("d2").get<int>();
  cfg.d3 = c.at("d3").get<int>();
  cfg.lr = c.at("lr").get<float>();
  cfg.beta1 = c.at("beta1").get<float>();
  cfg.beta2 = c.at("beta2").get<float>();
  cfg.clip_c = c.at("clip_c").get<float>();
  cfg.n_critic = c.at("n_critic").get<int>();
  cfg.batch = c.at("batch").get<int>();
  cfg.init_seed = c.at("init_seed").get<std::uint64_t>();
  auto gan = std::make_unique<Wgan>(cfg);
  import_params(gan->g_params_, ck);
  import_params(gan->d_params_, ck);
  gan->step_ = meta.at("step").get<std::int64_t>();
  gan->parent_digest_ = meta.at("parent_digest").get<std::string>();
  gan->rng_.set_state(meta.at("rng_state").get<std::array<std::uint64_t, 4>>());
  auto opt_steps = meta.at("opt_steps").get<std::vector<std::int64_t>>();
  check(opt_steps.size() == 2, "checkpoint: bad optimizer step counts");
  auto load_opt = [&ck](const std::string& prefix, nn::Adam& opt,
                        const std::vector<nn::Param*>& params,
                        std::int64_t t) {
    std::vector<std::vector<float>> slots(params.size() * 2);
    bool any = false;
    for (std::size_t i = 0; i < slots.size(); ++i) {
      std::string name = prefix + std::to_string(i);
      if (ck.has(name)) {
        slots[i] = ck.find(name).data;
        any = true;
      }
    }
    if (any) {
      for (std::size_t i = 0; i < params.size(); ++i) {
        if (slots[i].empty()) slots[i].assign(params[i]->size(), 0.0f);
        if (slots[params.size() + i].empty())
          slots[params.size() + i].assign(params[i]->size(), 0.0f);
      }
      opt.set_state(slots);
    }
    opt.set_step_count(t);
  };
  load_opt("opt_g.", gan->opt_g_, gan->g_params_, opt_steps[0]);
  load_opt("opt_d.", gan->opt_d_, gan->d_params_, opt_steps[1]);
  check(gan->descriptor() == ck.arch, "checkpoint: architecture mismatch");
  return gan;
}

std::unique_ptr<Wgan> Wgan::clone() const {
  return from_checkpoint(to_checkpoint());
}

std::string Wgan::descriptor() const {
  std::ostringstream os;
  os << "cwgan{g:" << g_.descriptor() << " d:" << d_.descriptor() << "}";
  return os.str();
}

}  // namespace mdi
