#include "mdi/target_model.hpp"

#include <cmath>
#include <fstream>
#include <nlohmann/json.hpp>
#include <sstream>

#include "mdi/common.hpp"

namespace mdi {

using nlohmann::json;

ResidualClassifier::ResidualClassifier(const ClassifierConfig& cfg)
    : cfg_(cfg) {
  check(cfg.num_classes >= 2, "classifier: need at least 2 classes");
  check(!cfg.stage_channels.empty() &&
            cfg.stage_channels.size() == cfg.stage_blocks.size(),
        "classifier: stage widths/blocks mismatch");
  Rng rng(derive_seed(cfg.init_seed, "classifier/init"));
  net_.add(std::make_unique<nn::Conv2d>("stem.conv", 1, cfg.stem_channels, 3,
                                        1, 1, rng));
  net_.add(std::make_unique<nn::BatchNorm>("stem.bn", cfg.stem_channels));
  net_.add(std::make_unique<nn::ReLU>());
  int in_c = cfg.stem_channels;
  for (std::size_t s = 0; s < cfg.stage_channels.size(); ++s) {
    int out_c = cfg.stage_channels[s];
    check(out_c > 0 && cfg.stage_blocks[s] > 0, "classifier: bad stage spec");
    for (int b = 0; b < cfg.stage_blocks[s]; ++b) {
      int stride = (s > 0 && b == 0) ? 2 : 1;
      std::ostringstream name;
      name << "stage" << s << ".block" << b;
      net_.add(std::make_unique<nn::ResidualBlock>(name.str(), in_c, out_c,
                                                   stride, rng));
      in_c = out_c;
    }
  }
  net_.add(std::make_unique<nn::GlobalAvgPool>());
  net_.add(std::make_unique<nn::Dense>("head", in_c, cfg.num_classes, rng));
  net_.collect_params(params_);
}

Tensor ResidualClassifier::predict(const Tensor& images) const {
  check(images.c() == 1 && images.h() == kImageSize && images.w() == kImageSize,
        "classifier: expected ", kImageSize, "x", kImageSize, "x1 input");
  std::lock_guard<std::mutex> lock(mutex_);
  Tensor logits = net_.forward(images, /*training=*/false);
  return nn::softmax_rows(logits);
}

Tensor ResidualClassifier::log_prob_input_gradient(
    const Tensor& images, const std::vector<int>& classes) const {
  check(images.c() == 1 && images.h() == kImageSize && images.w() == kImageSize,
        "classifier: expected ", kImageSize, "x", kImageSize, "x1 input");
  check(static_cast<std::size_t>(images.n()) == classes.size(),
        "classifier: one class index per sample required");
  std::lock_guard<std::mutex> lock(mutex_);
  Tensor logits = net_.forward(images, /*training=*/false);
  Tensor probs = nn::softmax_rows(logits);
  // d log p_c / d logits = onehot(c) - p
  Tensor dlogits = probs;
  for (int n = 0; n < probs.n(); ++n) {
    int c = classes[static_cast<std::size_t>(n)];
    check(c >= 0 && c < cfg_.num_classes, "classifier: class out of range");
    float* row = dlogits.item(n);
    for (int k = 0; k < probs.c(); ++k) row[k] = -row[k];
    row[c] += 1.0f;
  }
  Tensor dx = net_.backward(dlogits);
  // predict-only contract: drop the parameter gradients this pass created
  for (nn::Param* p : params_) p->zero_grad();
  return dx;
}

std::string ResidualClassifier::parameter_digest() const {
  std::lock_guard<std::mutex> lock(mutex_);
  return nn::params_digest(params_);
}

std::string ResidualClassifier::descriptor() const {
  return "residual_classifier" + net_.descriptor();
}

Tensor ResidualClassifier::train_forward(const Tensor& images) {
  return net_.forward(images, /*training=*/true);
}

Tensor ResidualClassifier::train_backward(const Tensor& dlogits) {
  return net_.backward(dlogits);
}

Checkpoint ResidualClassifier::to_checkpoint(
    const std::string& metadata_json) const {
  std::lock_guard<std::mutex> lock(mutex_);
  Checkpoint ck;
  ck.kind = "classifier";
  ck.arch = descriptor();
  json meta = metadata_json.empty() ? json::object()
                                    : json::parse(metadata_json);
  meta["config"] = {{"stem_channels", cfg_.stem_channels},
                    {"stage_channels", cfg_.stage_channels},
                    {"stage_blocks", cfg_.stage_blocks},
                    {"num_classes", cfg_.num_classes},
                    {"init_seed", cfg_.init_seed}};
  ck.metadata_json = meta.dump();
  export_params(params_, ck);
  return ck;
}

std::unique_ptr<ResidualClassifier> ResidualClassifier::from_checkpoint(
    const Checkpoint& ck) {
  check(ck.kind == "classifier", "checkpoint: kind ", ck.kind,
        " is not a classifier");
  json meta = json::parse(ck.metadata_json);
  const json& c = meta.at("config");
  ClassifierConfig cfg;
  cfg.stem_channels = c.at("stem_channels").get<int>();
  cfg.stage_channels = c.at("stage_channels").get<std::vector<int>>();
  cfg.stage_blocks = c.at("stage_blocks").get<std::vector<int>>();
  cfg.num_classes = c.at("num_classes").get<int>();
  cfg.init_seed = c.at("init_seed").get<std::uint64_t>();
  auto model = std::make_unique<ResidualClassifier>(cfg);
  import_params(model->params_, ck);
  check(model->descriptor() == ck.arch,
        "checkpoint: architecture mismatch: ", ck.arch);
  return model;
}

FitReport fit_classifier(ResidualClassifier& model, const LabeledDataset& train,
                         const LabeledDataset& test, const FitConfig& fit) {
  train.validate();
  check(train.present_classes().size() >= 2,
        "fit: need at least 2 classes present");
  check(fit.batch > 0 && fit.epochs >= 0, "fit: bad epochs/batch");
  Rng rng(derive_seed(fit.seed, "classifier/fit"));
  nn::Sgd opt(fit.lr, fit.momentum, fit.weight_decay);
  std::ofstream csv;
  if (!fit.metrics_csv.empty()) {
    csv.open(fit.metrics_csv);
    check(csv.good(), "fit: cannot open metrics csv ", fit.metrics_csv);
    csv << "step,loss_g,loss_d,accuracy\n";
  }
  FitReport report;
  std::vector<int> order(train.labels.size());
  for (std::size_t i = 0; i < order.size(); ++i)
    order[i] = static_cast<int>(i);
  std::int64_t global_step = 0;
  for (int epoch = 0; epoch < fit.epochs; ++epoch) {
    rng.shuffle(order);
    double epoch_loss = 0.0;
    std::size_t correct = 0, seen = 0;
    for (std::size_t start = 0; start < order.size();
         start += static_cast<std::size_t>(fit.batch)) {
      std::size_t end =
          std::min(order.size(), start + static_cast<std::size_t>(fit.batch));
      std::vector<int> idx(order.begin() + static_cast<std::ptrdiff_t>(start),
                           order.begin() + static_cast<std::ptrdiff_t>(end));
      Tensor x = train.images.gather(idx);
      std::vector<int> y;
      y.reserve(idx.size());
      for (int i : idx) y.push_back(train.labels[static_cast<std::size_t>(i)]);
      nn::zero_grads(model.params());
      Tensor logits = model.train_forward(x);
      Tensor probs = nn::softmax_rows(logits);
      Tensor dlogits;
      float loss = nn::cross_entropy(probs, y, &dlogits);
      ++global_step;
      check(std::isfinite(loss), "fit: loss diverged at step ", global_step);
      model.train_backward(dlogits);
      opt.step(model.params());
      epoch_loss += static_cast<double>(loss) * static_cast<double>(idx.size());
      for (int n = 0; n < probs.n(); ++n) {
        const float* row = probs.item(n);
        int arg = 0;
        for (int k = 1; k < probs.c(); ++k)
          if (row[k] > row[arg]) arg = k;
        if (arg == y[static_cast<std::size_t>(n)]) ++correct;
      }
      seen += idx.size();
      report.final_loss = loss;
    }
    float acc = static_cast<float>(correct) / static_cast<float>(seen);
    report.train_accuracy = acc;
    if (csv.is_open())
      csv << (epoch + 1) << ","
          << epoch_loss / static_cast<double>(seen) << ",0," << acc << "\n";
  }
  report.epochs = fit.epochs;
  if (!test.labels.empty())
    report.test_accuracy = evaluate_accuracy(model, test, fit.batch);
  else
    report.test_accuracy = -1.0f;
  return report;
}

std::unique_ptr<ResidualClassifier> train_target(const LabeledDataset& train,
                                                 const LabeledDataset& test,
                                                 const ClassifierConfig& cfg,
                                                 const FitConfig& fit,
                                                 FitReport* report) {
  auto model = std::make_unique<ResidualClassifier>(cfg);
  FitReport r = fit_classifier(*model, train, test, fit);
  if (fit.epochs > 0) {
    // Trained models must beat guessing the most common class.
    std::vector<int> counts(static_cast<std::size_t>(cfg.num_classes), 0);
    for (int l : train.labels) ++counts[static_cast<std::size_t>(l)];
    float majority =
        static_cast<float>(*std::max_element(counts.begin(), counts.end())) /
        static_cast<float>(train.labels.size());
    float train_acc = evaluate_accuracy(*model, train, fit.batch);
    check(train_acc > majority,
          "fit: training accuracy ", train_acc,
          " does not beat the majority baseline ", majority);
    r.train_accuracy = train_acc;
  }
  if (report) *report = r;
  return model;
}

float evaluate_accuracy(const TargetModel& model, const LabeledDataset& data,
                        int batch) {
  data.validate();
  check(!data.labels.empty(), "evaluate: empty dataset");
  check(batch > 0, "evaluate: bad batch size");
  std::size_t correct = 0;
  for (std::size_t start = 0; start < data.labels.size();
       start += static_cast<std::size_t>(batch)) {
    std::size_t end =
        std::min(data.labels.size(), start + static_cast<std::size_t>(batch));
    std::vector<int> idx;
    for (std::size_t i = start; i < end; ++i) idx.push_back(static_cast<int>(i));
    Tensor probs = model.predict(data.images.gather(idx));
    for (int n = 0; n < probs.n(); ++n) {
      const float* row = probs.item(n);
      int arg = 0;
      for (int k = 1; k < probs.c(); ++k)
        if (row[k] > row[arg]) arg = k;
      if (arg == data.labels[start + static_cast<std::size_t>(n)]) ++correct;
    }
  }
  return static_cast<float>(correct) / static_cast<float>(data.labels.size());
}

}  // namespace mdi
