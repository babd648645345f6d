#include "mdi/mitigation.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "mdi/common.hpp"
#include "mdi/digest.hpp"

namespace mdi {

namespace {

constexpr int kS = kImageSize;
constexpr int kDim = kS * kS;

int square_grid(int block_count) {
  int g = static_cast<int>(std::lround(std::sqrt(double(block_count))));
  check(g >= 1 && g * g == block_count,
        "rmt: block count must be a perfect square, got ", block_count);
  check(kS % g == 0, "rmt: grid ", g, "x", g, " does not tile ", kS, "x", kS);
  return g;
}

void copy_block_in(const float* img, int gi, int gj, int block,
                   Eigen::VectorXf& v) {
  for (int r = 0; r < block; ++r)
    for (int c = 0; c < block; ++c)
      v[r * block + c] = img[(gi * block + r) * kS + gj * block + c];
}

void copy_block_out(const Eigen::VectorXf& v, int gi, int gj, int block,
                    float* img) {
  for (int r = 0; r < block; ++r)
    for (int c = 0; c < block; ++c)
      img[(gi * block + r) * kS + gj * block + c] = v[r * block + c];
}

}  // namespace

const char* mitigation_name(MitigationMethod m) {
  switch (m) {
    case MitigationMethod::none:
      return "none";
    case MitigationMethod::rmt:
      return "rmt";
    case MitigationMethod::instahide:
      return "instahide";
  }
  fail("unknown mitigation method");
}

MitigationMethod mitigation_from_name(const std::string& s) {
  if (s == "none") return MitigationMethod::none;
  if (s == "rmt") return MitigationMethod::rmt;
  if (s == "instahide") return MitigationMethod::instahide;
  fail("unknown mitigation method: ", s);
}

// ---- rmt ---------------------------------------------------------------------

int RmtKey::grid() const { return square_grid(block_count); }

void RmtKey::validate() const {
  int g = grid();
  check(block == kS / g, "rmt: block size disagrees with grid");
  check(sigma >= 0.0f, "rmt: negative noise level");
  check(static_cast<int>(matrices.size()) == block_count,
        "rmt: expected ", block_count, " matrices, have ", matrices.size());
  const long d = static_cast<long>(block) * block;
  for (const auto& m : matrices) {
    check(m.rows() == d && m.cols() == d, "rmt: matrix shape mismatch");
    check(m.allFinite(), "rmt: non-finite matrix entry");
    Eigen::JacobiSVD<Eigen::MatrixXf> svd(m);
    check(svd.singularValues().minCoeff() >= 1e-3f,
          "rmt: near-singular block matrix");
  }
}

std::string RmtKey::digest() const {
  Digest d;
  d.pod(block_count).pod(block).pod(sigma).pod(seed);
  for (const auto& m : matrices)
    d.bytes(m.data(), sizeof(float) * static_cast<std::size_t>(m.size()));
  return d.hex();
}

RmtKey rmt_generate_key(int block_count, std::uint64_t seed, float sigma) {
  int g = square_grid(block_count);
  check(sigma >= 0.0f, "rmt: negative noise level");
  RmtKey key;
  key.block_count = block_count;
  key.block = kS / g;
  key.sigma = sigma;
  key.seed = seed;
  const int d = key.block * key.block;
  Rng rng(derive_seed(seed, "rmt/key"));
  for (int b = 0; b < block_count; ++b) {
    Eigen::MatrixXf gauss(d, d);
    for (int j = 0; j < d; ++j)
      for (int i = 0; i < d; ++i) gauss(i, j) = rng.normalf();
    Eigen::HouseholderQR<Eigen::MatrixXf> qr(gauss);
    Eigen::MatrixXf q =
        qr.householderQ() * Eigen::MatrixXf::Identity(d, d);
    Eigen::VectorXf diag(d);
    for (int i = 0; i < d; ++i) {
      float mag = static_cast<float>(rng.uniform(0.5, 1.5));
      diag[i] = rng.uniform() < 0.5 ? -mag : mag;
    }
    key.matrices.push_back(q * diag.asDiagonal());
  }
  return key;
}

void rmt_transform_image(const float* in, float* out, const RmtKey& key,
                         Rng* noise_rng) {
  int g = key.grid();
  check(key.sigma == 0.0f || noise_rng != nullptr,
        "rmt: noise level set but no noise stream given");
  Eigen::VectorXf v(key.block * key.block);
  for (int gi = 0; gi < g; ++gi)
    for (int gj = 0; gj < g; ++gj) {
      copy_block_in(in, gi, gj, key.block, v);
      Eigen::VectorXf y =
          key.matrices[static_cast<std::size_t>(gi * g + gj)] * v;
      if (key.sigma > 0.0f)
        for (int i = 0; i < y.size(); ++i)
          y[i] += key.sigma * noise_rng->normalf();
      copy_block_out(y, gi, gj, key.block, out);
    }
}

void rmt_inverse_image(const float* in, float* out, const RmtKey& key) {
  int g = key.grid();
  const int d = key.block * key.block;
  Eigen::VectorXd v(d);
  for (int gi = 0; gi < g; ++gi)
    for (int gj = 0; gj < g; ++gj) {
      for (int r = 0; r < key.block; ++r)
        for (int c = 0; c < key.block; ++c)
          v[r * key.block + c] =
              in[(gi * key.block + r) * kS + gj * key.block + c];
      // double-precision solve keeps the round trip inside 1e-5
      Eigen::MatrixXd m =
          key.matrices[static_cast<std::size_t>(gi * g + gj)].cast<double>();
      Eigen::VectorXd x = m.partialPivLu().solve(v);
      for (int r = 0; r < key.block; ++r)
        for (int c = 0; c < key.block; ++c)
          out[(gi * key.block + r) * kS + gj * key.block + c] =
              static_cast<float>(x[r * key.block + c]);
    }
}

LabeledDataset rmt_transform_dataset(const LabeledDataset& ds,
                                     const RmtKey& key) {
  ds.validate();
  LabeledDataset out;
  out.images = Tensor(ds.size(), 1, kS, kS);
  out.labels = ds.labels;
  out.source_id = ds.source_id + "+rmt";
  out.provenance = Provenance::mitigated;
  Rng noise(derive_seed(key.seed, "rmt/noise/" + ds.source_id));
  for (int i = 0; i < ds.size(); ++i)
    rmt_transform_image(ds.images.item(i), out.images.item(i), key, &noise);
  out.validate();
  return out;
}

namespace {

constexpr char kRmtMagic[8] = {'M', 'D', 'I', 'R', 'M', 'T', 'K', '1'};
constexpr char kRecipeMagic[8] = {'M', 'D', 'I', 'I', 'H', 'R', 'C', '1'};

template <typename T>
void put(std::ofstream& os, T v) {
  os.write(reinterpret_cast<const char*>(&v), sizeof(T));
}

template <typename T>
T get(std::ifstream& is) {
  T v{};
  is.read(reinterpret_cast<char*>(&v), sizeof(T));
  check(is.good(), "mitigation: truncated file");
  return v;
}

}  // namespace

void rmt_save_key(const RmtKey& key, const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  check(os.good(), "rmt: cannot open ", path);
  os.write(kRmtMagic, 8);
  put<std::uint32_t>(os, 1);
  put<std::int32_t>(os, key.block_count);
  put<std::int32_t>(os, key.block);
  put<float>(os, key.sigma);
  put<std::uint64_t>(os, key.seed);
  for (const auto& m : key.matrices) {
    put<std::uint64_t>(os, static_cast<std::uint64_t>(m.size()));
    os.write(reinterpret_cast<const char*>(m.data()),
             static_cast<std::streamsize>(sizeof(float) * m.size()));
  }
  check(os.good(), "rmt: write failed for ", path);
}

RmtKey rmt_load_key(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  check(is.good(), "rmt: cannot open ", path);
  char magic[8];
  is.read(magic, 8);
  check(is.good() && std::memcmp(magic, kRmtMagic, 8) == 0,
        "rmt: bad key file magic in ", path);
  check(get<std::uint32_t>(is) == 1, "rmt: unsupported key version");
  RmtKey key;
  key.block_count = get<std::int32_t>(is);
  key.block = get<std::int32_t>(is);
  key.sigma = get<float>(is);
  key.seed = get<std::uint64_t>(is);
  check(key.block_count >= 1 && key.block_count <= 1296 && key.block >= 1 &&
            key.block <= kS,
        "rmt: implausible key geometry");
  const long d = static_cast<long>(key.block) * key.block;
  for (int b = 0; b < key.block_count; ++b) {
    std::uint64_t n = get<std::uint64_t>(is);
    check(n == static_cast<std::uint64_t>(d) * static_cast<std::uint64_t>(d),
          "rmt: matrix size mismatch");
    Eigen::MatrixXf m(d, d);
    is.read(reinterpret_cast<char*>(m.data()),
            static_cast<std::streamsize>(sizeof(float) * n));
    check(is.good(), "rmt: truncated key file");
    key.matrices.push_back(std::move(m));
  }
  key.validate();
  return key;
}

// ---- instahide ----------------------------------------------------------------

void InstaHideRecipe::validate(int pool_size) const {
  check(k >= 1, "instahide: k must be >= 1");
  check(static_cast<int>(weights.size()) == k, "instahide: weight count");
  check(static_cast<int>(pool_indices.size()) == k - 1,
        "instahide: pool index count");
  double sum = 0.0;
  for (float w : weights) {
    check(w >= 0.0f, "instahide: negative weight");
    sum += w;
  }
  check(std::abs(sum - 1.0) <= 1e-5, "instahide: weights off the simplex");
  check(static_cast<int>(sign_mask.size()) == kDim,
        "instahide: sign mask size");
  for (signed char s : sign_mask)
    check(s == 1 || s == -1, "instahide: sign mask entry not in {-1,+1}");
  for (int idx : pool_indices)
    check(idx >= 0 && idx < pool_size, "instahide: pool index out of range");
}

InstaHideRecipe make_instahide_recipe(int k, int pool_size, Rng& rng) {
  check(k >= 1, "instahide: k must be >= 1");
  check(k == 1 || pool_size >= 1, "instahide: empty pool with k >= 2");
  InstaHideRecipe r;
  r.k = k;
  // symmetric Dirichlet(1) via normalized exponentials
  double sum = 0.0;
  std::vector<double> e(static_cast<std::size_t>(k));
  for (int i = 0; i < k; ++i) {
    e[static_cast<std::size_t>(i)] = -std::log(1.0 - rng.uniform());
    sum += e[static_cast<std::size_t>(i)];
  }
  for (int i = 0; i < k; ++i)
    r.weights.push_back(sum > 1e-12
                            ? static_cast<float>(e[static_cast<std::size_t>(i)] / sum)
                            : 1.0f / static_cast<float>(k));
  // renormalize in float so validate()'s simplex check is exact enough
  float fsum = 0.0f;
  for (float w : r.weights) fsum += w;
  for (float& w : r.weights) w /= fsum;
  for (int i = 0; i < k - 1; ++i)
    r.pool_indices.push_back(rng.uniform_int(0, pool_size - 1));
  r.sign_mask.resize(static_cast<std::size_t>(kDim));
  for (int p = 0; p < kDim; ++p)
    r.sign_mask[static_cast<std::size_t>(p)] =
        rng.uniform() < 0.5 ? static_cast<signed char>(-1)
                            : static_cast<signed char>(1);
  return r;
}

void instahide_transform(const float* in, const LabeledDataset& pool,
                         const InstaHideRecipe& recipe, float* out) {
  recipe.validate(pool.size());
  for (int p = 0; p < kDim; ++p)
    out[p] = recipe.weights[0] * in[p];
  for (int j = 0; j < recipe.k - 1; ++j) {
    const float* mix =
        pool.images.item(recipe.pool_indices[static_cast<std::size_t>(j)]);
    float w = recipe.weights[static_cast<std::size_t>(j + 1)];
    for (int p = 0; p < kDim; ++p) out[p] += w * mix[p];
  }
  for (int p = 0; p < kDim; ++p)
    out[p] *= static_cast<float>(recipe.sign_mask[static_cast<std::size_t>(p)]);
}

LabeledDataset instahide_transform_dataset(
    const LabeledDataset& ds, const LabeledDataset& pool, int k,
    std::uint64_t seed, std::vector<InstaHideRecipe>* out_recipes) {
  ds.validate();
  check(k == 1 || !pool.empty(), "instahide: empty pool with k >= 2");
  LabeledDataset out;
  out.images = Tensor(ds.size(), 1, kS, kS);
  out.labels = ds.labels;
  out.source_id = ds.source_id + "+instahide";
  out.provenance = Provenance::mitigated;
  Rng rng(derive_seed(seed, "instahide/data"));
  for (int i = 0; i < ds.size(); ++i) {
    InstaHideRecipe r = make_instahide_recipe(k, pool.size(), rng);
    instahide_transform(ds.images.item(i), pool, r, out.images.item(i));
    if (out_recipes) out_recipes->push_back(std::move(r));
  }
  out.validate();
  return out;
}

void instahide_save_recipes(const std::vector<InstaHideRecipe>& recipes,
                            const std::string& path) {
  std::ofstream os(path, std::ios::binary);
  check(os.good(), "instahide: cannot open ", path);
  os.write(kRecipeMagic, 8);
  put<std::uint32_t>(os, 1);
  put<std::uint64_t>(os, recipes.size());
  for (const auto& r : recipes) {
    put<std::int32_t>(os, r.k);
    for (int idx : r.pool_indices) put<std::int32_t>(os, idx);
    for (float w : r.weights) put<float>(os, w);
    put<std::uint32_t>(os, static_cast<std::uint32_t>(r.sign_mask.size()));
    os.write(reinterpret_cast<const char*>(r.sign_mask.data()),
             static_cast<std::streamsize>(r.sign_mask.size()));
  }
  check(os.good(), "instahide: write failed for ", path);
}

std::vector<InstaHideRecipe> instahide_load_recipes(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  check(is.good(), "instahide: cannot open ", path);
  char magic[8];
  is.read(magic, 8);
  check(is.good() && std::memcmp(magic, kRecipeMagic, 8) == 0,
        "instahide: bad recipe file magic in ", path);
  check(get<std::uint32_t>(is) == 1, "instahide: unsupported version");
  std::uint64_t count = get<std::uint64_t>(is);
  check(count <= (1u << 24), "instahide: implausible recipe count");
  std::vector<InstaHideRecipe> out;
  out.reserve(count);
  for (std::uint64_t i = 0; i < count; ++i) {
    InstaHideRecipe r;
    r.k = get<std::int32_t>(is);
    check(r.k >= 1 && r.k <= 64, "instahide: implausible k");
    for (int j = 0; j < r.k - 1; ++j)
      r.pool_indices.push_back(get<std::int32_t>(is));
    for (int j = 0; j < r.k; ++j) r.weights.push_back(get<float>(is));
    std::uint32_t mask_len = get<std::uint32_t>(is);
    check(mask_len == static_cast<std::uint32_t>(kDim),
          "instahide: mask length mismatch");
    r.sign_mask.resize(mask_len);
    is.read(reinterpret_cast<char*>(r.sign_mask.data()), mask_len);
    check(is.good(), "instahide: truncated recipe file");
    out.push_back(std::move(r));
  }
  return out;
}

// ---- mitigated deployment -----------------------------------------------------

MitigatedModel::MitigatedModel(std::unique_ptr<TargetModel> inner,
                               MitigationMethod method, RmtKey key,
                               std::shared_ptr<const LabeledDataset> pool,
                               int instahide_k, std::uint64_t seed)
    : inner_(std::move(inner)),
      method_(method),
      key_(std::move(key)),
      pool_(std::move(pool)),
      instahide_k_(instahide_k),
      seed_(seed) {
  check(inner_ != nullptr, "mitigated model: no inner model");
  if (method_ == MitigationMethod::rmt) key_.validate();
  if (method_ == MitigationMethod::instahide) {
    check(pool_ != nullptr && !pool_->empty(),
          "mitigated model: instahide needs a pool");
    check(instahide_k_ >= 1, "mitigated model: bad k");
  }
}

int MitigatedModel::num_classes() const { return inner_->num_classes(); }

Tensor MitigatedModel::transform_batch(
    const Tensor& images, std::vector<InstaHideRecipe>* recipes) const {
  if (method_ == MitigationMethod::none) return images;
  Tensor out(images.n(), images.c(), images.h(), images.w());
  std::uint64_t call = call_counter_.fetch_add(1);
  if (method_ == MitigationMethod::rmt) {
    Rng noise(derive_seed(seed_, "mitigate/noise/" + std::to_string(call)));
    for (int i = 0; i < images.n(); ++i)
      rmt_transform_image(images.item(i), out.item(i), key_, &noise);
  } else {
    Rng rng(derive_seed(seed_, "mitigate/infer/" + std::to_string(call)));
    for (int i = 0; i < images.n(); ++i) {
      InstaHideRecipe r = make_instahide_recipe(instahide_k_, pool_->size(), rng);
      instahide_transform(images.item(i), *pool_, r, out.item(i));
      if (recipes) recipes->push_back(std::move(r));
    }
  }
  return out;
}

Tensor MitigatedModel::predict(const Tensor& images) const {
  return inner_->predict(transform_batch(images, nullptr));
}

Tensor MitigatedModel::log_prob_input_gradient(
    const Tensor& images, const std::vector<int>& classes) const {
  std::vector<InstaHideRecipe> recipes;
  Tensor transformed = transform_batch(images, &recipes);
  Tensor g = inner_->log_prob_input_gradient(transformed, classes);
  switch (method_) {
    case MitigationMethod::none:
      return g;
    case MitigationMethod::rmt: {
      // y = M x + noise, so dL/dx = M^T dL/dy per block
      Tensor out(g.n(), g.c(), g.h(), g.w());
      int grid = key_.grid();
      Eigen::VectorXf v(key_.block * key_.block);
      for (int i = 0; i < g.n(); ++i)
        for (int gi = 0; gi < grid; ++gi)
          for (int gj = 0; gj < grid; ++gj) {
            copy_block_in(g.item(i), gi, gj, key_.block, v);
            Eigen::VectorXf x =
                key_.matrices[static_cast<std::size_t>(gi * grid + gj)]
                    .transpose() *
                v;
            copy_block_out(x, gi, gj, key_.block, out.item(i));
          }
      return out;
    }
    case MitigationMethod::instahide: {
      // y = mask .* (w0 x + mix), so dL/dx = w0 * mask .* dL/dy
      Tensor out(g.n(), g.c(), g.h(), g.w());
      for (int i = 0; i < g.n(); ++i) {
        const InstaHideRecipe& r = recipes[static_cast<std::size_t>(i)];
        const float* gi = g.item(i);
        float* oi = out.item(i);
        for (int p = 0; p < kDim; ++p)
          oi[p] = r.weights[0] *
                  static_cast<float>(r.sign_mask[static_cast<std::size_t>(p)]) *
                  gi[p];
      }
      return out;
    }
  }
  fail("unknown mitigation method");
}

std::string MitigatedModel::parameter_digest() const {
  Digest d;
  d.str(inner_->parameter_digest());
  d.str(mitigation_name(method_));
  if (method_ == MitigationMethod::rmt) d.str(key_.digest());
  if (method_ == MitigationMethod::instahide) {
    d.pod(seed_).pod(instahide_k_);
    d.str(pool_->source_id);
  }
  return d.hex();
}

std::string MitigatedModel::descriptor() const {
  return std::string(mitigation_name(method_)) + "(" + inner_->descriptor() +
         ")";
}

MitigatedTarget mitigate_and_train(
    const LabeledDataset& train, const LabeledDataset& test,
    const MitigationParams& params, const ClassifierConfig& model_cfg,
    const FitConfig& fit_cfg, std::shared_ptr<const LabeledDataset> pool) {
  MitigatedTarget out;
  out.method = params.method;
  switch (params.method) {
    case MitigationMethod::none: {
      std::unique_ptr<ResidualClassifier> model =
          train_target(train, test, model_cfg, fit_cfg, &out.fit);
      out.test_accuracy = out.fit.test_accuracy;
      out.model = std::move(model);
      return out;
    }
    case MitigationMethod::rmt: {
      out.key = rmt_generate_key(params.rmt_block_count, params.seed,
                                 params.rmt_sigma);
      LabeledDataset train_t = rmt_transform_dataset(train, out.key);
      LabeledDataset test_t = rmt_transform_dataset(test, out.key);
      std::unique_ptr<ResidualClassifier> model =
          train_target(train_t, test_t, model_cfg, fit_cfg, &out.fit);
      out.test_accuracy = out.fit.test_accuracy;
      out.model = std::make_unique<MitigatedModel>(
          std::move(model), MitigationMethod::rmt, out.key, nullptr, 0,
          params.seed);
      return out;
    }
    case MitigationMethod::instahide: {
      check(pool != nullptr && !pool->empty(),
            "mitigate_and_train: instahide needs a pool");
      LabeledDataset train_t = instahide_transform_dataset(
          train, *pool, params.instahide_k, params.seed, &out.train_recipes);
      LabeledDataset test_t = instahide_transform_dataset(
          test, *pool, params.instahide_k,
          derive_seed(params.seed, "instahide/test"), nullptr);
      std::unique_ptr<ResidualClassifier> model =
          train_target(train_t, test_t, model_cfg, fit_cfg, &out.fit);
      out.test_accuracy = out.fit.test_accuracy;
      out.model = std::make_unique<MitigatedModel>(
          std::move(model), MitigationMethod::instahide, RmtKey{}, pool,
          params.instahide_k, params.seed);
      return out;
    }
  }
  fail("unknown mitigation method");
}

}  // namespace mdi
