#include "mdi/pipeline.hpp"

#include <algorithm>
#include <cmath>
#include <set>

#include "mdi/rng.hpp"

namespace mdi {

LabeledDataset unify_classes(const Tensor& images,
                             const std::vector<int>& original_labels,
                             const std::map<int, int>& class_map,
                             const std::string& source_id) {
  check(images.n() == int(original_labels.size()),
        "unify_classes: images/labels length mismatch");
  check(class_map.size() == std::size_t(kNumClasses),
        "unify_classes: class_map must retain exactly ", kNumClasses,
        " classes, got ", class_map.size());
  std::set<int> unified;
  for (auto& [orig, uni] : class_map) {
    check(uni >= 0 && uni < kNumClasses,
          "unify_classes: unified label out of range: ", uni);
    check(unified.insert(uni).second,
          "unify_classes: class_map not injective on unified label ", uni);
  }

  std::vector<int> keep;
  std::vector<int> new_labels;
  for (int i = 0; i < images.n(); ++i) {
    auto it = class_map.find(original_labels[std::size_t(i)]);
    if (it == class_map.end()) continue;
    keep.push_back(i);
    new_labels.push_back(it->second);
  }

  LabeledDataset out;
  out.images = images.gather(keep);
  out.labels = std::move(new_labels);
  out.source_id = source_id;
  out.provenance = Provenance::real;
  out.validate();
  return out;
}

std::map<int, int> default_class_map(const std::vector<int>& original_labels) {
  std::set<int> distinct(original_labels.begin(), original_labels.end());
  check(int(distinct.size()) >= kNumClasses, "default_class_map: only ",
        distinct.size(), " classes present, need ", kNumClasses);
  std::map<int, int> m;
  int next = 0;
  for (int orig : distinct) {
    if (next == kNumClasses) break;
    m[orig] = next++;
  }
  return m;
}

std::pair<LabeledDataset, LabeledDataset> split(const LabeledDataset& ds,
                                                double ratio,
                                                std::uint64_t seed) {
  check(ratio > 0.0 && ratio < 1.0, "split: ratio must lie in (0,1), got ",
        ratio);
  Rng rng(seed);
  std::vector<int> train_idx, test_idx;
  for (auto& members : ds.per_class_indices()) {
    if (members.empty()) continue;
    check(members.size() >= 2, "split: class with ", members.size(),
          " sample(s) cannot be stratified");
    std::vector<int> order = members;
    rng.shuffle(order);
    // Stratified: the ratio applies within each class.
    const int take = int(std::lround(ratio * double(order.size())));
    for (std::size_t i = 0; i < order.size(); ++i)
      (int(i) < take ? train_idx : test_idx).push_back(order[i]);
  }
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(test_idx.begin(), test_idx.end());
  return {ds.subset(train_idx), ds.subset(test_idx)};
}

LabeledDataset sample_per_class(const LabeledDataset& ds, int n_per_class,
                                std::uint64_t seed) {
  check(n_per_class >= 0, "sample_per_class: negative count");
  Rng rng(seed);
  std::vector<int> chosen;
  auto by_class = ds.per_class_indices();
  for (int c = 0; c < kNumClasses; ++c) {
    auto& members = by_class[std::size_t(c)];
    if (members.empty()) continue;  // absent classes are not required
    check(int(members.size()) >= n_per_class, "sample_per_class: class ", c,
          " has ", members.size(), " samples, need ", n_per_class);
    std::vector<int> order = members;
    rng.shuffle(order);
    chosen.insert(chosen.end(), order.begin(), order.begin() + n_per_class);
  }
  std::sort(chosen.begin(), chosen.end());
  return ds.subset(chosen);
}

}  // namespace mdi
