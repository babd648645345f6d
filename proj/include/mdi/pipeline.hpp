#pragma once

#include <cstdint>
#include <map>

#include "mdi/dataset.hpp"

namespace mdi {

/// Drops samples of unretained classes and remaps the surviving labels to
/// {0..6} by the order given in class_map. The map must retain exactly 7
/// original classes with distinct unified labels.
LabeledDataset unify_classes(const Tensor& images,
                             const std::vector<int>& original_labels,
                             const std::map<int, int>& class_map,
                             const std::string& source_id);

/// Default unification rule: keep the 7 lowest original label indices.
std::map<int, int> default_class_map(const std::vector<int>& original_labels);

/// Stratified random split. |train| per class = round(ratio * class size);
/// rejects classes with fewer than 2 samples.
std::pair<LabeledDataset, LabeledDataset> split(const LabeledDataset& ds,
                                                double ratio,
                                                std::uint64_t seed);

/// Draws exactly n_per_class samples per present class, without replacement.
LabeledDataset sample_per_class(const LabeledDataset& ds, int n_per_class,
                                std::uint64_t seed);

}  // namespace mdi
