#pragma once

#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mdi/tensor.hpp"

namespace mdi {

constexpr int kImageSize = 36;
constexpr int kNumClasses = 7;

enum class Provenance : std::uint8_t {
  real = 0,
  gan_generated = 1,
  reconstructed = 2,
  mitigated = 3,
};

const char* provenance_name(Provenance p);
Provenance provenance_from_name(const std::string& s);

/// A set of 36x36x1 images with class labels in {0..6}. Pixels lie in
/// [-1, 1] except for mitigated data, whose transformed domain is unbounded
/// (finite values only). Immutable by convention once built; concurrent
/// reads are safe.
struct LabeledDataset {
  Tensor images;            // N x 1 x 36 x 36
  std::vector<int> labels;  // length N, values in {0..6}
  std::string source_id;
  Provenance provenance = Provenance::real;

  // Lineage of generated data: the digest of the snapshot that produced it
  // and, for distracted snapshots, of the parent snapshot.
  std::string origin_digest;
  std::string origin_parent_digest;

  int size() const { return images.n(); }
  bool empty() const { return size() == 0; }

  /// Throws if any structural invariant is violated: image shape, pixel
  /// range (skipped for mitigated data beyond finiteness), label range,
  /// and length agreement.
  void validate() const;

  /// Indices grouped by label; classes with no samples get empty lists.
  std::vector<std::vector<int>> per_class_indices() const;

  /// Classes that have at least one sample.
  std::vector<int> present_classes() const;

  LabeledDataset subset(const std::vector<int>& idx) const;

  std::string digest() const;
};

/// Sidecar record describing how a dataset was produced.
struct DatasetManifest {
  std::string source_id;
  std::map<int, int> class_map;  // original label -> unified label
  std::vector<int> per_class_count;
  std::string normalization;  // e.g. "bt601-luma,bilinear-36x36,[-1,1]"
  std::string content_digest;
  std::string provenance;
  std::string origin_digest;
  std::string origin_parent_digest;
};

DatasetManifest make_manifest(const LabeledDataset& ds,
                              const std::map<int, int>& class_map,
                              const std::string& normalization);

/// Packed binary dataset file plus JSON manifest sidecar ("<path>.json").
void save_dataset(const LabeledDataset& ds, const std::string& path,
                  const DatasetManifest* manifest = nullptr);
LabeledDataset load_dataset(const std::string& path);

}  // namespace mdi
