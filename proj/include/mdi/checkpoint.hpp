#pragma once

#include <string>
#include <vector>

#include "mdi/nn.hpp"

namespace mdi {

/// Named float array inside a checkpoint file.
struct NamedArray {
  std::string name;
  std::vector<int> shape;
  std::vector<float> data;
};

/// Versioned binary container for model parameters, optimizer slots and
/// bookkeeping scalars. `kind` labels what the file holds (classifier, gan,
/// distracted gan); metadata_json carries structured extras.
struct Checkpoint {
  std::string kind;
  std::string arch;
  std::string metadata_json;
  std::vector<NamedArray> arrays;

  void add_array(const std::string& name, std::vector<int> shape,
                 std::vector<float> data);
  const NamedArray& find(const std::string& name) const;
  bool has(const std::string& name) const;

  /// Content digest over kind, arch, metadata and every array.
  std::string digest() const;

  void save(const std::string& path) const;
  static Checkpoint load(const std::string& path);
};

/// Copies parameter values (including running statistics) into the
/// checkpoint under their parameter names.
void export_params(const std::vector<nn::Param*>& params, Checkpoint& ck);

/// Restores parameter values by name; every parameter must be present with
/// a matching shape.
void import_params(const std::vector<nn::Param*>& params,
                   const Checkpoint& ck);

}  // namespace mdi
