#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mdi/dataset.hpp"

namespace mdi {

/// Names of the built-in synthetic domains, in canonical order:
/// "digits"   — stroke-rendered digit glyphs 0..6 on a dark background
/// "letters"  — stroke-rendered letter glyphs A..G (statistically the
///              nearest neighbour of "digits")
/// "fashion"  — filled garment silhouettes
/// "textures" — full-frame correlated noise fields with shape overlays
///              (the hardest domain for a small generative model)
std::vector<std::string> synth_domains();

/// Renders a deterministic labeled dataset for one synthetic domain.
/// Every image is a pure function of (domain, class, index, seed), so
/// datasets are bit-identical across runs and machines.
LabeledDataset synth_dataset(const std::string& domain, int per_class,
                             std::uint64_t seed);

}  // namespace mdi
