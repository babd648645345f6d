#pragma once

#include <string>

#include "mdi/dataset.hpp"
#include "mdi/tensor.hpp"

namespace mdi {

/// Raw image as loaded from disk or produced by a renderer: H x W with 1 or 3
/// channels, pixel values in [0, 1].
struct RawImage {
  int height = 0;
  int width = 0;
  int channels = 1;
  std::vector<float> pixels;  // row-major, channel-interleaved

  float at(int y, int x, int c) const {
    return pixels[(std::size_t(y) * width + x) * channels + c];
  }
};

/// Converts a raw image into the unified experiment format: grayscale via
/// BT.601 luminance weights, bilinear resize to 36x36, then an affine map
/// from [0,1] to [-1,1]. Rejects non-finite input pixels.
Tensor normalize(const RawImage& raw);

/// Bilinear sample of a single-channel H x W grid at fractional coordinates,
/// pixel centers at integer positions, edges clamped. Exposed so tests can
/// evaluate the interpolation formula directly.
float bilinear_sample(const float* grid, int h, int w, float y, float x);

/// Reads a PGM (P2/P5) or PPM (P3/P6) file into a RawImage with [0,1] values.
RawImage read_pnm(const std::string& path);

/// Ingests a directory of PGM/PPM images listed in a CSV file with header
/// `path,label` (paths relative to the CSV's directory). Labels must already
/// be unified to {0..6}.
LabeledDataset ingest_csv(const std::string& csv_path,
                          const std::string& source_id);

}  // namespace mdi
