#include "mdi/image_ops.hpp"

#include <cmath>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace mdi {

float bilinear_sample(const float* grid, int h, int w, float y, float x) {
  const auto clampi = [](int v, int lo, int hi) {
    return v < lo ? lo : (v > hi ? hi : v);
  };
  const int y0 = clampi(int(std::floor(y)), 0, h - 1);
  const int x0 = clampi(int(std::floor(x)), 0, w - 1);
  const int y1 = clampi(y0 + 1, 0, h - 1);
  const int x1 = clampi(x0 + 1, 0, w - 1);
  const float fy = std::min(std::max(y - float(y0), 0.0f), 1.0f);
  const float fx = std::min(std::max(x - float(x0), 0.0f), 1.0f);
  const float top = grid[y0 * w + x0] * (1.0f - fx) + grid[y0 * w + x1] * fx;
  const float bot = grid[y1 * w + x0] * (1.0f - fx) + grid[y1 * w + x1] * fx;
  return top * (1.0f - fy) + bot * fy;
}

Tensor normalize(const RawImage& raw) {
  check(raw.height >= 1 && raw.width >= 1, "normalize: empty image");
  check(raw.channels == 1 || raw.channels == 3,
        "normalize: expected 1 or 3 channels, got ", raw.channels);
  check(raw.pixels.size() ==
            std::size_t(raw.height) * raw.width * raw.channels,
        "normalize: pixel buffer size mismatch");
  for (float v : raw.pixels)
    check(std::isfinite(v), "normalize: non-finite pixel value");

  // Grayscale via BT.601 luma.
  std::vector<float> gray(std::size_t(raw.height) * raw.width);
  if (raw.channels == 1) {
    gray = raw.pixels;
  } else {
    for (int y = 0; y < raw.height; ++y)
      for (int x = 0; x < raw.width; ++x)
        gray[std::size_t(y) * raw.width + x] = 0.299f * raw.at(y, x, 0) +
                                               0.587f * raw.at(y, x, 1) +
                                               0.114f * raw.at(y, x, 2);
  }

  // Bilinear resize with the half-pixel center convention:
  // src = (dst + 0.5) * scale - 0.5.
  Tensor out(1, 1, kImageSize, kImageSize);
  const float sy = float(raw.height) / float(kImageSize);
  const float sx = float(raw.width) / float(kImageSize);
  for (int y = 0; y < kImageSize; ++y) {
    for (int x = 0; x < kImageSize; ++x) {
      const float src_y = (float(y) + 0.5f) * sy - 0.5f;
      const float src_x = (float(x) + 0.5f) * sx - 0.5f;
      const float v =
          bilinear_sample(gray.data(), raw.height, raw.width, src_y, src_x);
      out.at(0, 0, y, x) = 2.0f * v - 1.0f;
    }
  }
  return out;
}

namespace {

int next_pnm_token(std::istream& is) {
  // Skips whitespace and '#' comments, then parses one integer.
  while (true) {
    int ch = is.peek();
    if (ch == '#') {
      std::string line;
      std::getline(is, line);
    } else if (std::isspace(ch)) {
      is.get();
    } else {
      break;
    }
  }
  int v;
  is >> v;
  check(bool(is), "pnm: malformed header token");
  return v;
}

}  // namespace

RawImage read_pnm(const std::string& path) {
  std::ifstream is(path, std::ios::binary);
  check(bool(is), "cannot open image: ", path);
  char p, kind;
  is.get(p).get(kind);
  check(p == 'P' && (kind == '2' || kind == '3' || kind == '5' || kind == '6'),
        "unsupported image format (want PGM/PPM): ", path);
  const bool color = kind == '3' || kind == '6';
  const bool binary = kind == '5' || kind == '6';

  RawImage img;
  img.width = next_pnm_token(is);
  img.height = next_pnm_token(is);
  const int maxval = next_pnm_token(is);
  check(maxval > 0 && maxval < 65536, "pnm: bad maxval in ", path);
  img.channels = color ? 3 : 1;
  const std::size_t count =
      std::size_t(img.width) * img.height * img.channels;
  img.pixels.resize(count);

  if (binary) {
    is.get();  // single whitespace after maxval
    check(maxval < 256, "pnm: 16-bit binary images unsupported: ", path);
    std::vector<unsigned char> buf(count);
    is.read(reinterpret_cast<char*>(buf.data()), std::streamsize(count));
    check(bool(is), "pnm: truncated pixel data in ", path);
    for (std::size_t i = 0; i < count; ++i)
      img.pixels[i] = float(buf[i]) / float(maxval);
  } else {
    for (std::size_t i = 0; i < count; ++i)
      img.pixels[i] = float(next_pnm_token(is)) / float(maxval);
  }
  return img;
}

LabeledDataset ingest_csv(const std::string& csv_path,
                          const std::string& source_id) {
  std::ifstream is(csv_path);
  check(bool(is), "cannot open CSV: ", csv_path);
  const auto base = std::filesystem::path(csv_path).parent_path();

  std::string line;
  check(bool(std::getline(is, line)), "empty CSV: ", csv_path);
  check(line.rfind("path,label", 0) == 0, "CSV must start with `path,label`: ",
        csv_path);

  std::vector<Tensor> images;
  std::vector<int> labels;
  while (std::getline(is, line)) {
    if (line.empty()) continue;
    const auto comma = line.rfind(',');
    check(comma != std::string::npos, "malformed CSV row: ", line);
    const std::string rel = line.substr(0, comma);
    const int label = std::stoi(line.substr(comma + 1));
    images.push_back(normalize(read_pnm((base / rel).string())));
    labels.push_back(label);
  }
  check(!images.empty(), "CSV lists no images: ", csv_path);

  LabeledDataset ds;
  ds.images = Tensor(int(images.size()), 1, kImageSize, kImageSize);
  for (std::size_t i = 0; i < images.size(); ++i)
    ds.images.copy_item_from(images[i], 0, int(i));
  ds.labels = std::move(labels);
  ds.source_id = source_id;
  ds.provenance = Provenance::real;
  ds.validate();
  return ds;
}

}  // namespace mdi
