#include "mdi/synth.hpp"

#include <algorithm>
#include <cmath>

#include "mdi/image_ops.hpp"
#include "mdi/rng.hpp"

namespace mdi {

namespace {

struct Pt {
  float x, y;
};

using Stroke = std::vector<Pt>;  // open polyline in [0,1]^2, y grows downward

Stroke arc(float cx, float cy, float r, float a0, float a1, int steps = 14) {
  Stroke s;
  for (int i = 0; i <= steps; ++i) {
    const float t = a0 + (a1 - a0) * float(i) / float(steps);
    s.push_back({cx + r * std::cos(t), cy + r * std::sin(t)});
  }
  return s;
}

Stroke line(Pt a, Pt b) { return {a, b}; }

// Digit skeletons 0..6. Coordinates hand-placed on a [0,1] box.
std::vector<Stroke> digit_glyph(int cls) {
  const float pi = 3.14159265f;
  switch (cls) {
    case 0:
      return {arc(0.5f, 0.5f, 0.34f, 0.0f, 2.0f * pi, 24)};
    case 1:
      return {line({0.35f, 0.25f}, {0.52f, 0.1f}),
              line({0.52f, 0.1f}, {0.52f, 0.9f})};
    case 2: {
      auto top = arc(0.5f, 0.32f, 0.24f, -pi, 0.25f * pi, 12);
      top.push_back({0.25f, 0.9f});
      return {top, line({0.25f, 0.9f}, {0.78f, 0.9f})};
    }
    case 3:
      return {arc(0.45f, 0.3f, 0.22f, -0.8f * pi, 0.5f * pi, 12),
              arc(0.45f, 0.7f, 0.24f, -0.5f * pi, 0.8f * pi, 12)};
    case 4:
      return {line({0.62f, 0.1f}, {0.22f, 0.62f}),
              line({0.22f, 0.62f}, {0.8f, 0.62f}),
              line({0.62f, 0.1f}, {0.62f, 0.9f})};
    case 5:
      return {line({0.72f, 0.1f}, {0.3f, 0.1f}), line({0.3f, 0.1f}, {0.28f, 0.45f}),
              arc(0.47f, 0.65f, 0.25f, -0.6f * pi, 0.75f * pi, 14)};
    case 6:
      return {line({0.62f, 0.08f}, {0.34f, 0.5f}),
              arc(0.5f, 0.68f, 0.2f, 0.0f, 2.0f * pi, 18)};
  }
  fail("digit_glyph: class out of range");
}

// Letter skeletons A..G.
std::vector<Stroke> letter_glyph(int cls) {
  const float pi = 3.14159265f;
  switch (cls) {
    case 0:  // A
      return {line({0.5f, 0.1f}, {0.22f, 0.9f}), line({0.5f, 0.1f}, {0.78f, 0.9f}),
              line({0.33f, 0.6f}, {0.67f, 0.6f})};
    case 1:  // B
      return {line({0.3f, 0.1f}, {0.3f, 0.9f}),
              arc(0.42f, 0.3f, 0.2f, -0.5f * pi, 0.5f * pi, 10),
              arc(0.44f, 0.7f, 0.22f, -0.5f * pi, 0.5f * pi, 10),
              line({0.3f, 0.1f}, {0.42f, 0.1f}), line({0.3f, 0.5f}, {0.44f, 0.5f}),
              line({0.3f, 0.9f}, {0.44f, 0.9f})};
    case 2:  // C
      return {arc(0.55f, 0.5f, 0.33f, 0.6f * pi, 1.4f * pi, 16)};
    case 3:  // D
      return {line({0.3f, 0.1f}, {0.3f, 0.9f}),
              arc(0.34f, 0.5f, 0.4f, -0.5f * pi, 0.5f * pi, 14),
              line({0.3f, 0.1f}, {0.36f, 0.1f}), line({0.3f, 0.9f}, {0.36f, 0.9f})};
    case 4:  // E
      return {line({0.3f, 0.1f}, {0.3f, 0.9f}), line({0.3f, 0.1f}, {0.74f, 0.1f}),
              line({0.3f, 0.5f}, {0.66f, 0.5f}), line({0.3f, 0.9f}, {0.74f, 0.9f})};
    case 5:  // F
      return {line({0.3f, 0.1f}, {0.3f, 0.9f}), line({0.3f, 0.1f}, {0.74f, 0.1f}),
              line({0.3f, 0.5f}, {0.64f, 0.5f})};
    case 6: {  // G
      auto c = arc(0.52f, 0.5f, 0.33f, 0.55f * pi, 1.5f * pi, 16);
      return {c, line({0.85f, 0.5f}, {0.56f, 0.5f}),
              line({0.85f, 0.5f}, {0.85f, 0.72f})};
    }
  }
  fail("letter_glyph: class out of range");
}

// Garment outlines as closed polygons, filled at render time.
std::vector<Pt> garment_polygon(int cls) {
  switch (cls) {
    case 0:  // t-shirt
      return {{0.3f, 0.2f},  {0.42f, 0.14f}, {0.58f, 0.14f}, {0.7f, 0.2f},
              {0.92f, 0.32f}, {0.84f, 0.46f}, {0.72f, 0.4f},  {0.72f, 0.88f},
              {0.28f, 0.88f}, {0.28f, 0.4f},  {0.16f, 0.46f}, {0.08f, 0.32f}};
    case 1:  // trousers
      return {{0.3f, 0.1f},  {0.7f, 0.1f},  {0.74f, 0.9f}, {0.56f, 0.9f},
              {0.5f, 0.38f}, {0.44f, 0.9f}, {0.26f, 0.9f}};
    case 2:  // pullover (long sleeves)
      return {{0.32f, 0.16f}, {0.45f, 0.1f},  {0.55f, 0.1f},  {0.68f, 0.16f},
              {0.94f, 0.3f},  {0.9f, 0.82f},  {0.76f, 0.8f},  {0.74f, 0.42f},
              {0.72f, 0.9f},  {0.28f, 0.9f},  {0.26f, 0.42f}, {0.24f, 0.8f},
              {0.1f, 0.82f},  {0.06f, 0.3f}};
    case 3:  // dress
      return {{0.42f, 0.08f}, {0.58f, 0.08f}, {0.6f, 0.3f}, {0.82f, 0.92f},
              {0.18f, 0.92f}, {0.4f, 0.3f}};
    case 4:  // coat
      return {{0.3f, 0.1f},  {0.46f, 0.16f}, {0.5f, 0.3f},  {0.54f, 0.16f},
              {0.7f, 0.1f},  {0.88f, 0.24f}, {0.84f, 0.94f}, {0.16f, 0.94f},
              {0.12f, 0.24f}};
    case 5:  // sandal
      return {{0.1f, 0.62f}, {0.34f, 0.5f},  {0.5f, 0.56f}, {0.72f, 0.44f},
              {0.9f, 0.52f}, {0.92f, 0.72f}, {0.1f, 0.78f}};
    case 6:  // sneaker
      return {{0.08f, 0.56f}, {0.3f, 0.42f}, {0.5f, 0.4f},  {0.62f, 0.48f},
              {0.9f, 0.58f},  {0.92f, 0.76f}, {0.08f, 0.78f}};
  }
  fail("garment_polygon: class out of range");
}

struct Affine {
  // p' = R(angle) * diag(sx, sy) * shear * (p - 0.5) + 0.5 + (tx, ty)
  float angle, sx, sy, shear, tx, ty;

  Pt apply(Pt p) const {
    float x = p.x - 0.5f, y = p.y - 0.5f;
    x += shear * y;
    x *= sx;
    y *= sy;
    const float c = std::cos(angle), s = std::sin(angle);
    return {c * x - s * y + 0.5f + tx, s * x + c * y + 0.5f + ty};
  }
};

Affine sample_affine(Rng& rng, float jitter) {
  Affine a;
  a.angle = float(rng.uniform(-0.22, 0.22)) * jitter;
  a.sx = 1.0f + float(rng.uniform(-0.14, 0.14)) * jitter;
  a.sy = 1.0f + float(rng.uniform(-0.14, 0.14)) * jitter;
  a.shear = float(rng.uniform(-0.16, 0.16)) * jitter;
  a.tx = float(rng.uniform(-0.05, 0.05)) * jitter;
  a.ty = float(rng.uniform(-0.05, 0.05)) * jitter;
  return a;
}

float seg_dist(float px, float py, Pt a, Pt b) {
  const float vx = b.x - a.x, vy = b.y - a.y;
  const float wx = px - a.x, wy = py - a.y;
  const float vv = vx * vx + vy * vy;
  float t = vv > 0.0f ? (wx * vx + wy * vy) / vv : 0.0f;
  t = std::clamp(t, 0.0f, 1.0f);
  const float dx = px - (a.x + t * vx), dy = py - (a.y + t * vy);
  return std::sqrt(dx * dx + dy * dy);
}

RawImage blank_canvas(float background) {
  RawImage img;
  img.height = kImageSize;
  img.width = kImageSize;
  img.channels = 1;
  img.pixels.assign(std::size_t(kImageSize) * kImageSize, background);
  return img;
}

void add_pixel_noise(RawImage& img, Rng& rng, float sigma) {
  for (auto& v : img.pixels)
    v = std::clamp(v + float(rng.normal()) * sigma, 0.0f, 1.0f);
}

// Renders anti-aliased strokes: coverage from the distance to the nearest
// segment, half-width in pixels.
RawImage render_strokes(const std::vector<Stroke>& strokes, Rng& rng) {
  const Affine af = sample_affine(rng, 1.0f);
  const float half_width = float(rng.uniform(0.7, 1.4));
  const float fg = float(rng.uniform(0.75, 1.0));
  const float margin = 4.0f;
  const float span = float(kImageSize) - 2.0f * margin;

  std::vector<std::pair<Pt, Pt>> segs;
  for (const auto& s : strokes)
    for (std::size_t i = 0; i + 1 < s.size(); ++i) {
      Pt a = af.apply(s[i]), b = af.apply(s[i + 1]);
      segs.push_back({{margin + a.x * span, margin + a.y * span},
                      {margin + b.x * span, margin + b.y * span}});
    }

  RawImage img = blank_canvas(0.0f);
  for (int y = 0; y < kImageSize; ++y)
    for (int x = 0; x < kImageSize; ++x) {
      float best = 1e9f;
      for (auto& [a, b] : segs)
        best = std::min(best, seg_dist(float(x), float(y), a, b));
      const float cov = std::clamp(half_width + 0.5f - best, 0.0f, 1.0f);
      img.pixels[std::size_t(y) * kImageSize + x] = fg * cov;
    }
  add_pixel_noise(img, rng, 0.02f);
  return img;
}

bool point_in_polygon(const std::vector<Pt>& poly, float px, float py) {
  bool inside = false;
  for (std::size_t i = 0, j = poly.size() - 1; i < poly.size(); j = i++) {
    const Pt &a = poly[i], &b = poly[j];
    if ((a.y > py) != (b.y > py) &&
        px < (b.x - a.x) * (py - a.y) / (b.y - a.y) + a.x)
      inside = !inside;
  }
  return inside;
}

RawImage render_silhouette(const std::vector<Pt>& polygon, Rng& rng) {
  const Affine af = sample_affine(rng, 0.8f);
  const float fill = float(rng.uniform(0.45, 0.8));
  const float margin = 3.0f;
  const float span = float(kImageSize) - 2.0f * margin;

  std::vector<Pt> poly;
  for (Pt p : polygon) {
    Pt q = af.apply(p);
    poly.push_back({margin + q.x * span, margin + q.y * span});
  }

  RawImage img = blank_canvas(0.03f);
  // 3x3 supersampling for edge coverage.
  for (int y = 0; y < kImageSize; ++y)
    for (int x = 0; x < kImageSize; ++x) {
      int hits = 0;
      for (int sy = 0; sy < 3; ++sy)
        for (int sx = 0; sx < 3; ++sx)
          if (point_in_polygon(poly, float(x) + (float(sx) - 1.0f) / 3.0f,
                               float(y) + (float(sy) - 1.0f) / 3.0f))
            ++hits;
      const float cov = float(hits) / 9.0f;
      auto& px = img.pixels[std::size_t(y) * kImageSize + x];
      px = px * (1.0f - cov) + fill * cov;
    }
  add_pixel_noise(img, rng, 0.045f);
  return img;
}

// Separable box blur, repeated twice to approximate a Gaussian.
void blur(std::vector<float>& f, int radius) {
  if (radius <= 0) return;
  const int n = kImageSize;
  std::vector<float> tmp(f.size());
  for (int pass = 0; pass < 2; ++pass) {
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        float acc = 0.0f;
        int cnt = 0;
        for (int k = -radius; k <= radius; ++k) {
          const int xx = x + k;
          if (xx < 0 || xx >= n) continue;
          acc += f[std::size_t(y) * n + xx];
          ++cnt;
        }
        tmp[std::size_t(y) * n + x] = acc / float(cnt);
      }
    for (int x = 0; x < n; ++x)
      for (int y = 0; y < n; ++y) {
        float acc = 0.0f;
        int cnt = 0;
        for (int k = -radius; k <= radius; ++k) {
          const int yy = y + k;
          if (yy < 0 || yy >= n) continue;
          acc += tmp[std::size_t(yy) * n + x];
          ++cnt;
        }
        f[std::size_t(y) * n + x] = acc / float(cnt);
      }
  }
}

// Full-frame correlated noise with class-dependent statistics and a simple
// shape overlay. Deliberately high-entropy: small generative models fit this
// domain poorly, mirroring natural-image corpora.
RawImage render_texture(int cls, Rng& rng) {
  const int n = kImageSize;
  std::vector<float> field(std::size_t(n) * n);
  for (auto& v : field) v = float(rng.normal());

  const int radius = 1 + cls % 3;
  blur(field, radius);

  // Orientation streaks for odd classes.
  if (cls % 2 == 1) {
    std::vector<float> shifted = field;
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        const int xx = (x + 3) % n;
        field[std::size_t(y) * n + x] =
            0.5f * (field[std::size_t(y) * n + x] +
                    shifted[std::size_t(y) * n + xx]);
      }
  }

  float mn = 1e9f, mx = -1e9f;
  for (float v : field) {
    mn = std::min(mn, v);
    mx = std::max(mx, v);
  }
  const float scale = mx > mn ? 1.0f / (mx - mn) : 1.0f;
  const float base = float(rng.uniform(0.15, 0.45));
  const float gain = float(rng.uniform(0.45, 0.75));

  RawImage img = blank_canvas(0.0f);
  for (std::size_t i = 0; i < field.size(); ++i)
    img.pixels[i] = std::clamp(base + gain * (field[i] - mn) * scale, 0.0f, 1.0f);

  // Class-keyed blob overlay.
  const int blobs = 1 + cls / 2;
  for (int b = 0; b < blobs; ++b) {
    const float cx = float(rng.uniform(6.0, n - 6.0));
    const float cy = float(rng.uniform(6.0, n - 6.0));
    const float rx = float(rng.uniform(3.0, 7.0));
    const float ry = float(rng.uniform(3.0, 7.0));
    const float delta = (cls % 2 == 0) ? float(rng.uniform(0.15, 0.3))
                                       : float(-rng.uniform(0.15, 0.3));
    for (int y = 0; y < n; ++y)
      for (int x = 0; x < n; ++x) {
        const float dx = (float(x) - cx) / rx, dy = (float(y) - cy) / ry;
        const float d2 = dx * dx + dy * dy;
        if (d2 < 1.0f)
          img.pixels[std::size_t(y) * n + x] = std::clamp(
              img.pixels[std::size_t(y) * n + x] + delta * (1.0f - d2), 0.0f,
              1.0f);
      }
  }
  return img;
}

RawImage render_sample(const std::string& domain, int cls, Rng& rng) {
  if (domain == "digits") return render_strokes(digit_glyph(cls), rng);
  if (domain == "letters") return render_strokes(letter_glyph(cls), rng);
  if (domain == "fashion") return render_silhouette(garment_polygon(cls), rng);
  if (domain == "textures") return render_texture(cls, rng);
  fail("unknown synthetic domain: ", domain);
}

}  // namespace

std::vector<std::string> synth_domains() {
  return {"digits", "letters", "fashion", "textures"};
}

LabeledDataset synth_dataset(const std::string& domain, int per_class,
                             std::uint64_t seed) {
  check(per_class >= 0, "synth_dataset: negative per_class");
  LabeledDataset ds;
  ds.images = Tensor(per_class * kNumClasses, 1, kImageSize, kImageSize);
  ds.labels.reserve(std::size_t(per_class) * kNumClasses);
  ds.source_id = domain;
  int row = 0;
  for (int cls = 0; cls < kNumClasses; ++cls) {
    for (int i = 0; i < per_class; ++i) {
      // Every sample owns an independent stream: datasets of different sizes
      // share their common prefix.
      Rng rng(derive_seed(seed, "synth/" + domain + "/" + std::to_string(cls) +
                                    "/" + std::to_string(i)));
      const Tensor img = normalize(render_sample(domain, cls, rng));
      ds.images.copy_item_from(img, 0, row++);
      ds.labels.push_back(cls);
    }
  }
  ds.validate();
  return ds;
}

}  // namespace mdi
