#pragma once

// Generated datasets, IDX ingestion, and out-of-distribution sources.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <iterator>
#include <numbers>
#include <string>
#include <vector>

#include "bhn/data.hpp"
#include "bhn/error.hpp"
#include "bhn/rng.hpp"

namespace bhn::harness {

/// Toy 1-D regression: x ~ U(0, 0.5),
/// y = x + 0.3 sin(2 pi (x + xi)) + 0.3 sin(4 pi (x + xi)) + xi, xi ~ N(0, noise_sd^2).
inline Dataset gen_toy_regression(std::size_t n, std::uint64_t seed, double noise_sd = 0.02) {
  if (n < 1) throw ConfigError("toy regression needs n >= 1");
  Rng rng(seed);
  Dataset d(1, 0);
  constexpr double pi = std::numbers::pi;
  for (std::size_t i = 0; i < n; ++i) {
    const double x = rng.uniform(0.0, 0.5);
    const double xi = noise_sd > 0 ? rng.normal(0.0, noise_sd) : 0.0;
    const double y = x + 0.3 * std::sin(2 * pi * (x + xi)) + 0.3 * std::sin(4 * pi * (x + xi)) + xi;
    d.add(std::vector<double>{x}, y);
  }
  return d;
}

/// y = x + eps, x ~ U(-1, 1), eps ~ N(0, sigma^2).
inline Dataset gen_overparam_linear(std::size_t n, double sigma, std::uint64_t seed) {
  if (n < 1) throw ConfigError("linear dataset needs n >= 1");
  if (!(sigma >= 0)) throw ConfigError("noise level must be non-negative");
  Rng rng(seed);
  Dataset d(1, 0);
  for (std::size_t i = 0; i < n; ++i) {
    const double x = rng.uniform(-1.0, 1.0);
    d.add(std::vector<double>{x}, x + (sigma > 0 ? rng.normal(0.0, sigma) : 0.0));
  }
  return d;
}

/// Synthetic stroke glyphs on a side x side canvas, pixel values in [0, 1].
/// Each class is a fixed set of line segments (drawn from `style_seed`);
/// examples jitter the endpoints, shift the glyph and add pixel noise.
struct GlyphSpec {
  std::size_t side = 10;
  std::size_t classes = 10;
  std::size_t strokes = 3;
  double endpoint_jitter = 0.5;
  double max_shift = 1.0;
  double pixel_noise = 0.15;
  double stroke_width = 0.55;
  std::uint64_t style_seed = 7;

  std::size_t dim() const { return side * side; }
  void validate() const {
    if (side < 4) throw ConfigError("glyph canvas must be at least 4 pixels wide");
    if (classes < 2) throw ConfigError("glyph data needs at least 2 classes");
    if (strokes < 1) throw ConfigError("glyphs need at least one stroke");
    if (!(pixel_noise >= 0 && endpoint_jitter >= 0 && max_shift >= 0 && stroke_width > 0))
      throw ConfigError("glyph noise parameters must be non-negative");
  }
};

namespace detail {
struct Segment {
  double x0, y0, x1, y1;
};

inline std::vector<std::vector<Segment>> glyph_styles(const GlyphSpec& s) {
  Rng rng(s.style_seed);
  const double lo = 1.5, hi = static_cast<double>(s.side) - 2.5;
  std::vector<std::vector<Segment>> out(s.classes);
  for (auto& g : out)
    for (std::size_t k = 0; k < s.strokes; ++k)
      g.push_back({rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi), rng.uniform(lo, hi)});
  return out;
}

inline double segment_distance(double px, double py, const Segment& s) {
  const double dx = s.x1 - s.x0, dy = s.y1 - s.y0;
  const double len2 = dx * dx + dy * dy;
  double t = len2 > 0 ? ((px - s.x0) * dx + (py - s.y0) * dy) / len2 : 0.0;
  t = std::clamp(t, 0.0, 1.0);
  return std::hypot(px - s.x0 - t * dx, py - s.y0 - t * dy);
}
}  // namespace detail

inline Dataset gen_glyphs(const GlyphSpec& spec, std::size_t n, std::uint64_t seed) {
  spec.validate();
  const auto styles = detail::glyph_styles(spec);
  Rng rng(seed);
  Dataset d(spec.dim(), spec.classes);
  std::vector<double> img(spec.dim());
  const double w2 = 2 * spec.stroke_width * spec.stroke_width;
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t c = rng.index(spec.classes);
    const double sx = rng.uniform(-spec.max_shift, spec.max_shift);
    const double sy = rng.uniform(-spec.max_shift, spec.max_shift);
    std::vector<detail::Segment> segs = styles[c];
    for (auto& s : segs) {
      s.x0 += sx + rng.normal(0.0, spec.endpoint_jitter);
      s.y0 += sy + rng.normal(0.0, spec.endpoint_jitter);
      s.x1 += sx + rng.normal(0.0, spec.endpoint_jitter);
      s.y1 += sy + rng.normal(0.0, spec.endpoint_jitter);
    }
    for (std::size_t r = 0; r < spec.side; ++r)
      for (std::size_t col = 0; col < spec.side; ++col) {
        double ink = 0;
        for (const auto& s : segs) {
          const double dist = detail::segment_distance(static_cast<double>(col), static_cast<double>(r), s);
          ink = std::max(ink, std::exp(-dist * dist / w2));
        }
        const double noise = spec.pixel_noise > 0 ? rng.normal(0.0, spec.pixel_noise) : 0.0;
        img[r * spec.side + col] = std::clamp(ink + noise, 0.0, 1.0);
      }
    d.add(img, static_cast<double>(c));
  }
  return d;
}

/// Out-of-distribution sources with `dim` pixels in [0, 1].
inline Dataset uniform_noise(std::size_t n, std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  Dataset d(dim, 0);
  std::vector<double> row(dim);
  for (std::size_t i = 0; i < n; ++i) {
    for (auto& v : row) v = rng.uniform();
    d.add(row, 0.0);
  }
  return d;
}

/// Per-pixel N(0.5, 1) clamped to [0, 1].
inline Dataset gaussian_noise(std::size_t n, std::size_t dim, std::uint64_t seed) {
  Rng rng(seed);
  Dataset d(dim, 0);
  std::vector<double> row(dim);
  for (std::size_t i = 0; i < n; ++i) {
    for (auto& v : row) v = std::clamp(rng.normal(0.5, 1.0), 0.0, 1.0);
    d.add(row, 0.0);
  }
  return d;
}

// ---- IDX files ---------------------------------------------------------

inline constexpr std::uint32_t kIdxImages = 0x00000803;
inline constexpr std::uint32_t kIdxLabels = 0x00000801;

namespace detail {
inline std::vector<unsigned char> read_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw DataError("cannot open '" + path + "'");
  return {std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>()};
}

inline std::uint32_t be32(const std::vector<unsigned char>& b, std::size_t off, const std::string& path) {
  if (off + 4 > b.size()) throw DataError("'" + path + "' is truncated in its header");
  return (std::uint32_t{b[off]} << 24) | (std::uint32_t{b[off + 1]} << 16) | (std::uint32_t{b[off + 2]} << 8) |
         std::uint32_t{b[off + 3]};
}

inline void put32(std::vector<unsigned char>& b, std::uint32_t v) {
  for (int s = 24; s >= 0; s -= 8) b.push_back(static_cast<unsigned char>(v >> s));
}

inline void write_file(const std::string& path, const std::vector<unsigned char>& b) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw DataError("cannot write '" + path + "'");
  out.write(reinterpret_cast<const char*>(b.data()), static_cast<std::streamsize>(b.size()));
}
}  // namespace detail

struct IdxImages {
  std::size_t count = 0, rows = 0, cols = 0;
  std::vector<double> pixels;  // count * rows * cols, scaled to [0, 1]
};

inline IdxImages read_idx_images(const std::string& path) {
  const auto b = detail::read_file(path);
  const auto magic = detail::be32(b, 0, path);
  if (magic != kIdxImages) throw DataError("'" + path + "' has bad IDX image magic");
  IdxImages im;
  im.count = detail::be32(b, 4, path);
  im.rows = detail::be32(b, 8, path);
  im.cols = detail::be32(b, 12, path);
  const std::size_t n = im.count * im.rows * im.cols;
  if (b.size() < 16 + n) throw DataError("'" + path + "' is truncated: expected " + std::to_string(n) + " pixels");
  im.pixels.resize(n);
  for (std::size_t i = 0; i < n; ++i) im.pixels[i] = static_cast<double>(b[16 + i]) / 255.0;
  return im;
}

inline std::vector<std::size_t> read_idx_labels(const std::string& path) {
  const auto b = detail::read_file(path);
  if (detail::be32(b, 0, path) != kIdxLabels) throw DataError("'" + path + "' has bad IDX label magic");
  const std::size_t n = detail::be32(b, 4, path);
  if (b.size() < 8 + n) throw DataError("'" + path + "' is truncated: expected " + std::to_string(n) + " labels");
  return {b.begin() + 8, b.begin() + 8 + static_cast<std::ptrdiff_t>(n)};
}

/// Images plus labels as a classification dataset; `classes` 0 means
/// one past the largest label.
inline Dataset load_idx(const std::string& images, const std::string& labels, std::size_t classes = 0) {
  const auto im = read_idx_images(images);
  const auto lab = read_idx_labels(labels);
  if (lab.size() != im.count)
    throw DataError("image file holds " + std::to_string(im.count) + " images but label file holds " +
                    std::to_string(lab.size()) + " labels");
  std::size_t top = 0;
  for (auto l : lab) top = std::max(top, l + 1);
  if (classes == 0) classes = top;
  if (top > classes) throw DataError("label " + std::to_string(top - 1) + " exceeds the class count");
  Dataset d(im.rows * im.cols, classes);
  for (std::size_t i = 0; i < im.count; ++i) d.add(im.pixels.data() + i * d.dim, static_cast<double>(lab[i]));
  return d;
}

/// Unlabelled images, e.g. an alternate OOD source.
inline Dataset load_idx_images(const std::string& images) {
  const auto im = read_idx_images(images);
  Dataset d(im.rows * im.cols, 0);
  for (std::size_t i = 0; i < im.count; ++i) d.add(im.pixels.data() + i * d.dim, 0.0);
  return d;
}

/// Writes pixels in [0, 1] rounded to bytes.
inline void write_idx_images(const std::string& path, const Dataset& d, std::size_t rows, std::size_t cols) {
  if (rows * cols != d.dim) throw DataError("image geometry does not match the dataset width");
  std::vector<unsigned char> b;
  detail::put32(b, kIdxImages);
  detail::put32(b, static_cast<std::uint32_t>(d.size()));
  detail::put32(b, static_cast<std::uint32_t>(rows));
  detail::put32(b, static_cast<std::uint32_t>(cols));
  for (double v : d.x) b.push_back(static_cast<unsigned char>(std::lround(std::clamp(v, 0.0, 1.0) * 255.0)));
  detail::write_file(path, b);
}

inline void write_idx_labels(const std::string& path, const Dataset& d) {
  std::vector<unsigned char> b;
  detail::put32(b, kIdxLabels);
  detail::put32(b, static_cast<std::uint32_t>(d.size()));
  for (std::size_t i = 0; i < d.size(); ++i) b.push_back(static_cast<unsigned char>(d.label(i)));
  detail::write_file(path, b);
}

/// Splits off one class. The kept rows are relabelled onto classes - 1
/// contiguous labels; the excluded rows keep their original label.
inline std::pair<Dataset, Dataset> split_by_class(const Dataset& d, std::size_t excluded) {
  if (d.classes < 3) throw ConfigError("excluding a class needs at least 3 classes");
  if (excluded >= d.classes) throw ConfigError("excluded class is out of range");
  Dataset keep(d.dim, d.classes - 1), drop(d.dim, d.classes);
  for (std::size_t i = 0; i < d.size(); ++i) {
    const std::size_t l = d.label(i);
    if (l == excluded)
      drop.add(d.row(i), d.y[i]);
    else
      keep.add(d.row(i), static_cast<double>(l < excluded ? l : l - 1));
  }
  return {std::move(keep), std::move(drop)};
}

}  // namespace bhn::harness
