#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <optional>
#include <string>
#include <vector>

#include "json.hpp"
#include "tfma/error.hpp"
#include "tfma/image.hpp"
#include "tfma/rng.hpp"

namespace tfma::synthdata {

using json = nlohmann::json;

enum class Family { background, ellipse, triangle, cross, crescent, lshape, ring, bar, star, blob, wedge, diamond, hourglass };

inline const std::array<const char*, 13>& family_names() {
  static const std::array<const char*, 13> names{"background", "ellipse", "triangle", "cross",  "crescent",
                                                 "lshape",     "ring",    "bar",      "star",   "blob",
                                                 "wedge",      "diamond", "hourglass"};
  return names;
}

inline std::string family_name(Family f) { return family_names()[static_cast<std::size_t>(f)]; }

inline Family family_from_name(const std::string& name) {
  const auto& names = family_names();
  for (std::size_t i = 0; i < names.size(); ++i)
    if (name == names[i]) return static_cast<Family>(i);
  throw DataError("unknown shape family '" + name + "'");
}

// ---------------------------------------------------------------------------
// Groups

enum class Group { many, medium, few };

inline const char* group_name(Group g) {
  switch (g) {
    case Group::many: return "many";
    case Group::medium: return "medium";
    default: return "few";
  }
}

struct GroupThresholds {
  std::size_t many_min = 200;
  std::size_t medium_min = 50;

  static GroupThresholds full_scale() { return {400, 100}; }

  void validate() const {
    if (!(many_min > medium_min && medium_min > 0)) throw ConfigError("group thresholds need many_min > medium_min > 0");
  }
};

/// Closed lower bounds: count >= many_min is Many, medium_min <= count < many_min is Medium.
inline Group group_of(std::size_t count, const GroupThresholds& t) {
  if (count >= t.many_min) return Group::many;
  if (count >= t.medium_min) return Group::medium;
  return Group::few;
}

// ---------------------------------------------------------------------------
// Configuration

struct SpriteClass {
  int id = 0;
  Family family = Family::background;
  double aspect = 1.0;
  double size_min = 0.0;  // sprite radius in pixels
  double size_max = 0.0;
  double speed_min = 0.0;  // pixels per frame
  double speed_max = 0.0;
  double texture_contrast = 0.0;
  bool is_unknown = false;
};

struct NoiseConfig {
  double blur_max = 1.5;
  double brightness = 0.25;
  double occlusion_prob = 0.3;
  double occlusion_max_area = 0.3;
  double camouflage_prob = 0.3;
  double camouflage_min = 0.1;
  double sensor_sigma = 0.03;
};

struct SynthConfig {
  std::size_t image_size = 48;
  std::size_t base_count = 300;
  double decay = 0.62;
  std::size_t min_count = 6;
  std::size_t known_sprite_classes = 10;
  std::size_t unknown_classes = 3;
  std::size_t unknown_count = 30;
  double train_ratio = 0.7;
  double max_displacement = 8.0;
  NoiseConfig noise;

  std::size_t closed_classes() const { return known_sprite_classes + 1; }
  std::size_t total_classes() const { return closed_classes() + unknown_classes; }

  void validate() const {
    if (image_size < 16) throw ConfigError("image_size must be at least 16");
    if (known_sprite_classes < 2 || known_sprite_classes > 10)
      throw ConfigError("need 2..10 sprite classes (3+ closed-set classes with background)");
    if (unknown_classes < 1 || unknown_classes > 3) throw ConfigError("need 1..3 unknown classes");
    if (!(decay > 0.0 && decay <= 1.0)) throw ConfigError("count decay must be in (0, 1]");
    if (!(train_ratio > 0.0 && train_ratio < 1.0)) throw ConfigError("train_ratio must be in (0, 1)");
    if (min_count < 6) throw ConfigError("class counts below 6 are not supported");
    if (unknown_count < min_count) throw ConfigError("unknown_count below the minimum class size");
    if (!(max_displacement > 0.0)) throw ConfigError("max_displacement must be positive");
  }
};

/// round(base * decay^j) clipped below at min_count.
inline std::size_t class_count(const SynthConfig& cfg, std::size_t j) {
  const double raw = std::round(static_cast<double>(cfg.base_count) * std::pow(cfg.decay, static_cast<double>(j)));
  return std::max(cfg.min_count, static_cast<std::size_t>(raw));
}

/// Class table: id 0 is background, then sprite classes, then unknown classes.
/// The last known class shares the ellipse family with class 1 at a different
/// aspect ratio (a fine-grained pair).
inline std::vector<SpriteClass> class_table(const SynthConfig& cfg) {
  static const std::array<SpriteClass, 10> known{{
      {1, Family::ellipse, 1.3, 6.5, 9.0, 0.5, 1.5, 0.5},
      {2, Family::triangle, 1.0, 8.0, 10.0, 2.5, 3.5, 0.5},
      {3, Family::cross, 1.0, 7.5, 10.0, 1.5, 2.5, 0.5},
      {4, Family::crescent, 1.0, 8.0, 10.0, 2.5, 3.5, 0.5},
      {5, Family::lshape, 1.0, 7.5, 10.0, 0.5, 1.5, 0.5},
      {6, Family::ring, 1.0, 7.5, 10.0, 1.5, 2.5, 0.5},
      {7, Family::bar, 1.0, 7.5, 10.0, 2.5, 3.5, 0.5},
      {8, Family::star, 1.0, 7.5, 10.0, 0.5, 1.5, 0.5},
      {9, Family::blob, 1.0, 6.5, 9.0, 1.5, 2.5, 0.5},
      {10, Family::ellipse, 2.2, 6.5, 9.0, 2.5, 3.5, 0.5},
  }};
  static const std::array<Family, 3> unknown{Family::wedge, Family::diamond, Family::hourglass};
  std::vector<SpriteClass> out;
  out.push_back(SpriteClass{});
  for (std::size_t j = 0; j < cfg.known_sprite_classes; ++j) {
    SpriteClass c = known[j];
    c.id = static_cast<int>(j + 1);
    out.push_back(c);
  }
  for (std::size_t u = 0; u < cfg.unknown_classes; ++u) {
    SpriteClass c{static_cast<int>(cfg.closed_classes() + u), unknown[u], 1.0, 7.5, 10.0, 0.5, 3.5, 0.5, true};
    out.push_back(c);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Per-sample records

struct Wave {
  double fx = 0, fy = 0, phase = 0, amplitude = 0;
};

struct BackgroundRecord {
  std::array<double, 3> base{};
  std::array<Wave, 3> waves{};
};

struct SpriteInstance {
  bool present = false;
  Family family = Family::background;
  double radius = 0;
  double aspect = 1;
  double angle = 0;
  std::array<double, 4> shape_params{};
  std::array<double, 3> x{};  // center per frame
  std::array<double, 3> y{};
  double vx = 0;
  double vy = 0;
  std::array<double, 3> color{};
  double texture_freq = 0;
  double texture_phase_u = 0;
  double texture_phase_v = 0;
  double texture_contrast = 0;
  double contrast = 1;  // camouflage: 1 = full contrast against the background
};

struct NoiseRecord {
  double blur_sigma = 0;
  double brightness = 0;
  bool occluded = false;
  std::size_t occ_x = 0, occ_y = 0, occ_w = 0, occ_h = 0;
  std::array<double, 3> occ_color{};
  std::uint64_t sensor_seed = 0;
};

enum class Split { train, test };

struct SampleRecord {
  std::string path;
  int label = 0;
  std::size_t index = 0;
  Split split = Split::test;
  bool balanced_test = false;
  bool is_unknown = false;
  BackgroundRecord background;
  SpriteInstance sprite;
  NoiseRecord noise;
};

struct ClassRecord {
  SpriteClass spec;
  std::size_t count = 0;
};

struct DatasetManifest {
  SynthConfig config;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::size_t balanced_per_class = 0;
  std::vector<ClassRecord> classes;
  std::vector<SampleRecord> samples;

  std::size_t closed_classes() const { return config.closed_classes(); }

  std::vector<std::size_t> split_counts(Split s) const {
    std::vector<std::size_t> n(classes.size(), 0);
    for (const auto& r : samples)
      if (r.split == s) ++n[static_cast<std::size_t>(r.label)];
    return n;
  }
  std::vector<std::size_t> train_counts() const { return split_counts(Split::train); }
  std::vector<std::size_t> test_counts() const { return split_counts(Split::test); }

  std::vector<std::size_t> indices(Split s, bool include_unknown = true) const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < samples.size(); ++i)
      if (samples[i].split == s && (include_unknown || !samples[i].is_unknown)) out.push_back(i);
    return out;
  }

  std::vector<std::size_t> balanced_indices() const {
    std::vector<std::size_t> out;
    for (std::size_t i = 0; i < samples.size(); ++i)
      if (samples[i].balanced_test) out.push_back(i);
    return out;
  }

  /// Hard checks on the data regime.
  void validate() const {
    for (const auto& r : samples) {
      if (r.label < 0 || static_cast<std::size_t>(r.label) >= classes.size()) throw DataError("label out of range");
      const bool unknown = classes[static_cast<std::size_t>(r.label)].spec.is_unknown;
      if (unknown != r.is_unknown) throw DataError("unknown flag disagrees with class table for " + r.path);
      if (r.is_unknown && r.split == Split::train) throw DataError("unknown-class sample tagged train: " + r.path);
      if (r.balanced_test && r.split != Split::test) throw DataError("balanced sample outside the test split");
    }
    const auto train = train_counts(), test = test_counts();
    for (std::size_t c = 0; c < classes.size(); ++c) {
      if (train[c] + test[c] != classes[c].count) throw DataError("split counts do not sum to class total");
    }
  }
};

// ---------------------------------------------------------------------------
// Shapes and rendering

/// Inside test in the sprite's unit frame (the silhouette fits the unit disk
/// before the aspect stretch).
inline bool inside_unit(Family f, double u, double v, const std::array<double, 4>& p) {
  const double r2 = u * u + v * v;
  const double r = std::sqrt(r2);
  const double phi = std::atan2(v, u);
  switch (f) {
    case Family::ellipse: return r2 <= 1.0;
    case Family::triangle: {
      // Equilateral triangle inscribed in the unit circle, apex up.
      const double s3 = std::sqrt(3.0);
      return v >= -0.5 && s3 * u + v <= 1.0 && -s3 * u + v <= 1.0;
    }
    case Family::cross: return (std::fabs(u) <= 0.3 && std::fabs(v) <= 1.0) || (std::fabs(v) <= 0.3 && std::fabs(u) <= 1.0);
    case Family::crescent: return r2 <= 1.0 && (u - 0.6) * (u - 0.6) + v * v > 0.7 * 0.7;
    case Family::lshape:
      return (u >= -0.8 && u <= -0.2 && v >= -0.9 && v <= 0.9) || (u >= -0.8 && u <= 0.8 && v >= 0.3 && v <= 0.9);
    case Family::ring: return r2 <= 1.0 && r2 >= 0.55 * 0.55;
    case Family::bar: return std::fabs(u) <= 1.0 && std::fabs(v) <= 0.28;
    case Family::star: return r <= 0.4 + 0.6 * std::pow(std::fabs(std::cos(2.5 * phi)), 3.0);
    case Family::blob: return r <= 0.75 * (1.0 + p[0] * std::cos(2.0 * phi + p[1]) + p[2] * std::cos(3.0 * phi + p[3]));
    case Family::wedge: return r2 <= 1.0 && std::fabs(phi) <= 0.6;
    case Family::diamond: return std::fabs(u) + std::fabs(v) <= 1.0;
    case Family::hourglass: return std::fabs(v) <= 1.0 && std::fabs(u) <= 0.15 + 0.75 * std::fabs(v);
    default: return false;
  }
}

inline constexpr int kSupersample = 4;

/// Half-width of the square that bounds the sprite.
inline double sprite_extent(const SpriteInstance& s) {
  return s.radius * std::sqrt(std::max(s.aspect, 1.0 / s.aspect)) + 1.0;
}

/// Fractional coverage of pixel (px, py) by the sprite at `frame`.
inline double sprite_coverage_at(const SpriteInstance& s, int frame, std::size_t px, std::size_t py) {
  const double ca = std::cos(s.angle), sa = std::sin(s.angle);
  const double sq = std::sqrt(s.aspect);
  int hits = 0;
  for (int sy = 0; sy < kSupersample; ++sy)
    for (int sx = 0; sx < kSupersample; ++sx) {
      const double dx = static_cast<double>(px) + (sx + 0.5) / kSupersample - 0.5 - s.x[frame];
      const double dy = static_cast<double>(py) + (sy + 0.5) / kSupersample - 0.5 - s.y[frame];
      const double u = (dx * ca + dy * sa) / s.radius;
      const double v = (-dx * sa + dy * ca) / s.radius;
      if (inside_unit(s.family, u / sq, v * sq, s.shape_params)) ++hits;
    }
  return hits / static_cast<double>(kSupersample * kSupersample);
}

/// Coverage raster (H*W, row-major) of the sprite at `frame`.
inline std::vector<double> sprite_coverage(const SpriteInstance& s, int frame, std::size_t size) {
  std::vector<double> cov(size * size, 0.0);
  if (!s.present) return cov;
  const double e = sprite_extent(s);
  const auto lo = [&](double c) { return static_cast<std::size_t>(std::clamp(std::floor(c - e), 0.0, double(size))); };
  const auto hi = [&](double c) { return static_cast<std::size_t>(std::clamp(std::ceil(c + e) + 1, 0.0, double(size))); };
  for (std::size_t y = lo(s.y[frame]); y < hi(s.y[frame]); ++y)
    for (std::size_t x = lo(s.x[frame]); x < hi(s.x[frame]); ++x) cov[y * size + x] = sprite_coverage_at(s, frame, x, y);
  return cov;
}

inline bool occluded_pixel(const NoiseRecord& n, std::size_t x, std::size_t y) {
  return n.occluded && x >= n.occ_x && x < n.occ_x + n.occ_w && y >= n.occ_y && y < n.occ_y + n.occ_h;
}

/// Pixels where the sprite covers at least half the pixel at `frame`,
/// optionally excluding pixels hidden by the occluder.
inline std::vector<std::uint8_t> sprite_mask(const SampleRecord& r, int frame, std::size_t size, bool visible_only) {
  const auto cov = sprite_coverage(r.sprite, frame, size);
  std::vector<std::uint8_t> mask(size * size, 0);
  for (std::size_t y = 0; y < size; ++y)
    for (std::size_t x = 0; x < size; ++x)
      mask[y * size + x] = cov[y * size + x] >= 0.5 && !(visible_only && occluded_pixel(r.noise, x, y));
  return mask;
}

namespace detail {

inline void gaussian_blur(std::vector<double>& plane, std::size_t size, double sigma) {
  if (sigma < 0.3) return;
  const int radius = static_cast<int>(std::ceil(3.0 * sigma));
  std::vector<double> k(2 * radius + 1);
  double total = 0;
  for (int i = -radius; i <= radius; ++i) total += k[i + radius] = std::exp(-0.5 * i * i / (sigma * sigma));
  for (double& w : k) w /= total;
  const int n = static_cast<int>(size);
  std::vector<double> tmp(plane.size());
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      double acc = 0;
      for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * plane[y * n + std::clamp(x + i, 0, n - 1)];
      tmp[y * n + x] = acc;
    }
  for (int y = 0; y < n; ++y)
    for (int x = 0; x < n; ++x) {
      double acc = 0;
      for (int i = -radius; i <= radius; ++i) acc += k[i + radius] * tmp[std::clamp(y + i, 0, n - 1) * n + x];
      plane[y * n + x] = acc;
    }
}

}  // namespace detail

inline double background_value(const BackgroundRecord& b, std::size_t c, double x, double y) {
  double v = b.base[c];
  for (const Wave& w : b.waves) v += w.amplitude * std::sin(w.fx * x + w.fy * y + w.phase);
  return v;
}

/// Renders the three frames of a sample. Fully determined by the record.
inline std::array<Image, 3> render_sequence(const SampleRecord& r, std::size_t size, double sensor_sigma) {
  std::array<Image, 3> frames;
  const SpriteInstance& s = r.sprite;
  for (int f = 0; f < 3; ++f) {
    std::array<std::vector<double>, 3> planes;
    for (std::size_t c = 0; c < 3; ++c) {
      planes[c].resize(size * size);
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x)
          planes[c][y * size + x] = background_value(r.background, c, double(x), double(y));
    }
    if (s.present) {
      const auto cov = sprite_coverage(s, f, size);
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x) {
          const double a = cov[y * size + x];
          if (a == 0.0) continue;
          // Texture lives in sprite-local pixel offsets so it moves rigidly.
          const double du = double(x) - s.x[f], dv = double(y) - s.y[f];
          const double t = std::sin(s.texture_freq * du + s.texture_phase_u) * std::sin(s.texture_freq * dv + s.texture_phase_v);
          for (std::size_t c = 0; c < 3; ++c) {
            double& p = planes[c][y * size + x];
            const double sprite_col = s.color[c] * (1.0 + s.texture_contrast * t);
            p += a * s.contrast * (sprite_col - p);
          }
        }
    }
    const NoiseRecord& n = r.noise;
    for (std::size_t c = 0; c < 3; ++c) {
      auto& plane = planes[c];
      for (std::size_t y = 0; y < size; ++y)
        for (std::size_t x = 0; x < size; ++x)
          if (occluded_pixel(n, x, y)) plane[y * size + x] = n.occ_color[c];
      for (double& v : plane) v *= 1.0 + n.brightness;
      detail::gaussian_blur(plane, size, n.blur_sigma);
    }
    Rng noise(derive_seed(n.sensor_seed, static_cast<std::uint64_t>(f)));
    Image img(size, size);
    for (std::size_t y = 0; y < size; ++y)
      for (std::size_t x = 0; x < size; ++x)
        for (std::size_t c = 0; c < 3; ++c)
          img.at(x, y, c) = quantize_unit(planes[c][y * size + x] + noise.normal(0.0, sensor_sigma));
    frames[f] = std::move(img);
  }
  return frames;
}

inline std::array<Image, 3> render_sequence(const SampleRecord& r, const SynthConfig& cfg) {
  return render_sequence(r, cfg.image_size, cfg.noise.sensor_sigma);
}

// ---------------------------------------------------------------------------
// Sampling

inline SampleRecord sample_record(const SynthConfig& cfg, const SpriteClass& cls, std::size_t index, std::uint64_t seed) {
  Rng rng(derive_seed(seed, static_cast<std::uint64_t>(cls.id) + 1, index));
  constexpr double two_pi = 2.0 * std::numbers::pi;
  const double size = static_cast<double>(cfg.image_size);
  SampleRecord r;
  r.label = cls.id;
  r.index = index;
  r.is_unknown = cls.is_unknown;
  r.path = "class_" + std::to_string(cls.id) + "/seq_" + std::to_string(index);

  const double gray = rng.uniform(0.25, 0.75);
  for (double& b : r.background.base) b = gray + rng.uniform(-0.08, 0.08);
  for (Wave& w : r.background.waves) w = {rng.uniform(-0.3, 0.3), rng.uniform(-0.3, 0.3), rng.uniform(0, two_pi), rng.uniform(0.03, 0.1)};

  SpriteInstance& s = r.sprite;
  if (cls.family != Family::background) {
    s.present = true;
    s.family = cls.family;
    s.radius = rng.uniform(cls.size_min, cls.size_max);
    s.aspect = cls.aspect * rng.uniform(0.92, 1.08);
    s.angle = rng.uniform(0, two_pi);
    s.shape_params = {rng.uniform(0.1, 0.25), rng.uniform(0, two_pi), rng.uniform(0.1, 0.25), rng.uniform(0, two_pi)};
    const double speed = std::min(rng.uniform(cls.speed_min, cls.speed_max), cfg.max_displacement);
    const double heading = rng.uniform(0, two_pi);
    s.vx = speed * std::cos(heading);
    s.vy = speed * std::sin(heading);
    const double margin = sprite_extent(s);
    auto place = [&](double v) {
      const double lo = margin + std::fabs(v), hi = size - margin - std::fabs(v);
      return lo < hi ? rng.uniform(lo, hi) : 0.5 * size;
    };
    const double mx = place(s.vx), my = place(s.vy);
    for (int f = 0; f < 3; ++f) {
      s.x[f] = mx + (f - 1) * s.vx;
      s.y[f] = my + (f - 1) * s.vy;
    }
    for (double& c : s.color) c = rng.uniform(0.1, 0.9);
    s.texture_freq = rng.uniform(0.35, 0.7);
    s.texture_phase_u = rng.uniform(0, two_pi);
    s.texture_phase_v = rng.uniform(0, two_pi);
    s.texture_contrast = cls.texture_contrast;
    s.contrast = rng.bernoulli(cfg.noise.camouflage_prob) ? rng.uniform(cfg.noise.camouflage_min, 0.4)
                                                          : rng.uniform(0.7, 1.0);
  }

  NoiseRecord& n = r.noise;
  n.blur_sigma = rng.uniform(0.0, cfg.noise.blur_max);
  n.brightness = rng.uniform(-cfg.noise.brightness, cfg.noise.brightness);
  if (rng.bernoulli(cfg.noise.occlusion_prob)) {
    // The rectangle hides part of the subject: its area is at most
    // occlusion_max_area of the sprite's pixel area, centred inside the
    // sprite's bounding square. Background samples use a nominal sprite.
    double area = std::numbers::pi * 8.0 * 8.0, cx = rng.uniform(8.0, size - 8.0), cy = rng.uniform(8.0, size - 8.0);
    if (s.present) {
      const auto mask = sprite_mask(r, 1, cfg.image_size, false);
      area = static_cast<double>(std::count(mask.begin(), mask.end(), std::uint8_t{1}));
      const double half = sprite_extent(s);
      cx = s.x[1] + rng.uniform(-half, half);
      cy = s.y[1] + rng.uniform(-half, half);
    }
    const double budget = rng.uniform(0.3, 1.0) * cfg.noise.occlusion_max_area * area;
    const double ratio = std::exp(rng.uniform(std::log(0.33), std::log(3.0)));
    const double w = std::clamp(std::floor(std::sqrt(budget * ratio)), 1.0, size);
    const double h = std::clamp(std::floor(budget / w), 1.0, size);
    n.occluded = true;
    n.occ_w = static_cast<std::size_t>(w);
    n.occ_h = static_cast<std::size_t>(h);
    n.occ_x = static_cast<std::size_t>(std::clamp(std::round(cx - 0.5 * w), 0.0, size - w));
    n.occ_y = static_cast<std::size_t>(std::clamp(std::round(cy - 0.5 * h), 0.0, size - h));
    for (double& c : n.occ_color) c = rng.uniform(0.1, 0.9);
  }
  n.sensor_seed = rng.next_u64();
  return r;
}

/// Stratified split: floor(ratio * n) train per closed-set class (at least 1),
/// the rest test. Unknown classes are entirely test.
inline void split(DatasetManifest& m, double ratio, std::uint64_t seed) {
  for (const auto& cls : m.classes) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < m.samples.size(); ++i)
      if (m.samples[i].label == cls.spec.id) members.push_back(i);
    if (members.empty()) throw DataError("class " + std::to_string(cls.spec.id) + " is empty");
    if (cls.spec.is_unknown) {
      for (std::size_t i : members) m.samples[i].split = Split::test;
      continue;
    }
    if (members.size() < 2) throw DataError("class " + std::to_string(cls.spec.id) + " needs at least 2 samples");
    Rng rng(derive_seed(seed, 0x5b117, static_cast<std::uint64_t>(cls.spec.id)));
    rng.shuffle(std::span<std::size_t>(members));
    const auto n_train = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(ratio * double(members.size()))));
    for (std::size_t k = 0; k < members.size(); ++k) m.samples[members[k]].split = k < n_train ? Split::train : Split::test;
  }
}

/// Smallest test count among Few classes (grouped by train counts), or among
/// all classes when no class is Few.
inline std::size_t default_balanced_per_class(const DatasetManifest& m, const GroupThresholds& t) {
  const auto train = m.train_counts(), test = m.test_counts();
  std::size_t best = SIZE_MAX, overall = SIZE_MAX;
  for (std::size_t c = 0; c < m.classes.size(); ++c) {
    overall = std::min(overall, test[c]);
    if (!m.classes[c].spec.is_unknown && group_of(train[c], t) == Group::few) best = std::min(best, test[c]);
  }
  return best == SIZE_MAX ? overall : best;
}

/// Exactly `per_class_n` test samples from every class, sampled without
/// replacement. Returned sorted by sample index.
inline std::vector<std::size_t> balanced_test_subset(const DatasetManifest& m, std::size_t per_class_n, std::uint64_t seed) {
  if (per_class_n == 0) throw ConfigError("balanced subset size must be positive");
  std::vector<std::size_t> out;
  for (const auto& cls : m.classes) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < m.samples.size(); ++i)
      if (m.samples[i].label == cls.spec.id && m.samples[i].split == Split::test) members.push_back(i);
    if (members.size() < per_class_n) {
      throw ConfigError("balanced subset of " + std::to_string(per_class_n) + " per class exceeds the " +
                        std::to_string(members.size()) + " test samples of class " + std::to_string(cls.spec.id));
    }
    Rng rng(derive_seed(seed, 0xba1a, static_cast<std::uint64_t>(cls.spec.id)));
    rng.shuffle(std::span<std::size_t>(members));
    out.insert(out.end(), members.begin(), members.begin() + static_cast<std::ptrdiff_t>(per_class_n));
  }
  std::sort(out.begin(), out.end());
  return out;
}

// ---------------------------------------------------------------------------
// JSON

inline json to_json(const SynthConfig& c) {
  return {{"image_size", c.image_size},
          {"base_count", c.base_count},
          {"decay", c.decay},
          {"min_count", c.min_count},
          {"known_sprite_classes", c.known_sprite_classes},
          {"unknown_classes", c.unknown_classes},
          {"unknown_count", c.unknown_count},
          {"train_ratio", c.train_ratio},
          {"max_displacement", c.max_displacement},
          {"noise",
           {{"blur_max", c.noise.blur_max},
            {"brightness", c.noise.brightness},
            {"occlusion_prob", c.noise.occlusion_prob},
            {"occlusion_max_area", c.noise.occlusion_max_area},
            {"camouflage_prob", c.noise.camouflage_prob},
            {"camouflage_min", c.noise.camouflage_min},
            {"sensor_sigma", c.noise.sensor_sigma}}}};
}

inline SynthConfig config_from_json(const json& j) {
  SynthConfig c;
  c.image_size = j.at("image_size");
  c.base_count = j.at("base_count");
  c.decay = j.at("decay");
  c.min_count = j.at("min_count");
  c.known_sprite_classes = j.at("known_sprite_classes");
  c.unknown_classes = j.at("unknown_classes");
  c.unknown_count = j.at("unknown_count");
  c.train_ratio = j.at("train_ratio");
  c.max_displacement = j.at("max_displacement");
  const json& n = j.at("noise");
  c.noise = {n.at("blur_max"),       n.at("brightness"),      n.at("occlusion_prob"), n.at("occlusion_max_area"),
             n.at("camouflage_prob"), n.at("camouflage_min"), n.at("sensor_sigma")};
  return c;
}

inline std::string config_hash(const SynthConfig& c) { return hex64(fnv1a(to_json(c).dump())); }

inline json to_json(const SampleRecord& r) {
  const SpriteInstance& s = r.sprite;
  const NoiseRecord& n = r.noise;
  json waves = json::array();
  for (const Wave& w : r.background.waves) waves.push_back({w.fx, w.fy, w.phase, w.amplitude});
  json out = {{"path", r.path},
              {"label", r.label},
              {"index", r.index},
              {"split", r.split == Split::train ? "train" : "test"},
              {"balanced_test", r.balanced_test},
              {"is_unknown", r.is_unknown},
              {"background", {{"base", r.background.base}, {"waves", waves}}},
              {"noise",
               {{"blur_sigma", n.blur_sigma},
                {"brightness", n.brightness},
                {"occluded", n.occluded},
                {"occlusion", {n.occ_x, n.occ_y, n.occ_w, n.occ_h}},
                {"occluder_color", n.occ_color},
                {"sensor_seed", n.sensor_seed}}}};
  if (s.present) {
    out["motion"] = {{"family", family_name(s.family)},
                     {"radius", s.radius},
                     {"aspect", s.aspect},
                     {"angle", s.angle},
                     {"shape_params", s.shape_params},
                     {"x", s.x},
                     {"y", s.y},
                     {"velocity", {s.vx, s.vy}},
                     {"color", s.color},
                     {"texture", {s.texture_freq, s.texture_phase_u, s.texture_phase_v, s.texture_contrast}},
                     {"contrast", s.contrast}};
  }
  return out;
}

inline SampleRecord record_from_json(const json& j) {
  SampleRecord r;
  r.path = j.at("path");
  r.label = j.at("label");
  r.index = j.at("index");
  r.split = j.at("split") == "train" ? Split::train : Split::test;
  r.balanced_test = j.at("balanced_test");
  r.is_unknown = j.at("is_unknown");
  r.background.base = j.at("background").at("base");
  const json& waves = j.at("background").at("waves");
  if (waves.size() != r.background.waves.size()) throw DataError("background record has wrong wave count");
  for (std::size_t i = 0; i < waves.size(); ++i) r.background.waves[i] = {waves[i][0], waves[i][1], waves[i][2], waves[i][3]};
  const json& n = j.at("noise");
  r.noise.blur_sigma = n.at("blur_sigma");
  r.noise.brightness = n.at("brightness");
  r.noise.occluded = n.at("occluded");
  const auto occ = n.at("occlusion").get<std::array<std::size_t, 4>>();
  r.noise.occ_x = occ[0];
  r.noise.occ_y = occ[1];
  r.noise.occ_w = occ[2];
  r.noise.occ_h = occ[3];
  r.noise.occ_color = n.at("occluder_color");
  r.noise.sensor_seed = n.at("sensor_seed");
  if (j.contains("motion")) {
    const json& m = j.at("motion");
    SpriteInstance& s = r.sprite;
    s.present = true;
    s.family = family_from_name(m.at("family"));
    s.radius = m.at("radius");
    s.aspect = m.at("aspect");
    s.angle = m.at("angle");
    s.shape_params = m.at("shape_params");
    s.x = m.at("x");
    s.y = m.at("y");
    s.vx = m.at("velocity")[0];
    s.vy = m.at("velocity")[1];
    s.color = m.at("color");
    const auto tex = m.at("texture").get<std::array<double, 4>>();
    s.texture_freq = tex[0];
    s.texture_phase_u = tex[1];
    s.texture_phase_v = tex[2];
    s.texture_contrast = tex[3];
    s.contrast = m.at("contrast");
  }
  return r;
}

inline json to_json(const DatasetManifest& m) {
  json classes = json::array();
  const auto train = m.train_counts(), test = m.test_counts();
  for (std::size_t c = 0; c < m.classes.size(); ++c) {
    const SpriteClass& s = m.classes[c].spec;
    classes.push_back({{"id", s.id},
                       {"family", family_name(s.family)},
                       {"aspect", s.aspect},
                       {"size_range", {s.size_min, s.size_max}},
                       {"speed_range", {s.speed_min, s.speed_max}},
                       {"texture_contrast", s.texture_contrast},
                       {"is_unknown", s.is_unknown},
                       {"count", m.classes[c].count},
                       {"train", train[c]},
                       {"test", test[c]}});
  }
  json samples = json::array();
  for (const auto& r : m.samples) samples.push_back(to_json(r));
  return {{"seed", m.seed},
          {"config_hash", m.config_hash},
          {"config", to_json(m.config)},
          {"balanced_per_class", m.balanced_per_class},
          {"classes", classes},
          {"samples", samples}};
}

inline DatasetManifest manifest_from_json(const json& j) {
  DatasetManifest m;
  m.seed = j.at("seed");
  m.config = config_from_json(j.at("config"));
  m.config_hash = j.at("config_hash");
  if (m.config_hash != config_hash(m.config)) throw DataError("manifest config hash does not match its config");
  m.balanced_per_class = j.at("balanced_per_class");
  for (const json& c : j.at("classes")) {
    SpriteClass s;
    s.id = c.at("id");
    s.family = family_from_name(c.at("family"));
    s.aspect = c.at("aspect");
    s.size_min = c.at("size_range")[0];
    s.size_max = c.at("size_range")[1];
    s.speed_min = c.at("speed_range")[0];
    s.speed_max = c.at("speed_range")[1];
    s.texture_contrast = c.at("texture_contrast");
    s.is_unknown = c.at("is_unknown");
    m.classes.push_back({s, c.at("count")});
  }
  for (const json& r : j.at("samples")) m.samples.push_back(record_from_json(r));
  m.validate();
  return m;
}

inline std::string manifest_text(const DatasetManifest& m) { return to_json(m).dump(1); }
inline std::string manifest_hash(const DatasetManifest& m) { return hex64(fnv1a(manifest_text(m))); }

// ---------------------------------------------------------------------------
// Generation and I/O

/// All sample records, split tags and balanced-test flags for (config, seed).
inline DatasetManifest plan_dataset(const SynthConfig& cfg, std::uint64_t seed, const GroupThresholds& groups = {}) {
  cfg.validate();
  groups.validate();
  DatasetManifest m;
  m.config = cfg;
  m.seed = seed;
  m.config_hash = config_hash(cfg);
  for (const SpriteClass& cls : class_table(cfg)) {
    const std::size_t n = cls.is_unknown ? cfg.unknown_count : class_count(cfg, static_cast<std::size_t>(cls.id));
    m.classes.push_back({cls, n});
    for (std::size_t i = 0; i < n; ++i) m.samples.push_back(sample_record(cfg, cls, i, seed));
  }
  split(m, cfg.train_ratio, seed);
  m.balanced_per_class = default_balanced_per_class(m, groups);
  for (std::size_t i : balanced_test_subset(m, m.balanced_per_class, seed)) m.samples[i].balanced_test = true;
  m.validate();
  return m;
}

inline std::string frame_path(const std::string& root, const SampleRecord& r, int frame) {
  return (std::filesystem::path(root) / r.path / ("frame_" + std::to_string(frame) + ".ppm")).string();
}

inline void write_dataset(const DatasetManifest& m, const std::string& root) {
  namespace fs = std::filesystem;
  std::error_code ec;
  for (const auto& r : m.samples) {
    fs::create_directories(fs::path(root) / r.path, ec);
    if (ec) throw DataError("cannot create " + (fs::path(root) / r.path).string() + ": " + ec.message());
    const auto frames = render_sequence(r, m.config);
    for (int f = 0; f < 3; ++f) write_ppm(frame_path(root, r, f), frames[f]);
  }
  write_file((fs::path(root) / "manifest.json").string(), manifest_text(m));
}

inline DatasetManifest generate(const SynthConfig& cfg, std::uint64_t seed, const std::string& root,
                                const GroupThresholds& groups = {}) {
  DatasetManifest m = plan_dataset(cfg, seed, groups);
  write_dataset(m, root);
  return m;
}

inline DatasetManifest read_manifest(const std::string& root) {
  const std::string path = (std::filesystem::path(root) / "manifest.json").string();
  json j;
  try {
    j = json::parse(read_file(path));
    return manifest_from_json(j);
  } catch (const json::exception& e) {
    throw DataError("malformed manifest " + path + ": " + e.what());
  }
}

inline std::array<Image, 3> read_frames(const std::string& root, const SampleRecord& r) {
  std::array<Image, 3> out;
  for (int f = 0; f < 3; ++f) out[f] = read_ppm(frame_path(root, r, f));
  return out;
}

}  // namespace tfma::synthdata
