#pragma once

#include <algorithm>
#include <array>
#include <bit>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "tfma/error.hpp"
#include "tfma/image.hpp"
#include "tfma/synthdata.hpp"
#include "tfma/tensor.hpp"

namespace tfma::flow {

/// [2, H, W]: channel 0 horizontal, channel 1 vertical displacement in pixels.
using FlowField = Tensor;

struct FlowConfig {
  std::size_t levels = 3;
  int block = 8;
  int radius = 3;
  double max_displacement = 8.0;

  void validate() const {
    if (levels < 1) throw ConfigError("flow needs at least one pyramid level");
    if (block < 2 || radius < 1) throw ConfigError("flow block must be >= 2 and radius >= 1");
    if (!(max_displacement > 0.0)) throw ConfigError("max_displacement must be positive");
  }

  std::size_t min_size() const { return std::max<std::size_t>(16, std::size_t{2} << (levels - 1)); }
};

struct Plane {
  int width = 0;
  int height = 0;
  std::vector<double> v;

  Plane() = default;
  Plane(int w, int h) : width(w), height(h), v(static_cast<std::size_t>(w) * h, 0.0) {}

  double operator()(int x, int y) const {
    return v[static_cast<std::size_t>(std::clamp(y, 0, height - 1)) * width + std::clamp(x, 0, width - 1)];
  }
  double& at(int x, int y) { return v[static_cast<std::size_t>(y) * width + x]; }
};

/// Luma (0.299, 0.587, 0.114) of a [3, H, W] frame; single-channel frames pass through.
inline Plane to_gray(const Tensor& frame) {
  if (frame.rank() != 3 || (frame.dim(0) != 3 && frame.dim(0) != 1)) {
    throw ShapeError("flow expects [3,H,W] or [1,H,W] frames, got " + shape_str(frame.shape()));
  }
  const int h = static_cast<int>(frame.dim(1)), w = static_cast<int>(frame.dim(2));
  const std::size_t hw = static_cast<std::size_t>(h) * w;
  Plane p(w, h);
  for (std::size_t i = 0; i < hw; ++i) {
    p.v[i] = frame.dim(0) == 1 ? frame[i] : 0.299 * frame[i] + 0.587 * frame[hw + i] + 0.114 * frame[2 * hw + i];
  }
  return p;
}

inline Plane downsample(const Plane& p) {
  Plane out(p.width / 2, p.height / 2);
  for (int y = 0; y < out.height; ++y)
    for (int x = 0; x < out.width; ++x)
      out.at(x, y) = 0.25 * (p(2 * x, 2 * y) + p(2 * x + 1, 2 * y) + p(2 * x, 2 * y + 1) + p(2 * x + 1, 2 * y + 1));
  return out;
}

namespace detail {

struct Offset {
  int dx, dy;
};

/// Search offsets ordered by distance from zero so ties favor small motion.
inline std::vector<Offset> search_offsets(int radius) {
  std::vector<Offset> out;
  for (int dy = -radius; dy <= radius; ++dy)
    for (int dx = -radius; dx <= radius; ++dx) out.push_back({dx, dy});
  std::stable_sort(out.begin(), out.end(),
                   [](Offset a, Offset b) { return a.dx * a.dx + a.dy * a.dy < b.dx * b.dx + b.dy * b.dy; });
  return out;
}

/// 3x3 median filter with replicated borders.
inline Plane median3(const Plane& p) {
  Plane out(p.width, p.height);
  std::array<double, 9> w;
  for (int y = 0; y < p.height; ++y)
    for (int x = 0; x < p.width; ++x) {
      std::size_t k = 0;
      for (int dy = -1; dy <= 1; ++dy)
        for (int dx = -1; dx <= 1; ++dx) w[k++] = p(x + dx, y + dy);
      std::nth_element(w.begin(), w.begin() + 4, w.end());
      out.at(x, y) = w[4];
    }
  return out;
}

/// Block matching around zero and around the current estimate, followed by
/// one least-squares gradient step, for every pixel of one pyramid level.
inline void refine_level(const Plane& a, const Plane& b, Plane& u, Plane& v, const FlowConfig& cfg) {
  const auto offsets = search_offsets(cfg.radius);
  const int lo = -cfg.block / 2, hi = lo + cfg.block;
  // Center-weighted block: pixels near the block edge, which are most often
  // across a motion boundary, count less.
  std::vector<double> weight(static_cast<std::size_t>(cfg.block * cfg.block));
  const double sigma = 0.35 * cfg.block;
  for (int oy = lo; oy < hi; ++oy)
    for (int ox = lo; ox < hi; ++ox) {
      const double cx = ox + 0.5, cy = oy + 0.5;
      weight[static_cast<std::size_t>((oy - lo) * cfg.block + (ox - lo))] =
          std::exp(-(cx * cx + cy * cy) / (2 * sigma * sigma));
    }
  Plane nu(a.width, a.height), nv(a.width, a.height);
  for (int y = 0; y < a.height; ++y)
    for (int x = 0; x < a.width; ++x) {
      // Searching around zero as well keeps a coarse level misled by
      // aliasing from hiding small true motion.
      const int bx = static_cast<int>(std::lround(u(x, y))), by = static_cast<int>(std::lround(v(x, y)));
      double best = INFINITY;
      int ix = 0, iy = 0;
      for (const auto [cx, cy] : {std::pair{0, 0}, std::pair{bx, by}}) {
        if ((cx != 0 || cy != 0) && bx == 0 && by == 0) continue;
        for (const Offset& o : offsets) {
          const int tx = cx + o.dx, ty = cy + o.dy;
          double ssd = 0;
          const double* wp = weight.data();
          for (int oy = lo; oy < hi && ssd < best; ++oy)
            for (int ox = lo; ox < hi; ++ox) {
              const double d = a(x + ox, y + oy) - b(x + ox + tx, y + oy + ty);
              ssd += *wp++ * d * d;
            }
          if (ssd < best) {
            best = ssd;
            ix = tx;
            iy = ty;
          }
        }
      }
      double gxx = 0, gxy = 0, gyy = 0, bxt = 0, byt = 0;
      const double* wp = weight.data();
      for (int oy = lo; oy < hi; ++oy)
        for (int ox = lo; ox < hi; ++ox) {
          const double k = *wp++;
          const int qx = x + ox + ix, qy = y + oy + iy;
          const double gx = 0.5 * (b(qx + 1, qy) - b(qx - 1, qy));
          const double gy = 0.5 * (b(qx, qy + 1) - b(qx, qy - 1));
          const double it = b(qx, qy) - a(x + ox, y + oy);
          gxx += k * gx * gx;
          gxy += k * gx * gy;
          gyy += k * gy * gy;
          bxt += k * gx * it;
          byt += k * gy * it;
        }
      const double det = gxx * gyy - gxy * gxy;
      const double trace = gxx + gyy;
      double du = 0, dv = 0;
      if (det > 1e-3 * trace * trace && det > 1e-12) {
        du = std::clamp(-(gyy * bxt - gxy * byt) / det, -1.0, 1.0);
        dv = std::clamp(-(gxx * byt - gxy * bxt) / det, -1.0, 1.0);
      }
      nu.at(x, y) = ix + du;
      nv.at(x, y) = iy + dv;
    }
  u = median3(nu);
  v = median3(nv);
}

}  // namespace detail

/// Coarse-to-fine block matching with a least-squares refinement per level.
inline FlowField estimate_flow(const Tensor& frame_a, const Tensor& frame_b, const FlowConfig& cfg = {}) {
  cfg.validate();
  if (frame_a.shape() != frame_b.shape()) {
    throw ShapeError("flow frames differ in shape: " + shape_str(frame_a.shape()) + " vs " + shape_str(frame_b.shape()));
  }
  if (frame_a.rank() != 3) throw ShapeError("flow expects [C,H,W] frames");
  const std::size_t h = frame_a.dim(1), w = frame_a.dim(2);
  if (h < cfg.min_size() || w < cfg.min_size()) {
    throw ShapeError("frames of " + std::to_string(h) + "x" + std::to_string(w) + " are too small for a " +
                     std::to_string(cfg.levels) + "-level pyramid");
  }
  std::vector<Plane> pa{to_gray(frame_a)}, pb{to_gray(frame_b)};
  for (std::size_t l = 1; l < cfg.levels; ++l) {
    pa.push_back(downsample(pa.back()));
    pb.push_back(downsample(pb.back()));
  }
  Plane u(pa.back().width, pa.back().height), v(pa.back().width, pa.back().height);
  for (std::size_t l = cfg.levels; l-- > 0;) {
    if (u.width != pa[l].width || u.height != pa[l].height) {
      Plane uu(pa[l].width, pa[l].height), vv(pa[l].width, pa[l].height);
      for (int y = 0; y < uu.height; ++y)
        for (int x = 0; x < uu.width; ++x) {
          // Bilinear, with coarse pixel centers at (2i + 0.5, 2j + 0.5).
          const double fx = 0.5 * x - 0.25, fy = 0.5 * y - 0.25;
          const int x0 = static_cast<int>(std::floor(fx)), y0 = static_cast<int>(std::floor(fy));
          const double ax = fx - x0, ay = fy - y0;
          auto lerp = [&](const Plane& p) {
            return (1 - ay) * ((1 - ax) * p(x0, y0) + ax * p(x0 + 1, y0)) + ay * ((1 - ax) * p(x0, y0 + 1) + ax * p(x0 + 1, y0 + 1));
          };
          uu.at(x, y) = 2.0 * lerp(u);
          vv.at(x, y) = 2.0 * lerp(v);
        }
      u = std::move(uu);
      v = std::move(vv);
    }
    detail::refine_level(pa[l], pb[l], u, v, cfg);
  }
  FlowField out(Shape{2, h, w});
  const std::size_t hw = h * w;
  for (std::size_t i = 0; i < hw; ++i) {
    out[i] = std::clamp(u.v[i], -cfg.max_displacement, cfg.max_displacement);
    out[hw + i] = std::clamp(v.v[i], -cfg.max_displacement, cfg.max_displacement);
  }
  return out;
}

/// concat(frame, of1 / max_displacement, of2 / max_displacement) along channels.
inline Tensor build_input(const Tensor& frame, const FlowField& of1, const FlowField& of2, double max_displacement) {
  if (frame.rank() != 3) throw ShapeError("build_input expects a [C,H,W] frame");
  const std::size_t c = frame.dim(0), h = frame.dim(1), w = frame.dim(2);
  for (const FlowField* f : {&of1, &of2})
    if (f->shape() != Shape{2, h, w}) {
      throw ShapeError("flow field " + shape_str(f->shape()) + " does not match frame " + shape_str(frame.shape()));
    }
  Tensor out(Shape{c + 4, h, w});
  auto dst = out.data();
  std::copy(frame.data().begin(), frame.data().end(), dst.begin());
  const double scale = 1.0 / max_displacement;
  const std::size_t n = 2 * h * w;
  for (std::size_t i = 0; i < n; ++i) {
    dst[c * h * w + i] = of1[i] * scale;
    dst[c * h * w + n + i] = of2[i] * scale;
  }
  return out;
}

/// Mirror along the width axis.
inline Tensor hflip(const Tensor& t) {
  if (t.rank() != 3) throw ShapeError("hflip expects [C,H,W]");
  const std::size_t c = t.dim(0), h = t.dim(1), w = t.dim(2);
  Tensor out(t.shape());
  for (std::size_t k = 0; k < c * h; ++k)
    for (std::size_t x = 0; x < w; ++x) out[k * w + x] = t[k * w + (w - 1 - x)];
  return out;
}

/// Mirrored flow with the horizontal component negated.
inline FlowField hflip_flow(const FlowField& f) {
  FlowField out = hflip(f);
  const std::size_t hw = f.dim(1) * f.dim(2);
  for (std::size_t i = 0; i < hw; ++i) out[i] = -out[i];
  return out;
}

/// Flips an assembled input (image channels then two flow fields) so frames
/// and flows stay consistent.
inline Tensor hflip_input(const Tensor& x, std::size_t image_channels) {
  if (x.rank() != 3) throw ShapeError("hflip_input expects [C,H,W]");
  Tensor out = hflip(x);
  if (x.dim(0) == image_channels) return out;
  if (x.dim(0) != image_channels + 4) throw ShapeError("input has neither image-only nor image+flow channels");
  const std::size_t hw = x.dim(1) * x.dim(2);
  for (std::size_t ch : {image_channels, image_channels + 2})
    for (std::size_t i = 0; i < hw; ++i) out[ch * hw + i] = -out[ch * hw + i];
  return out;
}

/// Analytic flow of the sprite between frames pair-1 and pair (pair in {1, 2}):
/// the frame velocity on visible sprite pixels, zero elsewhere.
inline FlowField ground_truth_flow(const synthdata::SampleRecord& r, int pair, std::size_t size) {
  if (pair != 1 && pair != 2) throw ConfigError("flow pair must be 1 or 2");
  FlowField out(Shape{2, size, size});
  if (!r.sprite.present) {
    if (r.label != 0) throw DataError("sample " + r.path + " lacks motion metadata");
    return out;
  }
  const int from = pair - 1;
  const double dx = r.sprite.x[from + 1] - r.sprite.x[from];
  const double dy = r.sprite.y[from + 1] - r.sprite.y[from];
  const auto mask = synthdata::sprite_mask(r, from, size, true);
  const std::size_t hw = size * size;
  for (std::size_t i = 0; i < hw; ++i)
    if (mask[i]) {
      out[i] = dx;
      out[hw + i] = dy;
    }
  return out;
}

// ---------------------------------------------------------------------------
// Disk cache: 8-byte header (H, W as u32 little-endian) then 2*H*W float32
// little-endian values, channel-major.

inline std::string encode_flow(const FlowField& f) {
  std::string out;
  auto put32 = [&](std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
  };
  put32(static_cast<std::uint32_t>(f.dim(1)));
  put32(static_cast<std::uint32_t>(f.dim(2)));
  for (double v : f.data()) put32(std::bit_cast<std::uint32_t>(static_cast<float>(v)));
  return out;
}

inline FlowField decode_flow(const std::string& bytes) {
  auto get32 = [&](std::size_t pos) {
    std::uint32_t v = 0;
    for (int i = 0; i < 4; ++i) v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
    return v;
  };
  if (bytes.size() < 8) throw DataError("flow file too short");
  const std::size_t h = get32(0), w = get32(4);
  if (h == 0 || w == 0 || bytes.size() != 8 + 8 * h * w) throw DataError("flow file size does not match its header");
  FlowField f(Shape{2, h, w});
  for (std::size_t i = 0; i < 2 * h * w; ++i) f[i] = static_cast<double>(std::bit_cast<float>(get32(8 + 4 * i)));
  return f;
}

/// Rounds a field through float32 so fresh and cached results are identical.
inline FlowField as_stored(const FlowField& f) { return decode_flow(encode_flow(f)); }

inline std::string flow_cache_key(const Image& a, const Image& b, const FlowConfig& cfg) {
  std::uint64_t h = fnv1a(std::string_view(reinterpret_cast<const char*>(a.pixels.data()), a.pixels.size()));
  h = fnv1a(std::string_view(reinterpret_cast<const char*>(b.pixels.data()), b.pixels.size()), h);
  const std::string params = std::to_string(cfg.levels) + "/" + std::to_string(cfg.block) + "/" +
                             std::to_string(cfg.radius) + "/" + std::to_string(cfg.max_displacement);
  return hex64(fnv1a(params, h));
}

/// Estimated flow for frames (a, b), read from `dir` when a file with the
/// matching content hash exists; otherwise computed and written there.
inline FlowField cached_flow(const std::string& dir, int pair, const Image& a, const Image& b, const FlowConfig& cfg) {
  namespace fs = std::filesystem;
  const std::string prefix = "flow_" + std::to_string(pair) + "_";
  const fs::path path = fs::path(dir) / (prefix + flow_cache_key(a, b, cfg) + ".bin");
  std::error_code ec;
  if (fs::exists(path, ec)) {
    FlowField f = decode_flow(read_file(path.string()));
    if (f.dim(1) == a.height && f.dim(2) == a.width) return f;
  }
  for (const auto& entry : fs::directory_iterator(dir, ec)) {
    const std::string name = entry.path().filename().string();
    if (name.rfind(prefix, 0) == 0 && entry.path() != path) fs::remove(entry.path(), ec);
  }
  FlowField f = as_stored(estimate_flow(image_to_tensor(a), image_to_tensor(b), cfg));
  write_file(path.string(), encode_flow(f));
  return f;
}

}  // namespace tfma::flow
