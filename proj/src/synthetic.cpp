#include "gdkvm/synthetic.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <stdexcept>

#include "gdkvm/error.hpp"
#include "gdkvm/tensor_io.hpp"

namespace gdkvm {

namespace {

constexpr double kTwoPi = 2.0 * std::numbers::pi;
constexpr double kCavity = 0.08;
constexpr double kRim = 0.8;

// Half extents of a rotated ellipse's bounding box.
std::pair<double, double> half_extent(double a, double b, double angle) {
  const double c = std::cos(angle), s = std::sin(angle);
  return {std::sqrt(a * a * c * c + b * b * s * s), std::sqrt(a * a * s * s + b * b * c * c)};
}

double smoothstep(double e0, double e1, double x) {
  const double t = std::clamp((x - e0) / (e1 - e0), 0.0, 1.0);
  return t * t * (3 - 2 * t);
}

}  // namespace

double SyntheticSpec::pulse(std::size_t t) const {
  return 1.0 + amplitude * std::sin(kTwoPi * static_cast<double>(t) / period + phase);
}

void SyntheticSpec::validate() const {
  if (frames < 2) throw std::invalid_argument("synthetic spec: need at least 2 frames");
  if (size == 0) throw std::invalid_argument("synthetic spec: size must be >= 1");
  if (!(amplitude >= 0 && amplitude < 1)) throw std::invalid_argument("synthetic spec: amplitude must be in [0, 1)");
  if (!(axis_a > 0 && axis_b > 0)) throw std::invalid_argument("synthetic spec: axes must be positive");
  if (!(period > 0)) throw std::invalid_argument("synthetic spec: period must be positive");
  if (!(speckle >= 0 && speckle <= 1)) throw std::invalid_argument("synthetic spec: speckle must be in [0, 1]");
  const double hi = static_cast<double>(size) - 1.0;
  for (std::size_t t = 0; t < frames; ++t) {
    const double p = pulse(t);
    const auto [ex, ey] = half_extent(axis_a * p, axis_b * p, angle);
    const double cx = center_x + drift_x * static_cast<double>(t);
    const double cy = center_y + drift_y * static_cast<double>(t);
    if (cx - ex < 0 || cx + ex > hi || cy - ey < 0 || cy + ey > hi) {
      throw std::invalid_argument("synthetic spec: ellipse leaves the frame at t=" + std::to_string(t));
    }
  }
}

Tensor Video::frame(std::size_t t) const {
  const std::size_t h = height(), w = width();
  std::vector<float> data(frames.data().begin() + static_cast<std::ptrdiff_t>(t * h * w),
                          frames.data().begin() + static_cast<std::ptrdiff_t>((t + 1) * h * w));
  return Tensor({h, w, 1}, std::move(data));
}

Video generate(const SyntheticSpec& spec) {
  spec.validate();
  const std::size_t T = spec.frames, N = spec.size;
  Video v{Tensor({T, N, N, 1}), {}};
  Rng rng(spec.seed, 0x5eed);
  const double ca = std::cos(spec.angle), sa = std::sin(spec.angle);
  for (std::size_t t = 0; t < T; ++t) {
    const double p = spec.pulse(t);
    const double a = spec.axis_a * p, b = spec.axis_b * p;
    const double cx = spec.center_x + spec.drift_x * static_cast<double>(t);
    const double cy = spec.center_y + spec.drift_y * static_cast<double>(t);
    MaskGrid mask(N, N);
    for (std::size_t y = 0; y < N; ++y) {
      for (std::size_t x = 0; x < N; ++x) {
        const double dx = static_cast<double>(x) - cx, dy = static_cast<double>(y) - cy;
        const double u = dx * ca + dy * sa, w = -dx * sa + dy * ca;
        const double r = std::sqrt(u * u / (a * a) + w * w / (b * b));
        mask.set(y, x, r <= 1.0);
        // Dark blood pool, bright myocardial rim, graded tissue beyond.
        const double tissue = 0.35 + 0.25 * static_cast<double>(y) / static_cast<double>(N);
        const double inner = smoothstep(0.92, 1.05, r), outer = smoothstep(1.3, 1.5, r);
        const double base = kCavity + inner * (kRim - kCavity) + outer * (tissue - kRim);
        double speckle = 1.0;
        if (spec.speckle > 0) speckle = 1.0 + spec.speckle * (rng.gamma(kSpeckleShape) / kSpeckleShape - 1.0);
        v.frames[((t * N) + y) * N + x] = static_cast<float>(std::clamp(base * speckle, 0.0, 1.0));
      }
    }
    v.masks.push_back(std::move(mask));
  }
  return v;
}

SyntheticSpec sample_spec(const SyntheticSpec& base, Rng& rng) {
  SyntheticSpec s = base;
  s.seed = rng.next_u64();
  s.axis_a = base.axis_a * rng.uniform(0.85, 1.15);
  s.axis_b = base.axis_b * rng.uniform(0.85, 1.15);
  s.angle = rng.uniform(-0.6, 0.6);
  s.phase = rng.uniform(0.0, kTwoPi);
  s.drift_x = rng.uniform(-0.4, 0.4);
  s.drift_y = rng.uniform(-0.4, 0.4);
  // Place the centre so the whole trajectory fits, with a small margin.
  double max_pulse = 0;
  for (std::size_t t = 0; t < s.frames; ++t) max_pulse = std::max(max_pulse, s.pulse(t));
  const auto [ex, ey] = half_extent(s.axis_a * max_pulse, s.axis_b * max_pulse, s.angle);
  const double hi = static_cast<double>(s.size) - 1.0;
  const double span_x = s.drift_x * static_cast<double>(s.frames - 1);
  const double span_y = s.drift_y * static_cast<double>(s.frames - 1);
  const double lo_x = ex + 1 - std::min(0.0, span_x), hi_x = hi - ex - 1 - std::max(0.0, span_x);
  const double lo_y = ey + 1 - std::min(0.0, span_y), hi_y = hi - ey - 1 - std::max(0.0, span_y);
  if (lo_x > hi_x || lo_y > hi_y) {
    s.drift_x = s.drift_y = 0;
    s.center_x = s.center_y = hi / 2;
  } else {
    s.center_x = rng.uniform(lo_x, hi_x);
    s.center_y = rng.uniform(lo_y, hi_y);
  }
  s.validate();
  return s;
}

AugmentDraw draw_augmentation(Rng& rng) {
  AugmentDraw d;
  d.gamma = rng.bernoulli(kAugmentProbability);
  d.gamma_value = rng.uniform(0.7, 1.5);
  d.scale = rng.bernoulli(kAugmentProbability);
  d.scale_value = rng.uniform(0.85, 1.15);
  d.rotate = rng.bernoulli(kAugmentProbability);
  d.angle = rng.uniform(-0.26, 0.26);
  d.contrast = rng.bernoulli(kAugmentProbability);
  d.contrast_value = rng.uniform(0.7, 1.3);
  return d;
}

namespace {

// Resample every frame through the inverse map (y, x) <- centre + M (p - centre).
Video warp(const Video& v, double m00, double m01, double m10, double m11) {
  const std::size_t T = v.length(), H = v.height(), W = v.width();
  const double cy = (static_cast<double>(H) - 1) / 2, cx = (static_cast<double>(W) - 1) / 2;
  Video out{Tensor(v.frames.shape()), {}};
  for (std::size_t t = 0; t < T; ++t) {
    const float* src = v.frames.ptr() + t * H * W;
    float* dst = out.frames.ptr() + t * H * W;
    MaskGrid mask(H, W);
    auto px = [&](long y, long x) -> double {
      if (y < 0 || x < 0 || y >= static_cast<long>(H) || x >= static_cast<long>(W)) return 0.0;
      return src[static_cast<std::size_t>(y) * W + static_cast<std::size_t>(x)];
    };
    for (std::size_t y = 0; y < H; ++y) {
      for (std::size_t x = 0; x < W; ++x) {
        const double dy = static_cast<double>(y) - cy, dx = static_cast<double>(x) - cx;
        const double sy = cy + m00 * dy + m01 * dx;
        const double sx = cx + m10 * dy + m11 * dx;
        const double fy = std::floor(sy), fx = std::floor(sx);
        const double ty = sy - fy, tx = sx - fx;
        const long y0 = static_cast<long>(fy), x0 = static_cast<long>(fx);
        const double val = (1 - ty) * ((1 - tx) * px(y0, x0) + tx * px(y0, x0 + 1)) +
                           ty * ((1 - tx) * px(y0 + 1, x0) + tx * px(y0 + 1, x0 + 1));
        dst[y * W + x] = static_cast<float>(val);
        const long ny = std::lround(sy), nx = std::lround(sx);
        const bool inside = ny >= 0 && nx >= 0 && ny < static_cast<long>(H) && nx < static_cast<long>(W);
        mask.set(y, x, inside && v.masks[t].at(static_cast<std::size_t>(ny), static_cast<std::size_t>(nx)));
      }
    }
    out.masks.push_back(std::move(mask));
  }
  return out;
}

}  // namespace

Video rotate_video(const Video& v, double angle) {
  // Inverse rotation in (y, x) coordinates.
  const double c = std::cos(angle), s = std::sin(angle);
  return warp(v, c, -s, s, c);
}

Video scale_video(const Video& v, double factor) {
  if (!(factor > 0)) throw std::invalid_argument("scale_video: factor must be positive");
  return warp(v, 1 / factor, 0, 0, 1 / factor);
}

Video apply_augmentation(const Video& v, const AugmentDraw& d) {
  Video out = v;
  if (d.scale) out = scale_video(out, d.scale_value);
  if (d.rotate) out = rotate_video(out, d.angle);
  if (d.gamma) {
    for (float& x : out.frames.data()) x = static_cast<float>(std::pow(std::max(0.0f, x), d.gamma_value));
  }
  if (d.contrast) {
    const std::size_t n = out.height() * out.width();
    for (std::size_t t = 0; t < out.length(); ++t) {
      float* f = out.frames.ptr() + t * n;
      double mean = 0;
      for (std::size_t i = 0; i < n; ++i) mean += f[i];
      mean /= static_cast<double>(n);
      for (std::size_t i = 0; i < n; ++i) {
        f[i] = static_cast<float>(std::clamp((f[i] - mean) * d.contrast_value + mean, 0.0, 1.0));
      }
    }
  }
  return out;
}

Video augment(const Video& v, Rng& rng) { return apply_augmentation(v, draw_augmentation(rng)); }

void save_video(const std::filesystem::path& path, const Video& v) {
  std::ofstream os(path, std::ios::binary);
  if (!os) throw std::runtime_error("cannot open " + path.string() + " for writing");
  write_tensor(os, v.frames);
  const std::size_t T = v.length(), H = v.height(), W = v.width();
  ByteTensor masks({T, H, W});
  for (std::size_t t = 0; t < T; ++t) std::copy(v.masks[t].bits().begin(), v.masks[t].bits().end(), masks.ptr() + t * H * W);
  write_tensor(os, masks);
  if (!os) throw std::runtime_error("write failed: " + path.string());
}

Video load_video(const std::filesystem::path& path) {
  std::ifstream is(path, std::ios::binary);
  if (!is) throw std::runtime_error("cannot open " + path.string());
  Video v{read_f32_tensor(is), {}};
  const ByteTensor masks = read_u8_tensor(is);
  if (v.frames.rank() != 4 || v.frames.dim(3) != 1 || masks.rank() != 3 || masks.dim(0) != v.frames.dim(0) ||
      masks.dim(1) != v.frames.dim(1) || masks.dim(2) != v.frames.dim(2)) {
    throw FormatError(path.string() + ": not a video record (frames T x H x W x 1, masks T x H x W)");
  }
  const std::size_t H = masks.dim(1), W = masks.dim(2);
  for (std::size_t t = 0; t < masks.dim(0); ++t) {
    MaskGrid m(H, W);
    for (std::size_t i = 0; i < H * W; ++i) m.set(i / W, i % W, masks[t * H * W + i] != 0);
    v.masks.push_back(std::move(m));
  }
  return v;
}

}  // namespace gdkvm
