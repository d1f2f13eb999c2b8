#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include "gdkvm/rng.hpp"
#include "gdkvm/seg_metrics.hpp"
#include "gdkvm/tensor.hpp"

namespace gdkvm {

// A beating ellipse ("ventricle") in a speckled tissue field.
struct SyntheticSpec {
  std::size_t frames = 10;
  std::size_t size = 64;            // H = W
  double axis_a = 14.0;             // semi-axes at zero phase, pixels
  double axis_b = 9.0;
  double angle = 0.0;               // radians, major axis from +x
  double center_x = 31.5;
  double center_y = 31.5;
  double amplitude = 0.3;           // a(t) = a0 (1 + amp sin(2 pi t / period + phase))
  double period = 10.0;             // frames
  double phase = 0.0;
  double speckle = 1.0;             // 0 = clean; 1 = full Gamma(4)/4 multiplicative speckle
  double drift_x = 0.0;             // centre translation per frame, pixels
  double drift_y = 0.0;
  std::uint64_t seed = 0;

  // Throws std::invalid_argument for T < 2, size 0, amp outside [0, 1),
  // non-positive axes/period, or an ellipse leaving the frame at any t.
  void validate() const;
  double pulse(std::size_t t) const;  // 1 + amp sin(...)
};

inline constexpr double kSpeckleShape = 4.0;

struct Video {
  Tensor frames;                    // T x H x W x 1, values in [0, 1]
  std::vector<MaskGrid> masks;      // one per frame

  std::size_t length() const { return masks.size(); }
  std::size_t height() const { return frames.dim(1); }
  std::size_t width() const { return frames.dim(2); }
  Tensor frame(std::size_t t) const;  // H x W x 1
};

Video generate(const SyntheticSpec& spec);

// Per-video variation for a dataset: axes, orientation, centre, phase and
// drift drawn from rng around base, keeping the ellipse inside the frame.
SyntheticSpec sample_spec(const SyntheticSpec& base, Rng& rng);

struct AugmentDraw {
  bool gamma = false;
  bool scale = false;
  bool rotate = false;
  bool contrast = false;
  double gamma_value = 1.0;     // I^g
  double scale_value = 1.0;     // zoom about the image centre
  double angle = 0.0;           // radians
  double contrast_value = 1.0;  // (I - mean) c + mean
};

inline constexpr double kAugmentProbability = 0.5;

AugmentDraw draw_augmentation(Rng& rng);
// Geometric ops resample frames bilinearly and masks by nearest neighbour,
// filling zeros outside; gamma and contrast leave masks unchanged.
Video apply_augmentation(const Video& v, const AugmentDraw& d);
Video augment(const Video& v, Rng& rng);

// Rotation about the image centre (frames bilinear, masks nearest).
Video rotate_video(const Video& v, double angle);
Video scale_video(const Video& v, double factor);

// frames (f32) followed by masks (u8, T x H x W) as two GDKV-T records.
void save_video(const std::filesystem::path& path, const Video& v);
Video load_video(const std::filesystem::path& path);

}  // namespace gdkvm
