#pragma once

// Positive-view generation: random resized crop, horizontal flip, color
// jitter and grayscale, each view drawn independently.

#include "whitebed/linalg.hpp"

#include <array>
#include <optional>
#include <random>
#include <vector>

namespace whitebed {

/// Channel-major float image, values in [0, 1].
struct Image {
  Index channels = 3;
  Index height = 0;
  Index width = 0;
  std::vector<float> data;

  Image() = default;
  Image(Index c, Index h, Index w) : channels(c), height(h), width(w), data(static_cast<std::size_t>(c * h * w), 0.0f) {}

  float& at(Index c, Index y, Index x) { return data[static_cast<std::size_t>((c * height + y) * width + x)]; }
  float at(Index c, Index y, Index x) const { return data[static_cast<std::size_t>((c * height + y) * width + x)]; }
  Index size() const { return channels * height * width; }
};

enum class JitterOp { brightness = 0, contrast = 1, saturation = 2, hue = 3 };

struct JitterParams {
  /// Offsets u; brightness/contrast/saturation scale by (1 + u), hue rotates by u turns.
  double brightness = 0.0, contrast = 0.0, saturation = 0.0, hue = 0.0;
  std::array<JitterOp, 4> order{JitterOp::brightness, JitterOp::contrast, JitterOp::saturation, JitterOp::hue};
};

struct AugConfig {
  double min_area = 0.2, max_area = 1.0;
  double min_aspect = 3.0 / 4.0, max_aspect = 4.0 / 3.0;
  double flip_p = 0.5;
  double jitter_p = 0.8;
  std::array<double, 4> jitter_strength{0.4, 0.4, 0.4, 0.1};
  double gray_p = 0.1;
};

struct AugParams {
  double crop_area_frac = 1.0;
  double crop_aspect = 1.0;
  Index crop_top = 0, crop_left = 0, crop_height = 0, crop_width = 0;
  bool flip = false;
  std::optional<JitterParams> jitter;
  bool grayscale = false;
};

/// Draws one parameter record for an image of the given size.
AugParams sample_params(Index height, Index width, std::mt19937_64& rng, const AugConfig& cfg = {});

/// Full-image crop with every stochastic op off.
AugParams identity_params(Index height, Index width);

/// Output has the input's resolution; values are clamped to [0, 1].
Image apply(const Image& image, const AugParams& params);

std::vector<Image> make_views(const Image& image, Index d, std::mt19937_64& rng, const AugConfig& cfg = {});

// Individual operators, exposed for testing.
Image resized_crop(const Image& image, Index top, Index left, Index crop_h, Index crop_w, Index out_h, Index out_w);
void flip_horizontal(Image& image);
void apply_jitter(Image& image, const JitterParams& jitter);
void to_grayscale(Image& image);

inline constexpr std::array<double, 3> kLumaWeights{0.299, 0.587, 0.114};

}  // namespace whitebed
