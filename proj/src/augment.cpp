#include "whitebed/augment.hpp"

#include "whitebed/errors.hpp"

#include <algorithm>
#include <cmath>

namespace whitebed {

namespace {

constexpr int kCropAttempts = 10;

double uniform(std::mt19937_64& rng, double lo, double hi) { return std::uniform_real_distribution<double>(lo, hi)(rng); }

bool coin(std::mt19937_64& rng, double p) { return std::uniform_real_distribution<double>(0.0, 1.0)(rng) < p; }

float clamp01(double v) { return static_cast<float>(std::clamp(v, 0.0, 1.0)); }

void crop_size(double area_frac, double aspect, Index h, Index w, Index& ch, Index& cw) {
  const double area = area_frac * double(h * w);
  cw = static_cast<Index>(std::lround(std::sqrt(area * aspect)));
  ch = static_cast<Index>(std::lround(std::sqrt(area / aspect)));
}

void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
  const double mx = std::max({r, g, b}), mn = std::min({r, g, b});
  const double delta = mx - mn;
  v = mx;
  s = mx > 0.0 ? delta / mx : 0.0;
  if (delta <= 0.0) {
    h = 0.0;
    return;
  }
  if (mx == r) h = (g - b) / delta;
  else if (mx == g) h = 2.0 + (b - r) / delta;
  else h = 4.0 + (r - g) / delta;
  h /= 6.0;
  if (h < 0.0) h += 1.0;
}

void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
  const double hh = h * 6.0;
  const int sector = static_cast<int>(std::floor(hh)) % 6;
  const double f = hh - std::floor(hh);
  const double p = v * (1.0 - s), q = v * (1.0 - s * f), t = v * (1.0 - s * (1.0 - f));
  switch (sector) {
    case 0: r = v, g = t, b = p; break;
    case 1: r = q, g = v, b = p; break;
    case 2: r = p, g = v, b = t; break;
    case 3: r = p, g = q, b = v; break;
    case 4: r = t, g = p, b = v; break;
    default: r = v, g = p, b = q; break;
  }
}

double luma(const Image& img, Index y, Index x) {
  return kLumaWeights[0] * img.at(0, y, x) + kLumaWeights[1] * img.at(1, y, x) + kLumaWeights[2] * img.at(2, y, x);
}

void require_rgb(const Image& img, const char* op) {
  if (img.channels != 3) throw ShapeError(std::string(op) + ": needs 3 channels, got " + std::to_string(img.channels));
}

}  // namespace

AugParams identity_params(Index height, Index width) {
  AugParams p;
  p.crop_height = height;
  p.crop_width = width;
  return p;
}

AugParams sample_params(Index height, Index width, std::mt19937_64& rng, const AugConfig& cfg) {
  if (height < 1 || width < 1) throw ShapeError("sample_params: empty image");
  AugParams p;
  p.crop_area_frac = uniform(rng, cfg.min_area, cfg.max_area);
  const double log_lo = std::log(cfg.min_aspect), log_hi = std::log(cfg.max_aspect);

  // The area draw is kept; only the aspect is redrawn, so the area distribution stays exact.
  bool fits = false;
  for (int attempt = 0; attempt < kCropAttempts && !fits; ++attempt) {
    p.crop_aspect = std::exp(uniform(rng, log_lo, log_hi));
    crop_size(p.crop_area_frac, p.crop_aspect, height, width, p.crop_height, p.crop_width);
    fits = p.crop_height >= 1 && p.crop_height <= height && p.crop_width >= 1 && p.crop_width <= width;
  }
  if (fits) {
    p.crop_top = std::uniform_int_distribution<Index>(0, height - p.crop_height)(rng);
    p.crop_left = std::uniform_int_distribution<Index>(0, width - p.crop_width)(rng);
  } else {
    // Center crop with the aspect pulled into the feasible interval for this area.
    const double lo = p.crop_area_frac * double(width) / double(height);
    const double hi = double(width) / (p.crop_area_frac * double(height));
    p.crop_aspect = std::clamp(p.crop_aspect, lo, hi);
    crop_size(p.crop_area_frac, p.crop_aspect, height, width, p.crop_height, p.crop_width);
    p.crop_height = std::clamp<Index>(p.crop_height, 1, height);
    p.crop_width = std::clamp<Index>(p.crop_width, 1, width);
    p.crop_top = (height - p.crop_height) / 2;
    p.crop_left = (width - p.crop_width) / 2;
  }

  p.flip = coin(rng, cfg.flip_p);
  if (coin(rng, cfg.jitter_p)) {
    JitterParams j;
    j.brightness = uniform(rng, -cfg.jitter_strength[0], cfg.jitter_strength[0]);
    j.contrast = uniform(rng, -cfg.jitter_strength[1], cfg.jitter_strength[1]);
    j.saturation = uniform(rng, -cfg.jitter_strength[2], cfg.jitter_strength[2]);
    j.hue = uniform(rng, -cfg.jitter_strength[3], cfg.jitter_strength[3]);
    std::shuffle(j.order.begin(), j.order.end(), rng);
    p.jitter = j;
  }
  p.grayscale = coin(rng, cfg.gray_p);
  return p;
}

Image resized_crop(const Image& image, Index top, Index left, Index crop_h, Index crop_w, Index out_h, Index out_w) {
  if (top < 0 || left < 0 || crop_h < 1 || crop_w < 1 || top + crop_h > image.height || left + crop_w > image.width) {
    throw ShapeError("resized_crop: rectangle " + shape_str(crop_h, crop_w) + " at (" + std::to_string(top) + ", " +
                     std::to_string(left) + ") does not fit a " + shape_str(image.height, image.width) + " image");
  }
  Image out(image.channels, out_h, out_w);
  const double sy = double(crop_h) / double(out_h), sx = double(crop_w) / double(out_w);
  for (Index y = 0; y < out_h; ++y) {
    const double fy = std::clamp((double(y) + 0.5) * sy - 0.5, 0.0, double(crop_h - 1));
    const Index y0 = static_cast<Index>(std::floor(fy));
    const Index y1 = std::min(y0 + 1, crop_h - 1);
    const double wy = fy - double(y0);
    for (Index x = 0; x < out_w; ++x) {
      const double fx = std::clamp((double(x) + 0.5) * sx - 0.5, 0.0, double(crop_w - 1));
      const Index x0 = static_cast<Index>(std::floor(fx));
      const Index x1 = std::min(x0 + 1, crop_w - 1);
      const double wx = fx - double(x0);
      for (Index c = 0; c < image.channels; ++c) {
        const double a = image.at(c, top + y0, left + x0), b = image.at(c, top + y0, left + x1);
        const double d = image.at(c, top + y1, left + x0), e = image.at(c, top + y1, left + x1);
        const double v = (1.0 - wy) * ((1.0 - wx) * a + wx * b) + wy * ((1.0 - wx) * d + wx * e);
        out.at(c, y, x) = static_cast<float>(v);
      }
    }
  }
  return out;
}

void flip_horizontal(Image& image) {
  for (Index c = 0; c < image.channels; ++c)
    for (Index y = 0; y < image.height; ++y)
      for (Index x = 0; x < image.width / 2; ++x) std::swap(image.at(c, y, x), image.at(c, y, image.width - 1 - x));
}

void apply_jitter(Image& image, const JitterParams& j) {
  require_rgb(image, "apply_jitter");
  const Index h = image.height, w = image.width;
  for (JitterOp op : j.order) {
    switch (op) {
      case JitterOp::brightness:
        for (float& v : image.data) v = clamp01(double(v) * (1.0 + j.brightness));
        break;
      case JitterOp::contrast: {
        double mean = 0.0;
        for (Index y = 0; y < h; ++y)
          for (Index x = 0; x < w; ++x) mean += luma(image, y, x);
        mean /= double(h * w);
        for (float& v : image.data) v = clamp01(mean + (1.0 + j.contrast) * (double(v) - mean));
        break;
      }
      case JitterOp::saturation:
        for (Index y = 0; y < h; ++y)
          for (Index x = 0; x < w; ++x) {
            const double g = luma(image, y, x);
            for (Index c = 0; c < 3; ++c) image.at(c, y, x) = clamp01(g + (1.0 + j.saturation) * (image.at(c, y, x) - g));
          }
        break;
      case JitterOp::hue:
        for (Index y = 0; y < h; ++y)
          for (Index x = 0; x < w; ++x) {
            double hh, s, v, r, g, b;
            rgb_to_hsv(image.at(0, y, x), image.at(1, y, x), image.at(2, y, x), hh, s, v);
            hh = hh + j.hue;
            hh -= std::floor(hh);
            hsv_to_rgb(hh, s, v, r, g, b);
            image.at(0, y, x) = clamp01(r);
            image.at(1, y, x) = clamp01(g);
            image.at(2, y, x) = clamp01(b);
          }
        break;
    }
  }
}

void to_grayscale(Image& image) {
  require_rgb(image, "to_grayscale");
  for (Index y = 0; y < image.height; ++y)
    for (Index x = 0; x < image.width; ++x) {
      const float g = clamp01(luma(image, y, x));
      for (Index c = 0; c < 3; ++c) image.at(c, y, x) = g;
    }
}

Image apply(const Image& image, const AugParams& p) {
  Image out = resized_crop(image, p.crop_top, p.crop_left, p.crop_height, p.crop_width, image.height, image.width);
  if (p.flip) flip_horizontal(out);
  if (p.jitter) apply_jitter(out, *p.jitter);
  if (p.grayscale) to_grayscale(out);
  for (float& v : out.data) v = clamp01(v);
  return out;
}

std::vector<Image> make_views(const Image& image, Index d, std::mt19937_64& rng, const AugConfig& cfg) {
  if (d < 2) throw ConfigError("make_views: d must be at least 2, got " + std::to_string(d));
  std::vector<Image> views;
  views.reserve(static_cast<std::size_t>(d));
  for (Index j = 0; j < d; ++j) views.push_back(apply(image, sample_params(image.height, image.width, rng, cfg)));
  return views;
}

}  // namespace whitebed
