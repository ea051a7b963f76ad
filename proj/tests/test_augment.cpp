#include "doctest.h"

#include "whitebed/augment.hpp"
#include "whitebed/errors.hpp"

#include <cmath>
#include <set>

using namespace whitebed;

namespace {

Image random_image(Index h, Index w, std::mt19937_64& rng) {
  Image im(3, h, w);
  std::uniform_real_distribution<float> u(0.0f, 1.0f);
  for (float& v : im.data) v = u(rng);
  return im;
}

bool same_params(const AugParams& a, const AugParams& b) {
  if (a.crop_area_frac != b.crop_area_frac || a.crop_aspect != b.crop_aspect || a.crop_top != b.crop_top ||
      a.crop_left != b.crop_left || a.crop_height != b.crop_height || a.crop_width != b.crop_width ||
      a.flip != b.flip || a.grayscale != b.grayscale || a.jitter.has_value() != b.jitter.has_value()) {
    return false;
  }
  if (!a.jitter) return true;
  return a.jitter->brightness == b.jitter->brightness && a.jitter->contrast == b.jitter->contrast &&
         a.jitter->saturation == b.jitter->saturation && a.jitter->hue == b.jitter->hue &&
         a.jitter->order == b.jitter->order;
}

}  // namespace

TEST_CASE("sampled parameters stay in range") {
  std::mt19937_64 rng(1);
  int flips = 0, jitters = 0, grays = 0;
  double area_sum = 0.0, pixel_area_sum = 0.0;
  const int draws = 10000;
  for (int t = 0; t < draws; ++t) {
    const AugParams p = sample_params(32, 32, rng);
    CHECK(p.crop_area_frac >= 0.2);
    CHECK(p.crop_area_frac <= 1.0);
    CHECK(p.crop_aspect >= 0.75 - 1e-12);
    CHECK(p.crop_aspect <= 4.0 / 3.0 + 1e-12);
    CHECK(p.crop_top >= 0);
    CHECK(p.crop_left >= 0);
    CHECK(p.crop_top + p.crop_height <= 32);
    CHECK(p.crop_left + p.crop_width <= 32);
    if (p.jitter) {
      ++jitters;
      CHECK(std::abs(p.jitter->brightness) <= 0.4);
      CHECK(std::abs(p.jitter->contrast) <= 0.4);
      CHECK(std::abs(p.jitter->saturation) <= 0.4);
      CHECK(std::abs(p.jitter->hue) <= 0.1);
    }
    flips += p.flip;
    grays += p.grayscale;
    area_sum += p.crop_area_frac;
    pixel_area_sum += double(p.crop_height * p.crop_width) / 1024.0;
  }
  CHECK(std::abs(double(flips) / draws - 0.5) <= 0.02);
  CHECK(std::abs(double(jitters) / draws - 0.8) <= 0.02);
  CHECK(std::abs(double(grays) / draws - 0.1) <= 0.02);
  CHECK(std::abs(area_sum / draws - 0.6) <= 0.02);
  CHECK(std::abs(pixel_area_sum / draws - 0.6) <= 0.02);
}

TEST_CASE("parameter draws are deterministic per seed") {
  std::mt19937_64 a(7), b(7);
  for (int t = 0; t < 100; ++t) CHECK(same_params(sample_params(32, 32, a), sample_params(32, 32, b)));
}

TEST_CASE("jitter order is randomized and recorded") {
  std::mt19937_64 rng(8);
  std::set<std::array<JitterOp, 4>> orders;
  for (int t = 0; t < 500; ++t) {
    const AugParams p = sample_params(32, 32, rng);
    if (p.jitter) orders.insert(p.jitter->order);
  }
  CHECK(orders.size() == 24);
}

TEST_CASE("non-square images get fitting crops") {
  std::mt19937_64 rng(9);
  for (int t = 0; t < 2000; ++t) {
    const AugParams p = sample_params(12, 40, rng);
    CHECK(p.crop_height >= 1);
    CHECK(p.crop_top + p.crop_height <= 12);
    CHECK(p.crop_left + p.crop_width <= 40);
  }
}

TEST_CASE("identity parameters reproduce the input") {
  std::mt19937_64 rng(2);
  const Image im = random_image(32, 32, rng);
  const Image out = apply(im, identity_params(32, 32));
  CHECK(out.data == im.data);
}

TEST_CASE("flip is an involution and mirrors columns") {
  std::mt19937_64 rng(3);
  const Image im = random_image(5, 7, rng);
  Image f = im;
  flip_horizontal(f);
  CHECK(f.at(1, 2, 0) == im.at(1, 2, 6));
  CHECK(f.at(0, 4, 3) == im.at(0, 4, 3));
  flip_horizontal(f);
  CHECK(f.data == im.data);
}

TEST_CASE("grayscale uses luma weights on every pixel") {
  std::mt19937_64 rng(4);
  const Image im = random_image(6, 6, rng);
  Image g = im;
  to_grayscale(g);
  for (Index y = 0; y < 6; ++y)
    for (Index x = 0; x < 6; ++x) {
      const double expect = 0.299 * im.at(0, y, x) + 0.587 * im.at(1, y, x) + 0.114 * im.at(2, y, x);
      CHECK(g.at(0, y, x) == g.at(1, y, x));
      CHECK(g.at(1, y, x) == g.at(2, y, x));
      CHECK(std::abs(g.at(0, y, x) - expect) <= 1e-6);
    }
}

TEST_CASE("resized crop is bilinear") {
  Image im(1, 2, 2);
  im.at(0, 0, 0) = 0.0f;
  im.at(0, 0, 1) = 1.0f;
  im.at(0, 1, 0) = 0.0f;
  im.at(0, 1, 1) = 1.0f;
  const Image up = resized_crop(im, 0, 0, 2, 2, 4, 4);
  // Source x for output columns: -0.25, 0.25, 0.75, 1.25 -> clamped to [0, 1].
  CHECK(up.at(0, 0, 0) == doctest::Approx(0.0));
  CHECK(up.at(0, 0, 1) == doctest::Approx(0.25));
  CHECK(up.at(0, 3, 2) == doctest::Approx(0.75));
  CHECK(up.at(0, 2, 3) == doctest::Approx(1.0));

  std::mt19937_64 rng(5);
  const Image big = random_image(8, 8, rng);
  const Image crop = resized_crop(big, 2, 3, 4, 4, 4, 4);
  CHECK(crop.at(2, 1, 2) == big.at(2, 3, 5));
  CHECK_THROWS_AS(resized_crop(big, 6, 0, 4, 4, 4, 4), ShapeError);
}

TEST_CASE("jitter operators") {
  Image im(3, 1, 2);
  im.at(0, 0, 0) = 0.5f, im.at(1, 0, 0) = 0.25f, im.at(2, 0, 0) = 0.1f;
  im.at(0, 0, 1) = 0.2f, im.at(1, 0, 1) = 0.4f, im.at(2, 0, 1) = 0.6f;

  SUBCASE("brightness scales") {
    JitterParams j;
    j.brightness = 0.2;
    j.order = {JitterOp::brightness, JitterOp::contrast, JitterOp::saturation, JitterOp::hue};
    Image out = im;
    apply_jitter(out, j);
    CHECK(out.at(0, 0, 0) == doctest::Approx(0.6));
    CHECK(out.at(2, 0, 1) == doctest::Approx(0.72));
  }
  SUBCASE("zero saturation factor gives gray") {
    JitterParams j;
    j.saturation = -1.0;
    Image out = im;
    apply_jitter(out, j);
    Image g = im;
    to_grayscale(g);
    for (std::size_t i = 0; i < out.data.size(); ++i) CHECK(out.data[i] == doctest::Approx(g.data[i]).epsilon(1e-6));
  }
  SUBCASE("zero contrast factor gives the mean luma") {
    JitterParams j;
    j.contrast = -1.0;
    Image out = im;
    apply_jitter(out, j);
    const double l0 = 0.299 * 0.5 + 0.587 * 0.25 + 0.114 * 0.1;
    const double l1 = 0.299 * 0.2 + 0.587 * 0.4 + 0.114 * 0.6;
    for (float v : out.data) CHECK(v == doctest::Approx((l0 + l1) / 2).epsilon(1e-6));
  }
  SUBCASE("hue rotation by a full turn is identity, a third turn cycles channels") {
    JitterParams j;
    j.hue = 1.0;
    Image out = im;
    apply_jitter(out, j);
    for (std::size_t i = 0; i < out.data.size(); ++i) CHECK(out.data[i] == doctest::Approx(im.data[i]).epsilon(1e-6));
    j.hue = 1.0 / 3.0;
    out = im;
    apply_jitter(out, j);
    CHECK(out.at(1, 0, 0) == doctest::Approx(0.5).epsilon(1e-6));
    CHECK(out.at(2, 0, 0) == doctest::Approx(0.25).epsilon(1e-6));
    CHECK(out.at(0, 0, 0) == doctest::Approx(0.1).epsilon(1e-6));
  }
}

TEST_CASE("augmented views stay in range and keep resolution") {
  std::mt19937_64 rng(6);
  const Image im = random_image(32, 32, rng);
  for (int t = 0; t < 300; ++t) {
    const Image out = apply(im, sample_params(32, 32, rng));
    CHECK(out.height == 32);
    CHECK(out.width == 32);
    CHECK(out.channels == 3);
    for (float v : out.data) {
      REQUIRE(v >= 0.0f);
      REQUIRE(v <= 1.0f);
    }
  }
}

TEST_CASE("make_views draws independent parameters and is reproducible") {
  std::mt19937_64 rng(10);
  const Image im = random_image(16, 16, rng);
  std::mt19937_64 a(11), b(11);
  const auto va = make_views(im, 4, a);
  const auto vb = make_views(im, 4, b);
  REQUIRE(va.size() == 4);
  for (std::size_t i = 0; i < 4; ++i) CHECK(va[i].data == vb[i].data);
  CHECK(va[0].data != va[1].data);
  CHECK_THROWS_AS(make_views(im, 1, a), ConfigError);
}
