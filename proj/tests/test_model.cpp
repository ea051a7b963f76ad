#include "doctest.h"
#include "support.hpp"

#include "whitebed/errors.hpp"
#include "whitebed/model.hpp"

#include <filesystem>
#include <fstream>

using namespace whitebed;
using whitebed::test::max_abs;
using whitebed::test::random_matrix;
namespace fs = std::filesystem;

namespace {

ModelConfig tiny_conv() {
  ModelConfig c;
  c.encoder.input = {3, 16, 16};
  c.encoder.widths = {2, 3, 3, 4};
  c.projector.hidden_dim = 5;
  c.projector.out_dim = 3;
  return c;
}

template <typename Scalar>
ModelNodes forward(const ModelConfig& cfg, ParameterSet& ps, const MatD& x, bool training, Graph<Scalar>& g,
                   bool projector = true) {
  ModelState<Scalar> state(ps);
  auto in = g.input("x", x.cols());
  auto nodes = build_model(g, in, cfg, ps, state, training, projector);
  g.set_output(nodes.v);
  g.forward({{"x", x.cast<Scalar>()}});
  state.commit(ps);
  return nodes;
}

MatD images(Index n, const ModelConfig& cfg, std::mt19937_64& rng) {
  return (random_matrix(n, cfg.encoder.input.size(), rng).array() * 0.2 + 0.5).matrix();
}

}  // namespace

TEST_CASE("smallconv and projector shapes") {
  ModelConfig cfg;
  ParameterSet ps = init_params(cfg, 0);
  std::mt19937_64 rng(1);
  Graph<float> g;
  auto nodes = forward(cfg, ps, images(8, cfg, rng), true, g);
  CHECK(g.value(nodes.h).rows() == 8);
  CHECK(g.value(nodes.h).cols() == 256);
  CHECK(g.value(nodes.v).cols() == 64);

  Index encoder_params = 0;
  for (const auto& name : ps.order)
    if (name.rfind("enc.", 0) == 0) encoder_params += ps.at(name).size();
  MESSAGE("smallconv encoder parameters: " << encoder_params);
  CHECK(encoder_params > 250000);
  CHECK(encoder_params < 350000);

  cfg.projector.out_dim = 128;
  ParameterSet wide = init_params(cfg, 0);
  Graph<float> g2;
  CHECK(g2.value(forward(cfg, wide, images(8, cfg, rng), true, g2).v).cols() == 128);
}

TEST_CASE("mlp encoder shapes") {
  ModelConfig cfg;
  cfg.encoder.kind = EncoderKind::mlp;
  cfg.encoder.input = {3, 8, 8};
  cfg.encoder.mlp_hidden = 32;
  cfg.encoder.mlp_out = 16;
  cfg.projector = {32, 8};
  ParameterSet ps = init_params(cfg, 0);
  std::mt19937_64 rng(2);
  Graph<double> g;
  auto nodes = forward(cfg, ps, images(6, cfg, rng), true, g);
  CHECK(g.value(nodes.h).cols() == 16);
  CHECK(g.value(nodes.v).cols() == 8);
}

TEST_CASE("config validation") {
  ModelConfig cfg;
  cfg.encoder.input = {3, 24, 24};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = ModelConfig{};
  cfg.projector.out_dim = 512;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  cfg = ModelConfig{};
  cfg.encoder.widths = {8, 8, 8, 32};
  CHECK_THROWS_AS(cfg.validate(), ConfigError);
  CHECK(parse_encoder_kind("mlp") == EncoderKind::mlp);
  CHECK_THROWS_AS(parse_encoder_kind("resnet18"), ConfigError);
}

TEST_CASE("resolution mismatch is a shape error") {
  ModelConfig cfg = tiny_conv();
  ParameterSet ps = init_params(cfg, 0);
  Graph<double> g;
  CHECK_THROWS_AS(forward(cfg, ps, MatD::Zero(2, 3 * 8 * 8), true, g), ShapeError);
}

TEST_CASE("zero input gives finite output") {
  ModelConfig cfg;
  ParameterSet ps = init_params(cfg, 0);
  Graph<float> g;
  auto nodes = forward(cfg, ps, MatD::Zero(4, cfg.encoder.input.size()), true, g);
  CHECK(g.value(nodes.v).allFinite());
  CHECK(g.value(nodes.h).allFinite());
}

TEST_CASE("forward is bitwise reproducible") {
  ModelConfig cfg;
  std::mt19937_64 rng(3);
  const MatD x = images(8, cfg, rng);
  ParameterSet a = init_params(cfg, 5), b = init_params(cfg, 5);
  Graph<float> ga, gb;
  auto na = forward(cfg, a, x, true, ga);
  auto nb = forward(cfg, b, x, true, gb);
  CHECK((ga.value(na.v).array() == gb.value(nb.v).array()).all());
}

TEST_CASE("initialization is seeded and fan-in scaled") {
  ModelConfig cfg;
  const ParameterSet a = init_params(cfg, 1), b = init_params(cfg, 1), c = init_params(cfg, 2);
  for (const auto& name : a.order) CHECK((a.at(name).array() == b.at(name).array()).all());
  CHECK(max_abs(a.at("enc.conv3.w") - c.at("enc.conv3.w")) > 0.0);

  auto check_moment = [&](const std::string& name, Index fan_in) {
    const MatD& w = a.at(name);
    const double bound = 1.0 / std::sqrt(double(fan_in));
    const double var = (w.array() - w.mean()).square().mean();
    INFO(name);
    CHECK(std::abs(var / (bound * bound / 3.0) - 1.0) < 0.05);
    CHECK(w.cwiseAbs().maxCoeff() <= bound);
  };
  check_moment("enc.conv1.w", 32 * 9);
  check_moment("enc.conv3.w", 96 * 9);
  check_moment("proj.fc0.w", 256);
  check_moment("proj.fc1.w", 1024);
  CHECK((a.at("proj.fc1.b").array() == 0.0).all());
  CHECK((a.at("enc.bn0.gamma").array() == 1.0).all());
  CHECK((a.buffers.at("enc.bn2").var.array() == 1.0).all());
}

TEST_CASE("gradients through encoder and projector") {
  std::mt19937_64 rng(4);
  SUBCASE("smallconv") {
    ModelConfig cfg = tiny_conv();
    ParameterSet ps = init_params(cfg, 3);
    Graph<double> g;
    ModelState<double> state(ps);
    auto nodes = build_model(g, g.input("x", cfg.encoder.input.size()), cfg, ps, state, true);
    g.mse_mean(nodes.v, g.input("t", 3));
    // With 4 samples the last block's 1x1 maps leave a BN shift with an exactly zero gradient,
    // where the relative metric only sees finite-difference noise; 8 samples avoid it.
    CHECK(grad_check(g, {{"x", images(8, cfg, rng)}, {"t", random_matrix(8, 3, rng)}}, 1e-5) <= 1e-4);
  }
  SUBCASE("mlp") {
    ModelConfig cfg;
    cfg.encoder.kind = EncoderKind::mlp;
    cfg.encoder.input = {3, 4, 4};
    cfg.encoder.mlp_hidden = 6;
    cfg.encoder.mlp_out = 5;
    cfg.projector = {6, 3};
    ParameterSet ps = init_params(cfg, 3);
    Graph<double> g;
    ModelState<double> state(ps);
    auto nodes = build_model(g, g.input("x", cfg.encoder.input.size()), cfg, ps, state, true);
    g.mse_mean(nodes.v, g.input("t", 3));
    CHECK(grad_check(g, {{"x", images(5, cfg, rng)}, {"t", random_matrix(5, 3, rng)}}, 1e-5) <= 1e-4);
  }
}

TEST_CASE("running statistics follow momentum 0.9 and evaluation is per-sample") {
  ModelConfig cfg = tiny_conv();
  ParameterSet ps = init_params(cfg, 0);
  std::mt19937_64 rng(5);
  const MatD x = images(6, cfg, rng);
  Graph<double> g;
  forward(cfg, ps, x, true, g);
  // First BN layer: running = 0.9 * (0, 1) + 0.1 * batch stats.
  Graph<double> probe;
  probe.conv3x3(probe.input("x", x.cols()), probe.parameter("w", ps.at("enc.conv0.w")), cfg.encoder.input);
  const MatD y = probe.forward({{"x", x}});
  const Index c0 = 2, spatial = 16 * 16;
  for (Index c = 0; c < c0; ++c) {
    const auto blk = y.middleCols(c * spatial, spatial);
    const double mean = blk.mean();
    const double var = (blk.array() - mean).square().mean();
    CHECK(ps.buffers.at("enc.bn0").mean(c) == doctest::Approx(0.1 * mean).epsilon(1e-9));
    CHECK(ps.buffers.at("enc.bn0").var(c) == doctest::Approx(0.9 + 0.1 * var).epsilon(1e-9));
  }

  // Evaluation mode: a sample's features do not depend on its batch mates.
  Graph<double> ga, gb;
  auto na = forward(cfg, ps, x, false, ga);
  auto nb = forward(cfg, ps, x.topRows(2), false, gb);
  CHECK(max_abs(ga.value(na.v).topRows(2) - gb.value(nb.v)) <= 1e-12);
}

TEST_CASE("checkpoint round trip") {
  ModelConfig cfg = tiny_conv();
  ParameterSet ps = init_params(cfg, 9);
  ps.buffers.at("proj.bn0").mean.setConstant(0.25);
  std::mt19937_64 rng(1);
  Checkpoint ck;
  pack_params(ps, ck);
  ck.tensors.push_back({"extra", random_matrix(2, 3, rng)});
  ck.meta["step"] = 17;
  const fs::path file = fs::temp_directory_path() / "whitebed_test_ckpt.bin";
  save_checkpoint(file, ck);

  const Checkpoint back = load_checkpoint(file);
  CHECK(back.meta.at("step") == 17);
  REQUIRE(back.tensors.size() == ck.tensors.size());
  for (std::size_t i = 0; i < ck.tensors.size(); ++i) {
    CHECK(back.tensors[i].name == ck.tensors[i].name);
    CHECK((back.tensors[i].value.array() == ck.tensors[i].value.array()).all());
  }
  ParameterSet fresh = init_params(cfg, 10);
  unpack_params(back, fresh);
  for (const auto& name : ps.order) CHECK((fresh.at(name).array() == ps.at(name).array()).all());
  CHECK(fresh.buffers.at("proj.bn0").mean(0) == 0.25);

  ModelConfig other = tiny_conv();
  other.projector.hidden_dim = 7;
  ParameterSet wrong = init_params(other, 0);
  CHECK_THROWS_AS(unpack_params(back, wrong), ShapeError);

  std::ofstream(file, std::ios::binary) << "NOTACKPT";
  CHECK_THROWS_AS(load_checkpoint(file), IoError);
  CHECK_THROWS_AS(load_checkpoint(fs::temp_directory_path() / "whitebed_missing.ckpt"), IoError);
}
