#include "whitebed/model.hpp"

#include "whitebed/errors.hpp"
#include "whitebed/random.hpp"

#include <cmath>
#include <cstring>
#include <fstream>

namespace whitebed {

namespace fs = std::filesystem;
using nlohmann::json;

const char* encoder_name(EncoderKind kind) { return kind == EncoderKind::mlp ? "mlp" : "smallconv"; }

EncoderKind parse_encoder_kind(const std::string& name) {
  if (name == "mlp") return EncoderKind::mlp;
  if (name == "smallconv") return EncoderKind::smallconv;
  throw ConfigError("unknown encoder kind '" + name + "' (valid: mlp, smallconv)");
}

Index EncoderConfig::h_dim() const { return kind == EncoderKind::mlp ? mlp_out : widths.back(); }

void EncoderConfig::validate() const {
  if (input.channels < 1 || input.height < 1 || input.width < 1) throw ConfigError("encoder: empty input shape");
  if (kind == EncoderKind::smallconv) {
    if (widths.size() != 4) throw ConfigError("encoder: smallconv needs exactly 4 widths");
    for (Index w : widths)
      if (w < 1) throw ConfigError("encoder: widths must be positive");
    if (input.height % 16 != 0 || input.width % 16 != 0) {
      throw ConfigError("encoder: smallconv halves the resolution 4 times; " + shape_str(input.height, input.width) +
                        " is not divisible by 16");
    }
  } else if (mlp_hidden < 1 || mlp_out < 1) {
    throw ConfigError("encoder: mlp widths must be positive");
  }
}

void ModelConfig::validate() const {
  encoder.validate();
  if (projector.hidden_dim < 1 || projector.out_dim < 1) throw ConfigError("projector: widths must be positive");
  if (projector.out_dim > projector.hidden_dim) {
    throw ConfigError("projector: out_dim " + std::to_string(projector.out_dim) + " exceeds hidden_dim " +
                      std::to_string(projector.hidden_dim));
  }
  if (encoder.h_dim() < projector.out_dim) {
    throw ConfigError("encoder: h_dim " + std::to_string(encoder.h_dim()) + " must be >= embedding size " +
                      std::to_string(projector.out_dim));
  }
}

void ParameterSet::add(const std::string& name, MatD value) {
  if (values.count(name) != 0) throw Error("parameter '" + name + "' defined twice");
  order.push_back(name);
  values.emplace(name, std::move(value));
}

const MatD& ParameterSet::at(const std::string& name) const {
  auto it = values.find(name);
  if (it == values.end()) throw Error("unknown parameter '" + name + "'");
  return it->second;
}

MatD& ParameterSet::at(const std::string& name) {
  auto it = values.find(name);
  if (it == values.end()) throw Error("unknown parameter '" + name + "'");
  return it->second;
}

Index ParameterSet::parameter_count() const {
  Index n = 0;
  for (const auto& [name, v] : values) n += v.size();
  return n;
}

namespace {

MatD uniform_init(Index rows, Index cols, Index fan_in, std::uint64_t seed, const std::string& name) {
  auto rng = derived_rng({seed, fnv1a(name)});
  const double bound = 1.0 / std::sqrt(double(fan_in));
  std::uniform_real_distribution<double> u(-bound, bound);
  MatD m(rows, cols);
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = u(rng);
  return m;
}

void add_bn(ParameterSet& ps, const std::string& layer, Index features) {
  ps.add(layer + ".gamma", MatD::Ones(1, features));
  ps.add(layer + ".beta", MatD::Zero(1, features));
  ps.buffers[layer] = {RowVec<double>::Zero(features), RowVec<double>::Ones(features)};
}

std::string conv_name(std::size_t i) { return "enc.conv" + std::to_string(i); }
std::string bn_name(const std::string& prefix, std::size_t i) { return prefix + ".bn" + std::to_string(i); }

}  // namespace

ParameterSet init_params(const ModelConfig& cfg, std::uint64_t seed) {
  cfg.validate();
  ParameterSet ps;
  const auto& e = cfg.encoder;
  if (e.kind == EncoderKind::smallconv) {
    Index cin = e.input.channels;
    for (std::size_t i = 0; i < e.widths.size(); ++i) {
      const std::string w = conv_name(i) + ".w";
      ps.add(w, uniform_init(e.widths[i], cin * 9, cin * 9, seed, w));
      add_bn(ps, bn_name("enc", i), e.widths[i]);
      cin = e.widths[i];
    }
  } else {
    const Index in = e.input.size();
    ps.add("enc.fc0.w", uniform_init(in, e.mlp_hidden, in, seed, "enc.fc0.w"));
    add_bn(ps, bn_name("enc", 0), e.mlp_hidden);
    ps.add("enc.fc1.w", uniform_init(e.mlp_hidden, e.mlp_out, e.mlp_hidden, seed, "enc.fc1.w"));
    add_bn(ps, bn_name("enc", 1), e.mlp_out);
  }
  const Index h = e.h_dim(), hid = cfg.projector.hidden_dim, out = cfg.projector.out_dim;
  ps.add("proj.fc0.w", uniform_init(h, hid, h, seed, "proj.fc0.w"));
  add_bn(ps, "proj.bn0", hid);
  ps.add("proj.fc1.w", uniform_init(hid, out, hid, seed, "proj.fc1.w"));
  ps.add("proj.fc1.b", MatD::Zero(1, out));
  return ps;
}

template <typename Scalar>
ModelState<Scalar>::ModelState(const ParameterSet& params) {
  for (const auto& [name, rs] : params.buffers) {
    running[name] = {rs.mean.template cast<Scalar>(), rs.var.template cast<Scalar>()};
  }
}

template <typename Scalar>
void ModelState<Scalar>::commit(ParameterSet& params) const {
  for (const auto& [name, rs] : running) {
    params.buffers[name] = {rs.mean.template cast<double>(), rs.var.template cast<double>()};
  }
}

template <typename Scalar>
ModelNodes build_model(Graph<Scalar>& graph, NodeId x, const ModelConfig& cfg, const ParameterSet& params,
                       ModelState<Scalar>& state, bool training, bool with_projector) {
  auto param = [&](const std::string& name) { return graph.parameter(name, params.at(name).template cast<Scalar>()); };
  auto bn = [&](NodeId in, const std::string& layer, Index channels) {
    StandardizeOptions<Scalar> opt;
    opt.channels = channels;
    opt.gamma = param(layer + ".gamma");
    opt.beta = param(layer + ".beta");
    auto it = state.running.find(layer);
    if (it == state.running.end()) throw Error("missing running statistics for '" + layer + "'");
    opt.running = &it->second;
    opt.training = training;
    return graph.batch_standardize(in, opt);
  };

  const auto& e = cfg.encoder;
  NodeId h;
  if (e.kind == EncoderKind::smallconv) {
    ImageShape shape = e.input;
    NodeId a = x;
    for (std::size_t i = 0; i < e.widths.size(); ++i) {
      a = graph.conv3x3(a, param(conv_name(i) + ".w"), shape);
      shape.channels = e.widths[i];
      a = graph.relu(bn(a, bn_name("enc", i), shape.channels));
      a = graph.avg_pool2x2(a, shape);
      shape.height /= 2;
      shape.width /= 2;
    }
    h = graph.global_avg_pool(a, shape);
  } else {
    NodeId a = graph.relu(bn(graph.matmul(x, param("enc.fc0.w")), bn_name("enc", 0), 0));
    h = graph.relu(bn(graph.matmul(a, param("enc.fc1.w")), bn_name("enc", 1), 0));
  }
  if (!with_projector) return {h, h};
  NodeId p = graph.relu(bn(graph.matmul(h, param("proj.fc0.w")), "proj.bn0", 0));
  NodeId v = graph.add_bias(graph.matmul(p, param("proj.fc1.w")), param("proj.fc1.b"));
  return {h, v};
}

const MatD* Checkpoint::find(const std::string& name) const {
  for (const auto& t : tensors)
    if (t.name == name) return &t.value;
  return nullptr;
}

namespace {

constexpr char kMagic[8] = {'W', 'B', 'C', 'K', 'P', 'T', '0', '1'};

void write_u64(std::ostream& out, std::uint64_t v) {
  unsigned char b[8];
  for (int i = 0; i < 8; ++i) b[i] = static_cast<unsigned char>(v >> (8 * i));
  out.write(reinterpret_cast<const char*>(b), 8);
}

std::uint64_t read_u64(std::istream& in) {
  unsigned char b[8];
  in.read(reinterpret_cast<char*>(b), 8);
  std::uint64_t v = 0;
  for (int i = 0; i < 8; ++i) v |= std::uint64_t(b[i]) << (8 * i);
  return v;
}

}  // namespace

void save_checkpoint(const fs::path& file, const Checkpoint& ckpt) {
  json header;
  header["tensors"] = json::array();
  std::uint64_t offset = 0;
  for (const auto& t : ckpt.tensors) {
    const std::uint64_t nbytes = std::uint64_t(t.value.size()) * sizeof(double);
    header["tensors"].push_back(
        {{"name", t.name}, {"shape", {t.value.rows(), t.value.cols()}}, {"dtype", "f64"}, {"offset", offset}, {"nbytes", nbytes}});
    offset += nbytes;
  }
  header["meta"] = ckpt.meta;
  const std::string text = header.dump();

  if (file.has_parent_path()) fs::create_directories(file.parent_path());
  std::ofstream out(file, std::ios::binary);
  if (!out) throw IoError("checkpoint: cannot write " + file.string());
  out.write(kMagic, 8);
  write_u64(out, text.size());
  out.write(text.data(), std::streamsize(text.size()));
  for (const auto& t : ckpt.tensors) {
    for (Index i = 0; i < t.value.size(); ++i) {
      std::uint64_t bits;
      std::memcpy(&bits, t.value.data() + i, 8);
      write_u64(out, bits);
    }
  }
  if (!out) throw IoError("checkpoint: short write to " + file.string());
}

Checkpoint load_checkpoint(const fs::path& file) {
  std::ifstream in(file, std::ios::binary);
  if (!in) throw IoError("checkpoint: cannot open " + file.string());
  char magic[8];
  in.read(magic, 8);
  if (!in || std::memcmp(magic, kMagic, 8) != 0) throw IoError("checkpoint: " + file.string() + " has a bad magic");
  const std::uint64_t len = read_u64(in);
  if (!in || len > (std::uint64_t(1) << 32)) throw IoError("checkpoint: " + file.string() + " has a bad header length");
  std::string text(len, '\0');
  in.read(text.data(), std::streamsize(len));
  if (!in) throw IoError("checkpoint: " + file.string() + " is truncated in the header");
  json header;
  try {
    header = json::parse(text);
  } catch (const json::exception& e) {
    throw IoError("checkpoint: " + file.string() + " header is not valid JSON: " + e.what());
  }
  const auto data_start = in.tellg();
  Checkpoint ckpt;
  ckpt.meta = header.value("meta", json::object());
  for (const auto& t : header.at("tensors")) {
    if (t.at("dtype") != "f64") throw IoError("checkpoint: unsupported dtype " + t.at("dtype").dump());
    const Index rows = t.at("shape").at(0), cols = t.at("shape").at(1);
    const std::uint64_t offset = t.at("offset");
    in.seekg(data_start + std::streamoff(offset));
    MatD m(rows, cols);
    for (Index i = 0; i < m.size(); ++i) {
      const std::uint64_t bits = read_u64(in);
      std::memcpy(m.data() + i, &bits, 8);
    }
    if (!in) throw IoError("checkpoint: " + file.string() + " is truncated in tensor '" + std::string(t.at("name")) + "'");
    ckpt.tensors.push_back({t.at("name"), std::move(m)});
  }
  return ckpt;
}

void pack_params(const ParameterSet& params, Checkpoint& ckpt) {
  for (const auto& name : params.order) ckpt.tensors.push_back({name, params.at(name)});
  for (const auto& [layer, rs] : params.buffers) {
    ckpt.tensors.push_back({layer + ".running_mean", rs.mean});
    ckpt.tensors.push_back({layer + ".running_var", rs.var});
  }
}

void unpack_params(const Checkpoint& ckpt, ParameterSet& params) {
  auto fetch = [&](const std::string& name, MatD& dst) {
    const MatD* src = ckpt.find(name);
    if (src == nullptr) throw IoError("checkpoint: missing tensor '" + name + "'");
    if (src->rows() != dst.rows() || src->cols() != dst.cols()) {
      throw ShapeError("checkpoint: tensor '" + name + "' is " + shape_str(src->rows(), src->cols()) + ", model expects " +
                       shape_str(dst.rows(), dst.cols()));
    }
    dst = *src;
  };
  for (const auto& name : params.order) fetch(name, params.at(name));
  for (auto& [layer, rs] : params.buffers) {
    MatD mean = rs.mean, var = rs.var;
    fetch(layer + ".running_mean", mean);
    fetch(layer + ".running_var", var);
    rs.mean = mean;
    rs.var = var;
  }
}

json to_json(const ModelConfig& cfg) {
  const auto& e = cfg.encoder;
  json enc = {{"kind", encoder_name(e.kind)}, {"input", {e.input.channels, e.input.height, e.input.width}}};
  if (e.kind == EncoderKind::smallconv) {
    enc["widths"] = e.widths;
  } else {
    enc["mlp_hidden"] = e.mlp_hidden;
    enc["mlp_out"] = e.mlp_out;
  }
  return {{"encoder", enc}, {"projector", {{"hidden_dim", cfg.projector.hidden_dim}, {"out_dim", cfg.projector.out_dim}}}};
}

template struct ModelState<float>;
template struct ModelState<double>;
template ModelNodes build_model<float>(Graph<float>&, NodeId, const ModelConfig&, const ParameterSet&, ModelState<float>&,
                                       bool, bool);
template ModelNodes build_model<double>(Graph<double>&, NodeId, const ModelConfig&, const ParameterSet&,
                                        ModelState<double>&, bool, bool);

}  // namespace whitebed
