#include "whitebed/config.hpp"

#include "whitebed/errors.hpp"
#include "whitebed/random.hpp"

#include <algorithm>
#include <fstream>
#include <set>
#include <sstream>

namespace whitebed {

using nlohmann::json;

namespace {

std::string join(const std::vector<std::string>& xs) {
  std::string out;
  for (const auto& x : xs) out += (out.empty() ? "" : ", ") + x;
  return out;
}

// Typed access to one JSON object; every key read is recorded so that leftovers
// can be reported as unknown.
class Section {
 public:
  Section(const json& doc, std::string path, std::vector<std::string> valid)
      : doc_(doc), path_(std::move(path)), valid_(std::move(valid)) {
    if (!doc_.is_object()) throw ConfigError(path_ + ": expected an object");
    for (const auto& [key, value] : doc_.items()) {
      if (std::find(valid_.begin(), valid_.end(), key) == valid_.end()) {
        throw ConfigError("unknown key '" + where(key) + "' (valid keys: " + join(valid_) + ")");
      }
    }
  }

  bool has(const std::string& key) const { return doc_.contains(key); }

  template <typename T>
  void read(const std::string& key, T& out) const {
    if (!doc_.contains(key)) return;
    try {
      out = doc_.at(key).get<T>();
    } catch (const json::exception&) {
      throw ConfigError(where(key) + ": wrong type (" + std::string(doc_.at(key).type_name()) + ")");
    }
  }

  void read_index(const std::string& key, Index& out) const {
    if (!doc_.contains(key)) return;
    const auto& v = doc_.at(key);
    if (!v.is_number_integer()) throw ConfigError(where(key) + ": expected an integer");
    out = v.get<Index>();
  }

  const json& sub(const std::string& key) const {
    static const json empty = json::object();
    return doc_.contains(key) ? doc_.at(key) : empty;
  }

  std::string where(const std::string& key) const { return path_.empty() ? key : path_ + "." + key; }

 private:
  const json& doc_;
  std::string path_;
  std::vector<std::string> valid_;
};

void require(bool ok, const std::string& message) {
  if (!ok) throw ConfigError(message);
}

DataSource parse_source(const std::string& s) {
  if (s == "synthetic") return DataSource::synthetic;
  if (s == "cifar10") return DataSource::cifar10;
  if (s == "records") return DataSource::records;
  throw ConfigError("data.source: unknown value '" + s + "' (valid: synthetic, cifar10, records)");
}

const char* source_name(DataSource s) {
  switch (s) {
    case DataSource::synthetic: return "synthetic";
    case DataSource::cifar10: return "cifar10";
    case DataSource::records: return "records";
  }
  return "?";
}

std::vector<std::string> loss_keys(LossKind kind) {
  std::vector<std::string> keys{"kind", "d", "normalize"};
  switch (kind) {
    case LossKind::wmse:
      keys.insert(keys.end(), {"sub_size", "iterations", "ridge"});
      break;
    case LossKind::contrastive:
      keys.insert(keys.end(), {"tau", "whiten", "sub_size", "iterations", "ridge"});
      break;
    case LossKind::triplet:
      keys.push_back("margin");
      break;
    case LossKind::bn_mse:
      break;
  }
  return keys;
}

void parse_loss(const json& doc, LossConfig& loss) {
  std::string kind = loss_name(loss.kind);
  if (doc.contains("kind")) {
    if (!doc.at("kind").is_string()) throw ConfigError("loss.kind: expected a string");
    kind = doc.at("kind").get<std::string>();
  }
  loss.kind = parse_loss_kind(kind);
  Section s(doc, "loss", loss_keys(loss.kind));
  s.read_index("d", loss.d);
  s.read("normalize", loss.normalize);
  s.read("whiten", loss.whiten);
  loss.tau = loss.normalize ? 0.5 : 1.0;
  s.read("tau", loss.tau);
  s.read("margin", loss.margin);
  s.read_index("sub_size", loss.slicing.sub_size);
  s.read_index("iterations", loss.slicing.iterations);
  double ridge = loss.ridge.relative;
  s.read("ridge", ridge);
  require(ridge >= 0.0, "loss.ridge must be >= 0");
  loss.ridge = Ridge::scaled(ridge);
}

json loss_json(const LossConfig& l) {
  json j = {{"kind", loss_name(l.kind)}, {"d", l.d}, {"normalize", l.normalize}};
  const bool sliced = l.kind == LossKind::wmse || (l.kind == LossKind::contrastive && l.whiten);
  if (l.kind == LossKind::contrastive) {
    j["tau"] = l.tau;
    j["whiten"] = l.whiten;
  }
  if (l.kind == LossKind::triplet) j["margin"] = l.margin;
  if (sliced) {
    j["sub_size"] = l.slicing.sub_size;
    j["iterations"] = l.slicing.iterations;
    j["ridge"] = l.ridge.relative;
  }
  return j;
}

}  // namespace

RunConfig parse_run_config(const json& doc) {
  RunConfig cfg;
  Section root(doc, "", {"seed", "data", "model", "loss", "augment", "train", "probe"});
  root.read("seed", cfg.seed);

  auto& data = cfg.data;
  {
    Section s(root.sub("data"), "data",
              {"source", "dir", "seed", "classes", "per_class", "test_per_class", "side", "sigma", "train_limit",
               "test_limit"});
    std::string source = source_name(data.source);
    s.read("source", source);
    data.source = parse_source(source);
    s.read("dir", data.dir);
    if (s.has("seed")) {
      std::uint64_t seed = 0;
      s.read("seed", seed);
      data.seed = seed;
    }
    s.read("classes", data.classes);
    s.read_index("per_class", data.per_class);
    s.read_index("test_per_class", data.test_per_class);
    s.read_index("side", data.side);
    s.read("sigma", data.sigma);
    s.read_index("train_limit", data.train_limit);
    s.read_index("test_limit", data.test_limit);
    if (data.source == DataSource::cifar10) data.classes = 10;
    if (data.source != DataSource::synthetic) data.side = kCifarSide;
    require(data.classes >= 2, "data.classes must be >= 2");
    require(data.per_class >= 1 && data.test_per_class >= 1, "data.per_class and data.test_per_class must be >= 1");
    require(data.side >= 8, "data.side must be >= 8");
    require(data.sigma > 0.0, "data.sigma must be > 0");
    require(data.train_limit >= 0 && data.test_limit >= 0, "data limits must be >= 0");
  }

  auto& t = cfg.train;
  t.seed = cfg.seed;
  {
    Section m(root.sub("model"), "model", {"encoder", "projector"});
    Section e(m.sub("encoder"), "model.encoder", {"kind", "widths", "mlp_hidden", "mlp_out"});
    std::string kind = encoder_name(t.model.encoder.kind);
    e.read("kind", kind);
    t.model.encoder.kind = parse_encoder_kind(kind);
    e.read("widths", t.model.encoder.widths);
    e.read_index("mlp_hidden", t.model.encoder.mlp_hidden);
    e.read_index("mlp_out", t.model.encoder.mlp_out);
    t.model.encoder.input = {3, data.side, data.side};
    Section p(m.sub("projector"), "model.projector", {"hidden_dim", "out_dim"});
    p.read_index("hidden_dim", t.model.projector.hidden_dim);
    p.read_index("out_dim", t.model.projector.out_dim);
  }
  parse_loss(root.sub("loss"), t.loss);
  {
    Section a(root.sub("augment"), "augment",
              {"min_area", "max_area", "min_aspect", "max_aspect", "flip_p", "jitter_p", "jitter_strength", "gray_p"});
    auto& g = t.augment;
    a.read("min_area", g.min_area);
    a.read("max_area", g.max_area);
    a.read("min_aspect", g.min_aspect);
    a.read("max_aspect", g.max_aspect);
    a.read("flip_p", g.flip_p);
    a.read("jitter_p", g.jitter_p);
    a.read("jitter_strength", g.jitter_strength);
    a.read("gray_p", g.gray_p);
    require(g.min_area > 0.0 && g.min_area <= g.max_area && g.max_area <= 1.0,
            "augment: need 0 < min_area <= max_area <= 1");
    require(g.min_aspect > 0.0 && g.min_aspect <= g.max_aspect, "augment: need 0 < min_aspect <= max_aspect");
    for (double p : {g.flip_p, g.jitter_p, g.gray_p}) require(p >= 0.0 && p <= 1.0, "augment: probabilities must be in [0, 1]");
    for (double s : g.jitter_strength) require(s >= 0.0, "augment.jitter_strength entries must be >= 0");
  }
  {
    Section s(root.sub("train"), "train",
              {"epochs", "lr", "warmup_iters", "drop_factor", "drop_epochs", "batch_origins", "weight_decay",
               "decoupled_weight_decay", "beta1", "beta2", "eps", "precision", "knn_every", "knn_k", "threads",
               "deterministic"});
    s.read_index("epochs", t.epochs);
    s.read("lr", t.lr);
    s.read_index("warmup_iters", t.warmup_iters);
    s.read("drop_factor", t.drop_factor);
    s.read("drop_epochs", t.drop_epochs);
    s.read_index("batch_origins", t.batch_origins);
    s.read("weight_decay", t.adam.weight_decay);
    s.read("decoupled_weight_decay", t.adam.decoupled);
    s.read("beta1", t.adam.beta1);
    s.read("beta2", t.adam.beta2);
    s.read("eps", t.adam.eps);
    std::string precision = precision_name(t.precision);
    s.read("precision", precision);
    t.precision = parse_precision(precision);
    s.read_index("knn_every", t.knn_every);
    s.read_index("knn_k", t.knn_k);
    s.read("threads", t.threads);
    s.read("deterministic", t.deterministic);
  }
  {
    Section s(root.sub("probe"), "probe", {"epochs", "lr_start", "lr_end", "weight_decay", "batch_size"});
    s.read_index("epochs", cfg.probe.epochs);
    s.read("lr_start", cfg.probe.lr_start);
    s.read("lr_end", cfg.probe.lr_end);
    s.read("weight_decay", cfg.probe.weight_decay);
    s.read_index("batch_size", cfg.probe.batch_size);
    cfg.probe.seed = cfg.seed;
    cfg.probe.validate();
  }
  t.validate();
  t.loss = t.loss.resolved(t.model.projector.out_dim);
  return cfg;
}

json to_json(const RunConfig& cfg) {
  const auto& d = cfg.data;
  const auto& t = cfg.train;
  json data = {{"source", source_name(d.source)}, {"classes", d.classes}, {"side", d.side}};
  if (d.source == DataSource::synthetic) {
    data["seed"] = d.seed.value_or(cfg.seed);
    data["per_class"] = d.per_class;
    data["test_per_class"] = d.test_per_class;
    data["sigma"] = d.sigma;
  } else {
    data["dir"] = d.dir;
  }
  data["train_limit"] = d.train_limit;
  data["test_limit"] = d.test_limit;

  json model = to_json(t.model);
  model["encoder"].erase("input");  // follows data.side
  const auto& a = t.augment;
  return {
      {"seed", cfg.seed},
      {"data", data},
      {"model", model},
      {"loss", loss_json(t.loss)},
      {"augment",
       {{"min_area", a.min_area},
        {"max_area", a.max_area},
        {"min_aspect", a.min_aspect},
        {"max_aspect", a.max_aspect},
        {"flip_p", a.flip_p},
        {"jitter_p", a.jitter_p},
        {"jitter_strength", a.jitter_strength},
        {"gray_p", a.gray_p}}},
      {"train",
       {{"epochs", t.epochs},
        {"lr", t.lr},
        {"warmup_iters", t.warmup_iters},
        {"drop_factor", t.drop_factor},
        {"drop_epochs", t.drop_epochs},
        {"batch_origins", t.batch_origins},
        {"weight_decay", t.adam.weight_decay},
        {"decoupled_weight_decay", t.adam.decoupled},
        {"beta1", t.adam.beta1},
        {"beta2", t.adam.beta2},
        {"eps", t.adam.eps},
        {"precision", precision_name(t.precision)},
        {"knn_every", t.knn_every},
        {"knn_k", t.knn_k},
        {"threads", t.threads},
        {"deterministic", t.deterministic}}},
      {"probe",
       {{"epochs", cfg.probe.epochs},
        {"lr_start", cfg.probe.lr_start},
        {"lr_end", cfg.probe.lr_end},
        {"weight_decay", cfg.probe.weight_decay},
        {"batch_size", cfg.probe.batch_size}}},
  };
}

json read_json_file(const std::filesystem::path& file) {
  std::ifstream in(file);
  if (!in) throw IoError("cannot open " + file.string());
  try {
    return json::parse(in);
  } catch (const json::parse_error& e) {
    throw ConfigError(file.string() + ": invalid JSON (" + e.what() + ")");
  }
}

void apply_override(json& doc, const std::string& assignment) {
  const auto eq = assignment.find('=');
  if (eq == std::string::npos || eq == 0) throw ConfigError("override '" + assignment + "' is not key=value");
  const std::string path = assignment.substr(0, eq), text = assignment.substr(eq + 1);
  json value;
  try {
    value = json::parse(text);
  } catch (const json::parse_error&) {
    value = text;
  }
  json* node = &doc;
  std::stringstream parts(path);
  std::string key;
  std::vector<std::string> keys;
  while (std::getline(parts, key, '.')) keys.push_back(key);
  for (std::size_t i = 0; i + 1 < keys.size(); ++i) {
    json& next = (*node)[keys[i]];
    if (next.is_null()) next = json::object();
    if (!next.is_object()) throw ConfigError("override '" + path + "': '" + keys[i] + "' is not an object");
    node = &next;
  }
  (*node)[keys.back()] = value;
}

namespace {

Dataset take(Dataset d, Index limit) {
  if (limit <= 0 || limit >= d.size()) return d;
  d.images.resize(std::size_t(limit));
  d.labels.resize(std::size_t(limit));
  return d;
}

}  // namespace

LoadedData load_data(const RunConfig& cfg) {
  const auto& d = cfg.data;
  LoadedData out;
  switch (d.source) {
    case DataSource::synthetic: {
      SyntheticConfig sc;
      sc.classes = d.classes;
      sc.per_class = d.per_class;
      sc.side = d.side;
      sc.sigma = d.sigma;
      sc.seed = d.seed.value_or(cfg.seed);
      out.train = gen_synthetic(sc);
      sc.per_class = d.test_per_class;
      sc.seed = derive_seed({sc.seed, fnv1a("synthetic-test")});
      out.test = gen_synthetic(sc);
      out.name = "synthetic";
      break;
    }
    case DataSource::cifar10:
      if (d.dir.empty()) throw ConfigError("data.source cifar10 needs a data directory (--data-dir or WHITEBED_DATA)");
      out.train = load_cifar10(d.dir, Split::train);
      out.test = load_cifar10(d.dir, Split::test);
      out.name = "cifar10";
      break;
    case DataSource::records: {
      if (d.dir.empty()) throw ConfigError("data.source records needs a data directory (--data-dir or WHITEBED_DATA)");
      const std::filesystem::path dir(d.dir);
      out.train = read_cifar_file(dir / "train.bin", 1, d.classes);
      out.test = read_cifar_file(dir / "test.bin", 1, d.classes);
      out.name = "records";
      break;
    }
  }
  out.train = take(std::move(out.train), d.train_limit);
  out.test = take(std::move(out.test), d.test_limit);
  out.train.validate();
  out.test.validate();
  return out;
}

}  // namespace whitebed
