#include "whitebed/autodiff.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <limits>

namespace whitebed {

const char* op_name(OpKind op) {
  switch (op) {
    case OpKind::parameter: return "parameter";
    case OpKind::input: return "input";
    case OpKind::matmul: return "matmul";
    case OpKind::add_bias: return "add_bias";
    case OpKind::relu: return "relu";
    case OpKind::batch_standardize: return "batch_standardize";
    case OpKind::l2_normalize_rows: return "l2_normalize_rows";
    case OpKind::whitening: return "whitening";
    case OpKind::mse_mean: return "mse_mean";
    case OpKind::scale_add: return "scale_add";
    case OpKind::softmax_cross_entropy: return "softmax_cross_entropy";
    case OpKind::concat_rows: return "concat_rows";
    case OpKind::slice_rows: return "slice_rows";
    case OpKind::conv3x3: return "conv3x3";
    case OpKind::avg_pool2x2: return "avg_pool2x2";
    case OpKind::global_avg_pool: return "global_avg_pool";
    case OpKind::row_dot: return "row_dot";
    case OpKind::sum_all: return "sum_all";
  }
  return "?";
}

namespace {

using Clock = std::chrono::steady_clock;

double elapsed_ms(Clock::time_point since) {
  return std::chrono::duration<double, std::milli>(Clock::now() - since).count();
}

// Strided views over a row-major K x (C*S) activation: channel c of every row.
template <typename Scalar>
auto channel_block(Mat<Scalar>& m, Index c, Index spatial) {
  return m.middleCols(c * spatial, spatial);
}

template <typename Scalar>
auto channel_block(const Mat<Scalar>& m, Index c, Index spatial) {
  return m.middleCols(c * spatial, spatial);
}

}  // namespace

// ---------------------------------------------------------------------------
// construction

template <typename Scalar>
NodeId Graph<Scalar>::push(OpKind op, std::vector<NodeId> inputs, Attrs attrs, std::string name) {
  Node n;
  n.op = op;
  for (NodeId in : inputs) {
    check_input(in);
    n.inputs.push_back(in.index);
  }
  n.attrs = std::move(attrs);
  n.name = name.empty() ? std::string(op_name(op)) + "#" + std::to_string(nodes_.size()) : std::move(name);
  nodes_.push_back(std::move(n));
  evaluated_ = false;
  return NodeId{nodes_.size() - 1};
}

template <typename Scalar>
void Graph<Scalar>::check_input(NodeId id) const {
  if (!id.valid() || id.index >= nodes_.size()) {
    throw Error("graph: invalid node reference " + std::to_string(id.index));
  }
}

template <typename Scalar>
const typename Graph<Scalar>::Node& Graph<Scalar>::at(NodeId id) const {
  check_input(id);
  return nodes_[id.index];
}

template <typename Scalar>
NodeId Graph<Scalar>::input(const std::string& name, Index cols) {
  if (inputs_.count(name) || params_.count(name)) throw Error("graph: duplicate leaf name '" + name + "'");
  NodeId id = push(OpKind::input, {}, InputAttrs{cols}, name);
  inputs_[name] = id.index;
  return id;
}

template <typename Scalar>
NodeId Graph<Scalar>::parameter(const std::string& name, MatS value) {
  if (inputs_.count(name) || params_.count(name)) throw Error("graph: duplicate leaf name '" + name + "'");
  NodeId id = push(OpKind::parameter, {}, NoAttrs{}, name);
  nodes_[id.index].value = std::move(value);
  params_[name] = id.index;
  return id;
}

template <typename Scalar>
NodeId Graph<Scalar>::matmul(NodeId a, NodeId b, bool transpose_b) {
  return push(OpKind::matmul, {a, b}, MatmulAttrs{transpose_b});
}

template <typename Scalar>
NodeId Graph<Scalar>::add_bias(NodeId x, NodeId bias) {
  return push(OpKind::add_bias, {x, bias}, NoAttrs{});
}

template <typename Scalar>
NodeId Graph<Scalar>::relu(NodeId x) {
  return push(OpKind::relu, {x}, NoAttrs{});
}

template <typename Scalar>
NodeId Graph<Scalar>::batch_standardize(NodeId x, const StandardizeOptions<Scalar>& options) {
  if (options.gamma.has_value() != options.beta.has_value()) {
    throw Error("batch_standardize: gamma and beta must be given together");
  }
  std::vector<NodeId> ins{x};
  if (options.gamma) {
    ins.push_back(*options.gamma);
    ins.push_back(*options.beta);
  }
  StandardizeAttrs attrs;
  attrs.options = options;
  return push(OpKind::batch_standardize, ins, std::move(attrs));
}

template <typename Scalar>
NodeId Graph<Scalar>::l2_normalize_rows(NodeId x) {
  return push(OpKind::l2_normalize_rows, {x}, NormalizeAttrs{});
}

template <typename Scalar>
NodeId Graph<Scalar>::whitening(NodeId x, Ridge ridge, std::string label) {
  WhiteningAttrs attrs;
  attrs.ridge = ridge;
  attrs.label = std::move(label);
  return push(OpKind::whitening, {x}, std::move(attrs));
}

template <typename Scalar>
NodeId Graph<Scalar>::mse_mean(NodeId a, std::optional<NodeId> b) {
  std::vector<NodeId> ins{a};
  if (b) ins.push_back(*b);
  return push(OpKind::mse_mean, ins, NoAttrs{});
}

template <typename Scalar>
NodeId Graph<Scalar>::scale_add(NodeId a, std::optional<NodeId> b, Scalar alpha, Scalar beta, Scalar offset) {
  std::vector<NodeId> ins{a};
  if (b) ins.push_back(*b);
  return push(OpKind::scale_add, ins, ScaleAddAttrs{alpha, beta, offset});
}

template <typename Scalar>
NodeId Graph<Scalar>::softmax_cross_entropy(NodeId logits, std::vector<Index> targets, bool exclude_self) {
  SoftmaxAttrs attrs;
  attrs.targets = std::move(targets);
  attrs.exclude_self = exclude_self;
  return push(OpKind::softmax_cross_entropy, {logits}, std::move(attrs));
}

template <typename Scalar>
NodeId Graph<Scalar>::concat_rows(const std::vector<NodeId>& parts) {
  if (parts.empty()) throw Error("concat_rows: no inputs");
  return push(OpKind::concat_rows, parts, NoAttrs{});
}

template <typename Scalar>
NodeId Graph<Scalar>::slice_rows(NodeId x, std::vector<Index> rows) {
  return push(OpKind::slice_rows, {x}, GatherAttrs{std::move(rows)});
}

template <typename Scalar>
NodeId Graph<Scalar>::conv3x3(NodeId x, NodeId weight, ImageShape in) {
  return push(OpKind::conv3x3, {x, weight}, ImageAttrs{in, {}});
}

template <typename Scalar>
NodeId Graph<Scalar>::avg_pool2x2(NodeId x, ImageShape in) {
  if (in.height % 2 != 0 || in.width % 2 != 0) {
    throw ShapeError("avg_pool2x2: spatial size " + shape_str(in.height, in.width) + " is not even");
  }
  return push(OpKind::avg_pool2x2, {x}, ImageAttrs{in, {}});
}

template <typename Scalar>
NodeId Graph<Scalar>::global_avg_pool(NodeId x, ImageShape in) {
  return push(OpKind::global_avg_pool, {x}, ImageAttrs{in, {}});
}

template <typename Scalar>
NodeId Graph<Scalar>::row_dot(NodeId a, NodeId b) {
  return push(OpKind::row_dot, {a, b}, NoAttrs{});
}

template <typename Scalar>
NodeId Graph<Scalar>::sum_all(NodeId x, Scalar scale) {
  return push(OpKind::sum_all, {x}, SumAttrs{scale});
}

template <typename Scalar>
void Graph<Scalar>::set_output(NodeId id) {
  check_input(id);
  output_ = id.index;
}

template <typename Scalar>
NodeId Graph<Scalar>::output() const {
  if (nodes_.empty()) throw Error("graph: empty graph has no output");
  return NodeId{output_.value_or(nodes_.size() - 1)};
}

template <typename Scalar>
const Mat<Scalar>& Graph<Scalar>::value(NodeId id) const {
  return at(id).value;
}

template <typename Scalar>
const Mat<Scalar>& Graph<Scalar>::grad(NodeId id) const {
  const Node& n = at(id);
  if (n.op != OpKind::parameter && n.op != OpKind::input) {
    throw Error("graph: gradients are only kept for leaves, '" + n.name + "' is " + op_name(n.op));
  }
  return n.grad;
}

template <typename Scalar>
OpKind Graph<Scalar>::kind(NodeId id) const {
  return at(id).op;
}

template <typename Scalar>
std::vector<std::string> Graph<Scalar>::parameter_names() const {
  std::vector<std::string> names;
  for (const auto& [name, idx] : params_) names.push_back(name);
  return names;
}

template <typename Scalar>
Mat<Scalar>& Graph<Scalar>::parameter_value(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw Error("graph: no parameter named '" + name + "'");
  evaluated_ = false;
  return nodes_[it->second].value;
}

template <typename Scalar>
const Mat<Scalar>& Graph<Scalar>::parameter_value(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw Error("graph: no parameter named '" + name + "'");
  return nodes_[it->second].value;
}

template <typename Scalar>
void Graph<Scalar>::shape_fail(const Node& n, const std::string& detail) const {
  throw ShapeError("node '" + n.name + "' (" + op_name(n.op) + "): " + detail);
}

// ---------------------------------------------------------------------------
// forward

template <typename Scalar>
const Mat<Scalar>& Graph<Scalar>::forward(const Bindings<Scalar>& bindings) {
  for (Node& n : nodes_) {
    if (profiling_) {
      auto t0 = Clock::now();
      eval_node(n, bindings);
      timings_.forward_ms[static_cast<std::size_t>(n.op)] += elapsed_ms(t0);
    } else {
      eval_node(n, bindings);
    }
  }
  evaluated_ = true;
  return nodes_[output().index].value;
}

template <typename Scalar>
void Graph<Scalar>::eval_node(Node& n, const Bindings<Scalar>& bindings) {
  auto in = [&](std::size_t i) -> const MatS& { return nodes_[n.inputs[i]].value; };

  switch (n.op) {
    case OpKind::parameter:
      break;

    case OpKind::input: {
      auto it = bindings.find(n.name);
      if (it == bindings.end()) shape_fail(n, "input is not bound");
      const Index cols = std::get<InputAttrs>(n.attrs).cols;
      if (cols >= 0 && it->second.cols() != cols) {
        shape_fail(n, "expected " + std::to_string(cols) + " columns, got " +
                          shape_str(it->second.rows(), it->second.cols()));
      }
      n.value = it->second;
      break;
    }

    case OpKind::matmul: {
      const MatS& a = in(0);
      const MatS& b = in(1);
      const bool tb = std::get<MatmulAttrs>(n.attrs).transpose_b;
      const Index inner = tb ? b.cols() : b.rows();
      if (a.cols() != inner) {
        shape_fail(n, "cannot multiply " + shape_str(a.rows(), a.cols()) + " by " +
                          (tb ? "transpose of " : "") + shape_str(b.rows(), b.cols()));
      }
      if (tb) {
        n.value.noalias() = a * b.transpose();
      } else {
        n.value.noalias() = a * b;
      }
      break;
    }

    case OpKind::add_bias: {
      const MatS& x = in(0);
      const MatS& b = in(1);
      if (b.rows() != 1 || b.cols() != x.cols()) {
        shape_fail(n, "expected bias 1x" + std::to_string(x.cols()) + ", got " + shape_str(b.rows(), b.cols()));
      }
      n.value = x.rowwise() + b.row(0);
      break;
    }

    case OpKind::relu:
      n.value = in(0).cwiseMax(Scalar(0));
      break;

    case OpKind::batch_standardize: {
      auto& at = std::get<StandardizeAttrs>(n.attrs);
      const auto& opt = at.options;
      const MatS& x = in(0);
      const Index groups = opt.channels > 0 ? opt.channels : x.cols();
      if (opt.channels > 0 && x.cols() % opt.channels != 0) {
        shape_fail(n, std::to_string(x.cols()) + " columns do not split into " + std::to_string(opt.channels) +
                          " channels");
      }
      const Index width = x.cols() / groups;
      if (opt.gamma && (in(1).size() != groups || in(2).size() != groups)) {
        shape_fail(n, "affine parameters must have " + std::to_string(groups) + " entries");
      }
      const Index count = x.rows() * width;
      at.used_batch_stats = opt.training || opt.running == nullptr;
      if (!opt.training && opt.running == nullptr) {
        throw Error("node '" + n.name + "': evaluation mode needs running statistics");
      }
      if (at.used_batch_stats && count < 2) {
        shape_fail(n, "batch statistics need at least 2 values per feature, got " + std::to_string(count));
      }
      RowVec<Scalar> mean(groups), var(groups);
      if (at.used_batch_stats) {
        for (Index g = 0; g < groups; ++g) {
          auto blk = channel_block(x, g, width);
          const Scalar m = blk.sum() / Scalar(double(count));
          mean(g) = m;
          var(g) = (blk.array() - m).square().sum() / Scalar(double(count));
        }
        if (opt.running != nullptr && opt.training) {
          auto& rs = *opt.running;
          if (rs.mean.size() != groups) {
            rs.mean = mean;
            rs.var = var;
          } else {
            const Scalar mom = Scalar(opt.momentum);
            rs.mean = mom * rs.mean + (Scalar(1) - mom) * mean;
            rs.var = mom * rs.var + (Scalar(1) - mom) * var;
          }
        }
      } else {
        if (opt.running->mean.size() != groups) {
          shape_fail(n, "running statistics have " + std::to_string(opt.running->mean.size()) +
                            " entries, expected " + std::to_string(groups));
        }
        mean = opt.running->mean;
        var = opt.running->var;
      }
      at.inv_std = (var.array() + Scalar(opt.eps)).rsqrt().matrix();
      at.xhat.resize(x.rows(), x.cols());
      n.value.resize(x.rows(), x.cols());
      for (Index g = 0; g < groups; ++g) {
        auto xh = channel_block(at.xhat, g, width);
        xh = ((channel_block(x, g, width).array() - mean(g)) * at.inv_std(g)).matrix();
        auto y = channel_block(n.value, g, width);
        if (opt.gamma) {
          y = (xh.array() * in(1)(g) + in(2)(g)).matrix();
        } else {
          y = xh;
        }
      }
      break;
    }

    case OpKind::l2_normalize_rows: {
      auto& at = std::get<NormalizeAttrs>(n.attrs);
      const MatS& x = in(0);
      at.norms = x.rowwise().norm();
      for (Index i = 0; i < x.rows(); ++i) {
        if (!(at.norms(i) > Scalar(0))) shape_fail(n, "row " + std::to_string(i) + " has zero norm");
      }
      n.value = x.array().colwise() / at.norms.array();
      break;
    }

    case OpKind::whitening: {
      auto& at = std::get<WhiteningAttrs>(n.attrs);
      at.v = in(0).template cast<double>();
      try {
        auto res = whiten_batch(at.v, at.ridge);
        at.stats = std::move(res.stats);
        n.value = res.z.template cast<Scalar>();
      } catch (const NotPositiveDefinite& e) {
        const std::string where = at.label.empty() ? n.name : at.label;
        throw NotPositiveDefinite(e.pivot(), where + ": " + e.what());
      } catch (const Error& e) {
        const std::string where = at.label.empty() ? n.name : at.label;
        throw Error(where + ": " + e.what());
      }
      break;
    }

    case OpKind::mse_mean: {
      const MatS& a = in(0);
      if (a.rows() == 0) shape_fail(n, "empty input");
      Scalar total;
      if (n.inputs.size() == 2) {
        const MatS& b = in(1);
        if (b.rows() != a.rows() || b.cols() != a.cols()) {
          shape_fail(n, "operands " + shape_str(a.rows(), a.cols()) + " and " + shape_str(b.rows(), b.cols()));
        }
        total = (a - b).squaredNorm();
      } else {
        total = a.squaredNorm();
      }
      n.value.resize(1, 1);
      n.value(0, 0) = total / Scalar(double(a.rows()));
      break;
    }

    case OpKind::scale_add: {
      const auto& at = std::get<ScaleAddAttrs>(n.attrs);
      const MatS& a = in(0);
      if (n.inputs.size() == 2) {
        const MatS& b = in(1);
        if (b.rows() != a.rows() || b.cols() != a.cols()) {
          shape_fail(n, "operands " + shape_str(a.rows(), a.cols()) + " and " + shape_str(b.rows(), b.cols()));
        }
        n.value = ((at.alpha * a + at.beta * b).array() + at.offset).matrix();
      } else {
        n.value = ((at.alpha * a).array() + at.offset).matrix();
      }
      break;
    }

    case OpKind::softmax_cross_entropy: {
      auto& at = std::get<SoftmaxAttrs>(n.attrs);
      const MatS& l = in(0);
      const Index rows = l.rows();
      if (static_cast<Index>(at.targets.size()) != rows) {
        shape_fail(n, std::to_string(at.targets.size()) + " targets for " + std::to_string(rows) + " rows");
      }
      if (at.exclude_self && l.cols() != rows) shape_fail(n, "exclude_self needs square logits");
      at.probs.resize(rows, l.cols());
      Scalar total = 0;
      for (Index i = 0; i < rows; ++i) {
        const Index t = at.targets[static_cast<std::size_t>(i)];
        if (t < 0 || t >= l.cols() || (at.exclude_self && t == i)) {
          shape_fail(n, "invalid target " + std::to_string(t) + " for row " + std::to_string(i));
        }
        Scalar mx = -std::numeric_limits<Scalar>::infinity();
        for (Index j = 0; j < l.cols(); ++j) {
          if (at.exclude_self && j == i) continue;
          mx = std::max(mx, l(i, j));
        }
        Scalar denom = 0;
        for (Index j = 0; j < l.cols(); ++j) {
          if (at.exclude_self && j == i) {
            at.probs(i, j) = 0;
            continue;
          }
          at.probs(i, j) = std::exp(l(i, j) - mx);
          denom += at.probs(i, j);
        }
        at.probs.row(i) /= denom;
        total += mx + std::log(denom) - l(i, t);
      }
      n.value.resize(1, 1);
      n.value(0, 0) = total / Scalar(double(rows));
      break;
    }

    case OpKind::concat_rows: {
      Index rows = 0;
      const Index cols = in(0).cols();
      for (std::size_t i = 0; i < n.inputs.size(); ++i) {
        if (in(i).cols() != cols) {
          shape_fail(n, "part " + std::to_string(i) + " has " + std::to_string(in(i).cols()) + " columns, expected " +
                            std::to_string(cols));
        }
        rows += in(i).rows();
      }
      n.value.resize(rows, cols);
      Index r = 0;
      for (std::size_t i = 0; i < n.inputs.size(); ++i) {
        n.value.middleRows(r, in(i).rows()) = in(i);
        r += in(i).rows();
      }
      break;
    }

    case OpKind::slice_rows: {
      const auto& rows = std::get<GatherAttrs>(n.attrs).rows;
      const MatS& x = in(0);
      n.value.resize(static_cast<Index>(rows.size()), x.cols());
      for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i] < 0 || rows[i] >= x.rows()) {
          shape_fail(n, "row index " + std::to_string(rows[i]) + " out of range for " + std::to_string(x.rows()) +
                            " rows");
        }
        n.value.row(static_cast<Index>(i)) = x.row(rows[i]);
      }
      break;
    }

    case OpKind::conv3x3: {
      auto& at = std::get<ImageAttrs>(n.attrs);
      const MatS& x = in(0);
      const MatS& w = in(1);
      const ImageShape s = at.in;
      if (x.cols() != s.size()) {
        shape_fail(n, "expected " + std::to_string(s.size()) + " columns per image, got " + std::to_string(x.cols()));
      }
      if (w.cols() != s.channels * 9) {
        shape_fail(n, "weight has " + std::to_string(w.cols()) + " columns, expected " +
                          std::to_string(s.channels * 9));
      }
      const Index batch = x.rows();
      const Index hw = s.spatial();
      // im2col: (C*9) x (batch*H*W)
      at.cols.setZero(s.channels * 9, batch * hw);
      for (Index b = 0; b < batch; ++b) {
        for (Index c = 0; c < s.channels; ++c) {
          const Scalar* src = x.data() + b * x.cols() + c * hw;
          for (Index ky = 0; ky < 3; ++ky) {
            for (Index kx = 0; kx < 3; ++kx) {
              Scalar* dst = at.cols.data() + (c * 9 + ky * 3 + kx) * at.cols.cols() + b * hw;
              for (Index y = 0; y < s.height; ++y) {
                const Index sy = y + ky - 1;
                if (sy < 0 || sy >= s.height) continue;
                const Index x0 = std::max<Index>(0, 1 - kx);
                const Index x1 = std::min<Index>(s.width, s.width + 1 - kx);
                for (Index xx = x0; xx < x1; ++xx) dst[y * s.width + xx] = src[sy * s.width + xx + kx - 1];
              }
            }
          }
        }
      }
      MatS big;
      big.noalias() = w * at.cols;  // out_channels x (batch*hw)
      const Index co = w.rows();
      n.value.resize(batch, co * hw);
      for (Index b = 0; b < batch; ++b) {
        for (Index o = 0; o < co; ++o) {
          n.value.row(b).segment(o * hw, hw) = big.row(o).segment(b * hw, hw);
        }
      }
      break;
    }

    case OpKind::avg_pool2x2: {
      const ImageShape s = std::get<ImageAttrs>(n.attrs).in;
      const MatS& x = in(0);
      if (x.cols() != s.size()) {
        shape_fail(n, "expected " + std::to_string(s.size()) + " columns per image, got " + std::to_string(x.cols()));
      }
      const Index oh = s.height / 2, ow = s.width / 2;
      n.value.resize(x.rows(), s.channels * oh * ow);
      for (Index b = 0; b < x.rows(); ++b) {
        for (Index c = 0; c < s.channels; ++c) {
          const Scalar* src = x.data() + b * x.cols() + c * s.spatial();
          Scalar* dst = n.value.data() + b * n.value.cols() + c * oh * ow;
          for (Index y = 0; y < oh; ++y) {
            for (Index xx = 0; xx < ow; ++xx) {
              const Scalar* p = src + 2 * y * s.width + 2 * xx;
              dst[y * ow + xx] = Scalar(0.25) * (p[0] + p[1] + p[s.width] + p[s.width + 1]);
            }
          }
        }
      }
      break;
    }

    case OpKind::global_avg_pool: {
      const ImageShape s = std::get<ImageAttrs>(n.attrs).in;
      const MatS& x = in(0);
      if (x.cols() != s.size()) {
        shape_fail(n, "expected " + std::to_string(s.size()) + " columns per image, got " + std::to_string(x.cols()));
      }
      n.value.resize(x.rows(), s.channels);
      for (Index c = 0; c < s.channels; ++c) {
        n.value.col(c) = channel_block(x, c, s.spatial()).rowwise().sum() / Scalar(double(s.spatial()));
      }
      break;
    }

    case OpKind::row_dot: {
      const MatS& a = in(0);
      const MatS& b = in(1);
      if (b.rows() != a.rows() || b.cols() != a.cols()) {
        shape_fail(n, "operands " + shape_str(a.rows(), a.cols()) + " and " + shape_str(b.rows(), b.cols()));
      }
      n.value = a.cwiseProduct(b).rowwise().sum();
      break;
    }

    case OpKind::sum_all: {
      n.value.resize(1, 1);
      n.value(0, 0) = std::get<SumAttrs>(n.attrs).scale * in(0).sum();
      break;
    }
  }
}

// ---------------------------------------------------------------------------
// backward

template <typename Scalar>
std::map<std::string, Mat<Scalar>> Graph<Scalar>::backward() {
  if (!evaluated_) throw Error("graph: backward() called before forward()");
  const std::size_t out = output().index;
  if (nodes_[out].value.rows() != 1 || nodes_[out].value.cols() != 1) {
    throw ShapeError("graph: backward needs a 1x1 output, got " +
                     shape_str(nodes_[out].value.rows(), nodes_[out].value.cols()));
  }
  for (Node& n : nodes_) n.grad.setZero(n.value.rows(), n.value.cols());
  nodes_[out].grad(0, 0) = Scalar(1);

  for (std::size_t i = out + 1; i-- > 0;) {
    Node& n = nodes_[i];
    if (profiling_) {
      auto t0 = Clock::now();
      backprop_node(n);
      timings_.backward_ms[static_cast<std::size_t>(n.op)] += elapsed_ms(t0);
    } else {
      backprop_node(n);
    }
    if (n.op != OpKind::parameter && n.op != OpKind::input) n.grad = MatS();
  }

  std::map<std::string, MatS> grads;
  for (const auto& [name, idx] : params_) grads[name] = nodes_[idx].grad;
  return grads;
}

template <typename Scalar>
void Graph<Scalar>::backprop_node(Node& n) {
  if (n.grad.size() == 0) return;
  const MatS& g = n.grad;
  auto in = [&](std::size_t i) -> const MatS& { return nodes_[n.inputs[i]].value; };
  auto gin = [&](std::size_t i) -> MatS& { return nodes_[n.inputs[i]].grad; };

  switch (n.op) {
    case OpKind::parameter:
    case OpKind::input:
      break;

    case OpKind::matmul: {
      const bool tb = std::get<MatmulAttrs>(n.attrs).transpose_b;
      const MatS& a = in(0);
      const MatS& b = in(1);
      if (tb) {
        gin(0).noalias() += g * b;
        gin(1).noalias() += g.transpose() * a;
      } else {
        gin(0).noalias() += g * b.transpose();
        gin(1).noalias() += a.transpose() * g;
      }
      break;
    }

    case OpKind::add_bias:
      gin(0) += g;
      gin(1) += g.colwise().sum();
      break;

    case OpKind::relu:
      gin(0).array() += (in(0).array() > Scalar(0)).select(g.array(), Scalar(0));
      break;

    case OpKind::batch_standardize: {
      const auto& at = std::get<StandardizeAttrs>(n.attrs);
      const auto& opt = at.options;
      const Index groups = at.inv_std.size();
      const Index width = g.cols() / groups;
      const Index count = g.rows() * width;
      for (Index c = 0; c < groups; ++c) {
        auto gb = channel_block(g, c, width);
        auto xh = channel_block(at.xhat, c, width);
        const Scalar scale = opt.gamma ? in(1)(c) : Scalar(1);
        if (opt.gamma) {
          gin(1)(c) += gb.cwiseProduct(xh).sum();
          gin(2)(c) += gb.sum();
        }
        auto dx = channel_block(gin(0), c, width);
        if (at.used_batch_stats) {
          const Scalar sum_g = gb.sum();
          const Scalar sum_gx = gb.cwiseProduct(xh).sum();
          const Scalar k = scale * at.inv_std(c) / Scalar(double(count));
          dx.array() += k * (Scalar(double(count)) * gb.array() - sum_g - xh.array() * sum_gx);
        } else {
          dx.array() += gb.array() * (scale * at.inv_std(c));
        }
      }
      break;
    }

    case OpKind::l2_normalize_rows: {
      const auto& at = std::get<NormalizeAttrs>(n.attrs);
      const MatS& y = n.value;
      Eigen::Matrix<Scalar, Eigen::Dynamic, 1> proj = g.cwiseProduct(y).rowwise().sum();
      gin(0).array() += (g.array() - y.array().colwise() * proj.array()).colwise() / at.norms.array();
      break;
    }

    case OpKind::whitening: {
      const auto& at = std::get<WhiteningAttrs>(n.attrs);
      Mat<double> gd = g.template cast<double>();
      gin(0) += whitening_backward(gd, at.v, at.stats).template cast<Scalar>();
      break;
    }

    case OpKind::mse_mean: {
      const Scalar go = g(0, 0);
      const MatS& a = in(0);
      const Scalar k = Scalar(2) * go / Scalar(double(a.rows()));
      if (n.inputs.size() == 2) {
        MatS diff = a - in(1);
        gin(0) += k * diff;
        gin(1) -= k * diff;
      } else {
        gin(0) += k * a;
      }
      break;
    }

    case OpKind::scale_add: {
      const auto& at = std::get<ScaleAddAttrs>(n.attrs);
      gin(0) += at.alpha * g;
      if (n.inputs.size() == 2) gin(1) += at.beta * g;
      break;
    }

    case OpKind::softmax_cross_entropy: {
      const auto& at = std::get<SoftmaxAttrs>(n.attrs);
      const Index rows = at.probs.rows();
      const Scalar k = g(0, 0) / Scalar(double(rows));
      MatS d = at.probs;
      for (Index i = 0; i < rows; ++i) d(i, at.targets[static_cast<std::size_t>(i)]) -= Scalar(1);
      gin(0) += k * d;
      break;
    }

    case OpKind::concat_rows: {
      Index r = 0;
      for (std::size_t i = 0; i < n.inputs.size(); ++i) {
        const Index rows = in(i).rows();
        gin(i) += g.middleRows(r, rows);
        r += rows;
      }
      break;
    }

    case OpKind::slice_rows: {
      const auto& rows = std::get<GatherAttrs>(n.attrs).rows;
      MatS& dx = gin(0);
      for (std::size_t i = 0; i < rows.size(); ++i) dx.row(rows[i]) += g.row(static_cast<Index>(i));
      break;
    }

    case OpKind::conv3x3: {
      const auto& at = std::get<ImageAttrs>(n.attrs);
      const ImageShape s = at.in;
      const MatS& w = in(1);
      const Index batch = g.rows();
      const Index hw = s.spatial();
      const Index co = w.rows();
      MatS big(co, batch * hw);
      for (Index b = 0; b < batch; ++b) {
        for (Index o = 0; o < co; ++o) big.row(o).segment(b * hw, hw) = g.row(b).segment(o * hw, hw);
      }
      gin(1).noalias() += big * at.cols.transpose();
      MatS dcols;
      dcols.noalias() = w.transpose() * big;
      MatS& dx = gin(0);
      for (Index b = 0; b < batch; ++b) {
        for (Index c = 0; c < s.channels; ++c) {
          Scalar* dst = dx.data() + b * dx.cols() + c * hw;
          for (Index ky = 0; ky < 3; ++ky) {
            for (Index kx = 0; kx < 3; ++kx) {
              const Scalar* src = dcols.data() + (c * 9 + ky * 3 + kx) * dcols.cols() + b * hw;
              for (Index y = 0; y < s.height; ++y) {
                const Index sy = y + ky - 1;
                if (sy < 0 || sy >= s.height) continue;
                const Index x0 = std::max<Index>(0, 1 - kx);
                const Index x1 = std::min<Index>(s.width, s.width + 1 - kx);
                for (Index xx = x0; xx < x1; ++xx) dst[sy * s.width + xx + kx - 1] += src[y * s.width + xx];
              }
            }
          }
        }
      }
      break;
    }

    case OpKind::avg_pool2x2: {
      const ImageShape s = std::get<ImageAttrs>(n.attrs).in;
      const Index oh = s.height / 2, ow = s.width / 2;
      MatS& dx = gin(0);
      for (Index b = 0; b < g.rows(); ++b) {
        for (Index c = 0; c < s.channels; ++c) {
          Scalar* dst = dx.data() + b * dx.cols() + c * s.spatial();
          const Scalar* src = g.data() + b * g.cols() + c * oh * ow;
          for (Index y = 0; y < oh; ++y) {
            for (Index xx = 0; xx < ow; ++xx) {
              const Scalar v = Scalar(0.25) * src[y * ow + xx];
              Scalar* p = dst + 2 * y * s.width + 2 * xx;
              p[0] += v;
              p[1] += v;
              p[s.width] += v;
              p[s.width + 1] += v;
            }
          }
        }
      }
      break;
    }

    case OpKind::global_avg_pool: {
      const ImageShape s = std::get<ImageAttrs>(n.attrs).in;
      MatS& dx = gin(0);
      const Scalar inv = Scalar(1) / Scalar(double(s.spatial()));
      for (Index c = 0; c < s.channels; ++c) {
        channel_block(dx, c, s.spatial()).colwise() += g.col(c) * inv;
      }
      break;
    }

    case OpKind::row_dot:
      gin(0).array() += in(1).array().colwise() * g.col(0).array();
      gin(1).array() += in(0).array().colwise() * g.col(0).array();
      break;

    case OpKind::sum_all:
      gin(0).array() += std::get<SumAttrs>(n.attrs).scale * g(0, 0);
      break;
  }
}

// ---------------------------------------------------------------------------

template <typename Scalar>
double grad_check(Graph<Scalar>& graph, const Bindings<Scalar>& bindings, double eps) {
  graph.forward(bindings);
  const auto analytic = graph.backward();
  double worst = 0.0;
  for (const auto& [name, grad] : analytic) {
    Mat<Scalar>& p = graph.parameter_value(name);
    for (Index i = 0; i < p.size(); ++i) {
      const Scalar saved = p.data()[i];
      p.data()[i] = saved + Scalar(eps);
      const double up = static_cast<double>(graph.forward(bindings)(0, 0));
      p.data()[i] = saved - Scalar(eps);
      const double down = static_cast<double>(graph.forward(bindings)(0, 0));
      p.data()[i] = saved;
      const double fd = (up - down) / (2.0 * eps);
      const double a = static_cast<double>(grad.data()[i]);
      const double denom = std::max({std::abs(a), std::abs(fd), 1e-8});
      worst = std::max(worst, std::abs(a - fd) / denom);
    }
  }
  graph.forward(bindings);
  return worst;
}

template class Graph<float>;
template class Graph<double>;
template double grad_check<float>(Graph<float>&, const Bindings<float>&, double);
template double grad_check<double>(Graph<double>&, const Bindings<double>&, double);

}  // namespace whitebed
