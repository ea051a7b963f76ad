#pragma once

// Minimal reverse-mode automatic differentiation over dense row-major matrices.
//
// A Graph is a tape: nodes are appended in construction order, forward()
// evaluates them in that order for a set of input bindings, and backward()
// walks them in exact reverse order accumulating gradients. Whitening is a
// single composite node whose backward pass is the closed-form expression in
// linalg.hpp rather than a derivative of the factorization.

#include "whitebed/linalg.hpp"

#include <array>
#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <variant>
#include <vector>

namespace whitebed {

enum class OpKind {
  parameter,
  input,
  matmul,
  add_bias,
  relu,
  batch_standardize,
  l2_normalize_rows,
  whitening,
  mse_mean,
  scale_add,
  softmax_cross_entropy,
  concat_rows,
  slice_rows,
  conv3x3,
  avg_pool2x2,
  global_avg_pool,
  row_dot,
  sum_all,
};

inline constexpr std::size_t kOpKindCount = 18;

const char* op_name(OpKind op);

struct NodeId {
  std::size_t index = static_cast<std::size_t>(-1);

  bool valid() const { return index != static_cast<std::size_t>(-1); }
  bool operator==(const NodeId&) const = default;
};

/// Channel-major image layout of one matrix row: channels x height x width.
struct ImageShape {
  Index channels = 0;
  Index height = 0;
  Index width = 0;

  Index spatial() const { return height * width; }
  Index size() const { return channels * height * width; }
};

/// Running per-feature statistics of a batch_standardize node, used in evaluation mode.
template <typename Scalar>
struct RunningStats {
  RowVec<Scalar> mean;
  RowVec<Scalar> var;
};

template <typename Scalar>
struct StandardizeOptions {
  double eps = 1e-5;
  /// 0: standardize every column. >0: columns hold `channels` contiguous
  /// blocks (conv feature maps) and statistics are pooled per block.
  Index channels = 0;
  /// Optional learnable affine pair, each 1 x features.
  std::optional<NodeId> gamma;
  std::optional<NodeId> beta;
  RunningStats<Scalar>* running = nullptr;
  double momentum = 0.9;
  bool training = true;
};

template <typename Scalar>
using Bindings = std::map<std::string, Mat<Scalar>>;

/// Per op-kind wall-clock totals in milliseconds, filled when profiling is on.
struct OpTimings {
  std::array<double, kOpKindCount> forward_ms{};
  std::array<double, kOpKindCount> backward_ms{};

  double forward(OpKind op) const { return forward_ms[static_cast<std::size_t>(op)]; }
  double backward(OpKind op) const { return backward_ms[static_cast<std::size_t>(op)]; }
};

template <typename Scalar>
class Graph {
 public:
  using MatS = Mat<Scalar>;

  // Leaves.
  NodeId input(const std::string& name, Index cols);
  NodeId parameter(const std::string& name, MatS value);

  // Operations. Shapes are checked when the graph is evaluated.
  NodeId matmul(NodeId a, NodeId b, bool transpose_b = false);
  NodeId add_bias(NodeId x, NodeId bias);
  NodeId relu(NodeId x);
  NodeId batch_standardize(NodeId x, const StandardizeOptions<Scalar>& options = {});
  NodeId l2_normalize_rows(NodeId x);
  /// `label` is prepended to factorization errors (e.g. the sub-batch index).
  NodeId whitening(NodeId x, Ridge ridge = Ridge::standard(), std::string label = {});
  /// mean over rows of ||a_i - b_i||^2; b absent means a zero target.
  NodeId mse_mean(NodeId a, std::optional<NodeId> b = std::nullopt);
  /// alpha * a + beta * b + offset; b absent drops that term.
  NodeId scale_add(NodeId a, std::optional<NodeId> b, Scalar alpha, Scalar beta, Scalar offset = 0);
  /// Mean over rows of -log softmax(logits_i)[targets_i]. With exclude_self the
  /// diagonal entry of each row is left out of the normalizer (logits must be square).
  NodeId softmax_cross_entropy(NodeId logits, std::vector<Index> targets, bool exclude_self = false);
  NodeId concat_rows(const std::vector<NodeId>& parts);
  /// Gathers rows by index (repeats allowed); backward scatter-adds.
  NodeId slice_rows(NodeId x, std::vector<Index> rows);
  /// 3x3 convolution, stride 1, zero padding 1. weight is out_channels x (in_channels * 9).
  NodeId conv3x3(NodeId x, NodeId weight, ImageShape in);
  NodeId avg_pool2x2(NodeId x, ImageShape in);
  NodeId global_avg_pool(NodeId x, ImageShape in);
  NodeId row_dot(NodeId a, NodeId b);
  NodeId sum_all(NodeId x, Scalar scale = 1);

  void set_output(NodeId id);
  NodeId output() const;

  /// Evaluates every node and returns the output value.
  const MatS& forward(const Bindings<Scalar>& bindings);
  /// Reverse pass from a 1x1 output. Returns d(output)/d(parameter) by name.
  std::map<std::string, MatS> backward();

  const MatS& value(NodeId id) const;
  /// Gradient of a parameter or input node after backward().
  const MatS& grad(NodeId id) const;
  OpKind kind(NodeId id) const;
  std::size_t size() const { return nodes_.size(); }

  std::vector<std::string> parameter_names() const;
  MatS& parameter_value(const std::string& name);
  const MatS& parameter_value(const std::string& name) const;

  void enable_profiling(bool on) { profiling_ = on; }
  const OpTimings& timings() const { return timings_; }
  void reset_timings() { timings_ = {}; }

 private:
  struct NoAttrs {};
  struct InputAttrs {
    Index cols;
  };
  struct MatmulAttrs {
    bool transpose_b;
  };
  struct StandardizeAttrs {
    StandardizeOptions<Scalar> options;
    // cache
    MatS xhat;
    RowVec<Scalar> inv_std;
    bool used_batch_stats = true;
  };
  struct NormalizeAttrs {
    Eigen::Matrix<Scalar, Eigen::Dynamic, 1> norms;
  };
  struct WhiteningAttrs {
    Ridge ridge;
    std::string label;
    Mat<double> v;
    WhiteningStats<double> stats;
  };
  struct ScaleAddAttrs {
    Scalar alpha, beta, offset;
  };
  struct SoftmaxAttrs {
    std::vector<Index> targets;
    bool exclude_self;
    MatS probs;
  };
  struct GatherAttrs {
    std::vector<Index> rows;
  };
  struct ImageAttrs {
    ImageShape in;
    MatS cols;  // conv im2col cache
  };
  struct SumAttrs {
    Scalar scale;
  };
  using Attrs = std::variant<NoAttrs, InputAttrs, MatmulAttrs, StandardizeAttrs, NormalizeAttrs, WhiteningAttrs,
                             ScaleAddAttrs, SoftmaxAttrs, GatherAttrs, ImageAttrs, SumAttrs>;

  struct Node {
    OpKind op;
    std::string name;
    std::vector<std::size_t> inputs;
    Attrs attrs;
    MatS value;
    MatS grad;
  };

  NodeId push(OpKind op, std::vector<NodeId> inputs, Attrs attrs, std::string name = {});
  const Node& at(NodeId id) const;
  void check_input(NodeId id) const;
  void eval_node(Node& n, const Bindings<Scalar>& bindings);
  void backprop_node(Node& n);
  [[noreturn]] void shape_fail(const Node& n, const std::string& detail) const;

  std::vector<Node> nodes_;
  std::map<std::string, std::size_t> params_;
  std::map<std::string, std::size_t> inputs_;
  std::optional<std::size_t> output_;
  bool evaluated_ = false;
  bool profiling_ = false;
  OpTimings timings_;
};

/// Worst relative error between backward() and central finite differences over
/// every parameter entry: |a - fd| / max(|a|, |fd|, 1e-8).
template <typename Scalar>
double grad_check(Graph<Scalar>& graph, const Bindings<Scalar>& bindings, double eps = 1e-5);

extern template class Graph<float>;
extern template class Graph<double>;
extern template double grad_check<float>(Graph<float>&, const Bindings<float>&, double);
extern template double grad_check<double>(Graph<double>&, const Bindings<double>&, double);

}  // namespace whitebed
