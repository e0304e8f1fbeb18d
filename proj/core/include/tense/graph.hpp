#pragma once

#include <compare>
#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "tense/tensor.hpp"

namespace tense {

struct NodeId {
  std::uint32_t index = 0;
  friend auto operator<=>(NodeId, NodeId) = default;
};

enum class OpKind : std::uint8_t {
  Input,
  Constant,
  Add,
  Sub,
  Mul,
  Scale,
  AddBias,
  MatMul,
  Transpose,
  Conv2d,
  Relu,
  Sigmoid,
  Sum,
  Dot,
  NormL1,
  NormL2,
  BatchNorm,
  Resize,
  Reshape,
  Flatten,
  SelectPosition,
  Ifft2Real,
  PolarToComplex,
  SoftmaxCrossEntropy,
  DotCosine,
};

std::string_view op_name(OpKind op);

enum class BatchNormMode { Inference, Training };

struct OpAttrs {
  double scalar = 0.0;  // Scale factor, DotCosine power, BatchNorm epsilon
  std::size_t stride = 1;
  std::size_t padding = 0;
  std::size_t row = 0;
  std::size_t col = 0;
  Shape shape;  // Reshape target, Resize output (rows, cols)
  BatchNormMode bn_mode = BatchNormMode::Inference;
};

struct Node {
  OpKind op = OpKind::Input;
  std::vector<NodeId> inputs;
  OpAttrs attrs;
  std::string name;
  std::shared_ptr<const Tensor> constant;
};

using TensorMap = std::map<std::string, Tensor, std::less<>>;
using TensorMapD = std::map<std::string, TensorD, std::less<>>;

template <typename T>
class BasicEvaluation;
using Evaluation = BasicEvaluation<float>;

/// Per-channel statistics observed by a training-mode batch-norm node.
struct BatchStats {
  std::vector<double> mean;
  std::vector<double> var;
};

/// Operation record list. Nodes are appended in topological order, so the
/// graph is acyclic by construction. Shapes are checked at evaluation time,
/// which lets one graph serve any batch size.
class Graph {
 public:
  NodeId input(std::string name);
  NodeId constant(Tensor value, std::string name = {});

  NodeId add(NodeId a, NodeId b);
  NodeId sub(NodeId a, NodeId b);
  NodeId mul(NodeId a, NodeId b);
  NodeId scale(NodeId a, double factor);
  /// x[N, C, ...] + bias[C] broadcast over every axis but the channel axis.
  NodeId add_bias(NodeId x, NodeId bias);
  NodeId matmul(NodeId a, NodeId b);
  NodeId transpose(NodeId a);
  /// x[N, C, H, W] convolved with w[O, C, KH, KW].
  NodeId conv2d(NodeId x, NodeId w, std::size_t stride, std::size_t padding);
  NodeId relu(NodeId x);
  NodeId sigmoid(NodeId x);
  NodeId sum(NodeId x);
  NodeId dot(NodeId a, NodeId b);
  NodeId norm_l1(NodeId x);
  NodeId norm_l2(NodeId x);
  NodeId batch_norm(NodeId x, NodeId gamma, NodeId beta, NodeId running_mean,
                    NodeId running_var, BatchNormMode mode, double eps = 1e-5);
  /// Bilinear resample of the window box = [row0, col0, rows, cols] (in source
  /// pixels, a 4-element tensor) of x[N, C, H, W] onto an out_rows x out_cols grid.
  /// The box is not differentiated.
  NodeId resize(NodeId x, NodeId box, std::size_t out_rows, std::size_t out_cols);
  NodeId reshape(NodeId x, Shape shape);
  /// [N, ...] -> [N, prod(...)]
  NodeId flatten(NodeId x);
  /// x[N, C, H, W] -> [N, C] at (row, col).
  NodeId select_position(NodeId x, std::size_t row, std::size_t col);
  /// Real part of the orthonormal inverse 2-D DFT of z[C, H, W, 2] (re, im).
  NodeId ifft2_real(NodeId spectrum);
  /// (magnitude[C, H, W], phase[C, H, W]) -> [C, H, W, 2].
  NodeId polar_to_complex(NodeId magnitude, NodeId phase);
  /// Mean over rows of -sum(target * log_softmax(logits)); both [N, K].
  NodeId softmax_cross_entropy(NodeId logits, NodeId target);
  /// (h . s)^(p+1) / (|h| |s|)^p with a sign-preserving power; 0 when either norm is 0.
  NodeId dot_cosine(NodeId h, NodeId s, double power);

  void set_output(std::string name, NodeId id);
  const std::map<std::string, NodeId, std::less<>>& outputs() const { return outputs_; }
  std::optional<NodeId> find_input(std::string_view name) const;

  const Node& node(NodeId id) const { return nodes_.at(id.index); }
  std::size_t size() const { return nodes_.size(); }

  template <typename T>
  BasicEvaluation<T> evaluate(
      const std::map<std::string, BasicTensor<T>, std::less<>>& inputs) const;
  Evaluation evaluate(const TensorMap& inputs) const;

 private:
  NodeId push(OpKind op, std::vector<NodeId> inputs, OpAttrs attrs = {});

  std::vector<Node> nodes_;
  std::map<std::string, NodeId, std::less<>> outputs_;
};

template <typename T>
struct BasicGradients {
  std::vector<BasicTensor<T>> values;
  /// false when the requested node is not an ancestor of the output; its value is zero.
  std::vector<bool> connected;
};
using Gradients = BasicGradients<float>;

/// Materialized node values from one forward pass.
template <typename T>
class BasicEvaluation {
 public:
  const BasicTensor<T>& value(NodeId id) const { return values_.at(id.index); }
  const Graph& graph() const { return *graph_; }
  const BatchStats* batch_stats(NodeId id) const;

  /// Exact reverse-mode gradients of a single-element node. ReLU passes no
  /// gradient at exactly 0.
  BasicGradients<T> backward(NodeId output, std::span<const NodeId> wrt) const;

 private:
  friend class Graph;
  const Graph* graph_ = nullptr;
  std::vector<BasicTensor<T>> values_;
  std::map<std::uint32_t, BatchStats> bn_stats_;
};

/// Evaluates the graph and returns its named outputs.
TensorMap forward_eval(const Graph& graph, const TensorMap& inputs);

struct GradCheckResult {
  double max_rel_error = 0.0;
  std::size_t checked = 0;
  /// Elements whose perturbation moved some ReLU input across 0.
  std::size_t skipped_kink = 0;
  bool kink_adjacent() const { return skipped_kink > 0; }
};

/// Compares reverse-mode gradients of `output` with respect to the input node
/// `probe` against central differences. Both routes run in double precision.
/// Elements whose +/- step changes the active set of any ReLU are skipped.
GradCheckResult grad_check(const Graph& graph, const TensorMap& inputs, NodeId output,
                           NodeId probe, double step);

/// Bilinear resample of a [C, H, W] image (same kernel as Graph::resize).
Tensor resize_bilinear(const Tensor& chw, std::size_t out_rows, std::size_t out_cols);

}  // namespace tense
