#pragma once

// Dense float64 arrays with eager reverse-mode differentiation.
//
// Every operation that has at least one requires-grad input records a node
// holding its inputs and a backward closure. Nodes carry a global creation
// sequence number; since an operation can only consume tensors that already
// exist, creation order is a topological order of the graph. backward()
// replays the reachable nodes in reverse creation order, which makes the
// gradient accumulation order (and therefore every bit of every gradient)
// independent of how the graph happens to be traversed.
//
// Reductions always run in ascending index order.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace pbp::diff {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

struct Node;

// While alive, operations on this thread record no graph (inference mode).
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

  static bool active() noexcept;

 private:
  bool previous_;
};

class Tensor {
 public:
  Tensor() = default;

  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor filled(Shape shape, double value, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor vector(std::vector<double> values, bool requires_grad = false);
  static Tensor matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                       bool requires_grad = false);
  static Tensor identity(std::size_t n, bool requires_grad = false);

  bool defined() const noexcept { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;
  // Row/column view used by the row-wise operations: rank-1 tensors are a
  // single row, rank-2 tensors are themselves.
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> values() const;
  // Direct write access, intended for leaves (optimizer updates, finite
  // differences). Mutating a tensor that already fed an operation
  // invalidates that operation's recorded backward pass.
  std::span<double> mutable_values();
  double item() const;
  double at(std::size_t flat) const { return values()[flat]; }
  double at(std::size_t r, std::size_t c) const { return values()[r * cols() + c]; }

  bool requires_grad() const;
  void set_requires_grad(bool flag);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  void zero_grad();

  // Populates the gradient of every requires-grad ancestor. Leaf gradients
  // accumulate across calls; intermediate gradients are recomputed.
  void backward() const;

  // Same values, cut from the graph.
  Tensor detach() const;
  // Deep copy of values as a fresh leaf with the given flag.
  Tensor clone(bool requires_grad = false) const;

  std::size_t sequence() const;
  const std::shared_ptr<Node>& node() const noexcept { return node_; }
  explicit Tensor(std::shared_ptr<Node> node) : node_(std::move(node)) {}

 private:
  std::shared_ptr<Node> node_;
};

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;
  bool requires_grad = false;
  std::size_t sequence = 0;
  std::vector<std::shared_ptr<Node>> inputs;
  // Reads this->grad, accumulates into inputs' grads.
  std::function<void(Node&)> backward;

  void ensure_grad();
};

// ---- linear algebra -------------------------------------------------------

// (m×k)·(k×n). A rank-1 left operand of extent k is treated as a 1×k row
// and yields a rank-1 result of extent n.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor dot(const Tensor& u, const Tensor& v);

// ---- elementwise ----------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
// a (rows×n) + b (n) broadcast over rows.
Tensor add_row(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, double s);
Tensor add_scalar(const Tensor& a, double s);
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor tanh(const Tensor& a);
Tensor square(const Tensor& a);
// Gradient passes where lo < x < hi, zero where clamped.
Tensor clamp(const Tensor& a, double lo, double hi);

// ---- reductions -----------------------------------------------------------

enum class ReduceKind { sum, mean };

// Reduce along `axis`, dropping it. Reducing a rank-1 tensor yields a
// scalar (shape {}).
Tensor reduce(const Tensor& t, ReduceKind kind, std::size_t axis);
Tensor sum(const Tensor& t);
Tensor mean(const Tensor& t);

// ---- row-wise normalizations ----------------------------------------------

// softmax(z / temperature) along the last axis, max-shifted.
Tensor softmax_stable(const Tensor& z, double temperature = 1.0);
Tensor log_softmax(const Tensor& z, double temperature = 1.0);
// out[r][c] = w[c]·exp(z[r][c]) / Σ_c' w[c']·exp(z[r][c']). Zero weights
// give exactly zero mass. Weights must be nonnegative with a positive sum.
Tensor weighted_softmax_rows(const Tensor& logits, const Tensor& weights);
// Each row divided by its Euclidean norm. Zero rows throw NumericError.
Tensor normalize_rows(const Tensor& a);
Tensor cosine_sim(const Tensor& u, const Tensor& v);

// ---- structure ------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape);
Tensor concat_rows(const std::vector<Tensor>& parts);
Tensor concat_cols(const std::vector<Tensor>& parts);
Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end);
Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end);
// Row r of a rank-2 tensor as a rank-1 tensor.
Tensor row(const Tensor& a, std::size_t r);
// Single element as a scalar.
Tensor pick(const Tensor& a, std::size_t flat);

}  // namespace pbp::diff
