#include "pbp/diff.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <sstream>
#include <unordered_set>

#include "pbp/errors.hpp"

namespace pbp::diff {

namespace {

std::atomic<std::size_t> g_sequence{0};
thread_local bool t_no_grad = false;

std::shared_ptr<Node> make_node(Shape shape, std::vector<double> value, bool requires_grad) {
  if (shape_numel(shape) != value.size()) {
    throw DimensionError("tensor of shape " + shape_str(shape) + " cannot hold " +
                         std::to_string(value.size()) + " values");
  }
  auto node = std::make_shared<Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  node->sequence = g_sequence.fetch_add(1, std::memory_order_relaxed);
  return node;
}

// Result of an operation. The backward closure is kept only when some
// input participates in differentiation.
Tensor make_result(Shape shape, std::vector<double> value,
                   std::vector<std::shared_ptr<Node>> inputs,
                   std::function<void(Node&)> backward) {
  bool track = false;
  if (!t_no_grad)
    for (const auto& in : inputs) track = track || in->requires_grad;
  auto node = make_node(std::move(shape), std::move(value), track);
  if (track) {
    node->inputs = std::move(inputs);
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

const Node& N(const Tensor& t) {
  if (!t.defined()) throw ContractError("operation on an undefined tensor");
  return *t.node();
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                         " vs " + shape_str(b.shape()));
  }
}

void require_rank_le2(const Tensor& a, const char* op) {
  if (a.rank() == 0 || a.rank() > 2) {
    throw DimensionError(std::string(op) + ": expected rank 1 or 2, got " +
                         shape_str(a.shape()));
  }
}

void require_rank2(const Tensor& a, const char* op) {
  if (a.rank() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got " + shape_str(a.shape()));
  }
}

template <typename F>
Tensor unary(const Tensor& a, F&& f, std::function<void(Node&)> backward) {
  const auto& in = N(a).value;
  std::vector<double> out(in.size());
  for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
  return make_result(a.shape(), std::move(out), {a.node()}, std::move(backward));
}

}  // namespace

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

NoGradGuard::NoGradGuard() : previous_(t_no_grad) { t_no_grad = true; }
NoGradGuard::~NoGradGuard() { t_no_grad = previous_; }
bool NoGradGuard::active() noexcept { return t_no_grad; }

void Node::ensure_grad() {
  if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
}

// ---- Tensor -----------------------------------------------------------------

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  return Tensor(make_node(std::move(shape), std::move(values), requires_grad));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return filled(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::filled(Shape shape, double value, bool requires_grad) {
  const auto n = shape_numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({}, {value}, requires_grad); }

Tensor Tensor::vector(std::vector<double> values, bool requires_grad) {
  const auto n = values.size();
  return from({n}, std::move(values), requires_grad);
}

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::vector<double> values,
                      bool requires_grad) {
  return from({rows, cols}, std::move(values), requires_grad);
}

Tensor Tensor::identity(std::size_t n, bool requires_grad) {
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  return matrix(n, n, std::move(v), requires_grad);
}

const Shape& Tensor::shape() const { return N(*this).shape; }
std::size_t Tensor::numel() const { return N(*this).value.size(); }

std::size_t Tensor::rows() const {
  const auto& s = shape();
  if (s.size() == 2) return s[0];
  if (s.size() <= 1) return 1;
  throw DimensionError("rows(): rank > 2 tensor " + shape_str(s));
}

std::size_t Tensor::cols() const {
  const auto& s = shape();
  if (s.size() == 2) return s[1];
  if (s.size() == 1) return s[0];
  if (s.empty()) return 1;
  throw DimensionError("cols(): rank > 2 tensor " + shape_str(s));
}

std::span<const double> Tensor::values() const { return N(*this).value; }
std::span<double> Tensor::mutable_values() {
  if (!defined()) throw ContractError("mutable_values on an undefined tensor");
  return node_->value;
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ContractError("item() on a non-scalar tensor of shape " + shape_str(shape()));
  }
  return values()[0];
}

bool Tensor::requires_grad() const { return N(*this).requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  if (!is_leaf()) throw ContractError("requires-grad can only be toggled on leaf tensors");
  node_->requires_grad = flag;
  if (!flag) node_->grad.clear();
}

bool Tensor::is_leaf() const { return !N(*this).backward; }

bool Tensor::has_grad() const { return !N(*this).grad.empty(); }
std::span<const double> Tensor::grad() const { return N(*this).grad; }
void Tensor::zero_grad() {
  if (defined()) node_->grad.clear();
}

std::size_t Tensor::sequence() const { return N(*this).sequence; }

Tensor Tensor::detach() const { return Tensor(make_node(shape(), N(*this).value, false)); }

Tensor Tensor::clone(bool requires_grad) const {
  return Tensor(make_node(shape(), N(*this).value, requires_grad));
}

void Tensor::backward() const {
  const Node& root = N(*this);
  if (root.value.size() != 1) {
    throw ContractError("backward() requires a scalar loss, got shape " + shape_str(root.shape));
  }
  if (!root.requires_grad) {
    throw ContractError("backward(): loss does not depend on any requires-grad tensor");
  }

  // Collect the reachable tracked subgraph.
  std::vector<Node*> order;
  std::unordered_set<const Node*> seen;
  std::vector<Node*> stack{node_.get()};
  seen.insert(node_.get());
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& in : n->inputs) {
      if (in->requires_grad && seen.insert(in.get()).second) stack.push_back(in.get());
    }
  }
  std::sort(order.begin(), order.end(),
            [](const Node* a, const Node* b) { return a->sequence > b->sequence; });

  for (Node* n : order) {
    if (n->backward) n->grad.assign(n->value.size(), 0.0);
  }
  node_->ensure_grad();
  node_->grad[0] += 1.0;
  for (Node* n : order) {
    if (n->backward) n->backward(*n);
  }
}

// ---- linear algebra ---------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank_le2(a, "matmul");
  require_rank2(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.shape()[1];
  if (b.shape()[0] != k) {
    throw DimensionError("matmul: inner extents disagree, " + shape_str(a.shape()) + " · " +
                         shape_str(b.shape()));
  }
  const auto& av = N(a).value;
  const auto& bv = N(b).value;
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * bv[p * n + j];
    }
  }
  Shape shape = a.rank() == 1 ? Shape{n} : Shape{m, n};
  return make_result(std::move(shape), std::move(out), {a.node(), b.node()},
                     [m, k, n](Node& self) {
                       Node& A = *self.inputs[0];
                       Node& B = *self.inputs[1];
                       const auto& g = self.grad;
                       if (A.requires_grad) {
                         A.ensure_grad();
                         // dA = dC · Bᵀ
                         for (std::size_t i = 0; i < m; ++i)
                           for (std::size_t p = 0; p < k; ++p) {
                             double s = 0.0;
                             for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * B.value[p * n + j];
                             A.grad[i * k + p] += s;
                           }
                       }
                       if (B.requires_grad) {
                         B.ensure_grad();
                         // dB = Aᵀ · dC
                         for (std::size_t p = 0; p < k; ++p)
                           for (std::size_t j = 0; j < n; ++j) {
                             double s = 0.0;
                             for (std::size_t i = 0; i < m; ++i) s += A.value[i * k + p] * g[i * n + j];
                             B.grad[p * n + j] += s;
                           }
                       }
                     });
}

Tensor transpose(const Tensor& a) {
  require_rank2(a, "transpose");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  const auto& av = N(a).value;
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[j * m + i] = av[i * n + j];
  return make_result({n, m}, std::move(out), {a.node()}, [m, n](Node& self) {
    Node& A = *self.inputs[0];
    A.ensure_grad();
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t j = 0; j < n; ++j) A.grad[i * n + j] += self.grad[j * m + i];
  });
}

Tensor dot(const Tensor& u, const Tensor& v) {
  if (u.rank() != 1) throw DimensionError("dot: expected vectors, got " + shape_str(u.shape()));
  require_same_shape(u, v, "dot");
  return sum(mul(u, v));
}

// ---- elementwise ------------------------------------------------------------

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  const auto& av = N(a).value;
  const auto& bv = N(b).value;
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] + bv[i];
  return make_result(a.shape(), std::move(out), {a.node(), b.node()}, [](Node& self) {
    for (auto& in : self.inputs) {
      if (!in->requires_grad) continue;
      in->ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) in->grad[i] += self.grad[i];
    }
  });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  const auto& av = N(a).value;
  const auto& bv = N(b).value;
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] - bv[i];
  return make_result(a.shape(), std::move(out), {a.node(), b.node()}, [](Node& self) {
    Node& A = *self.inputs[0];
    Node& B = *self.inputs[1];
    if (A.requires_grad) {
      A.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) A.grad[i] += self.grad[i];
    }
    if (B.requires_grad) {
      B.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) B.grad[i] -= self.grad[i];
    }
  });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  const auto& av = N(a).value;
  const auto& bv = N(b).value;
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = av[i] * bv[i];
  return make_result(a.shape(), std::move(out), {a.node(), b.node()}, [](Node& self) {
    Node& A = *self.inputs[0];
    Node& B = *self.inputs[1];
    if (A.requires_grad) {
      A.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) A.grad[i] += self.grad[i] * B.value[i];
    }
    if (B.requires_grad) {
      B.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) B.grad[i] += self.grad[i] * A.value[i];
    }
  });
}

Tensor add_row(const Tensor& a, const Tensor& b) {
  require_rank_le2(a, "add_row");
  const std::size_t m = a.rows(), n = a.cols();
  if (b.numel() != n || b.rank() > 2 || (b.rank() == 2 && b.shape()[0] != 1)) {
    throw DimensionError("add_row: cannot broadcast " + shape_str(b.shape()) + " over rows of " +
                         shape_str(a.shape()));
  }
  const auto& av = N(a).value;
  const auto& bv = N(b).value;
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] = av[i * n + j] + bv[j];
  return make_result(a.shape(), std::move(out), {a.node(), b.node()}, [m, n](Node& self) {
    Node& A = *self.inputs[0];
    Node& B = *self.inputs[1];
    if (A.requires_grad) {
      A.ensure_grad();
      for (std::size_t i = 0; i < self.grad.size(); ++i) A.grad[i] += self.grad[i];
    }
    if (B.requires_grad) {
      B.ensure_grad();
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) B.grad[j] += self.grad[i * n + j];
    }
  });
}

Tensor scale(const Tensor& a, double s) {
  return unary(a, [s](double x) { return x * s; }, [s](Node& self) {
    Node& A = *self.inputs[0];
    A.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) A.grad[i] += self.grad[i] * s;
  });
}

Tensor add_scalar(const Tensor& a, double s) {
  return unary(a, [s](double x) { return x + s; }, [](Node& self) {
    Node& A = *self.inputs[0];
    A.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) A.grad[i] += self.grad[i];
  });
}

Tensor exp(const Tensor& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](Node& self) {
    Node& A = *self.inputs[0];
    A.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) A.grad[i] += self.grad[i] * self.value[i];
  });
}

Tensor log(const Tensor& a) {
  return unary(a, [](double x) { return std::log(x); }, [](Node& self) {
    Node& A = *self.inputs[0];
    A.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) A.grad[i] += self.grad[i] / A.value[i];
  });
}

Tensor tanh(const Tensor& a) {
  return unary(a, [](double x) { return std::tanh(x); }, [](Node& self) {
    Node& A = *self.inputs[0];
    A.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double y = self.value[i];
      A.grad[i] += self.grad[i] * (1.0 - y * y);
    }
  });
}

Tensor square(const Tensor& a) {
  return unary(a, [](double x) { return x * x; }, [](Node& self) {
    Node& A = *self.inputs[0];
    A.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) A.grad[i] += self.grad[i] * 2.0 * A.value[i];
  });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  if (!(lo <= hi)) throw ParameterError("clamp: lower bound exceeds upper bound");
  return unary(a, [lo, hi](double x) { return std::clamp(x, lo, hi); }, [lo, hi](Node& self) {
    Node& A = *self.inputs[0];
    A.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) {
      const double x = A.value[i];
      if (x > lo && x < hi) A.grad[i] += self.grad[i];
    }
  });
}

// ---- reductions -------------------------------------------------------------

Tensor reduce(const Tensor& t, ReduceKind kind, std::size_t axis) {
  const auto& shape = t.shape();
  if (axis >= shape.size()) {
    throw DimensionError("reduce: axis " + std::to_string(axis) + " invalid for shape " +
                         shape_str(shape));
  }
  // View the tensor as outer × extent × inner.
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) inner *= shape[i];
  const std::size_t extent = shape[axis];
  if (kind == ReduceKind::mean && extent == 0) throw DimensionError("reduce: mean over an empty axis");

  Shape out_shape;
  for (std::size_t i = 0; i < shape.size(); ++i)
    if (i != axis) out_shape.push_back(shape[i]);

  const double factor = kind == ReduceKind::mean ? 1.0 / static_cast<double>(extent) : 1.0;
  const auto& tv = N(t).value;
  std::vector<double> out(outer * inner, 0.0);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t e = 0; e < extent; ++e)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += tv[(o * extent + e) * inner + i];
  if (kind == ReduceKind::mean)
    for (auto& v : out) v *= factor;

  return make_result(std::move(out_shape), std::move(out), {t.node()},
                     [outer, extent, inner, factor](Node& self) {
                       Node& A = *self.inputs[0];
                       A.ensure_grad();
                       for (std::size_t o = 0; o < outer; ++o)
                         for (std::size_t e = 0; e < extent; ++e)
                           for (std::size_t i = 0; i < inner; ++i)
                             A.grad[(o * extent + e) * inner + i] += self.grad[o * inner + i] * factor;
                     });
}

Tensor sum(const Tensor& t) {
  return reduce(reshape(t, {t.numel()}), ReduceKind::sum, 0);
}

Tensor mean(const Tensor& t) {
  return reduce(reshape(t, {t.numel()}), ReduceKind::mean, 0);
}

// ---- row-wise ---------------------------------------------------------------

Tensor softmax_stable(const Tensor& z, double temperature) {
  if (!(temperature > 0.0)) throw ParameterError("softmax: temperature must be positive");
  require_rank_le2(z, "softmax");
  const std::size_t m = z.rows(), n = z.cols();
  if (n == 0) throw DimensionError("softmax: empty rows");
  const auto& zv = N(z).value;
  std::vector<double> out(zv.size());
  for (std::size_t r = 0; r < m; ++r) {
    const double* row = zv.data() + r * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < n; ++c) mx = std::max(mx, row[c] / temperature);
    double total = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      out[r * n + c] = std::exp(row[c] / temperature - mx);
      total += out[r * n + c];
    }
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] /= total;
  }
  return make_result(z.shape(), std::move(out), {z.node()}, [m, n, temperature](Node& self) {
    Node& A = *self.inputs[0];
    A.ensure_grad();
    for (std::size_t r = 0; r < m; ++r) {
      const double* y = self.value.data() + r * n;
      const double* g = self.grad.data() + r * n;
      double inner = 0.0;
      for (std::size_t c = 0; c < n; ++c) inner += y[c] * g[c];
      for (std::size_t c = 0; c < n; ++c) A.grad[r * n + c] += y[c] * (g[c] - inner) / temperature;
    }
  });
}

Tensor log_softmax(const Tensor& z, double temperature) {
  if (!(temperature > 0.0)) throw ParameterError("log_softmax: temperature must be positive");
  require_rank_le2(z, "log_softmax");
  const std::size_t m = z.rows(), n = z.cols();
  if (n == 0) throw DimensionError("log_softmax: empty rows");
  const auto& zv = N(z).value;
  std::vector<double> out(zv.size());
  for (std::size_t r = 0; r < m; ++r) {
    const double* row = zv.data() + r * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < n; ++c) mx = std::max(mx, row[c] / temperature);
    double total = 0.0;
    for (std::size_t c = 0; c < n; ++c) total += std::exp(row[c] / temperature - mx);
    const double lse = mx + std::log(total);
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = row[c] / temperature - lse;
  }
  return make_result(z.shape(), std::move(out), {z.node()}, [m, n, temperature](Node& self) {
    Node& A = *self.inputs[0];
    A.ensure_grad();
    for (std::size_t r = 0; r < m; ++r) {
      const double* y = self.value.data() + r * n;
      const double* g = self.grad.data() + r * n;
      double gsum = 0.0;
      for (std::size_t c = 0; c < n; ++c) gsum += g[c];
      for (std::size_t c = 0; c < n; ++c)
        A.grad[r * n + c] += (g[c] - std::exp(y[c]) * gsum) / temperature;
    }
  });
}

Tensor weighted_softmax_rows(const Tensor& logits, const Tensor& weights) {
  require_rank_le2(logits, "weighted_softmax_rows");
  const std::size_t m = logits.rows(), n = logits.cols();
  if (weights.numel() != n) {
    throw DimensionError("weighted_softmax_rows: " + std::to_string(n) + " columns but weights " +
                         shape_str(weights.shape()));
  }
  const auto& wv = N(weights).value;
  double wsum = 0.0;
  for (double w : wv) {
    if (!(w >= 0.0)) throw ParameterError("weighted_softmax_rows: negative or NaN weight");
    wsum += w;
  }
  if (!(wsum > 0.0)) throw ParameterError("weighted_softmax_rows: weights sum to zero");

  const auto& zv = N(logits).value;
  // Keep the row-normalized unweighted exponentials e/Z for the weight gradient.
  auto ez = std::make_shared<std::vector<double>>(zv.size());
  std::vector<double> out(zv.size());
  for (std::size_t r = 0; r < m; ++r) {
    const double* row = zv.data() + r * n;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < n; ++c)
      if (wv[c] > 0.0) mx = std::max(mx, row[c]);
    double total = 0.0;
    for (std::size_t c = 0; c < n; ++c) {
      (*ez)[r * n + c] = std::exp(row[c] - mx);
      total += wv[c] * (*ez)[r * n + c];
    }
    for (std::size_t c = 0; c < n; ++c) {
      (*ez)[r * n + c] /= total;
      out[r * n + c] = wv[c] * (*ez)[r * n + c];
    }
  }
  return make_result(logits.shape(), std::move(out), {logits.node(), weights.node()},
                     [m, n, ez](Node& self) {
                       Node& Z = *self.inputs[0];
                       Node& W = *self.inputs[1];
                       if (Z.requires_grad) Z.ensure_grad();
                       if (W.requires_grad) W.ensure_grad();
                       for (std::size_t r = 0; r < m; ++r) {
                         const double* y = self.value.data() + r * n;
                         const double* g = self.grad.data() + r * n;
                         double inner = 0.0;
                         for (std::size_t c = 0; c < n; ++c) inner += y[c] * g[c];
                         for (std::size_t c = 0; c < n; ++c) {
                           if (Z.requires_grad) Z.grad[r * n + c] += y[c] * (g[c] - inner);
                           if (W.requires_grad) W.grad[c] += (*ez)[r * n + c] * (g[c] - inner);
                         }
                       }
                     });
}

Tensor normalize_rows(const Tensor& a) {
  require_rank_le2(a, "normalize_rows");
  const std::size_t m = a.rows(), n = a.cols();
  const auto& av = N(a).value;
  std::vector<double> out(av.size());
  auto norms = std::make_shared<std::vector<double>>(m);
  for (std::size_t r = 0; r < m; ++r) {
    double ss = 0.0;
    for (std::size_t c = 0; c < n; ++c) ss += av[r * n + c] * av[r * n + c];
    const double norm = std::sqrt(ss);
    if (!(norm > 0.0) || !std::isfinite(norm)) {
      throw NumericError("normalize: row " + std::to_string(r) + " has zero or non-finite norm");
    }
    (*norms)[r] = norm;
    for (std::size_t c = 0; c < n; ++c) out[r * n + c] = av[r * n + c] / norm;
  }
  return make_result(a.shape(), std::move(out), {a.node()}, [m, n, norms](Node& self) {
    Node& A = *self.inputs[0];
    A.ensure_grad();
    for (std::size_t r = 0; r < m; ++r) {
      const double* y = self.value.data() + r * n;
      const double* g = self.grad.data() + r * n;
      double inner = 0.0;
      for (std::size_t c = 0; c < n; ++c) inner += y[c] * g[c];
      for (std::size_t c = 0; c < n; ++c) A.grad[r * n + c] += (g[c] - y[c] * inner) / (*norms)[r];
    }
  });
}

Tensor cosine_sim(const Tensor& u, const Tensor& v) {
  if (u.rank() != 1) throw DimensionError("cosine_sim: expected vectors, got " + shape_str(u.shape()));
  require_same_shape(u, v, "cosine_sim");
  if (u.numel() == 0) throw DimensionError("cosine_sim: empty vectors");
  return dot(normalize_rows(u), normalize_rows(v));
}

// ---- structure --------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape) {
  if (shape_numel(shape) != a.numel()) {
    throw DimensionError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
  }
  return make_result(std::move(shape), N(a).value, {a.node()}, [](Node& self) {
    Node& A = *self.inputs[0];
    A.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) A.grad[i] += self.grad[i];
  });
}

Tensor concat_rows(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_rows: no inputs");
  const std::size_t n = parts.front().cols();
  std::size_t m = 0;
  std::vector<double> out;
  std::vector<std::shared_ptr<Node>> inputs;
  std::vector<std::size_t> offsets;
  for (const auto& p : parts) {
    require_rank_le2(p, "concat_rows");
    if (p.cols() != n) {
      throw DimensionError("concat_rows: width " + std::to_string(p.cols()) + " vs " +
                           std::to_string(n) + " (" + shape_str(p.shape()) + ")");
    }
    offsets.push_back(out.size());
    out.insert(out.end(), p.values().begin(), p.values().end());
    m += p.rows();
    inputs.push_back(p.node());
  }
  return make_result({m, n}, std::move(out), std::move(inputs), [offsets](Node& self) {
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      Node& P = *self.inputs[k];
      if (!P.requires_grad) continue;
      P.ensure_grad();
      for (std::size_t i = 0; i < P.value.size(); ++i) P.grad[i] += self.grad[offsets[k] + i];
    }
  });
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimensionError("concat_cols: no inputs");
  const std::size_t m = parts.front().rows();
  std::vector<std::size_t> widths, offsets;
  std::size_t n = 0;
  std::vector<std::shared_ptr<Node>> inputs;
  for (const auto& p : parts) {
    require_rank2(p, "concat_cols");
    if (p.rows() != m) {
      throw DimensionError("concat_cols: height " + std::to_string(p.rows()) + " vs " +
                           std::to_string(m));
    }
    offsets.push_back(n);
    widths.push_back(p.cols());
    n += p.cols();
    inputs.push_back(p.node());
  }
  std::vector<double> out(m * n);
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& pv = parts[k].values();
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < widths[k]; ++c) out[r * n + offsets[k] + c] = pv[r * widths[k] + c];
  }
  return make_result({m, n}, std::move(out), std::move(inputs), [m, n, widths, offsets](Node& self) {
    for (std::size_t k = 0; k < self.inputs.size(); ++k) {
      Node& P = *self.inputs[k];
      if (!P.requires_grad) continue;
      P.ensure_grad();
      for (std::size_t r = 0; r < m; ++r)
        for (std::size_t c = 0; c < widths[k]; ++c)
          P.grad[r * widths[k] + c] += self.grad[r * n + offsets[k] + c];
    }
  });
}

Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
  require_rank2(a, "slice_rows");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  if (begin > end || end > m) {
    throw DimensionError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") out of " + shape_str(a.shape()));
  }
  const auto& av = N(a).value;
  std::vector<double> out(av.begin() + static_cast<std::ptrdiff_t>(begin * n),
                          av.begin() + static_cast<std::ptrdiff_t>(end * n));
  return make_result({end - begin, n}, std::move(out), {a.node()}, [begin, n](Node& self) {
    Node& A = *self.inputs[0];
    A.ensure_grad();
    for (std::size_t i = 0; i < self.grad.size(); ++i) A.grad[begin * n + i] += self.grad[i];
  });
}

Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
  require_rank2(a, "slice_cols");
  const std::size_t m = a.shape()[0], n = a.shape()[1];
  if (begin > end || end > n) {
    throw DimensionError("slice_cols: [" + std::to_string(begin) + ", " + std::to_string(end) +
                         ") out of " + shape_str(a.shape()));
  }
  const std::size_t w = end - begin;
  const auto& av = N(a).value;
  std::vector<double> out(m * w);
  for (std::size_t r = 0; r < m; ++r)
    for (std::size_t c = 0; c < w; ++c) out[r * w + c] = av[r * n + begin + c];
  return make_result({m, w}, std::move(out), {a.node()}, [m, n, w, begin](Node& self) {
    Node& A = *self.inputs[0];
    A.ensure_grad();
    for (std::size_t r = 0; r < m; ++r)
      for (std::size_t c = 0; c < w; ++c) A.grad[r * n + begin + c] += self.grad[r * w + c];
  });
}

Tensor row(const Tensor& a, std::size_t r) {
  require_rank2(a, "row");
  return reshape(slice_rows(a, r, r + 1), {a.shape()[1]});
}

Tensor pick(const Tensor& a, std::size_t flat) {
  if (flat >= a.numel()) {
    throw DimensionError("pick: index " + std::to_string(flat) + " out of " + shape_str(a.shape()));
  }
  return make_result({}, {N(a).value[flat]}, {a.node()}, [flat](Node& self) {
    Node& A = *self.inputs[0];
    A.ensure_grad();
    A.grad[flat] += self.grad[0];
  });
}

}  // namespace pbp::diff
