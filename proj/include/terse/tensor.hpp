#pragma once

// Dense row-major double tensors with define-by-run reverse-mode autodiff.
//
// A Tensor is a cheap handle onto shared storage. Primitive operations are
// methods of Graph; when the graph is recording and any input requires a
// gradient, the operation appends a node holding its backward rule. Graph
// is rebuilt for every forward pass.

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace terse {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

// Broken precondition at an API boundary (shape mismatch, bad index, ...).
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

// A value went NaN/Inf while finite checking was enabled.
class NonFiniteError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct TensorStorage {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until a gradient arrives
  bool requires_grad = false;
};

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false);

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor scalar(double v);
  static Tensor from_storage(std::shared_ptr<TensorStorage> s) { return Tensor(std::move(s)); }

  bool defined() const { return s_ != nullptr; }
  const Shape& shape() const { return s_->shape; }
  std::size_t size() const { return s_->value.size(); }
  std::size_t ndim() const { return s_->shape.size(); }
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const { return s_->value; }
  // Direct write access; only for leaves (initialisation, optimiser, hooks).
  std::span<double> mutable_data() { return s_->value; }
  double item() const;
  double operator[](std::size_t i) const { return s_->value[i]; }
  double at(std::size_t r, std::size_t c) const { return s_->value[r * cols() + c]; }

  bool requires_grad() const { return s_->requires_grad; }
  void set_requires_grad(bool v) { s_->requires_grad = v; }
  bool has_grad() const { return !s_->grad.empty(); }
  std::span<const double> grad() const { return s_->grad; }
  std::span<double> mutable_grad();
  void zero_grad() { s_->grad.clear(); }

  // Deep copy without gradient state.
  Tensor clone() const;

  TensorStorage* storage() const { return s_.get(); }
  const std::shared_ptr<TensorStorage>& shared() const { return s_; }

 private:
  explicit Tensor(std::shared_ptr<TensorStorage> s) : s_(std::move(s)) {}
  std::shared_ptr<TensorStorage> s_;
};

enum class GraphMode { recording, frozen };

class Graph {
 public:
  explicit Graph(GraphMode mode = GraphMode::recording) : mode_(mode) {}
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  GraphMode mode() const { return mode_; }
  // Abort with the producing op named when any output is non-finite.
  void set_check_finite(bool on) { check_finite_ = on; }
  std::size_t node_count() const { return nodes_.size(); }

  // ---- linear algebra --------------------------------------------------
  Tensor matmul(const Tensor& a, const Tensor& b);
  Tensor add(const Tensor& a, const Tensor& b);
  Tensor sub(const Tensor& a, const Tensor& b);
  Tensor mul(const Tensor& a, const Tensor& b);
  // x[m,n] + bias[n] broadcast over rows
  Tensor add_bias(const Tensor& x, const Tensor& bias);
  Tensor scale(const Tensor& x, double s);
  Tensor add_scalar(const Tensor& x, double s);
  // x + c where c is a constant of the same shape (no gradient to c).
  Tensor add_constant(const Tensor& x, std::span<const double> c);
  // Output takes `values`; the gradient reaches x unchanged (straight-through).
  // Used for residual hooks.
  Tensor substitute(const Tensor& x, std::vector<double> values);

  // ---- elementwise -----------------------------------------------------
  Tensor exp(const Tensor& x);
  Tensor log(const Tensor& x);
  Tensor gelu(const Tensor& x);
  // Gradient passes only where lo < x < hi.
  Tensor clamp(const Tensor& x, double lo, double hi);
  // Gradient goes to the selected argument (ties go to a).
  Tensor minimum(const Tensor& a, const Tensor& b);

  // ---- reductions ------------------------------------------------------
  Tensor sum(const Tensor& x);
  Tensor mean(const Tensor& x);
  // Rows [begin, end) along the first dimension.
  Tensor slice_rows(const Tensor& x, std::size_t begin, std::size_t end);

  // ---- model primitives ------------------------------------------------
  // Rows of table[V,d] selected by ids -> [ids.size(), d]
  Tensor embedding(const Tensor& table, std::span<const int> ids);
  Tensor rmsnorm(const Tensor& x, const Tensor& gain, double eps);
  Tensor softmax(const Tensor& x);
  Tensor log_softmax(const Tensor& x);
  // Multi-head causal self-attention over rows; q,k,v are [T,d].
  Tensor causal_attention(const Tensor& q, const Tensor& k, const Tensor& v, std::size_t n_heads);
  // log p(target_t) per row of logits[T,V] -> [T]
  Tensor token_log_probs(const Tensor& logits, std::span<const int> targets);
  // Mean NLL over rows where mask is set; zero (with zero gradient) when
  // the mask selects nothing.
  Tensor cross_entropy(const Tensor& logits, std::span<const int> targets,
                       std::span<const bool> mask);

  // Fill leaf gradients with dloss/dleaf (accumulating into existing leaf
  // gradients). One call per recorded graph.
  void backward(const Tensor& loss);
  // Drop recorded nodes so the graph can be reused.
  void reset();

 private:
  struct Node {
    const char* op;
    std::vector<std::shared_ptr<TensorStorage>> inputs;
    std::shared_ptr<TensorStorage> output;
    std::function<void(Node&)> backward;
  };

  bool tracks(std::initializer_list<const Tensor*> inputs) const;
  Tensor make_output(const char* op, Shape shape, std::vector<double> values,
                     bool requires_grad);
  void record(const char* op, std::initializer_list<const Tensor*> inputs, const Tensor& out,
              std::function<void(Node&)> backward);

  GraphMode mode_;
  bool check_finite_ = false;
  bool backward_done_ = false;
  std::vector<Node> nodes_;
};

// Gradient buffer of a storage, allocated zero-filled on first use.
std::vector<double>& grad_buffer(TensorStorage& s);

namespace rowops {
// Shared per-row routines. The batched graph ops and the incremental decoder
// both go through these so both paths produce bit-identical values.
void rmsnorm_row(const double* x, const double* gain, double* out, std::size_t n, double eps);
void softmax_row(const double* x, double* out, std::size_t n);
double log_sum_exp(const double* x, std::size_t n);
double gelu_scalar(double x);
// One query row against n_keys cached key/value rows of one head.
// keys/values point at the head's first column; stride is the row width.
void attention_row(const double* q, const double* keys, const double* values, std::size_t stride,
                   std::size_t n_keys, std::size_t head_dim, double* probs, double* out);
}  // namespace rowops

}  // namespace terse
