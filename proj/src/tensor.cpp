#include "terse/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>

#include "terse/simd/kernels.hpp"

namespace terse {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

Tensor::Tensor(Shape shape, std::vector<double> values, bool requires_grad)
    : s_(std::make_shared<TensorStorage>()) {
  for (auto e : shape)
    if (e == 0) throw ContractError("tensor extents must be positive, got " + shape_str(shape));
  if (shape_numel(shape) != values.size())
    throw ContractError("shape " + shape_str(shape) + " does not match " +
                        std::to_string(values.size()) + " values");
  s_->shape = std::move(shape);
  s_->value = std::move(values);
  s_->requires_grad = requires_grad;
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  const auto n = shape_numel(shape);
  return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
}

Tensor Tensor::scalar(double v) { return Tensor({}, {v}); }

std::size_t Tensor::rows() const {
  if (ndim() != 2) throw ContractError("rows() on non-matrix " + shape_str(shape()));
  return shape()[0];
}

std::size_t Tensor::cols() const {
  if (ndim() != 2) throw ContractError("cols() on non-matrix " + shape_str(shape()));
  return shape()[1];
}

double Tensor::item() const {
  if (size() != 1) throw ContractError("item() on tensor of shape " + shape_str(shape()));
  return s_->value[0];
}

std::span<double> Tensor::mutable_grad() { return grad_buffer(*s_); }

Tensor Tensor::clone() const { return Tensor(shape(), s_->value, s_->requires_grad); }

std::vector<double>& grad_buffer(TensorStorage& s) {
  if (s.grad.empty()) s.grad.assign(s.value.size(), 0.0);
  return s.grad;
}

// ---------------------------------------------------------------------------
// row routines

namespace rowops {

void rmsnorm_row(const double* x, const double* gain, double* out, std::size_t n, double eps) {
  const double ms = simd::kernels().sum_squares(x, n) / static_cast<double>(n);
  const double r = 1.0 / std::sqrt(ms + eps);
  for (std::size_t j = 0; j < n; ++j) out[j] = x[j] * r * gain[j];
}

void softmax_row(const double* x, double* out, std::size_t n) {
  const double mx = *std::max_element(x, x + n);
  double s = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    out[j] = std::exp(x[j] - mx);
    s += out[j];
  }
  for (std::size_t j = 0; j < n; ++j) out[j] /= s;
}

double log_sum_exp(const double* x, std::size_t n) {
  const double mx = *std::max_element(x, x + n);
  double s = 0.0;
  for (std::size_t j = 0; j < n; ++j) s += std::exp(x[j] - mx);
  return mx + std::log(s);
}

double gelu_scalar(double x) {
  constexpr double c = 0.7978845608028654;  // sqrt(2/pi)
  return 0.5 * x * (1.0 + std::tanh(c * (x + 0.044715 * x * x * x)));
}

void attention_row(const double* q, const double* keys, const double* values, std::size_t stride,
                   std::size_t n_keys, std::size_t head_dim, double* probs, double* out) {
  const auto& k = simd::kernels();
  const double scale = 1.0 / std::sqrt(static_cast<double>(head_dim));
  for (std::size_t j = 0; j < n_keys; ++j) probs[j] = k.dot(q, keys + j * stride, head_dim) * scale;
  softmax_row(probs, probs, n_keys);
  std::fill(out, out + head_dim, 0.0);
  for (std::size_t j = 0; j < n_keys; ++j) k.axpy(probs[j], values + j * stride, out, head_dim);
}

}  // namespace rowops

// ---------------------------------------------------------------------------
// graph plumbing

namespace {

void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ContractError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                        shape_str(b.shape()));
}

void require_matrix(const char* op, const Tensor& a) {
  if (a.ndim() != 2)
    throw ContractError(std::string(op) + ": expected matrix, got " + shape_str(a.shape()));
}

using rowops::log_sum_exp;

}  // namespace

bool Graph::tracks(std::initializer_list<const Tensor*> inputs) const {
  if (mode_ != GraphMode::recording) return false;
  return std::any_of(inputs.begin(), inputs.end(),
                     [](const Tensor* t) { return t->requires_grad(); });
}

Tensor Graph::make_output(const char* op, Shape shape, std::vector<double> values,
                          bool requires_grad) {
  if (check_finite_) {
    for (double v : values)
      if (!std::isfinite(v)) throw NonFiniteError(std::string("non-finite value produced by ") + op);
  }
  return Tensor(std::move(shape), std::move(values), requires_grad);
}

void Graph::record(const char* op, std::initializer_list<const Tensor*> inputs, const Tensor& out,
                   std::function<void(Node&)> backward) {
  if (!out.requires_grad()) return;
  if (backward_done_) throw ContractError("graph already ran backward; reset() before recording");
  Node node{op, {}, out.shared(), std::move(backward)};
  for (const Tensor* t : inputs) node.inputs.push_back(t->shared());
  nodes_.push_back(std::move(node));
}

void Graph::reset() {
  nodes_.clear();
  backward_done_ = false;
}

void Graph::backward(const Tensor& loss) {
  if (mode_ != GraphMode::recording) throw ContractError("backward on a frozen graph");
  if (loss.size() != 1)
    throw ContractError("backward needs a scalar loss, got " + shape_str(loss.shape()));
  if (backward_done_) throw ContractError("backward called twice on the same graph");
  backward_done_ = true;
  if (!loss.requires_grad()) return;
  grad_buffer(*loss.storage())[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    if (it->output->grad.empty()) continue;
    it->backward(*it);
  }
}

// ---------------------------------------------------------------------------
// linear algebra

Tensor Graph::matmul(const Tensor& a, const Tensor& b) {
  require_matrix("matmul", a);
  require_matrix("matmul", b);
  if (a.cols() != b.rows())
    throw ContractError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                        shape_str(b.shape()));
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  std::vector<double> c(m * n);
  simd::kernels().matmul(a.data().data(), b.data().data(), c.data(), m, k, n, false);
  Tensor out = make_output("matmul", {m, n}, std::move(c), tracks({&a, &b}));
  record("matmul", {&a, &b}, out, [m, k, n](Node& nd) {
    const auto& kern = simd::kernels();
    const double* dc = nd.output->grad.data();
    TensorStorage& A = *nd.inputs[0];
    TensorStorage& B = *nd.inputs[1];
    if (A.requires_grad) {
      // dA = dC * B^T
      std::vector<double> bt(n * k);
      for (std::size_t p = 0; p < k; ++p)
        for (std::size_t j = 0; j < n; ++j) bt[j * k + p] = B.value[p * n + j];
      kern.matmul(dc, bt.data(), grad_buffer(A).data(), m, n, k, true);
    }
    if (B.requires_grad) {
      // dB = A^T * dC
      kern.matmul_tn(A.value.data(), dc, grad_buffer(B).data(), m, k, n, true);
    }
  });
  return out;
}

Tensor Graph::add(const Tensor& a, const Tensor& b) {
  require_same_shape("add", a, b);
  std::vector<double> c(a.size());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = a[i] + b[i];
  Tensor out = make_output("add", a.shape(), std::move(c), tracks({&a, &b}));
  record("add", {&a, &b}, out, [](Node& nd) {
    const auto& g = nd.output->grad;
    for (auto& in : nd.inputs) {
      if (!in->requires_grad) continue;
      auto& gi = grad_buffer(*in);
      for (std::size_t i = 0; i < g.size(); ++i) gi[i] += g[i];
    }
  });
  return out;
}

Tensor Graph::sub(const Tensor& a, const Tensor& b) {
  require_same_shape("sub", a, b);
  std::vector<double> c(a.size());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = a[i] - b[i];
  Tensor out = make_output("sub", a.shape(), std::move(c), tracks({&a, &b}));
  record("sub", {&a, &b}, out, [](Node& nd) {
    const auto& g = nd.output->grad;
    if (nd.inputs[0]->requires_grad) {
      auto& ga = grad_buffer(*nd.inputs[0]);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
    }
    if (nd.inputs[1]->requires_grad) {
      auto& gb = grad_buffer(*nd.inputs[1]);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] -= g[i];
    }
  });
  return out;
}

Tensor Graph::mul(const Tensor& a, const Tensor& b) {
  require_same_shape("mul", a, b);
  std::vector<double> c(a.size());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = a[i] * b[i];
  Tensor out = make_output("mul", a.shape(), std::move(c), tracks({&a, &b}));
  record("mul", {&a, &b}, out, [](Node& nd) {
    const auto& g = nd.output->grad;
    TensorStorage& A = *nd.inputs[0];
    TensorStorage& B = *nd.inputs[1];
    if (A.requires_grad) {
      auto& ga = grad_buffer(A);
      for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * B.value[i];
    }
    if (B.requires_grad) {
      auto& gb = grad_buffer(B);
      for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i] * A.value[i];
    }
  });
  return out;
}

Tensor Graph::add_bias(const Tensor& x, const Tensor& bias) {
  require_matrix("add_bias", x);
  if (bias.ndim() != 1 || bias.size() != x.cols())
    throw ContractError("add_bias: bias " + shape_str(bias.shape()) + " does not fit " +
                        shape_str(x.shape()));
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> c(x.data().begin(), x.data().end());
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) c[i * n + j] += bias[j];
  Tensor out = make_output("add_bias", x.shape(), std::move(c), tracks({&x, &bias}));
  record("add_bias", {&x, &bias}, out, [m, n](Node& nd) {
    const auto& g = nd.output->grad;
    if (nd.inputs[0]->requires_grad) {
      auto& gx = grad_buffer(*nd.inputs[0]);
      for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
    }
    if (nd.inputs[1]->requires_grad) {
      auto& gb = grad_buffer(*nd.inputs[1]);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
    }
  });
  return out;
}

Tensor Graph::scale(const Tensor& x, double s) {
  std::vector<double> c(x.size());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = x[i] * s;
  Tensor out = make_output("scale", x.shape(), std::move(c), tracks({&x}));
  record("scale", {&x}, out, [s](Node& nd) {
    const auto& g = nd.output->grad;
    auto& gx = grad_buffer(*nd.inputs[0]);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * s;
  });
  return out;
}

Tensor Graph::add_scalar(const Tensor& x, double s) {
  std::vector<double> c(x.size());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = x[i] + s;
  Tensor out = make_output("add_scalar", x.shape(), std::move(c), tracks({&x}));
  record("add_scalar", {&x}, out, [](Node& nd) {
    const auto& g = nd.output->grad;
    auto& gx = grad_buffer(*nd.inputs[0]);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
  return out;
}

Tensor Graph::add_constant(const Tensor& x, std::span<const double> c) {
  if (c.size() != x.size())
    throw ContractError("add_constant: " + std::to_string(c.size()) + " values for " +
                        shape_str(x.shape()));
  std::vector<double> v(x.size());
  for (std::size_t i = 0; i < v.size(); ++i) v[i] = x[i] + c[i];
  Tensor out = make_output("add_constant", x.shape(), std::move(v), tracks({&x}));
  record("add_constant", {&x}, out, [](Node& nd) {
    const auto& g = nd.output->grad;
    auto& gx = grad_buffer(*nd.inputs[0]);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
  return out;
}

Tensor Graph::substitute(const Tensor& x, std::vector<double> values) {
  if (values.size() != x.size())
    throw ContractError("substitute: " + std::to_string(values.size()) + " values for " +
                        shape_str(x.shape()));
  Tensor out = make_output("substitute", x.shape(), std::move(values), tracks({&x}));
  record("substitute", {&x}, out, [](Node& nd) {
    const auto& g = nd.output->grad;
    auto& gx = grad_buffer(*nd.inputs[0]);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// elementwise

Tensor Graph::exp(const Tensor& x) {
  std::vector<double> c(x.size());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = std::exp(x[i]);
  Tensor out = make_output("exp", x.shape(), std::move(c), tracks({&x}));
  record("exp", {&x}, out, [](Node& nd) {
    const auto& g = nd.output->grad;
    const auto& y = nd.output->value;
    auto& gx = grad_buffer(*nd.inputs[0]);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] * y[i];
  });
  return out;
}

Tensor Graph::log(const Tensor& x) {
  std::vector<double> c(x.size());
  for (std::size_t i = 0; i < c.size(); ++i) {
    if (!(x[i] > 0.0)) throw ContractError("log: non-positive input " + std::to_string(x[i]));
    c[i] = std::log(x[i]);
  }
  Tensor out = make_output("log", x.shape(), std::move(c), tracks({&x}));
  record("log", {&x}, out, [](Node& nd) {
    const auto& g = nd.output->grad;
    const auto& xv = nd.inputs[0]->value;
    auto& gx = grad_buffer(*nd.inputs[0]);
    for (std::size_t i = 0; i < g.size(); ++i) gx[i] += g[i] / xv[i];
  });
  return out;
}

Tensor Graph::gelu(const Tensor& x) {
  std::vector<double> c(x.size());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = rowops::gelu_scalar(x[i]);
  Tensor out = make_output("gelu", x.shape(), std::move(c), tracks({&x}));
  record("gelu", {&x}, out, [](Node& nd) {
    constexpr double k = 0.7978845608028654;
    const auto& g = nd.output->grad;
    const auto& xv = nd.inputs[0]->value;
    auto& gx = grad_buffer(*nd.inputs[0]);
    for (std::size_t i = 0; i < g.size(); ++i) {
      const double v = xv[i];
      const double u = k * (v + 0.044715 * v * v * v);
      const double t = std::tanh(u);
      const double du = k * (1.0 + 3.0 * 0.044715 * v * v);
      gx[i] += g[i] * (0.5 * (1.0 + t) + 0.5 * v * (1.0 - t * t) * du);
    }
  });
  return out;
}

Tensor Graph::clamp(const Tensor& x, double lo, double hi) {
  if (!(lo <= hi)) throw ContractError("clamp: lo > hi");
  std::vector<double> c(x.size());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = std::clamp(x[i], lo, hi);
  Tensor out = make_output("clamp", x.shape(), std::move(c), tracks({&x}));
  record("clamp", {&x}, out, [lo, hi](Node& nd) {
    const auto& g = nd.output->grad;
    const auto& xv = nd.inputs[0]->value;
    auto& gx = grad_buffer(*nd.inputs[0]);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (xv[i] > lo && xv[i] < hi) gx[i] += g[i];
  });
  return out;
}

Tensor Graph::minimum(const Tensor& a, const Tensor& b) {
  require_same_shape("minimum", a, b);
  std::vector<double> c(a.size());
  for (std::size_t i = 0; i < c.size(); ++i) c[i] = std::min(a[i], b[i]);
  Tensor out = make_output("minimum", a.shape(), std::move(c), tracks({&a, &b}));
  record("minimum", {&a, &b}, out, [](Node& nd) {
    const auto& g = nd.output->grad;
    TensorStorage& A = *nd.inputs[0];
    TensorStorage& B = *nd.inputs[1];
    for (std::size_t i = 0; i < g.size(); ++i) {
      TensorStorage& pick = A.value[i] <= B.value[i] ? A : B;
      if (pick.requires_grad) grad_buffer(pick)[i] += g[i];
    }
  });
  return out;
}

// ---------------------------------------------------------------------------
// reductions

Tensor Graph::sum(const Tensor& x) {
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor out = make_output("sum", {}, {s}, tracks({&x}));
  record("sum", {&x}, out, [](Node& nd) {
    const double g = nd.output->grad[0];
    for (double& gi : grad_buffer(*nd.inputs[0])) gi += g;
  });
  return out;
}

Tensor Graph::mean(const Tensor& x) {
  const double n = static_cast<double>(x.size());
  double s = 0.0;
  for (double v : x.data()) s += v;
  Tensor out = make_output("mean", {}, {s / n}, tracks({&x}));
  record("mean", {&x}, out, [n](Node& nd) {
    const double g = nd.output->grad[0] / n;
    for (double& gi : grad_buffer(*nd.inputs[0])) gi += g;
  });
  return out;
}

Tensor Graph::slice_rows(const Tensor& x, std::size_t begin, std::size_t end) {
  if (x.ndim() == 0 || begin > end || end > x.shape()[0])
    throw ContractError("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(end) + ") of " +
                        shape_str(x.shape()));
  const std::size_t width = x.size() / x.shape()[0];
  Shape shape = x.shape();
  shape[0] = end - begin;
  std::vector<double> v(x.data().begin() + static_cast<std::ptrdiff_t>(begin * width),
                        x.data().begin() + static_cast<std::ptrdiff_t>(end * width));
  Tensor out = make_output("slice_rows", std::move(shape), std::move(v), tracks({&x}));
  record("slice_rows", {&x}, out, [off = begin * width](Node& nd) {
    const auto& g = nd.output->grad;
    auto& gx = grad_buffer(*nd.inputs[0]);
    for (std::size_t i = 0; i < g.size(); ++i) gx[off + i] += g[i];
  });
  return out;
}

// ---------------------------------------------------------------------------
// model primitives

Tensor Graph::embedding(const Tensor& table, std::span<const int> ids) {
  require_matrix("embedding", table);
  if (ids.empty()) throw ContractError("embedding: empty id list");
  const std::size_t v = table.rows(), d = table.cols();
  std::vector<double> c(ids.size() * d);
  for (std::size_t i = 0; i < ids.size(); ++i) {
    if (ids[i] < 0 || static_cast<std::size_t>(ids[i]) >= v)
      throw ContractError("embedding: id " + std::to_string(ids[i]) + " outside table of " +
                          std::to_string(v) + " rows");
    std::copy_n(table.data().begin() + ids[i] * d, d, c.begin() + i * d);
  }
  Tensor out = make_output("embedding", {ids.size(), d}, std::move(c), tracks({&table}));
  record("embedding", {&table}, out, [idv = std::vector<int>(ids.begin(), ids.end()), d](Node& nd) {
    const auto& g = nd.output->grad;
    auto& gt = grad_buffer(*nd.inputs[0]);
    for (std::size_t i = 0; i < idv.size(); ++i)
      for (std::size_t j = 0; j < d; ++j) gt[idv[i] * d + j] += g[i * d + j];
  });
  return out;
}

Tensor Graph::rmsnorm(const Tensor& x, const Tensor& gain, double eps) {
  require_matrix("rmsnorm", x);
  if (gain.ndim() != 1 || gain.size() != x.cols())
    throw ContractError("rmsnorm: gain " + shape_str(gain.shape()) + " does not fit " +
                        shape_str(x.shape()));
  const std::size_t m = x.rows(), n = x.cols();
  std::vector<double> c(m * n);
  for (std::size_t i = 0; i < m; ++i)
    rowops::rmsnorm_row(x.data().data() + i * n, gain.data().data(), c.data() + i * n, n, eps);
  Tensor out = make_output("rmsnorm", x.shape(), std::move(c), tracks({&x, &gain}));
  record("rmsnorm", {&x, &gain}, out, [m, n, eps](Node& nd) {
    const auto& g = nd.output->grad;
    TensorStorage& X = *nd.inputs[0];
    TensorStorage& G = *nd.inputs[1];
    std::vector<double> xhat(n), dxhat(n);
    for (std::size_t i = 0; i < m; ++i) {
      const double* xr = X.value.data() + i * n;
      double ms = 0.0;
      for (std::size_t j = 0; j < n; ++j) ms += xr[j] * xr[j];
      ms /= static_cast<double>(n);
      const double r = 1.0 / std::sqrt(ms + eps);
      double proj = 0.0;
      for (std::size_t j = 0; j < n; ++j) {
        xhat[j] = xr[j] * r;
        dxhat[j] = g[i * n + j] * G.value[j];
        proj += dxhat[j] * xhat[j];
      }
      proj /= static_cast<double>(n);
      if (G.requires_grad) {
        auto& gg = grad_buffer(G);
        for (std::size_t j = 0; j < n; ++j) gg[j] += g[i * n + j] * xhat[j];
      }
      if (X.requires_grad) {
        auto& gx = grad_buffer(X);
        for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += r * (dxhat[j] - xhat[j] * proj);
      }
    }
  });
  return out;
}

Tensor Graph::softmax(const Tensor& x) {
  if (x.ndim() == 0) throw ContractError("softmax: needs at least one axis");
  const std::size_t n = x.shape().back(), m = x.size() / n;
  for (double v : x.data())
    if (!std::isfinite(v)) throw NonFiniteError("softmax: non-finite input");
  std::vector<double> c(x.size());
  for (std::size_t i = 0; i < m; ++i) rowops::softmax_row(x.data().data() + i * n, c.data() + i * n, n);
  Tensor out = make_output("softmax", x.shape(), std::move(c), tracks({&x}));
  record("softmax", {&x}, out, [m, n](Node& nd) {
    const auto& g = nd.output->grad;
    const auto& y = nd.output->value;
    auto& gx = grad_buffer(*nd.inputs[0]);
    for (std::size_t i = 0; i < m; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * y[i * n + j];
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += y[i * n + j] * (g[i * n + j] - s);
    }
  });
  return out;
}

Tensor Graph::log_softmax(const Tensor& x) {
  if (x.ndim() == 0) throw ContractError("log_softmax: needs at least one axis");
  const std::size_t n = x.shape().back(), m = x.size() / n;
  std::vector<double> c(x.size());
  for (std::size_t i = 0; i < m; ++i) {
    const double* xr = x.data().data() + i * n;
    const double lse = log_sum_exp(xr, n);
    for (std::size_t j = 0; j < n; ++j) c[i * n + j] = xr[j] - lse;
  }
  Tensor out = make_output("log_softmax", x.shape(), std::move(c), tracks({&x}));
  record("log_softmax", {&x}, out, [m, n](Node& nd) {
    const auto& g = nd.output->grad;
    const auto& y = nd.output->value;
    auto& gx = grad_buffer(*nd.inputs[0]);
    for (std::size_t i = 0; i < m; ++i) {
      double s = 0.0;
      for (std::size_t j = 0; j < n; ++j) s += g[i * n + j];
      for (std::size_t j = 0; j < n; ++j) gx[i * n + j] += g[i * n + j] - std::exp(y[i * n + j]) * s;
    }
  });
  return out;
}

Tensor Graph::causal_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                               std::size_t n_heads) {
  require_matrix("causal_attention", q);
  require_same_shape("causal_attention", q, k);
  require_same_shape("causal_attention", q, v);
  const std::size_t T = q.rows(), d = q.cols();
  if (n_heads == 0 || d % n_heads != 0)
    throw ContractError("causal_attention: width " + std::to_string(d) + " not divisible by " +
                        std::to_string(n_heads) + " heads");
  const std::size_t dh = d / n_heads;
  // probs[h][i][j], j <= i
  auto probs = std::make_shared<std::vector<double>>(n_heads * T * T, 0.0);
  std::vector<double> c(T * d);
  for (std::size_t h = 0; h < n_heads; ++h)
    for (std::size_t i = 0; i < T; ++i)
      rowops::attention_row(q.data().data() + i * d + h * dh, k.data().data() + h * dh,
                            v.data().data() + h * dh, d, i + 1, dh,
                            probs->data() + (h * T + i) * T, c.data() + i * d + h * dh);
  Tensor out = make_output("causal_attention", q.shape(), std::move(c), tracks({&q, &k, &v}));
  record("causal_attention", {&q, &k, &v}, out, [T, d, dh, n_heads, probs](Node& nd) {
    const auto& kern = simd::kernels();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));
    const auto& g = nd.output->grad;
    TensorStorage& Q = *nd.inputs[0];
    TensorStorage& K = *nd.inputs[1];
    TensorStorage& V = *nd.inputs[2];
    std::vector<double> dq_local(Q.value.size(), 0.0), dk_local(K.value.size(), 0.0),
        dv_local(V.value.size(), 0.0);
    std::vector<double> ds(T);
    for (std::size_t h = 0; h < n_heads; ++h) {
      for (std::size_t i = 0; i < T; ++i) {
        const double* p = probs->data() + (h * T + i) * T;
        const double* go = g.data() + i * d + h * dh;
        double s = 0.0;
        for (std::size_t j = 0; j <= i; ++j) {
          ds[j] = kern.dot(go, V.value.data() + j * d + h * dh, dh);
          s += p[j] * ds[j];
        }
        for (std::size_t j = 0; j <= i; ++j) {
          const double dsj = p[j] * (ds[j] - s) * scale;
          kern.axpy(dsj, K.value.data() + j * d + h * dh, dq_local.data() + i * d + h * dh, dh);
          kern.axpy(dsj, Q.value.data() + i * d + h * dh, dk_local.data() + j * d + h * dh, dh);
          kern.axpy(p[j], go, dv_local.data() + j * d + h * dh, dh);
        }
      }
    }
    auto accumulate = [](TensorStorage& s, const std::vector<double>& local) {
      if (!s.requires_grad) return;
      auto& gb = grad_buffer(s);
      for (std::size_t i = 0; i < local.size(); ++i) gb[i] += local[i];
    };
    accumulate(Q, dq_local);
    accumulate(K, dk_local);
    accumulate(V, dv_local);
  });
  return out;
}

Tensor Graph::token_log_probs(const Tensor& logits, std::span<const int> targets) {
  require_matrix("token_log_probs", logits);
  const std::size_t T = logits.rows(), V = logits.cols();
  if (targets.size() != T)
    throw ContractError("token_log_probs: " + std::to_string(targets.size()) + " targets for " +
                        shape_str(logits.shape()));
  std::vector<double> c(T);
  for (std::size_t t = 0; t < T; ++t) {
    if (targets[t] < 0 || static_cast<std::size_t>(targets[t]) >= V)
      throw ContractError("token_log_probs: target out of range");
    const double* row = logits.data().data() + t * V;
    c[t] = row[targets[t]] - log_sum_exp(row, V);
  }
  Tensor out = make_output("token_log_probs", {T}, std::move(c), tracks({&logits}));
  record("token_log_probs", {&logits}, out,
         [T, V, tg = std::vector<int>(targets.begin(), targets.end())](Node& nd) {
           const auto& g = nd.output->grad;
           const auto& x = nd.inputs[0]->value;
           auto& gx = grad_buffer(*nd.inputs[0]);
           std::vector<double> p(V);
           for (std::size_t t = 0; t < T; ++t) {
             if (g[t] == 0.0) continue;
             rowops::softmax_row(x.data() + t * V, p.data(), V);
             for (std::size_t j = 0; j < V; ++j) gx[t * V + j] -= g[t] * p[j];
             gx[t * V + tg[t]] += g[t];
           }
         });
  return out;
}

Tensor Graph::cross_entropy(const Tensor& logits, std::span<const int> targets,
                            std::span<const bool> mask) {
  require_matrix("cross_entropy", logits);
  const std::size_t T = logits.rows(), V = logits.cols();
  if (targets.size() != T || mask.size() != T)
    throw ContractError("cross_entropy: targets/mask length must equal rows of " +
                        shape_str(logits.shape()));
  std::size_t count = 0;
  double total = 0.0;
  for (std::size_t t = 0; t < T; ++t) {
    if (!mask[t]) continue;
    if (targets[t] < 0 || static_cast<std::size_t>(targets[t]) >= V)
      throw ContractError("cross_entropy: target " + std::to_string(targets[t]) +
                          " outside vocabulary of " + std::to_string(V));
    const double* row = logits.data().data() + t * V;
    total += log_sum_exp(row, V) - row[targets[t]];
    ++count;
  }
  const double loss = count ? total / static_cast<double>(count) : 0.0;
  Tensor out = make_output("cross_entropy", {}, {loss}, tracks({&logits}));
  record("cross_entropy", {&logits}, out,
         [T, V, count, tg = std::vector<int>(targets.begin(), targets.end()),
          mk = std::vector<bool>(mask.begin(), mask.end())](Node& nd) {
           if (count == 0) return;
           const double g = nd.output->grad[0] / static_cast<double>(count);
           const auto& x = nd.inputs[0]->value;
           auto& gx = grad_buffer(*nd.inputs[0]);
           std::vector<double> p(V);
           for (std::size_t t = 0; t < T; ++t) {
             if (!mk[t]) continue;
             rowops::softmax_row(x.data() + t * V, p.data(), V);
             for (std::size_t j = 0; j < V; ++j) gx[t * V + j] += g * p[j];
             gx[t * V + tg[t]] -= g;
           }
         });
  return out;
}

}  // namespace terse
