#pragma once

// Dense rank<=2 tensors of doubles with a define-by-run reverse-mode tape,
// a named parameter store, Adam, and a plain MLP builder.

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <random>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <nlohmann/json.hpp>

#include "prefgrpo/errors.hpp"
#include "prefgrpo/rng.hpp"

namespace prefgrpo {

using Shape = std::vector<std::size_t>;
using NodeId = std::size_t;

class Tape;

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

inline std::size_t shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1},
                         std::multiplies<>());
}

/// Row-major dense array. Values are immutable after construction; a tensor
/// produced by an op on a tape-attached input carries the tape and node id.
class Tensor {
 public:
  Tensor() : shape_{1}, data_{0.0} {}

  Tensor(Shape shape, std::vector<double> data)
      : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_.empty() || shape_.size() > 2)
      throw ShapeError("tensor rank must be 1 or 2, got shape " +
                       shape_str(shape_));
    for (auto d : shape_)
      if (d == 0) throw ShapeError("zero-sized dimension in " + shape_str(shape_));
    if (shape_numel(shape_) != data_.size())
      throw ShapeError("shape " + shape_str(shape_) + " does not match " +
                       std::to_string(data_.size()) + " elements");
  }

  static Tensor scalar(double v) { return Tensor({1}, {v}); }
  static Tensor vector(std::vector<double> v) {
    const auto n = v.size();
    return Tensor({n}, std::move(v));
  }
  static Tensor matrix(std::size_t rows, std::size_t cols,
                       std::vector<double> v) {
    return Tensor({rows, cols}, std::move(v));
  }
  static Tensor filled(Shape shape, double v) {
    const auto n = shape_numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v));
  }
  static Tensor zeros(Shape shape) { return filled(std::move(shape), 0.0); }

  const Shape& shape() const noexcept { return shape_; }
  std::span<const double> data() const noexcept { return data_; }
  const std::vector<double>& values() const noexcept { return data_; }
  std::size_t size() const noexcept { return data_.size(); }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t rows() const noexcept { return shape_.size() == 2 ? shape_[0] : 1; }
  std::size_t cols() const noexcept { return shape_.back(); }

  double operator[](std::size_t i) const { return data_[i]; }
  double at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }

  double item() const {
    if (data_.size() != 1)
      throw ContractError("item() on non-scalar tensor " + shape_str(shape_));
    return data_[0];
  }

  bool attached() const noexcept { return tape_ != nullptr; }
  std::optional<NodeId> node() const noexcept {
    return tape_ ? std::optional<NodeId>(node_) : std::nullopt;
  }
  Tape* tape() const noexcept { return tape_; }

  /// Copy of the value without a tape handle.
  Tensor detached() const { return Tensor(shape_, data_); }

 private:
  friend class Tape;
  Shape shape_;
  std::vector<double> data_;
  Tape* tape_ = nullptr;
  NodeId node_ = 0;
};

enum class OpKind {
  leaf,
  add,
  sub,
  mul,
  scalar_mul,
  matmul,
  sum,
  mean,
  square,
  exp,
  ln,
  tanh,
  silu,
  concat,
  broadcast_add,
};

inline std::string_view op_name(OpKind k) {
  switch (k) {
    case OpKind::leaf: return "leaf";
    case OpKind::add: return "add";
    case OpKind::sub: return "sub";
    case OpKind::mul: return "mul";
    case OpKind::scalar_mul: return "scalar_mul";
    case OpKind::matmul: return "matmul";
    case OpKind::sum: return "sum";
    case OpKind::mean: return "mean";
    case OpKind::square: return "square";
    case OpKind::exp: return "exp";
    case OpKind::ln: return "ln";
    case OpKind::tanh: return "tanh";
    case OpKind::silu: return "silu";
    case OpKind::concat: return "concat";
    case OpKind::broadcast_add: return "broadcast_add";
  }
  return "?";
}

inline Tensor forward_op(OpKind kind, std::span<const Tensor> inputs,
                         double scalar = 1.0);

/// Gradients produced by Tape::backward, indexed by node id. Every node of
/// the tape has an entry; nodes not reachable from the root hold zeros.
class Gradients {
 public:
  Gradients() = default;
  explicit Gradients(std::vector<Tensor> g) : grads_(std::move(g)) {}

  const Tensor& at(NodeId id) const {
    if (id >= grads_.size()) throw ContractError("no gradient for node");
    return grads_[id];
  }
  const Tensor& of(const Tensor& t) const {
    if (!t.node()) throw ContractError("tensor is not tape-attached");
    return at(*t.node());
  }
  std::size_t size() const noexcept { return grads_.size(); }

 private:
  std::vector<Tensor> grads_;
};

namespace detail {

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

inline void require_same_shape(OpKind k, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op_name(k)) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
}

inline void require_arity(OpKind k, std::span<const Tensor> in, std::size_t n) {
  if (in.size() != n)
    throw ShapeError(std::string(op_name(k)) + " expects " + std::to_string(n) +
                     " inputs, got " + std::to_string(in.size()));
}

// C[m,n] = A[m,k] * B[k,n], optionally with A and/or B transposed in storage.
inline std::vector<double> gemm(std::span<const double> a, std::span<const double> b,
                                std::size_t m, std::size_t k, std::size_t n,
                                bool trans_a, bool trans_b) {
  std::vector<double> c(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i) {
    double* ci = c.data() + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = trans_a ? a[p * m + i] : a[i * k + p];
      if (aip == 0.0) continue;
      if (trans_b) {
        for (std::size_t j = 0; j < n; ++j) ci[j] += aip * b[j * k + p];
      } else {
        const double* bp = b.data() + p * n;
        for (std::size_t j = 0; j < n; ++j) ci[j] += aip * bp[j];
      }
    }
  }
  return c;
}

inline Tensor compute(OpKind kind, std::span<const Tensor> in, double scalar) {
  auto unary = [&](auto&& f) {
    require_arity(kind, in, 1);
    std::vector<double> out(in[0].size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[0][i]);
    return Tensor(in[0].shape(), std::move(out));
  };
  auto binary = [&](auto&& f) {
    require_arity(kind, in, 2);
    require_same_shape(kind, in[0], in[1]);
    std::vector<double> out(in[0].size());
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(in[0][i], in[1][i]);
    return Tensor(in[0].shape(), std::move(out));
  };

  switch (kind) {
    case OpKind::add: return binary([](double a, double b) { return a + b; });
    case OpKind::sub: return binary([](double a, double b) { return a - b; });
    case OpKind::mul: return binary([](double a, double b) { return a * b; });
    case OpKind::scalar_mul:
      return unary([scalar](double a) { return scalar * a; });
    case OpKind::matmul: {
      require_arity(kind, in, 2);
      const auto& a = in[0];
      const auto& b = in[1];
      if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0])
        throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()));
      const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
      return Tensor({m, n}, gemm(a.data(), b.data(), m, k, n, false, false));
    }
    case OpKind::sum:
    case OpKind::mean: {
      require_arity(kind, in, 1);
      double s = 0.0;
      for (double v : in[0].data()) s += v;
      if (kind == OpKind::mean) s /= static_cast<double>(in[0].size());
      return Tensor::scalar(s);
    }
    case OpKind::square: return unary([](double a) { return a * a; });
    case OpKind::exp: return unary([](double a) { return std::exp(a); });
    case OpKind::ln: {
      require_arity(kind, in, 1);
      for (double v : in[0].data())
        if (!(v > 0.0)) throw DomainError("ln of non-positive value " + std::to_string(v));
      return unary([](double a) { return std::log(a); });
    }
    case OpKind::tanh: return unary([](double a) { return std::tanh(a); });
    case OpKind::silu: return unary([](double a) { return a * sigmoid(a); });
    case OpKind::concat: {
      if (in.empty()) throw ShapeError("concat: no inputs");
      const std::size_t rank = in[0].rank();
      for (const auto& t : in)
        if (t.rank() != rank || t.rows() != in[0].rows())
          throw ShapeError("concat: inputs must share rank and row count");
      if (rank == 1) {
        std::vector<double> out;
        for (const auto& t : in) out.insert(out.end(), t.data().begin(), t.data().end());
        return Tensor::vector(std::move(out));
      }
      const std::size_t m = in[0].rows();
      std::size_t n = 0;
      for (const auto& t : in) n += t.cols();
      std::vector<double> out(m * n);
      for (std::size_t r = 0; r < m; ++r) {
        std::size_t off = 0;
        for (const auto& t : in) {
          const std::size_t c = t.cols();
          std::copy_n(t.data().begin() + r * c, c, out.begin() + r * n + off);
          off += c;
        }
      }
      return Tensor({m, n}, std::move(out));
    }
    case OpKind::broadcast_add: {
      require_arity(kind, in, 2);
      const auto& a = in[0];
      const auto& b = in[1];
      const bool row_ok = (b.rank() == 1 || (b.rank() == 2 && b.rows() == 1));
      if (a.rank() != 2 || !row_ok || b.cols() != a.cols())
        throw ShapeError("broadcast_add: cannot add " + shape_str(b.shape()) +
                         " to rows of " + shape_str(a.shape()));
      std::vector<double> out(a.values());
      const std::size_t n = a.cols();
      for (std::size_t r = 0; r < a.rows(); ++r)
        for (std::size_t j = 0; j < n; ++j) out[r * n + j] += b[j];
      return Tensor(a.shape(), std::move(out));
    }
    case OpKind::leaf: break;
  }
  throw ContractError("leaf is not a forward op");
}

}  // namespace detail

/// Append-only record of the operations of one forward pass.
class Tape {
 public:
  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  /// Registers `value` as a leaf and returns the attached tensor.
  Tensor watch(const Tensor& value) {
    Node n{OpKind::leaf, {}, {}, 0.0, value.detached()};
    return push(std::move(n));
  }

  std::size_t size() const noexcept { return nodes_.size(); }
  OpKind kind(NodeId id) const { return nodes_.at(id).kind; }
  const std::vector<std::optional<NodeId>>& inputs(NodeId id) const {
    return nodes_.at(id).inputs;
  }

  /// Reverse sweep from a scalar root.
  Gradients backward(const Tensor& root) const {
    if (root.size() != 1)
      throw ContractError("backward root must be scalar, got shape " +
                          shape_str(root.shape()));
    if (root.tape() != this)
      throw ContractError("backward root is not attached to this tape");
    std::vector<std::vector<double>> g(nodes_.size());
    g[*root.node()] = {1.0};
    for (std::size_t idx = *root.node() + 1; idx-- > 0;) {
      if (g[idx].empty()) continue;
      propagate(nodes_[idx], g[idx], g);
    }
    std::vector<Tensor> out;
    out.reserve(nodes_.size());
    for (std::size_t i = 0; i < nodes_.size(); ++i) {
      const auto& shape = nodes_[i].value.shape();
      if (g[i].empty())
        out.push_back(Tensor::zeros(shape));
      else
        out.emplace_back(shape, std::move(g[i]));
    }
    return Gradients(std::move(out));
  }

 private:
  friend Tensor forward_op(OpKind, std::span<const Tensor>, double);

  struct Node {
    OpKind kind;
    std::vector<std::optional<NodeId>> inputs;
    std::vector<Tensor> saved;  // detached input values
    double scalar;
    Tensor value;  // detached output
  };

  Tensor push(Node n) {
    Tensor out = n.value;
    nodes_.push_back(std::move(n));
    out.tape_ = this;
    out.node_ = nodes_.size() - 1;
    return out;
  }

  Tensor record(OpKind kind, std::span<const Tensor> in, double scalar,
                Tensor value) {
    Node n{kind, {}, {}, scalar, std::move(value)};
    n.inputs.reserve(in.size());
    n.saved.reserve(in.size());
    for (const auto& t : in) {
      n.inputs.push_back(t.node());
      n.saved.push_back(t.detached());
    }
    return push(std::move(n));
  }

  static void accumulate(std::vector<double>& dst, const std::vector<double>& src) {
    if (dst.empty()) {
      dst = src;
      return;
    }
    for (std::size_t i = 0; i < dst.size(); ++i) dst[i] += src[i];
  }

  static void propagate(const Node& n, const std::vector<double>& go,
                        std::vector<std::vector<double>>& g) {
    auto send = [&](std::size_t slot, std::vector<double> grad) {
      if (auto id = n.inputs[slot]) accumulate(g[*id], grad);
    };
    auto elementwise = [&](std::size_t slot, auto&& f) {
      if (!n.inputs[slot]) return;
      std::vector<double> grad(go.size());
      for (std::size_t i = 0; i < grad.size(); ++i) grad[i] = go[i] * f(i);
      send(slot, std::move(grad));
    };
    const auto& s = n.saved;
    switch (n.kind) {
      case OpKind::leaf: return;
      case OpKind::add:
        send(0, go);
        send(1, go);
        return;
      case OpKind::sub:
        send(0, go);
        elementwise(1, [](std::size_t) { return -1.0; });
        return;
      case OpKind::mul:
        elementwise(0, [&](std::size_t i) { return s[1][i]; });
        elementwise(1, [&](std::size_t i) { return s[0][i]; });
        return;
      case OpKind::scalar_mul:
        elementwise(0, [&](std::size_t) { return n.scalar; });
        return;
      case OpKind::matmul: {
        const std::size_t m = s[0].shape()[0], k = s[0].shape()[1],
                          nn = s[1].shape()[1];
        if (n.inputs[0]) send(0, detail::gemm(go, s[1].data(), m, nn, k, false, true));
        if (n.inputs[1]) send(1, detail::gemm(s[0].data(), go, k, m, nn, true, false));
        return;
      }
      case OpKind::sum:
        if (n.inputs[0]) send(0, std::vector<double>(s[0].size(), go[0]));
        return;
      case OpKind::mean:
        if (n.inputs[0])
          send(0, std::vector<double>(s[0].size(),
                                      go[0] / static_cast<double>(s[0].size())));
        return;
      case OpKind::square:
        elementwise(0, [&](std::size_t i) { return 2.0 * s[0][i]; });
        return;
      case OpKind::exp:
        elementwise(0, [&](std::size_t i) { return n.value[i]; });
        return;
      case OpKind::ln:
        elementwise(0, [&](std::size_t i) { return 1.0 / s[0][i]; });
        return;
      case OpKind::tanh:
        elementwise(0, [&](std::size_t i) { return 1.0 - n.value[i] * n.value[i]; });
        return;
      case OpKind::silu:
        elementwise(0, [&](std::size_t i) {
          const double x = s[0][i];
          const double sg = detail::sigmoid(x);
          return sg * (1.0 + x * (1.0 - sg));
        });
        return;
      case OpKind::concat: {
        const std::size_t m = n.value.rows();
        const std::size_t total = n.value.cols();
        std::size_t off = 0;
        for (std::size_t slot = 0; slot < s.size(); ++slot) {
          const std::size_t c = s[slot].cols();
          if (n.inputs[slot]) {
            std::vector<double> grad(m * c);
            for (std::size_t r = 0; r < m; ++r)
              std::copy_n(go.begin() + r * total + off, c, grad.begin() + r * c);
            send(slot, std::move(grad));
          }
          off += c;
        }
        return;
      }
      case OpKind::broadcast_add: {
        send(0, go);
        if (n.inputs[1]) {
          const std::size_t cols = s[0].cols();
          std::vector<double> grad(cols, 0.0);
          for (std::size_t r = 0; r < s[0].rows(); ++r)
            for (std::size_t j = 0; j < cols; ++j) grad[j] += go[r * cols + j];
          send(1, std::move(grad));
        }
        return;
      }
    }
  }

  std::vector<Node> nodes_;
};

/// Evaluates one op. The result is recorded on the tape shared by the
/// attached inputs, if any.
inline Tensor forward_op(OpKind kind, std::span<const Tensor> inputs,
                         double scalar) {
  Tape* tape = nullptr;
  for (const auto& t : inputs) {
    if (!t.tape()) continue;
    if (tape && tape != t.tape())
      throw ContractError("inputs are attached to different tapes");
    tape = t.tape();
  }
  Tensor out = detail::compute(kind, inputs, scalar);
  for (double v : out.data())
    if (!std::isfinite(v))
      throw NumericsError(std::string(op_name(kind)) + " produced a non-finite value");
  if (!tape) return out;
  return tape->record(kind, inputs, scalar, std::move(out));
}

// Convenience wrappers.
inline Tensor add(const Tensor& a, const Tensor& b) {
  const Tensor in[] = {a, b};
  return forward_op(OpKind::add, in);
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  const Tensor in[] = {a, b};
  return forward_op(OpKind::sub, in);
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  const Tensor in[] = {a, b};
  return forward_op(OpKind::mul, in);
}
inline Tensor scalar_mul(const Tensor& a, double s) {
  const Tensor in[] = {a};
  return forward_op(OpKind::scalar_mul, in, s);
}
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  const Tensor in[] = {a, b};
  return forward_op(OpKind::matmul, in);
}
inline Tensor broadcast_add(const Tensor& a, const Tensor& row) {
  const Tensor in[] = {a, row};
  return forward_op(OpKind::broadcast_add, in);
}
inline Tensor concat(std::span<const Tensor> parts) {
  return forward_op(OpKind::concat, parts);
}
#define PREFGRPO_UNARY(fn, kind)                 \
  inline Tensor fn(const Tensor& a) {            \
    const Tensor in[] = {a};                     \
    return forward_op(OpKind::kind, in);         \
  }
PREFGRPO_UNARY(sum, sum)
PREFGRPO_UNARY(mean, mean)
PREFGRPO_UNARY(square, square)
PREFGRPO_UNARY(exp, exp)
PREFGRPO_UNARY(ln, ln)
PREFGRPO_UNARY(tanh, tanh)
PREFGRPO_UNARY(silu, silu)
#undef PREFGRPO_UNARY

// ---------------------------------------------------------------------------
// Parameters and optimization

using TensorMap = std::map<std::string, Tensor>;

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Named parameters plus Adam moment buffers. Names are unique and a
/// parameter's shape never changes after `add`.
class ParamStore {
 public:
  void add(const std::string& name, Tensor value) {
    if (values_.count(name)) throw ContractError("duplicate parameter '" + name + "'");
    Tensor v = value.detached();
    first_.emplace(name, Tensor::zeros(v.shape()));
    second_.emplace(name, Tensor::zeros(v.shape()));
    values_.emplace(name, std::move(v));
  }

  void set(const std::string& name, const Tensor& value) {
    auto it = values_.find(name);
    if (it == values_.end()) throw ContractError("unknown parameter '" + name + "'");
    if (it->second.shape() != value.shape())
      throw ShapeError("parameter '" + name + "' has fixed shape " +
                       shape_str(it->second.shape()));
    it->second = value.detached();
  }

  const Tensor& get(const std::string& name) const {
    auto it = values_.find(name);
    if (it == values_.end()) throw ContractError("unknown parameter '" + name + "'");
    return it->second;
  }

  bool contains(const std::string& name) const { return values_.count(name) > 0; }
  const TensorMap& values() const noexcept { return values_; }
  std::size_t count() const {
    std::size_t n = 0;
    for (const auto& [_, t] : values_) n += t.size();
    return n;
  }
  std::uint64_t step() const noexcept { return step_; }

  /// Watches every parameter on `tape`; the returned map mirrors values().
  TensorMap bind(Tape& tape) const {
    TensorMap out;
    for (const auto& [name, t] : values_) out.emplace(name, tape.watch(t));
    return out;
  }

  bool operator==(const ParamStore& o) const {
    if (values_.size() != o.values_.size()) return false;
    for (const auto& [name, t] : values_) {
      auto it = o.values_.find(name);
      if (it == o.values_.end() || it->second.shape() != t.shape() ||
          it->second.values() != t.values())
        return false;
    }
    return true;
  }

 private:
  friend void adam_step(ParamStore&, const TensorMap&, const AdamConfig&);
  TensorMap values_;
  TensorMap first_;
  TensorMap second_;
  std::uint64_t step_ = 0;
};

/// Per-parameter gradients out of a backward pass over bound parameters.
inline TensorMap collect_grads(const TensorMap& bound, const Gradients& grads) {
  TensorMap out;
  for (const auto& [name, t] : bound) out.emplace(name, grads.of(t));
  return out;
}

/// One bias-corrected Adam update (descent on the gradient).
inline void adam_step(ParamStore& params, const TensorMap& grads,
                      const AdamConfig& cfg) {
  if (!(cfg.lr > 0)) throw DomainError("Adam learning rate must be > 0");
  for (const auto& [name, _] : params.values_)
    if (!grads.count(name))
      throw ContractError("missing gradient for parameter '" + name + "'");
  const std::uint64_t t = params.step_ + 1;
  const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (auto& [name, value] : params.values_) {
    const Tensor& g = grads.at(name);
    if (g.shape() != value.shape())
      throw ShapeError("gradient shape mismatch for '" + name + "'");
    std::vector<double> p = value.values();
    std::vector<double> m = params.first_.at(name).values();
    std::vector<double> v = params.second_.at(name).values();
    for (std::size_t i = 0; i < p.size(); ++i) {
      m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
      v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = m[i] / c1;
      const double vhat = v[i] / c2;
      p[i] -= cfg.lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
    const Shape shape = value.shape();
    value = Tensor(shape, std::move(p));
    params.first_.at(name) = Tensor(shape, std::move(m));
    params.second_.at(name) = Tensor(shape, std::move(v));
  }
  params.step_ = t;
}

// ---------------------------------------------------------------------------
// MLP

enum class Activation { tanh, silu };

inline Activation parse_activation(std::string_view s) {
  if (s == "tanh") return Activation::tanh;
  if (s == "silu") return Activation::silu;
  throw ContractError("unknown activation '" + std::string(s) + "'");
}
inline std::string_view activation_name(Activation a) {
  return a == Activation::tanh ? "tanh" : "silu";
}

struct MlpSpec {
  std::size_t in_dim = 1;
  std::vector<std::size_t> hidden;
  std::size_t out_dim = 1;
  Activation activation = Activation::tanh;
  std::string prefix = "mlp";

  std::size_t layers() const { return hidden.size() + 1; }
  std::string weight(std::size_t l) const { return prefix + "." + std::to_string(l) + ".weight"; }
  std::string bias(std::size_t l) const { return prefix + "." + std::to_string(l) + ".bias"; }
};

/// Adds the layers of `spec` to `store`, weights and biases drawn from
/// U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
inline void init_mlp(ParamStore& store, const MlpSpec& spec, Engine& eng) {
  if (spec.in_dim == 0 || spec.out_dim == 0) throw ContractError("MLP dims must be positive");
  std::size_t fan_in = spec.in_dim;
  for (std::size_t l = 0; l < spec.layers(); ++l) {
    const std::size_t fan_out = l < spec.hidden.size() ? spec.hidden[l] : spec.out_dim;
    if (fan_out == 0) throw ContractError("MLP dims must be positive");
    const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
    std::uniform_real_distribution<double> dist(-bound, bound);
    std::vector<double> w(fan_in * fan_out), b(fan_out);
    for (auto& v : w) v = dist(eng);
    for (auto& v : b) v = dist(eng);
    store.add(spec.weight(l), Tensor::matrix(fan_in, fan_out, std::move(w)));
    store.add(spec.bias(l), Tensor::vector(std::move(b)));
    fan_in = fan_out;
  }
}

inline ParamStore build_mlp(std::size_t in_dim, std::vector<std::size_t> hidden,
                            std::size_t out_dim, Activation act, std::uint64_t seed) {
  ParamStore store;
  Engine eng = make_engine({seed});
  init_mlp(store, MlpSpec{in_dim, std::move(hidden), out_dim, act}, eng);
  return store;
}

/// x: [batch, in_dim] -> [batch, out_dim]. Records on the tape when either
/// `x` or the parameters are attached.
inline Tensor mlp_forward(const TensorMap& params, const MlpSpec& spec, Tensor x) {
  for (std::size_t l = 0; l < spec.layers(); ++l) {
    x = broadcast_add(matmul(x, params.at(spec.weight(l))), params.at(spec.bias(l)));
    if (l + 1 < spec.layers())
      x = spec.activation == Activation::tanh ? tanh(x) : silu(x);
  }
  return x;
}

// ---------------------------------------------------------------------------
// JSON: {name: {shape: [...], data: [...]}}

inline nlohmann::json params_to_json(const ParamStore& store) {
  nlohmann::json j = nlohmann::json::object();
  for (const auto& [name, t] : store.values())
    j[name] = {{"shape", t.shape()}, {"data", t.values()}};
  return j;
}

inline ParamStore params_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw CheckpointError("parameter block must be an object");
  ParamStore store;
  for (const auto& [name, entry] : j.items()) {
    try {
      auto shape = entry.at("shape").get<Shape>();
      auto data = entry.at("data").get<std::vector<double>>();
      store.add(name, Tensor(std::move(shape), std::move(data)));
    } catch (const nlohmann::json::exception& e) {
      throw CheckpointError("parameter '" + name + "': " + e.what());
    } catch (const ShapeError& e) {
      throw CheckpointError("parameter '" + name + "': " + e.what());
    }
  }
  return store;
}

}  // namespace prefgrpo
