#pragma once

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdint>
#include <functional>
#include <limits>
#include <memory>
#include <optional>
#include <stdexcept>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

namespace boxmil {

using Shape = std::vector<std::size_t>;

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

inline std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

inline std::string shape_str(const Shape& s) {
  std::string out = "[";
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) out += ",";
    out += std::to_string(s[i]);
  }
  return out + "]";
}

namespace detail {

// Reverse-mode tape node. Nodes form a DAG through `parents`; ids are
// globally increasing, so sorting reachable nodes by id descending yields
// a reverse topological order (every node's parents have smaller ids).
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated iff requires_grad, zero-initialized
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  std::uint64_t id = 0;
  bool requires_grad = false;

  std::size_t numel() const { return value.size(); }

  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

inline std::uint64_t next_node_id() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}

}  // namespace detail

// Dense n-d array of doubles participating in reverse-mode differentiation.
// Handle semantics: copying a Tensor shares the underlying node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor leaf(Shape shape, std::vector<double> data,
                     bool requires_grad = false) {
    if (shape_numel(shape) != data.size())
      throw ShapeError("tensor: shape " + shape_str(shape) + " expects " +
                       std::to_string(shape_numel(shape)) + " values, got " +
                       std::to_string(data.size()));
    for (std::size_t d : shape)
      if (d == 0) throw ShapeError("tensor: zero-sized dimension");
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(data);
    n->requires_grad = requires_grad;
    if (requires_grad) n->ensure_grad();
    n->id = detail::next_node_id();
    return Tensor(std::move(n));
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    std::vector<double> d(shape_numel(shape), 0.0);
    return leaf(std::move(shape), std::move(d), requires_grad);
  }

  static Tensor scalar(double v, bool requires_grad = false) {
    return leaf(Shape{}, std::vector<double>{v}, requires_grad);
  }

  bool defined() const { return static_cast<bool>(node_); }
  const Shape& shape() const { return node_->shape; }
  std::size_t numel() const { return node_->numel(); }
  bool requires_grad() const { return node_->requires_grad; }
  bool is_scalar() const { return node_->shape.empty(); }

  const std::vector<double>& values() const { return node_->value; }
  // In-place mutation is only meaningful for leaves (optimizer updates).
  std::vector<double>& values_mut() { return node_->value; }

  double item() const {
    if (!is_scalar()) throw ShapeError("item: tensor is not a scalar");
    return node_->value[0];
  }

  const std::vector<double>& grad() const {
    if (!node_->requires_grad)
      throw std::logic_error("grad: tensor does not require gradients");
    const_cast<detail::Node&>(*node_).ensure_grad();
    return node_->grad;
  }
  std::vector<double>& grad_mut() {
    if (!node_->requires_grad)
      throw std::logic_error("grad: tensor does not require gradients");
    node_->ensure_grad();
    return node_->grad;
  }

  void zero_grad() {
    if (node_->requires_grad) {
      node_->ensure_grad();
      std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
    }
  }

  // Zeroes gradient buffers of every node reachable from this one.
  void zero_all_grads() {
    std::vector<detail::Node*> order = reachable();
    for (auto* n : order)
      if (n->requires_grad) {
        n->ensure_grad();
        std::fill(n->grad.begin(), n->grad.end(), 0.0);
      }
  }

  // Accumulates d(this)/d(ancestor) into every requires_grad ancestor.
  // Repeated calls without zero_all_grads() accumulate.
  void backward() const {
    if (!is_scalar())
      throw std::invalid_argument("backward: root must be a scalar");
    if (!node_->requires_grad) return;
    std::vector<detail::Node*> order = reachable();
    std::sort(order.begin(), order.end(),
              [](const detail::Node* a, const detail::Node* b) {
                return a->id > b->id;
              });
    for (auto* n : order)
      if (n->requires_grad) n->ensure_grad();
    node_->grad[0] += 1.0;
    for (auto* n : order) {
      if (n->requires_grad && n->backward_fn) n->backward_fn(*n);
    }
  }

  detail::Node* node() const { return node_.get(); }
  const std::shared_ptr<detail::Node>& node_ptr() const { return node_; }

  // Open node constructor so higher layers can define fused operations.
  // `backward` reads self.grad and accumulates into self.parents[i]->grad
  // (grad buffers of requires_grad parents are pre-allocated and zeroed).
  static Tensor make_op(Shape shape, std::vector<double> value,
                        std::vector<Tensor> parents,
                        std::function<void(detail::Node&)> backward) {
    if (shape_numel(shape) != value.size())
      throw ShapeError("make_op: shape/value size mismatch");
    auto n = std::make_shared<detail::Node>();
    n->shape = std::move(shape);
    n->value = std::move(value);
    n->parents.reserve(parents.size());
    bool rg = false;
    for (auto& p : parents) {
      rg = rg || p.requires_grad();
      n->parents.push_back(p.node_ptr());
    }
    n->requires_grad = rg;
    if (rg) {
      n->ensure_grad();
      n->backward_fn = std::move(backward);
    }
    n->id = detail::next_node_id();
    return Tensor(std::move(n));
  }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

  std::vector<detail::Node*> reachable() const {
    std::vector<detail::Node*> out;
    std::unordered_set<const detail::Node*> seen;
    std::vector<detail::Node*> stack{node_.get()};
    seen.insert(node_.get());
    while (!stack.empty()) {
      detail::Node* n = stack.back();
      stack.pop_back();
      out.push_back(n);
      for (auto& p : n->parents)
        if (seen.insert(p.get()).second) stack.push_back(p.get());
    }
    return out;
  }

  std::shared_ptr<detail::Node> node_;
};

namespace detail {

// Elementwise binary op with rank-0 broadcast on either side only.
// General broadcasting is intentionally unsupported.
template <typename Fwd, typename BwdA, typename BwdB>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, Fwd fwd,
                 BwdA dda, BwdB ddb) {
  const bool a_scalar = a.is_scalar();
  const bool b_scalar = b.is_scalar();
  if (!a_scalar && !b_scalar && a.shape() != b.shape())
    throw ShapeError(std::string(name) + ": shape mismatch " +
                     shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  const Shape& out_shape = a_scalar ? b.shape() : a.shape();
  const std::size_t n = shape_numel(out_shape);
  std::vector<double> out(n);
  const auto& av = a.values();
  const auto& bv = b.values();
  for (std::size_t i = 0; i < n; ++i)
    out[i] = fwd(av[a_scalar ? 0 : i], bv[b_scalar ? 0 : i]);
  return Tensor::make_op(
      out_shape, std::move(out), {a, b},
      [a_scalar, b_scalar, dda, ddb](Node& self) {
        Node& pa = *self.parents[0];
        Node& pb = *self.parents[1];
        const std::size_t n = self.numel();
        for (std::size_t i = 0; i < n; ++i) {
          const double g = self.grad[i];
          const double x = pa.value[a_scalar ? 0 : i];
          const double y = pb.value[b_scalar ? 0 : i];
          if (pa.requires_grad) pa.grad[a_scalar ? 0 : i] += g * dda(x, y);
          if (pb.requires_grad) pb.grad[b_scalar ? 0 : i] += g * ddb(x, y);
        }
      });
}

template <typename Fwd, typename Bwd>
Tensor unary_op(const Tensor& a, Fwd fwd, Bwd dfdx) {
  const std::size_t n = a.numel();
  std::vector<double> out(n);
  const auto& av = a.values();
  for (std::size_t i = 0; i < n; ++i) out[i] = fwd(av[i]);
  return Tensor::make_op(a.shape(), std::move(out), {a},
                         [dfdx](Node& self) {
                           Node& p = *self.parents[0];
                           if (!p.requires_grad) return;
                           for (std::size_t i = 0; i < self.numel(); ++i)
                             p.grad[i] +=
                                 self.grad[i] * dfdx(p.value[i], self.value[i]);
                         });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "add", [](double x, double y) { return x + y; },
      [](double, double) { return 1.0; }, [](double, double) { return 1.0; });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "sub", [](double x, double y) { return x - y; },
      [](double, double) { return 1.0; }, [](double, double) { return -1.0; });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary_op(
      a, b, "mul", [](double x, double y) { return x * y; },
      [](double, double y) { return y; }, [](double x, double) { return x; });
}

// Division by zero is rejected rather than producing infinities; a silent
// infinity would poison every downstream loss scan.
inline Tensor div(const Tensor& a, const Tensor& b) {
  for (double y : b.values())
    if (y == 0.0) throw std::domain_error("div: division by zero");
  return detail::binary_op(
      a, b, "div", [](double x, double y) { return x / y; },
      [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double s) { return add(a, Tensor::scalar(s)); }
inline Tensor operator+(double s, const Tensor& a) { return add(Tensor::scalar(s), a); }
inline Tensor operator-(const Tensor& a, double s) { return sub(a, Tensor::scalar(s)); }
inline Tensor operator-(double s, const Tensor& a) { return sub(Tensor::scalar(s), a); }
inline Tensor operator*(const Tensor& a, double s) { return mul(a, Tensor::scalar(s)); }
inline Tensor operator*(double s, const Tensor& a) { return mul(Tensor::scalar(s), a); }
inline Tensor operator/(const Tensor& a, double s) { return div(a, Tensor::scalar(s)); }
inline Tensor operator-(const Tensor& a) { return mul(a, Tensor::scalar(-1.0)); }

inline Tensor exp(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

inline Tensor log(const Tensor& a) {
  for (double x : a.values())
    if (!(x > 0.0)) throw std::domain_error("log: non-positive input");
  return detail::unary_op(
      a, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

// Output is clamped into the open interval (0,1): for |x| large enough the
// naive expression rounds to exactly 0 or 1, which downstream log-losses
// cannot accept.
inline Tensor sigmoid(const Tensor& a) {
  constexpr double kLo = std::numeric_limits<double>::min();
  const double kHi = 1.0 - std::numeric_limits<double>::epsilon() / 2;
  return detail::unary_op(
      a,
      [=](double x) {
        double s;
        if (x >= 0.0) {
          s = 1.0 / (1.0 + std::exp(-x));
        } else {
          const double e = std::exp(x);
          s = e / (1.0 + e);
        }
        return std::min(kHi, std::max(kLo, s));
      },
      [](double, double s) { return s * (1.0 - s); });
}

inline Tensor square(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return x * x; },
      [](double x, double) { return 2.0 * x; });
}

// x^e for a fixed real exponent; x must be >= 0 when e is non-integral.
inline Tensor pow_const(const Tensor& a, double e) {
  if (e != std::floor(e))
    for (double x : a.values())
      if (x < 0.0)
        throw std::domain_error("pow_const: negative base, fractional exponent");
  return detail::unary_op(
      a, [e](double x) { return std::pow(x, e); },
      [e](double x, double) {
        return e == 0.0 ? 0.0 : e * std::pow(x, e - 1.0);
      });
}

inline Tensor relu(const Tensor& a) {
  return detail::unary_op(
      a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

// Gradient passes through where lo <= x <= hi and is zero outside.
inline Tensor clamp(const Tensor& a, double lo, double hi) {
  return detail::unary_op(
      a, [lo, hi](double x) { return std::min(hi, std::max(lo, x)); },
      [lo, hi](double x, double) {
        return (x >= lo && x <= hi) ? 1.0 : 0.0;
      });
}

inline Tensor sum(const Tensor& a) {
  double acc = 0.0;
  for (double x : a.values()) acc += x;
  return Tensor::make_op(Shape{}, {acc}, {a}, [](detail::Node& self) {
    detail::Node& p = *self.parents[0];
    if (!p.requires_grad) return;
    const double g = self.grad[0];
    for (auto& gp : p.grad) gp += g;
  });
}

inline Tensor mean(const Tensor& a) {
  const double inv = 1.0 / static_cast<double>(a.numel());
  double acc = 0.0;
  for (double x : a.values()) acc += x;
  return Tensor::make_op(Shape{}, {acc * inv}, {a},
                         [inv](detail::Node& self) {
                           detail::Node& p = *self.parents[0];
                           if (!p.requires_grad) return;
                           const double g = self.grad[0] * inv;
                           for (auto& gp : p.grad) gp += g;
                         });
}

// Full max reduction. The gradient is routed to the first maximal element
// in flat (row-major) order so that tie-breaking is deterministic.
inline Tensor max_reduce(const Tensor& a) {
  const auto& av = a.values();
  std::size_t arg = 0;
  for (std::size_t i = 1; i < av.size(); ++i)
    if (av[i] > av[arg]) arg = i;
  return Tensor::make_op(Shape{}, {av[arg]}, {a},
                         [arg](detail::Node& self) {
                           detail::Node& p = *self.parents[0];
                           if (!p.requires_grad) return;
                           p.grad[arg] += self.grad[0];
                         });
}

namespace detail {

struct AxisSpans {
  std::size_t outer, axis_len, inner;
};

inline AxisSpans axis_spans(const Shape& s, std::size_t axis, const char* name) {
  if (axis >= s.size())
    throw ShapeError(std::string(name) + ": axis " + std::to_string(axis) +
                     " out of range for " + shape_str(s));
  AxisSpans sp{1, s[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) sp.outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) sp.inner *= s[i];
  return sp;
}

inline Shape drop_axis(const Shape& s, std::size_t axis) {
  Shape out;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) out.push_back(s[i]);
  return out;
}

}  // namespace detail

inline Tensor sum(const Tensor& a, std::size_t axis) {
  const auto sp = detail::axis_spans(a.shape(), axis, "sum");
  const auto& av = a.values();
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t k = 0; k < sp.axis_len; ++k)
      for (std::size_t i = 0; i < sp.inner; ++i)
        out[o * sp.inner + i] += av[(o * sp.axis_len + k) * sp.inner + i];
  return Tensor::make_op(
      detail::drop_axis(a.shape(), axis), std::move(out), {a},
      [sp](detail::Node& self) {
        detail::Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        for (std::size_t o = 0; o < sp.outer; ++o)
          for (std::size_t k = 0; k < sp.axis_len; ++k)
            for (std::size_t i = 0; i < sp.inner; ++i)
              p.grad[(o * sp.axis_len + k) * sp.inner + i] +=
                  self.grad[o * sp.inner + i];
      });
}

inline Tensor mean(const Tensor& a, std::size_t axis) {
  const auto sp = detail::axis_spans(a.shape(), axis, "mean");
  return sum(a, axis) * (1.0 / static_cast<double>(sp.axis_len));
}

inline Tensor max_reduce(const Tensor& a, std::size_t axis) {
  const auto sp = detail::axis_spans(a.shape(), axis, "max_reduce");
  const auto& av = a.values();
  std::vector<double> out(sp.outer * sp.inner);
  std::vector<std::size_t> args(sp.outer * sp.inner);
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      std::size_t arg = (o * sp.axis_len) * sp.inner + i;
      for (std::size_t k = 1; k < sp.axis_len; ++k) {
        const std::size_t idx = (o * sp.axis_len + k) * sp.inner + i;
        if (av[idx] > av[arg]) arg = idx;
      }
      out[o * sp.inner + i] = av[arg];
      args[o * sp.inner + i] = arg;
    }
  return Tensor::make_op(
      detail::drop_axis(a.shape(), axis), std::move(out), {a},
      [args = std::move(args)](detail::Node& self) {
        detail::Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        for (std::size_t j = 0; j < args.size(); ++j)
          p.grad[args[j]] += self.grad[j];
      });
}

// Picks elements by flat index into a 1-d result; backward scatter-adds.
inline Tensor gather(const Tensor& a, std::vector<std::size_t> indices) {
  if (indices.empty()) throw ShapeError("gather: empty index list");
  const auto& av = a.values();
  std::vector<double> out(indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    if (indices[i] >= av.size())
      throw ShapeError("gather: index " + std::to_string(indices[i]) +
                       " out of range for " + std::to_string(av.size()) +
                       " elements");
    out[i] = av[indices[i]];
  }
  return Tensor::make_op(
      Shape{indices.size()}, std::move(out), {a},
      [indices = std::move(indices)](detail::Node& self) {
        detail::Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        for (std::size_t i = 0; i < indices.size(); ++i)
          p.grad[indices[i]] += self.grad[i];
      });
}

// [C,...] -> [...] slice of one leading-axis entry.
inline Tensor select_channel(const Tensor& a, std::size_t c) {
  if (a.shape().size() < 2)
    throw ShapeError("select_channel: rank must be >= 2");
  const std::size_t channels = a.shape()[0];
  if (c >= channels)
    throw ShapeError("select_channel: channel out of range");
  const std::size_t plane = a.numel() / channels;
  Shape out_shape(a.shape().begin() + 1, a.shape().end());
  std::vector<double> out(a.values().begin() + c * plane,
                          a.values().begin() + (c + 1) * plane);
  return Tensor::make_op(std::move(out_shape), std::move(out), {a},
                         [c, plane](detail::Node& self) {
                           detail::Node& p = *self.parents[0];
                           if (!p.requires_grad) return;
                           for (std::size_t i = 0; i < plane; ++i)
                             p.grad[c * plane + i] += self.grad[i];
                         });
}

// Packs scalar tensors into a 1-d vector.
inline Tensor stack(const std::vector<Tensor>& scalars) {
  if (scalars.empty()) throw ShapeError("stack: empty input");
  std::vector<double> out(scalars.size());
  for (std::size_t i = 0; i < scalars.size(); ++i) {
    if (!scalars[i].is_scalar())
      throw ShapeError("stack: all inputs must be scalars");
    out[i] = scalars[i].item();
  }
  return Tensor::make_op(Shape{scalars.size()}, std::move(out), scalars,
                         [](detail::Node& self) {
                           for (std::size_t i = 0; i < self.parents.size(); ++i) {
                             detail::Node& p = *self.parents[i];
                             if (p.requires_grad) p.grad[0] += self.grad[i];
                           }
                         });
}

// alpha-softmax: sum(x_i * e^(a*x_i)) / sum(e^(a*x_i)).
// Computed with weights shifted by max(x) so it stays finite for any input.
// d/dx_j = w_j * (1 + a*(x_j - S)) / sum(w).
inline Tensor alpha_softmax(const Tensor& a, double alpha) {
  if (!(alpha > 0.0)) throw std::domain_error("alpha_softmax: alpha must be > 0");
  const auto& x = a.values();
  if (x.empty()) throw ShapeError("alpha_softmax: empty input");
  const double m = *std::max_element(x.begin(), x.end());
  double den = 0.0, num = 0.0;
  std::vector<double> w(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    w[i] = std::exp(alpha * (x[i] - m));
    den += w[i];
    num += x[i] * w[i];
  }
  const double s = num / den;
  return Tensor::make_op(
      Shape{}, {s}, {a},
      [alpha, s, den, w = std::move(w)](detail::Node& self) {
        detail::Node& p = *self.parents[0];
        if (!p.requires_grad) return;
        const double g = self.grad[0];
        for (std::size_t i = 0; i < w.size(); ++i)
          p.grad[i] += g * (w[i] / den) * (1.0 + alpha * (p.value[i] - s));
      });
}

// alpha-quasimax: (1/a) * log(sum(e^(a*x_i))) - log(n)/a.
// Shifted form m + (log(sum(e^(a*(x-m)))) - log(n))/a keeps the n-equal-
// entries case exact and never overflows. d/dx_j = softmax(a*x)_j.
inline Tensor alpha_quasimax(const Tensor& a, double alpha) {
  if (!(alpha > 0.0)) throw std::domain_error("alpha_quasimax: alpha must be > 0");
  const auto& x = a.values();
  if (x.empty()) throw ShapeError("alpha_quasimax: empty input");
  const double m = *std::max_element(x.begin(), x.end());
  double den = 0.0;
  std::vector<double> w(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) {
    w[i] = std::exp(alpha * (x[i] - m));
    den += w[i];
  }
  const double q =
      m + (std::log(den) - std::log(static_cast<double>(x.size()))) / alpha;
  return Tensor::make_op(Shape{}, {q}, {a},
                         [den, w = std::move(w)](detail::Node& self) {
                           detail::Node& p = *self.parents[0];
                           if (!p.requires_grad) return;
                           const double g = self.grad[0];
                           for (std::size_t i = 0; i < w.size(); ++i)
                             p.grad[i] += g * (w[i] / den);
                         });
}

}  // namespace boxmil
