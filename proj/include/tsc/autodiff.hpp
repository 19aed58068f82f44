// SPDX-License-Identifier: Apache-2.0
//
// Eager tape-based reverse-mode differentiation over dense double tensors.
// Every op evaluates immediately and, when any input requires a gradient,
// appends a node with a backward closure. Nodes are appended in evaluation
// order, so the tape is a topological order of the graph by construction.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <initializer_list>
#include <limits>
#include <span>
#include <stdexcept>
#include <string>
#include <utility>
#include <vector>

#include "tsc/tensor.hpp"

namespace tsc::ad {

class Tape;

/// Handle to a node on a Tape. Cheap to copy; valid while the tape is not reset.
class Var {
 public:
  Var() = default;

  bool valid() const { return tape_ != nullptr; }
  Tape& tape() const { return *tape_; }
  std::size_t id() const { return id_; }
  inline const Tensor& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  friend class Tape;
  Var(Tape* tape, std::size_t id) : tape_(tape), id_(id) {}

  Tape* tape_ = nullptr;
  std::size_t id_ = 0;
};

class Tape {
 public:
  using BackwardFn = std::function<void(Tape&, std::size_t self)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var leaf(Tensor value) { return push(std::move(value), true, nullptr); }
  Var constant(Tensor value) { return push(std::move(value), false, nullptr); }

  /// Appends the result of an op. The backward closure is kept only when
  /// some input requires a gradient.
  Var record(const char* op, Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
    return record(op, std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
  }

  Var record(const char* op, Tensor value, std::span<const Var> inputs, BackwardFn fn) {
    if (!value.all_finite()) {
      throw NumericError(std::string("non-finite value produced by ") + op);
    }
    bool needs = false;
    for (const Var& in : inputs) {
      if (in.tape_ != this) throw std::invalid_argument(std::string(op) + ": input from another tape");
      needs = needs || nodes_[in.id_].requires_grad;
    }
    return push(std::move(value), needs, needs ? std::move(fn) : nullptr);
  }

  const Tensor& value(std::size_t id) const { return nodes_.at(id).value; }
  const Tensor& value(Var v) const { return value(v.id_); }
  bool requires_grad(Var v) const { return nodes_.at(v.id_).requires_grad; }

  /// Gradient of the last backward() target with respect to v (zeros if unreached).
  Tensor grad(Var v) const {
    const Node& n = nodes_.at(v.id_);
    return n.has_grad ? n.grad : Tensor(n.value.shape());
  }

  const Tensor& out_grad(std::size_t self) const { return nodes_[self].grad; }

  Tensor& grad_accumulator(Var v) {
    Node& n = nodes_[v.id_];
    if (!n.has_grad) {
      n.grad = Tensor(n.value.shape());
      n.has_grad = true;
    }
    return n.grad;
  }

  void backward(Var loss) {
    if (loss.tape_ != this) throw std::invalid_argument("backward: variable from another tape");
    if (nodes_[loss.id_].value.size() != 1) {
      throw std::invalid_argument("backward: loss must be a scalar, got shape " +
                                  shape_str(nodes_[loss.id_].value.shape()));
    }
    zero_grad();
    grad_accumulator(loss).fill(1.0);
    for (std::size_t i = loss.id_ + 1; i-- > 0;) {
      Node& n = nodes_[i];
      if (n.has_grad && n.backward) n.backward(*this, i);
    }
  }

  void zero_grad() {
    for (Node& n : nodes_) {
      n.has_grad = false;
      n.grad = Tensor();
    }
  }

  void reset() { nodes_.clear(); }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Tensor value;
    Tensor grad;
    BackwardFn backward;
    bool requires_grad = false;
    bool has_grad = false;
  };

  Var push(Tensor value, bool requires_grad, BackwardFn fn) {
    nodes_.push_back(Node{std::move(value), Tensor(), std::move(fn), requires_grad, false});
    return Var(this, nodes_.size() - 1);
  }

  std::vector<Node> nodes_;
};

inline const Tensor& Var::value() const { return tape_->value(id_); }

namespace detail {

inline void same_tape(Var a, Var b, const char* op) {
  if (!a.valid() || !b.valid() || &a.tape() != &b.tape()) {
    throw std::invalid_argument(std::string(op) + ": operands must live on the same tape");
  }
}

// Maps a flat index of the full operand onto the broadcast operand:
// small_index = (i / inner) % channels.
struct Broadcast {
  bool same = true;
  std::size_t inner = 1;
  std::size_t channels = 1;
  std::size_t at(std::size_t i) const { return same ? i : (i / inner) % channels; }
};

/// Broadcast rules: identical shapes; a single-element operand; or a vector
/// matched against the channel axis (rank-3 CxHxW / rank-4 NxCxHxW) or the
/// trailing axis (rank-2 NxK).
inline Broadcast broadcast_plan(const Shape& full, const Shape& small, const char* op) {
  if (full == small) return {};
  const std::size_t n = shape_numel(small);
  if (n == 1) return Broadcast{false, 1, 1};
  if (small.size() == 1) {
    if (full.size() >= 3 && full[full.size() - 3] == n) {
      return Broadcast{false, full[full.size() - 2] * full[full.size() - 1], n};
    }
    if (full.size() == 2 && full.back() == n) return Broadcast{false, 1, n};
  }
  throw std::invalid_argument(std::string(op) + ": shapes " + shape_str(full) + " and " +
                              shape_str(small) + " are not broadcast-compatible");
}

template <class F, class DfDa, class DfDb>
Var binary(const char* op, Var a, Var b, F f, DfDa dfda, DfDb dfdb) {
  same_tape(a, b, op);
  Tape& t = a.tape();
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  // The operand with more elements defines the output shape.
  const bool a_full = av.size() >= bv.size();
  const Shape out_shape = a_full ? av.shape() : bv.shape();
  const Broadcast bc = broadcast_plan(out_shape, a_full ? bv.shape() : av.shape(), op);
  Tensor out(out_shape);
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double x = a_full ? av[i] : av[bc.at(i)];
    const double y = a_full ? bv[bc.at(i)] : bv[i];
    out[i] = f(x, y);
  }
  return t.record(op, std::move(out), {a, b}, [a, b, a_full, bc, dfda, dfdb](Tape& tp, std::size_t self) {
    const Tensor& g = tp.out_grad(self);
    const Tensor& av = tp.value(a);
    const Tensor& bv = tp.value(b);
    auto ia = [&](std::size_t i) { return a_full ? i : bc.at(i); };
    auto ib = [&](std::size_t i) { return a_full ? bc.at(i) : i; };
    if (tp.requires_grad(a)) {
      Tensor& ga = tp.grad_accumulator(a);
      for (std::size_t i = 0; i < g.size(); ++i) ga[ia(i)] += g[i] * dfda(av[ia(i)], bv[ib(i)]);
    }
    if (tp.requires_grad(b)) {
      Tensor& gb = tp.grad_accumulator(b);
      for (std::size_t i = 0; i < g.size(); ++i) gb[ib(i)] += g[i] * dfdb(av[ia(i)], bv[ib(i)]);
    }
  });
}

// y = f(x) elementwise; dydx is evaluated from (x, y).
template <class F, class D>
Var unary(const char* op, Var a, F f, D dydx) {
  Tape& t = a.tape();
  const Tensor& av = a.value();
  Tensor out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  return t.record(op, std::move(out), {a}, [a, dydx](Tape& tp, std::size_t self) {
    const Tensor& g = tp.out_grad(self);
    const Tensor& x = tp.value(a);
    const Tensor& y = tp.value(self);
    Tensor& ga = tp.grad_accumulator(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * dydx(x[i], y[i]);
  });
}

inline double sigmoid(double x) {
  if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace detail

inline Var add(Var a, Var b) {
  return detail::binary(
      "add", a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

inline Var sub(Var a, Var b) {
  return detail::binary(
      "sub", a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

inline Var mul(Var a, Var b) {
  return detail::binary(
      "mul", a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

inline Var scale(Var a, double c) {
  return detail::unary(
      "scale", a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

inline Var relu(Var a) {
  return detail::unary(
      "relu", a, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

inline Var sigmoid(Var a) {
  return detail::unary(
      "sigmoid", a, [](double x) { return detail::sigmoid(x); },
      [](double, double y) { return y * (1.0 - y); });
}

inline Var tanh(Var a) {
  return detail::unary(
      "tanh", a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

inline Var sum(Var a) {
  double s = 0.0;
  for (double v : a.value().data()) s += v;
  return a.tape().record("sum", Tensor::scalar(s), {a}, [a](Tape& tp, std::size_t self) {
    const double g = tp.out_grad(self)[0];
    for (double& v : tp.grad_accumulator(a).storage()) v += g;
  });
}

inline Var mean(Var a) { return scale(sum(a), 1.0 / static_cast<double>(a.value().size())); }

inline Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return a.tape().record("reshape", std::move(out), {a}, [a](Tape& tp, std::size_t self) {
    const Tensor& g = tp.out_grad(self);
    Tensor& ga = tp.grad_accumulator(a);
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

/// Flattens every operand and joins them into one vector.
inline Var concat(std::span<const Var> parts) {
  if (parts.empty()) throw std::invalid_argument("concat: no operands");
  std::vector<double> data;
  for (const Var& p : parts) {
    detail::same_tape(parts.front(), p, "concat");
    const auto d = p.value().data();
    data.insert(data.end(), d.begin(), d.end());
  }
  Tape& t = parts.front().tape();
  std::vector<Var> inputs(parts.begin(), parts.end());
  return t.record("concat", Tensor::vector(std::move(data)), parts, [inputs](Tape& tp, std::size_t self) {
    const Tensor& g = tp.out_grad(self);
    std::size_t off = 0;
    for (const Var& p : inputs) {
      const std::size_t n = tp.value(p).size();
      if (tp.requires_grad(p)) {
        Tensor& gp = tp.grad_accumulator(p);
        for (std::size_t i = 0; i < n; ++i) gp[i] += g[off + i];
      }
      off += n;
    }
  });
}

inline Var concat(std::initializer_list<Var> parts) {
  return concat(std::span<const Var>(parts.begin(), parts.size()));
}

/// Averages over one axis; the axis is removed from the result shape.
inline Var mean_axis(Var a, std::size_t axis) {
  const Shape& s = a.value().shape();
  if (axis >= s.size()) throw std::invalid_argument("mean_axis: axis out of range");
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= s[i];
  for (std::size_t i = axis + 1; i < s.size(); ++i) inner *= s[i];
  const std::size_t n = s[axis];
  Shape out_shape;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) out_shape.push_back(s[i]);
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor out(out_shape);
  const Tensor& av = a.value();
  const double inv = 1.0 / static_cast<double>(n);
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t k = 0; k < n; ++k)
      for (std::size_t i = 0; i < inner; ++i) out[o * inner + i] += av[(o * n + k) * inner + i];
  for (double& v : out.storage()) v *= inv;
  return a.tape().record("mean_axis", std::move(out), {a}, [a, outer, inner, n, inv](Tape& tp, std::size_t self) {
    const Tensor& g = tp.out_grad(self);
    Tensor& ga = tp.grad_accumulator(a);
    for (std::size_t o = 0; o < outer; ++o)
      for (std::size_t k = 0; k < n; ++k)
        for (std::size_t i = 0; i < inner; ++i) ga[(o * n + k) * inner + i] += g[o * inner + i] * inv;
  });
}

inline Var matmul(Var a, Var b) {
  detail::same_tape(a, b, "matmul");
  const Tensor& av = a.value();
  const Tensor& bv = b.value();
  if (av.rank() != 2 || bv.rank() != 2 || av.dim(1) != bv.dim(0)) {
    throw std::invalid_argument("matmul: incompatible shapes " + shape_str(av.shape()) + " and " +
                                shape_str(bv.shape()));
  }
  const std::size_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out(Shape{m, n});
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = av[i * k + p];
      for (std::size_t j = 0; j < n; ++j) out[i * n + j] += aip * bv[p * n + j];
    }
  return a.tape().record("matmul", std::move(out), {a, b}, [a, b, m, k, n](Tape& tp, std::size_t self) {
    const Tensor& g = tp.out_grad(self);
    const Tensor& av = tp.value(a);
    const Tensor& bv = tp.value(b);
    if (tp.requires_grad(a)) {
      Tensor& ga = tp.grad_accumulator(a);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          double s = 0.0;
          for (std::size_t j = 0; j < n; ++j) s += g[i * n + j] * bv[p * n + j];
          ga[i * k + p] += s;
        }
    }
    if (tp.requires_grad(b)) {
      Tensor& gb = tp.grad_accumulator(b);
      for (std::size_t i = 0; i < m; ++i)
        for (std::size_t p = 0; p < k; ++p) {
          const double aip = av[i * k + p];
          for (std::size_t j = 0; j < n; ++j) gb[p * n + j] += aip * g[i * n + j];
        }
    }
  });
}

/// x·Wᵀ + b for x of shape [in] or [N x in], W of shape [out x in], optional b [out].
inline Var linear(Var x, Var w, Var b = Var()) {
  detail::same_tape(x, w, "linear");
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  if (wv.rank() != 2 || (xv.rank() != 1 && xv.rank() != 2) || xv.shape().back() != wv.dim(1)) {
    throw std::invalid_argument("linear: input " + shape_str(xv.shape()) + " does not match weight " +
                                shape_str(wv.shape()));
  }
  const bool batched = xv.rank() == 2;
  const std::size_t rows = batched ? xv.dim(0) : 1;
  const std::size_t in = wv.dim(1), outd = wv.dim(0);
  if (b.valid() && (b.value().rank() != 1 || b.value().dim(0) != outd)) {
    throw std::invalid_argument("linear: bias shape " + shape_str(b.value().shape()) + " must be [" +
                                std::to_string(outd) + "]");
  }
  Tensor out(batched ? Shape{rows, outd} : Shape{outd});
  for (std::size_t r = 0; r < rows; ++r)
    for (std::size_t o = 0; o < outd; ++o) {
      double s = b.valid() ? b.value()[o] : 0.0;
      for (std::size_t i = 0; i < in; ++i) s += wv[o * in + i] * xv[r * in + i];
      out[r * outd + o] = s;
    }
  auto fn = [x, w, b, rows, in, outd](Tape& tp, std::size_t self) {
    const Tensor& g = tp.out_grad(self);
    const Tensor& xv = tp.value(x);
    const Tensor& wv = tp.value(w);
    if (tp.requires_grad(x)) {
      Tensor& gx = tp.grad_accumulator(x);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t o = 0; o < outd; ++o) {
          const double go = g[r * outd + o];
          for (std::size_t i = 0; i < in; ++i) gx[r * in + i] += go * wv[o * in + i];
        }
    }
    if (tp.requires_grad(w)) {
      Tensor& gw = tp.grad_accumulator(w);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t o = 0; o < outd; ++o) {
          const double go = g[r * outd + o];
          for (std::size_t i = 0; i < in; ++i) gw[o * in + i] += go * xv[r * in + i];
        }
    }
    if (b.valid() && tp.requires_grad(b)) {
      Tensor& gb = tp.grad_accumulator(b);
      for (std::size_t r = 0; r < rows; ++r)
        for (std::size_t o = 0; o < outd; ++o) gb[o] += g[r * outd + o];
    }
  };
  if (b.valid()) {
    detail::same_tape(x, b, "linear");
    return x.tape().record("linear", std::move(out), {x, w, b}, fn);
  }
  return x.tape().record("linear", std::move(out), {x, w}, fn);
}

struct Conv2dGeometry {
  std::size_t batch, in_ch, height, width;
  std::size_t out_ch, kh, kw;
  std::size_t stride, pad;
  std::size_t out_h, out_w;
};

inline Conv2dGeometry conv2d_geometry(const Shape& x, const Shape& w, std::size_t stride, std::size_t pad) {
  if ((x.size() != 3 && x.size() != 4) || w.size() != 4) {
    throw std::invalid_argument("conv2d: expected x [C,H,W] or [N,C,H,W] and w [C2,C1,k1,k2], got " +
                                shape_str(x) + " and " + shape_str(w));
  }
  if (stride == 0) throw std::invalid_argument("conv2d: stride must be positive");
  const std::size_t off = x.size() == 4 ? 1 : 0;
  Conv2dGeometry g{};
  g.batch = off ? x[0] : 1;
  g.in_ch = x[off];
  g.height = x[off + 1];
  g.width = x[off + 2];
  g.out_ch = w[0];
  g.kh = w[2];
  g.kw = w[3];
  g.stride = stride;
  g.pad = pad;
  if (w[1] != g.in_ch) {
    throw std::invalid_argument("conv2d: kernel expects " + std::to_string(w[1]) + " input channels, got " +
                                std::to_string(g.in_ch));
  }
  if (g.kh > g.height + 2 * pad || g.kw > g.width + 2 * pad) {
    throw std::invalid_argument("conv2d: kernel larger than padded input");
  }
  g.out_h = (g.height + 2 * pad - g.kh) / stride + 1;
  g.out_w = (g.width + 2 * pad - g.kw) / stride + 1;
  return g;
}

namespace detail {

// Visits every valid (output, input, kernel) triple of a zero-padded
// cross-correlation. Out-of-range taps are skipped before the channel loop.
template <class Visit>
void conv2d_visit(const Conv2dGeometry& g, Visit visit) {
  const std::ptrdiff_t H = static_cast<std::ptrdiff_t>(g.height);
  const std::ptrdiff_t W = static_cast<std::ptrdiff_t>(g.width);
  for (std::size_t n = 0; n < g.batch; ++n)
    for (std::size_t c2 = 0; c2 < g.out_ch; ++c2)
      for (std::size_t oh = 0; oh < g.out_h; ++oh)
        for (std::size_t ow = 0; ow < g.out_w; ++ow) {
          const std::size_t o = ((n * g.out_ch + c2) * g.out_h + oh) * g.out_w + ow;
          for (std::size_t ki = 0; ki < g.kh; ++ki) {
            const std::ptrdiff_t ih = static_cast<std::ptrdiff_t>(oh * g.stride + ki) - static_cast<std::ptrdiff_t>(g.pad);
            if (ih < 0 || ih >= H) continue;
            for (std::size_t kj = 0; kj < g.kw; ++kj) {
              const std::ptrdiff_t iw = static_cast<std::ptrdiff_t>(ow * g.stride + kj) - static_cast<std::ptrdiff_t>(g.pad);
              if (iw < 0 || iw >= W) continue;
              const std::size_t x0 = (n * g.in_ch * g.height + static_cast<std::size_t>(ih)) * g.width +
                                     static_cast<std::size_t>(iw);
              const std::size_t w0 = (c2 * g.in_ch * g.kh + ki) * g.kw + kj;
              visit(o, x0, g.height * g.width, w0, g.kh * g.kw);
            }
          }
        }
}

}  // namespace detail

/// Zero-padded 2-D cross-correlation without bias.
inline Var conv2d(Var x, Var w, std::size_t stride = 1, std::size_t pad = 0) {
  detail::same_tape(x, w, "conv2d");
  const Conv2dGeometry g = conv2d_geometry(x.value().shape(), w.value().shape(), stride, pad);
  const Tensor& xv = x.value();
  const Tensor& wv = w.value();
  Tensor out(x.value().rank() == 4 ? Shape{g.batch, g.out_ch, g.out_h, g.out_w} : Shape{g.out_ch, g.out_h, g.out_w});
  const std::size_t C1 = g.in_ch;
  detail::conv2d_visit(g, [&](std::size_t o, std::size_t x0, std::size_t xs, std::size_t w0, std::size_t ws) {
    double s = 0.0;
    for (std::size_t c = 0; c < C1; ++c) s += xv[x0 + c * xs] * wv[w0 + c * ws];
    out[o] += s;
  });
  return x.tape().record("conv2d", std::move(out), {x, w}, [x, w, g](Tape& tp, std::size_t self) {
    const Tensor& go = tp.out_grad(self);
    const Tensor& xv = tp.value(x);
    const Tensor& wv = tp.value(w);
    const std::size_t C1 = g.in_ch;
    if (tp.requires_grad(x)) {
      Tensor& gx = tp.grad_accumulator(x);
      detail::conv2d_visit(g, [&](std::size_t o, std::size_t x0, std::size_t xs, std::size_t w0, std::size_t ws) {
        const double gv = go[o];
        for (std::size_t c = 0; c < C1; ++c) gx[x0 + c * xs] += gv * wv[w0 + c * ws];
      });
    }
    if (tp.requires_grad(w)) {
      Tensor& gw = tp.grad_accumulator(w);
      detail::conv2d_visit(g, [&](std::size_t o, std::size_t x0, std::size_t xs, std::size_t w0, std::size_t ws) {
        const double gv = go[o];
        for (std::size_t c = 0; c < C1; ++c) gw[w0 + c * ws] += gv * xv[x0 + c * xs];
      });
    }
  });
}

struct BatchNormStats {
  Tensor mean;
  Tensor var;

  static BatchNormStats fresh(std::size_t channels) {
    return {Tensor(Shape{channels}, 0.0), Tensor(Shape{channels}, 1.0)};
  }
};

constexpr double kBatchNormEps = 1e-5;
constexpr double kBatchNormMomentum = 0.9;

/// Per-channel normalization over (N, H, W). Train mode normalizes with batch
/// statistics and folds them into `stats` as stats = m·stats + (1-m)·batch
/// (unbiased variance); eval mode normalizes with `stats`.
inline Var batch_norm(Var x, Var gamma, Var beta, BatchNormStats& stats, bool train,
                      double momentum = kBatchNormMomentum, double eps = kBatchNormEps) {
  detail::same_tape(x, gamma, "batch_norm");
  detail::same_tape(x, beta, "batch_norm");
  const Tensor& xv = x.value();
  if (xv.rank() != 3 && xv.rank() != 4) throw std::invalid_argument("batch_norm: expected rank 3 or 4 input");
  const std::size_t off = xv.rank() == 4 ? 1 : 0;
  const std::size_t N = off ? xv.dim(0) : 1;
  const std::size_t C = xv.dim(off);
  const std::size_t HW = xv.dim(off + 1) * xv.dim(off + 2);
  if (gamma.value().size() != C || beta.value().size() != C || stats.mean.size() != C) {
    throw std::invalid_argument("batch_norm: affine/stat size must equal channel count " + std::to_string(C));
  }
  const Tensor& gv = gamma.value();
  const Tensor& bv = beta.value();
  const double m = static_cast<double>(N * HW);
  auto idx = [C, HW](std::size_t n, std::size_t c, std::size_t p) { return (n * C + c) * HW + p; };

  Tensor xhat(xv.shape());
  std::vector<double> invstd(C);
  for (std::size_t c = 0; c < C; ++c) {
    double mu, var;
    if (train) {
      double s = 0.0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t p = 0; p < HW; ++p) s += xv[idx(n, c, p)];
      mu = s / m;
      double q = 0.0;
      for (std::size_t n = 0; n < N; ++n)
        for (std::size_t p = 0; p < HW; ++p) {
          const double d = xv[idx(n, c, p)] - mu;
          q += d * d;
        }
      var = q / m;
      const double unbiased = m > 1 ? q / (m - 1) : var;
      stats.mean[c] = momentum * stats.mean[c] + (1 - momentum) * mu;
      stats.var[c] = momentum * stats.var[c] + (1 - momentum) * unbiased;
    } else {
      mu = stats.mean[c];
      var = stats.var[c];
    }
    invstd[c] = 1.0 / std::sqrt(var + eps);
    for (std::size_t n = 0; n < N; ++n)
      for (std::size_t p = 0; p < HW; ++p) xhat[idx(n, c, p)] = (xv[idx(n, c, p)] - mu) * invstd[c];
  }
  Tensor out(xv.shape());
  for (std::size_t n = 0; n < N; ++n)
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t p = 0; p < HW; ++p) out[idx(n, c, p)] = gv[c] * xhat[idx(n, c, p)] + bv[c];

  return x.tape().record(
      "batch_norm", std::move(out), {x, gamma, beta},
      [x, gamma, beta, train, xhat = std::move(xhat), invstd = std::move(invstd), N, C, HW, m, idx](Tape& tp,
                                                                                                std::size_t self) {
        const Tensor& g = tp.out_grad(self);
        const Tensor& gv = tp.value(gamma);
        if (tp.requires_grad(gamma) || tp.requires_grad(beta)) {
          std::vector<double> dg(C, 0.0), db(C, 0.0);
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t c = 0; c < C; ++c)
              for (std::size_t p = 0; p < HW; ++p) {
                dg[c] += g[idx(n, c, p)] * xhat[idx(n, c, p)];
                db[c] += g[idx(n, c, p)];
              }
          if (tp.requires_grad(gamma)) {
            Tensor& t = tp.grad_accumulator(gamma);
            for (std::size_t c = 0; c < C; ++c) t[c] += dg[c];
          }
          if (tp.requires_grad(beta)) {
            Tensor& t = tp.grad_accumulator(beta);
            for (std::size_t c = 0; c < C; ++c) t[c] += db[c];
          }
        }
        if (!tp.requires_grad(x)) return;
        Tensor& gx = tp.grad_accumulator(x);
        for (std::size_t c = 0; c < C; ++c) {
          if (!train) {
            for (std::size_t n = 0; n < N; ++n)
              for (std::size_t p = 0; p < HW; ++p) gx[idx(n, c, p)] += g[idx(n, c, p)] * gv[c] * invstd[c];
            continue;
          }
          double sum_d = 0.0, sum_dx = 0.0;
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t p = 0; p < HW; ++p) {
              const double d = g[idx(n, c, p)] * gv[c];
              sum_d += d;
              sum_dx += d * xhat[idx(n, c, p)];
            }
          for (std::size_t n = 0; n < N; ++n)
            for (std::size_t p = 0; p < HW; ++p) {
              const double d = g[idx(n, c, p)] * gv[c];
              gx[idx(n, c, p)] += invstd[c] / m * (m * d - sum_d - xhat[idx(n, c, p)] * sum_dx);
            }
        }
      });
}

/// [N,C,H,W] -> [N,C] or [C,H,W] -> [C].
inline Var global_avg_pool(Var x) {
  const Tensor& xv = x.value();
  if (xv.rank() != 3 && xv.rank() != 4) throw std::invalid_argument("global_avg_pool: expected rank 3 or 4");
  const std::size_t off = xv.rank() == 4 ? 1 : 0;
  const std::size_t N = off ? xv.dim(0) : 1;
  const std::size_t C = xv.dim(off);
  const std::size_t HW = xv.dim(off + 1) * xv.dim(off + 2);
  Tensor out(off ? Shape{N, C} : Shape{C});
  const double inv = 1.0 / static_cast<double>(HW);
  for (std::size_t i = 0; i < N * C; ++i) {
    double s = 0.0;
    for (std::size_t p = 0; p < HW; ++p) s += xv[i * HW + p];
    out[i] = s * inv;
  }
  return x.tape().record("global_avg_pool", std::move(out), {x}, [x, N, C, HW, inv](Tape& tp, std::size_t self) {
    const Tensor& g = tp.out_grad(self);
    Tensor& gx = tp.grad_accumulator(x);
    for (std::size_t i = 0; i < N * C; ++i)
      for (std::size_t p = 0; p < HW; ++p) gx[i * HW + p] += g[i] * inv;
  });
}

/// Mean softmax cross-entropy of logits [N,K] against integer labels.
inline Var softmax_cross_entropy(Var logits, std::span<const int> labels) {
  const Tensor& lv = logits.value();
  if (lv.rank() != 2 || lv.dim(0) != labels.size()) {
    throw std::invalid_argument("softmax_cross_entropy: logits " + shape_str(lv.shape()) + " vs " +
                                std::to_string(labels.size()) + " labels");
  }
  const std::size_t N = lv.dim(0), K = lv.dim(1);
  Tensor prob(lv.shape());
  double loss = 0.0;
  for (std::size_t n = 0; n < N; ++n) {
    const int y = labels[n];
    if (y < 0 || static_cast<std::size_t>(y) >= K) throw std::invalid_argument("softmax_cross_entropy: label out of range");
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t k = 0; k < K; ++k) mx = std::max(mx, lv[n * K + k]);
    double z = 0.0;
    for (std::size_t k = 0; k < K; ++k) {
      prob[n * K + k] = std::exp(lv[n * K + k] - mx);
      z += prob[n * K + k];
    }
    for (std::size_t k = 0; k < K; ++k) prob[n * K + k] /= z;
    loss += std::log(z) + mx - lv[n * K + static_cast<std::size_t>(y)];
  }
  loss /= static_cast<double>(N);
  std::vector<int> ys(labels.begin(), labels.end());
  return logits.tape().record("softmax_cross_entropy", Tensor::scalar(loss), {logits},
                              [logits, prob = std::move(prob), ys = std::move(ys), N, K](Tape& tp, std::size_t self) {
                                const double g = tp.out_grad(self)[0] / static_cast<double>(N);
                                Tensor& gl = tp.grad_accumulator(logits);
                                for (std::size_t n = 0; n < N; ++n)
                                  for (std::size_t k = 0; k < K; ++k) {
                                    const double onehot = static_cast<std::size_t>(ys[n]) == k ? 1.0 : 0.0;
                                    gl[n * K + k] += g * (prob[n * K + k] - onehot);
                                  }
                              });
}

}  // namespace tsc::ad
