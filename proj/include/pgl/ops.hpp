#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "pgl/tape.hpp"
#include "pgl/tensor.hpp"

namespace pgl {

// Forward declarations: backward rules are expressed with these same ops.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& x);
Tensor scale(const Tensor& x, double c);
Tensor reshape(const Tensor& x, Shape shape);
Tensor sum(const Tensor& x);
Tensor expand(const Tensor& scalar, Shape shape);
Tensor sum_axis(const Tensor& x, std::size_t axis);
Tensor expand_axis(const Tensor& x, std::size_t axis, std::size_t n);
Tensor select(const Tensor& x, std::size_t axis, std::size_t index);
Tensor embed(const Tensor& x, std::size_t axis, std::size_t index, std::size_t n);
Tensor transpose(const Tensor& x);
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor sigmoid(const Tensor& x);
Tensor square(const Tensor& x);
Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t pad);
Tensor conv2d_input_grad(const Tensor& gy, const Tensor& w, std::size_t height, std::size_t width, std::size_t pad);
Tensor conv2d_weight_grad(const Tensor& x, const Tensor& gy, std::size_t kh, std::size_t kw, std::size_t pad);

namespace detail {

inline Tensor make_op(const char* name, std::vector<Tensor> inputs, ForwardFn forward, BackwardFn backward,
                      bool backward_recordable = true) {
  Tensor out = forward(inputs);
  if (!all_finite(out.data())) throw NumericError(std::string(name) + ": produced a non-finite value");
  if (Tape::recording()) {
    bool any = std::any_of(inputs.begin(), inputs.end(), [](const Tensor& t) { return t.requires_grad(); });
    if (any) {
      Tape::active().record(name, std::move(inputs), out, std::move(backward), std::move(forward),
                            backward_recordable);
    }
  }
  return out;
}

inline void require_defined(const char* op, const Tensor& t) {
  if (!t.defined()) throw ShapeError(std::string(op) + ": undefined tensor operand");
}

enum class Broadcast { same, lhs_scalar, rhs_scalar };

inline Broadcast binary_layout(const char* op, const Tensor& a, const Tensor& b) {
  require_defined(op, a);
  require_defined(op, b);
  if (a.shape() == b.shape()) return Broadcast::same;
  if (a.numel() == 1) return Broadcast::lhs_scalar;
  if (b.numel() == 1) return Broadcast::rhs_scalar;
  throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " + to_string(b.shape()));
}

template <class F>
Tensor zip(const Tensor& a, const Tensor& b, Broadcast layout, F f) {
  const auto& av = a.values();
  const auto& bv = b.values();
  const Shape& shape = layout == Broadcast::lhs_scalar ? b.shape() : a.shape();
  std::vector<double> out(numel(shape));
  switch (layout) {
    case Broadcast::same:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i], bv[i]);
      break;
    case Broadcast::lhs_scalar:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[0], bv[i]);
      break;
    case Broadcast::rhs_scalar:
      for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i], bv[0]);
      break;
  }
  return Tensor(shape, std::move(out));
}

template <class F>
Tensor map(const Tensor& x, F f) {
  std::vector<double> out(x.numel());
  const auto& xv = x.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(xv[i]);
  return Tensor(x.shape(), std::move(out));
}

/// Reduces a broadcast gradient back to the operand's shape.
inline Tensor sum_to(const Tensor& g, const Shape& shape) {
  if (g.shape() == shape) return g;
  return reshape(sum(g), shape);
}

struct AxisSplit {
  std::size_t outer, n, inner;
};

inline AxisSplit split_at(const char* op, const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw ShapeError(std::string(op) + ": axis " + std::to_string(axis) + " out of range for shape " +
                     to_string(shape));
  }
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

inline Shape drop_axis(Shape shape, std::size_t axis) {
  shape.erase(shape.begin() + static_cast<std::ptrdiff_t>(axis));
  return shape;
}

inline Shape insert_axis(Shape shape, std::size_t axis, std::size_t n) {
  shape.insert(shape.begin() + static_cast<std::ptrdiff_t>(axis), n);
  return shape;
}

struct ConvGeometry {
  std::size_t batch, height, width, channels, out_channels, kh, kw, pad, out_h, out_w;
};

inline ConvGeometry conv_geometry(const char* op, const Shape& x, const Shape& w, std::size_t pad) {
  if (x.size() != 4 || w.size() != 4) {
    throw ShapeError(std::string(op) + ": expected input [B,H,W,C] and kernel [O,KH,KW,C], got " + to_string(x) +
                     " and " + to_string(w));
  }
  if (x[3] != w[3]) {
    throw ShapeError(std::string(op) + ": channel mismatch " + to_string(x) + " vs " + to_string(w));
  }
  if (x[1] + 2 * pad < w[1] || x[2] + 2 * pad < w[2]) {
    throw ShapeError(std::string(op) + ": kernel " + to_string(w) + " does not fit input " + to_string(x) +
                     " with padding " + std::to_string(pad));
  }
  return {x[0], x[1], x[2], x[3], w[0], w[1], w[2], pad, x[1] + 2 * pad - w[1] + 1, x[2] + 2 * pad - w[2] + 1};
}

// Visits every (input pixel, kernel tap, output pixel) triple of a stride-1
// convolution in a fixed order. `f` receives flat offsets of the input row,
// kernel row (for output channel 0) and output row.
template <class F>
void for_each_tap(const ConvGeometry& g, F f) {
  for (std::size_t b = 0; b < g.batch; ++b) {
    for (std::size_t oh = 0; oh < g.out_h; ++oh) {
      for (std::size_t ow = 0; ow < g.out_w; ++ow) {
        const std::size_t out_off = ((b * g.out_h + oh) * g.out_w + ow) * g.out_channels;
        for (std::size_t ki = 0; ki < g.kh; ++ki) {
          const auto ih = static_cast<std::ptrdiff_t>(oh + ki) - static_cast<std::ptrdiff_t>(g.pad);
          if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(g.height)) continue;
          for (std::size_t kj = 0; kj < g.kw; ++kj) {
            const auto iw = static_cast<std::ptrdiff_t>(ow + kj) - static_cast<std::ptrdiff_t>(g.pad);
            if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(g.width)) continue;
            const std::size_t in_off =
                ((b * g.height + static_cast<std::size_t>(ih)) * g.width + static_cast<std::size_t>(iw)) * g.channels;
            const std::size_t k_off = (ki * g.kw + kj) * g.channels;
            f(in_off, k_off, out_off);
          }
        }
      }
    }
  }
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise arithmetic. Operands must have identical shapes, or one of them
// must hold a single element.

inline Tensor add(const Tensor& a, const Tensor& b) {
  auto layout = detail::binary_layout("add", a, b);
  return detail::make_op(
      "add", {a, b},
      [layout](const std::vector<Tensor>& in) {
        return detail::zip(in[0], in[1], layout, [](double x, double y) { return x + y; });
      },
      [](const std::vector<Tensor>& in, const Tensor&, const Tensor& g, const std::vector<bool>& needs) {
        std::vector<Tensor> r(2);
        if (needs[0]) r[0] = detail::sum_to(g, in[0].shape());
        if (needs[1]) r[1] = detail::sum_to(g, in[1].shape());
        return r;
      });
}

inline Tensor sub(const Tensor& a, const Tensor& b) {
  auto layout = detail::binary_layout("sub", a, b);
  return detail::make_op(
      "sub", {a, b},
      [layout](const std::vector<Tensor>& in) {
        return detail::zip(in[0], in[1], layout, [](double x, double y) { return x - y; });
      },
      [](const std::vector<Tensor>& in, const Tensor&, const Tensor& g, const std::vector<bool>& needs) {
        std::vector<Tensor> r(2);
        if (needs[0]) r[0] = detail::sum_to(g, in[0].shape());
        if (needs[1]) r[1] = detail::sum_to(neg(g), in[1].shape());
        return r;
      });
}

inline Tensor mul(const Tensor& a, const Tensor& b) {
  auto layout = detail::binary_layout("mul", a, b);
  return detail::make_op(
      "mul", {a, b},
      [layout](const std::vector<Tensor>& in) {
        return detail::zip(in[0], in[1], layout, [](double x, double y) { return x * y; });
      },
      [](const std::vector<Tensor>& in, const Tensor&, const Tensor& g, const std::vector<bool>& needs) {
        std::vector<Tensor> r(2);
        if (needs[0]) r[0] = detail::sum_to(mul(g, in[1]), in[0].shape());
        if (needs[1]) r[1] = detail::sum_to(mul(g, in[0]), in[1].shape());
        return r;
      });
}

inline Tensor div(const Tensor& a, const Tensor& b) {
  auto layout = detail::binary_layout("div", a, b);
  return detail::make_op(
      "div", {a, b},
      [layout](const std::vector<Tensor>& in) {
        return detail::zip(in[0], in[1], layout, [](double x, double y) { return x / y; });
      },
      [](const std::vector<Tensor>& in, const Tensor&, const Tensor& g, const std::vector<bool>& needs) {
        std::vector<Tensor> r(2);
        if (needs[0]) r[0] = detail::sum_to(div(g, in[1]), in[0].shape());
        if (needs[1]) r[1] = detail::sum_to(neg(div(mul(g, in[0]), mul(in[1], in[1]))), in[1].shape());
        return r;
      });
}

inline Tensor neg(const Tensor& x) {
  detail::require_defined("neg", x);
  return detail::make_op(
      "neg", {x}, [](const std::vector<Tensor>& in) { return detail::map(in[0], [](double v) { return -v; }); },
      [](const std::vector<Tensor>&, const Tensor&, const Tensor& g, const std::vector<bool>&) {
        return std::vector<Tensor>{neg(g)};
      });
}

/// Multiplies by a constant.
inline Tensor scale(const Tensor& x, double c) {
  detail::require_defined("scale", x);
  return detail::make_op(
      "scale", {x}, [c](const std::vector<Tensor>& in) { return detail::map(in[0], [c](double v) { return v * c; }); },
      [c](const std::vector<Tensor>&, const Tensor&, const Tensor& g, const std::vector<bool>&) {
        return std::vector<Tensor>{scale(g, c)};
      });
}

inline Tensor add_scalar(const Tensor& x, double c) {
  detail::require_defined("add_scalar", x);
  return detail::make_op(
      "add_scalar", {x},
      [c](const std::vector<Tensor>& in) { return detail::map(in[0], [c](double v) { return v + c; }); },
      [](const std::vector<Tensor>&, const Tensor&, const Tensor& g, const std::vector<bool>&) {
        return std::vector<Tensor>{g};
      });
}

/// 1 - x, the complement of a binary mask.
inline Tensor one_minus(const Tensor& x) { return add_scalar(neg(x), 1.0); }

// ---------------------------------------------------------------------------
// Pointwise nonlinearities.

/// relu'(0) is taken as 0.
inline Tensor relu(const Tensor& x) {
  detail::require_defined("relu", x);
  return detail::make_op(
      "relu", {x},
      [](const std::vector<Tensor>& in) { return detail::map(in[0], [](double v) { return v > 0.0 ? v : 0.0; }); },
      [](const std::vector<Tensor>& in, const Tensor&, const Tensor& g, const std::vector<bool>&) {
        Tensor step = detail::map(in[0], [](double v) { return v > 0.0 ? 1.0 : 0.0; });
        return std::vector<Tensor>{mul(g, step)};
      });
}

/// |x|, with sign(0) = 0 in the backward rule.
inline Tensor abs(const Tensor& x) {
  detail::require_defined("abs", x);
  return detail::make_op(
      "abs", {x}, [](const std::vector<Tensor>& in) { return detail::map(in[0], [](double v) { return std::fabs(v); }); },
      [](const std::vector<Tensor>& in, const Tensor&, const Tensor& g, const std::vector<bool>&) {
        Tensor sign = detail::map(in[0], [](double v) { return v > 0.0 ? 1.0 : (v < 0.0 ? -1.0 : 0.0); });
        return std::vector<Tensor>{mul(g, sign)};
      });
}

inline Tensor square(const Tensor& x) {
  detail::require_defined("square", x);
  return detail::make_op(
      "square", {x}, [](const std::vector<Tensor>& in) { return detail::map(in[0], [](double v) { return v * v; }); },
      [](const std::vector<Tensor>& in, const Tensor&, const Tensor& g, const std::vector<bool>&) {
        return std::vector<Tensor>{mul(g, scale(in[0], 2.0))};
      });
}

inline Tensor exp(const Tensor& x) {
  detail::require_defined("exp", x);
  return detail::make_op(
      "exp", {x}, [](const std::vector<Tensor>& in) { return detail::map(in[0], [](double v) { return std::exp(v); }); },
      [](const std::vector<Tensor>&, const Tensor& out, const Tensor& g, const std::vector<bool>&) {
        return std::vector<Tensor>{mul(g, out)};
      });
}

inline Tensor log(const Tensor& x) {
  detail::require_defined("log", x);
  return detail::make_op(
      "log", {x}, [](const std::vector<Tensor>& in) { return detail::map(in[0], [](double v) { return std::log(v); }); },
      [](const std::vector<Tensor>& in, const Tensor&, const Tensor& g, const std::vector<bool>&) {
        return std::vector<Tensor>{div(g, in[0])};
      });
}

inline Tensor sigmoid(const Tensor& x) {
  detail::require_defined("sigmoid", x);
  return detail::make_op(
      "sigmoid", {x},
      [](const std::vector<Tensor>& in) {
        return detail::map(in[0], [](double v) {
          if (v >= 0.0) return 1.0 / (1.0 + std::exp(-v));
          double e = std::exp(v);
          return e / (1.0 + e);
        });
      },
      [](const std::vector<Tensor>&, const Tensor& out, const Tensor& g, const std::vector<bool>&) {
        return std::vector<Tensor>{mul(g, sub(out, square(out)))};
      });
}

/// log(1 + e^x), evaluated without overflow.
inline Tensor softplus(const Tensor& x) {
  detail::require_defined("softplus", x);
  return detail::make_op(
      "softplus", {x},
      [](const std::vector<Tensor>& in) {
        return detail::map(in[0], [](double v) { return std::max(v, 0.0) + std::log1p(std::exp(-std::fabs(v))); });
      },
      [](const std::vector<Tensor>& in, const Tensor&, const Tensor& g, const std::vector<bool>&) {
        return std::vector<Tensor>{mul(g, sigmoid(in[0]))};
      });
}

/// Elementwise op with a caller-supplied derivative. The derivative is applied
/// as a constant, so the backward rule cannot be differentiated again and
/// grad(..., create_graph=true) through it is rejected.
inline Tensor map_unary(const Tensor& x, std::function<double(double)> f, std::function<double(double)> df,
                        const std::string& name) {
  detail::require_defined("map_unary", x);
  static thread_local std::string label;
  label = "map_unary(" + name + ")";
  return detail::make_op(
      label.c_str(), {x}, [f](const std::vector<Tensor>& in) { return detail::map(in[0], f); },
      [df](const std::vector<Tensor>& in, const Tensor&, const Tensor& g, const std::vector<bool>&) {
        return std::vector<Tensor>{mul(g, detail::map(in[0], df))};
      },
      /*backward_recordable=*/false);
}

// ---------------------------------------------------------------------------
// Shape manipulation and reductions.

inline Tensor reshape(const Tensor& x, Shape shape) {
  detail::require_defined("reshape", x);
  if (numel(shape) != x.numel()) {
    throw ShapeError("reshape: cannot view " + to_string(x.shape()) + " as " + to_string(shape));
  }
  return detail::make_op(
      "reshape", {x}, [shape](const std::vector<Tensor>& in) { return Tensor(shape, in[0].values()); },
      [](const std::vector<Tensor>& in, const Tensor&, const Tensor& g, const std::vector<bool>&) {
        return std::vector<Tensor>{reshape(g, in[0].shape())};
      });
}

/// Sum of all elements, as a scalar.
inline Tensor sum(const Tensor& x) {
  detail::require_defined("sum", x);
  return detail::make_op(
      "sum", {x},
      [](const std::vector<Tensor>& in) {
        double s = 0.0;
        for (double v : in[0].data()) s += v;
        return Tensor::scalar(s);
      },
      [](const std::vector<Tensor>& in, const Tensor&, const Tensor& g, const std::vector<bool>&) {
        return std::vector<Tensor>{expand(g, in[0].shape())};
      });
}

inline Tensor mean(const Tensor& x) { return scale(sum(x), 1.0 / static_cast<double>(x.numel())); }

/// Broadcasts a single-element tensor to `shape`.
inline Tensor expand(const Tensor& scalar, Shape shape) {
  detail::require_defined("expand", scalar);
  if (scalar.numel() != 1) throw ShapeError("expand: operand " + to_string(scalar.shape()) + " is not a scalar");
  return detail::make_op(
      "expand", {scalar}, [shape](const std::vector<Tensor>& in) { return Tensor::full(shape, in[0][0]); },
      [](const std::vector<Tensor>& in, const Tensor&, const Tensor& g, const std::vector<bool>&) {
        return std::vector<Tensor>{reshape(sum(g), in[0].shape())};
      });
}

/// Sums over one axis and removes it.
inline Tensor sum_axis(const Tensor& x, std::size_t axis) {
  detail::require_defined("sum_axis", x);
  auto s = detail::split_at("sum_axis", x.shape(), axis);
  Shape out_shape = detail::drop_axis(x.shape(), axis);
  return detail::make_op(
      "sum_axis", {x},
      [s, out_shape](const std::vector<Tensor>& in) {
        std::vector<double> out(s.outer * s.inner, 0.0);
        const auto& xv = in[0].values();
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t k = 0; k < s.n; ++k)
            for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] += xv[(o * s.n + k) * s.inner + i];
        return Tensor(out_shape, std::move(out));
      },
      [axis, s](const std::vector<Tensor>&, const Tensor&, const Tensor& g, const std::vector<bool>&) {
        return std::vector<Tensor>{expand_axis(g, axis, s.n)};
      });
}

inline Tensor mean_axis(const Tensor& x, std::size_t axis) {
  return scale(sum_axis(x, axis), 1.0 / static_cast<double>(x.shape().at(axis)));
}

/// Inserts a new axis of size n at `axis`, replicating x along it.
inline Tensor expand_axis(const Tensor& x, std::size_t axis, std::size_t n) {
  detail::require_defined("expand_axis", x);
  if (axis > x.dim()) throw ShapeError("expand_axis: axis out of range for shape " + to_string(x.shape()));
  Shape out_shape = detail::insert_axis(x.shape(), axis, n);
  auto s = detail::split_at("expand_axis", out_shape, axis);
  return detail::make_op(
      "expand_axis", {x},
      [s, out_shape](const std::vector<Tensor>& in) {
        std::vector<double> out(numel(out_shape));
        const auto& xv = in[0].values();
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t k = 0; k < s.n; ++k)
            for (std::size_t i = 0; i < s.inner; ++i) out[(o * s.n + k) * s.inner + i] = xv[o * s.inner + i];
        return Tensor(out_shape, std::move(out));
      },
      [axis](const std::vector<Tensor>&, const Tensor&, const Tensor& g, const std::vector<bool>&) {
        return std::vector<Tensor>{sum_axis(g, axis)};
      });
}

/// Maximum over one axis (removed). Ties go to the lowest index.
inline Tensor max_axis(const Tensor& x, std::size_t axis) {
  detail::require_defined("max_axis", x);
  auto s = detail::split_at("max_axis", x.shape(), axis);
  Shape out_shape = detail::drop_axis(x.shape(), axis);
  return detail::make_op(
      "max_axis", {x},
      [s, out_shape](const std::vector<Tensor>& in) {
        std::vector<double> out(s.outer * s.inner);
        const auto& xv = in[0].values();
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t i = 0; i < s.inner; ++i) {
            double best = xv[o * s.n * s.inner + i];
            for (std::size_t k = 1; k < s.n; ++k) best = std::max(best, xv[(o * s.n + k) * s.inner + i]);
            out[o * s.inner + i] = best;
          }
        return Tensor(out_shape, std::move(out));
      },
      [axis, s](const std::vector<Tensor>& in, const Tensor&, const Tensor& g, const std::vector<bool>&) {
        std::vector<double> pick(in[0].numel(), 0.0);
        const auto& xv = in[0].values();
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t i = 0; i < s.inner; ++i) {
            std::size_t arg = 0;
            for (std::size_t k = 1; k < s.n; ++k) {
              if (xv[(o * s.n + k) * s.inner + i] > xv[(o * s.n + arg) * s.inner + i]) arg = k;
            }
            pick[(o * s.n + arg) * s.inner + i] = 1.0;
          }
        return std::vector<Tensor>{mul(expand_axis(g, axis, s.n), Tensor(in[0].shape(), std::move(pick)))};
      });
}

/// Slice at `index` along `axis`; the axis is removed.
inline Tensor select(const Tensor& x, std::size_t axis, std::size_t index) {
  detail::require_defined("select", x);
  auto s = detail::split_at("select", x.shape(), axis);
  if (index >= s.n) throw ShapeError("select: index " + std::to_string(index) + " out of range for " + to_string(x.shape()));
  Shape out_shape = detail::drop_axis(x.shape(), axis);
  return detail::make_op(
      "select", {x},
      [s, index, out_shape](const std::vector<Tensor>& in) {
        std::vector<double> out(s.outer * s.inner);
        const auto& xv = in[0].values();
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t i = 0; i < s.inner; ++i) out[o * s.inner + i] = xv[(o * s.n + index) * s.inner + i];
        return Tensor(out_shape, std::move(out));
      },
      [axis, index, s](const std::vector<Tensor>&, const Tensor&, const Tensor& g, const std::vector<bool>&) {
        return std::vector<Tensor>{embed(g, axis, index, s.n)};
      });
}

/// Inverse of select: places x at `index` of a new zero-filled axis of size n.
inline Tensor embed(const Tensor& x, std::size_t axis, std::size_t index, std::size_t n) {
  detail::require_defined("embed", x);
  if (axis > x.dim() || index >= n) throw ShapeError("embed: bad axis/index for shape " + to_string(x.shape()));
  Shape out_shape = detail::insert_axis(x.shape(), axis, n);
  auto s = detail::split_at("embed", out_shape, axis);
  return detail::make_op(
      "embed", {x},
      [s, index, out_shape](const std::vector<Tensor>& in) {
        std::vector<double> out(numel(out_shape), 0.0);
        const auto& xv = in[0].values();
        for (std::size_t o = 0; o < s.outer; ++o)
          for (std::size_t i = 0; i < s.inner; ++i) out[(o * s.n + index) * s.inner + i] = xv[o * s.inner + i];
        return Tensor(out_shape, std::move(out));
      },
      [axis, index](const std::vector<Tensor>&, const Tensor&, const Tensor& g, const std::vector<bool>&) {
        return std::vector<Tensor>{select(g, axis, index)};
      });
}

/// Stacks equally shaped tensors along a new axis.
inline Tensor stack(const std::vector<Tensor>& xs, std::size_t axis = 0) {
  if (xs.empty()) throw ShapeError("stack: no operands");
  for (const auto& x : xs) {
    detail::require_defined("stack", x);
    if (x.shape() != xs[0].shape()) {
      throw ShapeError("stack: shape mismatch " + to_string(xs[0].shape()) + " vs " + to_string(x.shape()));
    }
  }
  if (axis > xs[0].dim()) throw ShapeError("stack: axis out of range");
  Shape out_shape = detail::insert_axis(xs[0].shape(), axis, xs.size());
  auto s = detail::split_at("stack", out_shape, axis);
  return detail::make_op(
      "stack", xs,
      [s, out_shape](const std::vector<Tensor>& in) {
        std::vector<double> out(numel(out_shape));
        for (std::size_t k = 0; k < s.n; ++k) {
          const auto& xv = in[k].values();
          for (std::size_t o = 0; o < s.outer; ++o)
            for (std::size_t i = 0; i < s.inner; ++i) out[(o * s.n + k) * s.inner + i] = xv[o * s.inner + i];
        }
        return Tensor(out_shape, std::move(out));
      },
      [axis](const std::vector<Tensor>& in, const Tensor&, const Tensor& g, const std::vector<bool>& needs) {
        std::vector<Tensor> r(in.size());
        for (std::size_t k = 0; k < in.size(); ++k) {
          if (needs[k]) r[k] = select(g, axis, k);
        }
        return r;
      });
}

/// Elementwise maximum of two equally shaped tensors, ties to the first.
inline Tensor maximum(const Tensor& a, const Tensor& b) { return max_axis(stack({a, b}, 0), 0); }

inline Tensor transpose(const Tensor& x) {
  detail::require_defined("transpose", x);
  if (x.dim() != 2) throw ShapeError("transpose: expected a matrix, got " + to_string(x.shape()));
  return detail::make_op(
      "transpose", {x},
      [](const std::vector<Tensor>& in) {
        const std::size_t r = in[0].size(0), c = in[0].size(1);
        std::vector<double> out(r * c);
        const auto& xv = in[0].values();
        for (std::size_t i = 0; i < r; ++i)
          for (std::size_t j = 0; j < c; ++j) out[j * r + i] = xv[i * c + j];
        return Tensor({c, r}, std::move(out));
      },
      [](const std::vector<Tensor>&, const Tensor&, const Tensor& g, const std::vector<bool>&) {
        return std::vector<Tensor>{transpose(g)};
      });
}

inline Tensor matmul(const Tensor& a, const Tensor& b) {
  detail::require_defined("matmul", a);
  detail::require_defined("matmul", b);
  if (a.dim() != 2 || b.dim() != 2 || a.size(1) != b.size(0)) {
    throw ShapeError("matmul: incompatible shapes " + to_string(a.shape()) + " and " + to_string(b.shape()));
  }
  return detail::make_op(
      "matmul", {a, b},
      [](const std::vector<Tensor>& in) {
        const std::size_t m = in[0].size(0), k = in[0].size(1), n = in[1].size(1);
        const auto& av = in[0].values();
        const auto& bv = in[1].values();
        std::vector<double> out(m * n, 0.0);
        for (std::size_t i = 0; i < m; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            const double aip = av[i * k + p];
            if (aip == 0.0) continue;
            const double* brow = &bv[p * n];
            double* orow = &out[i * n];
            for (std::size_t j = 0; j < n; ++j) orow[j] += aip * brow[j];
          }
        return Tensor({m, n}, std::move(out));
      },
      [](const std::vector<Tensor>& in, const Tensor&, const Tensor& g, const std::vector<bool>& needs) {
        std::vector<Tensor> r(2);
        if (needs[0]) r[0] = matmul(g, transpose(in[1]));
        if (needs[1]) r[1] = matmul(transpose(in[0]), g);
        return r;
      });
}

/// Adds a bias vector [N] to every row of a matrix [B, N].
inline Tensor add_rows(const Tensor& x, const Tensor& bias) {
  if (x.dim() != 2 || bias.dim() != 1 || bias.size(0) != x.size(1)) {
    throw ShapeError("add_rows: incompatible shapes " + to_string(x.shape()) + " and " + to_string(bias.shape()));
  }
  return add(x, expand_axis(bias, 0, x.size(0)));
}

/// Log-softmax over the last axis.
inline Tensor log_softmax(const Tensor& x) {
  detail::require_defined("log_softmax", x);
  if (x.dim() == 0) throw ShapeError("log_softmax: needs at least one axis");
  const std::size_t axis = x.dim() - 1;
  const std::size_t n = x.shape().back();
  return detail::make_op(
      "log_softmax", {x},
      [n](const std::vector<Tensor>& in) {
        const auto& xv = in[0].values();
        std::vector<double> out(xv.size());
        for (std::size_t r = 0; r < xv.size() / n; ++r) {
          const double* row = &xv[r * n];
          double m = *std::max_element(row, row + n);
          double z = 0.0;
          for (std::size_t j = 0; j < n; ++j) z += std::exp(row[j] - m);
          double lz = m + std::log(z);
          for (std::size_t j = 0; j < n; ++j) out[r * n + j] = row[j] - lz;
        }
        return Tensor(in[0].shape(), std::move(out));
      },
      [axis, n](const std::vector<Tensor>&, const Tensor& out, const Tensor& g, const std::vector<bool>&) {
        Tensor row_sum = expand_axis(sum_axis(g, axis), axis, n);
        return std::vector<Tensor>{sub(g, mul(exp(out), row_sum))};
      });
}

inline Tensor softmax(const Tensor& x) { return exp(log_softmax(x)); }

// ---------------------------------------------------------------------------
// Stride-1 2-D convolution over channels-last batches. The three functions
// are the partial derivatives of one trilinear form, so each one's backward
// rule is expressed with the other two.

/// x [B,H,W,C] (*) w [O,KH,KW,C] -> [B,H+2p-KH+1,W+2p-KW+1,O].
inline Tensor conv2d(const Tensor& x, const Tensor& w, std::size_t pad) {
  detail::require_defined("conv2d", x);
  detail::require_defined("conv2d", w);
  auto geo = detail::conv_geometry("conv2d", x.shape(), w.shape(), pad);
  return detail::make_op(
      "conv2d", {x, w},
      [geo](const std::vector<Tensor>& in) {
        std::vector<double> out(geo.batch * geo.out_h * geo.out_w * geo.out_channels, 0.0);
        const auto& xv = in[0].values();
        const auto& wv = in[1].values();
        const std::size_t kstride = geo.kh * geo.kw * geo.channels;
        detail::for_each_tap(geo, [&](std::size_t in_off, std::size_t k_off, std::size_t out_off) {
          const double* xr = &xv[in_off];
          for (std::size_t o = 0; o < geo.out_channels; ++o) {
            const double* wr = &wv[o * kstride + k_off];
            double acc = 0.0;
            for (std::size_t c = 0; c < geo.channels; ++c) acc += xr[c] * wr[c];
            out[out_off + o] += acc;
          }
        });
        return Tensor({geo.batch, geo.out_h, geo.out_w, geo.out_channels}, std::move(out));
      },
      [geo](const std::vector<Tensor>& in, const Tensor&, const Tensor& g, const std::vector<bool>& needs) {
        std::vector<Tensor> r(2);
        if (needs[0]) r[0] = conv2d_input_grad(g, in[1], geo.height, geo.width, geo.pad);
        if (needs[1]) r[1] = conv2d_weight_grad(in[0], g, geo.kh, geo.kw, geo.pad);
        return r;
      });
}

/// Gradient of sum(gy * conv2d(x, w)) with respect to x, for x of spatial size height x width.
inline Tensor conv2d_input_grad(const Tensor& gy, const Tensor& w, std::size_t height, std::size_t width,
                                std::size_t pad) {
  detail::require_defined("conv2d_input_grad", gy);
  detail::require_defined("conv2d_input_grad", w);
  if (gy.dim() != 4 || w.dim() != 4) throw ShapeError("conv2d_input_grad: expected 4-d operands");
  Shape x_shape{gy.size(0), height, width, w.size(3)};
  auto geo = detail::conv_geometry("conv2d_input_grad", x_shape, w.shape(), pad);
  if (gy.size(1) != geo.out_h || gy.size(2) != geo.out_w || gy.size(3) != geo.out_channels) {
    throw ShapeError("conv2d_input_grad: output gradient " + to_string(gy.shape()) + " does not match kernel " +
                     to_string(w.shape()));
  }
  return detail::make_op(
      "conv2d_input_grad", {gy, w},
      [geo, x_shape](const std::vector<Tensor>& in) {
        std::vector<double> out(numel(x_shape), 0.0);
        const auto& gv = in[0].values();
        const auto& wv = in[1].values();
        const std::size_t kstride = geo.kh * geo.kw * geo.channels;
        detail::for_each_tap(geo, [&](std::size_t in_off, std::size_t k_off, std::size_t out_off) {
          double* xr = &out[in_off];
          for (std::size_t o = 0; o < geo.out_channels; ++o) {
            const double go = gv[out_off + o];
            if (go == 0.0) continue;
            const double* wr = &wv[o * kstride + k_off];
            for (std::size_t c = 0; c < geo.channels; ++c) xr[c] += go * wr[c];
          }
        });
        return Tensor(x_shape, std::move(out));
      },
      [geo](const std::vector<Tensor>& in, const Tensor&, const Tensor& g, const std::vector<bool>& needs) {
        std::vector<Tensor> r(2);
        if (needs[0]) r[0] = conv2d(g, in[1], geo.pad);
        if (needs[1]) r[1] = conv2d_weight_grad(g, in[0], geo.kh, geo.kw, geo.pad);
        return r;
      });
}

/// Gradient of sum(gy * conv2d(x, w)) with respect to a kernel of size kh x kw.
inline Tensor conv2d_weight_grad(const Tensor& x, const Tensor& gy, std::size_t kh, std::size_t kw, std::size_t pad) {
  detail::require_defined("conv2d_weight_grad", x);
  detail::require_defined("conv2d_weight_grad", gy);
  if (x.dim() != 4 || gy.dim() != 4) throw ShapeError("conv2d_weight_grad: expected 4-d operands");
  Shape w_shape{gy.size(3), kh, kw, x.size(3)};
  auto geo = detail::conv_geometry("conv2d_weight_grad", x.shape(), w_shape, pad);
  if (gy.size(0) != geo.batch || gy.size(1) != geo.out_h || gy.size(2) != geo.out_w) {
    throw ShapeError("conv2d_weight_grad: output gradient " + to_string(gy.shape()) + " does not match input " +
                     to_string(x.shape()));
  }
  return detail::make_op(
      "conv2d_weight_grad", {x, gy},
      [geo, w_shape](const std::vector<Tensor>& in) {
        std::vector<double> out(numel(w_shape), 0.0);
        const auto& xv = in[0].values();
        const auto& gv = in[1].values();
        const std::size_t kstride = geo.kh * geo.kw * geo.channels;
        detail::for_each_tap(geo, [&](std::size_t in_off, std::size_t k_off, std::size_t out_off) {
          const double* xr = &xv[in_off];
          for (std::size_t o = 0; o < geo.out_channels; ++o) {
            const double go = gv[out_off + o];
            if (go == 0.0) continue;
            double* wr = &out[o * kstride + k_off];
            for (std::size_t c = 0; c < geo.channels; ++c) wr[c] += go * xr[c];
          }
        });
        return Tensor(w_shape, std::move(out));
      },
      [geo](const std::vector<Tensor>& in, const Tensor&, const Tensor& g, const std::vector<bool>& needs) {
        std::vector<Tensor> r(2);
        if (needs[0]) r[0] = conv2d_input_grad(in[1], g, geo.height, geo.width, geo.pad);
        if (needs[1]) r[1] = conv2d(in[0], g, geo.pad);
        return r;
      });
}

// ---------------------------------------------------------------------------

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& x) { return neg(x); }
inline Tensor operator*(const Tensor& a, double c) { return scale(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return scale(a, c); }

}  // namespace pgl
