#include "rawformer/nn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

#include "linalg.hpp"

namespace rawformer::nn {
namespace {

[[noreturn]] void dim_error(const std::string& op, const Shape& a, const Shape& b) {
  throw DimensionError(op + ": incompatible shapes " + to_string(a) + " and " + to_string(b));
}

// ---- broadcasting ----------------------------------------------------------

struct Strides {
  std::size_t n, c, h, w;
};

Strides broadcast_strides(const Shape& s, const Shape& out) {
  const std::size_t sw = 1, sh = s.w, sc = s.plane(), sn = static_cast<std::size_t>(s.c) * s.plane();
  return {s.n == 1 && out.n != 1 ? 0 : sn, s.c == 1 && out.c != 1 ? 0 : sc,
          s.h == 1 && out.h != 1 ? 0 : sh, s.w == 1 && out.w != 1 ? 0 : sw};
}

Shape broadcast_shape(const std::string& op, const Shape& a, const Shape& b) {
  Shape out;
  int* o[4] = {&out.n, &out.c, &out.h, &out.w};
  for (int ax = 0; ax < 4; ++ax) {
    const int x = a[ax], y = b[ax];
    if (x != y && x != 1 && y != 1) dim_error(op, a, b);
    *o[ax] = std::max(x, y);
  }
  return out;
}

// Calls fn(out_index, a_index, b_index) for every output element.
template <typename Fn>
void for_each_broadcast(const Shape& out, const Strides& sa, const Strides& sb, Fn&& fn) {
  std::size_t o = 0;
  for (int n = 0; n < out.n; ++n)
    for (int c = 0; c < out.c; ++c)
      for (int h = 0; h < out.h; ++h) {
        const std::size_t ba = n * sa.n + c * sa.c + h * sa.h;
        const std::size_t bb = n * sb.n + c * sb.c + h * sb.h;
        for (int w = 0; w < out.w; ++w, ++o) fn(o, ba + w * sa.w, bb + w * sb.w);
      }
}

template <typename T, typename F, typename DA, typename DB>
Var<T> binary_op(const char* name, Var<T> a, Var<T> b, F f, DA dfa, DB dfb) {
  Tape<T>& tape = a.tape();
  const Tensor<T>& av = a.value();
  const Tensor<T>& bv = b.value();
  const Shape os = broadcast_shape(name, av.shape(), bv.shape());
  Tensor<T> out(os);
  const bool same = av.shape() == os && bv.shape() == os;
  if (same) {
    for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i], bv[i]);
  } else {
    const Strides sa = broadcast_strides(av.shape(), os), sb = broadcast_strides(bv.shape(), os);
    for_each_broadcast(os, sa, sb, [&](std::size_t o, std::size_t ia, std::size_t ib) {
      out[o] = f(av[ia], bv[ib]);
    });
  }
  return tape.record(std::move(out), {a, b},
                     [a, b, same, dfa, dfb](Tape<T>& t, const Tensor<T>& y, const Tensor<T>& g) {
                       const Tensor<T>& av = t.value(a);
                       const Tensor<T>& bv = t.value(b);
                       const bool ra = t.requires_grad(a), rb = t.requires_grad(b);
                       T* ga = ra ? t.grad_accumulator(a).data() : nullptr;
                       T* gb = rb ? t.grad_accumulator(b).data() : nullptr;
                       if (same) {
                         for (std::size_t i = 0; i < g.size(); ++i) {
                           if (ga) ga[i] += g[i] * dfa(av[i], bv[i], y[i]);
                           if (gb) gb[i] += g[i] * dfb(av[i], bv[i], y[i]);
                         }
                         return;
                       }
                       const Strides sa = broadcast_strides(av.shape(), y.shape());
                       const Strides sb = broadcast_strides(bv.shape(), y.shape());
                       for_each_broadcast(y.shape(), sa, sb,
                                          [&](std::size_t o, std::size_t ia, std::size_t ib) {
                                            if (ga) ga[ia] += g[o] * dfa(av[ia], bv[ib], y[o]);
                                            if (gb) gb[ib] += g[o] * dfb(av[ia], bv[ib], y[o]);
                                          });
                     });
}

// f(x) and df(x, y) where y = f(x).
template <typename T, typename F, typename DF>
Var<T> unary_op(Var<T> a, F f, DF df) {
  const Tensor<T>& av = a.value();
  Tensor<T> out(av.shape());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = f(av[i]);
  return a.tape().record(std::move(out), {a},
                         [a, df](Tape<T>& t, const Tensor<T>& y, const Tensor<T>& g) {
                           const Tensor<T>& av = t.value(a);
                           T* ga = t.grad_accumulator(a).data();
                           for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i] * df(av[i], y[i]);
                         });
}

// ---- im2col ------------------------------------------------------------------

struct ConvGeom {
  int channels, height, width;  // image
  int kh, kw, stride, pad;
  int out_h, out_w;             // columns grid
};

template <typename T>
void im2col(const T* img, const ConvGeom& g, T* col) {
  const std::size_t cols = static_cast<std::size_t>(g.out_h) * g.out_w;
  for (int c = 0; c < g.channels; ++c)
    for (int i = 0; i < g.kh; ++i)
      for (int j = 0; j < g.kw; ++j) {
        T* row = col + ((static_cast<std::size_t>(c) * g.kh + i) * g.kw + j) * cols;
        const T* plane = img + static_cast<std::size_t>(c) * g.height * g.width;
        for (int oh = 0; oh < g.out_h; ++oh) {
          const int ih = oh * g.stride - g.pad + i;
          T* dst = row + static_cast<std::size_t>(oh) * g.out_w;
          if (ih < 0 || ih >= g.height) {
            std::fill(dst, dst + g.out_w, T(0));
            continue;
          }
          const T* src = plane + static_cast<std::size_t>(ih) * g.width;
          for (int ow = 0; ow < g.out_w; ++ow) {
            const int iw = ow * g.stride - g.pad + j;
            dst[ow] = (iw >= 0 && iw < g.width) ? src[iw] : T(0);
          }
        }
      }
}

// Adjoint of im2col: accumulates columns back into the image.
template <typename T>
void col2im(const T* col, const ConvGeom& g, T* img) {
  const std::size_t cols = static_cast<std::size_t>(g.out_h) * g.out_w;
  for (int c = 0; c < g.channels; ++c)
    for (int i = 0; i < g.kh; ++i)
      for (int j = 0; j < g.kw; ++j) {
        const T* row = col + ((static_cast<std::size_t>(c) * g.kh + i) * g.kw + j) * cols;
        T* plane = img + static_cast<std::size_t>(c) * g.height * g.width;
        for (int oh = 0; oh < g.out_h; ++oh) {
          const int ih = oh * g.stride - g.pad + i;
          if (ih < 0 || ih >= g.height) continue;
          const T* src = row + static_cast<std::size_t>(oh) * g.out_w;
          T* dst = plane + static_cast<std::size_t>(ih) * g.width;
          for (int ow = 0; ow < g.out_w; ++ow) {
            const int iw = ow * g.stride - g.pad + j;
            if (iw >= 0 && iw < g.width) dst[iw] += src[ow];
          }
        }
      }
}

template <typename T>
void add_channel_bias(Tensor<T>& y, const Tensor<T>& b) {
  const Shape& s = y.shape();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      T* p = y.plane(n, c);
      const T v = b[c];
      for (std::size_t i = 0; i < s.plane(); ++i) p[i] += v;
    }
}

template <typename T>
void accumulate_bias_grad(const Tensor<T>& g, Tensor<T>& gb) {
  const Shape& s = g.shape();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const T* p = g.plane(n, c);
      T acc = 0;
      for (std::size_t i = 0; i < s.plane(); ++i) acc += p[i];
      gb[c] += acc;
    }
}

void check_bias(const std::string& op, const Shape& b, int channels) {
  if (b.numel() != static_cast<std::size_t>(channels))
    throw DimensionError(op + ": bias " + to_string(b) + " does not match " +
                         std::to_string(channels) + " output channels");
}

}  // namespace

// ---- elementwise ---------------------------------------------------------------

template <typename T>
Var<T> add(Var<T> a, Var<T> b) {
  return binary_op<T>(
      "add", a, b, [](T x, T y) { return x + y; }, [](T, T, T) { return T(1); },
      [](T, T, T) { return T(1); });
}

template <typename T>
Var<T> sub(Var<T> a, Var<T> b) {
  return binary_op<T>(
      "sub", a, b, [](T x, T y) { return x - y; }, [](T, T, T) { return T(1); },
      [](T, T, T) { return T(-1); });
}

template <typename T>
Var<T> mul(Var<T> a, Var<T> b) {
  return binary_op<T>(
      "mul", a, b, [](T x, T y) { return x * y; }, [](T, T y, T) { return y; },
      [](T x, T, T) { return x; });
}

template <typename T>
Var<T> div(Var<T> a, Var<T> b) {
  return binary_op<T>(
      "div", a, b, [](T x, T y) { return x / y; }, [](T, T y, T) { return T(1) / y; },
      [](T, T y, T out) { return -out / y; });
}

template <typename T>
Var<T> scale(Var<T> a, T s) {
  return unary_op<T>(a, [s](T x) { return s * x; }, [s](T, T) { return s; });
}

template <typename T>
Var<T> add_scalar(Var<T> a, T s) {
  return unary_op<T>(a, [s](T x) { return x + s; }, [](T, T) { return T(1); });
}

template <typename T>
Var<T> square(Var<T> a) {
  return unary_op<T>(a, [](T x) { return x * x; }, [](T x, T) { return T(2) * x; });
}

template <typename T>
Var<T> abs(Var<T> a) {
  return unary_op<T>(
      a, [](T x) { return std::abs(x); },
      [](T x, T) { return x > 0 ? T(1) : (x < 0 ? T(-1) : T(0)); });
}

template <typename T>
Var<T> leaky_relu(Var<T> a, T slope) {
  return unary_op<T>(
      a, [slope](T x) { return x > 0 ? x : slope * x; },
      [slope](T x, T) { return x > 0 ? T(1) : slope; });
}

template <typename T>
Var<T> sigmoid(Var<T> a) {
  return unary_op<T>(
      a,
      [](T x) {
        if (x >= 0) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      },
      [](T, T y) { return y * (T(1) - y); });
}

template <typename T>
Var<T> gelu(Var<T> a) {
  constexpr T inv_sqrt2 = T(0.70710678118654752440);
  constexpr T inv_sqrt2pi = T(0.39894228040143267794);
  return unary_op<T>(
      a, [](T x) { return T(0.5) * x * (T(1) + std::erf(x * inv_sqrt2)); },
      [](T x, T) {
        return T(0.5) * (T(1) + std::erf(x * inv_sqrt2)) + x * inv_sqrt2pi * std::exp(-T(0.5) * x * x);
      });
}

template <typename T>
Var<T> softplus(Var<T> a) {
  return unary_op<T>(
      a, [](T x) { return std::max(x, T(0)) + std::log1p(std::exp(-std::abs(x))); },
      [](T x, T) {
        if (x >= 0) return T(1) / (T(1) + std::exp(-x));
        const T e = std::exp(x);
        return e / (T(1) + e);
      });
}

template <typename T>
Var<T> logit(Var<T> a, T eps) {
  return unary_op<T>(
      a,
      [eps](T x) {
        const T c = std::clamp(x, eps, T(1) - eps);
        return std::log(c) - std::log1p(-c);
      },
      [eps](T x, T) { return (x < eps || x > T(1) - eps) ? T(0) : T(1) / (x * (T(1) - x)); });
}

template <typename T>
Var<T> sum(Var<T> a) {
  const Tensor<T>& av = a.value();
  T acc = 0;
  for (std::size_t i = 0; i < av.size(); ++i) acc += av[i];
  return a.tape().record(Tensor<T>(Shape{1, 1, 1, 1}, acc), {a},
                         [a](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
                           Tensor<T>& ga = t.grad_accumulator(a);
                           for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[0];
                         });
}

template <typename T>
Var<T> mean(Var<T> a) {
  const std::size_t n = a.value().size();
  return scale(sum(a), T(1) / static_cast<T>(n));
}

template <typename T>
Var<T> expand(Var<T> a, Shape shape) {
  const Shape& as = a.value().shape();
  if (broadcast_shape("expand", as, shape) != shape) dim_error("expand", as, shape);
  if (as == shape) return a;
  const Tensor<T>& av = a.value();
  Tensor<T> out(shape);
  const Strides sa = broadcast_strides(as, shape);
  for_each_broadcast(shape, sa, sa, [&](std::size_t o, std::size_t ia, std::size_t) { out[o] = av[ia]; });
  return a.tape().record(std::move(out), {a}, [a](Tape<T>& t, const Tensor<T>& y, const Tensor<T>& g) {
    Tensor<T>& ga = t.grad_accumulator(a);
    const Strides sa = broadcast_strides(ga.shape(), y.shape());
    for_each_broadcast(y.shape(), sa, sa, [&](std::size_t o, std::size_t ia, std::size_t) { ga[ia] += g[o]; });
  });
}

template <typename T>
Var<T> reshape(Var<T> a, Shape shape) {
  Tensor<T> out = a.value().reshaped(shape);
  return a.tape().record(std::move(out), {a}, [a](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
    Tensor<T>& ga = t.grad_accumulator(a);
    for (std::size_t i = 0; i < ga.size(); ++i) ga[i] += g[i];
  });
}

namespace {
// (outer, axis, inner) factorisation of a shape around `axis`.
struct AxisView {
  std::size_t outer, len, inner;
};
AxisView axis_view(const Shape& s, int axis) {
  std::size_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[i];
  for (int i = axis + 1; i < 4; ++i) inner *= s[i];
  return {outer, static_cast<std::size_t>(s[axis]), inner};
}
}  // namespace

template <typename T>
Var<T> concat(const std::vector<Var<T>>& parts, int axis) {
  if (parts.empty()) throw DimensionError("concat: no inputs");
  if (axis < 0 || axis > 3) throw DimensionError("concat: axis out of range");
  Shape os = parts[0].value().shape();
  int total = 0;
  for (const auto& p : parts) {
    Shape s = p.value().shape();
    for (int ax = 0; ax < 4; ++ax)
      if (ax != axis && s[ax] != os[ax]) dim_error("concat", os, s);
    total += s[axis];
  }
  int* dims[4] = {&os.n, &os.c, &os.h, &os.w};
  *dims[axis] = total;
  Tensor<T> out(os);
  const AxisView ov = axis_view(os, axis);
  std::size_t offset = 0;
  for (const auto& p : parts) {
    const Tensor<T>& pv = p.value();
    const AxisView pv_view = axis_view(pv.shape(), axis);
    const std::size_t chunk = pv_view.len * pv_view.inner;
    for (std::size_t o = 0; o < ov.outer; ++o)
      std::memcpy(out.data() + o * ov.len * ov.inner + offset * ov.inner, pv.data() + o * chunk,
                  chunk * sizeof(T));
    offset += pv_view.len;
  }
  Tape<T>& tape = parts[0].tape();
  return tape.record(std::move(out), parts, [parts, axis](Tape<T>& t, const Tensor<T>& y, const Tensor<T>& g) {
    const AxisView ov = axis_view(y.shape(), axis);
    std::size_t offset = 0;
    for (const auto& p : parts) {
      const AxisView pv = axis_view(t.value(p).shape(), axis);
      if (t.requires_grad(p)) {
        Tensor<T>& gp = t.grad_accumulator(p);
        const std::size_t chunk = pv.len * pv.inner;
        for (std::size_t o = 0; o < ov.outer; ++o) {
          const T* src = g.data() + o * ov.len * ov.inner + offset * ov.inner;
          T* dst = gp.data() + o * chunk;
          for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
        }
      }
      offset += pv.len;
    }
  });
}

template <typename T>
Var<T> slice(Var<T> a, int axis, int start, int length) {
  const Shape& s = a.value().shape();
  if (axis < 0 || axis > 3 || start < 0 || length < 1 || start + length > s[axis])
    throw DimensionError("slice: range [" + std::to_string(start) + "," +
                         std::to_string(start + length) + ") on axis " + std::to_string(axis) +
                         " out of bounds for " + to_string(s));
  Shape os = s;
  int* dims[4] = {&os.n, &os.c, &os.h, &os.w};
  *dims[axis] = length;
  Tensor<T> out(os);
  const AxisView iv = axis_view(s, axis);
  const std::size_t chunk = static_cast<std::size_t>(length) * iv.inner;
  const Tensor<T>& av = a.value();
  for (std::size_t o = 0; o < iv.outer; ++o)
    std::memcpy(out.data() + o * chunk, av.data() + o * iv.len * iv.inner + start * iv.inner,
                chunk * sizeof(T));
  return a.tape().record(std::move(out), {a}, [a, axis, start, length](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
    Tensor<T>& ga = t.grad_accumulator(a);
    const AxisView iv = axis_view(ga.shape(), axis);
    const std::size_t chunk = static_cast<std::size_t>(length) * iv.inner;
    for (std::size_t o = 0; o < iv.outer; ++o) {
      T* dst = ga.data() + o * iv.len * iv.inner + start * iv.inner;
      const T* src = g.data() + o * chunk;
      for (std::size_t i = 0; i < chunk; ++i) dst[i] += src[i];
    }
  });
}

// ---- convolution -------------------------------------------------------------

template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> bias, Conv2dSpec spec) {
  const Shape xs = x.value().shape();
  const Shape ws = w.value().shape();
  const int groups = spec.groups;
  if (groups < 1 || xs.c % groups != 0 || ws.n % groups != 0 || ws.c * groups != xs.c)
    throw DimensionError("conv2d: input " + to_string(xs) + " incompatible with weight " +
                         to_string(ws) + " at groups=" + std::to_string(groups));
  const int pad = spec.padding < 0 ? ws.h / 2 : spec.padding;
  const int stride = spec.stride;
  if (stride < 1) throw DimensionError("conv2d: stride must be >= 1");
  const int oh = (xs.h + 2 * pad - ws.h) / stride + 1;
  const int ow = (xs.w + 2 * pad - ws.w) / stride + 1;
  if (oh < 1 || ow < 1 || xs.h + 2 * pad < ws.h || xs.w + 2 * pad < ws.w)
    throw DimensionError("conv2d: kernel " + to_string(ws) + " larger than padded input " + to_string(xs));
  const int cin_g = xs.c / groups, cout_g = ws.n / groups;
  if (bias.valid()) check_bias("conv2d", bias.value().shape(), ws.n);

  const Shape os{xs.n, ws.n, oh, ow};
  Tensor<T> out(os);
  const ConvGeom geom{cin_g, xs.h, xs.w, ws.h, ws.w, stride, pad, oh, ow};
  const std::size_t cols = static_cast<std::size_t>(oh) * ow;
  const int k = cin_g * ws.h * ws.w;
  const bool depthwise = cin_g == 1 && cout_g == 1;
  const bool pointwise = ws.h == 1 && ws.w == 1 && stride == 1 && pad == 0;
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = w.value();

  if (depthwise) {
    for (int n = 0; n < xs.n; ++n)
      for (int c = 0; c < xs.c; ++c) {
        const T* src = xv.plane(n, c);
        const T* ker = wv.data() + static_cast<std::size_t>(c) * ws.h * ws.w;
        T* dst = out.plane(n, c);
        for (int i = 0; i < ws.h; ++i)
          for (int j = 0; j < ws.w; ++j) {
            const T kv = ker[i * ws.w + j];
            for (int y = 0; y < oh; ++y) {
              const int ih = y * stride - pad + i;
              if (ih < 0 || ih >= xs.h) continue;
              const T* row = src + static_cast<std::size_t>(ih) * xs.w;
              T* drow = dst + static_cast<std::size_t>(y) * ow;
              for (int xo = 0; xo < ow; ++xo) {
                const int iw = xo * stride - pad + j;
                if (iw >= 0 && iw < xs.w) drow[xo] += kv * row[iw];
              }
            }
          }
      }
  } else {
    std::vector<T> col(pointwise ? 0 : static_cast<std::size_t>(k) * cols);
    for (int n = 0; n < xs.n; ++n)
      for (int g = 0; g < groups; ++g) {
        const T* src = xv.plane(n, g * cin_g);
        const T* colp = src;
        if (!pointwise) {
          im2col(src, geom, col.data());
          colp = col.data();
        }
        detail::gemm<T>(false, false, cout_g, static_cast<int>(cols), k, T(1),
                        wv.data() + static_cast<std::size_t>(g) * cout_g * k, colp, T(0),
                        out.plane(n, g * cout_g));
      }
  }
  if (bias.valid()) add_channel_bias(out, bias.value());
  x.tape().count_flops("conv2d", 2ull * xs.n * ws.n * cols * static_cast<std::uint64_t>(k));

  return x.tape().record(
      std::move(out), {x, w, bias},
      [x, w, bias, geom, groups, cin_g, cout_g, k, cols, depthwise, pointwise](
          Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
        const Tensor<T>& xv = t.value(x);
        const Tensor<T>& wv = t.value(w);
        const Shape xs = xv.shape(), ws = wv.shape();
        const int oh = geom.out_h, ow = geom.out_w, stride = geom.stride, pad = geom.pad;
        if (bias.valid() && t.requires_grad(bias)) accumulate_bias_grad(g, t.grad_accumulator(bias));
        T* gx = t.requires_grad(x) ? t.grad_accumulator(x).data() : nullptr;
        T* gw = t.requires_grad(w) ? t.grad_accumulator(w).data() : nullptr;
        if (!gx && !gw) return;
        if (depthwise) {
          for (int n = 0; n < xs.n; ++n)
            for (int c = 0; c < xs.c; ++c) {
              const T* src = xv.plane(n, c);
              const T* gy = g.plane(n, c);
              const std::size_t kbase = static_cast<std::size_t>(c) * ws.h * ws.w;
              T* dx = gx ? gx + xv.offset(n, c, 0, 0) : nullptr;
              for (int i = 0; i < ws.h; ++i)
                for (int j = 0; j < ws.w; ++j) {
                  const T kv = wv[kbase + i * ws.w + j];
                  T acc = 0;
                  for (int y = 0; y < oh; ++y) {
                    const int ih = y * stride - pad + i;
                    if (ih < 0 || ih >= xs.h) continue;
                    const T* row = src + static_cast<std::size_t>(ih) * xs.w;
                    const T* grow = gy + static_cast<std::size_t>(y) * ow;
                    T* dxrow = dx ? dx + static_cast<std::size_t>(ih) * xs.w : nullptr;
                    for (int xo = 0; xo < ow; ++xo) {
                      const int iw = xo * stride - pad + j;
                      if (iw < 0 || iw >= xs.w) continue;
                      acc += grow[xo] * row[iw];
                      if (dxrow) dxrow[iw] += grow[xo] * kv;
                    }
                  }
                  if (gw) gw[kbase + i * ws.w + j] += acc;
                }
            }
          return;
        }
        std::vector<T> col(pointwise ? 0 : static_cast<std::size_t>(k) * cols);
        std::vector<T> dcol(gx && !pointwise ? static_cast<std::size_t>(k) * cols : 0);
        for (int n = 0; n < xs.n; ++n)
          for (int grp = 0; grp < groups; ++grp) {
            const T* gy = g.plane(n, grp * cout_g);
            const T* wg = wv.data() + static_cast<std::size_t>(grp) * cout_g * k;
            if (gw) {
              const T* src = xv.plane(n, grp * cin_g);
              const T* colp = src;
              if (!pointwise) {
                im2col(src, geom, col.data());
                colp = col.data();
              }
              detail::gemm<T>(false, true, cout_g, k, static_cast<int>(cols), T(1), gy, colp, T(1),
                              gw + static_cast<std::size_t>(grp) * cout_g * k);
            }
            if (gx) {
              T* dst = gx + xv.offset(n, grp * cin_g, 0, 0);
              if (pointwise) {
                detail::gemm<T>(true, false, k, static_cast<int>(cols), cout_g, T(1), wg, gy, T(1), dst);
              } else {
                detail::gemm<T>(true, false, k, static_cast<int>(cols), cout_g, T(1), wg, gy, T(0),
                                dcol.data());
                col2im(dcol.data(), geom, dst);
              }
            }
          }
      });
}

template <typename T>
Var<T> conv_transpose2d(Var<T> x, Var<T> w, Var<T> bias, int stride, int padding) {
  const Shape xs = x.value().shape();
  const Shape ws = w.value().shape();
  if (ws.n != xs.c || ws.h != ws.w)
    throw DimensionError("conv_transpose2d: input " + to_string(xs) + " incompatible with weight " + to_string(ws));
  const int kk = ws.h;
  const int oh = (xs.h - 1) * stride - 2 * padding + kk;
  const int ow = (xs.w - 1) * stride - 2 * padding + kk;
  if (oh < 1 || ow < 1) throw DimensionError("conv_transpose2d: empty output");
  const int cout = ws.c;
  if (bias.valid()) check_bias("conv_transpose2d", bias.value().shape(), cout);
  const ConvGeom geom{cout, oh, ow, kk, kk, stride, padding, xs.h, xs.w};
  const int k = cout * kk * kk;
  const std::size_t cols = static_cast<std::size_t>(xs.h) * xs.w;
  Tensor<T> out(Shape{xs.n, cout, oh, ow});
  std::vector<T> col(static_cast<std::size_t>(k) * cols);
  const Tensor<T>& xv = x.value();
  const Tensor<T>& wv = w.value();
  for (int n = 0; n < xs.n; ++n) {
    detail::gemm<T>(true, false, k, static_cast<int>(cols), xs.c, T(1), wv.data(), xv.plane(n, 0), T(0),
                    col.data());
    col2im(col.data(), geom, out.plane(n, 0));
  }
  if (bias.valid()) add_channel_bias(out, bias.value());
  x.tape().count_flops("conv_transpose2d", 2ull * xs.n * xs.c * cols * static_cast<std::uint64_t>(k));
  return x.tape().record(std::move(out), {x, w, bias},
                         [x, w, bias, geom, k, cols](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
                           const Tensor<T>& xv = t.value(x);
                           const Tensor<T>& wv = t.value(w);
                           const Shape xs = xv.shape();
                           if (bias.valid() && t.requires_grad(bias))
                             accumulate_bias_grad(g, t.grad_accumulator(bias));
                           T* gx = t.requires_grad(x) ? t.grad_accumulator(x).data() : nullptr;
                           T* gw = t.requires_grad(w) ? t.grad_accumulator(w).data() : nullptr;
                           if (!gx && !gw) return;
                           std::vector<T> dcol(static_cast<std::size_t>(k) * cols);
                           for (int n = 0; n < xs.n; ++n) {
                             im2col(g.plane(n, 0), geom, dcol.data());
                             if (gx)
                               detail::gemm<T>(false, false, xs.c, static_cast<int>(cols), k, T(1), wv.data(),
                                               dcol.data(), T(1), gx + xv.offset(n, 0, 0, 0));
                             if (gw)
                               detail::gemm<T>(false, true, xs.c, k, static_cast<int>(cols), T(1),
                                               xv.plane(n, 0), dcol.data(), T(1), gw);
                           }
                         });
}

// ---- normalisation -------------------------------------------------------------

template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
  const Tensor<T>& xv = x.value();
  const Shape s = xv.shape();
  if (gamma.value().size() != static_cast<std::size_t>(s.c) || beta.value().size() != static_cast<std::size_t>(s.c))
    throw DimensionError("layer_norm: affine parameters do not match " + std::to_string(s.c) + " channels");
  const std::size_t P = s.plane();
  Tensor<T> xhat(s);
  Tensor<T> inv_std(Shape{s.n, 1, s.h, s.w});
  std::vector<T> mu(P), var(P);
  for (int n = 0; n < s.n; ++n) {
    std::fill(mu.begin(), mu.end(), T(0));
    std::fill(var.begin(), var.end(), T(0));
    for (int c = 0; c < s.c; ++c) {
      const T* p = xv.plane(n, c);
      for (std::size_t i = 0; i < P; ++i) mu[i] += p[i];
    }
    for (auto& m : mu) m /= static_cast<T>(s.c);
    for (int c = 0; c < s.c; ++c) {
      const T* p = xv.plane(n, c);
      for (std::size_t i = 0; i < P; ++i) {
        const T d = p[i] - mu[i];
        var[i] += d * d;
      }
    }
    T* is = inv_std.plane(n, 0);
    for (std::size_t i = 0; i < P; ++i) is[i] = T(1) / std::sqrt(var[i] / static_cast<T>(s.c) + eps);
    for (int c = 0; c < s.c; ++c) {
      const T* p = xv.plane(n, c);
      T* q = xhat.plane(n, c);
      for (std::size_t i = 0; i < P; ++i) q[i] = (p[i] - mu[i]) * is[i];
    }
  }
  Tensor<T> out(s);
  const Tensor<T>& gv = gamma.value();
  const Tensor<T>& bv = beta.value();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const T* q = xhat.plane(n, c);
      T* o = out.plane(n, c);
      for (std::size_t i = 0; i < P; ++i) o[i] = q[i] * gv[c] + bv[c];
    }
  return x.tape().record(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& t, const Tensor<T>&,
                                                                               const Tensor<T>& g) {
        const Shape s = g.shape();
        const std::size_t P = s.plane();
        const Tensor<T>& gv = t.value(gamma);
        if (t.requires_grad(gamma) || t.requires_grad(beta)) {
          T* gg = t.requires_grad(gamma) ? t.grad_accumulator(gamma).data() : nullptr;
          T* gb = t.requires_grad(beta) ? t.grad_accumulator(beta).data() : nullptr;
          for (int n = 0; n < s.n; ++n)
            for (int c = 0; c < s.c; ++c) {
              const T* gy = g.plane(n, c);
              const T* q = xhat.plane(n, c);
              T a = 0, b = 0;
              for (std::size_t i = 0; i < P; ++i) {
                a += gy[i] * q[i];
                b += gy[i];
              }
              if (gg) gg[c] += a;
              if (gb) gb[c] += b;
            }
        }
        if (!t.requires_grad(x)) return;
        Tensor<T>& gx = t.grad_accumulator(x);
        std::vector<T> m1(P), m2(P);
        const T inv_c = T(1) / static_cast<T>(s.c);
        for (int n = 0; n < s.n; ++n) {
          std::fill(m1.begin(), m1.end(), T(0));
          std::fill(m2.begin(), m2.end(), T(0));
          for (int c = 0; c < s.c; ++c) {
            const T* gy = g.plane(n, c);
            const T* q = xhat.plane(n, c);
            for (std::size_t i = 0; i < P; ++i) {
              const T d = gy[i] * gv[c];
              m1[i] += d;
              m2[i] += d * q[i];
            }
          }
          const T* is = inv_std.plane(n, 0);
          for (int c = 0; c < s.c; ++c) {
            const T* gy = g.plane(n, c);
            const T* q = xhat.plane(n, c);
            T* dx = gx.plane(n, c);
            for (std::size_t i = 0; i < P; ++i)
              dx[i] += is[i] * (gy[i] * gv[c] - inv_c * m1[i] - q[i] * inv_c * m2[i]);
          }
        }
      });
}

template <typename T>
Var<T> batch_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps) {
  const Tensor<T>& xv = x.value();
  const Shape s = xv.shape();
  if (gamma.value().size() != static_cast<std::size_t>(s.c) || beta.value().size() != static_cast<std::size_t>(s.c))
    throw DimensionError("batch_norm: affine parameters do not match " + std::to_string(s.c) + " channels");
  const std::size_t P = s.plane();
  const T count = static_cast<T>(static_cast<std::size_t>(s.n) * P);
  Tensor<T> xhat(s);
  std::vector<T> inv_std(s.c);
  for (int c = 0; c < s.c; ++c) {
    T mu = 0;
    for (int n = 0; n < s.n; ++n) {
      const T* p = xv.plane(n, c);
      for (std::size_t i = 0; i < P; ++i) mu += p[i];
    }
    mu /= count;
    T var = 0;
    for (int n = 0; n < s.n; ++n) {
      const T* p = xv.plane(n, c);
      for (std::size_t i = 0; i < P; ++i) var += (p[i] - mu) * (p[i] - mu);
    }
    inv_std[c] = T(1) / std::sqrt(var / count + eps);
    for (int n = 0; n < s.n; ++n) {
      const T* p = xv.plane(n, c);
      T* q = xhat.plane(n, c);
      for (std::size_t i = 0; i < P; ++i) q[i] = (p[i] - mu) * inv_std[c];
    }
  }
  Tensor<T> out(s);
  const Tensor<T>& gv = gamma.value();
  const Tensor<T>& bv = beta.value();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c) {
      const T* q = xhat.plane(n, c);
      T* o = out.plane(n, c);
      for (std::size_t i = 0; i < P; ++i) o[i] = q[i] * gv[c] + bv[c];
    }
  return x.tape().record(
      std::move(out), {x, gamma, beta},
      [x, gamma, beta, xhat = std::move(xhat), inv_std = std::move(inv_std)](Tape<T>& t, const Tensor<T>&,
                                                                               const Tensor<T>& g) {
        const Shape s = g.shape();
        const std::size_t P = s.plane();
        const T count = static_cast<T>(static_cast<std::size_t>(s.n) * P);
        const Tensor<T>& gv = t.value(gamma);
        T* gg = t.requires_grad(gamma) ? t.grad_accumulator(gamma).data() : nullptr;
        T* gb = t.requires_grad(beta) ? t.grad_accumulator(beta).data() : nullptr;
        T* gx = t.requires_grad(x) ? t.grad_accumulator(x).data() : nullptr;
        for (int c = 0; c < s.c; ++c) {
          T sg = 0, sgq = 0;
          for (int n = 0; n < s.n; ++n) {
            const T* gy = g.plane(n, c);
            const T* q = xhat.plane(n, c);
            for (std::size_t i = 0; i < P; ++i) {
              sg += gy[i];
              sgq += gy[i] * q[i];
            }
          }
          if (gg) gg[c] += sgq;
          if (gb) gb[c] += sg;
          if (!gx) continue;
          const T k = gv[c] * inv_std[c];
          for (int n = 0; n < s.n; ++n) {
            const T* gy = g.plane(n, c);
            const T* q = xhat.plane(n, c);
            T* dx = gx + xhat.offset(n, c, 0, 0);
            for (std::size_t i = 0; i < P; ++i) dx[i] += k * (gy[i] - sg / count - q[i] * sgq / count);
          }
        }
      });
}

// ---- pooling -------------------------------------------------------------------

template <typename T>
Var<T> avg_pool2d(Var<T> x, int k) {
  const Shape s = x.value().shape();
  if (k < 1 || s.h % k != 0 || s.w % k != 0)
    throw DimensionError("avg_pool2d: factor " + std::to_string(k) + " does not divide " + to_string(s));
  const Shape os{s.n, s.c, s.h / k, s.w / k};
  Tensor<T> out(os);
  const Tensor<T>& xv = x.value();
  const T inv = T(1) / static_cast<T>(k * k);
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int h = 0; h < s.h; ++h)
        for (int w = 0; w < s.w; ++w) out.at(n, c, h / k, w / k) += xv.at(n, c, h, w) * inv;
  return x.tape().record(std::move(out), {x}, [x, k, inv](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
    Tensor<T>& gx = t.grad_accumulator(x);
    const Shape s = gx.shape();
    for (int n = 0; n < s.n; ++n)
      for (int c = 0; c < s.c; ++c)
        for (int h = 0; h < s.h; ++h)
          for (int w = 0; w < s.w; ++w) gx.at(n, c, h, w) += g.at(n, c, h / k, w / k) * inv;
  });
}

template <typename T>
Var<T> max_pool2d(Var<T> x, int k) {
  const Shape s = x.value().shape();
  if (k < 1 || s.h % k != 0 || s.w % k != 0)
    throw DimensionError("max_pool2d: factor " + std::to_string(k) + " does not divide " + to_string(s));
  const Shape os{s.n, s.c, s.h / k, s.w / k};
  Tensor<T> out(os);
  std::vector<std::size_t> arg(os.numel());
  const Tensor<T>& xv = x.value();
  for (int n = 0; n < os.n; ++n)
    for (int c = 0; c < os.c; ++c)
      for (int h = 0; h < os.h; ++h)
        for (int w = 0; w < os.w; ++w) {
          std::size_t best = xv.offset(n, c, h * k, w * k);
          for (int i = 0; i < k; ++i)
            for (int j = 0; j < k; ++j) {
              const std::size_t o = xv.offset(n, c, h * k + i, w * k + j);
              if (xv[o] > xv[best]) best = o;
            }
          const std::size_t oo = out.offset(n, c, h, w);
          out[oo] = xv[best];
          arg[oo] = best;
        }
  return x.tape().record(std::move(out), {x}, [x, arg = std::move(arg)](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
    Tensor<T>& gx = t.grad_accumulator(x);
    for (std::size_t i = 0; i < g.size(); ++i) gx[arg[i]] += g[i];
  });
}

// ---- pixel shuffle -------------------------------------------------------------

namespace {
// Index of the shuffled element in the packed (unshuffled) layout.
template <typename Fn>
void shuffle_map(const Shape& packed, int r, Fn&& fn) {
  // packed (N, C*r*r, H, W) <-> spread (N, C, H*r, W*r)
  const int C = packed.c / (r * r);
  for (int n = 0; n < packed.n; ++n)
    for (int c = 0; c < C; ++c)
      for (int i = 0; i < r; ++i)
        for (int j = 0; j < r; ++j) {
          const int pc = c * r * r + i * r + j;
          for (int h = 0; h < packed.h; ++h)
            for (int w = 0; w < packed.w; ++w) {
              const std::size_t po = ((static_cast<std::size_t>(n) * packed.c + pc) * packed.h + h) * packed.w + w;
              const std::size_t so = ((static_cast<std::size_t>(n) * C + c) * packed.h * r + (h * r + i)) *
                                         static_cast<std::size_t>(packed.w) * r +
                                     (w * r + j);
              fn(po, so);
            }
        }
}
}  // namespace

template <typename T>
Var<T> pixel_shuffle(Var<T> x, int r) {
  const Shape s = x.value().shape();
  if (r < 1 || s.c % (r * r) != 0)
    throw DimensionError("pixel_shuffle: channels of " + to_string(s) + " not divisible by r^2=" + std::to_string(r * r));
  Tensor<T> out(Shape{s.n, s.c / (r * r), s.h * r, s.w * r});
  const Tensor<T>& xv = x.value();
  shuffle_map(s, r, [&](std::size_t po, std::size_t so) { out[so] = xv[po]; });
  return x.tape().record(std::move(out), {x}, [x, r](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
    Tensor<T>& gx = t.grad_accumulator(x);
    shuffle_map(gx.shape(), r, [&](std::size_t po, std::size_t so) { gx[po] += g[so]; });
  });
}

template <typename T>
Var<T> pixel_unshuffle(Var<T> x, int r) {
  const Shape s = x.value().shape();
  if (r < 1 || s.h % r != 0 || s.w % r != 0)
    throw DimensionError("pixel_unshuffle: spatial dims of " + to_string(s) + " not divisible by " + std::to_string(r));
  const Shape packed{s.n, s.c * r * r, s.h / r, s.w / r};
  Tensor<T> out(packed);
  const Tensor<T>& xv = x.value();
  shuffle_map(packed, r, [&](std::size_t po, std::size_t so) { out[po] = xv[so]; });
  return x.tape().record(std::move(out), {x}, [x, r, packed](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
    Tensor<T>& gx = t.grad_accumulator(x);
    shuffle_map(packed, r, [&](std::size_t po, std::size_t so) { gx[so] += g[po]; });
  });
}

// ---- bilinear resize -----------------------------------------------------------

namespace {
struct LerpTap {
  int i0, i1;
  double w1;
};
std::vector<LerpTap> lerp_taps(int in, int out) {
  std::vector<LerpTap> taps(out);
  const double scale = static_cast<double>(in) / out;
  for (int o = 0; o < out; ++o) {
    double src = (o + 0.5) * scale - 0.5;
    src = std::clamp(src, 0.0, static_cast<double>(in - 1));
    const int i0 = static_cast<int>(std::floor(src));
    const int i1 = std::min(i0 + 1, in - 1);
    taps[o] = {i0, i1, src - i0};
  }
  return taps;
}
}  // namespace

template <typename T>
Var<T> resize_bilinear(Var<T> x, int out_h, int out_w) {
  const Shape s = x.value().shape();
  if (out_h < 1 || out_w < 1) throw DimensionError("resize_bilinear: empty output");
  if (s.h == out_h && s.w == out_w) return x;
  const auto th = lerp_taps(s.h, out_h), tw = lerp_taps(s.w, out_w);
  Tensor<T> out(Shape{s.n, s.c, out_h, out_w});
  const Tensor<T>& xv = x.value();
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int h = 0; h < out_h; ++h)
        for (int w = 0; w < out_w; ++w) {
          const auto& a = th[h];
          const auto& b = tw[w];
          const T v00 = xv.at(n, c, a.i0, b.i0), v01 = xv.at(n, c, a.i0, b.i1);
          const T v10 = xv.at(n, c, a.i1, b.i0), v11 = xv.at(n, c, a.i1, b.i1);
          const T wy = static_cast<T>(a.w1), wx = static_cast<T>(b.w1);
          out.at(n, c, h, w) = (1 - wy) * ((1 - wx) * v00 + wx * v01) + wy * ((1 - wx) * v10 + wx * v11);
        }
  return x.tape().record(std::move(out), {x}, [x, th, tw](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
    Tensor<T>& gx = t.grad_accumulator(x);
    const Shape os = g.shape();
    for (int n = 0; n < os.n; ++n)
      for (int c = 0; c < os.c; ++c)
        for (int h = 0; h < os.h; ++h)
          for (int w = 0; w < os.w; ++w) {
            const auto& a = th[h];
            const auto& b = tw[w];
            const T wy = static_cast<T>(a.w1), wx = static_cast<T>(b.w1);
            const T gv = g.at(n, c, h, w);
            gx.at(n, c, a.i0, b.i0) += gv * (1 - wy) * (1 - wx);
            gx.at(n, c, a.i0, b.i1) += gv * (1 - wy) * wx;
            gx.at(n, c, a.i1, b.i0) += gv * wy * (1 - wx);
            gx.at(n, c, a.i1, b.i1) += gv * wy * wx;
          }
  });
}

// ---- style modulation ------------------------------------------------------------

template <typename T>
Var<T> modulate_weights(Var<T> w, Var<T> s, T eps, bool demodulate) {
  if (!(eps > T(0))) throw ParameterError("modulate_weights: epsilon must be positive");
  const Shape ws = w.value().shape();
  const Tensor<T>& sv = s.value();
  if (sv.size() != static_cast<std::size_t>(ws.c))
    throw DimensionError("modulate_weights: style vector " + to_string(sv.shape()) + " does not match " +
                         std::to_string(ws.c) + " input channels of " + to_string(ws));
  const std::size_t taps = ws.plane();
  const std::size_t row = static_cast<std::size_t>(ws.c) * taps;
  const Tensor<T>& wv = w.value();
  Tensor<T> out(ws);
  std::vector<T> norm(ws.n, T(1));
  for (int j = 0; j < ws.n; ++j) {
    T ss = 0;
    for (int i = 0; i < ws.c; ++i)
      for (std::size_t k = 0; k < taps; ++k) {
        const std::size_t o = j * row + i * taps + k;
        out[o] = sv[i] * wv[o];
        ss += out[o] * out[o];
      }
    if (demodulate) {
      norm[j] = std::sqrt(ss + eps);
      for (std::size_t k = 0; k < row; ++k) out[j * row + k] /= norm[j];
    }
  }
  return w.tape().record(
      std::move(out), {w, s},
      [w, s, demodulate, norm = std::move(norm)](Tape<T>& t, const Tensor<T>& y, const Tensor<T>& g) {
        const Tensor<T>& wv = t.value(w);
        const Tensor<T>& sv = t.value(s);
        const Shape ws = wv.shape();
        const std::size_t taps = ws.plane();
        const std::size_t row = static_cast<std::size_t>(ws.c) * taps;
        T* gw = t.requires_grad(w) ? t.grad_accumulator(w).data() : nullptr;
        T* gs = t.requires_grad(s) ? t.grad_accumulator(s).data() : nullptr;
        std::vector<T> gmod(row);
        for (int j = 0; j < ws.n; ++j) {
          // Gradient w.r.t. the modulated (pre-demodulation) weights of row j.
          if (demodulate) {
            T dot = 0;
            for (std::size_t k = 0; k < row; ++k) dot += g[j * row + k] * y[j * row + k];
            for (std::size_t k = 0; k < row; ++k) gmod[k] = (g[j * row + k] - y[j * row + k] * dot) / norm[j];
          } else {
            for (std::size_t k = 0; k < row; ++k) gmod[k] = g[j * row + k];
          }
          for (int i = 0; i < ws.c; ++i)
            for (std::size_t k = 0; k < taps; ++k) {
              const std::size_t o = j * row + i * taps + k;
              if (gw) gw[o] += gmod[i * taps + k] * sv[i];
              if (gs) gs[i] += gmod[i * taps + k] * wv[o];
            }
        }
      });
}

#define RAWFORMER_INSTANTIATE(T)                                                 \
  template Var<T> add(Var<T>, Var<T>);                                           \
  template Var<T> sub(Var<T>, Var<T>);                                           \
  template Var<T> mul(Var<T>, Var<T>);                                           \
  template Var<T> div(Var<T>, Var<T>);                                           \
  template Var<T> scale(Var<T>, T);                                              \
  template Var<T> add_scalar(Var<T>, T);                                         \
  template Var<T> square(Var<T>);                                                \
  template Var<T> abs(Var<T>);                                                   \
  template Var<T> leaky_relu(Var<T>, T);                                         \
  template Var<T> sigmoid(Var<T>);                                               \
  template Var<T> gelu(Var<T>);                                                  \
  template Var<T> softplus(Var<T>);                                              \
  template Var<T> logit(Var<T>, T);                                              \
  template Var<T> sum(Var<T>);                                                   \
  template Var<T> mean(Var<T>);                                                  \
  template Var<T> expand(Var<T>, Shape);                                         \
  template Var<T> reshape(Var<T>, Shape);                                        \
  template Var<T> concat(const std::vector<Var<T>>&, int);                       \
  template Var<T> slice(Var<T>, int, int, int);                                  \
  template Var<T> conv2d(Var<T>, Var<T>, Var<T>, Conv2dSpec);                    \
  template Var<T> conv_transpose2d(Var<T>, Var<T>, Var<T>, int, int);            \
  template Var<T> layer_norm(Var<T>, Var<T>, Var<T>, T);                         \
  template Var<T> batch_norm(Var<T>, Var<T>, Var<T>, T);                         \
  template Var<T> avg_pool2d(Var<T>, int);                                       \
  template Var<T> max_pool2d(Var<T>, int);                                       \
  template Var<T> pixel_shuffle(Var<T>, int);                                    \
  template Var<T> pixel_unshuffle(Var<T>, int);                                  \
  template Var<T> resize_bilinear(Var<T>, int, int);                             \
  template Var<T> modulate_weights(Var<T>, Var<T>, T, bool);

RAWFORMER_INSTANTIATE(float)
RAWFORMER_INSTANTIATE(double)

#undef RAWFORMER_INSTANTIATE

}  // namespace rawformer::nn
