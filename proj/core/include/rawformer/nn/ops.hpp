#pragma once

#include <vector>

#include "rawformer/nn/tape.hpp"

// Differentiable tensor primitives. Every op records its output on the tape
// of its first operand and supplies an analytic backward.
namespace rawformer::nn {

// ---- elementwise, numpy-style broadcasting over axes of extent 1 ----------

template <typename T> Var<T> add(Var<T> a, Var<T> b);
template <typename T> Var<T> sub(Var<T> a, Var<T> b);
template <typename T> Var<T> mul(Var<T> a, Var<T> b);
template <typename T> Var<T> div(Var<T> a, Var<T> b);

template <typename T> Var<T> scale(Var<T> a, T s);
template <typename T> Var<T> add_scalar(Var<T> a, T s);
template <typename T> Var<T> square(Var<T> a);
template <typename T> Var<T> abs(Var<T> a);
template <typename T> Var<T> leaky_relu(Var<T> a, T slope);
template <typename T> Var<T> sigmoid(Var<T> a);
template <typename T> Var<T> gelu(Var<T> a);
/// log(1 + exp(a)), evaluated without overflow.
template <typename T> Var<T> softplus(Var<T> a);
/// log(c / (1 - c)) with c = clamp(a, eps, 1 - eps); zero gradient where clamped.
template <typename T> Var<T> logit(Var<T> a, T eps);

/// Sum of all elements, shape (1,1,1,1).
template <typename T> Var<T> sum(Var<T> a);
template <typename T> Var<T> mean(Var<T> a);

/// Broadcasts `a` to `shape` (axes of extent 1 only).
template <typename T> Var<T> expand(Var<T> a, Shape shape);

template <typename T> Var<T> reshape(Var<T> a, Shape shape);
template <typename T> Var<T> concat(const std::vector<Var<T>>& parts, int axis);
template <typename T> Var<T> slice(Var<T> a, int axis, int start, int length);

// ---- convolution ----------------------------------------------------------

struct Conv2dSpec {
  int stride = 1;
  /// -1 selects "same" padding (kernel/2), valid for odd kernels at stride 1.
  int padding = -1;
  int groups = 1;
};

/// x (N,Cin,H,W), w (Cout,Cin/groups,kh,kw), optional bias (1,Cout,1,1).
template <typename T>
Var<T> conv2d(Var<T> x, Var<T> w, Var<T> bias, Conv2dSpec spec = {});

/// Deconvolution. x (N,Cin,H,W), w (Cin,Cout,k,k); out extent (H-1)*stride - 2*pad + k.
template <typename T>
Var<T> conv_transpose2d(Var<T> x, Var<T> w, Var<T> bias, int stride, int padding);

// ---- normalisation, pooling, resampling ----------------------------------

/// Normalises over channels at each (n, h, w); gamma/beta shaped (1,C,1,1).
template <typename T>
Var<T> layer_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-6));

/// Normalises each channel over (n, h, w) with batch statistics.
template <typename T>
Var<T> batch_norm(Var<T> x, Var<T> gamma, Var<T> beta, T eps = T(1e-5));

template <typename T> Var<T> avg_pool2d(Var<T> x, int k);
template <typename T> Var<T> max_pool2d(Var<T> x, int k);

/// Depth-to-space: (N,C,H,W) -> (N,C/r^2,rH,rW),
/// out[n][c][h*r+i][w*r+j] = in[n][c*r*r+i*r+j][h][w].
template <typename T> Var<T> pixel_shuffle(Var<T> x, int r);
template <typename T> Var<T> pixel_unshuffle(Var<T> x, int r);

/// Bilinear resize (half-pixel centres) of the spatial axes.
template <typename T> Var<T> resize_bilinear(Var<T> x, int out_h, int out_w);

// ---- style modulation ------------------------------------------------------

/// w (Cout,Cin,kh,kw), s (1,Cin,1,1). Returns s_i * w, optionally divided per
/// output channel by sqrt(sum over (i,h,w) of the modulated weights squared + eps).
template <typename T>
Var<T> modulate_weights(Var<T> w, Var<T> s, T eps, bool demodulate);

}  // namespace rawformer::nn
