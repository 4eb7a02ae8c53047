#pragma once

#include "rawformer/nn/tape.hpp"

namespace rawformer::nn {

/// Multi-head condensed attention over channel-first token maps.
///
/// q, k, v are (B, C, H, W) projections of the same map (N = H*W tokens) and
/// c is the condensed token set (B, C, h, w) with M = h*w tokens. Per head of
/// width d = C / heads:
///   A_H = softmax(c k^T / sqrt(d))   (M x N)
///   A_U = softmax(q c^T / sqrt(d))   (N x M)
///   y   = A_U (A_H v)
/// Output has the shape of q.
template <typename T>
Var<T> condensed_attention(Var<T> q, Var<T> k, Var<T> v, Var<T> c, int heads);

/// Plain softmax(q k^T / sqrt(d)) v over all N tokens.
template <typename T>
Var<T> dense_attention(Var<T> q, Var<T> k, Var<T> v, int heads);

}  // namespace rawformer::nn
