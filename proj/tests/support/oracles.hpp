#pragma once

// Loop-level double-precision reference implementations. They read the same
// named parameters as the library blocks but share no code with them.

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <vector>

#include "rawformer/nn/blocks.hpp"

namespace oracle {

using rawformer::nn::ParamSet;
using rawformer::nn::Shape;
using rawformer::nn::Tensor;
using T = Tensor<double>;

template <typename U>
T to_double(const Tensor<U>& t) {
  T out(t.shape());
  for (std::size_t i = 0; i < t.size(); ++i) out[i] = static_cast<double>(t[i]);
  return out;
}

inline Tensor<float> random_tensor(Shape s, std::mt19937_64& rng, double lo = -1, double hi = 1) {
  std::uniform_real_distribution<double> d(lo, hi);
  Tensor<float> t(s);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = static_cast<float>(d(rng));
  return t;
}

/// Cross-correlation with zero padding; w is (Cout, Cin/groups, kh, kw).
inline T conv2d(const T& x, const T& w, const T* bias, int stride, int pad, int groups) {
  const Shape xs = x.shape(), ws = w.shape();
  const int ho = (xs.h + 2 * pad - ws.h) / stride + 1, wo = (xs.w + 2 * pad - ws.w) / stride + 1;
  const int cin_g = xs.c / groups, cout_g = ws.n / groups;
  T y(Shape{xs.n, ws.n, ho, wo});
  for (int n = 0; n < xs.n; ++n)
    for (int o = 0; o < ws.n; ++o) {
      const int g = o / cout_g;
      for (int i = 0; i < ho; ++i)
        for (int j = 0; j < wo; ++j) {
          double acc = bias ? (*bias)[o] : 0.0;
          for (int c = 0; c < cin_g; ++c)
            for (int u = 0; u < ws.h; ++u)
              for (int v = 0; v < ws.w; ++v) {
                const int r = i * stride - pad + u, s = j * stride - pad + v;
                if (r < 0 || s < 0 || r >= xs.h || s >= xs.w) continue;
                acc += w.at(o, c, u, v) * x.at(n, g * cin_g + c, r, s);
              }
          y.at(n, o, i, j) = acc;
        }
    }
  return y;
}

inline T conv_named(const ParamSet<double>& p, const std::string& name, const T& x, int stride = 1, int pad = -1,
                    int groups = 1) {
  const T& w = p.at(name + ".weight").value;
  const T* b = p.contains(name + ".bias") ? &p.at(name + ".bias").value : nullptr;
  return conv2d(x, w, b, stride, pad < 0 ? w.shape().h / 2 : pad, groups);
}

inline T avg_pool(const T& x, int r) {
  const Shape s = x.shape();
  T y(Shape{s.n, s.c, s.h / r, s.w / r});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int i = 0; i < s.h / r; ++i)
        for (int j = 0; j < s.w / r; ++j) {
          double acc = 0;
          for (int u = 0; u < r; ++u)
            for (int v = 0; v < r; ++v) acc += x.at(n, c, i * r + u, j * r + v);
          y.at(n, c, i, j) = acc / (r * r);
        }
  return y;
}

inline T max_pool(const T& x, int r) {
  const Shape s = x.shape();
  T y(Shape{s.n, s.c, s.h / r, s.w / r});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int i = 0; i < s.h / r; ++i)
        for (int j = 0; j < s.w / r; ++j) {
          double m = -1e300;
          for (int u = 0; u < r; ++u)
            for (int v = 0; v < r; ++v) m = std::max(m, x.at(n, c, i * r + u, j * r + v));
          y.at(n, c, i, j) = m;
        }
  return y;
}

/// Space-to-depth: out[c*r*r + i*r + j][h][w] = in[c][h*r+i][w*r+j].
inline T unshuffle(const T& x, int r) {
  const Shape s = x.shape();
  T y(Shape{s.n, s.c * r * r, s.h / r, s.w / r});
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int h = 0; h < s.h; ++h)
        for (int w = 0; w < s.w; ++w) y.at(n, c * r * r + (h % r) * r + (w % r), h / r, w / r) = x.at(n, c, h, w);
  return y;
}

/// Per-head softmax(A B^T / sqrt(d)) C over channel-first token maps, where
/// a has Na tokens and b, c have Nb tokens.
inline T attend(const T& a, const T& b, const T& c, int heads) {
  const Shape as = a.shape(), bs = b.shape();
  const int na = as.h * as.w, nb = bs.h * bs.w, d = as.c / heads;
  T y(as);
  std::vector<double> row(nb);
  for (int n = 0; n < as.n; ++n)
    for (int h = 0; h < heads; ++h)
      for (int i = 0; i < na; ++i) {
        double mx = -1e300;
        for (int j = 0; j < nb; ++j) {
          double s = 0;
          for (int k = 0; k < d; ++k) s += a.plane(n, h * d + k)[i] * b.plane(n, h * d + k)[j];
          row[j] = s / std::sqrt(static_cast<double>(d));
          mx = std::max(mx, row[j]);
        }
        double z = 0;
        for (double& v : row) z += (v = std::exp(v - mx));
        for (int k = 0; k < d; ++k) {
          double acc = 0;
          for (int j = 0; j < nb; ++j) acc += row[j] / z * c.plane(n, h * d + k)[j];
          y.plane(n, h * d + k)[i] = acc;
        }
      }
  return y;
}

/// A_H = softmax(Qc K^T / sqrt d), A_U = softmax(Q Qc^T / sqrt d), y = A_U (A_H V).
inline T condensed_attention(const T& q, const T& k, const T& v, const T& qc, int heads) {
  const T z = attend(qc, k, v, heads);  // M tokens
  return attend(q, qc, z, heads);       // N tokens
}

/// The whole condensed-query attention block, without style modulation.
inline T cqa_block(const ParamSet<double>& p, const std::string& prefix, const T& x,
                   const rawformer::nn::CqaConfig& cfg) {
  using rawformer::nn::CompressTarget;
  using rawformer::nn::PoolKind;
  const T q = conv_named(p, prefix + ".q", x), k = conv_named(p, prefix + ".k", x), v = conv_named(p, prefix + ".v", x);
  const T& src = cfg.target == CompressTarget::query ? q : cfg.target == CompressTarget::key ? k : v;
  const std::string c = prefix + ".condense";
  T qc;
  switch (cfg.pool) {
    case PoolKind::avg_linear: qc = conv_named(p, c, avg_pool(src, cfg.r)); break;
    case PoolKind::max_linear: qc = conv_named(p, c, max_pool(src, cfg.r)); break;
    case PoolKind::strided_conv: qc = conv_named(p, c, src, cfg.r, 0); break;
    case PoolKind::strided_depthwise: qc = conv_named(p, c, src, cfg.r, 0, x.shape().c); break;
    case PoolKind::patch_merge: qc = conv_named(p, c, unshuffle(src, cfg.r)); break;
  }
  return conv_named(p, prefix + ".out", condensed_attention(q, k, v, qc, cfg.heads));
}

inline T layer_norm(const T& x, const T& gamma, const T& beta, double eps = 1e-6) {
  const Shape s = x.shape();
  T y(s);
  for (int n = 0; n < s.n; ++n)
    for (int h = 0; h < s.h; ++h)
      for (int w = 0; w < s.w; ++w) {
        double mu = 0, var = 0;
        for (int c = 0; c < s.c; ++c) mu += x.at(n, c, h, w);
        mu /= s.c;
        for (int c = 0; c < s.c; ++c) var += (x.at(n, c, h, w) - mu) * (x.at(n, c, h, w) - mu);
        var /= s.c;
        for (int c = 0; c < s.c; ++c)
          y.at(n, c, h, w) = (x.at(n, c, h, w) - mu) / std::sqrt(var + eps) * gamma[c] + beta[c];
      }
  return y;
}

/// x + fuse([lrelu(dw3(pw1(LN x))), lrelu(dw5(pw2(LN x)))]).
inline T spfn_block(const ParamSet<double>& p, const std::string& prefix, const T& x, double slope = 0.2) {
  const T a = layer_norm(x, p.at(prefix + ".norm.weight").value, p.at(prefix + ".norm.bias").value);
  T h1 = conv_named(p, prefix + ".pw1", a), h2 = conv_named(p, prefix + ".pw2", a);
  const int hidden = h1.shape().c;
  h1 = conv_named(p, prefix + ".dw3", h1, 1, 1, hidden);
  h2 = conv_named(p, prefix + ".dw5", h2, 1, 2, hidden);
  const Shape hs = h1.shape();
  T cat(Shape{hs.n, 2 * hidden, hs.h, hs.w});
  for (int n = 0; n < hs.n; ++n)
    for (int c = 0; c < hidden; ++c)
      for (int i = 0; i < hs.h * hs.w; ++i) {
        const double u = h1.plane(n, c)[i], v = h2.plane(n, c)[i];
        cat.plane(n, c)[i] = u > 0 ? u : slope * u;
        cat.plane(n, hidden + c)[i] = v > 0 ? v : slope * v;
      }
  T y = conv_named(p, prefix + ".fuse", cat);
  for (std::size_t i = 0; i < y.size(); ++i) y[i] += x[i];
  return y;
}

/// Mean SSIM with an 11-tap Gaussian window (sigma 1.5), valid filtering,
/// C1 = 0.01^2, C2 = 0.03^2, averaged over channels and positions.
inline double ssim(const T& x, const T& y) {
  double g[11], z = 0;
  for (int i = 0; i < 11; ++i) z += (g[i] = std::exp(-(i - 5) * (i - 5) / (2 * 1.5 * 1.5)));
  for (double& v : g) v /= z;
  const Shape s = x.shape();
  const double c1 = 1e-4, c2 = 9e-4;
  double total = 0;
  long count = 0;
  for (int n = 0; n < s.n; ++n)
    for (int c = 0; c < s.c; ++c)
      for (int i = 0; i + 11 <= s.h; ++i)
        for (int j = 0; j + 11 <= s.w; ++j) {
          double mx = 0, my = 0, xx = 0, yy = 0, xy = 0;
          for (int u = 0; u < 11; ++u)
            for (int v = 0; v < 11; ++v) {
              const double w = g[u] * g[v], a = x.at(n, c, i + u, j + v), b = y.at(n, c, i + u, j + v);
              mx += w * a;
              my += w * b;
              xx += w * a * a;
              yy += w * b * b;
              xy += w * a * b;
            }
          const double vx = xx - mx * mx, vy = yy - my * my, cov = xy - mx * my;
          total += (2 * mx * my + c1) * (2 * cov + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
          ++count;
        }
  return total / count;
}

inline double max_abs_diff(const T& a, const T& b) {
  double m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

}  // namespace oracle
