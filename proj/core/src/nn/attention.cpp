#include "rawformer/nn/attention.hpp"

#include <cmath>
#include <memory>

#include "linalg.hpp"

namespace rawformer::nn {
namespace {

template <typename T>
using HeadMap = Eigen::Map<const detail::ColMat<T>>;
template <typename T>
using HeadMapMut = Eigen::Map<detail::ColMat<T>>;

// Row-wise softmax with max subtraction, in place.
template <typename T>
void softmax_rows(detail::RowMat<T>& s) {
  for (Eigen::Index i = 0; i < s.rows(); ++i) {
    auto row = s.row(i);
    const T mx = row.maxCoeff();
    row = (row.array() - mx).exp();
    row /= row.sum();
  }
}

// dS = A .* (dA - rowsum(dA .* A))
template <typename T>
detail::RowMat<T> softmax_backward(const detail::RowMat<T>& a, const detail::RowMat<T>& da) {
  const Eigen::Matrix<T, Eigen::Dynamic, 1> dot = (da.array() * a.array()).rowwise().sum();
  return (a.array() * (da.array().colwise() - dot.array())).matrix();
}

void check_heads(const Shape& s, int heads, const char* op) {
  if (heads < 1 || s.c % heads != 0)
    throw DimensionError(std::string(op) + ": " + std::to_string(s.c) + " channels not divisible by " +
                         std::to_string(heads) + " heads");
}

template <typename T>
void observe(Tape<T>& tape, std::string_view kind, const detail::RowMat<T>& a) {
  if (tape.attention_observer)
    tape.attention_observer(kind, static_cast<int>(a.rows()), static_cast<int>(a.cols()), a.data());
}

}  // namespace

template <typename T>
Var<T> condensed_attention(Var<T> q, Var<T> k, Var<T> v, Var<T> c, int heads) {
  const Shape qs = q.value().shape();
  const Shape cs = c.value().shape();
  if (k.value().shape() != qs || v.value().shape() != qs)
    throw DimensionError("condensed_attention: q " + to_string(qs) + ", k " + to_string(k.value().shape()) +
                         ", v " + to_string(v.value().shape()) + " must match");
  if (cs.n != qs.n || cs.c != qs.c)
    throw DimensionError("condensed_attention: condensed tokens " + to_string(cs) + " incompatible with " +
                         to_string(qs));
  check_heads(qs, heads, "condensed_attention");
  const int d = qs.c / heads;
  const int N = static_cast<int>(qs.plane());
  const int M = static_cast<int>(cs.plane());
  const T scale = T(1) / std::sqrt(static_cast<T>(d));

  struct Saved {
    std::vector<detail::RowMat<T>> ah, au, z;
  };
  auto saved = std::make_shared<Saved>();
  const std::size_t slots = static_cast<std::size_t>(qs.n) * heads;
  saved->ah.resize(slots);
  saved->au.resize(slots);
  saved->z.resize(slots);

  Tensor<T> out(qs);
  const Tensor<T>& qv = q.value();
  const Tensor<T>& kv = k.value();
  const Tensor<T>& vv = v.value();
  const Tensor<T>& cv = c.value();
  Tape<T>& tape = q.tape();
  for (int b = 0; b < qs.n; ++b)
    for (int h = 0; h < heads; ++h) {
      const HeadMap<T> Q(qv.plane(b, h * d), N, d), K(kv.plane(b, h * d), N, d), V(vv.plane(b, h * d), N, d);
      const HeadMap<T> Qc(cv.plane(b, h * d), M, d);
      const std::size_t slot = static_cast<std::size_t>(b) * heads + h;
      detail::RowMat<T>& ah = saved->ah[slot];
      detail::RowMat<T>& au = saved->au[slot];
      ah.noalias() = scale * Qc * K.transpose();
      softmax_rows(ah);
      au.noalias() = scale * Q * Qc.transpose();
      softmax_rows(au);
      saved->z[slot].noalias() = ah * V;
      HeadMapMut<T> Y(out.plane(b, h * d), N, d);
      Y.noalias() = au * saved->z[slot];
      observe(tape, "cqa_h", ah);
      observe(tape, "cqa_u", au);
    }
  const std::uint64_t product = 2ull * qs.n * heads * static_cast<std::uint64_t>(N) * M * d;
  tape.count_flops("attention.cqa.score_h", product);
  tape.count_flops("attention.cqa.mix_h", product);
  tape.count_flops("attention.cqa.score_u", product);
  tape.count_flops("attention.cqa.mix_u", product);

  return tape.record(
      std::move(out), {q, k, v, c},
      [q, k, v, c, heads, d, N, M, scale, saved](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
        const Tensor<T>& qv = t.value(q);
        const Tensor<T>& kv = t.value(k);
        const Tensor<T>& vv = t.value(v);
        const Tensor<T>& cv = t.value(c);
        T* gq = t.requires_grad(q) ? t.grad_accumulator(q).data() : nullptr;
        T* gk = t.requires_grad(k) ? t.grad_accumulator(k).data() : nullptr;
        T* gv = t.requires_grad(v) ? t.grad_accumulator(v).data() : nullptr;
        T* gc = t.requires_grad(c) ? t.grad_accumulator(c).data() : nullptr;
        const int B = qv.shape().n;
        for (int b = 0; b < B; ++b)
          for (int h = 0; h < heads; ++h) {
            const std::size_t slot = static_cast<std::size_t>(b) * heads + h;
            const detail::RowMat<T>& ah = saved->ah[slot];
            const detail::RowMat<T>& au = saved->au[slot];
            const detail::RowMat<T>& z = saved->z[slot];
            const std::size_t off = qv.offset(b, h * d, 0, 0);
            const std::size_t coff = cv.offset(b, h * d, 0, 0);
            const HeadMap<T> Q(qv.data() + off, N, d), K(kv.data() + off, N, d), V(vv.data() + off, N, d);
            const HeadMap<T> Qc(cv.data() + coff, M, d);
            const HeadMap<T> dY(g.data() + off, N, d);

            const detail::RowMat<T> dAu = dY * z.transpose();
            const detail::RowMat<T> dZ = au.transpose() * dY;
            const detail::RowMat<T> dSu = softmax_backward(au, dAu);
            if (gq) HeadMapMut<T>(gq + off, N, d).noalias() += scale * dSu * Qc;
            if (gc) HeadMapMut<T>(gc + coff, M, d).noalias() += scale * dSu.transpose() * Q;
            if (gv) HeadMapMut<T>(gv + off, N, d).noalias() += ah.transpose() * dZ;
            if (gk || gc) {
              const detail::RowMat<T> dAh = dZ * V.transpose();
              const detail::RowMat<T> dSh = softmax_backward(ah, dAh);
              if (gc) HeadMapMut<T>(gc + coff, M, d).noalias() += scale * dSh * K;
              if (gk) HeadMapMut<T>(gk + off, N, d).noalias() += scale * dSh.transpose() * Qc;
            }
          }
      });
}

template <typename T>
Var<T> dense_attention(Var<T> q, Var<T> k, Var<T> v, int heads) {
  const Shape qs = q.value().shape();
  if (k.value().shape() != qs || v.value().shape() != qs)
    throw DimensionError("dense_attention: q " + to_string(qs) + ", k " + to_string(k.value().shape()) +
                         ", v " + to_string(v.value().shape()) + " must match");
  check_heads(qs, heads, "dense_attention");
  const int d = qs.c / heads;
  const int N = static_cast<int>(qs.plane());
  const T scale = T(1) / std::sqrt(static_cast<T>(d));

  auto attn = std::make_shared<std::vector<detail::RowMat<T>>>(static_cast<std::size_t>(qs.n) * heads);
  Tensor<T> out(qs);
  const Tensor<T>& qv = q.value();
  const Tensor<T>& kv = k.value();
  const Tensor<T>& vv = v.value();
  Tape<T>& tape = q.tape();
  for (int b = 0; b < qs.n; ++b)
    for (int h = 0; h < heads; ++h) {
      const HeadMap<T> Q(qv.plane(b, h * d), N, d), K(kv.plane(b, h * d), N, d), V(vv.plane(b, h * d), N, d);
      detail::RowMat<T>& a = (*attn)[static_cast<std::size_t>(b) * heads + h];
      a.noalias() = scale * Q * K.transpose();
      softmax_rows(a);
      HeadMapMut<T>(out.plane(b, h * d), N, d).noalias() = a * V;
      observe(tape, "dense", a);
    }
  const std::uint64_t product = 2ull * qs.n * heads * static_cast<std::uint64_t>(N) * N * d;
  tape.count_flops("attention.dense.score", product);
  tape.count_flops("attention.dense.mix", product);

  return tape.record(std::move(out), {q, k, v},
                     [q, k, v, heads, d, N, scale, attn](Tape<T>& t, const Tensor<T>&, const Tensor<T>& g) {
                       const Tensor<T>& qv = t.value(q);
                       const Tensor<T>& kv = t.value(k);
                       const Tensor<T>& vv = t.value(v);
                       T* gq = t.requires_grad(q) ? t.grad_accumulator(q).data() : nullptr;
                       T* gk = t.requires_grad(k) ? t.grad_accumulator(k).data() : nullptr;
                       T* gv = t.requires_grad(v) ? t.grad_accumulator(v).data() : nullptr;
                       for (int b = 0; b < qv.shape().n; ++b)
                         for (int h = 0; h < heads; ++h) {
                           const detail::RowMat<T>& a = (*attn)[static_cast<std::size_t>(b) * heads + h];
                           const std::size_t off = qv.offset(b, h * d, 0, 0);
                           const HeadMap<T> Q(qv.data() + off, N, d), K(kv.data() + off, N, d),
                               V(vv.data() + off, N, d), dY(g.data() + off, N, d);
                           if (gv) HeadMapMut<T>(gv + off, N, d).noalias() += a.transpose() * dY;
                           if (!gq && !gk) continue;
                           const detail::RowMat<T> dA = dY * V.transpose();
                           const detail::RowMat<T> dS = softmax_backward(a, dA);
                           if (gq) HeadMapMut<T>(gq + off, N, d).noalias() += scale * dS * K;
                           if (gk) HeadMapMut<T>(gk + off, N, d).noalias() += scale * dS.transpose() * Q;
                         }
                     });
}

template Var<float> condensed_attention(Var<float>, Var<float>, Var<float>, Var<float>, int);
template Var<double> condensed_attention(Var<double>, Var<double>, Var<double>, Var<double>, int);
template Var<float> dense_attention(Var<float>, Var<float>, Var<float>, int);
template Var<double> dense_attention(Var<double>, Var<double>, Var<double>, int);

}  // namespace rawformer::nn
