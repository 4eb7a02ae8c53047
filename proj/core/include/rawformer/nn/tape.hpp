#pragma once

#include <cstdint>
#include <deque>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <unordered_map>
#include <utility>
#include <vector>

#include "rawformer/errors.hpp"
#include "rawformer/nn/tensor.hpp"

namespace rawformer::nn {

template <typename T>
class Tape;

/// Learnable tensor with its accumulated gradient.
template <typename T>
struct Parameter {
  Tensor<T> value;
  Tensor<T> grad;
};

/// Handle to a node recorded on a Tape. Cheap to copy; only valid while the
/// tape that produced it is alive.
template <typename T>
class Var {
 public:
  Var() = default;

  bool valid() const noexcept { return tape_ != nullptr; }
  Tape<T>& tape() const { return *tape_; }
  int id() const noexcept { return id_; }
  const Tensor<T>& value() const;
  const Shape& shape() const { return value().shape(); }

 private:
  friend class Tape<T>;
  Var(Tape<T>* tape, int id) : tape_(tape), id_(id) {}

  Tape<T>* tape_ = nullptr;
  int id_ = -1;
};

/// Analytic multiply-add count of one recorded operation.
struct FlopEntry {
  std::string op;
  std::string name;
  std::uint64_t flops = 0;
};

/// Opt-in collector used by the FLOP-counting mode.
class FlopLedger {
 public:
  void add(std::string op, std::string name, std::uint64_t flops) {
    entries_.push_back({std::move(op), std::move(name), flops});
  }
  const std::vector<FlopEntry>& entries() const noexcept { return entries_; }
  std::uint64_t total(std::string_view op_prefix = {}) const {
    std::uint64_t sum = 0;
    for (const auto& e : entries_)
      if (e.op.starts_with(op_prefix)) sum += e.flops;
    return sum;
  }
  /// CSV with header `op,name,flops`.
  std::string csv() const {
    std::string out = "op,name,flops\n";
    for (const auto& e : entries_)
      out += e.op + "," + e.name + "," + std::to_string(e.flops) + "\n";
    return out;
  }
  void clear() { entries_.clear(); }

 private:
  std::vector<FlopEntry> entries_;
};

/// Receives every softmax attention map (row-major rows x cols) produced on a tape.
template <typename T>
using AttentionObserver =
    std::function<void(std::string_view kind, int rows, int cols, const T* data)>;

/// Reverse-mode autodiff recorder. Nodes are appended in evaluation order and
/// `backward` walks them in reverse. Node storage is a deque so references
/// to recorded values stay valid while new nodes are appended.
template <typename T>
class Tape {
 public:
  /// Receives the node's output value and gradient; accumulates into parents.
  using Backward =
      std::function<void(Tape&, const Tensor<T>& out, const Tensor<T>& grad_out)>;

  Tape() = default;
  Tape(const Tape&) = delete;
  Tape& operator=(const Tape&) = delete;

  Var<T> constant(Tensor<T> value) { return push(std::move(value), false); }
  Var<T> variable(Tensor<T> value) { return push(std::move(value), true); }

  /// Binds a parameter by reference. Binding the same parameter twice returns
  /// the same node. With `trainable == false` the value enters as a constant.
  Var<T> parameter(Parameter<T>& p, bool trainable = true) {
    if (auto it = bound_.find(&p); it != bound_.end()) return Var<T>(this, it->second);
    Node node;
    node.external = &p.value;
    node.requires_grad = trainable;
    node.param = trainable ? &p : nullptr;
    nodes_.push_back(std::move(node));
    const int id = static_cast<int>(nodes_.size()) - 1;
    bound_.emplace(&p, id);
    return Var<T>(this, id);
  }

  /// Records an op output. The backward closure is kept only if some parent
  /// requires a gradient.
  Var<T> record(Tensor<T> value, std::initializer_list<Var<T>> parents, Backward fn) {
    return record(std::move(value), std::vector<Var<T>>(parents), std::move(fn));
  }
  Var<T> record(Tensor<T> value, const std::vector<Var<T>>& parents, Backward fn) {
    bool req = false;
    for (const auto& p : parents) req = req || (p.valid() && requires_grad(p));
    Var<T> v = push(std::move(value), req);
    if (req) nodes_[v.id_].backward = std::move(fn);
    return v;
  }

  const Tensor<T>& value(Var<T> v) const { return node(v).get(); }
  bool requires_grad(Var<T> v) const { return node(v).requires_grad; }
  bool has_grad(Var<T> v) const { return !node(v).grad.empty(); }

  /// Gradient of the last backward pass w.r.t. v (zeros when v was unreached).
  Tensor<T> grad(Var<T> v) const {
    const Node& n = node(v);
    if (n.grad.empty()) return Tensor<T>(n.get().shape());
    return n.grad;
  }

  /// Zero-initialised on first use; ops add their contribution in place.
  Tensor<T>& grad_accumulator(Var<T> v) {
    Node& n = node(v);
    if (n.grad.empty()) n.grad = Tensor<T>(n.get().shape());
    return n.grad;
  }

  /// Seeds d(root)/d(root) = 1; root must be a single element. A tape supports
  /// one backward pass: interior gradients are released as they are consumed,
  /// leaves (variables and parameters) keep theirs.
  void backward(Var<T> root) {
    const Shape& s = value(root).shape();
    if (s.numel() != 1)
      throw DimensionError("backward without seed needs a scalar root, got " + to_string(s));
    backward(root, Tensor<T>(s, T(1)));
  }

  void backward(Var<T> root, const Tensor<T>& seed) {
    if (seed.shape() != value(root).shape())
      throw DimensionError("backward seed shape " + to_string(seed.shape()) +
                           " does not match root " + to_string(value(root).shape()));
    if (!requires_grad(root)) return;
    Tensor<T>& g = grad_accumulator(root);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += seed[i];
    for (int id = root.id_; id >= 0; --id) {
      Node& n = nodes_[id];
      if (n.grad.empty()) continue;
      if (n.backward) {
        n.backward(*this, n.get(), n.grad);
        // Interior nodes are consumed: release saved state and the gradient.
        n.backward = nullptr;
        n.grad = Tensor<T>();
        continue;
      }
      if (n.param) {
        if (n.param->grad.empty()) n.param->grad = Tensor<T>(n.param->value.shape());
        T* dst = n.param->grad.data();
        const T* src = n.grad.data();
        for (std::size_t i = 0; i < n.grad.size(); ++i) dst[i] += src[i];
      }
    }
  }

  std::size_t size() const noexcept { return nodes_.size(); }

  // Optional instrumentation.
  FlopLedger* flop_ledger = nullptr;
  AttentionObserver<T> attention_observer;

  void push_scope(std::string name) { scopes_.push_back(std::move(name)); }
  void pop_scope() { scopes_.pop_back(); }
  std::string scope() const {
    std::string s;
    for (const auto& p : scopes_) s += (s.empty() ? "" : ".") + p;
    return s;
  }
  void count_flops(std::string op, std::uint64_t flops) {
    if (flop_ledger) flop_ledger->add(std::move(op), scope(), flops);
  }

 private:
  friend class Var<T>;

  struct Node {
    Tensor<T> value;
    const Tensor<T>* external = nullptr;
    Tensor<T> grad;
    Parameter<T>* param = nullptr;
    Backward backward;
    bool requires_grad = false;

    const Tensor<T>& get() const { return external ? *external : value; }
  };

  Var<T> push(Tensor<T> value, bool requires_grad) {
    Node node;
    node.value = std::move(value);
    node.requires_grad = requires_grad;
    nodes_.push_back(std::move(node));
    return Var<T>(this, static_cast<int>(nodes_.size()) - 1);
  }

  const Node& node(Var<T> v) const {
    check(v);
    return nodes_[v.id_];
  }
  Node& node(Var<T> v) {
    check(v);
    return nodes_[v.id_];
  }
  void check(Var<T> v) const {
    if (v.tape_ != this || v.id_ < 0 || v.id_ >= static_cast<int>(nodes_.size()))
      throw ContractError("variable does not belong to this tape");
  }

  std::deque<Node> nodes_;
  std::unordered_map<const Parameter<T>*, int> bound_;
  std::vector<std::string> scopes_;
};

template <typename T>
const Tensor<T>& Var<T>::value() const {
  return tape_->value(*this);
}

/// RAII scope label used by FLOP accounting.
template <typename T>
class ScopeGuard {
 public:
  ScopeGuard(Tape<T>& tape, std::string name) : tape_(tape) { tape_.push_scope(std::move(name)); }
  ~ScopeGuard() { tape_.pop_scope(); }
  ScopeGuard(const ScopeGuard&) = delete;
  ScopeGuard& operator=(const ScopeGuard&) = delete;

 private:
  Tape<T>& tape_;
};

/// Name-addressed parameter collection, iterated in lexicographic order.
template <typename T>
class ParamSet {
 public:
  Parameter<T>& add(const std::string& name, Tensor<T> init) {
    auto [it, inserted] = params_.try_emplace(name);
    if (!inserted) throw ModelError("duplicate parameter name '" + name + "'");
    it->second.value = std::move(init);
    return it->second;
  }

  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  Parameter<T>& at(const std::string& name) {
    auto it = params_.find(name);
    if (it == params_.end()) throw KeyError("unknown parameter '" + name + "'");
    return it->second;
  }
  const Parameter<T>& at(const std::string& name) const {
    auto it = params_.find(name);
    if (it == params_.end()) throw KeyError("unknown parameter '" + name + "'");
    return it->second;
  }

  Var<T> bind(Tape<T>& tape, const std::string& name) {
    return tape.parameter(at(name), !frozen);
  }

  std::size_t element_count() const {
    std::size_t n = 0;
    for (const auto& [_, p] : params_) n += p.value.size();
    return n;
  }
  std::size_t tensor_count() const noexcept { return params_.size(); }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(params_.size());
    for (const auto& [k, _] : params_) out.push_back(k);
    return out;
  }

  void zero_grad() {
    for (auto& [_, p] : params_) p.grad = Tensor<T>();
  }

  auto begin() { return params_.begin(); }
  auto end() { return params_.end(); }
  auto begin() const { return params_.begin(); }
  auto end() const { return params_.end(); }

  template <typename U>
  ParamSet<U> cast() const {
    ParamSet<U> out;
    for (const auto& [k, p] : params_) out.add(k, p.value.template cast<U>());
    out.frozen = frozen;
    return out;
  }

  /// When set, `bind` records parameters as constants (no gradient).
  bool frozen = false;

 private:
  std::map<std::string, Parameter<T>> params_;
};

}  // namespace rawformer::nn
