#pragma once

#include <functional>
#include <unordered_map>
#include <vector>

#include "gad/tensor.hpp"

namespace gad {

// Gradient accumulator keyed by tensor identity. Gradients are flat arrays
// shaped like their tensors; accumulation is additive across fan-out.
class Gradients {
 public:
  Arr& acc(const Tensor& t) {
    auto it = g_.find(t.id());
    if (it == g_.end())
      it = g_.emplace(t.id(), Arr::Zero(t.size())).first;
    return it->second;
  }

  template <typename Expr>
  void add(const Tensor& t, const Expr& e) {
    acc(t) += e;
  }

  const Arr* find(const Tensor& t) const {
    auto it = g_.find(t.id());
    return it == g_.end() ? nullptr : &it->second;
  }

  bool has(const Tensor& t) const { return g_.count(t.id()) != 0; }

  // Gradient shaped like t; zeros if nothing reached it.
  Tensor grad(const Tensor& t) const {
    const Arr* a = find(t);
    return a ? Tensor::from_flat(t.shape(), *a) : Tensor::zeros(t.shape());
  }

  void drop(const TensorData* id) { g_.erase(id); }
  size_t entry_count() const { return g_.size(); }

 private:
  std::unordered_map<const TensorData*, Arr> g_;
};

// Reverse-mode tape. Ops append one node each during the forward pass; the
// recording order is a topological order by construction, so backward is a
// single reverse sweep. A tape serves one forward pass and is then discarded.
class Tape {
 public:
  using BackwardFn = std::function<void(Gradients&)>;

  void record(BackwardFn fn, std::vector<const TensorData*> outputs) {
    nodes_.push_back({std::move(fn), std::move(outputs)});
  }

  // Seeds d(loss) = 1 and sweeps in reverse. Gradients of interior op outputs
  // are released as soon as their producing node has consumed them unless
  // retain_interior is set (leaves are always kept).
  Gradients backward(const Tensor& loss, bool retain_interior = false) const {
    if (loss.size() != 1)
      throw ShapeError(str("backward seed must be scalar, got ",
                           shape_str(loss.shape())));
    Gradients grads;
    grads.acc(loss).setConstant(1.0);
    for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
      it->fn(grads);
      if (!retain_interior)
        for (const TensorData* out : it->outputs) grads.drop(out);
    }
    return grads;
  }

  size_t node_count() const { return nodes_.size(); }
  void clear() { nodes_.clear(); }

 private:
  struct Node {
    BackwardFn fn;
    std::vector<const TensorData*> outputs;
  };
  std::vector<Node> nodes_;
};

// Execution context threaded through every op.
//   tape      null → forward only, nothing recorded
//   training  selects batch-vs-running statistics and enables dropout
//   rng       required only by dropout in training mode
//   margin    when set, ops accumulate the smallest distance to a
//             non-differentiable point (relu kink, max tie, knn tie) so the
//             gradient checker can reject unsuitable inputs
struct Ctx {
  Tape* tape = nullptr;
  bool training = false;
  Rng* rng = nullptr;
  double* margin = nullptr;

  void note_margin(double m) const {
    if (margin && m < *margin) *margin = m;
  }
};

}  // namespace gad
