#pragma once

#include <memory>

#include "gad/common.hpp"
#include "gad/rng.hpp"

namespace gad {

struct TensorData {
  Shape shape;
  Arr v;  // flat, row-major
  bool requires_grad = false;
};

// Dense 64-bit tensor handle with shared flat storage. Values are treated as
// immutable once the tensor has been consumed by an op; the optimizer and the
// gradient checker mutate leaves only between forward passes.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    Tensor t;
    t.d_ = std::make_shared<TensorData>();
    t.d_->shape = std::move(shape);
    t.d_->v = Arr::Zero(shape_size(t.d_->shape));
    t.d_->requires_grad = requires_grad;
    return t;
  }

  static Tensor full(Shape shape, double value, bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    t.d_->v.setConstant(value);
    return t;
  }

  static Tensor from_flat(Shape shape, Arr values, bool requires_grad = false) {
    if (values.size() != shape_size(shape))
      throw ShapeError(str("tensor data length ", values.size(),
                           " does not match shape ", shape_str(shape)));
    Tensor t;
    t.d_ = std::make_shared<TensorData>();
    t.d_->shape = std::move(shape);
    t.d_->v = std::move(values);
    t.d_->requires_grad = requires_grad;
    return t;
  }

  static Tensor from_rows(const std::vector<std::vector<double>>& rows,
                          bool requires_grad = false) {
    const Index r = static_cast<Index>(rows.size());
    const Index c = r ? static_cast<Index>(rows[0].size()) : 0;
    Tensor t = zeros({r, c}, requires_grad);
    for (Index i = 0; i < r; ++i) {
      if (static_cast<Index>(rows[i].size()) != c)
        throw ShapeError("ragged row list cannot form a tensor");
      for (Index j = 0; j < c; ++j) t.d_->v[i * c + j] = rows[i][j];
    }
    return t;
  }

  static Tensor uniform(Shape shape, double lo, double hi, Rng& rng,
                        bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (Index i = 0; i < t.size(); ++i) t.d_->v[i] = rng.uniform(lo, hi);
    return t;
  }

  static Tensor randn(Shape shape, Rng& rng, double sd = 1.0,
                      bool requires_grad = false) {
    Tensor t = zeros(std::move(shape), requires_grad);
    for (Index i = 0; i < t.size(); ++i) t.d_->v[i] = rng.normal(0.0, sd);
    return t;
  }

  bool valid() const { return static_cast<bool>(d_); }
  const Shape& shape() const { return d_->shape; }
  Index rank() const { return static_cast<Index>(d_->shape.size()); }
  Index dim(Index i) const { return d_->shape[static_cast<size_t>(i)]; }
  Index size() const { return d_->v.size(); }

  // Collapsed 2-D view: leading dims fold into rows, last dim is cols.
  // Rank-1 tensors view as a single row.
  Index rows() const {
    if (rank() <= 1) return 1;
    Index r = 1;
    for (size_t i = 0; i + 1 < d_->shape.size(); ++i) r *= d_->shape[i];
    return r;
  }
  Index cols() const { return rank() == 0 ? 0 : d_->shape.back(); }

  Arr& values() { return d_->v; }
  const Arr& values() const { return d_->v; }
  double* data() { return d_->v.data(); }
  const double* data() const { return d_->v.data(); }

  MatMap mat() { return MatMap(d_->v.data(), rows(), cols()); }
  ConstMatMap mat() const { return ConstMatMap(d_->v.data(), rows(), cols()); }

  double scalar_value() const {
    if (size() != 1)
      throw ShapeError(str("expected scalar tensor, got ", shape_str(shape())));
    return d_->v[0];
  }

  double& at(Index r, Index c) { return d_->v[r * cols() + c]; }
  double at(Index r, Index c) const { return d_->v[r * cols() + c]; }

  bool requires_grad() const { return d_->requires_grad; }
  void set_requires_grad(bool b) { d_->requires_grad = b; }

  // Stable identity for gradient bookkeeping.
  const TensorData* id() const { return d_.get(); }

  Tensor clone() const {
    if (!d_) return {};
    return from_flat(d_->shape, d_->v, d_->requires_grad);
  }

  bool all_finite() const { return d_->v.isFinite().all(); }

 private:
  std::shared_ptr<TensorData> d_;
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(str(op, ": operand shapes differ: ", shape_str(a.shape()),
                         " vs ", shape_str(b.shape())));
}

}  // namespace gad
