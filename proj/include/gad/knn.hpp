#pragma once

#include "gad/ops.hpp"

namespace gad {

// Per-point neighbor table. Row i lists the k nearest points to point i,
// sorted by ascending (distance, index); ties always break toward the lower
// index so every construction path agrees bit-for-bit.
struct KnnGraph {
  enum class Domain { spatial, feature };
  IndexMat indices;  // N x K
  int k = 0;
  Domain domain = Domain::spatial;

  Index n() const { return indices.rows(); }
};

// Shared squared-distance kernel. Brute force and the kd-tree must call this
// exact function so their distance bits, and therefore their tie decisions,
// are identical.
inline double sq_dist(const double* a, const double* b, Index d) {
  double s = 0.0;
  for (Index i = 0; i < d; ++i) {
    const double diff = a[i] - b[i];
    s += diff * diff;
  }
  return s;
}

// Exact KNN by full scan, any dimension. include_self admits point i into its
// own candidate list (debug aid). When margin is given, receives the smallest
// gap between the k-th and (k+1)-th candidate distance over all rows.
KnnGraph knn_brute(const Tensor& points, int k, bool include_self = false,
                   double* margin = nullptr);

// Exact KNN over 3-D coordinates via a median-split kd-tree (leaf size 16,
// full backtracking). Result is identical to knn_brute, index for index.
KnnGraph knn_spatial(const Tensor& points, int k, bool include_self = false);

// Exact KNN in feature space; the dimension is too high for a kd-tree to pay
// off, so this is a full scan. Rebuilt from the current features on every
// forward pass.
KnnGraph knn_feature(const Tensor& features, int k, bool include_self = false,
                     double* margin = nullptr);

// out[i][j] = values[graph.indices[i][j]]; backward scatter-adds into the
// source rows.
Tensor gather_rows(const Ctx& ctx, const Tensor& values, const KnnGraph& graph);

}  // namespace gad
