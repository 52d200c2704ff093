#include "gad/knn.hpp"

#include <algorithm>
#include <limits>
#include <numeric>
#include <utility>
#include <vector>

#include "gad/parallel.hpp"

namespace gad {

namespace {

using Cand = std::pair<double, int32_t>;  // (squared distance, index)

void check_knn_args(const Tensor& points, int k) {
  if (points.rank() != 2)
    throw ShapeError(str("knn: expected rank-2 points, got ",
                         shape_str(points.shape())));
  const Index n = points.dim(0);
  if (k < 1) throw ConfigError(str("knn: k must be positive, got ", k));
  if (k >= n)
    throw DataError(str("knn: insufficient points, k=", k, " with n=", n));
}

// Bounded candidate list, kept sorted ascending by (distance, index).
class BestK {
 public:
  explicit BestK(int k) : k_(static_cast<size_t>(k)) { c_.reserve(k_); }

  void push(double d2, int32_t idx) {
    const Cand c{d2, idx};
    if (c_.size() == k_ && c_.back() <= c) return;
    auto pos = std::upper_bound(c_.begin(), c_.end(), c);
    c_.insert(pos, c);
    if (c_.size() > k_) c_.pop_back();
  }

  bool full() const { return c_.size() == k_; }
  double worst_d2() const { return c_.back().first; }
  const std::vector<Cand>& sorted() const { return c_; }

 private:
  size_t k_;
  std::vector<Cand> c_;
};

// Median-split kd-tree over 3-D points; exact backtracking search.
class KdTree3 {
 public:
  static constexpr Index kLeafSize = 16;

  KdTree3(const double* pts, Index n) : pts_(pts) {
    perm_.resize(static_cast<size_t>(n));
    std::iota(perm_.begin(), perm_.end(), 0);
    nodes_.reserve(static_cast<size_t>(2 * n / kLeafSize + 2));
    root_ = build(0, n);
  }

  void query(const double* q, int32_t self, bool include_self, BestK& best) const {
    search(root_, q, self, include_self, best);
  }

 private:
  struct Node {
    Index begin = 0, end = 0;
    int axis = -1;
    double split = 0.0;
    Index left = -1, right = -1;
    bool leaf() const { return axis < 0; }
  };

  Index build(Index begin, Index end) {
    Node node;
    node.begin = begin;
    node.end = end;
    if (end - begin <= kLeafSize) {
      nodes_.push_back(node);
      return static_cast<Index>(nodes_.size()) - 1;
    }
    // widest extent picks the axis; ties go to the lower axis
    double lo[3], hi[3];
    for (int a = 0; a < 3; ++a) {
      lo[a] = std::numeric_limits<double>::infinity();
      hi[a] = -lo[a];
    }
    for (Index t = begin; t < end; ++t) {
      const double* p = pts_ + 3 * perm_[static_cast<size_t>(t)];
      for (int a = 0; a < 3; ++a) {
        lo[a] = std::min(lo[a], p[a]);
        hi[a] = std::max(hi[a], p[a]);
      }
    }
    int axis = 0;
    for (int a = 1; a < 3; ++a)
      if (hi[a] - lo[a] > hi[axis] - lo[axis]) axis = a;
    const Index mid = begin + (end - begin) / 2;
    std::nth_element(
        perm_.begin() + begin, perm_.begin() + mid, perm_.begin() + end,
        [&](int32_t a, int32_t b) {
          const double ca = pts_[3 * a + axis], cb = pts_[3 * b + axis];
          return ca < cb || (ca == cb && a < b);
        });
    node.axis = axis;
    node.split = pts_[3 * perm_[static_cast<size_t>(mid)] + axis];
    const Index me = static_cast<Index>(nodes_.size());
    nodes_.push_back(node);
    const Index l = build(begin, mid);
    const Index r = build(mid, end);
    nodes_[static_cast<size_t>(me)].left = l;
    nodes_[static_cast<size_t>(me)].right = r;
    return me;
  }

  void search(Index ni, const double* q, int32_t self, bool include_self,
              BestK& best) const {
    const Node& node = nodes_[static_cast<size_t>(ni)];
    if (node.leaf()) {
      for (Index t = node.begin; t < node.end; ++t) {
        const int32_t j = perm_[static_cast<size_t>(t)];
        if (j == self && !include_self) continue;
        best.push(sq_dist(q, pts_ + 3 * j, 3), j);
      }
      return;
    }
    const double diff = q[node.axis] - node.split;
    const Index near = diff < 0.0 ? node.left : node.right;
    const Index far = diff < 0.0 ? node.right : node.left;
    search(near, q, self, include_self, best);
    // the far side may still hold an equal-distance, lower-index candidate,
    // so only a strictly larger plane distance prunes
    if (!best.full() || diff * diff <= best.worst_d2())
      search(far, q, self, include_self, best);
  }

  const double* pts_;
  std::vector<int32_t> perm_;
  std::vector<Node> nodes_;
  Index root_ = 0;
};

}  // namespace

KnnGraph knn_brute(const Tensor& points, int k, bool include_self,
                   double* margin) {
  check_knn_args(points, k);
  const Index n = points.dim(0), d = points.dim(1);
  const double* pts = points.data();
  KnnGraph graph;
  graph.k = k;
  graph.indices.resize(n, k);
  const bool want_margin = margin != nullptr;
  Arr row_margin = want_margin
                       ? Arr::Constant(n, std::numeric_limits<double>::infinity())
                       : Arr();
  par::for_range(n, 64, [&](Index i0, Index i1) {
    std::vector<Cand> cand;
    cand.reserve(static_cast<size_t>(n));
    for (Index i = i0; i < i1; ++i) {
      cand.clear();
      const double* q = pts + i * d;
      for (Index j = 0; j < n; ++j) {
        if (j == i && !include_self) continue;
        cand.emplace_back(sq_dist(q, pts + j * d, d), static_cast<int32_t>(j));
      }
      const size_t take = std::min(cand.size(), static_cast<size_t>(k) + 1);
      std::partial_sort(cand.begin(), cand.begin() + take, cand.end());
      for (int j = 0; j < k; ++j)
        graph.indices(i, j) = cand[static_cast<size_t>(j)].second;
      if (want_margin && cand.size() > static_cast<size_t>(k))
        row_margin[i] = cand[static_cast<size_t>(k)].first -
                        cand[static_cast<size_t>(k - 1)].first;
    }
  });
  if (want_margin && n > 0) *margin = std::min(*margin, row_margin.minCoeff());
  return graph;
}

KnnGraph knn_spatial(const Tensor& points, int k, bool include_self) {
  check_knn_args(points, k);
  if (points.dim(1) != 3)
    throw ShapeError(str("knn_spatial: expected Nx3 coordinates, got ",
                         shape_str(points.shape())));
  const Index n = points.dim(0);
  const double* pts = points.data();
  KdTree3 tree(pts, n);
  KnnGraph graph;
  graph.k = k;
  graph.domain = KnnGraph::Domain::spatial;
  graph.indices.resize(n, k);
  par::for_range(n, 64, [&](Index i0, Index i1) {
    for (Index i = i0; i < i1; ++i) {
      BestK best(k);
      tree.query(pts + 3 * i, static_cast<int32_t>(i), include_self, best);
      for (int j = 0; j < k; ++j)
        graph.indices(i, j) = best.sorted()[static_cast<size_t>(j)].second;
    }
  });
  return graph;
}

KnnGraph knn_feature(const Tensor& features, int k, bool include_self,
                     double* margin) {
  KnnGraph graph = knn_brute(features, k, include_self, margin);
  graph.domain = KnnGraph::Domain::feature;
  return graph;
}

Tensor gather_rows(const Ctx& ctx, const Tensor& values, const KnnGraph& graph) {
  if (values.rank() != 2)
    throw ShapeError(str("gather_rows: expected rank-2 values, got ",
                         shape_str(values.shape())));
  const Index n = values.dim(0), c = values.dim(1);
  const Index gn = graph.indices.rows(), k = graph.indices.cols();
  Tensor out = Tensor::zeros({gn, k, c});
  const double* src = values.data();
  double* dst = out.data();
  for (Index i = 0; i < gn; ++i)
    for (Index j = 0; j < k; ++j) {
      const int32_t idx = graph.indices(i, j);
      if (idx < 0 || idx >= n)
        throw DataError(str("gather_rows: corrupt graph index ", idx,
                            " for ", n, " points"));
      std::copy(src + idx * c, src + (idx + 1) * c, dst + (i * k + j) * c);
    }
  if (ctx.tape) {
    IndexMat indices = graph.indices;
    ctx.tape->record(
        [values, out, indices = std::move(indices), c](Gradients& g) {
          const Arr* go = g.find(out);
          if (!go) return;
          Arr& gv = g.acc(values);
          const Index gn = indices.rows(), k = indices.cols();
          for (Index i = 0; i < gn; ++i)
            for (Index j = 0; j < k; ++j) {
              const Index idx = indices(i, j);
              gv.segment(idx * c, c) += go->segment((i * k + j) * c, c);
            }
        },
        {out.id()});
  }
  return out;
}

}  // namespace gad
