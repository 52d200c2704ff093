#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <vector>

#include "gad/grad_check.hpp"
#include "gad/knn.hpp"

using namespace gad;

namespace {

// Independent oracle: score every pair with a scalar loop, sort everything.
IndexMat knn_full_sort_oracle(const Tensor& pts, int k, bool include_self) {
  const Index n = pts.dim(0), d = pts.dim(1);
  IndexMat out(n, k);
  for (Index i = 0; i < n; ++i) {
    std::vector<std::pair<double, int32_t>> all;
    for (Index j = 0; j < n; ++j) {
      if (j == i && !include_self) continue;
      double s = 0.0;
      for (Index a = 0; a < d; ++a) {
        const double diff = pts.at(i, a) - pts.at(j, a);
        s += diff * diff;
      }
      all.emplace_back(s, static_cast<int32_t>(j));
    }
    std::sort(all.begin(), all.end());
    for (int j = 0; j < k; ++j) out(i, j) = all[static_cast<size_t>(j)].second;
  }
  return out;
}

Tensor random_cloud(Index n, Index d, Rng& rng, double lo = -1, double hi = 1) {
  return Tensor::uniform({n, d}, lo, hi, rng);
}

}  // namespace

TEST_CASE("brute knn on collinear points") {
  Tensor pts = Tensor::from_rows({{0, 0, 0}, {1, 0, 0}, {3, 0, 0}});
  KnnGraph g = knn_brute(pts, 1);
  CHECK(g.indices(0, 0) == 1);
  CHECK(g.indices(1, 0) == 0);
  CHECK(g.indices(2, 0) == 1);
}

TEST_CASE("brute knn duplicate coordinates pick each other") {
  Tensor pts = Tensor::from_rows({{1, 1, 1}, {1, 1, 1}, {5, 5, 5}});
  KnnGraph g = knn_brute(pts, 1);
  CHECK(g.indices(0, 0) == 1);
  CHECK(g.indices(1, 0) == 0);
  CHECK(g.indices(2, 0) == 0);  // equidistant duplicates, lowest index wins
}

TEST_CASE("brute knn rejects k >= n") {
  Tensor pts = Tensor::from_rows({{0, 0, 0}, {1, 0, 0}});
  CHECK_THROWS_WITH_AS(knn_brute(pts, 2), doctest::Contains("insufficient"),
                       DataError);
  CHECK_THROWS_AS(knn_brute(pts, 0), ConfigError);
}

TEST_CASE("brute knn matches the full-sort oracle") {
  Rng rng(101);
  Tensor pts = random_cloud(64, 3, rng);
  KnnGraph g = knn_brute(pts, 5);
  IndexMat expect = knn_full_sort_oracle(pts, 5, false);
  CHECK((g.indices == expect));
}

TEST_CASE("kd-tree equals brute force on random clouds") {
  Rng rng(103);
  Tensor pts = random_cloud(1000, 3, rng);
  KnnGraph brute = knn_brute(pts, 16);
  KnnGraph kd = knn_spatial(pts, 16);
  CHECK((kd.indices == brute.indices));
}

TEST_CASE("kd-tree equals brute force with heavy ties (lattice)") {
  // 4x4x4 integer grid: masses of exactly equal distances
  std::vector<std::vector<double>> rows;
  for (int x = 0; x < 4; ++x)
    for (int y = 0; y < 4; ++y)
      for (int z = 0; z < 4; ++z)
        rows.push_back({double(x), double(y), double(z)});
  Tensor pts = Tensor::from_rows(rows);
  for (int k : {1, 6, 12}) {
    KnnGraph brute = knn_brute(pts, k);
    KnnGraph kd = knn_spatial(pts, k);
    CHECK((kd.indices == brute.indices));
  }
  // interior point: all six axis neighbors at distance 1 come first
  KnnGraph g = knn_spatial(pts, 6);
  const Index center = 1 * 16 + 1 * 4 + 1;
  for (int j = 0; j < 6; ++j) {
    const Index nb = g.indices(center, j);
    double d2 = 0;
    for (int a = 0; a < 3; ++a) {
      const double diff = pts.at(center, a) - pts.at(nb, a);
      d2 += diff * diff;
    }
    CHECK(d2 == 1.0);
  }
}

TEST_CASE("outlier's neighbors are all cluster points") {
  Rng rng(105);
  std::vector<std::vector<double>> rows;
  for (int i = 0; i < 20; ++i)
    rows.push_back({rng.uniform(-0.1, 0.1), rng.uniform(-0.1, 0.1),
                    rng.uniform(-0.1, 0.1)});
  rows.push_back({50, 50, 50});
  Tensor pts = Tensor::from_rows(rows);
  KnnGraph g = knn_spatial(pts, 5);
  for (int j = 0; j < 5; ++j) CHECK(g.indices(20, j) < 20);
}

TEST_CASE("feature knn over coordinates equals the spatial graph") {
  Rng rng(107);
  Tensor pts = random_cloud(50, 3, rng);
  KnnGraph spatial = knn_spatial(pts, 7);
  KnnGraph feature = knn_feature(pts, 7);
  CHECK((feature.indices == spatial.indices));
  CHECK(feature.domain == KnnGraph::Domain::feature);
}

TEST_CASE("feature knn with one-hot rows ties to the lowest index") {
  Tensor f = Tensor::from_rows({{1, 0, 0, 0}, {0, 1, 0, 0}, {0, 0, 1, 0}});
  KnnGraph g = knn_feature(f, 1);
  CHECK(g.indices(0, 0) == 1);
  CHECK(g.indices(1, 0) == 0);
  CHECK(g.indices(2, 0) == 0);
}

TEST_CASE("feature knn matches the full-sort oracle in high dimension") {
  Rng rng(109);
  Tensor f = random_cloud(128, 64, rng);
  KnnGraph g = knn_feature(f, 9);
  IndexMat expect = knn_full_sort_oracle(f, 9, false);
  CHECK((g.indices == expect));
}

TEST_CASE("graph rows are sorted, self-free and duplicate-free") {
  Rng rng(111);
  Tensor pts = random_cloud(80, 3, rng);
  KnnGraph g = knn_spatial(pts, 10);
  for (Index i = 0; i < 80; ++i) {
    double prev = -1.0;
    std::vector<int32_t> seen;
    for (int j = 0; j < 10; ++j) {
      const int32_t nb = g.indices(i, j);
      CHECK(nb != i);
      CHECK(nb >= 0);
      CHECK(nb < 80);
      CHECK(std::count(seen.begin(), seen.end(), nb) == 0);
      seen.push_back(nb);
      double d2 = 0;
      for (int a = 0; a < 3; ++a) {
        const double diff = pts.at(i, a) - pts.at(nb, a);
        d2 += diff * diff;
      }
      CHECK(d2 >= prev);
      prev = d2;
    }
  }
}

TEST_CASE("graphs are permutation-equivariant in generic position") {
  Rng rng(113);
  const Index n = 40;
  Tensor pts = random_cloud(n, 3, rng);
  const int k = 6;
  KnnGraph g = knn_spatial(pts, k);

  // reversal permutation: new[p[i]] = old[i]
  std::vector<Index> perm(n);
  for (Index i = 0; i < n; ++i) perm[i] = n - 1 - i;
  Tensor shuffled = Tensor::zeros({n, 3});
  for (Index i = 0; i < n; ++i)
    for (int a = 0; a < 3; ++a) shuffled.at(perm[i], a) = pts.at(i, a);
  KnnGraph g2 = knn_spatial(shuffled, k);
  for (Index i = 0; i < n; ++i)
    for (int j = 0; j < k; ++j)
      CHECK(g2.indices(perm[i], j) == perm[g.indices(i, j)]);
}

TEST_CASE("positive scaling leaves the spatial graph unchanged") {
  Rng rng(115);
  Tensor pts = random_cloud(60, 3, rng);
  KnnGraph g = knn_spatial(pts, 8);
  Tensor scaled = Tensor::from_flat(pts.shape(), pts.values() * 3.5);
  KnnGraph g2 = knn_spatial(scaled, 8);
  CHECK((g.indices == g2.indices));
}

TEST_CASE("include_self puts the point first") {
  Rng rng(117);
  Tensor pts = random_cloud(10, 3, rng);
  KnnGraph g = knn_brute(pts, 3, true);
  for (Index i = 0; i < 10; ++i) CHECK(g.indices(i, 0) == i);
}

TEST_CASE("gather with a shift graph is a circular shift") {
  const Index n = 5;
  Tensor v = Tensor::from_rows({{0}, {10}, {20}, {30}, {40}});
  KnnGraph g;
  g.k = 1;
  g.indices.resize(n, 1);
  for (Index i = 0; i < n; ++i) g.indices(i, 0) = static_cast<int32_t>((i + 1) % n);
  Ctx ctx;
  Tensor out = gather_rows(ctx, v, g);
  CHECK(out.shape() == Shape{5, 1, 1});
  for (Index i = 0; i < n; ++i)
    CHECK(out.values()[i] == v.values()[(i + 1) % n]);
}

TEST_CASE("gather then subtract center gives direction vectors") {
  // 3-point cloud worked by hand
  Tensor pts = Tensor::from_rows({{0, 0, 0}, {1, 0, 0}, {0, 2, 0}});
  KnnGraph g = knn_brute(pts, 2);
  Ctx ctx;
  Tensor gathered = gather_rows(ctx, pts, g);
  // point 0: neighbors are 1 then 2; directions x_0 - x_j
  CHECK(g.indices(0, 0) == 1);
  CHECK(g.indices(0, 1) == 2);
  const double* row0 = gathered.data();
  CHECK(pts.at(0, 0) - row0[0] == -1.0);  // -(1,0,0)
  CHECK(pts.at(0, 1) - row0[4] == -2.0);  // -(0,2,0) y component
}

TEST_CASE("gather gradient counts in-degree") {
  Rng rng(119);
  Tensor v = Tensor::uniform({6, 2}, -1, 1, rng, true);
  Tensor pts = random_cloud(6, 3, rng);
  KnnGraph g = knn_spatial(pts, 2);
  Tape tape;
  Ctx ctx{&tape};
  Gradients grads = tape.backward(sum_all(ctx, gather_rows(ctx, v, g)));
  std::vector<int> indeg(6, 0);
  for (Index i = 0; i < 6; ++i)
    for (int j = 0; j < 2; ++j) indeg[static_cast<size_t>(g.indices(i, j))]++;
  Tensor gv = grads.grad(v);
  for (Index i = 0; i < 6; ++i)
    for (Index c = 0; c < 2; ++c)
      CHECK(gv.at(i, c) == doctest::Approx(indeg[static_cast<size_t>(i)]));

  auto build = [&](Ctx ctx) { return sum_all(ctx, gather_rows(ctx, v, g)); };
  CHECK(grad_check({{"v", v}}, build).max_rel_err < 1e-8);
}

TEST_CASE("gather rejects corrupt indices") {
  Tensor v = Tensor::zeros({3, 2});
  KnnGraph g;
  g.k = 1;
  g.indices.resize(3, 1);
  g.indices.setConstant(7);
  Ctx ctx;
  CHECK_THROWS_WITH_AS(gather_rows(ctx, v, g), doctest::Contains("corrupt"),
                       DataError);
}

TEST_CASE("brute margin reports the k-th gap") {
  Tensor pts = Tensor::from_rows({{0, 0, 0}, {1, 0, 0}, {2.5, 0, 0}, {9, 0, 0}});
  double margin = std::numeric_limits<double>::infinity();
  knn_brute(pts, 1, false, &margin);
  // tightest (d2_2 - d2_1) gap over rows: row 1 sees 1.0 then 2.25
  CHECK(margin == doctest::Approx(1.25));
}
