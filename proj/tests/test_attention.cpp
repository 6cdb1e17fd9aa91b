#include <cmath>

#include "doctest.h"
#include "fada/attention.hpp"

using namespace fada;

namespace {

// Independent oracle: literal ordered-pair enumeration of Eq-style
// within-cluster distances, including the zero diagonal.
double gap_oracle(const Matrix& pts, std::span<const std::size_t> assignment, std::size_t k) {
  double total = 0.0;
  for (std::size_t r = 0; r < k; ++r) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < assignment.size(); ++i)
      if (assignment[i] == r) members.push_back(i);
    if (members.empty()) continue;
    double s = 0.0;
    for (std::size_t a : members)
      for (std::size_t b : members) {
        double d2 = 0.0;
        for (std::size_t j = 0; j < pts.cols; ++j) {
          const double d = pts.at(a, j) - pts.at(b, j);
          d2 += d * d;
        }
        s += std::sqrt(d2);
      }
    total += s / (2.0 * static_cast<double>(members.size()));
  }
  return total;
}

double wcss_of(const Matrix& pts, const std::vector<int>& side) {
  // two-cluster WCSS for a binary split
  double total = 0.0;
  for (int c = 0; c < 2; ++c) {
    std::vector<std::size_t> members;
    for (std::size_t i = 0; i < pts.rows; ++i)
      if (side[i] == c) members.push_back(i);
    if (members.empty()) continue;
    std::vector<double> mean(pts.cols, 0.0);
    for (std::size_t m : members)
      for (std::size_t j = 0; j < pts.cols; ++j) mean[j] += pts.at(m, j);
    for (double& v : mean) v /= static_cast<double>(members.size());
    for (std::size_t m : members)
      for (std::size_t j = 0; j < pts.cols; ++j) {
        const double d = pts.at(m, j) - mean[j];
        total += d * d;
      }
  }
  return total;
}

}  // namespace

TEST_CASE("kmeans with k=1 returns the mean of the points") {
  Matrix pts(4, 2, {0, 0, 2, 0, 0, 2, 2, 2});
  RngStream rng(1);
  auto res = kmeans(pts, 1, rng);
  CHECK(res.centroids.at(0, 0) == doctest::Approx(1.0));
  CHECK(res.centroids.at(0, 1) == doctest::Approx(1.0));
}

TEST_CASE("kmeans recovers the optimal 2-partition of two separated pairs") {
  Matrix pts(4, 2, {0, 0, 0, 1, 10, 0, 10, 1});
  RngStream rng(2);
  // brute force over all nontrivial binary splits
  double best = 1e300;
  std::vector<int> best_side;
  for (int m = 1; m < 15; ++m) {
    std::vector<int> side(4);
    for (int i = 0; i < 4; ++i) side[i] = (m >> i) & 1;
    const double w = wcss_of(pts, side);
    if (w < best) {
      best = w;
      best_side = side;
    }
  }
  CHECK(best_side[0] == best_side[1]);
  CHECK(best_side[2] == best_side[3]);
  CHECK(best_side[0] != best_side[2]);

  auto res = kmeans_restarts(pts, 2, 3, rng);
  CHECK(res.wcss == doctest::Approx(best).epsilon(1e-12));
  CHECK(res.assignment[0] == res.assignment[1]);
  CHECK(res.assignment[2] == res.assignment[3]);
  CHECK(res.assignment[0] != res.assignment[2]);
}

TEST_CASE("kmeans with k=n isolates every point at zero WCSS") {
  Matrix pts(5, 1, {0, 1, 2, 3, 4});
  RngStream rng(3);
  auto res = kmeans(pts, 5, rng);
  CHECK(res.wcss == doctest::Approx(0.0));
  std::vector<bool> seen(5, false);
  for (std::size_t a : res.assignment) seen[a] = true;
  for (bool s : seen) CHECK(s);
}

TEST_CASE("kmeans rejects k larger than the point count") {
  Matrix pts(2, 1, {0, 1});
  RngStream rng(4);
  CHECK_THROWS_AS(kmeans(pts, 3, rng), std::invalid_argument);
}

TEST_CASE("kmeans WCSS is non-increasing across iterations") {
  RngStream data_rng(5);
  Matrix pts(60, 3);
  for (double& v : pts.data) v = data_rng.uniform(-1, 1);
  for (int rep = 0; rep < 5; ++rep) {
    RngStream rng(100 + rep);
    auto res = kmeans(pts, 4, rng);
    for (std::size_t i = 1; i < res.wcss_history.size(); ++i) {
      CHECK(res.wcss_history[i] <= res.wcss_history[i - 1] + 1e-12);
    }
  }
}

TEST_CASE("gap statistic hand-enumerated values") {
  SUBCASE("two 1-D points in one cluster give 0.5") {
    Matrix pts(2, 1, {0.0, 1.0});
    std::vector<std::size_t> a = {0, 0};
    CHECK(gap_statistic(pts, a, 1) == doctest::Approx(0.5).epsilon(1e-15));
  }
  SUBCASE("identical points give 0") {
    Matrix pts(4, 2, {3, 3, 3, 3, 3, 3, 3, 3});
    std::vector<std::size_t> a = {0, 0, 0, 0};
    CHECK(gap_statistic(pts, a, 1) == 0.0);
  }
  SUBCASE("two singleton clusters give 0") {
    Matrix pts(2, 2, {0, 0, 5, 5});
    std::vector<std::size_t> a = {0, 1};
    CHECK(gap_statistic(pts, a, 2) == 0.0);
  }
}

TEST_CASE("gap statistic matches the ordered-pair oracle on random instances") {
  RngStream rng(6);
  for (int inst = 0; inst < 25; ++inst) {
    const std::size_t n = 2 + rng.uniform_index(40);
    const std::size_t d = 1 + rng.uniform_index(4);
    const std::size_t k = 1 + rng.uniform_index(std::min<std::size_t>(n, 5));
    Matrix pts(n, d);
    for (double& v : pts.data) v = rng.uniform(-5, 5);
    std::vector<std::size_t> a(n);
    for (auto& x : a) x = rng.uniform_index(k);
    CHECK(gap_statistic(pts, a, k) == doctest::Approx(gap_oracle(pts, a, k)).epsilon(1e-12));
  }
}

TEST_CASE("gap statistic invariances") {
  RngStream rng(7);
  const std::size_t n = 24;
  Matrix pts(n, 2);
  for (double& v : pts.data) v = rng.uniform(-2, 2);
  std::vector<std::size_t> a(n);
  for (auto& x : a) x = rng.uniform_index(3);
  const double base = gap_statistic(pts, a, 3);

  SUBCASE("permuting points within clusters") {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = i;
    // swap pairs that share a cluster
    for (std::size_t i = 0; i + 1 < n; ++i)
      for (std::size_t j = i + 1; j < n; ++j)
        if (a[i] == a[j]) {
          std::swap(order[i], order[j]);
          break;
        }
    Matrix permuted(n, 2);
    std::vector<std::size_t> pa(n);
    for (std::size_t i = 0; i < n; ++i) {
      permuted.at(i, 0) = pts.at(order[i], 0);
      permuted.at(i, 1) = pts.at(order[i], 1);
      pa[i] = a[order[i]];
    }
    CHECK(gap_statistic(permuted, pa, 3) == doctest::Approx(base).epsilon(1e-9));
  }

  SUBCASE("global translation and rotation") {
    const double theta = 0.7, tx = 3.5, ty = -1.25;
    Matrix iso(n, 2);
    for (std::size_t i = 0; i < n; ++i) {
      const double x = pts.at(i, 0), y = pts.at(i, 1);
      iso.at(i, 0) = std::cos(theta) * x - std::sin(theta) * y + tx;
      iso.at(i, 1) = std::sin(theta) * x + std::cos(theta) * y + ty;
    }
    CHECK(gap_statistic(iso, a, 3) == doctest::Approx(base).epsilon(1e-9));
  }

  SUBCASE("scaling features by c scales the statistic by exactly c") {
    const double c = 2.75;
    Matrix scaled(n, 2);
    for (std::size_t i = 0; i < n * 2; ++i) scaled.data[i] = c * pts.data[i];
    CHECK(gap_statistic(scaled, a, 3) == doctest::Approx(c * base).epsilon(1e-12));
  }
}

TEST_CASE("update_mask behavior") {
  SUBCASE("first call with no previous gaps gives the uniform mask") {
    AttentionState st;
    st.floor = 0.0;
    st = update_mask(st, {1.0, 2.0, 3.0, 4.0});
    REQUIRE(st.mask.size() == 4);
    for (double m : st.mask) CHECK(m == doctest::Approx(0.25));
    CHECK(st.prev_gap.has_value());
  }
  SUBCASE("equal gains give the uniform mask") {
    AttentionState st;
    st.floor = 0.0;
    st.prev_gap = std::vector<double>{2.0, 2.0, 2.0};
    st = update_mask(st, {2.0, 2.0, 2.0});  // gains (0,0,0)
    for (double m : st.mask) CHECK(m == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  }
  SUBCASE("gains (ln 2, 0) with zero floor give (2/3, 1/3)") {
    AttentionState st;
    st.floor = 0.0;
    st.prev_gap = std::vector<double>{std::log(2.0), 0.0};
    st = update_mask(st, {0.0, 0.0});
    CHECK(st.mask[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-12));
    CHECK(st.mask[1] == doctest::Approx(1.0 / 3.0).epsilon(1e-12));
  }
  SUBCASE("softmax is monotone and shift-invariant") {
    RngStream rng(8);
    for (int t = 0; t < 50; ++t) {
      std::vector<double> gaps(5);
      for (double& g : gaps) g = rng.uniform(-2, 2);
      AttentionState st;
      st.floor = 0.0;
      st.prev_gap = std::vector<double>(5, 0.0);
      AttentionState r1 = update_mask(st, gaps);

      // argmax of gains (= -gaps here) equals argmax of the mask
      std::size_t gain_arg = 0, mask_arg = 0;
      for (std::size_t i = 1; i < 5; ++i) {
        if (r1.gains[i] > r1.gains[gain_arg]) gain_arg = i;
        if (r1.mask[i] > r1.mask[mask_arg]) mask_arg = i;
      }
      CHECK(gain_arg == mask_arg);

      // adding a constant to all gains leaves the mask unchanged
      AttentionState st2;
      st2.floor = 0.0;
      st2.prev_gap = std::vector<double>(5, 1.37);
      std::vector<double> shifted(5);
      for (std::size_t i = 0; i < 5; ++i) shifted[i] = gaps[i] + 1.37;
      AttentionState r2 = update_mask(st2, shifted);
      for (std::size_t i = 0; i < 5; ++i)
        CHECK(r2.mask[i] == doctest::Approx(r1.mask[i]).epsilon(1e-12));
    }
  }
  SUBCASE("floored masks stay above the floor and sum to one") {
    AttentionState st;
    st.floor = 0.05;
    st.prev_gap = std::vector<double>{10.0, 0.0, 0.0, 0.0};
    st = update_mask(st, {0.0, 0.0, 0.0, 0.0});  // huge gain for source 0
    double s = 0.0;
    for (double m : st.mask) {
      CHECK(m >= 0.05 - 1e-15);
      s += m;
    }
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    CHECK(st.mask[1] == doctest::Approx(0.05));
  }
  SUBCASE("uniform masks always sum to one across repeated updates") {
    RngStream rng(9);
    AttentionState st;
    st.floor = 1.0 / 40.0;
    for (int round = 0; round < 30; ++round) {
      std::vector<double> gaps(4);
      for (double& g : gaps) g = rng.uniform(0, 5);
      st = update_mask(st, gaps);
      double s = 0.0;
      for (double m : st.mask) s += m;
      CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
    }
  }
}
