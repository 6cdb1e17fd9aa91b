#include "fada/attention.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <stdexcept>

namespace fada {

namespace {

double sq_dist(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double d = a[i] - b[i];
    s += d * d;
  }
  return s;
}

}  // namespace

KMeansResult kmeans(const Matrix& points, std::size_t k, RngStream& rng, std::size_t max_iters) {
  const std::size_t n = points.rows, d = points.cols;
  if (k == 0 || k > n) {
    throw std::invalid_argument("kmeans: need 1 <= k <= point count, got k=" + std::to_string(k) +
                                " for " + std::to_string(n) + " points");
  }

  // init from k distinct random points
  KMeansResult res;
  res.centroids = Matrix(k, d);
  {
    std::vector<std::size_t> picked;
    while (picked.size() < k) {
      std::size_t cand = static_cast<std::size_t>(rng.uniform_index(n));
      if (std::find(picked.begin(), picked.end(), cand) == picked.end()) picked.push_back(cand);
    }
    for (std::size_t c = 0; c < k; ++c) {
      auto src = points.row(picked[c]);
      std::copy(src.begin(), src.end(), res.centroids.row(c).begin());
    }
  }

  res.assignment.assign(n, 0);
  std::vector<std::size_t> counts(k);
  for (std::size_t iter = 0; iter < max_iters; ++iter) {
    bool changed = iter == 0;
    double wcss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double best_d = std::numeric_limits<double>::infinity();
      for (std::size_t c = 0; c < k; ++c) {
        const double dist = sq_dist(points.row(i), res.centroids.row(c));
        if (dist < best_d) {
          best_d = dist;
          best = c;
        }
      }
      if (res.assignment[i] != best) changed = true;
      res.assignment[i] = best;
      wcss += best_d;
    }
    res.iterations = iter + 1;
    res.wcss_history.push_back(wcss);
    if (!changed && iter > 0) break;

    // recompute means; empty clusters keep their previous centroid
    std::fill(counts.begin(), counts.end(), 0);
    Matrix sums(k, d);
    for (std::size_t i = 0; i < n; ++i) {
      const std::size_t c = res.assignment[i];
      ++counts[c];
      auto row = points.row(i);
      auto acc = sums.row(c);
      for (std::size_t j = 0; j < d; ++j) acc[j] += row[j];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) continue;
      auto cen = res.centroids.row(c);
      auto acc = sums.row(c);
      for (std::size_t j = 0; j < d; ++j) cen[j] = acc[j] / static_cast<double>(counts[c]);
    }
    if (!changed) break;
  }

  res.wcss = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    res.wcss += sq_dist(points.row(i), res.centroids.row(res.assignment[i]));
  }
  return res;
}

double gap_statistic(const Matrix& points, std::span<const std::size_t> assignment, std::size_t k) {
  if (assignment.size() != points.rows) {
    throw std::invalid_argument("gap_statistic: assignment covers " +
                                std::to_string(assignment.size()) + " of " +
                                std::to_string(points.rows) + " points");
  }
  std::vector<std::vector<std::size_t>> clusters(k);
  for (std::size_t i = 0; i < assignment.size(); ++i) {
    if (assignment[i] >= k) {
      throw std::invalid_argument("gap_statistic: cluster id " + std::to_string(assignment[i]) +
                                  " out of range for k=" + std::to_string(k));
    }
    clusters[assignment[i]].push_back(i);
  }
  double total = 0.0;
  for (const auto& members : clusters) {
    const std::size_t nr = members.size();
    if (nr == 0) continue;
    double pair_sum = 0.0;
    // unordered pairs doubled = ordered-pair sum; diagonal terms are zero
    for (std::size_t a = 0; a < nr; ++a) {
      for (std::size_t b = a + 1; b < nr; ++b) {
        pair_sum += 2.0 * std::sqrt(sq_dist(points.row(members[a]), points.row(members[b])));
      }
    }
    total += pair_sum / (2.0 * static_cast<double>(nr));
  }
  return total;
}

KMeansResult kmeans_restarts(const Matrix& points, std::size_t k, std::size_t restarts,
                             RngStream& rng, std::size_t max_iters) {
  KMeansResult best;
  bool have = false;
  for (std::size_t r = 0; r < std::max<std::size_t>(restarts, 1); ++r) {
    KMeansResult cand = kmeans(points, k, rng, max_iters);
    if (!have || cand.wcss < best.wcss) {
      best = std::move(cand);
      have = true;
    }
  }
  return best;
}

double clustering_gap(const Matrix& points, std::size_t k, std::size_t restarts, RngStream& rng,
                      std::size_t max_iters) {
  KMeansResult best = kmeans_restarts(points, k, restarts, rng, max_iters);
  return gap_statistic(points, best.assignment, k);
}

AttentionState update_mask(AttentionState state, const std::vector<double>& current_gaps) {
  const std::size_t n = current_gaps.size();
  if (n == 0) throw std::invalid_argument("update_mask: no sources");
  if (state.floor < 0.0 || state.floor * static_cast<double>(n) > 1.0) {
    throw std::invalid_argument("update_mask: floor must satisfy 0 <= floor <= 1/N");
  }

  if (!state.prev_gap.has_value()) {
    state.gains.clear();
    state.mask.assign(n, 1.0 / static_cast<double>(n));
    state.prev_gap = current_gaps;
    return state;
  }
  if (state.prev_gap->size() != n) {
    throw std::invalid_argument("update_mask: source count changed between rounds");
  }

  state.gains.resize(n);
  for (std::size_t i = 0; i < n; ++i) state.gains[i] = (*state.prev_gap)[i] - current_gaps[i];

  // softmax over gains
  double mx = -std::numeric_limits<double>::infinity();
  for (double g : state.gains) mx = std::max(mx, g);
  state.mask.resize(n);
  double z = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    state.mask[i] = std::exp(state.gains[i] - mx);
    z += state.mask[i];
  }
  for (double& m : state.mask) m /= z;

  // floor then water-fill the remainder proportionally over the free entries
  if (state.floor > 0.0) {
    std::vector<bool> clipped(n, false);
    for (;;) {
      double clipped_mass = 0.0, free_mass = 0.0;
      std::size_t clipped_count = 0;
      for (std::size_t i = 0; i < n; ++i) {
        if (clipped[i]) {
          clipped_mass += state.floor;
          ++clipped_count;
        } else {
          free_mass += state.mask[i];
        }
      }
      if (clipped_count == n) break;
      const double target_free = 1.0 - clipped_mass;
      bool newly = false;
      for (std::size_t i = 0; i < n; ++i) {
        if (clipped[i]) continue;
        const double scaled = state.mask[i] / free_mass * target_free;
        if (scaled < state.floor) {
          clipped[i] = true;
          newly = true;
        }
      }
      if (!newly) {
        for (std::size_t i = 0; i < n; ++i) {
          state.mask[i] = clipped[i] ? state.floor : state.mask[i] / free_mass * target_free;
        }
        break;
      }
    }
  }

  state.prev_gap = current_gaps;
  return state;
}

}  // namespace fada
