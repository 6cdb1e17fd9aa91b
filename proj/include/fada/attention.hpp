#pragma once

#include <optional>
#include <span>
#include <vector>

#include "fada/matrix.hpp"
#include "fada/rng.hpp"

namespace fada {

struct KMeansResult {
  std::vector<std::size_t> assignment;  // one cluster id per point
  Matrix centroids;                     // k x d
  double wcss = 0.0;
  std::size_t iterations = 0;
  std::vector<double> wcss_history;  // per assignment phase; non-increasing
};

/// Lloyd iterations from a random-point initialisation; terminates at the
/// assignment fixpoint or after max_iters. WCSS is non-increasing across
/// iterations. Throws std::invalid_argument when k exceeds the point count.
KMeansResult kmeans(const Matrix& points, std::size_t k, RngStream& rng,
                    std::size_t max_iters = 100);

/// Best of `restarts` independent runs by final WCSS; restart seeds are
/// drawn sequentially from `rng`.
KMeansResult kmeans_restarts(const Matrix& points, std::size_t k, std::size_t restarts,
                             RngStream& rng, std::size_t max_iters = 100);

/// Within-cluster pairwise-distance score:
/// I = sum_r 1/(2 n_r) sum_{i,j in C_r} ||f_i - f_j||_2 over ordered pairs
/// (each unordered pair counted twice). Empty clusters contribute 0.
double gap_statistic(const Matrix& points, std::span<const std::size_t> assignment, std::size_t k);

/// Best-of-restarts clustering followed by the gap statistic; restart seeds
/// are drawn sequentially from `rng`, lowest-WCSS run wins.
double clustering_gap(const Matrix& points, std::size_t k, std::size_t restarts, RngStream& rng,
                      std::size_t max_iters = 100);

/// Per-source attention state: previous gap statistics, last gains, and the
/// current softmax mask.
struct AttentionState {
  std::optional<std::vector<double>> prev_gap;
  std::vector<double> gains;
  std::vector<double> mask;
  std::size_t k = 2;
  double floor = 0.0;
};

/// Computes gains = prev_gap - current_gaps (uniform mask before the first
/// call), masks them through a softmax, floors at `state.floor`, renormalises,
/// and stores current_gaps as the new prev_gap.
AttentionState update_mask(AttentionState state, const std::vector<double>& current_gaps);

}  // namespace fada
