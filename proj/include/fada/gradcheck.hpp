#pragma once

#include <functional>
#include <string>
#include <vector>

#include "fada/tensor.hpp"

namespace fada {

/// One finite-difference comparison: builds the scalar loss from the given
/// parameter tensors, runs backward, and compares every parameter gradient
/// (or a sample of coordinates when `sample_coords` > 0) against central
/// differences with step h.
struct GradCheckResult {
  double max_rel_err = 0.0;
  std::size_t coords_checked = 0;
};

/// Relative error metric used throughout:
/// |ga - gn| / max(1, |ga|, |gn|).
double grad_rel_err(double analytic, double numeric);

/// `loss_fn` must be a pure function of the current parameter values (any
/// randomness must be replayed identically per call, e.g. by copying an
/// RngStream before each evaluation).
GradCheckResult finite_difference_check(
    std::vector<Tensor>& params,
    const std::function<Tensor()>& loss_fn,
    double h = 1e-5,
    std::size_t sample_coords = 0,
    RngStream* coord_rng = nullptr);

/// Per-op summary of the full randomized suite (20 instances per op).
struct OpGradReport {
  std::string op;
  double worst_rel_err = 0.0;
  std::size_t instances = 0;
  bool pass = false;
};

/// Runs the whole primitive suite; covers every differentiable primitive
/// exactly once. Threshold is the acceptance gate (1e-4).
std::vector<OpGradReport> run_gradient_suite(double threshold = 1e-4,
                                             std::size_t instances_per_op = 20,
                                             std::uint64_t seed = 0x9d2c5680u);

bool gradient_suite_passes(const std::vector<OpGradReport>& reports);

}  // namespace fada
