#pragma once

#include <optional>
#include <span>
#include <string>
#include <vector>

#include "fada/matrix.hpp"
#include "fada/rng.hpp"

namespace fada {

/// One binary hypothesis over feature vectors.
struct Hypothesis {
  enum class Form { const0, const1, ge, lt };
  Form form = Form::const0;
  std::size_t feature = 0;
  double threshold = 0.0;

  bool predict(std::span<const double> x) const {
    switch (form) {
      case Form::const0: return false;
      case Form::const1: return true;
      case Form::ge: return x[feature] >= threshold;
      case Form::lt: return x[feature] < threshold;
    }
    return false;
  }
};

/// Enumerable hypothesis class: 1-D thresholds over a grid, or axis-aligned
/// stumps over d features. Both include the two constant hypotheses, so the
/// symmetric-difference class always contains the base class.
class FiniteHypothesisClass {
 public:
  enum class Kind { thresholds_1d, stumps };

  static FiniteHypothesisClass thresholds(std::size_t grid_points, double lo, double hi);
  static FiniteHypothesisClass thresholds_grid(std::vector<double> cut_points);
  static FiniteHypothesisClass stumps(std::size_t features, std::size_t grid_points, double lo,
                                      double hi);

  const std::vector<Hypothesis>& hypotheses() const { return hyps_; }
  double vc_dim() const { return vc_dim_; }
  Kind kind() const { return kind_; }

 private:
  Kind kind_ = Kind::thresholds_1d;
  std::vector<Hypothesis> hyps_;
  double vc_dim_ = 1.0;
};

/// Empirical distribution with per-point weights (uniform for plain samples,
/// alpha-scaled for mixtures). Weights sum to 1.
struct WeightedSample {
  Matrix points;
  std::vector<double> weights;

  static WeightedSample uniform(const Matrix& pts);
  static WeightedSample mixture(std::span<const Matrix> parts, std::span<const double> alpha);
};

/// 2 * sup_h |Pr_A(h=1) - Pr_B(h=1)| over the enumerated class.
double h_divergence_exact(const FiniteHypothesisClass& cls, const WeightedSample& a,
                          const WeightedSample& b);

/// Same supremum over all XOR pairs h ^ h'. Throws when |H|^2 exceeds
/// pair_cap.
double h_delta_h_divergence_exact(const FiniteHypothesisClass& cls, const WeightedSample& a,
                                  const WeightedSample& b, std::size_t pair_cap = 30000000);

/// Approximate A-distance 2(1 - 2*eps): eps is the held-out error of a
/// logistic domain classifier (full-batch gradient descent, 500 steps at
/// lr 0.1, 80/20 split), clamped at 0.5 so the result stays in [0,2].
double proxy_a_distance(const Matrix& source_features, const Matrix& target_features,
                        RngStream& rng);

/// Combined risk of the best single hypothesis: min_h [err_S(h) + err_T(h)],
/// exact by enumeration. This is the lambda of the target-error bounds.
double lambda_combined_risk(const FiniteHypothesisClass& cls, const Matrix& s_points,
                            std::span<const int> s_labels, const Matrix& t_points,
                            std::span<const int> t_labels);

/// 4 * sqrt((2 d log(2 N m) + log(4/delta)) / (N m)), natural logs.
double vc_term(double d, std::size_t n_sources, std::size_t m, double delta);

// ---------------------------------------------------------------------------
// Bound reports
// ---------------------------------------------------------------------------

struct PerSourceTerms {
  double alpha = 0.0;
  double divergence = 0.0;  // empirical H-delta-H (or proxy, in estimated mode)
  double lambda = 0.0;
};

struct BoundReport {
  double source_error = 0.0;
  std::vector<PerSourceTerms> per_source;
  double vc_term = 0.0;
  double total = 0.0;
  double delta = 0.0;
  std::size_t m = 0;
  std::size_t N = 0;
  double vc_dim = 0.0;
  std::string mode;  // "certified-finite-class" or "estimated-neural"
  std::optional<double> true_target_error;
};

/// total = source_error + sum_i alpha_i (divergence_i / 2 + lambda_i) + vc_term.
BoundReport assemble_bound(double source_error, std::vector<PerSourceTerms> per_source,
                           double vc_dim, std::size_t m, double delta, std::string mode);

std::string bound_report_json(const BoundReport& report);

// ---------------------------------------------------------------------------
// Finite-class instances (exact verification path)
// ---------------------------------------------------------------------------

/// Domains share one finite support with a ground-truth binary labeling;
/// each domain is a probability vector over the support.
struct FiniteInstance {
  FiniteHypothesisClass cls;
  Matrix support;                                  // s x d
  std::vector<int> labels;                         // ground truth per support point
  std::vector<std::vector<double>> source_probs;   // N x s
  std::vector<double> target_probs;                // s
  std::vector<double> alpha;                       // N, sums to 1
  std::size_t m = 50;
  double delta = 0.05;
};

struct RandomInstanceOptions {
  std::size_t max_sources = 4;
  std::size_t support_points = 16;
  std::size_t m_min = 30, m_max = 120;
  double delta = 0.05;
  bool allow_stumps = true;
};
FiniteInstance random_finite_instance(RngStream& rng, const RandomInstanceOptions& opts = {});

struct InstanceEvaluation {
  BoundReport report;
  double true_target_error = 0.0;
  bool bound_holds = false;
  std::vector<Hypothesis> source_hypotheses;  // per-source empirical risk minimizers
};

/// Samples m points per domain, fits the per-source ERM hypotheses, realizes
/// h_T as the alpha-weighted majority vote, and assembles every bound term.
/// lambda_i is computed exactly on the true distributions; the divergences
/// are empirical, as in the bound statement.
InstanceEvaluation evaluate_finite_instance(const FiniteInstance& inst, RngStream& sample_rng);

struct MixtureCheck {
  double lhs = 0.0;  // divergence(mixture sample, target)
  double rhs = 0.0;  // sum_i alpha_i divergence(S_i, target)
  bool holds = false;
};

/// The key appendix inequality: d(mixture, T) <= sum alpha_i d(S_i, T).
MixtureCheck mixture_inequality_check(const FiniteHypothesisClass& cls,
                                      std::span<const Matrix> source_samples,
                                      const Matrix& target_sample, std::span<const double> alpha);

}  // namespace fada
