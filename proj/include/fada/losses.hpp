#pragma once

#include <span>
#include <string>

#include "fada/nn.hpp"
#include "fada/tensor.hpp"

namespace fada {

/// Clamp applied inside every log so probabilities at exactly 0 stay finite.
inline constexpr double kProbFloor = 1e-12;

struct LossReport {
  std::string name;
  double value = 0.0;
  std::size_t batch_size = 0;
};

/// -mean log p[label]; rows of `probs` are class probabilities.
Tensor ce_loss(const Tensor& probs, std::span<const int> labels);

/// Domain-identifier objective: -mean log di(source) - mean log(1 - di(target)).
/// Inputs are per-sample probabilities that the feature came from the source
/// domain; values outside [0,1] raise NumericFault.
Tensor adv_di_loss(const Tensor& di_out_source, const Tensor& di_out_target);

/// Generator confusion objective: -mean log di(source) - mean log di(target).
/// Both terms push toward the "source" label (confusion form, not the
/// minimax negation).
Tensor adv_g_loss(const Tensor& di_out_source, const Tensor& di_out_target);

/// Sum of the two label cross-entropies: classifier on the invariant branch
/// plus class identifier on the specific branch.
Tensor disentangle_ce_loss(const Tensor& c_probs, const Tensor& ci_probs,
                           std::span<const int> labels);

/// Mean over the batch of sum_k p_k log p_k (negative Shannon entropy);
/// minimizing drives the prediction toward uniform.
Tensor entropy_confusion_loss(const Tensor& probs);

/// Monte-Carlo Donsker-Varadhan estimate:
/// (1/n) sum T(p,q) - log((1/n) sum e^{T(p,q')}), with q' the marginal batch.
/// Computed through a log-sum-exp so large statistics cannot overflow.
Tensor mine_estimate(Component& mine, const Tensor& p, const Tensor& q, const Tensor& q_marginal,
                     Mode mode);

/// Mean over the batch of the squared L2 distance per sample.
Tensor recon_loss(const Tensor& reconstruction, const Tensor& original);

}  // namespace fada
