#include "fada/losses.hpp"

namespace fada {

namespace {

void check_probability(const char* op, const Tensor& t) {
  for (double v : t.data()) {
    if (!(v >= 0.0 && v <= 1.0)) {
      throw NumericFault(std::string(op) + ": probability outside [0,1]: " + std::to_string(v));
    }
  }
}

Tensor neg_mean_log(const Tensor& probs) {
  return scale(mean(log(clamp_min(probs, kProbFloor))), -1.0);
}

}  // namespace

Tensor ce_loss(const Tensor& probs, std::span<const int> labels) {
  return neg_mean_log(gather_rows(probs, labels));
}

Tensor adv_di_loss(const Tensor& di_out_source, const Tensor& di_out_target) {
  check_probability("adv_di_loss", di_out_source);
  check_probability("adv_di_loss", di_out_target);
  Tensor one_minus = sub(Tensor::full(di_out_target.shape(), 1.0), di_out_target);
  return add(neg_mean_log(di_out_source), neg_mean_log(one_minus));
}

Tensor adv_g_loss(const Tensor& di_out_source, const Tensor& di_out_target) {
  check_probability("adv_g_loss", di_out_source);
  check_probability("adv_g_loss", di_out_target);
  return add(neg_mean_log(di_out_source), neg_mean_log(di_out_target));
}

Tensor disentangle_ce_loss(const Tensor& c_probs, const Tensor& ci_probs,
                           std::span<const int> labels) {
  return add(ce_loss(c_probs, labels), ce_loss(ci_probs, labels));
}

Tensor entropy_confusion_loss(const Tensor& probs) {
  const std::size_t n = probs.shape()[0];
  Tensor plogp = mul(probs, log(clamp_min(probs, kProbFloor)));
  return scale(sum(plogp), 1.0 / static_cast<double>(n));
}

Tensor mine_estimate(Component& mine, const Tensor& p, const Tensor& q, const Tensor& q_marginal,
                     Mode mode) {
  if (p.shape()[0] < 2) {
    throw ShapeError("mine_estimate: needs batch size >= 2, got " + shape_str(p.shape()));
  }
  if (q.shape() != q_marginal.shape()) {
    throw ShapeError("mine_estimate: marginal batch shape " + shape_str(q_marginal.shape()) +
                     " does not match joint " + shape_str(q.shape()));
  }
  Tensor t_joint = mine_forward(mine, p, q, mode);
  Tensor t_marginal = mine_forward(mine, p, q_marginal, mode);
  return sub(mean(t_joint), logmeanexp(t_marginal));
}

Tensor recon_loss(const Tensor& reconstruction, const Tensor& original) {
  if (reconstruction.shape() != original.shape()) {
    throw ShapeError("recon_loss: shape mismatch " + shape_str(reconstruction.shape()) + " vs " +
                     shape_str(original.shape()));
  }
  const std::size_t n = reconstruction.shape()[0];
  Tensor d = sub(reconstruction, original);
  return scale(sum(mul(d, d)), 1.0 / static_cast<double>(n));
}

}  // namespace fada
