#include "fada/gradcheck.hpp"

#include <algorithm>
#include <cmath>

namespace fada {

double grad_rel_err(double analytic, double numeric) {
  const double denom = std::max({1.0, std::fabs(analytic), std::fabs(numeric)});
  return std::fabs(analytic - numeric) / denom;
}

GradCheckResult finite_difference_check(std::vector<Tensor>& params,
                                        const std::function<Tensor()>& loss_fn, double h,
                                        std::size_t sample_coords, RngStream* coord_rng) {
  for (Tensor& p : params) p.zero_grad();
  {
    RecordScope rec;
    Tensor loss = loss_fn();
    rec.graph().backward(loss);
  }

  GradCheckResult res;
  for (Tensor& p : params) {
    std::vector<double> analytic = p.grad();
    std::vector<std::size_t> coords;
    if (sample_coords == 0 || sample_coords >= p.size()) {
      coords.resize(p.size());
      for (std::size_t i = 0; i < p.size(); ++i) coords[i] = i;
    } else {
      for (std::size_t i = 0; i < sample_coords; ++i)
        coords.push_back(static_cast<std::size_t>(coord_rng->uniform_index(p.size())));
    }
    auto d = p.data_mut();
    for (std::size_t ix : coords) {
      const double saved = d[ix];
      d[ix] = saved + h;
      const double up = loss_fn().item();
      d[ix] = saved - h;
      const double down = loss_fn().item();
      d[ix] = saved;
      const double numeric = (up - down) / (2.0 * h);
      res.max_rel_err = std::max(res.max_rel_err, grad_rel_err(analytic[ix], numeric));
      ++res.coords_checked;
    }
  }
  return res;
}

namespace {

// Random value bounded away from zero; keeps relu/leaky-relu inputs off the kink.
double off_kink(RngStream& rng, double margin = 5e-3) {
  const double mag = rng.uniform(margin, 1.0);
  return rng.uniform01() < 0.5 ? -mag : mag;
}

Tensor rand_tensor(RngStream& rng, Shape shape, bool requires_grad, double lo = -1.0,
                   double hi = 1.0) {
  std::vector<double> d(shape_numel(shape));
  for (double& x : d) x = rng.uniform(lo, hi);
  return Tensor::from(std::move(shape), std::move(d), requires_grad);
}

Tensor rand_kink_free(RngStream& rng, Shape shape, bool requires_grad) {
  std::vector<double> d(shape_numel(shape));
  for (double& x : d) x = off_kink(rng);
  return Tensor::from(std::move(shape), std::move(d), requires_grad);
}

/// Reduces an op output to a scalar through fixed random weights so every
/// output coordinate receives a distinct gradient.
Tensor weighted_loss(const Tensor& out, const Tensor& weights) {
  return sum(mul(out, weights));
}

Tensor make_weights(RngStream& rng, const Shape& shape) {
  return rand_tensor(rng, shape, /*requires_grad=*/false, -1.0, 1.0);
}

struct Scenario {
  std::vector<Tensor> params;
  std::function<Tensor()> loss;
};

using ScenarioGen = std::function<Scenario(RngStream&, std::size_t)>;

Scenario scenario_matmul(RngStream& rng, std::size_t) {
  Tensor a = rand_tensor(rng, {3, 4}, true);
  Tensor b = rand_tensor(rng, {4, 2}, true);
  Tensor w = make_weights(rng, {3, 2});
  return {{a, b}, [=] { return weighted_loss(matmul(a, b), w); }};
}

Scenario scenario_add(RngStream& rng, std::size_t instance) {
  switch (instance % 3) {
    case 0: {
      Tensor a = rand_tensor(rng, {3, 4}, true);
      Tensor b = rand_tensor(rng, {3, 4}, true);
      Tensor w = make_weights(rng, {3, 4});
      return {{a, b}, [=] { return weighted_loss(add(a, b), w); }};
    }
    case 1: {
      Tensor a = rand_tensor(rng, {3, 4}, true);
      Tensor b = rand_tensor(rng, {4}, true);
      Tensor w = make_weights(rng, {3, 4});
      return {{a, b}, [=] { return weighted_loss(add(a, b), w); }};
    }
    default: {
      Tensor a = rand_tensor(rng, {2, 3, 2, 2}, true);
      Tensor b = rand_tensor(rng, {3}, true);
      Tensor w = make_weights(rng, {2, 3, 2, 2});
      return {{a, b}, [=] { return weighted_loss(add(a, b), w); }};
    }
  }
}

Scenario scenario_sub(RngStream& rng, std::size_t) {
  Tensor a = rand_tensor(rng, {4, 3}, true);
  Tensor b = rand_tensor(rng, {4, 3}, true);
  Tensor w = make_weights(rng, {4, 3});
  return {{a, b}, [=] { return weighted_loss(sub(a, b), w); }};
}

Scenario scenario_mul(RngStream& rng, std::size_t) {
  Tensor a = rand_tensor(rng, {4, 3}, true);
  Tensor b = rand_tensor(rng, {4, 3}, true);
  Tensor w = make_weights(rng, {4, 3});
  return {{a, b}, [=] { return weighted_loss(mul(a, b), w); }};
}

Scenario scenario_scale(RngStream& rng, std::size_t) {
  Tensor a = rand_tensor(rng, {5}, true);
  const double c = rng.uniform(-2.0, 2.0);
  Tensor w = make_weights(rng, {5});
  return {{a}, [=] { return weighted_loss(scale(a, c), w); }};
}

Scenario scenario_relu(RngStream& rng, std::size_t) {
  Tensor a = rand_kink_free(rng, {4, 5}, true);
  Tensor w = make_weights(rng, {4, 5});
  return {{a}, [=] { return weighted_loss(relu(a), w); }};
}

Scenario scenario_leaky_relu(RngStream& rng, std::size_t instance) {
  const double slopes[] = {0.01, 0.1, 0.3};
  const double slope = slopes[instance % 3];
  Tensor a = rand_kink_free(rng, {4, 5}, true);
  Tensor w = make_weights(rng, {4, 5});
  return {{a}, [=] { return weighted_loss(leaky_relu(a, slope), w); }};
}

Scenario scenario_softmax(RngStream& rng, std::size_t instance) {
  const std::size_t axis = instance % 2;
  Tensor a = rand_tensor(rng, {3, 4}, true, -2.0, 2.0);
  Tensor w = make_weights(rng, {3, 4});
  return {{a}, [=] { return weighted_loss(softmax(a, axis), w); }};
}

Scenario scenario_log(RngStream& rng, std::size_t) {
  Tensor a = rand_tensor(rng, {4, 3}, true, 0.1, 2.0);
  Tensor w = make_weights(rng, {4, 3});
  return {{a}, [=] { return weighted_loss(log(a), w); }};
}

Scenario scenario_exp(RngStream& rng, std::size_t) {
  Tensor a = rand_tensor(rng, {4, 3}, true, -2.0, 2.0);
  Tensor w = make_weights(rng, {4, 3});
  return {{a}, [=] { return weighted_loss(exp(a), w); }};
}

Scenario scenario_mean(RngStream& rng, std::size_t) {
  Tensor a = rand_tensor(rng, {6}, true);
  return {{a}, [=] { return mean(a); }};
}

Scenario scenario_sum(RngStream& rng, std::size_t) {
  Tensor a = rand_tensor(rng, {2, 3}, true);
  return {{a}, [=] { return sum(a); }};
}

Scenario scenario_concat(RngStream& rng, std::size_t instance) {
  const std::size_t axis = instance % 2;
  Shape sa = axis == 0 ? Shape{2, 3} : Shape{3, 2};
  Shape sb = axis == 0 ? Shape{4, 3} : Shape{3, 3};
  Tensor a = rand_tensor(rng, sa, true);
  Tensor b = rand_tensor(rng, sb, true);
  Shape so = sa;
  so[axis] += sb[axis];
  Tensor w = make_weights(rng, so);
  return {{a, b}, [=] { return weighted_loss(concat(a, b, axis), w); }};
}

Scenario scenario_reshape(RngStream& rng, std::size_t) {
  Tensor a = rand_tensor(rng, {2, 6}, true);
  Tensor w = make_weights(rng, {3, 4});
  return {{a}, [=] { return weighted_loss(reshape(a, {3, 4}), w); }};
}

Scenario scenario_clamp_min(RngStream& rng, std::size_t) {
  // Keep inputs at least 5e-3 away from the clamp threshold.
  const double floor = 0.0;
  Tensor a = rand_kink_free(rng, {4, 4}, true);
  Tensor w = make_weights(rng, {4, 4});
  return {{a}, [=] { return weighted_loss(clamp_min(a, floor), w); }};
}

Scenario scenario_gather_rows(RngStream& rng, std::size_t) {
  const std::size_t n = 5, k = 4;
  Tensor a = rand_tensor(rng, {n, k}, true);
  auto labels = std::make_shared<std::vector<int>>();
  for (std::size_t i = 0; i < n; ++i)
    labels->push_back(static_cast<int>(rng.uniform_index(k)));
  Tensor w = make_weights(rng, {n});
  return {{a}, [=] { return weighted_loss(gather_rows(a, *labels), w); }};
}

Scenario scenario_take_rows(RngStream& rng, std::size_t) {
  const std::size_t n = 5, k = 3;
  Tensor a = rand_tensor(rng, {n, k}, true);
  auto idx = std::make_shared<std::vector<std::uint32_t>>();
  for (std::size_t i = 0; i < 7; ++i)
    idx->push_back(static_cast<std::uint32_t>(rng.uniform_index(n)));  // repeats allowed
  Tensor w = make_weights(rng, {7, k});
  return {{a}, [=] { return weighted_loss(take_rows(a, *idx), w); }};
}

Scenario scenario_conv2d(RngStream& rng, std::size_t instance) {
  const std::size_t stride = 1 + instance % 2;
  const std::size_t padding = instance % 3;
  const std::size_t n = 2, ci = 2, h = 5, w = 5, co = 2, k = 3;
  Tensor x = rand_tensor(rng, {n, ci, h, w}, true);
  Tensor kern = rand_tensor(rng, {co, ci, k, k}, true);
  const std::size_t oh = (h + 2 * padding - k) / stride + 1;
  const std::size_t ow = (w + 2 * padding - k) / stride + 1;
  Tensor wt = make_weights(rng, {n, co, oh, ow});
  return {{x, kern}, [=] { return weighted_loss(conv2d(x, kern, stride, padding), wt); }};
}

Scenario scenario_maxpool2d(RngStream& rng, std::size_t instance) {
  const std::size_t window = 2, stride = 1 + instance % 2;
  const std::size_t n = 2, c = 2, h = 5, w = 5;
  // Resample until every pooling window has a clear (>=1e-3) winner.
  for (;;) {
    Tensor x = rand_tensor(rng, {n, c, h, w}, true);
    const std::size_t oh = (h - window) / stride + 1;
    const std::size_t ow = (w - window) / stride + 1;
    bool clear = true;
    auto xv = x.data();
    for (std::size_t b = 0; b < n && clear; ++b)
      for (std::size_t ch = 0; ch < c && clear; ++ch)
        for (std::size_t oi = 0; oi < oh && clear; ++oi)
          for (std::size_t oj = 0; oj < ow && clear; ++oj) {
            double best = -1e300, second = -1e300;
            for (std::size_t ki = 0; ki < window; ++ki)
              for (std::size_t kj = 0; kj < window; ++kj) {
                const double v = xv[((b * c + ch) * h + oi * stride + ki) * w + oj * stride + kj];
                if (v > best) {
                  second = best;
                  best = v;
                } else if (v > second) {
                  second = v;
                }
              }
            if (best - second < 1e-3) clear = false;
          }
    if (!clear) continue;
    const std::size_t oh2 = (h - window) / stride + 1;
    const std::size_t ow2 = (w - window) / stride + 1;
    Tensor wt = make_weights(rng, {n, c, oh2, ow2});
    return {{x}, [=] { return weighted_loss(maxpool2d(x, window, stride), wt); }};
  }
}

Scenario scenario_batchnorm(RngStream& rng, std::size_t instance) {
  if (instance % 2 == 0) {
    const std::size_t n = 4, d = 3;
    Tensor x = rand_tensor(rng, {n, d}, true);
    Tensor gamma = rand_tensor(rng, {d}, true, 0.5, 1.5);
    Tensor beta = rand_tensor(rng, {d}, true);
    Tensor w = make_weights(rng, {n, d});
    auto rm = std::make_shared<std::vector<double>>(d, 0.0);
    auto rv = std::make_shared<std::vector<double>>(d, 1.0);
    return {{x, gamma, beta}, [=] {
              std::vector<double> m = *rm, v = *rv;  // scratch; stats do not affect train output
              return weighted_loss(batchnorm_train(x, gamma, beta, m, v, 0.9, 1e-5), w);
            }};
  }
  const std::size_t n = 3, c = 2, h = 2, wd = 2;
  Tensor x = rand_tensor(rng, {n, c, h, wd}, true);
  Tensor gamma = rand_tensor(rng, {c}, true, 0.5, 1.5);
  Tensor beta = rand_tensor(rng, {c}, true);
  Tensor w = make_weights(rng, {n, c, h, wd});
  auto rm = std::make_shared<std::vector<double>>(c, 0.0);
  auto rv = std::make_shared<std::vector<double>>(c, 1.0);
  return {{x, gamma, beta}, [=] {
            std::vector<double> m = *rm, v = *rv;
            return weighted_loss(batchnorm_train(x, gamma, beta, m, v, 0.9, 1e-5), w);
          }};
}

Scenario scenario_batchnorm_eval(RngStream& rng, std::size_t) {
  const std::size_t n = 4, d = 3;
  Tensor x = rand_tensor(rng, {n, d}, true);
  Tensor gamma = rand_tensor(rng, {d}, true, 0.5, 1.5);
  Tensor beta = rand_tensor(rng, {d}, true);
  Tensor w = make_weights(rng, {n, d});
  auto rm = std::make_shared<std::vector<double>>(d);
  auto rv = std::make_shared<std::vector<double>>(d);
  for (std::size_t i = 0; i < d; ++i) {
    (*rm)[i] = rng.uniform(-0.5, 0.5);
    (*rv)[i] = rng.uniform(0.5, 1.5);
  }
  return {{x, gamma, beta},
          [=] { return weighted_loss(batchnorm_eval(x, gamma, beta, *rm, *rv, 1e-5), w); }};
}

Scenario scenario_dropout(RngStream& rng, std::size_t instance) {
  const double p = instance % 2 == 0 ? 0.3 : 0.5;
  Tensor x = rand_tensor(rng, {4, 5}, true);
  Tensor w = make_weights(rng, {4, 5});
  // Replay the same mask on every evaluation by copying the stream.
  auto mask_stream = std::make_shared<RngStream>(RngStream(rng.raw()));
  return {{x}, [=] {
            RngStream replay = *mask_stream;
            return weighted_loss(dropout(x, p, replay), w);
          }};
}

Scenario scenario_logmeanexp(RngStream& rng, std::size_t) {
  Tensor a = rand_tensor(rng, {8}, true, -2.0, 2.0);
  return {{a}, [=] { return logmeanexp(a); }};
}

}  // namespace

std::vector<OpGradReport> run_gradient_suite(double threshold, std::size_t instances_per_op,
                                             std::uint64_t seed) {
  const std::vector<std::pair<const char*, ScenarioGen>> ops = {
      {"matmul", scenario_matmul},
      {"add", scenario_add},
      {"sub", scenario_sub},
      {"mul", scenario_mul},
      {"scale", scenario_scale},
      {"relu", scenario_relu},
      {"leaky_relu", scenario_leaky_relu},
      {"softmax", scenario_softmax},
      {"log", scenario_log},
      {"exp", scenario_exp},
      {"mean", scenario_mean},
      {"sum", scenario_sum},
      {"concat", scenario_concat},
      {"reshape", scenario_reshape},
      {"clamp_min", scenario_clamp_min},
      {"gather_rows", scenario_gather_rows},
      {"take_rows", scenario_take_rows},
      {"conv2d", scenario_conv2d},
      {"maxpool2d", scenario_maxpool2d},
      {"batchnorm", scenario_batchnorm},
      {"batchnorm_eval", scenario_batchnorm_eval},
      {"dropout", scenario_dropout},
      {"logmeanexp", scenario_logmeanexp},
  };

  std::vector<OpGradReport> reports;
  for (std::size_t oi = 0; oi < ops.size(); ++oi) {
    OpGradReport rep;
    rep.op = ops[oi].first;
    for (std::size_t inst = 0; inst < instances_per_op; ++inst) {
      RngStream rng = RngStream::derive(seed, rep.op, inst);
      Scenario sc = ops[oi].second(rng, inst);
      GradCheckResult r = finite_difference_check(sc.params, sc.loss);
      rep.worst_rel_err = std::max(rep.worst_rel_err, r.max_rel_err);
      ++rep.instances;
    }
    rep.pass = rep.worst_rel_err < threshold;
    reports.push_back(std::move(rep));
  }
  return reports;
}

bool gradient_suite_passes(const std::vector<OpGradReport>& reports) {
  return std::all_of(reports.begin(), reports.end(),
                     [](const OpGradReport& r) { return r.pass; });
}

}  // namespace fada
