#include "fada/theory.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "json.hpp"

namespace fada {

// ---------------------------------------------------------------------------
// Hypothesis classes
// ---------------------------------------------------------------------------

FiniteHypothesisClass FiniteHypothesisClass::thresholds(std::size_t grid_points, double lo,
                                                        double hi) {
  if (grid_points < 1) throw std::invalid_argument("thresholds: need at least one grid point");
  std::vector<double> cuts(grid_points);
  for (std::size_t i = 0; i < grid_points; ++i) {
    cuts[i] = grid_points == 1
                  ? (lo + hi) / 2.0
                  : lo + (hi - lo) * static_cast<double>(i) / static_cast<double>(grid_points - 1);
  }
  return thresholds_grid(std::move(cuts));
}

FiniteHypothesisClass FiniteHypothesisClass::thresholds_grid(std::vector<double> cut_points) {
  FiniteHypothesisClass cls;
  cls.kind_ = Kind::thresholds_1d;
  cls.vc_dim_ = 1.0;
  cls.hyps_.push_back({Hypothesis::Form::const0, 0, 0.0});
  cls.hyps_.push_back({Hypothesis::Form::const1, 0, 0.0});
  for (double t : cut_points) cls.hyps_.push_back({Hypothesis::Form::ge, 0, t});
  return cls;
}

FiniteHypothesisClass FiniteHypothesisClass::stumps(std::size_t features, std::size_t grid_points,
                                                    double lo, double hi) {
  if (features == 0) throw std::invalid_argument("stumps: need at least one feature");
  FiniteHypothesisClass cls;
  cls.kind_ = Kind::stumps;
  // Standard stump-class capacity estimate, declared, not derived.
  cls.vc_dim_ = std::max(2.0, std::ceil(std::log2(2.0 * static_cast<double>(features))) + 1.0);
  cls.hyps_.push_back({Hypothesis::Form::const0, 0, 0.0});
  cls.hyps_.push_back({Hypothesis::Form::const1, 0, 0.0});
  for (std::size_t f = 0; f < features; ++f) {
    for (std::size_t i = 0; i < grid_points; ++i) {
      const double t = grid_points == 1 ? (lo + hi) / 2.0
                                        : lo + (hi - lo) * static_cast<double>(i) /
                                                  static_cast<double>(grid_points - 1);
      cls.hyps_.push_back({Hypothesis::Form::ge, f, t});
      cls.hyps_.push_back({Hypothesis::Form::lt, f, t});
    }
  }
  return cls;
}

// ---------------------------------------------------------------------------
// Weighted samples and divergences
// ---------------------------------------------------------------------------

WeightedSample WeightedSample::uniform(const Matrix& pts) {
  if (pts.rows == 0) throw std::invalid_argument("WeightedSample: empty sample");
  WeightedSample ws;
  ws.points = pts;
  ws.weights.assign(pts.rows, 1.0 / static_cast<double>(pts.rows));
  return ws;
}

WeightedSample WeightedSample::mixture(std::span<const Matrix> parts,
                                       std::span<const double> alpha) {
  if (parts.size() != alpha.size() || parts.empty()) {
    throw std::invalid_argument("WeightedSample::mixture: parts/alpha size mismatch");
  }
  WeightedSample ws;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (parts[i].rows == 0) throw std::invalid_argument("WeightedSample::mixture: empty part");
    ws.points = Matrix::vstack(ws.points, parts[i]);
    const double w = alpha[i] / static_cast<double>(parts[i].rows);
    ws.weights.insert(ws.weights.end(), parts[i].rows, w);
  }
  return ws;
}

namespace {

/// Per-hypothesis boolean patterns over a point set.
std::vector<std::vector<bool>> eval_patterns(const FiniteHypothesisClass& cls, const Matrix& pts) {
  const auto& hyps = cls.hypotheses();
  std::vector<std::vector<bool>> pat(hyps.size(), std::vector<bool>(pts.rows));
  for (std::size_t h = 0; h < hyps.size(); ++h) {
    for (std::size_t i = 0; i < pts.rows; ++i) pat[h][i] = hyps[h].predict(pts.row(i));
  }
  return pat;
}

}  // namespace

double h_divergence_exact(const FiniteHypothesisClass& cls, const WeightedSample& a,
                          const WeightedSample& b) {
  if (a.points.rows == 0 || b.points.rows == 0) {
    throw std::invalid_argument("h_divergence_exact: empty sample");
  }
  auto pa = eval_patterns(cls, a.points);
  auto pb = eval_patterns(cls, b.points);
  double best = 0.0;
  for (std::size_t h = 0; h < pa.size(); ++h) {
    double wa = 0.0, wb = 0.0;
    for (std::size_t i = 0; i < a.points.rows; ++i) wa += pa[h][i] ? a.weights[i] : 0.0;
    for (std::size_t i = 0; i < b.points.rows; ++i) wb += pb[h][i] ? b.weights[i] : 0.0;
    best = std::max(best, std::fabs(wa - wb));
  }
  return 2.0 * best;
}

double h_delta_h_divergence_exact(const FiniteHypothesisClass& cls, const WeightedSample& a,
                                  const WeightedSample& b, std::size_t pair_cap) {
  if (a.points.rows == 0 || b.points.rows == 0) {
    throw std::invalid_argument("h_delta_h_divergence_exact: empty sample");
  }
  const std::size_t H = cls.hypotheses().size();
  if (H * H > pair_cap) {
    throw std::invalid_argument("h_delta_h_divergence_exact: |H|^2 = " + std::to_string(H * H) +
                                " exceeds the pair cap " + std::to_string(pair_cap));
  }
  auto pa = eval_patterns(cls, a.points);
  auto pb = eval_patterns(cls, b.points);
  const std::size_t na = a.points.rows, nb = b.points.rows;
  double best = 0.0;
  for (std::size_t h = 0; h < H; ++h) {
    for (std::size_t g = h; g < H; ++g) {  // xor is symmetric; h==g gives the empty set
      double wa = 0.0, wb = 0.0;
      for (std::size_t i = 0; i < na; ++i) {
        if (pa[h][i] != pa[g][i]) wa += a.weights[i];
      }
      for (std::size_t i = 0; i < nb; ++i) {
        if (pb[h][i] != pb[g][i]) wb += b.weights[i];
      }
      best = std::max(best, std::fabs(wa - wb));
    }
  }
  return 2.0 * best;
}

// ---------------------------------------------------------------------------
// Proxy A-distance
// ---------------------------------------------------------------------------

double proxy_a_distance(const Matrix& source_features, const Matrix& target_features,
                        RngStream& rng) {
  if (source_features.rows < 20 || target_features.rows < 20) {
    throw std::invalid_argument("proxy_a_distance: need at least 20 samples per side");
  }
  if (source_features.cols != target_features.cols) {
    throw std::invalid_argument("proxy_a_distance: feature width mismatch");
  }
  const std::size_t d = source_features.cols;
  const std::size_t n = source_features.rows + target_features.rows;

  Matrix x = Matrix::vstack(source_features, target_features);
  std::vector<int> y(n, 0);
  for (std::size_t i = source_features.rows; i < n; ++i) y[i] = 1;

  auto perm = rng.permutation(static_cast<std::uint32_t>(n));
  const std::size_t n_train = static_cast<std::size_t>(0.8 * static_cast<double>(n));
  const std::size_t n_test = n - n_train;

  auto count_classes = [&](std::size_t begin, std::size_t end) {
    int c0 = 0, c1 = 0;
    for (std::size_t i = begin; i < end; ++i) (y[perm[i]] == 0 ? c0 : c1)++;
    return std::pair<int, int>(c0, c1);
  };
  auto [tr0, tr1] = count_classes(0, n_train);
  auto [te0, te1] = count_classes(n_train, n);
  if (tr0 == 0 || tr1 == 0 || te0 == 0 || te1 == 0) {
    throw std::runtime_error("proxy_a_distance: degenerate single-class split");
  }

  // full-batch logistic regression
  std::vector<double> w(d, 0.0);
  double b = 0.0;
  const double lr = 0.1;
  for (int step = 0; step < 500; ++step) {
    std::vector<double> gw(d, 0.0);
    double gb = 0.0;
    for (std::size_t i = 0; i < n_train; ++i) {
      auto row = x.row(perm[i]);
      double z = b;
      for (std::size_t j = 0; j < d; ++j) z += w[j] * row[j];
      const double p = 1.0 / (1.0 + std::exp(-z));
      const double err = p - static_cast<double>(y[perm[i]]);
      for (std::size_t j = 0; j < d; ++j) gw[j] += err * row[j];
      gb += err;
    }
    for (std::size_t j = 0; j < d; ++j) w[j] -= lr * gw[j] / static_cast<double>(n_train);
    b -= lr * gb / static_cast<double>(n_train);
  }

  std::size_t wrong = 0;
  for (std::size_t i = n_train; i < n; ++i) {
    auto row = x.row(perm[i]);
    double z = b;
    for (std::size_t j = 0; j < d; ++j) z += w[j] * row[j];
    const int pred = z >= 0.0 ? 1 : 0;
    wrong += pred != y[perm[i]];
  }
  const double eps =
      std::min(0.5, static_cast<double>(wrong) / static_cast<double>(n_test));
  return 2.0 * (1.0 - 2.0 * eps);
}

// ---------------------------------------------------------------------------
// Lambda and the VC term
// ---------------------------------------------------------------------------

namespace {

double empirical_error(const Hypothesis& h, const Matrix& pts, std::span<const int> labels) {
  std::size_t wrong = 0;
  for (std::size_t i = 0; i < pts.rows; ++i) {
    wrong += static_cast<int>(h.predict(pts.row(i))) != labels[i];
  }
  return static_cast<double>(wrong) / static_cast<double>(pts.rows);
}

}  // namespace

double lambda_combined_risk(const FiniteHypothesisClass& cls, const Matrix& s_points,
                            std::span<const int> s_labels, const Matrix& t_points,
                            std::span<const int> t_labels) {
  double best = 2.0;
  for (const Hypothesis& h : cls.hypotheses()) {
    const double combined =
        empirical_error(h, s_points, s_labels) + empirical_error(h, t_points, t_labels);
    best = std::min(best, combined);
  }
  return best;
}

double vc_term(double d, std::size_t n_sources, std::size_t m, double delta) {
  if (d <= 0.0 || n_sources == 0 || m == 0 || delta <= 0.0 || delta >= 1.0) {
    throw std::invalid_argument("vc_term: need d > 0, N >= 1, m >= 1, delta in (0,1)");
  }
  const double nm = static_cast<double>(n_sources) * static_cast<double>(m);
  return 4.0 * std::sqrt((2.0 * d * std::log(2.0 * nm) + std::log(4.0 / delta)) / nm);
}

// ---------------------------------------------------------------------------
// Bound assembly
// ---------------------------------------------------------------------------

BoundReport assemble_bound(double source_error, std::vector<PerSourceTerms> per_source,
                           double vc_dim, std::size_t m, double delta, std::string mode) {
  BoundReport r;
  r.source_error = source_error;
  r.per_source = std::move(per_source);
  r.N = r.per_source.size();
  r.m = m;
  r.delta = delta;
  r.vc_dim = vc_dim;
  r.mode = std::move(mode);
  r.vc_term = fada::vc_term(vc_dim, r.N, m, delta);
  double alpha_sum = 0.0;
  r.total = r.source_error + r.vc_term;
  for (const PerSourceTerms& t : r.per_source) {
    r.total += t.alpha * (0.5 * t.divergence + t.lambda);
    alpha_sum += t.alpha;
    if (t.alpha < 0.0) throw std::invalid_argument("assemble_bound: negative alpha");
  }
  if (std::fabs(alpha_sum - 1.0) > 1e-9) {
    throw std::invalid_argument("assemble_bound: alpha must sum to 1, got " +
                                std::to_string(alpha_sum));
  }
  return r;
}

std::string bound_report_json(const BoundReport& report) {
  nlohmann::json j;
  j["source_error"] = report.source_error;
  j["per_source"] = nlohmann::json::array();
  for (const PerSourceTerms& t : report.per_source) {
    j["per_source"].push_back(
        {{"alpha", t.alpha}, {"divergence", t.divergence}, {"lambda", t.lambda}});
  }
  j["vc_term"] = report.vc_term;
  j["total"] = report.total;
  j["delta"] = report.delta;
  j["m"] = report.m;
  j["N"] = report.N;
  j["vc_dim"] = report.vc_dim;
  j["mode"] = report.mode;
  if (report.true_target_error) j["true_target_error"] = *report.true_target_error;
  return j.dump(2);
}

// ---------------------------------------------------------------------------
// Finite-class instances
// ---------------------------------------------------------------------------

namespace {

std::vector<double> random_simplex(RngStream& rng, std::size_t n, double concentration) {
  std::vector<double> w(n);
  double s = 0.0;
  for (double& v : w) {
    v = std::exp(concentration * rng.normal());
    s += v;
  }
  for (double& v : w) v /= s;
  return w;
}

std::size_t sample_index(std::span<const double> probs, RngStream& rng) {
  const double u = rng.uniform01();
  double acc = 0.0;
  for (std::size_t i = 0; i < probs.size(); ++i) {
    acc += probs[i];
    if (u < acc) return i;
  }
  return probs.size() - 1;
}

}  // namespace

FiniteInstance random_finite_instance(RngStream& rng, const RandomInstanceOptions& opts) {
  FiniteInstance inst;
  const bool use_stumps = opts.allow_stumps && rng.uniform01() < 0.3;
  const std::size_t dims = use_stumps ? 2 : 1;
  inst.cls = use_stumps ? FiniteHypothesisClass::stumps(dims, 16, 0.0, 1.0)
                        : FiniteHypothesisClass::thresholds(64, 0.0, 1.0);

  const std::size_t s = opts.support_points;
  inst.support = Matrix(s, dims);
  for (double& v : inst.support.data) v = rng.uniform01();

  // ground truth: realizable half the time, noisy labels otherwise
  inst.labels.resize(s);
  if (rng.uniform01() < 0.5) {
    const auto& hyps = inst.cls.hypotheses();
    const Hypothesis& g = hyps[rng.uniform_index(hyps.size())];
    for (std::size_t i = 0; i < s; ++i) inst.labels[i] = g.predict(inst.support.row(i)) ? 1 : 0;
  } else {
    for (std::size_t i = 0; i < s; ++i) inst.labels[i] = rng.uniform01() < 0.5 ? 1 : 0;
  }

  const std::size_t n_sources = 1 + rng.uniform_index(opts.max_sources);
  inst.source_probs.resize(n_sources);
  for (auto& p : inst.source_probs) p = random_simplex(rng, s, 1.0);
  inst.target_probs = random_simplex(rng, s, 1.0);
  inst.alpha = random_simplex(rng, n_sources, 0.5);
  inst.m = opts.m_min + rng.uniform_index(opts.m_max - opts.m_min + 1);
  inst.delta = opts.delta;
  return inst;
}

InstanceEvaluation evaluate_finite_instance(const FiniteInstance& inst, RngStream& sample_rng) {
  const std::size_t n_sources = inst.source_probs.size();
  const std::size_t dims = inst.support.cols;

  // 1. draw m points per domain
  auto draw = [&](std::span<const double> probs) {
    Matrix pts(inst.m, dims);
    std::vector<int> labels(inst.m);
    for (std::size_t i = 0; i < inst.m; ++i) {
      const std::size_t ix = sample_index(probs, sample_rng);
      auto src = inst.support.row(ix);
      std::copy(src.begin(), src.end(), pts.row(i).begin());
      labels[i] = inst.labels[ix];
    }
    return std::pair<Matrix, std::vector<int>>(std::move(pts), std::move(labels));
  };

  std::vector<Matrix> src_pts(n_sources);
  std::vector<std::vector<int>> src_labels(n_sources);
  for (std::size_t i = 0; i < n_sources; ++i) {
    auto [p, l] = draw(inst.source_probs[i]);
    src_pts[i] = std::move(p);
    src_labels[i] = std::move(l);
  }
  auto [tgt_pts, tgt_labels] = draw(inst.target_probs);
  (void)tgt_labels;  // unlabeled in the protocol; truth evaluated on the distribution

  // 2. per-source empirical risk minimizers (ties -> first in enumeration order)
  InstanceEvaluation ev;
  const auto& hyps = inst.cls.hypotheses();
  for (std::size_t i = 0; i < n_sources; ++i) {
    double best = 2.0;
    const Hypothesis* best_h = &hyps[0];
    for (const Hypothesis& h : hyps) {
      const double e = empirical_error(h, src_pts[i], src_labels[i]);
      if (e < best) {
        best = e;
        best_h = &h;
      }
    }
    ev.source_hypotheses.push_back(*best_h);
  }

  // 3. h_T = alpha-weighted vote (ties predict 1)
  auto h_T = [&](std::span<const double> x) {
    double v = 0.0;
    for (std::size_t i = 0; i < n_sources; ++i) {
      v += inst.alpha[i] * (ev.source_hypotheses[i].predict(x) ? 1.0 : 0.0);
    }
    return v >= 0.5 ? 1 : 0;
  };

  // 4. empirical error of h_T on the alpha-weighted source mixture
  double source_error = 0.0;
  for (std::size_t i = 0; i < n_sources; ++i) {
    std::size_t wrong = 0;
    for (std::size_t r = 0; r < inst.m; ++r) {
      wrong += h_T(src_pts[i].row(r)) != src_labels[i][r];
    }
    source_error += inst.alpha[i] * static_cast<double>(wrong) / static_cast<double>(inst.m);
  }

  // 5-6. per-source divergence (empirical) and lambda (exact on distributions)
  std::vector<PerSourceTerms> per_source(n_sources);
  const WeightedSample wt = WeightedSample::uniform(tgt_pts);
  for (std::size_t i = 0; i < n_sources; ++i) {
    per_source[i].alpha = inst.alpha[i];
    per_source[i].divergence =
        h_delta_h_divergence_exact(inst.cls, WeightedSample::uniform(src_pts[i]), wt);
    double best = 2.0;
    for (const Hypothesis& h : hyps) {
      double rs = 0.0, rt = 0.0;
      for (std::size_t p = 0; p < inst.support.rows; ++p) {
        const int pred = h.predict(inst.support.row(p)) ? 1 : 0;
        if (pred != inst.labels[p]) {
          rs += inst.source_probs[i][p];
          rt += inst.target_probs[p];
        }
      }
      best = std::min(best, rs + rt);
    }
    per_source[i].lambda = best;
  }

  ev.report = assemble_bound(source_error, std::move(per_source), inst.cls.vc_dim(), inst.m,
                             inst.delta, "certified-finite-class");

  // true target error of h_T on the target distribution
  double true_err = 0.0;
  for (std::size_t p = 0; p < inst.support.rows; ++p) {
    if (h_T(inst.support.row(p)) != inst.labels[p]) true_err += inst.target_probs[p];
  }
  ev.true_target_error = true_err;
  ev.report.true_target_error = true_err;
  ev.bound_holds = ev.report.total >= true_err - 1e-12;
  return ev;
}

MixtureCheck mixture_inequality_check(const FiniteHypothesisClass& cls,
                                      std::span<const Matrix> source_samples,
                                      const Matrix& target_sample, std::span<const double> alpha) {
  if (source_samples.size() != alpha.size() || source_samples.empty()) {
    throw std::invalid_argument("mixture_inequality_check: sources/alpha size mismatch");
  }
  MixtureCheck out;
  const WeightedSample wt = WeightedSample::uniform(target_sample);
  out.lhs = h_delta_h_divergence_exact(cls, WeightedSample::mixture(source_samples, alpha), wt);
  out.rhs = 0.0;
  for (std::size_t i = 0; i < source_samples.size(); ++i) {
    out.rhs +=
        alpha[i] * h_delta_h_divergence_exact(cls, WeightedSample::uniform(source_samples[i]), wt);
  }
  out.holds = out.lhs <= out.rhs + 1e-9;
  return out;
}

}  // namespace fada
