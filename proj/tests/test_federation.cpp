#include <cstdlib>

#include "doctest.h"
#include "fada/federation.hpp"
#include "fada/losses.hpp"

using namespace fada;

namespace {

RunConfig tiny_config() {
  RunConfig c;
  c.seed = 7;
  DomainSpec s0, s1, tgt;
  s0.rotation_deg = 0.0;
  s1.rotation_deg = 20.0;
  tgt.rotation_deg = 40.0;
  c.sources = {s0, s1};
  c.target = tgt;
  c.n_per_domain = 128;
  c.noise_sigma = 0.1;
  c.eval_fraction = 0.25;
  c.width_scale = 0.25;
  c.rounds = 3;
  c.batch_size = 16;
  c.local_steps = 1;
  c.pretrain_epochs = 1;
  c.probe_size = 16;
  c.lr = 0.05;
  c.momentum = 0.9;
  return c;
}

}  // namespace

TEST_CASE("aggregate_parameters matches the delta-form arithmetic") {
  SUBCASE("all sources identical to the target leave it unchanged") {
    std::vector<double> sync = {1.0, -2.0};
    std::vector<std::vector<double>> snaps = {{1.0, -2.0}, {1.0, -2.0}};
    std::vector<double> mask = {0.3, 0.7};
    auto out = aggregate_parameters(sync, snaps, sync, mask);
    CHECK(out == sync);
  }
  SUBCASE("scalar sources 0 and 2 with mask (.5,.5) land at 1") {
    std::vector<double> sync = {0.0};
    std::vector<std::vector<double>> snaps = {{0.0}, {2.0}};
    std::vector<double> mask = {0.5, 0.5};
    auto out = aggregate_parameters(sync, snaps, sync, mask);
    CHECK(out[0] == doctest::Approx(1.0));
  }
  SUBCASE("degenerate mask (1,0) adopts source 1 exactly") {
    std::vector<double> sync = {5.0, 5.0};
    std::vector<std::vector<double>> snaps = {{1.25, -3.5}, {9.0, 9.0}};
    std::vector<double> mask = {1.0, 0.0};
    auto out = aggregate_parameters(sync, snaps, sync, mask);
    CHECK(out[0] == 1.25);
    CHECK(out[1] == -3.5);
  }
  SUBCASE("from the synchronized point every coordinate is a convex combination") {
    RngStream rng(3);
    for (int t = 0; t < 30; ++t) {
      const std::size_t n = 6, k = 3;
      std::vector<double> sync(n);
      for (double& v : sync) v = rng.uniform(-1, 1);
      std::vector<std::vector<double>> snaps(k, std::vector<double>(n));
      for (auto& s : snaps)
        for (double& v : s) v = rng.uniform(-2, 2);
      std::vector<double> mask(k);
      double ms = 0;
      for (double& a : mask) {
        a = rng.uniform01() + 0.01;
        ms += a;
      }
      for (double& a : mask) a /= ms;
      auto out = aggregate_parameters(sync, snaps, sync, mask);
      for (std::size_t j = 0; j < n; ++j) {
        double lo = 1e300, hi = -1e300;
        for (std::size_t i = 0; i < k; ++i) {
          lo = std::min(lo, snaps[i][j]);
          hi = std::max(hi, snaps[i][j]);
        }
        // target-at-sync counts as one endpoint of the combination
        lo = std::min(lo, sync[j]);
        hi = std::max(hi, sync[j]);
        CHECK(out[j] >= lo - 1e-12);
        CHECK(out[j] <= hi + 1e-12);
      }
    }
  }
  SUBCASE("uniform mask is plain federated averaging") {
    std::vector<double> sync = {0.0, 0.0};
    std::vector<std::vector<double>> snaps = {{3.0, 0.0}, {0.0, 6.0}, {3.0, 3.0}};
    std::vector<double> mask = {1.0 / 3, 1.0 / 3, 1.0 / 3};
    auto out = aggregate_parameters(sync, snaps, sync, mask);
    CHECK(out[0] == doctest::Approx(2.0));
    CHECK(out[1] == doctest::Approx(3.0));
  }
  SUBCASE("shape and mask violations throw") {
    std::vector<double> sync = {0.0};
    std::vector<std::vector<double>> snaps = {{1.0, 2.0}};
    std::vector<double> mask = {1.0};
    CHECK_THROWS_AS(aggregate_parameters(sync, snaps, sync, mask), ShapeError);
    std::vector<std::vector<double>> ok = {{1.0}};
    std::vector<double> bad_mask = {0.5};
    CHECK_THROWS_AS(aggregate_parameters(sync, ok, sync, bad_mask), std::invalid_argument);
  }
}

TEST_CASE("config parsing and validation") {
  SUBCASE("unknown keys are rejected with their field path") {
    try {
      parse_run_config(R"({"seed": 1, "bogus_key": 2})");
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("bogus_key") != std::string::npos);
    }
  }
  SUBCASE("nested unknown keys carry the full path") {
    try {
      parse_run_config(R"({"loss_weights": {"task": 1.0, "typo": 2}})");
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("loss_weights.typo") != std::string::npos);
    }
  }
  SUBCASE("ablation flags must be monotone") {
    const char* text = R"({
      "sources": [{"kind": "moons"}], "target": {"kind": "moons", "rotation_deg": 30},
      "ablation": {"attention": true, "adversarial": false, "disentangle": true}
    })";
    CHECK_THROWS_AS(parse_run_config(text), ConfigError);
  }
  SUBCASE("paper-scale dataset names are rejected with a pointer to the generators") {
    const char* text = R"({
      "sources": [{"kind": "csv", "path": "mnist_train.csv"}],
      "target": {"kind": "moons"}
    })";
    try {
      parse_run_config(text);
      FAIL("expected ConfigError");
    } catch (const ConfigError& e) {
      CHECK(std::string(e.what()).find("desk-scale") != std::string::npos);
    }
  }
  SUBCASE("FADA_SEED overrides the configured seed") {
    setenv("FADA_SEED", "4242", 1);
    RunConfig c = parse_run_config(R"({
      "seed": 1, "sources": [{"kind": "moons"}], "target": {"kind": "moons", "rotation_deg": 30}
    })");
    unsetenv("FADA_SEED");
    CHECK(c.seed == 4242);
  }
  SUBCASE("named ladder rungs map to the cumulative flags") {
    bool source_only = false;
    AblationFlags f = ablation_by_name("model_ii", &source_only);
    CHECK_FALSE(source_only);
    CHECK(f.attention);
    CHECK(f.adversarial);
    CHECK_FALSE(f.disentangle);
    ablation_by_name("source_only", &source_only);
    CHECK(source_only);
    CHECK_THROWS_AS(ablation_by_name("model_iv"), ConfigError);
  }
}

TEST_CASE("require_broadcast guards the adversarial step") {
  AblationFlags on{true, true, false};
  AblationFlags off{true, false, false};
  CHECK_THROWS_AS(require_broadcast(on, nullptr, 3), ProtocolError);
  Message stale{MessageKind::FeatureBatch, "target", "source_0", 2, "target-features",
                Matrix(1, 4), 0};
  CHECK_THROWS_AS(require_broadcast(on, &stale, 3), ProtocolError);
  Message wrong_kind{MessageKind::ScalarReport, "target", "source_0", 3, "target-features",
                     Matrix(1, 1), 0};
  CHECK_THROWS_AS(require_broadcast(on, &wrong_kind, 3), ProtocolError);
  Message good{MessageKind::FeatureBatch, "target", "source_0", 3, "target-features",
               Matrix(1, 4), 0};
  CHECK_NOTHROW(require_broadcast(on, &good, 3));
  CHECK_NOTHROW(require_broadcast(off, nullptr, 3));
}

TEST_CASE("zero rounds leave the target bundle at its initialization") {
  RunConfig c = tiny_config();
  c.rounds = 0;
  c.pretrain_epochs = 0;
  auto fresh = build_world(c);
  auto artifacts = run_federation(c);
  CHECK(artifacts.rounds.empty());
  CHECK(artifacts.world->target_bundle.shared_state() == fresh->target_bundle.shared_state());
}

TEST_CASE("zero learning rate is a parameter fixed point for the whole round") {
  RunConfig c = tiny_config();
  c.lr = 0.0;
  c.momentum = 0.0;
  c.rounds = 2;
  c.pretrain_epochs = 1;
  auto fresh = build_world(c);
  auto artifacts = run_federation(c);
  // trainable parameters stay bit-for-bit; batchnorm buffers move with the
  // data they observe regardless of the optimizer
  auto params_of = [](ModelBundle& b) {
    std::vector<double> out;
    for (Component* comp : b.shared_components()) {
      comp->visit_params([&](const std::string&, Tensor& t) {
        out.insert(out.end(), t.data().begin(), t.data().end());
      });
    }
    return out;
  };
  CHECK(params_of(artifacts.world->target_bundle) == params_of(fresh->target_bundle));
}

TEST_CASE("task cross-entropy falls on a linearly separable toy set") {
  RunConfig c;
  c.seed = 11;
  DomainSpec s, t;
  s.kind = "gaussians";
  s.cov_scale = 0.3;
  t.kind = "gaussians";
  t.cov_scale = 0.3;
  c.sources = {s};
  c.target = t;
  c.n_per_domain = 256;
  c.classes = 2;
  c.width_scale = 0.25;
  c.rounds = 12;
  c.batch_size = 32;
  c.pretrain_epochs = 0;
  c.lr = 0.01;
  c.momentum = 0.0;
  c.ablation = ablation_by_name("source_only");
  auto artifacts = run_federation(c);
  const double first = artifacts.rounds.front().node_metrics[0].task_ce;
  const double last = artifacts.rounds.back().node_metrics[0].task_ce;
  CHECK(last < first);
  CHECK(artifacts.final_target_accuracy > 0.9);
}

TEST_CASE("metrics are byte-identical across reruns and across --jobs") {
  RunConfig c = tiny_config();
  c.rounds = 2;
  auto a1 = run_federation(c);
  auto a2 = run_federation(c);
  CHECK(a1.metrics_csv() == a2.metrics_csv());
  CHECK(a1.mask_history_csv() == a2.mask_history_csv());
  CHECK(a1.messages_jsonl(true) == a2.messages_jsonl(true));

  RunConfig cp = c;
  cp.jobs = 4;
  auto a3 = run_federation(cp);
  CHECK(a1.metrics_csv() == a3.metrics_csv());
  CHECK(a1.messages_jsonl(true) == a3.messages_jsonl(true));
}

TEST_CASE("metrics csv has one row per (round, node) and attention-off masks stay uniform") {
  RunConfig c = tiny_config();
  c.rounds = 4;
  c.ablation = ablation_by_name("source_only");
  auto artifacts = run_federation(c);
  // R * (N + 1) data rows
  const std::string csv = artifacts.metrics_csv();
  const auto rows = std::count(csv.begin(), csv.end(), '\n') - 1;
  CHECK(rows == 4 * 3);
  for (const RoundRecord& r : artifacts.rounds) {
    for (double m : r.mask) CHECK(m == doctest::Approx(0.5));
    CHECK(r.node_metrics[0].adv_di == 0.0);
    CHECK(r.node_metrics[0].ent == 0.0);
  }
}

TEST_CASE("mask history rows always sum to one across a full run") {
  RunConfig c = tiny_config();
  c.rounds = 5;
  auto artifacts = run_federation(c);
  for (const RoundRecord& r : artifacts.rounds) {
    double s = 0.0;
    for (double m : r.mask) s += m;
    CHECK(s == doctest::Approx(1.0).epsilon(1e-12));
  }
}

TEST_CASE("privacy audit") {
  RunConfig c = tiny_config();
  c.rounds = 2;
  auto artifacts = run_federation(c);

  SUBCASE("a standard run passes") {
    auto report = privacy_audit(artifacts.messages, *artifacts.world);
    CHECK(report.ok);
    CHECK(report.messages_scanned == artifacts.messages.size());
    CHECK(report.messages_scanned > 0);
  }
  SUBCASE("feature batches carry generator width, not input width") {
    bool saw_feature_batch = false;
    for (const Message& m : artifacts.messages) {
      if (m.kind != MessageKind::FeatureBatch) continue;
      saw_feature_batch = true;
      CHECK(m.payload.cols == artifacts.world->model_spec.feature_dim);
      CHECK(m.payload.cols != artifacts.world->model_spec.input_dim);
    }
    CHECK(saw_feature_batch);
  }
  SUBCASE("a planted raw-data message is detected exactly once with round and sender") {
    auto messages = artifacts.messages;
    Message evil;
    evil.kind = MessageKind::ScalarReport;
    evil.sender = "source_1";
    evil.receiver = "orchestrator";
    evil.round = 1;
    evil.label = "exfiltration";
    // leak one raw training row
    const Matrix& priv = artifacts.world->source_data[1].train.features;
    evil.payload = Matrix(1, priv.cols, std::vector<double>(priv.row(3).begin(), priv.row(3).end()));
    messages.push_back(evil);
    auto report = privacy_audit(messages, *artifacts.world);
    CHECK_FALSE(report.ok);
    REQUIRE(report.violations.size() == 1);
    CHECK(report.violations[0].round == 1);
    CHECK(report.violations[0].sender == "source_1");
  }
}

TEST_CASE("single-source degenerate run matches plain centralized training to 1e-12") {
  RunConfig c;
  c.seed = 31;
  DomainSpec s, t;
  s.rotation_deg = 0.0;
  t.rotation_deg = 30.0;
  c.sources = {s};
  c.target = t;
  c.n_per_domain = 128;
  c.width_scale = 0.25;
  c.rounds = 6;
  c.batch_size = 16;
  c.pretrain_epochs = 2;
  c.lr = 0.05;
  c.momentum = 0.9;
  c.ablation = ablation_by_name("source_only");

  auto fed = run_federation(c);

  // independent centralized loop over an identically-initialized world
  auto world = build_world(c);
  ModelBundle& model = world->source_bundles[0];
  RngStream& rng = world->node_streams[0];
  const DomainDataset& train = world->source_data[0].train;
  SgdOptimizer opt(SgdOptions{c.lr, c.momentum});
  auto step_params = [&] {
    std::vector<Tensor> ps = model.generator.params();
    auto cs = model.classifier.params();
    ps.insert(ps.end(), cs.begin(), cs.end());
    return ps;
  }();
  auto all_params = [&] {
    std::vector<Tensor> ps = model.generator.params();
    for (Component* comp : {&model.disentangler, &model.classifier}) {
      auto more = comp->params();
      ps.insert(ps.end(), more.begin(), more.end());
    }
    return ps;
  }();

  auto task_step = [&](const Matrix& x, const std::vector<int>& y) {
    RecordScope rec;
    Tensor probs = classify(model, batch_tensor(x), Mode::train, &rng);
    Tensor loss = scale(ce_loss(probs, y), c.loss_weights.task);
    for (Tensor& p : all_params) p.zero_grad();
    rec.graph().backward(loss);
    opt.step(step_params);
    for (Tensor& p : all_params) p.zero_grad();
  };

  for (std::size_t epoch = 0; epoch < c.pretrain_epochs; ++epoch) {
    auto perm = rng.permutation(static_cast<std::uint32_t>(train.size()));
    for (std::size_t start = 0; start + 2 <= perm.size(); start += c.batch_size) {
      const std::size_t len = std::min(c.batch_size, perm.size() - start);
      if (len < 2) break;
      std::vector<std::size_t> idx(perm.begin() + static_cast<std::ptrdiff_t>(start),
                                   perm.begin() + static_cast<std::ptrdiff_t>(start + len));
      Matrix x = train.features.gather_rows(idx);
      std::vector<int> y(len);
      for (std::size_t r = 0; r < len; ++r) y[r] = (*train.labels)[idx[r]];
      task_step(x, y);
    }
  }
  for (std::size_t round = 0; round < c.rounds; ++round) {
    std::vector<std::size_t> idx(c.batch_size);
    for (auto& ix : idx) ix = static_cast<std::size_t>(rng.uniform_index(train.size()));
    Matrix x = train.features.gather_rows(idx);
    std::vector<int> y(c.batch_size);
    for (std::size_t r = 0; r < c.batch_size; ++r) y[r] = (*train.labels)[idx[r]];
    task_step(x, y);
  }

  auto fed_state = fed.world->target_bundle.shared_state();
  auto oracle_state = model.shared_state();
  REQUIRE(fed_state.size() == oracle_state.size());
  double max_diff = 0.0;
  for (std::size_t i = 0; i < fed_state.size(); ++i) {
    max_diff = std::max(max_diff, std::fabs(fed_state[i] - oracle_state[i]));
  }
  CHECK(max_diff < 1e-12);
}

TEST_CASE("bound evaluation emits an estimated-mode report at a synchronized round") {
  RunConfig c = tiny_config();
  c.rounds = 2;
  c.evaluate_bound = true;
  c.lambda_epochs = 1;
  auto artifacts = run_federation(c);
  REQUIRE(artifacts.bound.has_value());
  CHECK(artifacts.bound->mode == "estimated-neural");
  CHECK(artifacts.bound->N == 2);
  double readd = artifacts.bound->source_error + artifacts.bound->vc_term;
  for (const auto& t : artifacts.bound->per_source) readd += t.alpha * (0.5 * t.divergence + t.lambda);
  CHECK(artifacts.bound->total == doctest::Approx(readd).epsilon(1e-12));
}
