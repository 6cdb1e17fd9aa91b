#include "fada/federation.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <thread>

#include "json.hpp"

namespace fada {

using nlohmann::json;

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

std::string source_name(std::size_t i) { return "source_" + std::to_string(i); }

}  // namespace

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

void RunConfig::validate() const {
  auto fail = [](const std::string& path, const std::string& why) {
    throw ConfigError("config." + path + ": " + why);
  };
  if (sources.empty()) fail("sources", "need at least one source domain");
  if (n_per_domain < 8) fail("n_per_domain", "too small (need >= 8)");
  if (n_per_domain % 2 != 0) fail("n_per_domain", "must be even for the moons generator");
  if (eval_fraction <= 0.0 || eval_fraction >= 1.0) fail("eval_fraction", "must be in (0,1)");
  if (model_family != "mlp" && model_family != "digit") {
    fail("model_family", "unknown family '" + model_family + "' (mlp | digit)");
  }
  if (width_scale <= 0.0 || width_scale > 4.0) fail("width_scale", "must be in (0,4]");
  if (classes < 2) fail("classes", "need at least two classes");
  if (lr < 0.0) fail("lr", "must be nonnegative");
  if (momentum < 0.0 || momentum >= 1.0) fail("momentum", "must be in [0,1)");
  if (batch_size < 2) fail("batch_size", "batchnorm needs batches of at least 2");
  if (local_steps == 0) fail("local_steps", "must be >= 1");
  if (ablation.disentangle && !ablation.adversarial) {
    fail("ablation.disentangle", "requires adversarial (cumulative ladder)");
  }
  if (ablation.adversarial && !ablation.attention) {
    fail("ablation.adversarial", "requires attention (cumulative ladder)");
  }
  const double floor_limit = 1.0 / static_cast<double>(sources.size());
  if (attention_floor >= 0.0 && attention_floor > floor_limit) {
    fail("attention_floor", "must not exceed 1/N");
  }
  if (probe_size < 8) fail("probe_size", "too small (need >= 8)");
  if (kmeans_restarts == 0) fail("kmeans_restarts", "must be >= 1");
  if (bound_delta <= 0.0 || bound_delta >= 1.0) fail("bound_delta", "must be in (0,1)");
  if (jobs == 0) fail("jobs", "must be >= 1");
  for (std::size_t i = 0; i < sources.size(); ++i) {
    const auto& d = sources[i];
    const std::string p = "sources[" + std::to_string(i) + "]";
    if (d.kind != "moons" && d.kind != "gaussians" && d.kind != "csv") {
      fail(p + ".kind", "unknown generator '" + d.kind + "'");
    }
    if (d.kind == "csv" && d.path.empty()) fail(p + ".path", "csv domains need a path");
  }
  static const char* kPaperScale[] = {"mnist",      "svhn",          "usps",     "digit-five",
                                      "digit_five", "office-caltech", "domainnet", "amazon"};
  auto reject_paper_scale = [&](const DomainSpec& d, const std::string& p) {
    std::string low = d.kind + " " + d.path;
    std::transform(low.begin(), low.end(), low.begin(), ::tolower);
    for (const char* name : kPaperScale) {
      if (low.find(name) != std::string::npos) {
        fail(p, std::string("paper-scale dataset '") + name +
                    "' is out of scope; use the desk-scale generators (moons, gaussians)");
      }
    }
  };
  for (std::size_t i = 0; i < sources.size(); ++i) {
    reject_paper_scale(sources[i], "sources[" + std::to_string(i) + "]");
  }
  reject_paper_scale(target, "target");
}

namespace {

void reject_unknown_keys(const json& j, const std::set<std::string>& allowed,
                         const std::string& path) {
  if (!j.is_object()) throw ConfigError("config." + path + ": expected an object");
  for (const auto& [key, _] : j.items()) {
    if (!allowed.count(key)) {
      throw ConfigError("config." + (path.empty() ? key : path + "." + key) + ": unknown key");
    }
  }
}

DomainSpec parse_domain(const json& j, const std::string& path) {
  reject_unknown_keys(j, {"kind", "rotation_deg", "shift", "cov_scale", "path", "shuffle_labels"},
                      path);
  DomainSpec d;
  d.kind = j.value("kind", "moons");
  d.rotation_deg = j.value("rotation_deg", 0.0);
  if (j.contains("shift")) d.shift = j["shift"].get<std::vector<double>>();
  d.cov_scale = j.value("cov_scale", 0.5);
  d.path = j.value("path", "");
  d.shuffle_labels = j.value("shuffle_labels", false);
  return d;
}

}  // namespace

RunConfig parse_run_config(const std::string& json_text) {
  json j;
  try {
    j = json::parse(json_text);
  } catch (const json::parse_error& e) {
    throw ConfigError(std::string("config: invalid JSON: ") + e.what());
  }
  reject_unknown_keys(
      j,
      {"seed", "sources", "target", "n_per_domain", "noise_sigma", "eval_fraction", "model_family",
       "width_scale", "classes", "image_hw", "image_channels", "loss_weights", "lr", "momentum",
       "rounds", "batch_size", "local_steps", "pretrain_epochs", "ablation", "attention_floor",
       "attention_k", "probe_size", "kmeans_restarts", "kmeans_max_iters", "evaluate_bound",
       "bound_delta", "lambda_epochs", "out_dir", "jobs", "audit_full"},
      "");

  RunConfig c;
  c.seed = j.value("seed", 1ull);
  if (j.contains("sources")) {
    if (!j["sources"].is_array()) throw ConfigError("config.sources: expected an array");
    for (std::size_t i = 0; i < j["sources"].size(); ++i) {
      c.sources.push_back(parse_domain(j["sources"][i], "sources[" + std::to_string(i) + "]"));
    }
  }
  if (j.contains("target")) c.target = parse_domain(j["target"], "target");
  c.n_per_domain = j.value("n_per_domain", c.n_per_domain);
  c.noise_sigma = j.value("noise_sigma", c.noise_sigma);
  c.eval_fraction = j.value("eval_fraction", c.eval_fraction);
  c.model_family = j.value("model_family", c.model_family);
  c.width_scale = j.value("width_scale", c.width_scale);
  c.classes = j.value("classes", c.classes);
  c.image_hw = j.value("image_hw", c.image_hw);
  c.image_channels = j.value("image_channels", c.image_channels);
  if (j.contains("loss_weights")) {
    reject_unknown_keys(j["loss_weights"], {"task", "adv", "ent", "mi", "recon"}, "loss_weights");
    c.loss_weights.task = j["loss_weights"].value("task", c.loss_weights.task);
    c.loss_weights.adv = j["loss_weights"].value("adv", c.loss_weights.adv);
    c.loss_weights.ent = j["loss_weights"].value("ent", c.loss_weights.ent);
    c.loss_weights.mi = j["loss_weights"].value("mi", c.loss_weights.mi);
    c.loss_weights.recon = j["loss_weights"].value("recon", c.loss_weights.recon);
  }
  c.lr = j.value("lr", c.lr);
  c.momentum = j.value("momentum", c.momentum);
  c.rounds = j.value("rounds", c.rounds);
  c.batch_size = j.value("batch_size", c.batch_size);
  c.local_steps = j.value("local_steps", c.local_steps);
  c.pretrain_epochs = j.value("pretrain_epochs", c.pretrain_epochs);
  if (j.contains("ablation")) {
    if (j["ablation"].is_string()) {
      c.ablation = ablation_by_name(j["ablation"].get<std::string>());
    } else {
      reject_unknown_keys(j["ablation"], {"attention", "adversarial", "disentangle"}, "ablation");
      c.ablation.attention = j["ablation"].value("attention", c.ablation.attention);
      c.ablation.adversarial = j["ablation"].value("adversarial", c.ablation.adversarial);
      c.ablation.disentangle = j["ablation"].value("disentangle", c.ablation.disentangle);
    }
  }
  c.attention_floor = j.value("attention_floor", c.attention_floor);
  c.attention_k = j.value("attention_k", c.attention_k);
  c.probe_size = j.value("probe_size", c.probe_size);
  c.kmeans_restarts = j.value("kmeans_restarts", c.kmeans_restarts);
  c.kmeans_max_iters = j.value("kmeans_max_iters", c.kmeans_max_iters);
  c.evaluate_bound = j.value("evaluate_bound", c.evaluate_bound);
  c.bound_delta = j.value("bound_delta", c.bound_delta);
  c.lambda_epochs = j.value("lambda_epochs", c.lambda_epochs);
  c.out_dir = j.value("out_dir", c.out_dir);
  c.jobs = j.value("jobs", c.jobs);
  c.audit_full = j.value("audit_full", c.audit_full);

  if (const char* env_seed = std::getenv("FADA_SEED")) {
    c.seed = std::strtoull(env_seed, nullptr, 10);
  }
  c.validate();
  return c;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("config: cannot open " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_run_config(ss.str());
}

AblationFlags ablation_by_name(const std::string& name, bool* source_only) {
  if (source_only) *source_only = name == "source_only";
  if (name == "source_only") return {false, false, false};
  if (name == "model_i") return {true, false, false};
  if (name == "model_ii") return {true, true, false};
  if (name == "model_iii") return {true, true, true};
  throw ConfigError("config.ablation: unknown ladder rung '" + name +
                    "' (source_only | model_i | model_ii | model_iii)");
}

// ---------------------------------------------------------------------------
// Messages
// ---------------------------------------------------------------------------

const char* message_kind_name(MessageKind k) {
  switch (k) {
    case MessageKind::ParamSnapshot: return "ParamSnapshot";
    case MessageKind::ParamDelta: return "ParamDelta";
    case MessageKind::FeatureBatch: return "FeatureBatch";
    case MessageKind::ScalarReport: return "ScalarReport";
  }
  return "?";
}

void MessageLog::append(Message m) {
  std::lock_guard<std::mutex> lock(mu_);
  // Sequence numbers count per channel: every (sender, receiver) pair is
  // driven by a single worker, so the numbering is schedule-independent.
  m.seq = next_seq_[m.sender + "\x1f" + m.receiver]++;
  messages_.push_back(std::move(m));
}

std::vector<Message> MessageLog::sorted() const {
  std::lock_guard<std::mutex> lock(mu_);
  std::vector<Message> out = messages_;
  std::sort(out.begin(), out.end(), [](const Message& a, const Message& b) {
    if (a.round != b.round) return a.round < b.round;
    if (a.sender != b.sender) return a.sender < b.sender;
    if (a.receiver != b.receiver) return a.receiver < b.receiver;
    return a.seq < b.seq;
  });
  return out;
}

std::size_t MessageLog::size() const {
  std::lock_guard<std::mutex> lock(mu_);
  return messages_.size();
}

// ---------------------------------------------------------------------------
// World construction
// ---------------------------------------------------------------------------

namespace {

DomainDataset generate_domain(const DomainSpec& spec, const RunConfig& cfg, std::uint64_t seed,
                              const std::string& id) {
  DomainDataset ds;
  if (spec.kind == "moons") {
    ds = gen_rotated_moons(cfg.n_per_domain, spec.rotation_deg, cfg.noise_sigma, seed);
  } else if (spec.kind == "gaussians") {
    ds = gen_shifted_gaussians(cfg.n_per_domain, cfg.classes, spec.shift, spec.cov_scale, seed);
  } else {
    ds = ingest_csv(spec.path);
  }
  ds.domain_id = id;
  if (spec.shuffle_labels) ds = shuffle_labels(std::move(ds), splitmix64(seed ^ 0xfadau));
  return ds;
}

}  // namespace

std::unique_ptr<FederationWorld> build_world(const RunConfig& config) {
  config.validate();
  auto world = std::make_unique<FederationWorld>();
  world->config = config;

  const std::size_t n_sources = config.sources.size();
  std::size_t input_dim = 0;

  for (std::size_t i = 0; i < n_sources; ++i) {
    DomainDataset ds = generate_domain(config.sources[i], config,
                                       splitmix64(config.seed ^ (0x5eed0000ull + i)),
                                       source_name(i));
    if (!ds.labeled()) {
      throw ConfigError("config.sources[" + std::to_string(i) + "]: source domains need labels");
    }
    if (input_dim == 0) input_dim = ds.features.cols;
    if (ds.features.cols != input_dim) {
      throw ConfigError("config.sources[" + std::to_string(i) + "]: feature width " +
                        std::to_string(ds.features.cols) + " != " + std::to_string(input_dim));
    }
    auto split = split_dataset(ds, config.eval_fraction, splitmix64(config.seed ^ (0xab0000ull + i)));
    world->source_data.push_back({std::move(split.train), std::move(split.eval)});
  }

  DomainDataset tgt = generate_domain(config.target, config,
                                      splitmix64(config.seed ^ 0x7a59e7ull), "target");
  if (tgt.features.cols != input_dim) {
    throw ConfigError("config.target: feature width mismatch with sources");
  }
  auto tgt_split = split_dataset(tgt, config.eval_fraction, splitmix64(config.seed ^ 0xab77ull));
  if (!tgt_split.eval.labeled()) {
    throw ConfigError("config.target: oracle evaluation needs a labeled eval split");
  }
  world->target_data.eval = std::move(tgt_split.eval);
  world->target_data.train = std::move(tgt_split.train);
  // UFDA: the target train pool is unlabeled for every training path.
  world->target_data.train.labels.reset();

  world->orchestrator_stream = RngStream::derive(config.seed, "orchestrator");
  world->target_stream = RngStream::derive(config.seed, "node-target");

  // hold out the probe batch from the target train pool
  {
    Matrix& pool = world->target_data.train.features;
    const std::size_t probe_n = std::min(config.probe_size, pool.rows / 2);
    auto perm = world->orchestrator_stream.permutation(static_cast<std::uint32_t>(pool.rows));
    std::vector<std::size_t> probe_idx(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(probe_n));
    std::vector<std::size_t> rest_idx(perm.begin() + static_cast<std::ptrdiff_t>(probe_n), perm.end());
    world->probe = pool.gather_rows(probe_idx);
    pool = pool.gather_rows(rest_idx);
  }

  if (config.model_family == "mlp") {
    world->model_spec = make_mlp_model(input_dim, config.classes, config.width_scale);
  } else {
    world->model_spec =
        make_digit_model(config.image_channels, config.image_hw, config.classes, config.width_scale);
    if (input_dim != world->model_spec.input_dim) {
      throw ConfigError("config: digit family expects " +
                        std::to_string(world->model_spec.input_dim) + " features, data has " +
                        std::to_string(input_dim));
    }
  }

  for (std::size_t i = 0; i < n_sources; ++i) {
    world->node_streams.push_back(RngStream::derive(config.seed, "node", i));
    world->source_bundles.push_back(
        build_bundle(world->model_spec, Role::source, world->node_streams.back()));
  }
  world->target_bundle = build_bundle(world->model_spec, Role::target, world->target_stream);
  for (std::size_t i = 0; i < n_sources; ++i) {
    RngStream di_stream = RngStream::derive(config.seed, "pair-di", i);
    world->pair_dis.push_back(build_component(world->model_spec.domain_identifier, di_stream));
  }
  return world;
}

// ---------------------------------------------------------------------------
// Engine
// ---------------------------------------------------------------------------

namespace {

/// Flags the batchnorm-buffer positions inside a bundle's flattened shared
/// state. Trainable parameters aggregate in delta form; buffers are running
/// statistics and aggregate as weighted averages of their values (a delta sum
/// double-counts the target's own drift and can push variances negative).
std::vector<bool> shared_buffer_mask(const ModelBundle& b) {
  std::vector<bool> mask;
  for (const Component* c : b.shared_components()) {
    const std::size_t params = c->param_count();
    const std::size_t total = c->state_size();
    mask.insert(mask.end(), params, false);
    mask.insert(mask.end(), total - params, true);
  }
  return mask;
}

std::vector<Tensor> collect_params(std::initializer_list<Component*> comps) {
  std::vector<Tensor> out;
  for (Component* c : comps) {
    auto ps = c->params();
    out.insert(out.end(), ps.begin(), ps.end());
  }
  return out;
}

void zero_all(std::span<Tensor> params) {
  for (Tensor& t : params) t.zero_grad();
}

/// Sample a labeled batch (with replacement) from a dataset.
struct Batch {
  Matrix x;
  std::vector<int> y;
};

Batch sample_batch(const DomainDataset& ds, std::size_t batch_size, RngStream& rng) {
  Batch b;
  std::vector<std::size_t> idx(batch_size);
  for (auto& i : idx) i = static_cast<std::size_t>(rng.uniform_index(ds.size()));
  b.x = ds.features.gather_rows(idx);
  if (ds.labels) {
    b.y.resize(batch_size);
    for (std::size_t i = 0; i < batch_size; ++i) b.y[i] = (*ds.labels)[idx[i]];
  }
  return b;
}

Tensor input_tensor(const FederationWorld& world, const Matrix& x) {
  if (world.model_spec.conv_input) {
    return batch_image_tensor(x, world.model_spec.image_channels, world.model_spec.image_hw);
  }
  return batch_tensor(x);
}

/// Embeds a point matrix to invariant features through a bundle's
/// classification path in eval mode.
Matrix embed_invariant(const FederationWorld& world, ModelBundle& bundle, const Matrix& x) {
  Tensor xt = input_tensor(world, x);
  Tensor f = bundle.generator.forward(xt, Mode::eval, nullptr);
  Tensor t = bundle.disentangler.trunk.forward(f, Mode::eval, nullptr);
  Tensor inv = bundle.disentangler.branches.at(0).forward(t, Mode::eval, nullptr);
  return Matrix(inv.shape()[0], inv.shape()[1],
                std::vector<double>(inv.data().begin(), inv.data().end()));
}

Matrix embed_generator(const FederationWorld& world, ModelBundle& bundle, const Matrix& x) {
  Tensor xt = input_tensor(world, x);
  Tensor f = bundle.generator.forward(xt, Mode::eval, nullptr);
  return Matrix(f.shape()[0], f.shape()[1],
                std::vector<double>(f.data().begin(), f.data().end()));
}

Matrix tensor_to_matrix(const Tensor& t) {
  const std::size_t rows = t.shape().size() == 2 ? t.shape()[0] : 1;
  const std::size_t cols = t.size() / rows;
  return Matrix(rows, cols, std::vector<double>(t.data().begin(), t.data().end()));
}

Matrix state_payload(const std::vector<double>& state) {
  return Matrix(1, state.size(), state);
}

/// One task cross-entropy step (Algorithm 1 line 4): updates generator and
/// classifier through the invariant branch; the disentangler stays frozen.
double task_ce_step(FederationWorld& world, std::size_t i, const Batch& batch,
                    SgdOptimizer& opt, double weight) {
  ModelBundle& b = world.source_bundles[i];
  RngStream& rng = world.node_streams[i];
  auto step_params = collect_params({&b.generator, &b.classifier});
  auto all_params = collect_params({&b.generator, &b.disentangler, &b.classifier});
  RecordScope rec;
  Tensor probs = classify(b, input_tensor(world, batch.x), Mode::train, &rng);
  Tensor loss = scale(ce_loss(probs, batch.y), weight);
  zero_all(all_params);
  rec.graph().backward(loss);
  opt.step(step_params);
  zero_all(all_params);
  return loss.item() / (weight == 0.0 ? 1.0 : weight);
}

}  // namespace

void require_broadcast(const AblationFlags& flags, const Message* msg, std::size_t round) {
  if (!flags.adversarial) return;
  if (!msg || msg->kind != MessageKind::FeatureBatch || msg->label != "target-features") {
    throw ProtocolError("round " + std::to_string(round) +
                        ": source step started without the target feature broadcast");
  }
  if (msg->round != round) {
    throw ProtocolError("round " + std::to_string(round) + ": stale target features from round " +
                        std::to_string(msg->round));
  }
}

namespace {

/// Orchestrator-resident adversarial services: per-pair domain identifiers,
/// their optimizers, and the per-round target cotangents collected for the
/// barrier-phase generator update.
class Orchestrator {
 public:
  Orchestrator(FederationWorld& world, MessageLog& log)
      : world_(world), log_(log) {
    for (std::size_t i = 0; i < world.pair_dis.size(); ++i) {
      di_opts_.emplace_back(SgdOptions{world.config.lr, 0.0});
    }
    target_cots_.resize(world.pair_dis.size());
  }

  /// Two-step adversarial exchange for pair i. Runs on the calling source
  /// worker's thread; touches only pair-local state plus the (locked) log.
  /// Returns the cotangent of the Eq.5 source term w.r.t. the source features.
  Matrix exchange(std::size_t i, std::size_t round, const Matrix& f_source,
                  const Matrix& f_target, double& adv_di_out, double& adv_g_out) {
    Component& di = world_.pair_dis[i];
    auto di_params = di.params();

    log_.append({MessageKind::FeatureBatch, source_name(i), "orchestrator", round,
                 "source-features", f_source});

    // step 1 (Eq. 4): train the domain identifier on detached features
    {
      RecordScope rec;
      Tensor fs = batch_tensor(f_source);
      Tensor ft = batch_tensor(f_target);
      Tensor loss = adv_di_loss(di_source_prob(di, fs, Mode::train),
                                di_source_prob(di, ft, Mode::train));
      zero_all(di_params);
      rec.graph().backward(loss);
      di_opts_[i].step(di_params);
      zero_all(di_params);
      adv_di_out = loss.item();
    }

    // step 2 (Eq. 5): confusion cotangents under the updated identifier
    Matrix source_cot;
    {
      RecordScope rec;
      Tensor fs = batch_tensor(f_source);
      fs.set_requires_grad(true);
      Tensor ft = batch_tensor(f_target);
      ft.set_requires_grad(true);
      Tensor loss = adv_g_loss(di_source_prob(di, fs, Mode::train),
                               di_source_prob(di, ft, Mode::train));
      zero_all(di_params);
      rec.graph().backward(loss);
      adv_g_out = loss.item();
      source_cot = Matrix(f_source.rows, f_source.cols, fs.grad());
      target_cots_[i] = Matrix(f_target.rows, f_target.cols, ft.grad());
      zero_all(di_params);
    }

    log_.append({MessageKind::FeatureBatch, "orchestrator", source_name(i), round,
                 "feature-grad", source_cot});
    return source_cot;
  }

  const Matrix& target_cotangent(std::size_t i) const { return target_cots_[i]; }

 private:
  FederationWorld& world_;
  MessageLog& log_;
  std::vector<SgdOptimizer> di_opts_;
  std::vector<Matrix> target_cots_;
};

struct StepMetrics {
  double task_ce = 0, adv_di = 0, adv_g = 0, ent = 0, mi = 0, recon = 0;
};

/// Algorithm 1 lines 3-13 for one source node: the ordered update program.
StepMetrics local_source_step(FederationWorld& world, Orchestrator& orch, MessageLog& log,
                              std::size_t i, std::size_t round, const Message* broadcast,
                              SgdOptimizer& opt) {
  const RunConfig& cfg = world.config;
  require_broadcast(cfg.ablation, broadcast, round);

  ModelBundle& b = world.source_bundles[i];
  RngStream& rng = world.node_streams[i];
  StepMetrics m;

  for (std::size_t step = 0; step < cfg.local_steps; ++step) {
    Batch batch = sample_batch(world.source_data[i].train, cfg.batch_size, rng);
    Tensor x = input_tensor(world, batch.x);

    // 1. task cross-entropy on the invariant branch (update G, C)
    {
      auto step_params = collect_params({&b.generator, &b.classifier});
      auto touched = collect_params({&b.generator, &b.disentangler, &b.classifier});
      RecordScope rec;
      Tensor probs = classify(b, x, Mode::train, &rng);
      Tensor loss = scale(ce_loss(probs, batch.y), cfg.loss_weights.task);
      zero_all(touched);
      rec.graph().backward(loss);
      opt.step(step_params);
      zero_all(touched);
      m.task_ce = loss.item() / (cfg.loss_weights.task == 0.0 ? 1.0 : cfg.loss_weights.task);
    }

    // 2-3. federated adversarial alignment (Eqs. 4-5)
    if (cfg.ablation.adversarial) {
      Matrix f_source;
      {
        Tensor f = b.generator.forward(x, Mode::train, &rng);
        f_source = tensor_to_matrix(f);
      }
      Matrix cot = orch.exchange(i, round, f_source, broadcast->payload, m.adv_di, m.adv_g);

      auto g_params = b.generator.params();
      RecordScope rec;
      Tensor f2 = b.generator.forward(x, Mode::train, &rng);
      Tensor cot_t = Tensor::from(f2.shape(), std::move(cot.data));
      Tensor pseudo = scale(sum(mul(f2, cot_t)), cfg.loss_weights.adv);
      zero_all(g_params);
      rec.graph().backward(pseudo);
      opt.step(g_params);
      zero_all(g_params);
    }

    // 4-7. representation disentanglement (Eqs. 6-7), MINE (Eq. 8), reconstruction
    if (cfg.ablation.disentangle) {
      auto all_params = collect_params({&b.generator, &b.disentangler, &b.classifier,
                                        &*b.class_identifier, &*b.reconstructor, &*b.mine});
      // Eq. 6: both heads predict labels (update G, D, C, CI)
      {
        auto step_params = collect_params(
            {&b.generator, &b.disentangler, &b.classifier, &*b.class_identifier});
        RecordScope rec;
        auto pair = forward_disentangle(b.generator, b.disentangler, x, Mode::train, &rng);
        Tensor pc = b.classifier.forward(pair.invariant, Mode::train, &rng);
        Tensor pci = b.class_identifier->forward(pair.specific, Mode::train, &rng);
        Tensor loss = scale(disentangle_ce_loss(pc, pci, batch.y), cfg.loss_weights.task);
        zero_all(all_params);
        rec.graph().backward(loss);
        opt.step(step_params);
        zero_all(all_params);
      }
      // Eq. 7: confuse the frozen class identifier (update D, G)
      {
        auto step_params = collect_params({&b.generator, &b.disentangler});
        RecordScope rec;
        auto pair = forward_disentangle(b.generator, b.disentangler, x, Mode::train, &rng);
        Tensor pci = b.class_identifier->forward(pair.specific, Mode::train, &rng);
        Tensor loss = scale(entropy_confusion_loss(pci), cfg.loss_weights.ent);
        zero_all(all_params);
        rec.graph().backward(loss);
        opt.step(step_params);
        zero_all(all_params);
        m.ent = loss.item() / (cfg.loss_weights.ent == 0.0 ? 1.0 : cfg.loss_weights.ent);
      }
      // Eq. 8, ascent half: improve the statistics network on detached features
      {
        auto mine_params = b.mine->params();
        RecordScope rec;
        auto pair = forward_disentangle(b.generator, b.disentangler, x, Mode::train, &rng);
        Tensor p = Tensor::from(pair.invariant.shape(),
                                std::vector<double>(pair.invariant.data().begin(),
                                                    pair.invariant.data().end()));
        Tensor q = Tensor::from(pair.specific.shape(),
                                std::vector<double>(pair.specific.data().begin(),
                                                    pair.specific.data().end()));
        auto perm = rng.permutation(static_cast<std::uint32_t>(cfg.batch_size));
        Tensor qm = take_rows(q, perm);
        Tensor neg_mi = scale(mine_estimate(*b.mine, p, q, qm, Mode::train), -1.0);
        zero_all(all_params);
        rec.graph().backward(neg_mi);
        opt.step(mine_params);
        zero_all(all_params);
        m.mi = -neg_mi.item();
      }
      // Eq. 8, descent half: shrink the estimated MI through the disentangler
      {
        auto d_params = b.disentangler.params();
        RecordScope rec;
        auto pair = forward_disentangle(b.generator, b.disentangler, x, Mode::train, &rng);
        auto perm = rng.permutation(static_cast<std::uint32_t>(cfg.batch_size));
        Tensor qm = take_rows(pair.specific, perm);
        Tensor loss =
            scale(mine_estimate(*b.mine, pair.invariant, pair.specific, qm, Mode::train),
                  cfg.loss_weights.mi);
        zero_all(all_params);
        rec.graph().backward(loss);
        opt.step(d_params);
        zero_all(all_params);
      }
      // L2 reconstruction of the generator feature (update R, D)
      {
        auto step_params = collect_params({&b.disentangler, &*b.reconstructor});
        RecordScope rec;
        Tensor f = b.generator.forward(x, Mode::train, &rng);
        Tensor t = b.disentangler.trunk.forward(f, Mode::train, &rng);
        Tensor f_di = b.disentangler.branches.at(0).forward(t, Mode::train, &rng);
        Tensor f_ds = b.disentangler.branches.at(1).forward(t, Mode::train, &rng);
        Tensor r = b.reconstructor->forward(concat(f_di, f_ds, 1), Mode::train, &rng);
        Tensor f_const = Tensor::from(f.shape(),
                                      std::vector<double>(f.data().begin(), f.data().end()));
        Tensor loss = scale(recon_loss(r, f_const), cfg.loss_weights.recon);
        zero_all(all_params);
        rec.graph().backward(loss);
        opt.step(step_params);
        zero_all(all_params);
        m.recon = loss.item() / (cfg.loss_weights.recon == 0.0 ? 1.0 : cfg.loss_weights.recon);
      }
    }
  }

  log.append({MessageKind::ScalarReport, source_name(i), "orchestrator", round, "task-ce",
              Matrix(1, 1, {m.task_ce})});
  return m;
}

void pretrain_source(FederationWorld& world, std::size_t i, SgdOptimizer& opt) {
  const RunConfig& cfg = world.config;
  const DomainDataset& train = world.source_data[i].train;
  RngStream& rng = world.node_streams[i];
  for (std::size_t epoch = 0; epoch < cfg.pretrain_epochs; ++epoch) {
    auto perm = rng.permutation(static_cast<std::uint32_t>(train.size()));
    for (std::size_t start = 0; start + 2 <= perm.size(); start += cfg.batch_size) {
      const std::size_t len = std::min(cfg.batch_size, perm.size() - start);
      if (len < 2) break;
      std::vector<std::size_t> idx(perm.begin() + static_cast<std::ptrdiff_t>(start),
                                   perm.begin() + static_cast<std::ptrdiff_t>(start + len));
      Batch batch;
      batch.x = train.features.gather_rows(idx);
      batch.y.resize(len);
      for (std::size_t r = 0; r < len; ++r) batch.y[r] = (*train.labels)[idx[r]];
      task_ce_step(world, i, batch, opt, cfg.loss_weights.task);
    }
  }
}

void run_parallel(std::size_t n, std::size_t jobs, const std::function<void(std::size_t)>& fn) {
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::exception_ptr first_error;
  std::mutex err_mu;
  std::vector<std::thread> threads;
  const std::size_t workers = std::min(jobs, n);
  for (std::size_t w = 0; w < workers; ++w) {
    threads.emplace_back([&] {
      for (;;) {
        const std::size_t i = next.fetch_add(1);
        if (i >= n) return;
        try {
          fn(i);
        } catch (...) {
          std::lock_guard<std::mutex> lock(err_mu);
          if (!first_error) first_error = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& t : threads) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace

std::vector<double> aggregate_parameters(std::vector<double> target_now,
                                         std::span<const std::vector<double>> source_snapshots,
                                         std::span<const double> sync,
                                         std::span<const double> mask) {
  if (source_snapshots.size() != mask.size() || source_snapshots.empty()) {
    throw ShapeError("aggregate_parameters: snapshots/mask count mismatch");
  }
  if (sync.size() != target_now.size()) {
    throw ShapeError("aggregate_parameters: sync state size " + std::to_string(sync.size()) +
                     " != target state size " + std::to_string(target_now.size()));
  }
  double mask_sum = 0.0;
  for (double a : mask) {
    if (a < 0.0) throw std::invalid_argument("aggregate_parameters: negative mask entry");
    mask_sum += a;
  }
  if (std::fabs(mask_sum - 1.0) > 1e-9) {
    throw std::invalid_argument("aggregate_parameters: mask sums to " + std::to_string(mask_sum) +
                                ", expected 1");
  }
  for (std::size_t i = 0; i < source_snapshots.size(); ++i) {
    if (source_snapshots[i].size() != target_now.size()) {
      throw ShapeError("aggregate_parameters: snapshot " + std::to_string(i) + " size " +
                       std::to_string(source_snapshots[i].size()) + " != target state size " +
                       std::to_string(target_now.size()));
    }
    const double a = mask[i];
    for (std::size_t j = 0; j < target_now.size(); ++j) {
      target_now[j] += a * (source_snapshots[i][j] - sync[j]);
    }
  }
  return target_now;
}

RunArtifacts run_federation(const RunConfig& config) {
  RunArtifacts artifacts;
  artifacts.world = build_world(config);
  FederationWorld& world = *artifacts.world;
  const std::size_t n_sources = config.sources.size();

  MessageLog log;
  Orchestrator orch(world, log);

  std::vector<SgdOptimizer> node_opts;
  for (std::size_t i = 0; i < n_sources; ++i) {
    node_opts.emplace_back(SgdOptions{config.lr, config.momentum});
  }
  SgdOptimizer target_adv_opt(SgdOptions{config.lr, 0.0});

  // warm start: local task training before the first aggregation
  for (std::size_t i = 0; i < n_sources; ++i) pretrain_source(world, i, node_opts[i]);

  AttentionState attn;
  attn.k = config.attention_k == 0 ? config.classes : config.attention_k;
  attn.floor = config.attention_floor < 0.0
                   ? 1.0 / (10.0 * static_cast<double>(n_sources))
                   : config.attention_floor;

  auto evaluate_target = [&]() {
    return accuracy(world.target_bundle, world.target_data.eval.features,
                    *world.target_data.eval.labels);
  };

  for (std::size_t round = 0; round < config.rounds; ++round) {
    const std::vector<double> sync_state = world.target_bundle.shared_state();

    // broadcast target features for the adversarial pairs
    std::optional<Message> broadcast;
    Matrix target_batch_x;
    if (config.ablation.adversarial) {
      DomainDataset& pool = world.target_data.train;
      std::vector<std::size_t> idx(config.batch_size);
      for (auto& ix : idx) ix = static_cast<std::size_t>(world.target_stream.uniform_index(pool.size()));
      target_batch_x = pool.features.gather_rows(idx);
      Tensor xt = input_tensor(world, target_batch_x);
      Tensor ft = world.target_bundle.generator.forward(xt, Mode::train, nullptr);
      Message msg{MessageKind::FeatureBatch, "target", "", round, "target-features",
                  tensor_to_matrix(ft), 0};
      for (std::size_t i = 0; i < n_sources; ++i) {
        Message copy = msg;
        copy.receiver = source_name(i);
        log.append(std::move(copy));
      }
      broadcast = std::move(msg);
    }

    // parallel local source steps
    std::vector<StepMetrics> metrics(n_sources);
    run_parallel(n_sources, config.jobs, [&](std::size_t i) {
      metrics[i] = local_source_step(world, orch, log, i, round,
                                     broadcast ? &*broadcast : nullptr, node_opts[i]);
    });

    // deltas shipped for aggregation
    std::vector<std::vector<double>> deltas(n_sources);
    for (std::size_t i = 0; i < n_sources; ++i) {
      std::vector<double> snap = world.source_bundles[i].shared_state();
      deltas[i].resize(snap.size());
      for (std::size_t j = 0; j < snap.size(); ++j) deltas[i][j] = snap[j] - sync_state[j];
      log.append({MessageKind::ParamDelta, source_name(i), "orchestrator", round, "local-delta",
                  state_payload(deltas[i])});
    }

    // barrier: per-pair adversarial updates of the target generator (Eq. 5)
    if (config.ablation.adversarial) {
      Tensor xt = input_tensor(world, target_batch_x);
      auto g_params = world.target_bundle.generator.params();
      for (std::size_t i = 0; i < n_sources; ++i) {
        RecordScope rec;
        Tensor ft = world.target_bundle.generator.forward(xt, Mode::train, nullptr);
        Matrix cot = orch.target_cotangent(i);
        Tensor cot_t = Tensor::from(ft.shape(), std::move(cot.data));
        Tensor pseudo = scale(sum(mul(ft, cot_t)), config.loss_weights.adv);
        zero_all(g_params);
        rec.graph().backward(pseudo);
        target_adv_opt.step(g_params);
        zero_all(g_params);
      }
    }

    const std::vector<bool> is_buffer = shared_buffer_mask(world.target_bundle);
    // candidate state after applying one source's update alone: parameters in
    // delta form, running statistics adopted from the source
    auto compose_candidate = [&](const std::vector<double>& now, std::size_t i) {
      std::vector<double> cand = now;
      for (std::size_t j = 0; j < cand.size(); ++j) {
        cand[j] = is_buffer[j] ? sync_state[j] + deltas[i][j] : cand[j] + deltas[i][j];
      }
      return cand;
    };

    // dynamic attention: provisional per-source gap evaluation
    std::vector<double> gains_for_record;
    if (config.ablation.attention) {
      std::vector<double> current_gaps(n_sources);
      const std::vector<double> now_state = world.target_bundle.shared_state();
      for (std::size_t i = 0; i < n_sources; ++i) {
        ModelBundle scratch = world.target_bundle.clone();
        scratch.set_shared_state(compose_candidate(now_state, i));
        Matrix feats = embed_invariant(world, scratch, world.probe);
        current_gaps[i] = clustering_gap(feats, attn.k, config.kmeans_restarts,
                                         world.orchestrator_stream, config.kmeans_max_iters);
      }
      attn = update_mask(std::move(attn), current_gaps);
      gains_for_record = attn.gains;
    } else {
      attn.mask.assign(n_sources, 1.0 / static_cast<double>(n_sources));
      attn.gains.clear();
    }

    // aggregate: theta_t += sum_i alpha_i * (snapshot_i - sync) for parameters;
    // batchnorm statistics become the mask-weighted average of the source values
    {
      std::vector<std::vector<double>> snapshots(n_sources);
      for (std::size_t i = 0; i < n_sources; ++i) {
        snapshots[i].resize(sync_state.size());
        for (std::size_t j = 0; j < sync_state.size(); ++j) {
          snapshots[i][j] = sync_state[j] + deltas[i][j];
        }
      }
      std::vector<double> agg = aggregate_parameters(world.target_bundle.shared_state(), snapshots,
                                                     sync_state, attn.mask);
      for (std::size_t j = 0; j < agg.size(); ++j) {
        if (!is_buffer[j]) continue;
        double avg = 0.0;
        for (std::size_t i = 0; i < n_sources; ++i) avg += attn.mask[i] * snapshots[i][j];
        agg[j] = avg;
      }
      world.target_bundle.set_shared_state(agg);

      // synchronize every node to the aggregated model
      for (std::size_t i = 0; i < n_sources; ++i) {
        log.append({MessageKind::ParamSnapshot, "orchestrator", source_name(i), round, "sync",
                    state_payload(agg)});
        world.source_bundles[i].set_shared_state(agg);
      }
    }

    // the next round's "before" gap is the synchronized model's gap
    if (config.ablation.attention) {
      Matrix feats = embed_invariant(world, world.target_bundle, world.probe);
      const double post_gap = clustering_gap(feats, attn.k, config.kmeans_restarts,
                                             world.orchestrator_stream, config.kmeans_max_iters);
      attn.prev_gap = std::vector<double>(n_sources, post_gap);
    }

    // evaluate (simulator-side oracle)
    RoundRecord rec;
    rec.round = round;
    rec.mask = attn.mask;
    rec.gains = gains_for_record;
    rec.target_accuracy = evaluate_target();
    for (std::size_t i = 0; i < n_sources; ++i) {
      RoundNodeMetrics nm;
      nm.node_id = source_name(i);
      nm.task_ce = metrics[i].task_ce;
      nm.adv_di = metrics[i].adv_di;
      nm.adv_g = metrics[i].adv_g;
      nm.ent = metrics[i].ent;
      nm.mi = metrics[i].mi;
      nm.recon = metrics[i].recon;
      nm.weight = attn.mask[i];
      rec.node_metrics.push_back(nm);
    }
    RoundNodeMetrics tm;
    tm.node_id = "target";
    tm.weight = 0.0;
    rec.node_metrics.push_back(tm);
    artifacts.rounds.push_back(std::move(rec));
  }

  artifacts.final_target_accuracy = evaluate_target();
  if (config.evaluate_bound) {
    const std::vector<double> mask =
        artifacts.rounds.empty() ? std::vector<double>(n_sources, 1.0 / n_sources)
                                 : artifacts.rounds.back().mask;
    artifacts.bound = neural_bound_report(world, mask);
  }
  artifacts.messages = log.sorted();
  return artifacts;
}

// ---------------------------------------------------------------------------
// Artifact rendering
// ---------------------------------------------------------------------------

std::string RunArtifacts::metrics_csv() const {
  std::ostringstream os;
  os << "round,node_id,task_ce,adv_di,adv_g,ent,mi,recon,weight,target_acc\n";
  for (const RoundRecord& r : rounds) {
    for (const RoundNodeMetrics& m : r.node_metrics) {
      os << r.round << ',' << m.node_id << ',' << fmt_double(m.task_ce) << ','
         << fmt_double(m.adv_di) << ',' << fmt_double(m.adv_g) << ',' << fmt_double(m.ent) << ','
         << fmt_double(m.mi) << ',' << fmt_double(m.recon) << ',' << fmt_double(m.weight) << ','
         << fmt_double(r.target_accuracy) << '\n';
    }
  }
  return os.str();
}

std::string RunArtifacts::mask_history_csv() const {
  std::ostringstream os;
  os << "round,source_id,gain,weight\n";
  for (const RoundRecord& r : rounds) {
    for (std::size_t i = 0; i + 1 < r.node_metrics.size(); ++i) {
      const double gain = i < r.gains.size() ? r.gains[i] : 0.0;
      os << r.round << ',' << r.node_metrics[i].node_id << ',' << fmt_double(gain) << ','
         << fmt_double(r.mask[i]) << '\n';
    }
  }
  return os.str();
}

namespace {

std::uint64_t payload_digest(const Matrix& m) {
  std::uint64_t h = 0xcbf29ce484222325ull;
  auto mix = [&h](std::uint64_t v) {
    h ^= v;
    h *= 0x100000001b3ull;
  };
  mix(m.rows);
  mix(m.cols);
  for (double d : m.data) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, sizeof(bits));
    mix(bits);
  }
  return h;
}

}  // namespace

std::string RunArtifacts::messages_jsonl(bool full_payload) const {
  std::ostringstream os;
  for (const Message& m : messages) {
    json j;
    j["round"] = m.round;
    j["seq"] = m.seq;
    j["kind"] = message_kind_name(m.kind);
    j["sender"] = m.sender;
    j["receiver"] = m.receiver;
    j["label"] = m.label;
    j["rows"] = m.payload.rows;
    j["cols"] = m.payload.cols;
    char digest[20];
    std::snprintf(digest, sizeof(digest), "%016llx",
                  static_cast<unsigned long long>(payload_digest(m.payload)));
    j["digest"] = digest;
    if (full_payload) j["payload"] = m.payload.data;
    os << j.dump() << '\n';
  }
  return os.str();
}

std::string write_artifacts(const RunArtifacts& artifacts, const std::string& out_dir) {
  namespace fs = std::filesystem;
  fs::create_directories(out_dir);
  const FederationWorld& world = *artifacts.world;

  auto write_file = [&](const std::string& name, const std::string& content) {
    std::ofstream out(fs::path(out_dir) / name, std::ios::binary);
    if (!out) throw std::runtime_error("write_artifacts: cannot open " + name);
    out << content;
  };
  write_file("metrics.csv", artifacts.metrics_csv());
  write_file("mask_history.csv", artifacts.mask_history_csv());
  write_file("messages.jsonl", artifacts.messages_jsonl(world.config.audit_full));

  auto bundle_components = [](const ModelBundle& b) {
    std::vector<std::pair<std::string, const Component*>> cs = {
        {"generator", &b.generator},
        {"disentangler", &b.disentangler},
        {"classifier", &b.classifier}};
    if (b.class_identifier) cs.emplace_back("class_identifier", &*b.class_identifier);
    if (b.reconstructor) cs.emplace_back("reconstructor", &*b.reconstructor);
    if (b.mine) cs.emplace_back("mine", &*b.mine);
    return cs;
  };
  save_checkpoint((fs::path(out_dir) / "target.ckpt").string(),
                  bundle_components(world.target_bundle));
  for (std::size_t i = 0; i < world.source_bundles.size(); ++i) {
    save_checkpoint((fs::path(out_dir) / (source_name(i) + ".ckpt")).string(),
                    bundle_components(world.source_bundles[i]));
  }
  if (artifacts.bound) {
    write_file("bound_report.json", bound_report_json(*artifacts.bound));
  }
  return (fs::path(out_dir) / "metrics.csv").string();
}

// ---------------------------------------------------------------------------
// Privacy audit
// ---------------------------------------------------------------------------

AuditReport privacy_audit(std::span<const Message> messages, const FederationWorld& world) {
  AuditReport report;

  // index every raw row by the bit pattern of its first value
  struct RawRow {
    const double* data;
    std::size_t len;
  };
  std::unordered_map<std::uint64_t, std::vector<RawRow>> index;
  auto add_rows = [&](const Matrix& m) {
    for (std::size_t r = 0; r < m.rows; ++r) {
      auto row = m.row(r);
      std::uint64_t bits;
      std::memcpy(&bits, row.data(), sizeof(bits));
      index[bits].push_back({row.data(), row.size()});
    }
  };
  for (const NodeData& nd : world.source_data) {
    add_rows(nd.train.features);
    add_rows(nd.eval.features);
  }
  add_rows(world.target_data.train.features);
  add_rows(world.target_data.eval.features);
  add_rows(world.probe);

  const std::size_t feature_dim = world.model_spec.feature_dim;
  const std::size_t input_dim = world.model_spec.input_dim;

  for (const Message& msg : messages) {
    ++report.messages_scanned;
    switch (msg.kind) {
      case MessageKind::ParamSnapshot:
      case MessageKind::ParamDelta:
      case MessageKind::FeatureBatch:
      case MessageKind::ScalarReport:
        break;
      default:
        report.violations.push_back(
            {msg.round, msg.sender, "payload kind outside the allowed message set"});
        continue;
    }
    if (msg.kind == MessageKind::FeatureBatch) {
      if (msg.payload.cols != feature_dim || msg.payload.cols == input_dim) {
        report.violations.push_back(
            {msg.round, msg.sender,
             "FeatureBatch width " + std::to_string(msg.payload.cols) +
                 " is not the generator output width " + std::to_string(feature_dim)});
        continue;
      }
    }
    // contiguous-slice scan against every raw row
    bool flagged = false;
    const auto& pd = msg.payload.data;
    for (std::size_t pos = 0; pos < pd.size() && !flagged; ++pos) {
      std::uint64_t bits;
      std::memcpy(&bits, &pd[pos], sizeof(bits));
      auto it = index.find(bits);
      if (it == index.end()) continue;
      for (const RawRow& row : it->second) {
        if (pos + row.len > pd.size()) continue;
        if (std::memcmp(row.data, &pd[pos], row.len * sizeof(double)) == 0) {
          report.violations.push_back(
              {msg.round, msg.sender, "payload contains a raw sample row"});
          flagged = true;
          break;
        }
      }
    }
  }
  report.ok = report.violations.empty();
  return report;
}

// ---------------------------------------------------------------------------
// Estimated-mode bound report for neural runs
// ---------------------------------------------------------------------------

BoundReport neural_bound_report(FederationWorld& world, const std::vector<double>& mask) {
  const RunConfig& cfg = world.config;
  const std::size_t n_sources = world.source_bundles.size();
  if (mask.size() != n_sources) {
    throw std::invalid_argument("neural_bound_report: mask size mismatch");
  }

  // alpha-weighted error of the synced target model on the source train sets
  double source_error = 0.0;
  for (std::size_t i = 0; i < n_sources; ++i) {
    const double acc = accuracy(world.target_bundle, world.source_data[i].train.features,
                                *world.source_data[i].train.labels);
    source_error += mask[i] * (1.0 - acc);
  }

  RngStream rng = RngStream::derive(cfg.seed, "bound");
  std::vector<PerSourceTerms> per_source(n_sources);
  const std::size_t m = std::min<std::size_t>(world.target_data.train.size(), 512);
  std::vector<std::size_t> tgt_idx(m);
  for (auto& ix : tgt_idx) ix = static_cast<std::size_t>(rng.uniform_index(world.target_data.train.size()));
  Matrix tgt_batch = world.target_data.train.features.gather_rows(tgt_idx);
  Matrix tgt_feats = embed_generator(world, world.target_bundle, tgt_batch);

  for (std::size_t i = 0; i < n_sources; ++i) {
    per_source[i].alpha = mask[i];

    std::vector<std::size_t> src_idx(std::min<std::size_t>(world.source_data[i].train.size(), m));
    for (auto& ix : src_idx) ix = static_cast<std::size_t>(rng.uniform_index(world.source_data[i].train.size()));
    Matrix src_batch = world.source_data[i].train.features.gather_rows(src_idx);
    Matrix src_feats = embed_generator(world, world.source_bundles[i], src_batch);
    per_source[i].divergence = proxy_a_distance(src_feats, tgt_feats, rng);

    // oracle-assisted lambda: train a fresh bundle on the pooled labeled data
    RngStream lam_stream = RngStream::derive(cfg.seed, "lambda", i);
    ModelBundle probe_model = build_bundle(world.model_spec, Role::source, lam_stream);
    SgdOptimizer opt(SgdOptions{cfg.lr, cfg.momentum});
    Matrix pooled = Matrix::vstack(world.source_data[i].train.features,
                                   world.target_data.eval.features);
    std::vector<int> pooled_y = *world.source_data[i].train.labels;
    pooled_y.insert(pooled_y.end(), world.target_data.eval.labels->begin(),
                    world.target_data.eval.labels->end());
    DomainDataset pooled_ds;
    pooled_ds.features = pooled;
    pooled_ds.labels = pooled_y;
    auto params = collect_params({&probe_model.generator, &probe_model.disentangler,
                                  &probe_model.classifier});
    for (std::size_t epoch = 0; epoch < cfg.lambda_epochs; ++epoch) {
      auto perm = lam_stream.permutation(static_cast<std::uint32_t>(pooled_ds.size()));
      for (std::size_t start = 0; start + 2 <= perm.size(); start += cfg.batch_size) {
        const std::size_t len = std::min(cfg.batch_size, perm.size() - start);
        if (len < 2) break;
        std::vector<std::size_t> idx(perm.begin() + static_cast<std::ptrdiff_t>(start),
                                     perm.begin() + static_cast<std::ptrdiff_t>(start + len));
        Batch batch;
        batch.x = pooled_ds.features.gather_rows(idx);
        batch.y.resize(len);
        for (std::size_t r = 0; r < len; ++r) batch.y[r] = (*pooled_ds.labels)[idx[r]];
        RecordScope rec;
        Tensor probs = classify(probe_model, input_tensor(world, batch.x), Mode::train, &lam_stream);
        Tensor loss = ce_loss(probs, batch.y);
        zero_all(params);
        rec.graph().backward(loss);
        opt.step(params);
        zero_all(params);
      }
    }
    const double src_risk = 1.0 - accuracy(probe_model, world.source_data[i].train.features,
                                           *world.source_data[i].train.labels);
    const double tgt_risk = 1.0 - accuracy(probe_model, world.target_data.eval.features,
                                           *world.target_data.eval.labels);
    per_source[i].lambda = src_risk + tgt_risk;
  }

  // capacity proxy: trainable parameter count of the aggregated hypothesis
  double vc_proxy = 0.0;
  for (const Component* c : world.target_bundle.shared_components()) {
    vc_proxy += static_cast<double>(c->param_count());
  }
  return assemble_bound(source_error, std::move(per_source), vc_proxy, m, cfg.bound_delta,
                        "estimated-neural");
}

}  // namespace fada
