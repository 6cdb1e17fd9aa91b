#pragma once

#include <memory>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include "fada/attention.hpp"
#include "fada/data.hpp"
#include "fada/losses.hpp"
#include "fada/nn.hpp"
#include "fada/theory.hpp"

namespace fada {

/// Raised when the message protocol is violated (missing broadcast, wrong
/// round, ...). Distinct from config validation errors.
class ProtocolError : public std::runtime_error {
 public:
  explicit ProtocolError(const std::string& what) : std::runtime_error(what) {}
};

class ConfigError : public std::runtime_error {
 public:
  explicit ConfigError(const std::string& what) : std::runtime_error(what) {}
};

// ---------------------------------------------------------------------------
// Configuration
// ---------------------------------------------------------------------------

struct LossWeights {
  double task = 1.0;
  double adv = 1.0;
  double ent = 0.1;
  double mi = 0.01;
  double recon = 0.1;
};

/// Cumulative ablation ladder: source_only < I (attention) < II (+adversarial)
/// < III (+disentangle). Flags must be monotone.
struct AblationFlags {
  bool attention = true;
  bool adversarial = true;
  bool disentangle = true;
};

struct DomainSpec {
  std::string kind = "moons";  // moons | gaussians | csv
  double rotation_deg = 0.0;
  std::vector<double> shift;
  double cov_scale = 0.5;
  std::string path;  // csv only
  bool shuffle_labels = false;
};

struct RunConfig {
  std::uint64_t seed = 1;
  std::vector<DomainSpec> sources;
  DomainSpec target;
  std::size_t n_per_domain = 2000;
  double noise_sigma = 0.1;
  double eval_fraction = 0.25;

  std::string model_family = "mlp";  // mlp | digit
  double width_scale = 0.25;
  std::size_t classes = 2;
  std::size_t image_hw = 16;  // digit family only
  std::size_t image_channels = 3;

  LossWeights loss_weights;
  double lr = 0.05;
  double momentum = 0.9;
  std::size_t rounds = 200;
  std::size_t batch_size = 64;
  std::size_t local_steps = 1;
  std::size_t pretrain_epochs = 5;

  AblationFlags ablation;
  double attention_floor = -1.0;  // < 0: default 1/(10 N)
  std::size_t attention_k = 0;    // 0: number of classes
  std::size_t probe_size = 256;
  std::size_t kmeans_restarts = 3;
  std::size_t kmeans_max_iters = 50;

  bool evaluate_bound = false;
  double bound_delta = 0.05;
  std::size_t lambda_epochs = 3;  // training budget for the estimated lambda

  std::string out_dir;
  std::size_t jobs = 1;
  bool audit_full = false;

  void validate() const;  // throws ConfigError naming the offending field path
};

/// Parses and validates the JSON document; unknown keys are rejected with
/// their field paths. The FADA_SEED environment variable overrides the seed.
RunConfig parse_run_config(const std::string& json_text);
RunConfig load_run_config(const std::string& path);

/// Named ladder rungs for the --ablation flag:
/// source_only | model_i | model_ii | model_iii.
AblationFlags ablation_by_name(const std::string& name, bool* source_only = nullptr);

// ---------------------------------------------------------------------------
// Messages
// ---------------------------------------------------------------------------

enum class MessageKind { ParamSnapshot, ParamDelta, FeatureBatch, ScalarReport };
const char* message_kind_name(MessageKind k);

struct Message {
  MessageKind kind = MessageKind::ScalarReport;
  std::string sender;
  std::string receiver;
  std::size_t round = 0;
  std::string label;  // payload meaning ("target-features", "feature-grad", ...)
  Matrix payload;
  std::size_t seq = 0;  // per-sender sequence, assigned by the log
};

/// Append-only, thread-safe message log with a canonical (round, sender, seq)
/// ordering so concurrent runs serialize identically.
class MessageLog {
 public:
  void append(Message m);
  std::vector<Message> sorted() const;
  std::size_t size() const;

 private:
  mutable std::mutex mu_;
  std::vector<Message> messages_;
  std::unordered_map<std::string, std::size_t> next_seq_;
};

// ---------------------------------------------------------------------------
// Run records and artifacts
// ---------------------------------------------------------------------------

struct RoundNodeMetrics {
  std::string node_id;
  double task_ce = 0, adv_di = 0, adv_g = 0, ent = 0, mi = 0, recon = 0;
  double weight = 0;
};

struct RoundRecord {
  std::size_t round = 0;
  std::vector<RoundNodeMetrics> node_metrics;  // sources then target, fixed order
  std::vector<double> mask;
  std::vector<double> gains;  // empty on the cold-start round
  double target_accuracy = 0.0;
};

struct NodeData {
  DomainDataset train;
  DomainDataset eval;
};

/// Everything the simulator owns: datasets (private to their nodes), bundles,
/// pair discriminators, streams. Exposed so tests and the audit can inspect
/// state the protocol itself never ships.
struct FederationWorld {
  RunConfig config;
  ModelSpec model_spec;
  std::vector<NodeData> source_data;
  NodeData target_data;             // train is unlabeled by construction
  Matrix probe;                     // held-out unlabeled probe batch
  std::vector<ModelBundle> source_bundles;
  ModelBundle target_bundle;
  std::vector<Component> pair_dis;  // one domain identifier per (source, target) pair
  std::vector<RngStream> node_streams;
  RngStream target_stream{0};
  RngStream orchestrator_stream{0};
};

struct RunArtifacts {
  std::vector<RoundRecord> rounds;
  std::vector<Message> messages;  // canonical order
  double final_target_accuracy = 0.0;
  std::optional<BoundReport> bound;
  std::unique_ptr<FederationWorld> world;

  std::string metrics_csv() const;
  std::string mask_history_csv() const;
  std::string messages_jsonl(bool full_payload) const;
};

/// Delta-form aggregation over flattened states:
///   theta_new = target_now + sum_i mask_i * (snapshot_i - sync).
/// Throws ShapeError on size mismatches and std::invalid_argument when the
/// mask is not a normalized nonnegative vector.
std::vector<double> aggregate_parameters(std::vector<double> target_now,
                                         std::span<const std::vector<double>> source_snapshots,
                                         std::span<const double> sync,
                                         std::span<const double> mask);

/// Builds the world (datasets, bundles, discriminators) without running any
/// rounds; run_federation uses it internally.
std::unique_ptr<FederationWorld> build_world(const RunConfig& config);

/// Algorithm-1 driver: pretrain, then R rounds of
///   broadcast target features -> parallel local source steps ->
///   provisional gap evaluation -> mask update -> aggregate -> sync -> evaluate.
RunArtifacts run_federation(const RunConfig& config);

/// Writes metrics.csv, mask_history.csv, messages.jsonl and the final bundle
/// checkpoints into out_dir. Returns the metrics path.
std::string write_artifacts(const RunArtifacts& artifacts, const std::string& out_dir);

// ---------------------------------------------------------------------------
// Privacy audit
// ---------------------------------------------------------------------------

struct AuditViolation {
  std::size_t round = 0;
  std::string sender;
  std::string reason;
};

struct AuditReport {
  bool ok = false;
  std::vector<AuditViolation> violations;
  std::size_t messages_scanned = 0;
};

/// OK iff no payload contains any raw sample row as a contiguous slice, every
/// payload kind is in the allowed set, and every FeatureBatch has generator
/// output width (never raw input width). At most one violation per message.
AuditReport privacy_audit(std::span<const Message> messages, const FederationWorld& world);

/// Guard a source step runs before touching anything: with adversarial
/// alignment enabled the round's target-feature broadcast must be present
/// and fresh, otherwise the round aborts with a ProtocolError.
void require_broadcast(const AblationFlags& flags, const Message* msg, std::size_t round);

/// Estimated-mode bound report for a completed neural run: alpha-weighted
/// source error of the synced target model, proxy A-distance divergences, and
/// oracle-assisted lambda estimates (never certified).
BoundReport neural_bound_report(FederationWorld& world, const std::vector<double>& mask);

}  // namespace fada
