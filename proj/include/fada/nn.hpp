#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "fada/matrix.hpp"
#include "fada/tensor.hpp"

namespace fada {

enum class ComponentKind {
  generator,
  disentangler,
  classifier,
  class_identifier,
  domain_identifier,
  reconstructor,
  mine,
};

const char* component_kind_name(ComponentKind k);

struct LayerDesc {
  enum class Kind { dense, conv, batchnorm, relu, leaky_relu, maxpool, dropout, softmax, flatten };
  Kind kind;
  std::size_t in = 0, out = 0;
  std::size_t ksize = 0, stride = 1, padding = 0;
  std::size_t window = 0;
  double p = 0.0;
  double slope = 0.01;
  std::size_t dim = 0;  // batchnorm feature count

  static LayerDesc Dense(std::size_t in, std::size_t out);
  static LayerDesc Conv(std::size_t in, std::size_t out, std::size_t k, std::size_t stride,
                        std::size_t padding);
  static LayerDesc BatchNorm(std::size_t dim);
  static LayerDesc Relu();
  static LayerDesc LeakyRelu(double slope = 0.01);
  static LayerDesc MaxPool(std::size_t window, std::size_t stride);
  static LayerDesc Dropout(double p);
  static LayerDesc Softmax();
  static LayerDesc Flatten();
};

/// Layer stack description. `branch` is non-empty for the disentangler (the
/// two output heads over the shared trunk) and for the MINE statistics
/// network (the two per-input stacks feeding the joined trunk).
struct ComponentSpec {
  ComponentKind kind;
  std::vector<LayerDesc> trunk;
  std::vector<LayerDesc> branch;
};

enum class Mode { train, eval };

struct Layer {
  LayerDesc desc;
  Tensor w, b;          // dense / conv
  Tensor gamma, beta;   // batchnorm
  std::vector<double> running_mean, running_var;
};

class Stack {
 public:
  Stack() = default;
  Stack(const std::vector<LayerDesc>& descs, RngStream& rng, double init_sigma);

  Tensor forward(Tensor x, Mode mode, RngStream* dropout_rng);
  std::vector<Layer> layers;
};

/// One instantiated network component. Move-only; use clone() for an
/// explicit deep copy (tensor copies alias storage).
class Component {
 public:
  Component() = default;
  Component(const Component&) = delete;
  Component& operator=(const Component&) = delete;
  Component(Component&&) = default;
  Component& operator=(Component&&) = default;

  ComponentKind kind = ComponentKind::generator;
  ComponentSpec spec;
  Stack trunk;
  std::vector<Stack> branches;  // empty, or exactly two

  /// Plain single-stack forward (generator, classifier, class identifier,
  /// domain identifier, reconstructor).
  Tensor forward(Tensor x, Mode mode, RngStream* dropout_rng);

  Component clone() const;

  std::vector<Tensor> params();
  std::size_t param_count() const;

  /// Full state = trainable params then batchnorm buffers, fixed order.
  std::vector<double> state() const;
  void set_state(std::span<const double> s);
  std::size_t state_size() const;

  void visit_params(const std::function<void(const std::string&, Tensor&)>& fn);
};

Component build_component(const ComponentSpec& spec, RngStream& rng, double init_sigma = 0.02);

/// f_di (domain-invariant) and f_ds (domain-specific) branches of the
/// disentangler applied to generator features.
struct DisentangledPair {
  Tensor invariant;
  Tensor specific;
};
DisentangledPair forward_disentangle(Component& generator, Component& disentangler, const Tensor& x,
                                     Mode mode, RngStream* dropout_rng);

/// Per-row statistic T(p, q) of the MINE network: branch sums joined through
/// the trunk, squeezed to shape [n].
Tensor mine_forward(Component& mine, const Tensor& p, const Tensor& q, Mode mode);

/// Probability that each feature row came from the source domain: softmax
/// over the domain identifier's 2-way output, column 0 = source.
Tensor di_source_prob(Component& di, const Tensor& features, Mode mode);

// ---------------------------------------------------------------------------
// Model families
// ---------------------------------------------------------------------------

/// All component specs for one model family, plus the derived widths the
/// federation needs for wiring and audits.
struct ModelSpec {
  ComponentSpec generator, disentangler, classifier, class_identifier, domain_identifier,
      reconstructor, mine;
  std::size_t input_dim = 0;    // flat input width (mlp) or c*h*w (conv)
  std::size_t feature_dim = 0;  // generator output width
  std::size_t branch_dim = 0;   // disentangler branch width
  std::size_t classes = 0;
  bool conv_input = false;
  std::size_t image_channels = 0, image_hw = 0;
};

/// Fully-connected family (sentiment-style): generator FC(d, 128s).
ModelSpec make_mlp_model(std::size_t input_dim, std::size_t classes, double width_scale);

/// Convolutional family (digit-style): three conv blocks then FC stacks.
ModelSpec make_digit_model(std::size_t image_channels, std::size_t image_hw, std::size_t classes,
                           double width_scale);

std::size_t scaled_width(std::size_t base, double scale);

// ---------------------------------------------------------------------------
// Bundles
// ---------------------------------------------------------------------------

enum class Role { source, target };

/// One node's parameter sets. Source nodes own the full complement; the
/// target owns only the classification path (generator, disentangler,
/// classifier) that aggregation updates.
struct ModelBundle {
  Role role = Role::source;
  Component generator;
  Component disentangler;
  Component classifier;
  std::optional<Component> class_identifier;
  std::optional<Component> reconstructor;
  std::optional<Component> mine;

  ModelBundle clone() const;

  /// Classification-path components, the ones synchronized across nodes.
  std::vector<Component*> shared_components();
  std::vector<const Component*> shared_components() const;

  /// Concatenated state of the shared components.
  std::vector<double> shared_state() const;
  void set_shared_state(std::span<const double> s);
};

ModelBundle build_bundle(const ModelSpec& spec, Role role, RngStream& rng);

/// End-to-end class probabilities for a batch: C(head_di(trunk(G(x)))).
Tensor classify(ModelBundle& bundle, const Tensor& x, Mode mode, RngStream* dropout_rng);

/// Fraction of rows whose argmax matches the label.
double accuracy(ModelBundle& bundle, const Matrix& features, std::span<const int> labels);

/// Batch matrix -> tensor (no grad).
Tensor batch_tensor(const Matrix& m);
/// Batch matrix -> [n,c,h,w] image tensor (no grad); m.cols must equal c*h*w.
Tensor batch_image_tensor(const Matrix& m, std::size_t c, std::size_t hw);

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

/// Little-endian f64 checkpoint with a JSON header naming every component,
/// parameter shape and buffer length. Round-trips bit-exactly.
void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, const Component*>>& components);
void load_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, Component*>>& components);

}  // namespace fada
