#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <unordered_map>
#include <vector>

#include "fada/rng.hpp"

namespace fada {

/// Raised when an operation produces NaN/Inf, or when inputs violate a
/// numeric-domain precondition. Never swallowed.
class NumericFault : public std::runtime_error {
 public:
  explicit NumericFault(const std::string& what) : std::runtime_error(what) {}
};

/// Raised on incompatible operand shapes; the message names the op and
/// both shapes.
class ShapeError : public std::invalid_argument {
 public:
  explicit ShapeError(const std::string& what) : std::invalid_argument(what) {}
};

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

struct TensorStorage {
  std::vector<double> data;
  std::vector<double> grad;  // empty until backward() first touches it
};

class Graph;

/// Dense f64 tensor participating in reverse-mode differentiation.
/// Copies share storage; the tape holds value snapshots via shared storage,
/// so parameters must only be mutated between steps (after backward).
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> data, bool requires_grad = false);
  static Tensor scalar(double value);
  /// Parameter initialised from N(0, sigma^2); requires_grad on.
  static Tensor randn_param(Shape shape, double sigma, RngStream& rng);

  const Shape& shape() const { return shape_; }
  std::size_t size() const { return st_ ? st_->data.size() : 0; }
  bool defined() const { return static_cast<bool>(st_); }
  bool requires_grad() const { return requires_grad_; }
  void set_requires_grad(bool v) { requires_grad_ = v; }

  std::span<const double> data() const { return st_->data; }
  std::span<double> data_mut() { return st_->data; }
  double item() const;

  /// Accumulated gradient; zeros-shaped view if backward never reached it.
  std::vector<double> grad() const;
  bool has_grad() const { return st_ && !st_->grad.empty(); }
  void zero_grad() { if (st_) st_->grad.clear(); }

  TensorStorage* storage() const { return st_.get(); }
  const std::shared_ptr<TensorStorage>& storage_ptr() const { return st_; }

  // Tape bookkeeping (managed by the op layer).
  int node = -1;
  const Graph* graph = nullptr;
  std::uint64_t graph_epoch = 0;

 private:
  std::shared_ptr<TensorStorage> st_;
  Shape shape_;
  bool requires_grad_ = false;
};

/// Append-only tape of recorded primitive applications. backward() visits
/// nodes in strict reverse append order. clear() bumps the epoch, atomically
/// invalidating every node id handed out before it.
class Graph {
 public:
  using BackwardFn = std::function<void(const std::vector<double>& grad_out, Graph& g)>;

  Graph();
  Graph(const Graph&) = delete;
  Graph& operator=(const Graph&) = delete;

  int record(const char* op, const Shape& out_shape, std::vector<int> inputs, BackwardFn back);
  /// Find-or-create the leaf node for a tensor's storage in the current epoch.
  int leaf(const Tensor& t);

  /// Reverse sweep from a scalar loss; flushes gradients additively into the
  /// storage of every reachable requires_grad leaf.
  void backward(const Tensor& loss);

  void clear();
  std::uint64_t epoch() const { return epoch_; }
  std::size_t node_count() const { return nodes_.size(); }

  /// Valid only inside backward(): adds `n` values into a node's grad buffer.
  void accumulate(int node, const double* g, std::size_t n);

 private:
  struct Node {
    const char* op;
    std::size_t out_size;
    std::vector<int> inputs;
    BackwardFn back;                            // null for leaves
    std::shared_ptr<TensorStorage> leaf_storage;  // non-null for leaves
    bool leaf_requires_grad = false;
  };
  std::vector<Node> nodes_;
  std::unordered_map<const TensorStorage*, int> leaf_ids_;
  std::vector<std::vector<double>> grad_bufs_;
  std::uint64_t epoch_ = 1;
};

/// Activates a fresh tape on the current thread for the scope's lifetime.
/// Ops record themselves only while a tape is active and an input requires
/// grad; forward passes outside any scope are plain evaluation.
class RecordScope {
 public:
  RecordScope();
  ~RecordScope();
  RecordScope(const RecordScope&) = delete;
  RecordScope& operator=(const RecordScope&) = delete;
  Graph& graph() { return *graph_; }

 private:
  std::unique_ptr<Graph> graph_;
  Graph* prev_;
};

Graph* active_graph();

// ---------------------------------------------------------------------------
// Primitive set. Every op validates shapes, checks the forward output for
// NaN/Inf, and records itself on the active tape when grads are needed.
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b);
Tensor add(const Tensor& a, const Tensor& b);  // same shape, or bias broadcast ([n,d]+[d], [n,c,h,w]+[c])
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);  // elementwise
Tensor scale(const Tensor& a, double c);
Tensor relu(const Tensor& a);
Tensor leaky_relu(const Tensor& a, double slope);
Tensor softmax(const Tensor& a, std::size_t axis);
Tensor log(const Tensor& a);
Tensor exp(const Tensor& a);
Tensor mean(const Tensor& a);  // full reduction to scalar
Tensor sum(const Tensor& a);   // full reduction to scalar
Tensor concat(const Tensor& a, const Tensor& b, std::size_t axis);
Tensor reshape(const Tensor& a, Shape new_shape);
Tensor clamp_min(const Tensor& a, double floor);
/// out[i] = probs[i, labels[i]]
Tensor gather_rows(const Tensor& probs, std::span<const int> labels);
/// Row selection: out row i = t row indices[i]; indices may repeat.
Tensor take_rows(const Tensor& t, std::span<const std::uint32_t> indices);

Tensor conv2d(const Tensor& x, const Tensor& kernel, std::size_t stride, std::size_t padding);
Tensor maxpool2d(const Tensor& x, std::size_t window, std::size_t stride);

/// Training-mode batch normalisation over columns ([n,d]) or channels
/// ([n,c,h,w]); normalises with biased batch statistics and updates the
/// running buffers in place with the given momentum.
Tensor batchnorm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       std::vector<double>& running_mean, std::vector<double>& running_var,
                       double momentum, double eps);
Tensor batchnorm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                      const std::vector<double>& running_mean,
                      const std::vector<double>& running_var, double eps);

/// Inverted-scaling dropout; keep-mask drawn from `rng`. p = 0 is the
/// identity and consumes no draws.
Tensor dropout(const Tensor& x, double p, RngStream& rng);

/// log(mean(exp(t))) computed stably via a detached max shift (gradient is
/// exact: the shift terms cancel).
Tensor logmeanexp(const Tensor& t);

/// Scalar sweep entry point: seeds d(loss)/d(loss) = 1.
void backward(const Tensor& loss);

// ---------------------------------------------------------------------------
// SGD
// ---------------------------------------------------------------------------

struct SgdOptions {
  double lr = 0.01;
  double momentum = 0.0;
};

/// theta <- theta - lr * v with v <- momentum * v + g. Velocity buffers are
/// keyed by parameter storage and persist across steps.
class SgdOptimizer {
 public:
  explicit SgdOptimizer(SgdOptions opt) : opt_(opt) {}

  void step(std::span<Tensor> params);
  void zero_grad(std::span<Tensor> params) const;
  const SgdOptions& options() const { return opt_; }
  void set_lr(double lr) { opt_.lr = lr; }

 private:
  SgdOptions opt_;
  std::unordered_map<TensorStorage*, std::vector<double>> velocity_;
};

/// One plain-SGD update on a single tensor, used where no optimizer state
/// is wanted. Throws ShapeError if sizes disagree.
void sgd_step(Tensor& param, std::span<const double> grad, double lr);

}  // namespace fada
