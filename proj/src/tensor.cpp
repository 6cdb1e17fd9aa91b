#include "fada/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <limits>
#include <numeric>
#include <sstream>

namespace fada {

namespace {

thread_local Graph* t_active_graph = nullptr;

void check_finite(const char* op, std::span<const double> v) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw NumericFault(std::string("non-finite value in forward of '") + op + "'");
    }
  }
}

void check_finite_grad(const char* op, std::span<const double> v) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw NumericFault(std::string("non-finite value in backward of '") + op + "'");
    }
  }
}

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

[[noreturn]] void shape_fail1(const char* op, const Shape& a, const char* why) {
  throw ShapeError(std::string(op) + ": bad input shape " + shape_str(a) + " (" + why + ")");
}

/// Node id of `t` on graph `g`, registering a leaf if it was produced
/// outside the current tape epoch.
int node_of(Graph& g, const Tensor& t) {
  if (t.graph == &g && t.graph_epoch == g.epoch() && t.node >= 0) return t.node;
  return g.leaf(t);
}

bool should_record(const Tensor& a) { return t_active_graph != nullptr && a.requires_grad(); }
bool should_record(const Tensor& a, const Tensor& b) {
  return t_active_graph != nullptr && (a.requires_grad() || b.requires_grad());
}

void mark_recorded(Tensor& out, Graph& g, int node) {
  out.node = node;
  out.graph = &g;
  out.graph_epoch = g.epoch();
  out.set_requires_grad(true);
}

}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& s) {
  std::size_t n = 1;
  for (std::size_t d : s) n *= d;
  return n;
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return from(std::move(shape), {}, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  std::vector<double> d(shape_numel(shape), value);
  return from(std::move(shape), std::move(d), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> data, bool requires_grad) {
  for (std::size_t d : shape) {
    if (d == 0) throw ShapeError("Tensor: zero dimension in shape " + shape_str(shape));
  }
  const std::size_t n = shape_numel(shape);
  if (data.empty()) data.assign(n, 0.0);
  if (data.size() != n) {
    throw ShapeError("Tensor: data length " + std::to_string(data.size()) +
                     " does not match shape " + shape_str(shape));
  }
  Tensor t;
  t.st_ = std::make_shared<TensorStorage>();
  t.st_->data = std::move(data);
  t.shape_ = std::move(shape);
  t.requires_grad_ = requires_grad;
  return t;
}

Tensor Tensor::scalar(double value) { return from({1}, {value}); }

Tensor Tensor::randn_param(Shape shape, double sigma, RngStream& rng) {
  std::vector<double> d(shape_numel(shape));
  for (double& x : d) x = sigma * rng.normal();
  return from(std::move(shape), std::move(d), true);
}

double Tensor::item() const {
  if (!st_ || st_->data.size() != 1) {
    throw ShapeError("Tensor::item: tensor is not scalar, shape " + shape_str(shape_));
  }
  return st_->data[0];
}

std::vector<double> Tensor::grad() const {
  if (!st_) return {};
  if (st_->grad.empty()) return std::vector<double>(st_->data.size(), 0.0);
  return st_->grad;
}

// ---------------------------------------------------------------------------
// Graph
// ---------------------------------------------------------------------------

namespace {
// Epochs are globally unique so a stale tensor from a destroyed graph can
// never alias a node id on a new graph at the same address.
std::uint64_t next_graph_epoch() {
  static std::atomic<std::uint64_t> counter{1};
  return counter.fetch_add(1, std::memory_order_relaxed);
}
}  // namespace

Graph::Graph() : epoch_(next_graph_epoch()) {}

int Graph::record(const char* op, const Shape& out_shape, std::vector<int> inputs, BackwardFn back) {
  Node n;
  n.op = op;
  n.out_size = shape_numel(out_shape);
  n.inputs = std::move(inputs);
  n.back = std::move(back);
  nodes_.push_back(std::move(n));
  return static_cast<int>(nodes_.size()) - 1;
}

int Graph::leaf(const Tensor& t) {
  auto it = leaf_ids_.find(t.storage());
  if (it != leaf_ids_.end()) return it->second;
  Node n;
  n.op = "leaf";
  n.out_size = t.size();
  n.leaf_storage = t.storage_ptr();
  n.leaf_requires_grad = t.requires_grad();
  nodes_.push_back(std::move(n));
  int id = static_cast<int>(nodes_.size()) - 1;
  leaf_ids_.emplace(t.storage(), id);
  return id;
}

void Graph::accumulate(int node, const double* g, std::size_t n) {
  auto& buf = grad_bufs_[static_cast<std::size_t>(node)];
  if (buf.empty()) buf.assign(n, 0.0);
  for (std::size_t i = 0; i < n; ++i) buf[i] += g[i];
}

void Graph::backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw ShapeError("backward: loss must be scalar, shape " + shape_str(loss.shape()));
  }
  if (loss.graph != this || loss.graph_epoch != epoch_ || loss.node < 0) {
    throw std::logic_error("backward: loss was not recorded on this graph (graph cleared?)");
  }
  grad_bufs_.assign(nodes_.size(), {});
  grad_bufs_[static_cast<std::size_t>(loss.node)] = {1.0};

  for (int i = loss.node; i >= 0; --i) {
    auto& buf = grad_bufs_[static_cast<std::size_t>(i)];
    if (buf.empty()) continue;
    const Node& n = nodes_[static_cast<std::size_t>(i)];
    check_finite_grad(n.op, buf);
    if (n.back) {
      n.back(buf, *this);
    } else if (n.leaf_storage && n.leaf_requires_grad) {
      auto& g = n.leaf_storage->grad;
      if (g.empty()) g.assign(n.leaf_storage->data.size(), 0.0);
      for (std::size_t j = 0; j < buf.size(); ++j) g[j] += buf[j];
    }
    buf.clear();  // free as we go
  }
  grad_bufs_.clear();
}

void Graph::clear() {
  nodes_.clear();
  leaf_ids_.clear();
  grad_bufs_.clear();
  epoch_ = next_graph_epoch();
}

RecordScope::RecordScope() : graph_(std::make_unique<Graph>()), prev_(t_active_graph) {
  t_active_graph = graph_.get();
}

RecordScope::~RecordScope() { t_active_graph = prev_; }

Graph* active_graph() { return t_active_graph; }

void backward(const Tensor& loss) {
  if (!loss.graph || loss.node < 0) {
    throw std::logic_error("backward: loss is not attached to a graph");
  }
  const_cast<Graph*>(loss.graph)->backward(loss);
}

// ---------------------------------------------------------------------------
// Ops
// ---------------------------------------------------------------------------

namespace {

/// Shared recording boilerplate for a binary op whose backward only needs the
/// input values and the output grad.
template <typename BackA, typename BackB>
void record_binary(const char* op, Tensor& out, const Tensor& a, const Tensor& b,
                   BackA&& back_a, BackB&& back_b) {
  if (!should_record(a, b)) return;
  Graph& g = *t_active_graph;
  int na = node_of(g, a);
  int nb = node_of(g, b);
  std::size_t asize = a.size(), bsize = b.size();
  int node = g.record(op, out.shape(), {na, nb},
                      [na, nb, asize, bsize, ba = std::forward<BackA>(back_a),
                       bb = std::forward<BackB>(back_b)](const std::vector<double>& go, Graph& gr) {
                        std::vector<double> da(asize, 0.0);
                        ba(go, da);
                        gr.accumulate(na, da.data(), da.size());
                        std::vector<double> db(bsize, 0.0);
                        bb(go, db);
                        gr.accumulate(nb, db.data(), db.size());
                      });
  mark_recorded(out, g, node);
}

template <typename BackA>
void record_unary(const char* op, Tensor& out, const Tensor& a, BackA&& back_a) {
  if (!should_record(a)) return;
  Graph& g = *t_active_graph;
  int na = node_of(g, a);
  std::size_t asize = a.size();
  int node = g.record(op, out.shape(), {na},
                      [na, asize, ba = std::forward<BackA>(back_a)](const std::vector<double>& go, Graph& gr) {
                        std::vector<double> da(asize, 0.0);
                        ba(go, da);
                        gr.accumulate(na, da.data(), da.size());
                      });
  mark_recorded(out, g, node);
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.shape()[1] != b.shape()[0]) {
    shape_fail("matmul", a.shape(), b.shape());
  }
  const std::size_t n = a.shape()[0], k = a.shape()[1], m = b.shape()[1];
  Tensor out = Tensor::zeros({n, m});
  {
    auto av = a.data();
    auto bv = b.data();
    auto ov = out.data_mut();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t p = 0; p < k; ++p) {
        const double aip = av[i * k + p];
        if (aip == 0.0) continue;
        const double* brow = &bv[p * m];
        double* orow = &ov[i * m];
        for (std::size_t j = 0; j < m; ++j) orow[j] += aip * brow[j];
      }
    }
  }
  check_finite("matmul", out.data());

  record_binary(
      "matmul", out, a, b,
      [bvals = b, n, k, m](const std::vector<double>& go, std::vector<double>& da) {
        auto bv = bvals.data();
        for (std::size_t i = 0; i < n; ++i)
          for (std::size_t p = 0; p < k; ++p) {
            double s = 0.0;
            const double* grow = &go[i * m];
            const double* brow = &bv[p * m];
            for (std::size_t j = 0; j < m; ++j) s += grow[j] * brow[j];
            da[i * k + p] = s;
          }
      },
      [avals = a, n, k, m](const std::vector<double>& go, std::vector<double>& db) {
        auto av = avals.data();
        for (std::size_t i = 0; i < n; ++i) {
          const double* arow = &av[i * k];
          const double* grow = &go[i * m];
          for (std::size_t p = 0; p < k; ++p) {
            const double aip = arow[p];
            if (aip == 0.0) continue;
            double* drow = &db[p * m];
            for (std::size_t j = 0; j < m; ++j) drow[j] += aip * grow[j];
          }
        }
      });
  return out;
}

namespace {
enum class AddMode { elementwise, row_bias, channel_bias };
}

Tensor add(const Tensor& a, const Tensor& b) {
  AddMode mode;
  if (a.shape() == b.shape()) {
    mode = AddMode::elementwise;
  } else if (b.shape().size() == 1 && a.shape().size() == 2 && a.shape()[1] == b.shape()[0]) {
    mode = AddMode::row_bias;
  } else if (b.shape().size() == 1 && a.shape().size() == 4 && a.shape()[1] == b.shape()[0]) {
    mode = AddMode::channel_bias;
  } else {
    shape_fail("add", a.shape(), b.shape());
  }

  Tensor out = Tensor::from(a.shape(), std::vector<double>(a.data().begin(), a.data().end()));
  auto ov = out.data_mut();
  auto bv = b.data();
  if (mode == AddMode::elementwise) {
    for (std::size_t i = 0; i < ov.size(); ++i) ov[i] += bv[i];
  } else if (mode == AddMode::row_bias) {
    const std::size_t n = a.shape()[0], d = a.shape()[1];
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < d; ++j) ov[i * d + j] += bv[j];
  } else {
    const std::size_t n = a.shape()[0], c = a.shape()[1], hw = a.shape()[2] * a.shape()[3];
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t ch = 0; ch < c; ++ch) {
        double bias = bv[ch];
        double* p = &ov[(i * c + ch) * hw];
        for (std::size_t q = 0; q < hw; ++q) p[q] += bias;
      }
  }
  check_finite("add", out.data());

  const Shape ashape = a.shape();
  record_binary(
      "add", out, a, b,
      [](const std::vector<double>& go, std::vector<double>& da) {
        std::copy(go.begin(), go.end(), da.begin());
      },
      [mode, ashape](const std::vector<double>& go, std::vector<double>& db) {
        if (mode == AddMode::elementwise) {
          std::copy(go.begin(), go.end(), db.begin());
        } else if (mode == AddMode::row_bias) {
          const std::size_t n = ashape[0], d = ashape[1];
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t j = 0; j < d; ++j) db[j] += go[i * d + j];
        } else {
          const std::size_t n = ashape[0], c = ashape[1], hw = ashape[2] * ashape[3];
          for (std::size_t i = 0; i < n; ++i)
            for (std::size_t ch = 0; ch < c; ++ch) {
              const double* p = &go[(i * c + ch) * hw];
              double s = 0.0;
              for (std::size_t q = 0; q < hw; ++q) s += p[q];
              db[ch] += s;
            }
        }
      });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_fail("sub", a.shape(), b.shape());
  Tensor out = Tensor::zeros(a.shape());
  auto ov = out.data_mut();
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] - bv[i];
  check_finite("sub", out.data());
  record_binary(
      "sub", out, a, b,
      [](const std::vector<double>& go, std::vector<double>& da) {
        std::copy(go.begin(), go.end(), da.begin());
      },
      [](const std::vector<double>& go, std::vector<double>& db) {
        for (std::size_t i = 0; i < go.size(); ++i) db[i] = -go[i];
      });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) shape_fail("mul", a.shape(), b.shape());
  Tensor out = Tensor::zeros(a.shape());
  auto ov = out.data_mut();
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] * bv[i];
  check_finite("mul", out.data());
  record_binary(
      "mul", out, a, b,
      [bvals = b](const std::vector<double>& go, std::vector<double>& da) {
        auto bv = bvals.data();
        for (std::size_t i = 0; i < go.size(); ++i) da[i] = go[i] * bv[i];
      },
      [avals = a](const std::vector<double>& go, std::vector<double>& db) {
        auto av = avals.data();
        for (std::size_t i = 0; i < go.size(); ++i) db[i] = go[i] * av[i];
      });
  return out;
}

Tensor scale(const Tensor& a, double c) {
  Tensor out = Tensor::zeros(a.shape());
  auto ov = out.data_mut();
  auto av = a.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = c * av[i];
  check_finite("scale", out.data());
  record_unary("scale", out, a, [c](const std::vector<double>& go, std::vector<double>& da) {
    for (std::size_t i = 0; i < go.size(); ++i) da[i] = c * go[i];
  });
  return out;
}

Tensor relu(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  auto ov = out.data_mut();
  auto av = a.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] > 0.0 ? av[i] : 0.0;
  check_finite("relu", out.data());
  // relu'(0) = 0
  record_unary("relu", out, a, [avals = a](const std::vector<double>& go, std::vector<double>& da) {
    auto av = avals.data();
    for (std::size_t i = 0; i < go.size(); ++i) da[i] = av[i] > 0.0 ? go[i] : 0.0;
  });
  return out;
}

Tensor leaky_relu(const Tensor& a, double slope) {
  Tensor out = Tensor::zeros(a.shape());
  auto ov = out.data_mut();
  auto av = a.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] > 0.0 ? av[i] : slope * av[i];
  check_finite("leaky_relu", out.data());
  record_unary("leaky_relu", out, a,
               [avals = a, slope](const std::vector<double>& go, std::vector<double>& da) {
                 auto av = avals.data();
                 for (std::size_t i = 0; i < go.size(); ++i)
                   da[i] = av[i] > 0.0 ? go[i] : slope * go[i];
               });
  return out;
}

Tensor softmax(const Tensor& a, std::size_t axis) {
  const auto& sh = a.shape();
  if (sh.size() > 2 || axis >= sh.size()) {
    shape_fail1("softmax", sh, "supports 1-D and 2-D tensors, axis within rank");
  }
  // Normalise to (slices, slice_len, stride) so 1-D, 2-D axis 0 and axis 1
  // share one code path.
  std::size_t slices, len, stride, base_step;
  if (sh.size() == 1) {
    slices = 1; len = sh[0]; stride = 1; base_step = 0;
  } else if (axis == 1) {
    slices = sh[0]; len = sh[1]; stride = 1; base_step = sh[1];
  } else {
    slices = sh[1]; len = sh[0]; stride = sh[1]; base_step = 1;
  }

  Tensor out = Tensor::zeros(sh);
  auto ov = out.data_mut();
  auto av = a.data();
  for (std::size_t s = 0; s < slices; ++s) {
    const std::size_t base = s * base_step;
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t i = 0; i < len; ++i) mx = std::max(mx, av[base + i * stride]);
    double z = 0.0;
    for (std::size_t i = 0; i < len; ++i) {
      double e = std::exp(av[base + i * stride] - mx);
      ov[base + i * stride] = e;
      z += e;
    }
    for (std::size_t i = 0; i < len; ++i) ov[base + i * stride] /= z;
  }
  check_finite("softmax", out.data());

  record_unary("softmax", out, a,
               [yvals = out, slices, len, stride, base_step](const std::vector<double>& go,
                                                             std::vector<double>& da) {
                 auto y = yvals.data();
                 for (std::size_t s = 0; s < slices; ++s) {
                   const std::size_t base = s * base_step;
                   double dot = 0.0;
                   for (std::size_t i = 0; i < len; ++i)
                     dot += go[base + i * stride] * y[base + i * stride];
                   for (std::size_t i = 0; i < len; ++i) {
                     const std::size_t ix = base + i * stride;
                     da[ix] = y[ix] * (go[ix] - dot);
                   }
                 }
               });
  return out;
}

Tensor log(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  auto ov = out.data_mut();
  auto av = a.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = std::log(av[i]);
  check_finite("log", out.data());
  record_unary("log", out, a, [avals = a](const std::vector<double>& go, std::vector<double>& da) {
    auto av = avals.data();
    for (std::size_t i = 0; i < go.size(); ++i) da[i] = go[i] / av[i];
  });
  return out;
}

Tensor exp(const Tensor& a) {
  Tensor out = Tensor::zeros(a.shape());
  auto ov = out.data_mut();
  auto av = a.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = std::exp(av[i]);
  check_finite("exp", out.data());
  record_unary("exp", out, a, [yvals = out](const std::vector<double>& go, std::vector<double>& da) {
    auto y = yvals.data();
    for (std::size_t i = 0; i < go.size(); ++i) da[i] = go[i] * y[i];
  });
  return out;
}

Tensor mean(const Tensor& a) {
  const std::size_t n = a.size();
  double s = 0.0;
  for (double x : a.data()) s += x;
  Tensor out = Tensor::scalar(s / static_cast<double>(n));
  check_finite("mean", out.data());
  record_unary("mean", out, a, [n](const std::vector<double>& go, std::vector<double>& da) {
    const double g = go[0] / static_cast<double>(n);
    std::fill(da.begin(), da.end(), g);
  });
  return out;
}

Tensor sum(const Tensor& a) {
  double s = 0.0;
  for (double x : a.data()) s += x;
  Tensor out = Tensor::scalar(s);
  check_finite("sum", out.data());
  record_unary("sum", out, a, [](const std::vector<double>& go, std::vector<double>& da) {
    std::fill(da.begin(), da.end(), go[0]);
  });
  return out;
}

Tensor concat(const Tensor& a, const Tensor& b, std::size_t axis) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() != sb.size() || axis >= sa.size()) shape_fail("concat", sa, sb);
  for (std::size_t i = 0; i < sa.size(); ++i) {
    if (i != axis && sa[i] != sb[i]) shape_fail("concat", sa, sb);
  }
  Shape so = sa;
  so[axis] = sa[axis] + sb[axis];

  // Row-major copy in (outer, axis, inner) blocks.
  std::size_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < axis; ++i) outer *= sa[i];
  for (std::size_t i = axis + 1; i < sa.size(); ++i) inner *= sa[i];
  const std::size_t block_a = sa[axis] * inner, block_b = sb[axis] * inner;

  Tensor out = Tensor::zeros(so);
  auto ov = out.data_mut();
  auto av = a.data();
  auto bv = b.data();
  for (std::size_t o = 0; o < outer; ++o) {
    std::copy(av.begin() + static_cast<std::ptrdiff_t>(o * block_a),
              av.begin() + static_cast<std::ptrdiff_t>((o + 1) * block_a),
              ov.begin() + static_cast<std::ptrdiff_t>(o * (block_a + block_b)));
    std::copy(bv.begin() + static_cast<std::ptrdiff_t>(o * block_b),
              bv.begin() + static_cast<std::ptrdiff_t>((o + 1) * block_b),
              ov.begin() + static_cast<std::ptrdiff_t>(o * (block_a + block_b) + block_a));
  }
  check_finite("concat", out.data());

  record_binary(
      "concat", out, a, b,
      [outer, block_a, block_b](const std::vector<double>& go, std::vector<double>& da) {
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < block_a; ++i)
            da[o * block_a + i] = go[o * (block_a + block_b) + i];
      },
      [outer, block_a, block_b](const std::vector<double>& go, std::vector<double>& db) {
        for (std::size_t o = 0; o < outer; ++o)
          for (std::size_t i = 0; i < block_b; ++i)
            db[o * block_b + i] = go[o * (block_a + block_b) + block_a + i];
      });
  return out;
}

Tensor reshape(const Tensor& a, Shape new_shape) {
  if (shape_numel(new_shape) != a.size()) shape_fail("reshape", a.shape(), new_shape);
  Tensor out = Tensor::from(new_shape, std::vector<double>(a.data().begin(), a.data().end()));
  record_unary("reshape", out, a, [](const std::vector<double>& go, std::vector<double>& da) {
    std::copy(go.begin(), go.end(), da.begin());
  });
  return out;
}

Tensor clamp_min(const Tensor& a, double floor) {
  Tensor out = Tensor::zeros(a.shape());
  auto ov = out.data_mut();
  auto av = a.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = av[i] > floor ? av[i] : floor;
  check_finite("clamp_min", out.data());
  record_unary("clamp_min", out, a,
               [avals = a, floor](const std::vector<double>& go, std::vector<double>& da) {
                 auto av = avals.data();
                 for (std::size_t i = 0; i < go.size(); ++i) da[i] = av[i] > floor ? go[i] : 0.0;
               });
  return out;
}

Tensor gather_rows(const Tensor& probs, std::span<const int> labels) {
  const auto& sh = probs.shape();
  if (sh.size() != 2) shape_fail1("gather_rows", sh, "expects [n,k]");
  const std::size_t n = sh[0], k = sh[1];
  if (labels.size() != n) {
    throw ShapeError("gather_rows: " + std::to_string(labels.size()) + " labels for " +
                     std::to_string(n) + " rows");
  }
  std::vector<std::size_t> idx(n);
  for (std::size_t i = 0; i < n; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= k) {
      throw std::out_of_range("gather_rows: label " + std::to_string(labels[i]) +
                              " outside [0," + std::to_string(k) + ") at row " + std::to_string(i));
    }
    idx[i] = static_cast<std::size_t>(labels[i]);
  }
  Tensor out = Tensor::zeros({n});
  auto ov = out.data_mut();
  auto pv = probs.data();
  for (std::size_t i = 0; i < n; ++i) ov[i] = pv[i * k + idx[i]];
  check_finite("gather_rows", out.data());
  record_unary("gather_rows", out, probs,
               [idx = std::move(idx), k](const std::vector<double>& go, std::vector<double>& da) {
                 for (std::size_t i = 0; i < go.size(); ++i) da[i * k + idx[i]] = go[i];
               });
  return out;
}

Tensor take_rows(const Tensor& t, std::span<const std::uint32_t> indices) {
  const auto& sh = t.shape();
  if (sh.size() != 2) shape_fail1("take_rows", sh, "expects [n,k]");
  const std::size_t n = sh[0], k = sh[1];
  for (std::uint32_t ix : indices) {
    if (ix >= n) {
      throw std::out_of_range("take_rows: row " + std::to_string(ix) + " outside [0," +
                              std::to_string(n) + ")");
    }
  }
  Tensor out = Tensor::zeros({indices.size(), k});
  auto ov = out.data_mut();
  auto tv = t.data();
  for (std::size_t i = 0; i < indices.size(); ++i) {
    std::copy(tv.begin() + static_cast<std::ptrdiff_t>(indices[i] * k),
              tv.begin() + static_cast<std::ptrdiff_t>((indices[i] + 1) * k),
              ov.begin() + static_cast<std::ptrdiff_t>(i * k));
  }
  check_finite("take_rows", out.data());
  std::vector<std::uint32_t> idx(indices.begin(), indices.end());
  record_unary("take_rows", out, t,
               [idx = std::move(idx), k](const std::vector<double>& go, std::vector<double>& da) {
                 for (std::size_t i = 0; i < idx.size(); ++i)
                   for (std::size_t j = 0; j < k; ++j) da[idx[i] * k + j] += go[i * k + j];
               });
  return out;
}

Tensor conv2d(const Tensor& x, const Tensor& kernel, std::size_t stride, std::size_t padding) {
  const auto& xs = x.shape();
  const auto& ks = kernel.shape();
  if (xs.size() != 4 || ks.size() != 4 || xs[1] != ks[1]) shape_fail("conv2d", xs, ks);
  if (stride == 0) throw ShapeError("conv2d: stride must be positive");
  const std::size_t n = xs[0], ci = xs[1], h = xs[2], w = xs[3];
  const std::size_t co = ks[0], kh = ks[2], kw = ks[3];
  if (h + 2 * padding < kh || w + 2 * padding < kw) shape_fail("conv2d", xs, ks);
  const std::size_t oh = (h + 2 * padding - kh) / stride + 1;
  const std::size_t ow = (w + 2 * padding - kw) / stride + 1;

  Tensor out = Tensor::zeros({n, co, oh, ow});
  auto ov = out.data_mut();
  auto xv = x.data();
  auto kv = kernel.data();

  auto xat = [&](std::size_t b, std::size_t c, std::ptrdiff_t i, std::ptrdiff_t j) -> double {
    if (i < 0 || j < 0 || i >= static_cast<std::ptrdiff_t>(h) || j >= static_cast<std::ptrdiff_t>(w))
      return 0.0;
    return xv[((b * ci + c) * h + static_cast<std::size_t>(i)) * w + static_cast<std::size_t>(j)];
  };

  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t oc = 0; oc < co; ++oc)
      for (std::size_t oi = 0; oi < oh; ++oi)
        for (std::size_t oj = 0; oj < ow; ++oj) {
          double s = 0.0;
          for (std::size_t c = 0; c < ci; ++c)
            for (std::size_t ki = 0; ki < kh; ++ki)
              for (std::size_t kj = 0; kj < kw; ++kj) {
                const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(oi * stride + ki) -
                                          static_cast<std::ptrdiff_t>(padding);
                const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(oj * stride + kj) -
                                          static_cast<std::ptrdiff_t>(padding);
                s += xat(b, c, ii, jj) * kv[((oc * ci + c) * kh + ki) * kw + kj];
              }
          ov[((b * co + oc) * oh + oi) * ow + oj] = s;
        }
  check_finite("conv2d", out.data());

  record_binary(
      "conv2d", out, x, kernel,
      [kvals = kernel, n, ci, h, w, co, kh, kw, oh, ow, stride, padding](
          const std::vector<double>& go, std::vector<double>& dx) {
        auto kv = kvals.data();
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t oc = 0; oc < co; ++oc)
            for (std::size_t oi = 0; oi < oh; ++oi)
              for (std::size_t oj = 0; oj < ow; ++oj) {
                const double g = go[((b * co + oc) * oh + oi) * ow + oj];
                if (g == 0.0) continue;
                for (std::size_t c = 0; c < ci; ++c)
                  for (std::size_t ki = 0; ki < kh; ++ki)
                    for (std::size_t kj = 0; kj < kw; ++kj) {
                      const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(oi * stride + ki) -
                                                static_cast<std::ptrdiff_t>(padding);
                      const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(oj * stride + kj) -
                                                static_cast<std::ptrdiff_t>(padding);
                      if (ii < 0 || jj < 0 || ii >= static_cast<std::ptrdiff_t>(h) ||
                          jj >= static_cast<std::ptrdiff_t>(w))
                        continue;
                      dx[((b * ci + c) * h + static_cast<std::size_t>(ii)) * w +
                         static_cast<std::size_t>(jj)] += g * kv[((oc * ci + c) * kh + ki) * kw + kj];
                    }
              }
      },
      [xvals = x, n, ci, h, w, co, kh, kw, oh, ow, stride, padding](
          const std::vector<double>& go, std::vector<double>& dk) {
        auto xv = xvals.data();
        for (std::size_t b = 0; b < n; ++b)
          for (std::size_t oc = 0; oc < co; ++oc)
            for (std::size_t oi = 0; oi < oh; ++oi)
              for (std::size_t oj = 0; oj < ow; ++oj) {
                const double g = go[((b * co + oc) * oh + oi) * ow + oj];
                if (g == 0.0) continue;
                for (std::size_t c = 0; c < ci; ++c)
                  for (std::size_t ki = 0; ki < kh; ++ki)
                    for (std::size_t kj = 0; kj < kw; ++kj) {
                      const std::ptrdiff_t ii = static_cast<std::ptrdiff_t>(oi * stride + ki) -
                                                static_cast<std::ptrdiff_t>(padding);
                      const std::ptrdiff_t jj = static_cast<std::ptrdiff_t>(oj * stride + kj) -
                                                static_cast<std::ptrdiff_t>(padding);
                      if (ii < 0 || jj < 0 || ii >= static_cast<std::ptrdiff_t>(h) ||
                          jj >= static_cast<std::ptrdiff_t>(w))
                        continue;
                      dk[((oc * ci + c) * kh + ki) * kw + kj] +=
                          g * xv[((b * ci + c) * h + static_cast<std::size_t>(ii)) * w +
                                 static_cast<std::size_t>(jj)];
                    }
              }
      });
  return out;
}

Tensor maxpool2d(const Tensor& x, std::size_t window, std::size_t stride) {
  const auto& xs = x.shape();
  if (xs.size() != 4) shape_fail1("maxpool2d", xs, "expects [n,c,h,w]");
  if (window == 0 || stride == 0) throw ShapeError("maxpool2d: window and stride must be positive");
  const std::size_t n = xs[0], c = xs[1], h = xs[2], w = xs[3];
  if (h < window || w < window) shape_fail1("maxpool2d", xs, "window larger than input");
  const std::size_t oh = (h - window) / stride + 1;
  const std::size_t ow = (w - window) / stride + 1;

  Tensor out = Tensor::zeros({n, c, oh, ow});
  auto ov = out.data_mut();
  auto xv = x.data();
  // Ties route the gradient to the first maximal element in row-major window order.
  std::vector<std::size_t> argmax(n * c * oh * ow);
  for (std::size_t b = 0; b < n; ++b)
    for (std::size_t ch = 0; ch < c; ++ch)
      for (std::size_t oi = 0; oi < oh; ++oi)
        for (std::size_t oj = 0; oj < ow; ++oj) {
          double best = -std::numeric_limits<double>::infinity();
          std::size_t best_ix = 0;
          for (std::size_t ki = 0; ki < window; ++ki)
            for (std::size_t kj = 0; kj < window; ++kj) {
              const std::size_t ix = ((b * c + ch) * h + oi * stride + ki) * w + oj * stride + kj;
              if (xv[ix] > best) {
                best = xv[ix];
                best_ix = ix;
              }
            }
          const std::size_t ox = ((b * c + ch) * oh + oi) * ow + oj;
          ov[ox] = best;
          argmax[ox] = best_ix;
        }
  check_finite("maxpool2d", out.data());

  record_unary("maxpool2d", out, x,
               [argmax = std::move(argmax)](const std::vector<double>& go, std::vector<double>& dx) {
                 for (std::size_t i = 0; i < go.size(); ++i) dx[argmax[i]] += go[i];
               });
  return out;
}

namespace {

struct BnDims {
  std::size_t channels;  // normalised feature count
  std::size_t count;     // samples per feature
  // index of element (sample s, channel c)
  std::function<std::size_t(std::size_t, std::size_t)> index;
};

BnDims bn_dims(const char* op, const Shape& sh) {
  if (sh.size() == 2) {
    const std::size_t n = sh[0], d = sh[1];
    return {d, n, [d](std::size_t s, std::size_t c) { return s * d + c; }};
  }
  if (sh.size() == 4) {
    const std::size_t n = sh[0], c = sh[1], h = sh[2], w = sh[3];
    const std::size_t hw = h * w;
    return {c, n * hw, [c, hw](std::size_t s, std::size_t ch) {
              const std::size_t b = s / hw, pos = s % hw;
              return (b * c + ch) * hw + pos;
            }};
  }
  shape_fail1(op, sh, "expects [n,d] or [n,c,h,w]");
}

}  // namespace

Tensor batchnorm_train(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                       std::vector<double>& running_mean, std::vector<double>& running_var,
                       double momentum, double eps) {
  BnDims dims = bn_dims("batchnorm", x.shape());
  if (x.shape()[0] < 2) {
    throw ShapeError("batchnorm: training mode needs batch size >= 2, got shape " +
                     shape_str(x.shape()));
  }
  if (gamma.size() != dims.channels || beta.size() != dims.channels ||
      running_mean.size() != dims.channels || running_var.size() != dims.channels) {
    shape_fail("batchnorm", x.shape(), gamma.shape());
  }
  const std::size_t C = dims.channels, M = dims.count;
  auto xv = x.data();

  std::vector<double> mu(C, 0.0), var(C, 0.0), inv_std(C);
  for (std::size_t c = 0; c < C; ++c) {
    double s = 0.0;
    for (std::size_t i = 0; i < M; ++i) s += xv[dims.index(i, c)];
    mu[c] = s / static_cast<double>(M);
    double v = 0.0;
    for (std::size_t i = 0; i < M; ++i) {
      const double d = xv[dims.index(i, c)] - mu[c];
      v += d * d;
    }
    var[c] = v / static_cast<double>(M);
    inv_std[c] = 1.0 / std::sqrt(var[c] + eps);
    running_mean[c] = momentum * running_mean[c] + (1.0 - momentum) * mu[c];
    running_var[c] = momentum * running_var[c] + (1.0 - momentum) * var[c];
  }

  Tensor out = Tensor::zeros(x.shape());
  std::vector<double> xhat(x.size());
  {
    auto ov = out.data_mut();
    auto gv = gamma.data();
    auto bv = beta.data();
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < M; ++i) {
        const std::size_t ix = dims.index(i, c);
        xhat[ix] = (xv[ix] - mu[c]) * inv_std[c];
        ov[ix] = gv[c] * xhat[ix] + bv[c];
      }
  }
  check_finite("batchnorm", out.data());

  if (!(t_active_graph && (x.requires_grad() || gamma.requires_grad() || beta.requires_grad())))
    return out;

  Graph& g = *t_active_graph;
  int nx = node_of(g, x), ng = node_of(g, gamma), nb = node_of(g, beta);
  int node = g.record(
      "batchnorm", out.shape(), {nx, ng, nb},
      [nx, ng, nb, dims, xhat = std::move(xhat), inv_std = std::move(inv_std),
       gamma_t = gamma, xsize = x.size()](const std::vector<double>& go, Graph& gr) {
        const std::size_t C = dims.channels, M = dims.count;
        auto gv = gamma_t.data();
        std::vector<double> dx(xsize, 0.0), dgamma(C, 0.0), dbeta(C, 0.0);
        for (std::size_t c = 0; c < C; ++c) {
          // d/dxhat, then through the batch statistics.
          double sum_dy = 0.0, sum_dy_xhat = 0.0;
          for (std::size_t i = 0; i < M; ++i) {
            const std::size_t ix = dims.index(i, c);
            sum_dy += go[ix];
            sum_dy_xhat += go[ix] * xhat[ix];
          }
          dgamma[c] = sum_dy_xhat;
          dbeta[c] = sum_dy;
          const double m = static_cast<double>(M);
          for (std::size_t i = 0; i < M; ++i) {
            const std::size_t ix = dims.index(i, c);
            dx[ix] = gv[c] * inv_std[c] / m * (m * go[ix] - sum_dy - xhat[ix] * sum_dy_xhat);
          }
        }
        gr.accumulate(nx, dx.data(), dx.size());
        gr.accumulate(ng, dgamma.data(), dgamma.size());
        gr.accumulate(nb, dbeta.data(), dbeta.size());
      });
  mark_recorded(out, g, node);
  return out;
}

Tensor batchnorm_eval(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                      const std::vector<double>& running_mean,
                      const std::vector<double>& running_var, double eps) {
  BnDims dims = bn_dims("batchnorm_eval", x.shape());
  if (gamma.size() != dims.channels || beta.size() != dims.channels ||
      running_mean.size() != dims.channels || running_var.size() != dims.channels) {
    shape_fail("batchnorm_eval", x.shape(), gamma.shape());
  }
  const std::size_t C = dims.channels, M = dims.count;
  std::vector<double> inv_std(C);
  for (std::size_t c = 0; c < C; ++c) inv_std[c] = 1.0 / std::sqrt(running_var[c] + eps);

  Tensor out = Tensor::zeros(x.shape());
  std::vector<double> xhat(x.size());
  {
    auto ov = out.data_mut();
    auto xv = x.data();
    auto gv = gamma.data();
    auto bv = beta.data();
    for (std::size_t c = 0; c < C; ++c)
      for (std::size_t i = 0; i < M; ++i) {
        const std::size_t ix = dims.index(i, c);
        xhat[ix] = (xv[ix] - running_mean[c]) * inv_std[c];
        ov[ix] = gv[c] * xhat[ix] + bv[c];
      }
  }
  check_finite("batchnorm_eval", out.data());

  if (!(t_active_graph && (x.requires_grad() || gamma.requires_grad() || beta.requires_grad())))
    return out;

  Graph& g = *t_active_graph;
  int nx = node_of(g, x), ng = node_of(g, gamma), nb = node_of(g, beta);
  int node = g.record(
      "batchnorm_eval", out.shape(), {nx, ng, nb},
      [nx, ng, nb, dims, xhat = std::move(xhat), inv_std = std::move(inv_std), gamma_t = gamma,
       xsize = x.size()](const std::vector<double>& go, Graph& gr) {
        const std::size_t C = dims.channels, M = dims.count;
        auto gv = gamma_t.data();
        std::vector<double> dx(xsize, 0.0), dgamma(C, 0.0), dbeta(C, 0.0);
        for (std::size_t c = 0; c < C; ++c)
          for (std::size_t i = 0; i < M; ++i) {
            const std::size_t ix = dims.index(i, c);
            dx[ix] = go[ix] * gv[c] * inv_std[c];
            dgamma[c] += go[ix] * xhat[ix];
            dbeta[c] += go[ix];
          }
        gr.accumulate(nx, dx.data(), dx.size());
        gr.accumulate(ng, dgamma.data(), dgamma.size());
        gr.accumulate(nb, dbeta.data(), dbeta.size());
      });
  mark_recorded(out, g, node);
  return out;
}

Tensor dropout(const Tensor& x, double p, RngStream& rng) {
  if (p < 0.0 || p >= 1.0) {
    throw NumericFault("dropout: p must be in [0,1), got " + std::to_string(p));
  }
  if (p == 0.0) return x;

  const double keep_scale = 1.0 / (1.0 - p);
  std::vector<double> mask(x.size());
  for (double& m : mask) m = rng.uniform01() >= p ? keep_scale : 0.0;

  Tensor out = Tensor::zeros(x.shape());
  auto ov = out.data_mut();
  auto xv = x.data();
  for (std::size_t i = 0; i < ov.size(); ++i) ov[i] = xv[i] * mask[i];
  check_finite("dropout", out.data());
  record_unary("dropout", out, x,
               [mask = std::move(mask)](const std::vector<double>& go, std::vector<double>& da) {
                 for (std::size_t i = 0; i < go.size(); ++i) da[i] = go[i] * mask[i];
               });
  return out;
}

Tensor logmeanexp(const Tensor& t) {
  double mx = -std::numeric_limits<double>::infinity();
  for (double v : t.data()) mx = std::max(mx, v);
  if (!std::isfinite(mx)) throw NumericFault("logmeanexp: non-finite input");
  Tensor shifted = sub(t, Tensor::full(t.shape(), mx));
  Tensor lme = log(mean(exp(shifted)));
  return add(lme, Tensor::scalar(mx));
}

// ---------------------------------------------------------------------------
// SGD
// ---------------------------------------------------------------------------

void SgdOptimizer::step(std::span<Tensor> params) {
  if (opt_.lr < 0.0) throw NumericFault("sgd: learning rate must be nonnegative");
  for (Tensor& p : params) {
    TensorStorage* st = p.storage();
    if (!st) continue;
    if (st->grad.empty()) continue;  // untouched by backward: fixed point
    if (st->grad.size() != st->data.size()) {
      throw ShapeError("sgd: gradient size " + std::to_string(st->grad.size()) +
                       " does not match parameter size " + std::to_string(st->data.size()));
    }
    if (opt_.momentum != 0.0) {
      auto& v = velocity_[st];
      if (v.empty()) v.assign(st->data.size(), 0.0);
      for (std::size_t i = 0; i < st->data.size(); ++i) {
        v[i] = opt_.momentum * v[i] + st->grad[i];
        st->data[i] -= opt_.lr * v[i];
      }
    } else {
      for (std::size_t i = 0; i < st->data.size(); ++i) st->data[i] -= opt_.lr * st->grad[i];
    }
  }
}

void SgdOptimizer::zero_grad(std::span<Tensor> params) const {
  for (Tensor& p : params) p.zero_grad();
}

void sgd_step(Tensor& param, std::span<const double> grad, double lr) {
  if (lr < 0.0) throw NumericFault("sgd_step: learning rate must be nonnegative");
  if (grad.size() != param.size()) {
    throw ShapeError("sgd_step: gradient size " + std::to_string(grad.size()) +
                     " does not match parameter size " + std::to_string(param.size()));
  }
  auto d = param.data_mut();
  for (std::size_t i = 0; i < d.size(); ++i) d[i] -= lr * grad[i];
}

}  // namespace fada
