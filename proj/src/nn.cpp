#include "fada/nn.hpp"

#include <cmath>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

namespace fada {

using nlohmann::json;

const char* component_kind_name(ComponentKind k) {
  switch (k) {
    case ComponentKind::generator: return "generator";
    case ComponentKind::disentangler: return "disentangler";
    case ComponentKind::classifier: return "classifier";
    case ComponentKind::class_identifier: return "class_identifier";
    case ComponentKind::domain_identifier: return "domain_identifier";
    case ComponentKind::reconstructor: return "reconstructor";
    case ComponentKind::mine: return "mine";
  }
  return "?";
}

LayerDesc LayerDesc::Dense(std::size_t in, std::size_t out) {
  LayerDesc d;
  d.kind = Kind::dense;
  d.in = in;
  d.out = out;
  return d;
}
LayerDesc LayerDesc::Conv(std::size_t in, std::size_t out, std::size_t k, std::size_t stride,
                          std::size_t padding) {
  LayerDesc d;
  d.kind = Kind::conv;
  d.in = in;
  d.out = out;
  d.ksize = k;
  d.stride = stride;
  d.padding = padding;
  return d;
}
LayerDesc LayerDesc::BatchNorm(std::size_t dim) {
  LayerDesc d;
  d.kind = Kind::batchnorm;
  d.dim = dim;
  return d;
}
LayerDesc LayerDesc::Relu() {
  LayerDesc d;
  d.kind = Kind::relu;
  return d;
}
LayerDesc LayerDesc::LeakyRelu(double slope) {
  LayerDesc d;
  d.kind = Kind::leaky_relu;
  d.slope = slope;
  return d;
}
LayerDesc LayerDesc::MaxPool(std::size_t window, std::size_t stride) {
  LayerDesc d;
  d.kind = Kind::maxpool;
  d.window = window;
  d.stride = stride;
  return d;
}
LayerDesc LayerDesc::Dropout(double p) {
  LayerDesc d;
  d.kind = Kind::dropout;
  d.p = p;
  return d;
}
LayerDesc LayerDesc::Softmax() {
  LayerDesc d;
  d.kind = Kind::softmax;
  return d;
}
LayerDesc LayerDesc::Flatten() {
  LayerDesc d;
  d.kind = Kind::flatten;
  return d;
}

// ---------------------------------------------------------------------------
// Stack
// ---------------------------------------------------------------------------

Stack::Stack(const std::vector<LayerDesc>& descs, RngStream& rng, double init_sigma) {
  std::size_t prev_out = 0;
  for (const LayerDesc& d : descs) {
    Layer l;
    l.desc = d;
    switch (d.kind) {
      case LayerDesc::Kind::dense:
        if (prev_out != 0 && prev_out != d.in) {
          throw ShapeError("stack: dense layer input " + std::to_string(d.in) +
                           " does not compose with previous output " + std::to_string(prev_out));
        }
        l.w = Tensor::randn_param({d.in, d.out}, init_sigma, rng);
        l.b = Tensor::zeros({d.out}, true);
        prev_out = d.out;
        break;
      case LayerDesc::Kind::conv:
        l.w = Tensor::randn_param({d.out, d.in, d.ksize, d.ksize}, init_sigma, rng);
        l.b = Tensor::zeros({d.out}, true);
        prev_out = 0;  // spatial; recomposed at the flatten boundary
        break;
      case LayerDesc::Kind::batchnorm:
        l.gamma = Tensor::full({d.dim}, 1.0, true);
        l.beta = Tensor::zeros({d.dim}, true);
        l.running_mean.assign(d.dim, 0.0);
        l.running_var.assign(d.dim, 1.0);
        break;
      default:
        break;
    }
    layers.push_back(std::move(l));
  }
}

Tensor Stack::forward(Tensor x, Mode mode, RngStream* dropout_rng) {
  for (Layer& l : layers) {
    switch (l.desc.kind) {
      case LayerDesc::Kind::dense:
        x = add(matmul(x, l.w), l.b);
        break;
      case LayerDesc::Kind::conv:
        x = add(conv2d(x, l.w, l.desc.stride, l.desc.padding), l.b);
        break;
      case LayerDesc::Kind::batchnorm:
        x = mode == Mode::train
                ? batchnorm_train(x, l.gamma, l.beta, l.running_mean, l.running_var, 0.9, 1e-5)
                : batchnorm_eval(x, l.gamma, l.beta, l.running_mean, l.running_var, 1e-5);
        break;
      case LayerDesc::Kind::relu:
        x = relu(x);
        break;
      case LayerDesc::Kind::leaky_relu:
        x = leaky_relu(x, l.desc.slope);
        break;
      case LayerDesc::Kind::maxpool:
        x = maxpool2d(x, l.desc.window, l.desc.stride);
        break;
      case LayerDesc::Kind::dropout:
        if (mode == Mode::train && l.desc.p > 0.0) {
          if (!dropout_rng) throw std::logic_error("stack: dropout in train mode needs an rng");
          x = dropout(x, l.desc.p, *dropout_rng);
        }
        break;
      case LayerDesc::Kind::softmax:
        x = softmax(x, x.shape().size() == 1 ? 0 : 1);
        break;
      case LayerDesc::Kind::flatten: {
        std::size_t rest = 1;
        for (std::size_t i = 1; i < x.shape().size(); ++i) rest *= x.shape()[i];
        x = reshape(x, {x.shape()[0], rest});
        break;
      }
    }
  }
  return x;
}

// ---------------------------------------------------------------------------
// Component
// ---------------------------------------------------------------------------

namespace {

void stack_visit_params(Stack& s, const std::string& prefix,
                        const std::function<void(const std::string&, Tensor&)>& fn) {
  for (std::size_t i = 0; i < s.layers.size(); ++i) {
    Layer& l = s.layers[i];
    const std::string base = prefix + "." + std::to_string(i);
    if (l.w.defined()) fn(base + ".w", l.w);
    if (l.b.defined()) fn(base + ".b", l.b);
    if (l.gamma.defined()) fn(base + ".gamma", l.gamma);
    if (l.beta.defined()) fn(base + ".beta", l.beta);
  }
}

void stack_visit_buffers(Stack& s, const std::string& prefix,
                         const std::function<void(const std::string&, std::vector<double>&)>& fn) {
  for (std::size_t i = 0; i < s.layers.size(); ++i) {
    Layer& l = s.layers[i];
    const std::string base = prefix + "." + std::to_string(i);
    if (!l.running_mean.empty()) fn(base + ".running_mean", l.running_mean);
    if (!l.running_var.empty()) fn(base + ".running_var", l.running_var);
  }
}

void component_visit_params(Component& c,
                            const std::function<void(const std::string&, Tensor&)>& fn) {
  stack_visit_params(c.trunk, "trunk", fn);
  for (std::size_t b = 0; b < c.branches.size(); ++b) {
    stack_visit_params(c.branches[b], "branch" + std::to_string(b), fn);
  }
}

void component_visit_buffers(Component& c,
                             const std::function<void(const std::string&, std::vector<double>&)>& fn) {
  stack_visit_buffers(c.trunk, "trunk", fn);
  for (std::size_t b = 0; b < c.branches.size(); ++b) {
    stack_visit_buffers(c.branches[b], "branch" + std::to_string(b), fn);
  }
}

}  // namespace

Tensor Component::forward(Tensor x, Mode mode, RngStream* dropout_rng) {
  if (!branches.empty()) {
    throw std::logic_error(std::string("Component::forward: ") + component_kind_name(kind) +
                           " has branches; use its dedicated forward helper");
  }
  return trunk.forward(std::move(x), mode, dropout_rng);
}

Component Component::clone() const {
  Component out;
  out.kind = kind;
  out.spec = spec;
  auto clone_stack = [](const Stack& s) {
    Stack ns;
    for (const Layer& l : s.layers) {
      Layer nl;
      nl.desc = l.desc;
      auto deep = [](const Tensor& t) {
        if (!t.defined()) return Tensor();
        return Tensor::from(t.shape(), std::vector<double>(t.data().begin(), t.data().end()),
                            t.requires_grad());
      };
      nl.w = deep(l.w);
      nl.b = deep(l.b);
      nl.gamma = deep(l.gamma);
      nl.beta = deep(l.beta);
      nl.running_mean = l.running_mean;
      nl.running_var = l.running_var;
      ns.layers.push_back(std::move(nl));
    }
    return ns;
  };
  out.trunk = clone_stack(trunk);
  for (const Stack& b : branches) out.branches.push_back(clone_stack(b));
  return out;
}

std::vector<Tensor> Component::params() {
  std::vector<Tensor> ps;
  component_visit_params(*this, [&](const std::string&, Tensor& t) { ps.push_back(t); });
  return ps;
}

std::size_t Component::param_count() const {
  std::size_t n = 0;
  auto& self = const_cast<Component&>(*this);
  component_visit_params(self, [&](const std::string&, Tensor& t) { n += t.size(); });
  return n;
}

std::vector<double> Component::state() const {
  auto& self = const_cast<Component&>(*this);
  std::vector<double> out;
  component_visit_params(self, [&](const std::string&, Tensor& t) {
    out.insert(out.end(), t.data().begin(), t.data().end());
  });
  component_visit_buffers(self, [&](const std::string&, std::vector<double>& b) {
    out.insert(out.end(), b.begin(), b.end());
  });
  return out;
}

void Component::set_state(std::span<const double> s) {
  std::size_t off = 0;
  component_visit_params(*this, [&](const std::string&, Tensor& t) {
    if (off + t.size() > s.size()) throw ShapeError("Component::set_state: state too short");
    std::copy(s.begin() + static_cast<std::ptrdiff_t>(off),
              s.begin() + static_cast<std::ptrdiff_t>(off + t.size()), t.data_mut().begin());
    off += t.size();
  });
  component_visit_buffers(*this, [&](const std::string&, std::vector<double>& b) {
    if (off + b.size() > s.size()) throw ShapeError("Component::set_state: state too short");
    std::copy(s.begin() + static_cast<std::ptrdiff_t>(off),
              s.begin() + static_cast<std::ptrdiff_t>(off + b.size()), b.begin());
    off += b.size();
  });
  if (off != s.size()) throw ShapeError("Component::set_state: state size mismatch");
}

std::size_t Component::state_size() const {
  auto& self = const_cast<Component&>(*this);
  std::size_t n = 0;
  component_visit_params(self, [&](const std::string&, Tensor& t) { n += t.size(); });
  component_visit_buffers(self, [&](const std::string&, std::vector<double>& b) { n += b.size(); });
  return n;
}

void Component::visit_params(const std::function<void(const std::string&, Tensor&)>& fn) {
  component_visit_params(*this, fn);
}

Component build_component(const ComponentSpec& spec, RngStream& rng, double init_sigma) {
  Component c;
  c.kind = spec.kind;
  c.spec = spec;
  c.trunk = Stack(spec.trunk, rng, init_sigma);
  if (!spec.branch.empty()) {
    c.branches.push_back(Stack(spec.branch, rng, init_sigma));
    c.branches.push_back(Stack(spec.branch, rng, init_sigma));
  }
  return c;
}

DisentangledPair forward_disentangle(Component& generator, Component& disentangler, const Tensor& x,
                                     Mode mode, RngStream* dropout_rng) {
  Tensor f = generator.forward(x, mode, dropout_rng);
  Tensor t = disentangler.trunk.forward(f, mode, dropout_rng);
  Tensor f_di = disentangler.branches.at(0).forward(t, mode, dropout_rng);
  Tensor f_ds = disentangler.branches.at(1).forward(t, mode, dropout_rng);
  return {f_di, f_ds};
}

Tensor mine_forward(Component& mine, const Tensor& p, const Tensor& q, Mode mode) {
  if (p.shape()[0] != q.shape()[0]) {
    throw ShapeError("mine_forward: batch count mismatch " + shape_str(p.shape()) + " vs " +
                     shape_str(q.shape()));
  }
  Tensor hp = mine.branches.at(0).forward(p, mode, nullptr);
  Tensor hq = mine.branches.at(1).forward(q, mode, nullptr);
  Tensor t = mine.trunk.forward(add(hp, hq), mode, nullptr);
  return reshape(t, {p.shape()[0]});
}

Tensor di_source_prob(Component& di, const Tensor& features, Mode mode) {
  Tensor logits = di.forward(features, mode, nullptr);
  Tensor probs = softmax(logits, 1);
  std::vector<int> zeros(features.shape()[0], 0);
  return gather_rows(probs, zeros);
}

// ---------------------------------------------------------------------------
// Families
// ---------------------------------------------------------------------------

std::size_t scaled_width(std::size_t base, double scale) {
  auto w = static_cast<std::size_t>(std::llround(static_cast<double>(base) * scale));
  return w == 0 ? 1 : w;
}

ModelSpec make_mlp_model(std::size_t input_dim, std::size_t classes, double width_scale) {
  using L = LayerDesc;
  const std::size_t g_out = scaled_width(128, width_scale);
  const std::size_t trunk_out = scaled_width(64, width_scale);
  const std::size_t branch_out = scaled_width(32, width_scale);
  const std::size_t di_hidden = scaled_width(32, width_scale);
  const std::size_t mine_hidden = scaled_width(16, width_scale);

  ModelSpec m;
  m.input_dim = input_dim;
  m.feature_dim = g_out;
  m.branch_dim = branch_out;
  m.classes = classes;

  m.generator = {ComponentKind::generator,
                 {L::Dense(input_dim, g_out), L::BatchNorm(g_out), L::Relu()},
                 {}};
  m.disentangler = {ComponentKind::disentangler,
                    {L::Dense(g_out, trunk_out), L::BatchNorm(trunk_out), L::Relu()},
                    {L::Dropout(0.5), L::Dense(trunk_out, branch_out), L::BatchNorm(branch_out),
                     L::Relu()}};
  m.classifier = {ComponentKind::classifier,
                  {L::Dense(branch_out, classes), L::BatchNorm(classes), L::Softmax()},
                  {}};
  m.class_identifier = m.classifier;
  m.class_identifier.kind = ComponentKind::class_identifier;
  m.domain_identifier = {ComponentKind::domain_identifier,
                         {L::Dense(g_out, di_hidden), L::LeakyRelu(), L::Dense(di_hidden, 2),
                          L::LeakyRelu()},
                         {}};
  m.reconstructor = {ComponentKind::reconstructor, {L::Dense(2 * branch_out, g_out)}, {}};
  m.mine = {ComponentKind::mine,
            {L::LeakyRelu(), L::Dense(mine_hidden, 1)},
            {L::Dense(branch_out, mine_hidden)}};
  return m;
}

ModelSpec make_digit_model(std::size_t image_channels, std::size_t image_hw, std::size_t classes,
                           double width_scale) {
  using L = LayerDesc;
  const std::size_t c1 = scaled_width(64, width_scale);
  const std::size_t c2 = scaled_width(64, width_scale);
  const std::size_t c3 = scaled_width(128, width_scale);
  if (image_hw % 4 != 0) throw std::invalid_argument("digit family: image side must be divisible by 4");
  const std::size_t g_out = c3 * (image_hw / 4) * (image_hw / 4);
  const std::size_t trunk_out = scaled_width(3072, width_scale);
  const std::size_t branch_out = scaled_width(2048, width_scale);
  const std::size_t di_hidden = scaled_width(256, width_scale);
  const std::size_t mine_hidden = scaled_width(512, width_scale);

  ModelSpec m;
  m.input_dim = image_channels * image_hw * image_hw;
  m.feature_dim = g_out;
  m.branch_dim = branch_out;
  m.classes = classes;
  m.conv_input = true;
  m.image_channels = image_channels;
  m.image_hw = image_hw;

  m.generator = {ComponentKind::generator,
                 {L::Conv(image_channels, c1, 5, 1, 2), L::BatchNorm(c1), L::Relu(), L::MaxPool(2, 2),
                  L::Conv(c1, c2, 5, 1, 2), L::BatchNorm(c2), L::Relu(), L::MaxPool(2, 2),
                  L::Conv(c2, c3, 5, 1, 2), L::BatchNorm(c3), L::Relu(), L::Flatten()},
                 {}};
  m.disentangler = {ComponentKind::disentangler,
                    {L::Dense(g_out, trunk_out), L::BatchNorm(trunk_out), L::Relu()},
                    {L::Dropout(0.5), L::Dense(trunk_out, branch_out), L::BatchNorm(branch_out),
                     L::Relu()}};
  m.classifier = {ComponentKind::classifier,
                  {L::Dense(branch_out, classes), L::BatchNorm(classes), L::Softmax()},
                  {}};
  m.class_identifier = m.classifier;
  m.class_identifier.kind = ComponentKind::class_identifier;
  m.domain_identifier = {ComponentKind::domain_identifier,
                         {L::Dense(g_out, di_hidden), L::LeakyRelu(), L::Dense(di_hidden, 2),
                          L::LeakyRelu()},
                         {}};
  m.reconstructor = {ComponentKind::reconstructor, {L::Dense(2 * branch_out, g_out)}, {}};
  m.mine = {ComponentKind::mine,
            {L::LeakyRelu(), L::Dense(mine_hidden, 1)},
            {L::Dense(branch_out, mine_hidden)}};
  return m;
}

// ---------------------------------------------------------------------------
// Bundles
// ---------------------------------------------------------------------------

ModelBundle build_bundle(const ModelSpec& spec, Role role, RngStream& rng) {
  ModelBundle b;
  b.role = role;
  b.generator = build_component(spec.generator, rng);
  b.disentangler = build_component(spec.disentangler, rng);
  b.classifier = build_component(spec.classifier, rng);
  if (role == Role::source) {
    b.class_identifier = build_component(spec.class_identifier, rng);
    b.reconstructor = build_component(spec.reconstructor, rng);
    b.mine = build_component(spec.mine, rng);
  }
  return b;
}

ModelBundle ModelBundle::clone() const {
  ModelBundle out;
  out.role = role;
  out.generator = generator.clone();
  out.disentangler = disentangler.clone();
  out.classifier = classifier.clone();
  if (class_identifier) out.class_identifier = class_identifier->clone();
  if (reconstructor) out.reconstructor = reconstructor->clone();
  if (mine) out.mine = mine->clone();
  return out;
}

std::vector<Component*> ModelBundle::shared_components() {
  return {&generator, &disentangler, &classifier};
}

std::vector<const Component*> ModelBundle::shared_components() const {
  return {&generator, &disentangler, &classifier};
}

std::vector<double> ModelBundle::shared_state() const {
  std::vector<double> out;
  for (const Component* c : shared_components()) {
    auto s = c->state();
    out.insert(out.end(), s.begin(), s.end());
  }
  return out;
}

void ModelBundle::set_shared_state(std::span<const double> s) {
  std::size_t off = 0;
  for (Component* c : shared_components()) {
    const std::size_t n = c->state_size();
    if (off + n > s.size()) throw ShapeError("ModelBundle::set_shared_state: state too short");
    c->set_state(s.subspan(off, n));
    off += n;
  }
  if (off != s.size()) throw ShapeError("ModelBundle::set_shared_state: state size mismatch");
}

Tensor classify(ModelBundle& bundle, const Tensor& x, Mode mode, RngStream* dropout_rng) {
  Tensor f = bundle.generator.forward(x, mode, dropout_rng);
  Tensor t = bundle.disentangler.trunk.forward(f, mode, dropout_rng);
  Tensor f_di = bundle.disentangler.branches.at(0).forward(t, mode, dropout_rng);
  return bundle.classifier.forward(f_di, mode, dropout_rng);
}

Tensor batch_tensor(const Matrix& m) {
  return Tensor::from({m.rows, m.cols}, m.data);
}

Tensor batch_image_tensor(const Matrix& m, std::size_t c, std::size_t hw) {
  if (m.cols != c * hw * hw) {
    throw ShapeError("batch_image_tensor: " + std::to_string(m.cols) + " columns, expected " +
                     std::to_string(c * hw * hw));
  }
  return Tensor::from({m.rows, c, hw, hw}, m.data);
}

double accuracy(ModelBundle& bundle, const Matrix& features, std::span<const int> labels) {
  if (features.rows == 0) return 0.0;
  Tensor x = batch_tensor(features);
  Tensor probs = classify(bundle, x, Mode::eval, nullptr);
  const std::size_t k = probs.shape()[1];
  std::size_t hits = 0;
  for (std::size_t i = 0; i < features.rows; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < k; ++j) {
      if (probs.data()[i * k + j] > probs.data()[i * k + best]) best = j;
    }
    if (static_cast<int>(best) == labels[i]) ++hits;
  }
  return static_cast<double>(hits) / static_cast<double>(features.rows);
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

struct ParamRef {
  std::string name;
  Shape shape;
  const double* data;
  double* mut = nullptr;
};
struct BufferRef {
  std::string name;
  std::size_t len;
  const double* data;
  double* mut = nullptr;
};

void enumerate_state(Component& c, std::vector<ParamRef>& params, std::vector<BufferRef>& buffers) {
  component_visit_params(c, [&](const std::string& n, Tensor& t) {
    params.push_back({n, t.shape(), t.data().data(), t.data_mut().data()});
  });
  component_visit_buffers(c, [&](const std::string& n, std::vector<double>& b) {
    buffers.push_back({n, b.size(), b.data(), b.data()});
  });
}

}  // namespace

void save_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, const Component*>>& components) {
  json header;
  header["format"] = "fada-checkpoint";
  header["version"] = 1;
  header["scalar"] = "f64-le";
  header["components"] = json::array();

  std::vector<std::pair<const double*, std::size_t>> blobs;
  for (const auto& [name, comp] : components) {
    std::vector<ParamRef> params;
    std::vector<BufferRef> buffers;
    enumerate_state(const_cast<Component&>(*comp), params, buffers);
    json jc;
    jc["name"] = name;
    jc["kind"] = component_kind_name(comp->kind);
    jc["params"] = json::array();
    for (const ParamRef& p : params) {
      jc["params"].push_back({{"name", p.name}, {"shape", p.shape}});
      blobs.emplace_back(p.data, shape_numel(p.shape));
    }
    jc["buffers"] = json::array();
    for (const BufferRef& b : buffers) {
      jc["buffers"].push_back({{"name", b.name}, {"len", b.len}});
      blobs.emplace_back(b.data, b.len);
    }
    header["components"].push_back(std::move(jc));
  }

  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("save_checkpoint: cannot open " + path);
  out << header.dump() << '\n';
  for (const auto& [ptr, n] : blobs) {
    out.write(reinterpret_cast<const char*>(ptr), static_cast<std::streamsize>(n * sizeof(double)));
  }
  if (!out) throw std::runtime_error("save_checkpoint: write failed for " + path);
}

void load_checkpoint(const std::string& path,
                     const std::vector<std::pair<std::string, Component*>>& components) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("load_checkpoint: cannot open " + path);
  std::string header_line;
  if (!std::getline(in, header_line)) throw std::runtime_error("load_checkpoint: missing header");
  json header = json::parse(header_line);
  if (header.value("format", "") != "fada-checkpoint") {
    throw std::runtime_error("load_checkpoint: not a checkpoint file: " + path);
  }

  for (const auto& jc : header["components"]) {
    const std::string name = jc["name"];
    Component* comp = nullptr;
    for (const auto& [n, c] : components) {
      if (n == name) comp = c;
    }
    if (!comp) throw std::runtime_error("load_checkpoint: unexpected component '" + name + "'");

    std::vector<ParamRef> params;
    std::vector<BufferRef> buffers;
    enumerate_state(*comp, params, buffers);
    if (jc["params"].size() != params.size() || jc["buffers"].size() != buffers.size()) {
      throw std::runtime_error("load_checkpoint: layout mismatch for component '" + name + "'");
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
      const auto& jp = jc["params"][i];
      if (jp["name"] != params[i].name || Shape(jp["shape"]) != params[i].shape) {
        throw std::runtime_error("load_checkpoint: parameter mismatch at '" + params[i].name + "'");
      }
      const std::size_t n = shape_numel(params[i].shape);
      in.read(reinterpret_cast<char*>(params[i].mut), static_cast<std::streamsize>(n * sizeof(double)));
    }
    for (std::size_t i = 0; i < buffers.size(); ++i) {
      const auto& jb = jc["buffers"][i];
      if (jb["name"] != buffers[i].name || jb["len"] != buffers[i].len) {
        throw std::runtime_error("load_checkpoint: buffer mismatch at '" + buffers[i].name + "'");
      }
      in.read(reinterpret_cast<char*>(buffers[i].mut),
              static_cast<std::streamsize>(buffers[i].len * sizeof(double)));
    }
    if (!in) throw std::runtime_error("load_checkpoint: truncated data in " + path);
  }
}

}  // namespace fada
