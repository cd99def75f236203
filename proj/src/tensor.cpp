// SPDX-License-Identifier: Apache-2.0
#include "qsat/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <sstream>
#include <thread>

namespace qsat {

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << 'x';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

Tensor::Tensor() : impl_(std::make_shared<detail::TensorImpl>()) {}

Tensor::Tensor(Shape shape, double fill) : impl_(std::make_shared<detail::TensorImpl>()) {
  for (auto e : shape) {
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  }
  impl_->data.assign(shape_numel(shape), fill);
  impl_->shape = std::move(shape);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : impl_(std::make_shared<detail::TensorImpl>()) {
  for (auto e : shape) {
    if (e == 0) throw ShapeError("tensor extents must be positive, got " + shape_str(shape));
  }
  if (shape_numel(shape) != data.size()) {
    throw ShapeError("shape " + shape_str(shape) + " does not match " +
                     std::to_string(data.size()) + " elements");
  }
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
}

Tensor Tensor::scalar(double value) { return Tensor({1}, std::vector<double>{value}); }

std::size_t Tensor::dim(std::size_t axis) const {
  if (axis >= impl_->shape.size()) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(shape()));
  }
  return impl_->shape[axis];
}

double Tensor::item() const {
  if (impl_->data.size() != 1) {
    throw ShapeError("item() needs exactly one element, tensor is " + shape_str(shape()));
  }
  return impl_->data[0];
}

Tensor& Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  return *this;
}

Tensor Tensor::grad() const {
  if (impl_->grad.empty()) return Tensor(impl_->shape, 0.0);
  return Tensor(impl_->shape, impl_->grad);
}

Tensor Tensor::detach() const {
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = impl_->shape;
  impl->data = impl_->data;
  return Tensor(std::move(impl));
}

Tensor Tensor::reshape(Shape shape) const {
  if (shape_numel(shape) != size()) {
    throw ShapeError("cannot reshape " + shape_str(this->shape()) + " to " + shape_str(shape));
  }
  Tensor out(shape, impl_->data);
  Shape original = impl_->shape;
  return record("reshape", out, {*this}, [original](const Tensor& g) {
    return std::vector<Tensor>{Tensor(original, std::vector<double>(g.data().begin(), g.data().end()))};
  });
}

// ---------------------------------------------------------------------------
// Tape

namespace {

struct Node {
  std::string op;
  std::vector<Tensor> inputs;
  Tensor output;
  BackwardFn backward;
};

struct Tape {
  std::vector<Node> nodes;
  bool grad_enabled = true;
};

Tape& tape() {
  thread_local Tape t;
  return t;
}

void accumulate(detail::TensorImpl& impl, std::span<const double> g) {
  if (impl.grad.empty()) {
    impl.grad.assign(g.begin(), g.end());
    return;
  }
  for (std::size_t i = 0; i < g.size(); ++i) impl.grad[i] += g[i];
}

}  // namespace

Tensor record(std::string op, Tensor output, std::vector<Tensor> inputs, BackwardFn backward) {
  auto& t = tape();
  if (!t.grad_enabled) return output;
  bool any = std::any_of(inputs.begin(), inputs.end(),
                         [](const Tensor& x) { return x.requires_grad(); });
  if (!any) return output;
  output.set_requires_grad(true);
  t.nodes.push_back(Node{std::move(op), std::move(inputs), output, std::move(backward)});
  return output;
}

void backward(const Tensor& loss) {
  if (loss.size() != 1) {
    throw ShapeError("backward() needs a one-element loss, got " + shape_str(loss.shape()));
  }
  auto& t = tape();
  std::vector<Node> nodes;
  nodes.swap(t.nodes);
  if (!loss.requires_grad()) return;
  std::vector<double> seed{1.0};
  accumulate(*loss.impl(), seed);

  NoGradGuard guard;
  for (auto it = nodes.rbegin(); it != nodes.rend(); ++it) {
    Node& node = *it;
    if (!node.output.has_grad()) continue;
    Tensor gout(node.output.shape(),
                std::vector<double>(node.output.grad_data().begin(), node.output.grad_data().end()));
    std::vector<Tensor> grads = node.backward(gout);
    if (grads.size() != node.inputs.size()) {
      throw std::logic_error("backward of '" + node.op + "' returned " +
                             std::to_string(grads.size()) + " gradients for " +
                             std::to_string(node.inputs.size()) + " inputs");
    }
    for (std::size_t i = 0; i < grads.size(); ++i) {
      Tensor& in = node.inputs[i];
      if (!in.requires_grad() || grads[i].empty()) continue;
      if (grads[i].shape() != in.shape()) {
        throw ShapeError("backward of '" + node.op + "' produced gradient " +
                         shape_str(grads[i].shape()) + " for input " + shape_str(in.shape()));
      }
      accumulate(*in.impl(), grads[i].data());
    }
    // Intermediate gradients are no longer needed once propagated.
    node.backward = nullptr;
  }
}

void clear_tape() { tape().nodes.clear(); }
std::size_t tape_size() { return tape().nodes.size(); }
bool grad_enabled() { return tape().grad_enabled; }

NoGradGuard::NoGradGuard() : previous_(tape().grad_enabled) { tape().grad_enabled = false; }
NoGradGuard::~NoGradGuard() { tape().grad_enabled = previous_; }

// ---------------------------------------------------------------------------
// Custom ops

CustomOp::CustomOp(std::string name, std::size_t arity, Forward forward,
                   std::vector<Backward> backward)
    : name_(std::move(name)), arity_(arity), forward_(std::move(forward)),
      backward_(std::move(backward)) {
  if (!forward_) throw std::invalid_argument("custom op '" + name_ + "': missing forward");
  if (backward_.size() != arity_) {
    throw std::invalid_argument("custom op '" + name_ + "': " + std::to_string(arity_) +
                                " inputs but " + std::to_string(backward_.size()) +
                                " backward rules");
  }
  for (const auto& b : backward_) {
    if (!b) throw std::invalid_argument("custom op '" + name_ + "': null backward rule");
  }
}

Tensor CustomOp::operator()(std::vector<Tensor> inputs) const {
  if (inputs.size() != arity_) {
    throw std::invalid_argument("custom op '" + name_ + "' takes " + std::to_string(arity_) +
                                " inputs, got " + std::to_string(inputs.size()));
  }
  Tensor out;
  {
    NoGradGuard guard;
    out = forward_(inputs);
  }
  // Fresh storage so the recorded output never aliases an input.
  if (std::any_of(inputs.begin(), inputs.end(), [&](const Tensor& x) { return x.same_storage(out); })) {
    out = out.detach();
  }
  auto rules = backward_;
  auto saved = inputs;
  Tensor saved_out = out.detach();
  return record(name_, out, std::move(inputs), [rules, saved, saved_out](const Tensor& g) {
    std::vector<Tensor> grads;
    grads.reserve(rules.size());
    for (const auto& rule : rules) grads.push_back(rule(g, saved, saved_out));
    return grads;
  });
}

CustomOp register_custom_backward(std::string name, std::size_t arity, CustomOp::Forward forward,
                                  std::vector<CustomOp::Backward> backward) {
  return CustomOp(std::move(name), arity, std::move(forward), std::move(backward));
}

double finite_difference_check(const std::function<Tensor(const Tensor&)>& fn, const Tensor& point,
                               double eps) {
  Tensor x = point.detach();
  x.set_requires_grad(true);
  Tensor y = fn(x);
  if (y.size() != 1) throw ShapeError("finite_difference_check needs a scalar-valued function");
  backward(y);
  Tensor analytic = x.grad();

  std::vector<double> numeric(x.size());
  {
    NoGradGuard guard;
    Tensor probe = point.detach();
    for (std::size_t i = 0; i < probe.size(); ++i) {
      double orig = probe[i];
      probe[i] = orig + eps;
      double fp = fn(probe).item();
      probe[i] = orig - eps;
      double fm = fn(probe).item();
      probe[i] = orig;
      numeric[i] = (fp - fm) / (2.0 * eps);
    }
  }
  double scale = 0.0, worst = 0.0;
  for (std::size_t i = 0; i < numeric.size(); ++i) {
    scale = std::max({scale, std::abs(numeric[i]), std::abs(analytic[i])});
    worst = std::max(worst, std::abs(numeric[i] - analytic[i]));
  }
  if (scale == 0.0) return 0.0;
  return worst / scale;
}

// ---------------------------------------------------------------------------
// Threads

namespace {
std::size_t default_threads() {
  if (const char* env = std::getenv("QSAT_THREADS")) {
    long v = std::strtol(env, nullptr, 10);
    if (v > 0) return static_cast<std::size_t>(v);
  }
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}
std::size_t g_threads = default_threads();
}  // namespace

std::size_t max_threads() { return g_threads; }
void set_max_threads(std::size_t n) { g_threads = std::max<std::size_t>(1, n); }

void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body) {
  std::size_t workers = std::min(g_threads, n);
  if (workers <= 1) {
    if (n) body(0, n);
    return;
  }
  std::vector<std::thread> pool;
  pool.reserve(workers - 1);
  std::size_t chunk = (n + workers - 1) / workers;
  for (std::size_t w = 1; w < workers; ++w) {
    std::size_t lo = w * chunk, hi = std::min(n, lo + chunk);
    if (lo < hi) pool.emplace_back(body, lo, hi);
  }
  body(0, std::min(n, chunk));
  for (auto& th : pool) th.join();
}

}  // namespace qsat
