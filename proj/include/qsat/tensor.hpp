// SPDX-License-Identifier: Apache-2.0
//
// Dense row-major tensors with a tape-based reverse-mode autodiff engine.
//
// A Tensor is a shared handle: copies alias the same storage, like the
// handles of most deep-learning frameworks. Operations that consume at least
// one tensor with requires_grad() record a node on the calling thread's tape;
// backward() replays the tape in reverse construction order and then clears
// it. Storage is 64-bit; every reduction accumulates in 64-bit.
#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "qsat/errors.hpp"

namespace qsat {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);
std::size_t shape_numel(const Shape& shape);

namespace detail {
struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until a gradient arrives
  bool requires_grad = false;
};
}  // namespace detail

class Tensor {
 public:
  Tensor();
  explicit Tensor(Shape shape, double fill = 0.0);
  Tensor(Shape shape, std::vector<double> data);

  static Tensor scalar(double value);

  const Shape& shape() const { return impl_->shape; }
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return impl_->shape.size(); }
  std::size_t size() const { return impl_->data.size(); }
  bool empty() const { return impl_->data.empty(); }

  std::span<double> data() { return impl_->data; }
  std::span<const double> data() const { return impl_->data; }
  double& operator[](std::size_t i) { return impl_->data[i]; }
  double operator[](std::size_t i) const { return impl_->data[i]; }
  double item() const;

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on = true);

  bool has_grad() const { return !impl_->grad.empty(); }
  // Gradient as a tensor (zeros if none has arrived yet).
  Tensor grad() const;
  std::span<const double> grad_data() const { return impl_->grad; }
  void zero_grad() { impl_->grad.clear(); }

  // Fresh storage, same values, no gradient history.
  Tensor detach() const;
  Tensor clone() const { return detach(); }
  // Copy under a new shape with equal element count. Differentiable.
  Tensor reshape(Shape shape) const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }
  const std::shared_ptr<detail::TensorImpl>& impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<detail::TensorImpl> impl_;
};

// ---------------------------------------------------------------------------
// Tape

// Computes one gradient per input from the output gradient. An empty Tensor
// in the returned list means "no contribution" for that input.
using BackwardFn = std::function<std::vector<Tensor>(const Tensor& grad_output)>;

// Attach `output` to the tape as the result of `op` applied to `inputs`.
// Nothing is recorded when grad mode is off or no input requires grad.
Tensor record(std::string op, Tensor output, std::vector<Tensor> inputs,
              BackwardFn backward);

// Seeds d(loss)/d(loss) = 1 and propagates through the tape, then clears it.
void backward(const Tensor& loss);

// Drops every recorded node without propagating.
void clear_tape();
std::size_t tape_size();

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

// A forward function with user-supplied per-input backward rules. The node
// created by operator() routes gradients through the rules verbatim; the
// forward function runs with grad mode off, so it is never differentiated.
class CustomOp {
 public:
  using Forward = std::function<Tensor(std::span<const Tensor> inputs)>;
  // Gradient with respect to one input.
  using Backward = std::function<Tensor(const Tensor& grad_output,
                                        std::span<const Tensor> inputs,
                                        const Tensor& output)>;

  // Throws std::invalid_argument when backward.size() != arity.
  CustomOp(std::string name, std::size_t arity, Forward forward,
           std::vector<Backward> backward);

  Tensor operator()(std::vector<Tensor> inputs) const;

  const std::string& name() const { return name_; }
  std::size_t arity() const { return arity_; }

 private:
  std::string name_;
  std::size_t arity_;
  Forward forward_;
  std::vector<Backward> backward_;
};

CustomOp register_custom_backward(std::string name, std::size_t arity,
                                  CustomOp::Forward forward,
                                  std::vector<CustomOp::Backward> backward);

// Central-difference check of reverse-mode gradients of a scalar function.
// Returns max_i |analytic_i - numeric_i| / max(|analytic|_inf, |numeric|_inf),
// i.e. the worst deviation relative to the gradient's own scale. Callers must
// keep `point` away from discontinuities (rounding boundaries of quantizers).
double finite_difference_check(const std::function<Tensor(const Tensor&)>& fn,
                               const Tensor& point, double eps = 1e-5);

// ---------------------------------------------------------------------------
// Work partitioning. Splits [0, n) into contiguous chunks over at most
// max_threads() workers. Kernels only use it where each output element is
// produced by exactly one worker, so results do not depend on the split.
std::size_t max_threads();
void set_max_threads(std::size_t n);
void parallel_for(std::size_t n, const std::function<void(std::size_t, std::size_t)>& body);

}  // namespace qsat
