#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace diffsal {

using Shape = std::vector<int64_t>;

int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

struct TensorImpl;

// One recorded operation. `backward` reads the output gradient and
// accumulates into every input that requires grad.
struct Node {
  uint64_t seq = 0;
  const char* name = "";
  std::vector<std::shared_ptr<TensorImpl>> inputs;
  std::function<void(const TensorImpl& out)> backward;
};

struct TensorImpl {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  std::shared_ptr<Node> grad_fn;

  bool is_leaf() const { return grad_fn == nullptr; }
  std::vector<double>& ensure_grad();
};

// Global (per-thread) switch for graph recording.
class GradMode {
 public:
  static bool enabled();
  static void set_enabled(bool on);
};

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

class Rng;

class Tensor {
 public:
  Tensor() = default;
  Tensor(Shape shape, std::vector<double> data);
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}

  static Tensor zeros(const Shape& shape);
  static Tensor ones(const Shape& shape);
  static Tensor full(const Shape& shape, double value);
  static Tensor scalar(double value);
  static Tensor randn(const Shape& shape, Rng& rng);
  static Tensor uniform(const Shape& shape, double lo, double hi, Rng& rng);

  bool defined() const { return impl_ != nullptr; }
  const Shape& shape() const { return impl_->shape; }
  int64_t dim() const { return static_cast<int64_t>(impl_->shape.size()); }
  int64_t size(int64_t axis) const;
  int64_t numel() const { return static_cast<int64_t>(impl_->data.size()); }

  std::span<const double> data() const { return impl_->data; }
  // Direct write access; only meant for leaves (parameter updates, loaders).
  std::span<double> mutable_data() { return impl_->data; }
  double item() const;
  double at(std::initializer_list<int64_t> index) const;
  std::vector<double> to_vector() const { return impl_->data; }

  bool requires_grad() const { return impl_->requires_grad; }
  Tensor& set_requires_grad(bool on = true);
  bool has_grad() const { return !impl_->grad.empty(); }
  std::span<const double> grad() const { return impl_->grad; }
  Tensor grad_tensor() const;
  void zero_grad() { impl_->grad.clear(); }

  void backward() const;
  Tensor detach() const;
  Tensor clone() const { return detach(); }
  bool all_finite() const;

  const std::shared_ptr<TensorImpl>& impl() const { return impl_; }

 private:
  std::shared_ptr<TensorImpl> impl_;
};

// Topologically ordered list of the operations reachable from one output.
class GradTape {
 public:
  static GradTape record(const Tensor& root);
  const std::vector<std::shared_ptr<TensorImpl>>& nodes() const { return outputs_; }
  size_t size() const { return outputs_.size(); }
  // Runs every backward rule from the last node to the first.
  void replay() const;

 private:
  std::vector<std::shared_ptr<TensorImpl>> outputs_;  // ordered by node seq
};

// Builds an op output; records `backward` when grad mode is on and some
// input requires grad.
Tensor make_result(Shape shape, std::vector<double> data, const char* name,
                   std::vector<Tensor> inputs,
                   std::function<void(const TensorImpl& out)> backward);

}  // namespace diffsal
