#include "diffsal/tensor.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <sstream>
#include <unordered_set>

#include "diffsal/rng.hpp"

namespace diffsal {

namespace {

thread_local bool g_grad_enabled = true;
std::atomic<uint64_t> g_node_seq{0};

void check_shape(const Shape& shape) {
  for (int64_t d : shape) {
    if (d < 0) throw ShapeError("negative extent in shape " + shape_str(shape));
  }
}

}  // namespace

int64_t numel(const Shape& shape) {
  int64_t n = 1;
  for (int64_t d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '(';
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ", ";
    os << shape[i];
  }
  os << ')';
  return os.str();
}

std::vector<double>& TensorImpl::ensure_grad() {
  if (grad.empty()) grad.assign(data.size(), 0.0);
  return grad;
}

bool GradMode::enabled() { return g_grad_enabled; }
void GradMode::set_enabled(bool on) { g_grad_enabled = on; }

NoGradGuard::NoGradGuard() : prev_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = prev_; }

Tensor::Tensor(Shape shape, std::vector<double> data) {
  check_shape(shape);
  if (diffsal::numel(shape) != static_cast<int64_t>(data.size())) {
    throw ShapeError("data length " + std::to_string(data.size()) + " does not match shape " +
                     shape_str(shape));
  }
  impl_ = std::make_shared<TensorImpl>();
  impl_->shape = std::move(shape);
  impl_->data = std::move(data);
}

Tensor Tensor::zeros(const Shape& shape) { return full(shape, 0.0); }
Tensor Tensor::ones(const Shape& shape) { return full(shape, 1.0); }

Tensor Tensor::full(const Shape& shape, double value) {
  check_shape(shape);
  return Tensor(shape, std::vector<double>(diffsal::numel(shape), value));
}

Tensor Tensor::scalar(double value) { return Tensor({}, {value}); }

Tensor Tensor::randn(const Shape& shape, Rng& rng) {
  check_shape(shape);
  std::vector<double> v(diffsal::numel(shape));
  for (double& x : v) x = rng.normal();
  return Tensor(shape, std::move(v));
}

Tensor Tensor::uniform(const Shape& shape, double lo, double hi, Rng& rng) {
  check_shape(shape);
  std::vector<double> v(diffsal::numel(shape));
  for (double& x : v) x = rng.uniform(lo, hi);
  return Tensor(shape, std::move(v));
}

int64_t Tensor::size(int64_t axis) const {
  const int64_t r = dim();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) {
    throw ShapeError("axis " + std::to_string(axis) + " out of range for shape " + shape_str(shape()));
  }
  return impl_->shape[axis];
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return impl_->data[0];
}

double Tensor::at(std::initializer_list<int64_t> index) const {
  if (static_cast<int64_t>(index.size()) != dim()) {
    throw ShapeError("index rank mismatch for shape " + shape_str(shape()));
  }
  int64_t flat = 0;
  int64_t axis = 0;
  for (int64_t i : index) {
    const int64_t d = impl_->shape[axis++];
    if (i < 0 || i >= d) throw std::out_of_range("index out of range for shape " + shape_str(shape()));
    flat = flat * d + i;
  }
  return impl_->data[flat];
}

Tensor& Tensor::set_requires_grad(bool on) {
  impl_->requires_grad = on;
  return *this;
}

Tensor Tensor::grad_tensor() const {
  if (impl_->grad.empty()) return Tensor::zeros(shape());
  return Tensor(shape(), impl_->grad);
}

Tensor Tensor::detach() const { return Tensor(shape(), impl_->data); }

bool Tensor::all_finite() const {
  return std::all_of(impl_->data.begin(), impl_->data.end(), [](double v) { return std::isfinite(v); });
}

void Tensor::backward() const {
  if (numel() != 1) {
    throw ShapeError("backward() requires a scalar loss, got shape " + shape_str(shape()));
  }
  if (!impl_->requires_grad) return;
  GradTape tape = GradTape::record(*this);
  impl_->ensure_grad()[0] += 1.0;
  tape.replay();
}

GradTape GradTape::record(const Tensor& root) {
  GradTape tape;
  std::vector<TensorImpl*> stack{root.impl().get()};
  std::unordered_set<TensorImpl*> seen;
  std::vector<std::shared_ptr<TensorImpl>> found;
  if (root.impl()->grad_fn) found.push_back(root.impl());
  seen.insert(root.impl().get());
  while (!stack.empty()) {
    TensorImpl* cur = stack.back();
    stack.pop_back();
    if (!cur->grad_fn) continue;
    for (const auto& in : cur->grad_fn->inputs) {
      if (!in->requires_grad || !seen.insert(in.get()).second) continue;
      if (in->grad_fn) found.push_back(in);
      stack.push_back(in.get());
    }
  }
  // Node sequence numbers are assigned at creation, so they are a
  // topological order of the recorded graph.
  std::sort(found.begin(), found.end(),
            [](const auto& a, const auto& b) { return a->grad_fn->seq < b->grad_fn->seq; });
  tape.outputs_ = std::move(found);
  return tape;
}

void GradTape::replay() const {
  for (auto it = outputs_.rbegin(); it != outputs_.rend(); ++it) {
    TensorImpl& out = **it;
    if (out.grad.empty()) continue;
    out.grad_fn->backward(out);
    // intermediate accumulators are released once consumed
    out.grad.clear();
    out.grad.shrink_to_fit();
  }
}

Tensor make_result(Shape shape, std::vector<double> data, const char* name, std::vector<Tensor> inputs,
                   std::function<void(const TensorImpl& out)> backward) {
  Tensor out(std::move(shape), std::move(data));
  if (!GradMode::enabled()) return out;
  bool needs = false;
  for (const auto& t : inputs) needs = needs || t.requires_grad();
  if (!needs) return out;
  auto node = std::make_shared<Node>();
  node->seq = g_node_seq.fetch_add(1, std::memory_order_relaxed);
  node->name = name;
  node->inputs.reserve(inputs.size());
  for (const auto& t : inputs) node->inputs.push_back(t.impl());
  node->backward = std::move(backward);
  out.impl()->requires_grad = true;
  out.impl()->grad_fn = std::move(node);
  return out;
}

}  // namespace diffsal
