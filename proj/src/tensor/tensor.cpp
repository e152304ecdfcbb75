#include "mtclip/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <unordered_set>

#include "mtclip/error.hpp"

namespace mtclip {

namespace {

thread_local std::uint64_t g_tape_counter = 0;
thread_local bool g_grad_enabled = true;

std::shared_ptr<detail::Node> new_node(Shape shape, std::vector<double> value,
                                       bool requires_grad) {
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->value = std::move(value);
  node->requires_grad = requires_grad;
  node->tape_pos = ++g_tape_counter;
  return node;
}

}  // namespace

const char* to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::kDimension: return "dimension";
    case ErrorKind::kArgument: return "argument";
    case ErrorKind::kConfig: return "config";
    case ErrorKind::kInput: return "input";
    case ErrorKind::kFormat: return "format";
    case ErrorKind::kCheckpoint: return "checkpoint";
    case ErrorKind::kMetric: return "metric";
    case ErrorKind::kReport: return "report";
    case ErrorKind::kUsage: return "usage";
    case ErrorKind::kNumeric: return "numeric";
  }
  return "unknown";
}

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto e : shape) n *= e;
  return n;
}

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

std::vector<double>& detail::Node::grad_buffer() {
  if (grad.empty()) grad.assign(value.size(), 0.0);
  return grad;
}

Tensor Tensor::zeros(const Shape& shape, bool requires_grad) {
  return full(shape, 0.0, requires_grad);
}

Tensor Tensor::full(const Shape& shape, double value, bool requires_grad) {
  return Tensor(new_node(shape, std::vector<double>(shape_numel(shape), value),
                         requires_grad));
}

Tensor Tensor::from_vector(const Shape& shape, std::vector<double> values,
                           bool requires_grad) {
  if (shape_numel(shape) != values.size()) {
    throw DimensionError("from_vector: shape " + shape_str(shape) + " needs " +
                         std::to_string(shape_numel(shape)) +
                         " elements, got " + std::to_string(values.size()));
  }
  return Tensor(new_node(shape, std::move(values), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(new_node({}, {value}, requires_grad));
}

const Shape& Tensor::shape() const { return node_->shape; }

std::size_t Tensor::size(std::size_t axis) const {
  if (axis >= dim()) {
    throw ArgumentError("axis " + std::to_string(axis) + " out of range for " +
                        shape_str(shape()));
  }
  return shape()[axis];
}

std::size_t Tensor::numel() const { return node_->value.size(); }

std::span<const double> Tensor::data() const { return node_->value; }

std::span<double> Tensor::mutable_data() {
  if (!node_->is_leaf()) {
    throw UsageError("mutable_data on a non-leaf tensor");
  }
  return node_->value;
}

double Tensor::item() const {
  if (numel() != 1) {
    throw ArgumentError("item() on tensor of shape " + shape_str(shape()));
  }
  return node_->value[0];
}

double Tensor::at(std::initializer_list<std::size_t> index) const {
  if (index.size() != dim()) {
    throw ArgumentError("at(): index rank does not match " + shape_str(shape()));
  }
  std::size_t flat = 0;
  std::size_t axis = 0;
  for (auto i : index) {
    if (i >= shape()[axis]) throw ArgumentError("at(): index out of range");
    flat = flat * shape()[axis] + i;
    ++axis;
  }
  return node_->value[flat];
}

bool Tensor::requires_grad() const { return node_->requires_grad; }

void Tensor::set_requires_grad(bool flag) {
  if (!node_->is_leaf()) {
    throw UsageError("set_requires_grad on a non-leaf tensor");
  }
  node_->requires_grad = flag;
}

bool Tensor::has_grad() const { return !node_->grad.empty(); }

std::span<const double> Tensor::grad() const { return node_->grad; }

std::span<double> Tensor::mutable_grad() { return node_->grad_buffer(); }

void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::detach() const {
  return Tensor(new_node(node_->shape, node_->value, false));
}

Tensor Tensor::make_result(Shape shape, std::vector<double> value,
                           std::vector<Tensor> parents,
                           std::function<void(detail::Node&)> backward) {
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& p : parents) needs = needs || p.requires_grad();
  }
  auto node = new_node(std::move(shape), std::move(value), needs);
  if (needs) {
    node->parents.reserve(parents.size());
    for (auto& p : parents) node->parents.push_back(p.node_);
    node->backward = std::move(backward);
  }
  return Tensor(std::move(node));
}

void Tensor::backward() const {
  if (numel() != 1) {
    throw ArgumentError("backward() needs a scalar loss, got shape " +
                        shape_str(shape()));
  }
  if (!requires_grad()) return;

  // Gather everything reachable that participates in differentiation.
  std::vector<detail::Node*> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<detail::Node*> stack{node_.get()};
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (auto& p : n->parents) {
      if (p->requires_grad && seen.insert(p.get()).second) {
        stack.push_back(p.get());
      }
    }
  }
  // Strict reverse tape order gives a fixed accumulation order.
  std::sort(order.begin(), order.end(),
            [](const detail::Node* a, const detail::Node* b) {
              return a->tape_pos > b->tape_pos;
            });

  for (auto* n : order) {
    if (!n->is_leaf()) n->grad.clear();
  }
  node_->grad_buffer()[0] += 1.0;
  for (auto* n : order) {
    if (!n->is_leaf() && !n->grad.empty()) n->backward(*n);
  }
  for (auto* n : order) {
    if (!n->is_leaf()) {
      n->grad.clear();
      n->grad.shrink_to_fit();
    }
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) {
  g_grad_enabled = false;
}

NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

}  // namespace mtclip
