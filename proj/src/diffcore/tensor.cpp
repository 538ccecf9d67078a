#include "grit/tensor.hpp"

#include <algorithm>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

namespace grit::diff {

namespace {
thread_local bool g_grad_enabled = true;
}

std::size_t numel(const Shape& shape) {
  std::size_t n = 1;
  for (auto extent : shape) n *= extent;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ',';
    os << shape[i];
  }
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  const auto n = diff::numel(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  for (auto extent : shape) {
    if (extent == 0) throw std::invalid_argument("tensor: zero extent in shape " + shape_str(shape));
  }
  if (diff::numel(shape) != values.size()) {
    throw std::invalid_argument("tensor: shape " + shape_str(shape) + " does not match " +
                                std::to_string(values.size()) + " values");
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->values = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

detail::Node& Tensor::node() const {
  if (!node_) throw std::logic_error("tensor: use of undefined tensor");
  return *node_;
}

const Shape& Tensor::shape() const { return node().shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) throw std::out_of_range("tensor: axis out of range for " + shape_str(s));
  return s[axis];
}

std::size_t Tensor::numel() const { return node().values.size(); }

std::span<double> Tensor::values() { return node().values; }
std::span<const double> Tensor::values() const { return node().values; }

double Tensor::item() const {
  if (numel() != 1) throw std::invalid_argument("tensor: item() on non-scalar " + shape_str(shape()));
  return node().values[0];
}

bool Tensor::requires_grad() const { return node().requires_grad; }

void Tensor::set_requires_grad(bool on) {
  if (!is_leaf()) throw std::logic_error("tensor: requires_grad can only be changed on leaves");
  node().requires_grad = on;
}

bool Tensor::has_grad() const { return !node().grad.empty(); }

std::span<const double> Tensor::grad() const {
  auto& n = node();
  if (n.grad.empty()) n.grad.assign(n.values.size(), 0.0);
  return n.grad;
}

std::span<double> Tensor::mutable_grad() const {
  auto& n = node();
  if (n.grad.empty()) n.grad.assign(n.values.size(), 0.0);
  return n.grad;
}

void Tensor::zero_grad() {
  auto& n = node();
  std::fill(n.grad.begin(), n.grad.end(), 0.0);
}

bool Tensor::is_leaf() const { return !node().adjoint; }
const std::string& Tensor::op() const { return node().op; }
std::span<const Tensor> Tensor::inputs() const { return node().inputs; }

Tensor Tensor::detach() const { return from(shape(), node().values, false); }

Tensor Tensor::clone() const { return from(shape(), node().values, requires_grad()); }

Tensor record(std::string_view op, Shape shape, std::vector<double> values, std::vector<Tensor> inputs,
              AdjointRule adjoint) {
  bool needs = false;
  if (g_grad_enabled) {
    for (const auto& in : inputs) needs = needs || in.requires_grad();
  }
  auto t = Tensor::from(std::move(shape), std::move(values), needs);
  if (needs) {
    auto& n = t.node();
    n.op = std::string(op);
    n.inputs = std::move(inputs);
    n.adjoint = std::move(adjoint);
  }
  return t;
}

ComputationRecord trace(const Tensor& root) {
  ComputationRecord rec;
  if (root.is_leaf()) return rec;
  // Iterative post-order DFS.
  std::unordered_set<const void*> visited;
  std::vector<std::pair<Tensor, std::size_t>> stack;
  stack.emplace_back(root, 0);
  visited.insert(root.identity());
  while (!stack.empty()) {
    auto& [t, next] = stack.back();
    const auto ins = t.inputs();
    if (next < ins.size()) {
      const Tensor child = ins[next++];
      if (!child.is_leaf() && visited.insert(child.identity()).second) stack.emplace_back(child, 0);
    } else {
      rec.entries.push_back(t);
      stack.pop_back();
    }
  }
  return rec;
}

void Tensor::backward() const {
  if (numel() != 1) {
    throw std::invalid_argument("backward: root " + shape_str(shape()) +
                                " is not a scalar; supply an explicit seed gradient");
  }
  const double one = 1.0;
  backward(std::span<const double>(&one, 1));
}

void Tensor::backward(std::span<const double> seed) const {
  if (is_leaf()) throw std::logic_error("backward: tensor has no recorded provenance");
  if (seed.size() != numel()) {
    throw std::invalid_argument("backward: seed has " + std::to_string(seed.size()) + " entries, root has shape " +
                                shape_str(shape()));
  }
  const auto rec = trace(*this);
  // Intermediate accumulators start empty (allocated on first contribution)
  // and are released once propagated, so repeated sweeps add exactly one
  // contribution to each leaf and only leaves keep a gradient.
  for (const auto& t : rec.entries) std::vector<double>().swap(t.node().grad);
  auto root_grad = mutable_grad();
  std::copy(seed.begin(), seed.end(), root_grad.begin());
  for (auto it = rec.entries.rbegin(); it != rec.entries.rend(); ++it) {
    auto& n = it->node();
    n.adjoint(*it, n.inputs);
    std::vector<double>().swap(n.grad);
  }
}

NoGradGuard::NoGradGuard() : previous_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = previous_; }

bool grad_enabled() { return g_grad_enabled; }

}  // namespace grit::diff
