#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

namespace grit::diff {

using Shape = std::vector<std::size_t>;

std::size_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;

// Adjoint rule of a recorded primitive. Reads `out.grad()` and adds the
// contribution of each input into `input.mutable_grad()` for the inputs that
// require gradients.
using AdjointRule = std::function<void(const Tensor& out, std::span<const Tensor> inputs)>;

namespace detail {
struct Node {
  Shape shape;
  std::vector<double> values;
  std::vector<double> grad;  // empty until first touched
  bool requires_grad = false;
  std::string op;            // empty for leaves
  std::vector<Tensor> inputs;
  AdjointRule adjoint;
};
}  // namespace detail

/// Dense row-major tensor of doubles with an optional gradient accumulator.
///
/// `Tensor` is a shared handle: copies alias the same storage. Primitives in
/// ops.hpp record their inputs and adjoint rule on the result, so a call to
/// `backward()` on a scalar result walks the recorded graph in reverse.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim(std::size_t axis) const;
  std::size_t rank() const { return shape().size(); }
  std::size_t numel() const;

  std::span<double> values();
  std::span<const double> values() const;
  double item() const;

  bool requires_grad() const;
  void set_requires_grad(bool on);
  bool has_grad() const;
  // Zero-filled view if no gradient has been accumulated yet.
  std::span<const double> grad() const;
  // Allocates a zeroed accumulator on first use.
  std::span<double> mutable_grad() const;
  void zero_grad();

  bool is_leaf() const;
  const std::string& op() const;
  std::span<const Tensor> inputs() const;

  /// Reverse sweep seeded with 1 (root must be a scalar).
  void backward() const;
  /// Reverse sweep seeded with an explicit gradient of the root's shape.
  void backward(std::span<const double> seed) const;

  /// Same values, fresh leaf with no provenance.
  Tensor detach() const;
  /// Deep copy of values into an independent leaf.
  Tensor clone() const;

  bool same_storage(const Tensor& other) const { return node_ == other.node_; }
  const void* identity() const { return node_.get(); }

 private:
  friend Tensor record(std::string_view, Shape, std::vector<double>, std::vector<Tensor>, AdjointRule);
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  detail::Node& node() const;

  std::shared_ptr<detail::Node> node_;
};

/// Creates the result of a primitive application. If no input requires a
/// gradient (or gradient recording is disabled) the result is a plain leaf.
Tensor record(std::string_view op, Shape shape, std::vector<double> values,
              std::vector<Tensor> inputs, AdjointRule adjoint);

/// Executed primitive applications reachable from a root, in topological
/// order: every entry's inputs appear earlier or are leaves.
struct ComputationRecord {
  std::vector<Tensor> entries;
};

ComputationRecord trace(const Tensor& root);

/// Disables graph recording on the current thread while alive.
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

bool grad_enabled();

}  // namespace grit::diff
