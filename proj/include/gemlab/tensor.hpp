#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

namespace gemlab {

using Shape = std::vector<std::size_t>;

std::size_t numel_of(const Shape& shape);
std::string shape_str(const Shape& shape);

class Tensor;

// Propagates the gradient of an op result into its parents.
using BackwardFn = std::function<void(std::span<const double> out_grad)>;

namespace detail {
struct Node;
}

/// Dense row-major array of doubles that participates in a reverse-mode
/// differentiation graph. Copies share the underlying node.
///
/// Results of ops are immutable once built; only leaves (parameters and
/// inputs) may be written through mutable_data(). Gradients accumulate into
/// grad() until zero_grad() is called.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor identity(std::size_t n);

  /// Builds an op result. requires_grad is inherited from the parents; when no
  /// parent requires it the backward rule is dropped.
  static Tensor make_result(Shape shape, std::vector<double> values,
                            std::vector<Tensor> parents, BackwardFn backward);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const;
  std::size_t dim() const { return shape().size(); }
  std::size_t numel() const;
  std::size_t rows() const;
  std::size_t cols() const;

  std::span<const double> data() const;
  std::span<double> mutable_data();
  double item() const;
  double at(std::size_t r, std::size_t c) const;

  bool requires_grad() const;
  void set_requires_grad(bool value);
  bool is_leaf() const;

  bool has_grad() const;
  std::span<const double> grad() const;
  /// Grad buffer, allocated as zeros on first use.
  std::span<double> grad_buffer() const;
  void zero_grad();

  /// Deep copy of the values into a fresh leaf.
  Tensor detach_copy(bool requires_grad = false) const;

  bool same_node(const Tensor& other) const { return node_ == other.node_; }

 private:
  explicit Tensor(std::shared_ptr<detail::Node> node) : node_(std::move(node)) {}
  friend void backward(const Tensor& loss);
  std::shared_ptr<detail::Node> node_;
};

/// Reverse sweep from a scalar loss. Leaf gradients accumulate across calls;
/// intermediate gradients are recomputed every call.
void backward(const Tensor& loss);

// ---- ops ----

Tensor matmul(const Tensor& a, const Tensor& b);
/// a · bᵀ without materializing the transpose.
Tensor matmul_nt(const Tensor& a, const Tensor& b);
Tensor transpose(const Tensor& a);
Tensor add(const Tensor& a, const Tensor& b);
/// Adds a 1×n row (or length-n vector) to every row of an m×n matrix.
Tensor add_row(const Tensor& a, const Tensor& row);
Tensor scale(const Tensor& a, double factor);
Tensor relu(const Tensor& a);
Tensor softmax_rows(const Tensor& a);
Tensor layer_norm(const Tensor& x, const Tensor& scale, const Tensor& shift, double eps = 1e-5);
Tensor sum(const Tensor& a);
Tensor mean(const Tensor& a);
/// out[i] = a[index[i]]; backward scatters-adds.
Tensor gather_rows(const Tensor& a, std::span<const std::size_t> index);

}  // namespace gemlab
