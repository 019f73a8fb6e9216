#include "gemlab/tensor.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "gemlab/errors.hpp"

namespace gemlab {

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  bool leaf = true;
  std::vector<std::shared_ptr<Node>> parents;
  BackwardFn backward;
};

}  // namespace detail

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using CMap = Eigen::Map<const RowMat>;
using MMap = Eigen::Map<RowMat>;

CMap cmap(std::span<const double> s, std::size_t r, std::size_t c) {
  return CMap(s.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

MMap mmap(std::span<double> s, std::size_t r, std::size_t c) {
  return MMap(s.data(), static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c));
}

void require_matrix(const Tensor& t, const char* op) {
  if (!t.defined()) throw ArgumentError(std::string(op) + ": undefined tensor");
  if (t.dim() != 2) {
    throw DimensionError(std::string(op) + ": expected a matrix, got shape " + shape_str(t.shape()));
  }
}

}  // namespace

std::size_t numel_of(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  auto n = numel_of(shape);
  return from(std::move(shape), std::vector<double>(n, value), requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  for (auto s : shape) {
    if (s == 0) throw DimensionError("tensor shape must be positive, got " + shape_str(shape));
  }
  if (values.size() != numel_of(shape)) {
    throw DimensionError("data length " + std::to_string(values.size()) +
                         " does not match shape " + shape_str(shape));
  }
  auto node = std::make_shared<detail::Node>();
  node->shape = std::move(shape);
  node->data = std::move(values);
  node->requires_grad = requires_grad;
  return Tensor(std::move(node));
}

Tensor Tensor::scalar(double value, bool requires_grad) { return from({1}, {value}, requires_grad); }

Tensor Tensor::identity(std::size_t n) {
  std::vector<double> v(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  return from({n, n}, std::move(v));
}

Tensor Tensor::make_result(Shape shape, std::vector<double> values, std::vector<Tensor> parents,
                           BackwardFn backward) {
  Tensor out = from(std::move(shape), std::move(values));
  out.node_->leaf = false;
  bool any = std::any_of(parents.begin(), parents.end(),
                         [](const Tensor& p) { return p.defined() && p.requires_grad(); });
  if (any) {
    out.node_->requires_grad = true;
    out.node_->backward = std::move(backward);
    for (auto& p : parents) {
      if (p.defined()) out.node_->parents.push_back(p.node_);
    }
  }
  return out;
}

const Shape& Tensor::shape() const { return node_->shape; }
std::size_t Tensor::numel() const { return node_->data.size(); }

std::size_t Tensor::rows() const {
  if (dim() != 2) throw DimensionError("rows() on non-matrix shape " + shape_str(shape()));
  return node_->shape[0];
}

std::size_t Tensor::cols() const {
  if (dim() != 2) throw DimensionError("cols() on non-matrix shape " + shape_str(shape()));
  return node_->shape[1];
}

std::span<const double> Tensor::data() const { return node_->data; }

std::span<double> Tensor::mutable_data() {
  if (!node_->leaf) throw ContractError("op results are immutable");
  return node_->data;
}

double Tensor::item() const {
  if (numel() != 1) throw ContractError("item() on non-scalar shape " + shape_str(shape()));
  return node_->data[0];
}

double Tensor::at(std::size_t r, std::size_t c) const { return node_->data[r * cols() + c]; }

bool Tensor::requires_grad() const { return node_->requires_grad; }

void Tensor::set_requires_grad(bool value) {
  if (!is_leaf()) throw ContractError("requires_grad can only be set on leaves");
  node_->requires_grad = value;
}

bool Tensor::is_leaf() const { return !node_->backward; }
bool Tensor::has_grad() const { return !node_->grad.empty(); }
std::span<const double> Tensor::grad() const { return node_->grad; }

std::span<double> Tensor::grad_buffer() const {
  if (node_->grad.empty()) node_->grad.assign(node_->data.size(), 0.0);
  return node_->grad;
}

void Tensor::zero_grad() { node_->grad.clear(); }

Tensor Tensor::detach_copy(bool requires_grad) const {
  return from(node_->shape, node_->data, requires_grad);
}

void backward(const Tensor& loss) {
  if (!loss.defined()) throw ContractError("backward on undefined tensor");
  if (loss.numel() != 1) {
    throw ContractError("backward requires a scalar loss, got shape " + shape_str(loss.shape()));
  }
  if (!loss.requires_grad()) return;

  // Iterative post-order DFS gives a deterministic topological order.
  std::vector<detail::Node*> topo;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.emplace_back(loss.node_.get(), 0);
  seen.insert(loss.node_.get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      detail::Node* p = node->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }

  for (auto* n : topo) {
    if (n->backward) n->grad.assign(n->data.size(), 0.0);
  }
  auto* root = loss.node_.get();
  if (root->grad.empty()) root->grad.assign(1, 0.0);
  root->grad[0] += 1.0;

  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward) n->backward(n->grad);
  }
}

// ---- ops ----

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul");
  require_matrix(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw DimensionError("matmul: inner dimensions disagree: " + shape_str(a.shape()) + " x " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(m * n);
  mmap(out, m, n).noalias() = cmap(a.data(), m, k) * cmap(b.data(), k, n);
  return Tensor::make_result({m, n}, std::move(out), {a, b},
                             [a, b, m, k, n](std::span<const double> g) mutable {
                               auto G = cmap(g, m, n);
                               if (a.requires_grad())
                                 mmap(a.grad_buffer(), m, k).noalias() +=
                                     G * cmap(b.data(), k, n).transpose();
                               if (b.requires_grad())
                                 mmap(b.grad_buffer(), k, n).noalias() +=
                                     cmap(a.data(), m, k).transpose() * G;
                             });
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
  require_matrix(a, "matmul_nt");
  require_matrix(b, "matmul_nt");
  const std::size_t m = a.rows(), k = a.cols(), n = b.rows();
  if (b.cols() != k) {
    throw DimensionError("matmul_nt: inner dimensions disagree: " + shape_str(a.shape()) +
                         " x " + shape_str(b.shape()) + "^T");
  }
  std::vector<double> out(m * n);
  mmap(out, m, n).noalias() = cmap(a.data(), m, k) * cmap(b.data(), n, k).transpose();
  return Tensor::make_result({m, n}, std::move(out), {a, b},
                             [a, b, m, k, n](std::span<const double> g) mutable {
                               auto G = cmap(g, m, n);
                               if (a.requires_grad())
                                 mmap(a.grad_buffer(), m, k).noalias() += G * cmap(b.data(), n, k);
                               if (b.requires_grad())
                                 mmap(b.grad_buffer(), n, k).noalias() +=
                                     G.transpose() * cmap(a.data(), m, k);
                             });
}

Tensor transpose(const Tensor& a) {
  require_matrix(a, "transpose");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(m * n);
  mmap(out, n, m) = cmap(a.data(), m, n).transpose();
  return Tensor::make_result({n, m}, std::move(out), {a},
                             [a, m, n](std::span<const double> g) mutable {
                               mmap(a.grad_buffer(), m, n) += cmap(g, n, m).transpose();
                             });
}

Tensor add(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) {
    throw DimensionError("add: shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
  }
  std::vector<double> out(a.numel());
  auto x = a.data(), y = b.data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[i] + y[i];
  return Tensor::make_result(a.shape(), std::move(out), {a, b},
                             [a, b](std::span<const double> g) mutable {
                               for (const Tensor* t : {&a, &b}) {
                                 if (!t->requires_grad()) continue;
                                 auto gb = t->grad_buffer();
                                 for (std::size_t i = 0; i < g.size(); ++i) gb[i] += g[i];
                               }
                             });
}

Tensor add_row(const Tensor& a, const Tensor& row) {
  require_matrix(a, "add_row");
  const std::size_t m = a.rows(), n = a.cols();
  if (row.numel() != n) {
    throw DimensionError("add_row: row " + shape_str(row.shape()) + " does not broadcast over " +
                         shape_str(a.shape()));
  }
  std::vector<double> out(a.data().begin(), a.data().end());
  auto r = row.data();
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] += r[j];
  return Tensor::make_result({m, n}, std::move(out), {a, row},
                             [a, row, m, n](std::span<const double> g) mutable {
                               if (a.requires_grad()) {
                                 auto ga = a.grad_buffer();
                                 for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
                               }
                               if (row.requires_grad()) {
                                 auto gr = row.grad_buffer();
                                 for (std::size_t i = 0; i < m; ++i)
                                   for (std::size_t j = 0; j < n; ++j) gr[j] += g[i * n + j];
                               }
                             });
}

Tensor scale(const Tensor& a, double factor) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v *= factor;
  return Tensor::make_result(a.shape(), std::move(out), {a},
                             [a, factor](std::span<const double> g) mutable {
                               auto ga = a.grad_buffer();
                               for (std::size_t i = 0; i < g.size(); ++i) ga[i] += factor * g[i];
                             });
}

Tensor relu(const Tensor& a) {
  std::vector<double> out(a.data().begin(), a.data().end());
  for (auto& v : out) v = v > 0.0 ? v : 0.0;
  // Subgradient at exactly 0 is 0.
  return Tensor::make_result(a.shape(), std::move(out), {a},
                             [a](std::span<const double> g) mutable {
                               auto x = a.data();
                               auto ga = a.grad_buffer();
                               for (std::size_t i = 0; i < g.size(); ++i)
                                 if (x[i] > 0.0) ga[i] += g[i];
                             });
}

Tensor softmax_rows(const Tensor& a) {
  require_matrix(a, "softmax_rows");
  const std::size_t m = a.rows(), n = a.cols();
  auto x = a.data();
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = x.data() + i * n;
    double mx = -INFINITY;
    for (std::size_t j = 0; j < n; ++j) {
      if (std::isnan(row[j])) throw NumericError("softmax_rows: NaN input in row " + std::to_string(i));
      mx = std::max(mx, row[j]);
    }
    if (!std::isfinite(mx)) throw NumericError("softmax_rows: non-finite row maximum in row " + std::to_string(i));
    double z = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      out[i * n + j] = std::exp(row[j] - mx);
      z += out[i * n + j];
    }
    for (std::size_t j = 0; j < n; ++j) out[i * n + j] /= z;
  }
  auto y = std::make_shared<std::vector<double>>(out);
  return Tensor::make_result({m, n}, std::move(out), {a},
                             [a, y, m, n](std::span<const double> g) mutable {
                               auto ga = a.grad_buffer();
                               for (std::size_t i = 0; i < m; ++i) {
                                 const double* yr = y->data() + i * n;
                                 const double* gr = g.data() + i * n;
                                 double dot = 0.0;
                                 for (std::size_t j = 0; j < n; ++j) dot += yr[j] * gr[j];
                                 for (std::size_t j = 0; j < n; ++j)
                                   ga[i * n + j] += yr[j] * (gr[j] - dot);
                               }
                             });
}

Tensor layer_norm(const Tensor& x, const Tensor& scale_t, const Tensor& shift, double eps) {
  require_matrix(x, "layer_norm");
  const std::size_t m = x.rows(), n = x.cols();
  if (scale_t.numel() != n || shift.numel() != n) {
    throw DimensionError("layer_norm: affine parameters must have " + std::to_string(n) +
                         " entries, got " + shape_str(scale_t.shape()) + " and " +
                         shape_str(shift.shape()));
  }
  auto xv = x.data();
  auto gamma = scale_t.data();
  auto beta = shift.data();
  auto xhat = std::make_shared<std::vector<double>>(m * n);
  auto inv_std = std::make_shared<std::vector<double>>(m);
  std::vector<double> out(m * n);
  for (std::size_t i = 0; i < m; ++i) {
    const double* row = xv.data() + i * n;
    double mu = 0.0;
    for (std::size_t j = 0; j < n; ++j) mu += row[j];
    mu /= static_cast<double>(n);
    double var = 0.0;
    for (std::size_t j = 0; j < n; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(n);
    double inv = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = inv;
    for (std::size_t j = 0; j < n; ++j) {
      double h = (row[j] - mu) * inv;
      (*xhat)[i * n + j] = h;
      out[i * n + j] = h * gamma[j] + beta[j];
    }
  }
  return Tensor::make_result(
      {m, n}, std::move(out), {x, scale_t, shift},
      [x, scale_t, shift, xhat, inv_std, m, n](std::span<const double> g) mutable {
        auto gamma = scale_t.data();
        if (scale_t.requires_grad()) {
          auto gs = scale_t.grad_buffer();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gs[j] += g[i * n + j] * (*xhat)[i * n + j];
        }
        if (shift.requires_grad()) {
          auto gb = shift.grad_buffer();
          for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) gb[j] += g[i * n + j];
        }
        if (x.requires_grad()) {
          auto gx = x.grad_buffer();
          const double inv_n = 1.0 / static_cast<double>(n);
          for (std::size_t i = 0; i < m; ++i) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t j = 0; j < n; ++j) {
              double dh = g[i * n + j] * gamma[j];
              s1 += dh;
              s2 += dh * (*xhat)[i * n + j];
            }
            for (std::size_t j = 0; j < n; ++j) {
              double dh = g[i * n + j] * gamma[j];
              gx[i * n + j] += (*inv_std)[i] * (dh - s1 * inv_n - (*xhat)[i * n + j] * s2 * inv_n);
            }
          }
        }
      });
}

Tensor sum(const Tensor& a) {
  auto x = a.data();
  double s = std::accumulate(x.begin(), x.end(), 0.0);
  return Tensor::make_result({1}, {s}, {a}, [a](std::span<const double> g) mutable {
    auto ga = a.grad_buffer();
    for (auto& v : ga) v += g[0];
  });
}

Tensor mean(const Tensor& a) {
  return scale(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor gather_rows(const Tensor& a, std::span<const std::size_t> index) {
  require_matrix(a, "gather_rows");
  const std::size_t m = a.rows(), n = a.cols();
  std::vector<double> out(index.size() * n);
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= m) throw RangeError("gather_rows: index " + std::to_string(index[i]) + " >= " + std::to_string(m));
    std::copy_n(a.data().data() + index[i] * n, n, out.data() + i * n);
  }
  std::vector<std::size_t> idx(index.begin(), index.end());
  const std::size_t rows = idx.size();
  return Tensor::make_result({rows, n}, std::move(out), {a},
                             [a, idx = std::move(idx), n](std::span<const double> g) mutable {
                               auto ga = a.grad_buffer();
                               for (std::size_t i = 0; i < idx.size(); ++i)
                                 for (std::size_t j = 0; j < n; ++j) ga[idx[i] * n + j] += g[i * n + j];
                             });
}

}  // namespace gemlab
