// Copyright (c) 2026, the dgpaq authors.
//
// Dense float64 tensors with tape-free reverse-mode differentiation. Each
// operation records its inputs and a pullback closure on the produced node;
// backward() walks the DAG in reverse topological order. Graphs are dynamic:
// every forward pass builds fresh nodes over persistent leaf parameters.

#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <string>
#include <vector>

#include "dgpaq/errors.hpp"

namespace dgpaq::ad {

using Shape = std::vector<std::int64_t>;

std::int64_t numel(const Shape& shape);
std::string shape_str(const Shape& shape);

struct Node;
using NodePtr = std::shared_ptr<Node>;

// One vertex of the computation graph: forward value plus, for nodes on a
// differentiable path, a gradient accumulator filled by backward().
struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // allocated on first accumulation
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<NodePtr> parents;
  std::function<void(Node&)> pullback;

  std::int64_t size() const { return static_cast<std::int64_t>(value.size()); }
  void ensure_grad() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
  }
};

// Value-semantics handle to a graph node. Copies alias the same node.
class Tensor {
 public:
  Tensor() = default;

  static Tensor scalar(double v, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor ones(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double v, bool requires_grad = false);
  static Tensor eye(std::int64_t n);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t rank() const { return static_cast<std::int64_t>(node_->shape.size()); }
  std::int64_t size() const { return node_->size(); }
  std::int64_t rows() const;
  std::int64_t cols() const;
  bool requires_grad() const { return node_->requires_grad; }

  const std::vector<double>& values() const { return node_->value; }
  // In-place mutation of a leaf's values (optimizer updates). Mutating a
  // non-leaf would desynchronize saved forward state, so it is rejected.
  std::vector<double>& values_mut();

  double operator[](std::int64_t i) const { return node_->value[static_cast<std::size_t>(i)]; }
  double at(std::int64_t r, std::int64_t c) const;
  // The value of a single-element tensor.
  double item() const;

  const std::vector<double>& grad() const;
  double grad_at(std::int64_t i) const { return grad()[static_cast<std::size_t>(i)]; }
  void zero_grad();

  NodePtr node() const { return node_; }
  static Tensor wrap(NodePtr n) { return Tensor(std::move(n)); }

 private:
  explicit Tensor(NodePtr n) : node_(std::move(n)) {}
  NodePtr node_;
};

// --- arithmetic (numpy-style broadcasting) ---
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator-(const Tensor& a) { return neg(a); }
inline Tensor operator+(const Tensor& a, double b) { return add(a, Tensor::scalar(b)); }
inline Tensor operator-(const Tensor& a, double b) { return sub(a, Tensor::scalar(b)); }
inline Tensor operator*(const Tensor& a, double b) { return mul(a, Tensor::scalar(b)); }
inline Tensor operator/(const Tensor& a, double b) { return div(a, Tensor::scalar(b)); }
inline Tensor operator+(double a, const Tensor& b) { return add(Tensor::scalar(a), b); }
inline Tensor operator-(double a, const Tensor& b) { return sub(Tensor::scalar(a), b); }
inline Tensor operator*(double a, const Tensor& b) { return mul(Tensor::scalar(a), b); }
inline Tensor operator/(double a, const Tensor& b) { return div(Tensor::scalar(a), b); }

// --- elementwise ---
Tensor exp(const Tensor& a);
Tensor log(const Tensor& a);
Tensor sqrt(const Tensor& a);
Tensor square(const Tensor& a);
Tensor clamp_min(const Tensor& a, double lo);

// --- reductions ---
Tensor sum(const Tensor& a);
Tensor sum(const Tensor& a, int axis);  // rank-2 only, axis 0 or 1
Tensor mean(const Tensor& a);
Tensor mean(const Tensor& a, int axis);
// Row/column sums of squares of a matrix, fused to avoid materializing the
// squared intermediate on the sampling hot path.
Tensor row_sumsq(const Tensor& a);  // [R,C] -> [R]
Tensor col_sumsq(const Tensor& a);  // [R,C] -> [C]

// --- structure ---
Tensor reshape(const Tensor& a, Shape shape);
Tensor broadcast_to(const Tensor& a, Shape shape);
Tensor transpose(const Tensor& a);
Tensor stack_cols(const std::vector<Tensor>& cols);  // K vectors [N] -> [N,K]
// Assemble a lower-triangular [M,M] matrix from its diagonal and the
// row-major packed strictly-lower entries.
Tensor tril_assemble(const Tensor& diag, const Tensor& strict_lower);

// --- linear algebra ---
Tensor matmul(const Tensor& a, const Tensor& b);

// Cholesky factor L with L*L^T = tril-symmetrized(a) + jitter*I. Only the
// lower triangle of `a` is read. If the factorization fails and `escalate`
// is set, the jitter is raised stepwise (1e-6 to 1e-2 of the mean diagonal,
// x10 per step, each escalation logged) before a decomposition error names
// the failing pivot.
Tensor cholesky(const Tensor& a, double jitter = 0.0, bool escalate = true);

// Solve L*X = B for lower-triangular L.
Tensor trisolve_lower(const Tensor& l, const Tensor& b);

// Matrix of squared Euclidean distances between the rows of X [N,D] and
// X2 [M,D].
Tensor pairwise_sqdist(const Tensor& x, const Tensor& x2);

// --- backward ---
// Accumulates d(loss)/d(leaf) into every reachable requires_grad leaf.
// Repeated calls without zero_grad() accumulate.
void backward(const Tensor& loss);

// Process-wide count of Cholesky jitter escalations (monitoring hook).
std::int64_t cholesky_escalations();

}  // namespace dgpaq::ad
