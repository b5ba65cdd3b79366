// Copyright (c) 2026, the dgpaq authors.

#include "dgpaq/tensor.hpp"

#include <Eigen/Dense>

#include <atomic>
#include <cmath>
#include <cstdio>
#include <iostream>
#include <sstream>
#include <unordered_set>
#include <utility>

namespace dgpaq::ad {

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapRM = Eigen::Map<const RowMat>;
using MapRMMut = Eigen::Map<RowMat>;

MapRM map_rm(const std::vector<double>& v, std::int64_t r, std::int64_t c) {
  return MapRM(v.data(), r, c);
}
MapRMMut map_rm(std::vector<double>& v, std::int64_t r, std::int64_t c) {
  return MapRMMut(v.data(), r, c);
}

std::atomic<std::int64_t> g_cholesky_escalations{0};

NodePtr make_node(Shape shape, std::vector<double> value, const char* op,
                  std::vector<NodePtr> parents,
                  std::function<void(Node&)> pullback) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  bool rg = false;
  for (const auto& p : parents) rg = rg || p->requires_grad;
  n->requires_grad = rg;
  if (rg) {
    n->parents = std::move(parents);
    n->pullback = std::move(pullback);
  }
  return n;
}

void check_defined(const Tensor& t, const char* op) {
  if (!t.defined()) fail(ErrorCode::contract, std::string(op) + ": undefined tensor");
}

void check_rank2(const Tensor& t, const char* op) {
  if (t.rank() != 2)
    fail(ErrorCode::dimension,
         std::string(op) + ": expected rank-2 tensor, got shape " + shape_str(t.shape()));
}

// numpy broadcasting: align trailing dimensions; each pair must match or one
// of them be 1 (missing dimensions count as 1).
Shape broadcast_shapes(const Shape& a, const Shape& b, const char* op) {
  const std::size_t rank = std::max(a.size(), b.size());
  Shape out(rank);
  for (std::size_t i = 0; i < rank; ++i) {
    const std::int64_t da = i < rank - a.size() ? 1 : a[i - (rank - a.size())];
    const std::int64_t db = i < rank - b.size() ? 1 : b[i - (rank - b.size())];
    if (da != db && da != 1 && db != 1)
      fail(ErrorCode::dimension, std::string(op) + ": cannot broadcast shapes " +
                                     shape_str(a) + " and " + shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Row-major strides of `in` aligned to the broadcast result `out`, with
// stride 0 on broadcast dimensions.
std::vector<std::int64_t> broadcast_strides(const Shape& in, const Shape& out) {
  std::vector<std::int64_t> strides(out.size(), 0);
  std::int64_t s = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t i = in.size() - 1 - k;               // dim index in `in`
    const std::size_t o = out.size() - 1 - k;              // aligned dim in `out`
    strides[o] = (in[i] == 1 && out[o] != 1) ? 0 : s;
    s *= in[i];
  }
  return strides;
}

// Calls f(flat_out, offset_a, offset_b) for every element of `out`.
template <class F>
void bcast_iterate(const Shape& out, const std::vector<std::int64_t>& sa,
                   const std::vector<std::int64_t>& sb, F&& f) {
  const std::int64_t n = numel(out);
  const int rank = static_cast<int>(out.size());
  if (rank == 0) {
    if (n == 1) f(0, 0, 0);
    return;
  }
  std::vector<std::int64_t> idx(rank, 0);
  std::int64_t oa = 0, ob = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    f(i, oa, ob);
    for (int d = rank - 1; d >= 0; --d) {
      ++idx[d];
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < out[d]) break;
      oa -= sa[d] * out[d];
      ob -= sb[d] * out[d];
      idx[d] = 0;
    }
  }
}

// Generic broadcasting binary op. `f` computes the forward value (and may
// throw on domain violations); `da`/`db` are local derivatives (a, b, y).
template <class FwdF, class DA, class DB>
Tensor binary_op(const char* op, const Tensor& ta, const Tensor& tb, FwdF f,
                 DA da, DB db) {
  check_defined(ta, op);
  check_defined(tb, op);
  NodePtr na = ta.node(), nb = tb.node();
  const Shape out = broadcast_shapes(na->shape, nb->shape, op);
  const std::int64_t n = numel(out);
  std::vector<double> value(static_cast<std::size_t>(n));

  const bool same = na->shape == out && nb->shape == out;
  const auto sa = same ? std::vector<std::int64_t>{} : broadcast_strides(na->shape, out);
  const auto sb = same ? std::vector<std::int64_t>{} : broadcast_strides(nb->shape, out);

  if (same) {
    for (std::int64_t i = 0; i < n; ++i)
      value[i] = f(na->value[i], nb->value[i]);
  } else {
    bcast_iterate(out, sa, sb, [&](std::int64_t i, std::int64_t oa, std::int64_t ob) {
      value[i] = f(na->value[oa], nb->value[ob]);
    });
  }

  auto pull = [op, out, same, sa, sb, da, db](Node& self) {
    Node& a = *self.parents[0];
    Node& b = *self.parents[1];
    const std::int64_t n = self.size();
    if (a.requires_grad) a.ensure_grad();
    if (b.requires_grad) b.ensure_grad();
    if (same) {
      for (std::int64_t i = 0; i < n; ++i) {
        const double g = self.grad[i];
        if (a.requires_grad) a.grad[i] += g * da(a.value[i], b.value[i], self.value[i]);
        if (b.requires_grad) b.grad[i] += g * db(a.value[i], b.value[i], self.value[i]);
      }
    } else {
      bcast_iterate(out, sa, sb, [&](std::int64_t i, std::int64_t oa, std::int64_t ob) {
        const double g = self.grad[i];
        if (a.requires_grad) a.grad[oa] += g * da(a.value[oa], b.value[ob], self.value[i]);
        if (b.requires_grad) b.grad[ob] += g * db(a.value[oa], b.value[ob], self.value[i]);
      });
    }
  };
  return Tensor::wrap(make_node(out, std::move(value), op, {na, nb}, std::move(pull)));
}

template <class FwdF, class DX>
Tensor unary_op(const char* op, const Tensor& ta, FwdF f, DX dx) {
  check_defined(ta, op);
  NodePtr na = ta.node();
  const std::int64_t n = na->size();
  std::vector<double> value(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i) value[i] = f(na->value[i]);
  auto pull = [dx](Node& self) {
    Node& a = *self.parents[0];
    if (!a.requires_grad) return;
    a.ensure_grad();
    const std::int64_t n = self.size();
    for (std::int64_t i = 0; i < n; ++i)
      a.grad[i] += self.grad[i] * dx(a.value[i], self.value[i]);
  };
  return Tensor::wrap(make_node(na->shape, std::move(value), op, {na}, std::move(pull)));
}

}  // namespace

std::int64_t numel(const Shape& shape) {
  std::int64_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
  os << ']';
  return os.str();
}

// --- Tensor ---

Tensor Tensor::scalar(double v, bool requires_grad) {
  return from({}, {v}, requires_grad);
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  if (numel(shape) != static_cast<std::int64_t>(values.size()))
    fail(ErrorCode::dimension, "tensor: shape " + shape_str(shape) + " holds " +
                                   std::to_string(numel(shape)) + " values, got " +
                                   std::to_string(values.size()));
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(values);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::ones(Shape shape, bool requires_grad) {
  return full(std::move(shape), 1.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double v, bool requires_grad) {
  std::vector<double> vals(static_cast<std::size_t>(numel(shape)), v);
  return from(std::move(shape), std::move(vals), requires_grad);
}

Tensor Tensor::eye(std::int64_t n) {
  std::vector<double> vals(static_cast<std::size_t>(n * n), 0.0);
  for (std::int64_t i = 0; i < n; ++i) vals[i * n + i] = 1.0;
  return from({n, n}, std::move(vals));
}

std::int64_t Tensor::rows() const {
  check_rank2(*this, "rows");
  return node_->shape[0];
}

std::int64_t Tensor::cols() const {
  check_rank2(*this, "cols");
  return node_->shape[1];
}

std::vector<double>& Tensor::values_mut() {
  if (node_->pullback || !node_->parents.empty())
    fail(ErrorCode::contract, "values_mut: only leaf tensors may be mutated");
  return node_->value;
}

double Tensor::at(std::int64_t r, std::int64_t c) const {
  check_rank2(*this, "at");
  return node_->value[static_cast<std::size_t>(r * cols() + c)];
}

double Tensor::item() const {
  if (size() != 1)
    fail(ErrorCode::contract, "item: tensor has " + std::to_string(size()) + " elements");
  return node_->value[0];
}

const std::vector<double>& Tensor::grad() const {
  node_->ensure_grad();
  return node_->grad;
}

void Tensor::zero_grad() {
  if (!node_->grad.empty()) node_->grad.assign(node_->value.size(), 0.0);
}

// --- arithmetic ---

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      "div", a, b,
      [](double x, double y) {
        if (y == 0.0) fail(ErrorCode::domain, "div: division by zero");
        return x / y;
      },
      [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double out) { return -out / y; });
}

Tensor neg(const Tensor& a) {
  return unary_op(
      "neg", a, [](double x) { return -x; },
      [](double, double) { return -1.0; });
}

// --- elementwise ---

Tensor exp(const Tensor& a) {
  return unary_op(
      "exp", a, [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary_op(
      "log", a,
      [](double x) {
        if (x <= 0.0)
          fail(ErrorCode::domain, "log: input " + std::to_string(x) + " not positive");
        return std::log(x);
      },
      [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  return unary_op(
      "sqrt", a,
      [](double x) {
        if (x < 0.0)
          fail(ErrorCode::domain, "sqrt: input " + std::to_string(x) + " negative");
        return std::sqrt(x);
      },
      [](double, double y) { return 0.5 / y; });
}

Tensor square(const Tensor& a) {
  return unary_op(
      "square", a, [](double x) { return x * x; },
      [](double x, double) { return 2.0 * x; });
}

Tensor clamp_min(const Tensor& a, double lo) {
  return unary_op(
      "clamp_min", a, [lo](double x) { return x < lo ? lo : x; },
      [lo](double x, double) { return x > lo ? 1.0 : 0.0; });
}

// --- reductions ---

Tensor sum(const Tensor& a) {
  check_defined(a, "sum");
  NodePtr na = a.node();
  double s = 0.0;
  for (double v : na->value) s += v;
  auto pull = [](Node& self) {
    Node& a = *self.parents[0];
    if (!a.requires_grad) return;
    a.ensure_grad();
    const double g = self.grad[0];
    for (auto& gi : a.grad) gi += g;
  };
  return Tensor::wrap(make_node({}, {s}, "sum", {na}, std::move(pull)));
}

Tensor mean(const Tensor& a) {
  check_defined(a, "mean");
  if (a.size() == 0) fail(ErrorCode::domain, "mean: empty tensor");
  return sum(a) / static_cast<double>(a.size());
}

namespace {

Tensor axis_reduce(const char* op, const Tensor& a, int axis, double scale_r,
                   double scale_c) {
  check_defined(a, op);
  check_rank2(a, op);
  if (axis != 0 && axis != 1)
    fail(ErrorCode::parameter, std::string(op) + ": axis must be 0 or 1");
  NodePtr na = a.node();
  const std::int64_t r = na->shape[0], c = na->shape[1];
  const double scale = axis == 0 ? scale_r : scale_c;
  std::vector<double> value(static_cast<std::size_t>(axis == 0 ? c : r), 0.0);
  for (std::int64_t i = 0; i < r; ++i)
    for (std::int64_t j = 0; j < c; ++j)
      value[axis == 0 ? j : i] += na->value[i * c + j];
  for (auto& v : value) v *= scale;
  auto pull = [axis, r, c, scale](Node& self) {
    Node& a = *self.parents[0];
    if (!a.requires_grad) return;
    a.ensure_grad();
    for (std::int64_t i = 0; i < r; ++i)
      for (std::int64_t j = 0; j < c; ++j)
        a.grad[i * c + j] += scale * self.grad[axis == 0 ? j : i];
  };
  return Tensor::wrap(make_node({axis == 0 ? c : r}, std::move(value), op, {na},
                                std::move(pull)));
}

}  // namespace

Tensor sum(const Tensor& a, int axis) { return axis_reduce("sum_axis", a, axis, 1.0, 1.0); }

Tensor mean(const Tensor& a, int axis) {
  check_defined(a, "mean_axis");
  check_rank2(a, "mean_axis");
  const std::int64_t r = a.shape()[0], c = a.shape()[1];
  if ((axis == 0 && r == 0) || (axis == 1 && c == 0))
    fail(ErrorCode::domain, "mean_axis: empty reduction");
  return axis_reduce("mean_axis", a, axis, 1.0 / static_cast<double>(r),
                     1.0 / static_cast<double>(c));
}

Tensor row_sumsq(const Tensor& a) {
  check_defined(a, "row_sumsq");
  check_rank2(a, "row_sumsq");
  NodePtr na = a.node();
  const std::int64_t r = na->shape[0], c = na->shape[1];
  std::vector<double> value(static_cast<std::size_t>(r), 0.0);
  for (std::int64_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::int64_t j = 0; j < c; ++j) {
      const double v = na->value[i * c + j];
      s += v * v;
    }
    value[i] = s;
  }
  auto pull = [r, c](Node& self) {
    Node& a = *self.parents[0];
    if (!a.requires_grad) return;
    a.ensure_grad();
    for (std::int64_t i = 0; i < r; ++i) {
      const double g = 2.0 * self.grad[i];
      for (std::int64_t j = 0; j < c; ++j)
        a.grad[i * c + j] += g * a.value[i * c + j];
    }
  };
  return Tensor::wrap(make_node({r}, std::move(value), "row_sumsq", {na}, std::move(pull)));
}

Tensor col_sumsq(const Tensor& a) {
  check_defined(a, "col_sumsq");
  check_rank2(a, "col_sumsq");
  NodePtr na = a.node();
  const std::int64_t r = na->shape[0], c = na->shape[1];
  std::vector<double> value(static_cast<std::size_t>(c), 0.0);
  for (std::int64_t i = 0; i < r; ++i)
    for (std::int64_t j = 0; j < c; ++j) {
      const double v = na->value[i * c + j];
      value[j] += v * v;
    }
  auto pull = [r, c](Node& self) {
    Node& a = *self.parents[0];
    if (!a.requires_grad) return;
    a.ensure_grad();
    for (std::int64_t i = 0; i < r; ++i)
      for (std::int64_t j = 0; j < c; ++j)
        a.grad[i * c + j] += 2.0 * self.grad[j] * a.value[i * c + j];
  };
  return Tensor::wrap(make_node({c}, std::move(value), "col_sumsq", {na}, std::move(pull)));
}

// --- structure ---

Tensor reshape(const Tensor& a, Shape shape) {
  check_defined(a, "reshape");
  NodePtr na = a.node();
  if (numel(shape) != na->size())
    fail(ErrorCode::dimension, "reshape: cannot view " + shape_str(na->shape) +
                                   " as " + shape_str(shape));
  auto pull = [](Node& self) {
    Node& a = *self.parents[0];
    if (!a.requires_grad) return;
    a.ensure_grad();
    for (std::int64_t i = 0; i < self.size(); ++i) a.grad[i] += self.grad[i];
  };
  return Tensor::wrap(make_node(std::move(shape), na->value, "reshape", {na}, std::move(pull)));
}

Tensor broadcast_to(const Tensor& a, Shape shape) {
  check_defined(a, "broadcast_to");
  NodePtr na = a.node();
  const Shape out = broadcast_shapes(na->shape, shape, "broadcast_to");
  if (out != shape)
    fail(ErrorCode::dimension, "broadcast_to: cannot broadcast " +
                                   shape_str(na->shape) + " to " + shape_str(shape));
  const auto sa = broadcast_strides(na->shape, out);
  const auto sz = std::vector<std::int64_t>(out.size(), 0);
  std::vector<double> value(static_cast<std::size_t>(numel(out)));
  bcast_iterate(out, sa, sz, [&](std::int64_t i, std::int64_t oa, std::int64_t) {
    value[i] = na->value[oa];
  });
  auto pull = [out, sa, sz](Node& self) {
    Node& a = *self.parents[0];
    if (!a.requires_grad) return;
    a.ensure_grad();
    bcast_iterate(out, sa, sz, [&](std::int64_t i, std::int64_t oa, std::int64_t) {
      a.grad[oa] += self.grad[i];
    });
  };
  return Tensor::wrap(make_node(out, std::move(value), "broadcast_to", {na}, std::move(pull)));
}

Tensor transpose(const Tensor& a) {
  check_defined(a, "transpose");
  check_rank2(a, "transpose");
  NodePtr na = a.node();
  const std::int64_t r = na->shape[0], c = na->shape[1];
  std::vector<double> value(static_cast<std::size_t>(r * c));
  map_rm(value, c, r) = map_rm(na->value, r, c).transpose();
  auto pull = [r, c](Node& self) {
    Node& a = *self.parents[0];
    if (!a.requires_grad) return;
    a.ensure_grad();
    map_rm(a.grad, r, c) += map_rm(self.grad, c, r).transpose();
  };
  return Tensor::wrap(make_node({c, r}, std::move(value), "transpose", {na}, std::move(pull)));
}

Tensor stack_cols(const std::vector<Tensor>& cols) {
  if (cols.empty()) fail(ErrorCode::parameter, "stack_cols: no columns");
  const std::int64_t n = cols[0].size();
  std::vector<NodePtr> parents;
  parents.reserve(cols.size());
  for (const auto& c : cols) {
    check_defined(c, "stack_cols");
    if (c.rank() != 1 || c.size() != n)
      fail(ErrorCode::dimension, "stack_cols: all columns must be rank-1 of equal length");
    parents.push_back(c.node());
  }
  const std::int64_t k = static_cast<std::int64_t>(cols.size());
  std::vector<double> value(static_cast<std::size_t>(n * k));
  for (std::int64_t j = 0; j < k; ++j)
    for (std::int64_t i = 0; i < n; ++i)
      value[i * k + j] = parents[j]->value[i];
  auto pull = [n, k](Node& self) {
    for (std::int64_t j = 0; j < k; ++j) {
      Node& p = *self.parents[j];
      if (!p.requires_grad) continue;
      p.ensure_grad();
      for (std::int64_t i = 0; i < n; ++i) p.grad[i] += self.grad[i * k + j];
    }
  };
  return Tensor::wrap(make_node({n, k}, std::move(value), "stack_cols",
                                std::move(parents), std::move(pull)));
}

Tensor tril_assemble(const Tensor& diag, const Tensor& strict_lower) {
  check_defined(diag, "tril_assemble");
  check_defined(strict_lower, "tril_assemble");
  if (diag.rank() != 1 || strict_lower.rank() != 1)
    fail(ErrorCode::dimension, "tril_assemble: expects rank-1 inputs");
  const std::int64_t m = diag.size();
  if (strict_lower.size() != m * (m - 1) / 2)
    fail(ErrorCode::dimension,
         "tril_assemble: strict lower part needs " + std::to_string(m * (m - 1) / 2) +
             " entries, got " + std::to_string(strict_lower.size()));
  NodePtr nd = diag.node(), nl = strict_lower.node();
  std::vector<double> value(static_cast<std::size_t>(m * m), 0.0);
  for (std::int64_t i = 0; i < m; ++i) {
    value[i * m + i] = nd->value[i];
    for (std::int64_t j = 0; j < i; ++j)
      value[i * m + j] = nl->value[i * (i - 1) / 2 + j];
  }
  auto pull = [m](Node& self) {
    Node& d = *self.parents[0];
    Node& l = *self.parents[1];
    if (d.requires_grad) {
      d.ensure_grad();
      for (std::int64_t i = 0; i < m; ++i) d.grad[i] += self.grad[i * m + i];
    }
    if (l.requires_grad) {
      l.ensure_grad();
      for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < i; ++j)
          l.grad[i * (i - 1) / 2 + j] += self.grad[i * m + j];
    }
  };
  return Tensor::wrap(make_node({m, m}, std::move(value), "tril_assemble", {nd, nl},
                                std::move(pull)));
}

// --- linear algebra ---

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_defined(a, "matmul");
  check_defined(b, "matmul");
  check_rank2(a, "matmul");
  check_rank2(b, "matmul");
  NodePtr na = a.node(), nb = b.node();
  const std::int64_t m = na->shape[0], k = na->shape[1];
  const std::int64_t k2 = nb->shape[0], n = nb->shape[1];
  if (k != k2)
    fail(ErrorCode::dimension, "matmul: inner dimensions disagree, " +
                                   shape_str(na->shape) + " x " + shape_str(nb->shape));
  std::vector<double> value(static_cast<std::size_t>(m * n));
  map_rm(value, m, n).noalias() = map_rm(na->value, m, k) * map_rm(nb->value, k, n);
  auto pull = [m, k, n](Node& self) {
    Node& a = *self.parents[0];
    Node& b = *self.parents[1];
    const auto g = map_rm(self.grad, m, n);
    if (a.requires_grad) {
      a.ensure_grad();
      map_rm(a.grad, m, k).noalias() += g * map_rm(b.value, k, n).transpose();
    }
    if (b.requires_grad) {
      b.ensure_grad();
      map_rm(b.grad, k, n).noalias() += map_rm(a.value, m, k).transpose() * g;
    }
  };
  return Tensor::wrap(make_node({m, n}, std::move(value), "matmul", {na, nb},
                                std::move(pull)));
}

namespace {

// Symmetric column-major copy built from the lower triangle of a row-major
// buffer.
Eigen::MatrixXd symmetric_from_lower(const std::vector<double>& v, std::int64_t n) {
  Eigen::MatrixXd a(n, n);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t j = 0; j <= i; ++j) {
      a(i, j) = v[i * n + j];
      a(j, i) = v[i * n + j];
    }
  return a;
}

// Elementwise Cholesky used only to locate the failing pivot for error
// reporting.
std::pair<std::int64_t, double> failing_pivot(const Eigen::MatrixXd& a) {
  const std::int64_t n = a.rows();
  Eigen::MatrixXd l = Eigen::MatrixXd::Zero(n, n);
  for (std::int64_t j = 0; j < n; ++j) {
    double d = a(j, j);
    for (std::int64_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
    if (d <= 0.0) return {j, d};
    l(j, j) = std::sqrt(d);
    for (std::int64_t i = j + 1; i < n; ++i) {
      double s = a(i, j);
      for (std::int64_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
      l(i, j) = s / l(j, j);
    }
  }
  return {-1, 0.0};
}

}  // namespace

std::int64_t cholesky_escalations() { return g_cholesky_escalations.load(); }

Tensor cholesky(const Tensor& a, double jitter, bool escalate) {
  check_defined(a, "cholesky");
  check_rank2(a, "cholesky");
  NodePtr na = a.node();
  const std::int64_t n = na->shape[0];
  if (na->shape[1] != n)
    fail(ErrorCode::dimension, "cholesky: matrix not square, shape " + shape_str(na->shape));
  const Eigen::MatrixXd sym = symmetric_from_lower(na->value, n);
  double mean_diag = sym.diagonal().mean();
  if (!(mean_diag > 0.0)) mean_diag = 1.0;

  Eigen::LLT<Eigen::MatrixXd> llt;
  double j = jitter;
  bool ok = false;
  while (true) {
    llt.compute(sym + j * Eigen::MatrixXd::Identity(n, n));
    if (llt.info() == Eigen::Success) {
      ok = true;
      break;
    }
    if (!escalate) break;
    const double next = j < 1e-6 * mean_diag ? 1e-6 * mean_diag : j * 10.0;
    if (next > 1e-2 * mean_diag) break;
    j = next;
    g_cholesky_escalations.fetch_add(1);
    std::cerr << "[dgpaq] cholesky: escalated jitter to " << j << " (n=" << n << ")\n";
  }
  if (!ok) {
    const auto [pivot, value] =
        failing_pivot(sym + j * Eigen::MatrixXd::Identity(n, n));
    fail(ErrorCode::decomposition,
         "cholesky: matrix not positive definite after jitter " + std::to_string(j) +
             "; failing pivot " + std::to_string(pivot) + " (value " +
             std::to_string(value) + ")");
  }
  const Eigen::MatrixXd l = llt.matrixL();
  std::vector<double> value(static_cast<std::size_t>(n * n), 0.0);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t c = 0; c <= i; ++c) value[i * n + c] = l(i, c);

  // Reverse-mode rule: with P = phi(L^T tril(Lbar)) where phi halves the
  // diagonal, and W = L^{-T} (P + P^T) L^{-1}, the gradient w.r.t. the stored
  // lower triangle is W on the strict lower part and W/2 on the diagonal.
  auto pull = [n](Node& self) {
    Node& a = *self.parents[0];
    if (!a.requires_grad) return;
    a.ensure_grad();
    Eigen::MatrixXd L(n, n), Lb(n, n);
    L.setZero();
    Lb.setZero();
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t c = 0; c <= i; ++c) {
        L(i, c) = self.value[i * n + c];
        Lb(i, c) = self.grad[i * n + c];
      }
    Eigen::MatrixXd P = (L.transpose() * Lb).triangularView<Eigen::Lower>();
    P.diagonal() *= 0.5;
    const Eigen::MatrixXd T = P + P.transpose();
    const Eigen::MatrixXd Y = L.transpose().triangularView<Eigen::Upper>().solve(T);
    const Eigen::MatrixXd W =
        L.transpose().triangularView<Eigen::Upper>().solve(Y.transpose()).transpose();
    for (std::int64_t i = 0; i < n; ++i) {
      a.grad[i * n + i] += 0.5 * W(i, i);
      for (std::int64_t c = 0; c < i; ++c) a.grad[i * n + c] += W(i, c);
    }
  };
  return Tensor::wrap(make_node({n, n}, std::move(value), "cholesky", {na}, std::move(pull)));
}

Tensor trisolve_lower(const Tensor& l, const Tensor& b) {
  check_defined(l, "trisolve");
  check_defined(b, "trisolve");
  check_rank2(l, "trisolve");
  check_rank2(b, "trisolve");
  NodePtr nl = l.node(), nb = b.node();
  const std::int64_t n = nl->shape[0], k = nb->shape[1];
  if (nl->shape[1] != n)
    fail(ErrorCode::dimension, "trisolve: matrix not square, shape " + shape_str(nl->shape));
  if (nb->shape[0] != n)
    fail(ErrorCode::dimension, "trisolve: rhs rows " + std::to_string(nb->shape[0]) +
                                   " do not match system size " + std::to_string(n));
  for (std::int64_t i = 0; i < n; ++i)
    if (nl->value[i * n + i] == 0.0)
      fail(ErrorCode::singular, "trisolve: zero diagonal entry at row " + std::to_string(i));

  Eigen::MatrixXd L(n, n);
  L.setZero();
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t c = 0; c <= i; ++c) L(i, c) = nl->value[i * n + c];
  Eigen::MatrixXd B(n, k);
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t c = 0; c < k; ++c) B(i, c) = nb->value[i * k + c];
  const Eigen::MatrixXd X = L.triangularView<Eigen::Lower>().solve(B);
  std::vector<double> value(static_cast<std::size_t>(n * k));
  for (std::int64_t i = 0; i < n; ++i)
    for (std::int64_t c = 0; c < k; ++c) value[i * k + c] = X(i, c);

  // x = L^{-1} b  =>  bbar += L^{-T} xbar, lbar += -tril(L^{-T} xbar x^T)
  auto pull = [n, k](Node& self) {
    Node& lpar = *self.parents[0];
    Node& bpar = *self.parents[1];
    Eigen::MatrixXd L(n, n);
    L.setZero();
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t c = 0; c <= i; ++c) L(i, c) = lpar.value[i * n + c];
    Eigen::MatrixXd G(n, k), X(n, k);
    for (std::int64_t i = 0; i < n; ++i)
      for (std::int64_t c = 0; c < k; ++c) {
        G(i, c) = self.grad[i * k + c];
        X(i, c) = self.value[i * k + c];
      }
    const Eigen::MatrixXd Bb = L.transpose().triangularView<Eigen::Upper>().solve(G);
    if (bpar.requires_grad) {
      bpar.ensure_grad();
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t c = 0; c < k; ++c) bpar.grad[i * k + c] += Bb(i, c);
    }
    if (lpar.requires_grad) {
      lpar.ensure_grad();
      const Eigen::MatrixXd Lb = -(Bb * X.transpose());
      for (std::int64_t i = 0; i < n; ++i)
        for (std::int64_t c = 0; c <= i; ++c) lpar.grad[i * n + c] += Lb(i, c);
    }
  };
  return Tensor::wrap(make_node({n, k}, std::move(value), "trisolve", {nl, nb},
                                std::move(pull)));
}

Tensor pairwise_sqdist(const Tensor& x, const Tensor& x2) {
  check_defined(x, "pairwise_sqdist");
  check_defined(x2, "pairwise_sqdist");
  check_rank2(x, "pairwise_sqdist");
  check_rank2(x2, "pairwise_sqdist");
  NodePtr na = x.node(), nb = x2.node();
  const std::int64_t n = na->shape[0], d = na->shape[1], m = nb->shape[0];
  if (nb->shape[1] != d)
    fail(ErrorCode::dimension, "pairwise_sqdist: point dimensions disagree, " +
                                   shape_str(na->shape) + " vs " + shape_str(nb->shape));
  const auto X = map_rm(na->value, n, d);
  const auto Y = map_rm(nb->value, m, d);
  std::vector<double> value(static_cast<std::size_t>(n * m));
  auto D2 = map_rm(value, n, m);
  D2.noalias() = -2.0 * (X * Y.transpose());
  D2.colwise() += X.rowwise().squaredNorm();
  D2.rowwise() += Y.rowwise().squaredNorm().transpose();
  D2 = D2.cwiseMax(0.0);
  auto pull = [n, d, m](Node& self) {
    Node& a = *self.parents[0];
    Node& b = *self.parents[1];
    const auto G = map_rm(self.grad, n, m);
    const auto X = map_rm(a.value, n, d);
    const auto Y = map_rm(b.value, m, d);
    if (a.requires_grad) {
      a.ensure_grad();
      map_rm(a.grad, n, d).noalias() +=
          2.0 * (G.rowwise().sum().asDiagonal() * X - G * Y);
    }
    if (b.requires_grad) {
      b.ensure_grad();
      map_rm(b.grad, m, d).noalias() +=
          2.0 * (G.colwise().sum().asDiagonal() * Y - G.transpose() * X);
    }
  };
  return Tensor::wrap(make_node({n, m}, std::move(value), "pairwise_sqdist", {na, nb},
                                std::move(pull)));
}

// --- backward ---

void backward(const Tensor& loss) {
  check_defined(loss, "backward");
  if (loss.size() != 1)
    fail(ErrorCode::contract,
         "backward: loss must be scalar, got shape " + shape_str(loss.shape()));
  Node* root = loss.node().get();
  loss.node()->ensure_grad();
  root->grad[0] += 1.0;
  if (!root->requires_grad) return;

  // Post-order DFS: parents precede children, so the reversed list is a
  // valid backprop order.
  std::vector<Node*> order;
  std::unordered_set<Node*> visited;
  std::vector<std::pair<Node*, std::size_t>> stack;
  visited.insert(root);
  stack.emplace_back(root, 0);
  while (!stack.empty()) {
    Node* n = stack.back().first;
    std::size_t& i = stack.back().second;
    if (i < n->parents.size()) {
      Node* p = n->parents[i++].get();
      if (p->requires_grad && !visited.count(p)) {
        visited.insert(p);
        stack.emplace_back(p, 0);
      }
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    Node* n = *it;
    if (n->pullback) {
      n->ensure_grad();
      n->pullback(*n);
    }
  }
}

void ReplayEpsDummy();  // silence -Wmissing-declarations on some toolchains

}  // namespace dgpaq::ad

namespace dgpaq {

void ReplayEps::fill(std::size_t n, double* out) {
  if (pos_ >= log_->size())
    fail(ErrorCode::contract, "ReplayEps: exhausted recorded draws");
  const auto& v = (*log_)[pos_++];
  if (v.size() != n)
    fail(ErrorCode::contract, "ReplayEps: draw size mismatch");
  std::copy(v.begin(), v.end(), out);
}

const char* error_code_name(ErrorCode code) {
  switch (code) {
    case ErrorCode::dimension: return "dimension";
    case ErrorCode::domain: return "domain";
    case ErrorCode::decomposition: return "decomposition";
    case ErrorCode::singular: return "singular";
    case ErrorCode::contract: return "contract";
    case ErrorCode::data: return "data";
    case ErrorCode::schema: return "schema";
    case ErrorCode::parameter: return "parameter";
    case ErrorCode::divergence: return "divergence";
    case ErrorCode::lookup: return "lookup";
    case ErrorCode::size: return "size";
    case ErrorCode::io: return "io";
  }
  return "unknown";
}

}  // namespace dgpaq
