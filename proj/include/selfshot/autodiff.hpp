#pragma once

#include <functional>
#include <memory>
#include <vector>

#include "selfshot/tensor.hpp"

namespace selfshot::ad {

// Reverse-mode autodiff over a dynamically built DAG. Creation order is a
// topological order, so backward() just walks reachable nodes by id.
struct Node {
  Tensor val;
  Tensor grad;  // allocated by backward() for nodes that require grad
  bool requires_grad = false;
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward_fn;
  std::uint64_t id = 0;
};

using Var = std::shared_ptr<Node>;

Var constant(Tensor t);
Var leaf(Tensor t);  // trainable: requires_grad = true
Var stop_gradient(const Var& v);
Var make_node(Tensor val, std::vector<Var> parents, std::function<void(Node&)> backward_fn);

// Runs reverse accumulation from a scalar root (numel == 1).
void backward(const Var& root);
Tensor& ensure_grad(Node& n);

inline const Tensor& value(const Var& v) { return v->val; }
inline double scalar_value(const Var& v) { return v->val[0]; }

// --- elementwise & broadcast -------------------------------------------------

Var add(const Var& a, const Var& b);
Var sub(const Var& a, const Var& b);
Var mul(const Var& a, const Var& b);
Var div(const Var& a, const Var& b);
Var minimum(const Var& a, const Var& b);
Var maximum(const Var& a, const Var& b);
Var add_n(const std::vector<Var>& terms);

Var neg(const Var& a);
Var scale(const Var& a, double s);
Var add_scalar(const Var& a, double s);
Var relu(const Var& a);
Var sigmoid(const Var& a);
Var exp_(const Var& a);
Var log_(const Var& a);
Var sqrt_(const Var& a);
Var square(const Var& a);
Var abs_(const Var& a);
Var pow_const(const Var& a, double p);
Var softplus(const Var& a);  // log(1 + exp(x)), overflow-safe
Var clamp(const Var& a, double lo, double hi);

// --- shape -------------------------------------------------------------------

Var reshape(const Var& a, Tensor::Shape shape);
Var permute(const Var& a, const std::vector<std::int64_t>& perm);
Var slice(const Var& a, std::int64_t axis, std::int64_t start, std::int64_t len);
Var concat(const std::vector<Var>& parts, std::int64_t axis);

// --- linear algebra ------------------------------------------------------------

Var matmul(const Var& a, const Var& b);                  // [m,k]x[k,n]
Var bmm(const Var& a, const Var& b);                     // [B,m,k]x[B,k,n]
Var dot(const Var& a, const Var& b);                     // vectors -> scalar

// --- reductions ----------------------------------------------------------------

Var sum_all(const Var& a);
Var mean_all(const Var& a);
Var sum_axis(const Var& a, std::int64_t axis, bool keepdim = false);
Var mean_axis(const Var& a, std::int64_t axis, bool keepdim = false);

// --- fused -----------------------------------------------------------------------

Var softmax_lastdim(const Var& a);
Var logsumexp_lastdim(const Var& a);  // reduces last dim
Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps = 1e-5);
Var l2_normalize_lastdim(const Var& x, double eps = 1e-12);

// x [B,C,...]: normalizes over each of `groups` channel groups per sample.
Var group_norm(const Var& x, const Var& gamma, const Var& beta, std::int64_t groups,
               double eps = 1e-5);

// --- convolutions ------------------------------------------------------------------

Var conv2d(const Var& x, const Var& w, const Var& b, std::int64_t stride, std::int64_t pad);
// strides/pads ordered (depth, height, width)
Var conv3d(const Var& x, const Var& w, const Var& b, std::int64_t sd, std::int64_t sh,
           std::int64_t sw, std::int64_t pd, std::int64_t ph, std::int64_t pw);
Var upsample_nearest2d(const Var& x, std::int64_t factor);  // x [B,C,H,W]

// --- test support -------------------------------------------------------------------

// Central finite differences of fn() w.r.t. entry `index` of leaf tensor `t`.
double finite_difference(Tensor& t, std::int64_t index, double h, const std::function<double()>& fn);

}  // namespace selfshot::ad
