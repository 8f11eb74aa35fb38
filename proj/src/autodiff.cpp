#include "selfshot/autodiff.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <atomic>
#include <cmath>
#include <unordered_set>

namespace selfshot::ad {

namespace {

std::atomic<std::uint64_t> g_node_ids{1};

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MatMap = Eigen::Map<RowMat>;
using CMatMap = Eigen::Map<const RowMat>;

bool any_requires_grad(const std::vector<Var>& vs) {
  for (const auto& v : vs)
    if (v->requires_grad) return true;
  return false;
}

// Returns grad buffer of p if it participates in differentiation, else nullptr.
Tensor* grad_of(const Var& p) {
  if (!p->requires_grad) return nullptr;
  return &ensure_grad(*p);
}

// --- broadcasting walker -----------------------------------------------------

struct Bcast {
  Tensor::Shape out_shape;
  std::vector<std::int64_t> dims;      // out dims, aligned
  std::vector<std::int64_t> stride_a;  // 0 where broadcast
  std::vector<std::int64_t> stride_b;
  std::int64_t n = 0;
  bool same = false;

  Bcast(const Tensor& a, const Tensor& b) {
    if (a.same_shape(b)) {
      same = true;
      out_shape = a.shape();
      n = a.numel();
      return;
    }
    std::int64_t ra = a.rank(), rb = b.rank();
    std::int64_t r = std::max(ra, rb);
    dims.resize(static_cast<std::size_t>(r));
    stride_a.assign(static_cast<std::size_t>(r), 0);
    stride_b.assign(static_cast<std::size_t>(r), 0);
    std::vector<std::int64_t> full_a(static_cast<std::size_t>(r), 1), full_b(full_a);
    for (std::int64_t i = 0; i < ra; ++i) full_a[static_cast<std::size_t>(r - ra + i)] = a.dim(i);
    for (std::int64_t i = 0; i < rb; ++i) full_b[static_cast<std::size_t>(r - rb + i)] = b.dim(i);
    for (std::int64_t i = 0; i < r; ++i) {
      std::int64_t da = full_a[static_cast<std::size_t>(i)], db = full_b[static_cast<std::size_t>(i)];
      SS_CHECK(da == db || da == 1 || db == 1,
               "broadcast mismatch: " + a.shape_str() + " vs " + b.shape_str());
      dims[static_cast<std::size_t>(i)] = std::max(da, db);
    }
    std::int64_t sa = 1, sb = 1;
    for (std::int64_t i = r - 1; i >= 0; --i) {
      auto ui = static_cast<std::size_t>(i);
      stride_a[ui] = (full_a[ui] == 1) ? 0 : sa;
      stride_b[ui] = (full_b[ui] == 1) ? 0 : sb;
      sa *= full_a[ui];
      sb *= full_b[ui];
    }
    out_shape.assign(dims.begin(), dims.end());
    n = Tensor::shape_numel(out_shape);
  }

  // fn(i_out, off_a, off_b)
  template <typename Fn>
  void walk(Fn&& fn) const {
    if (same) {
      for (std::int64_t i = 0; i < n; ++i) fn(i, i, i);
      return;
    }
    std::int64_t r = static_cast<std::int64_t>(dims.size());
    std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
    std::int64_t oa = 0, ob = 0;
    for (std::int64_t i = 0; i < n; ++i) {
      fn(i, oa, ob);
      for (std::int64_t d = r - 1; d >= 0; --d) {
        auto ud = static_cast<std::size_t>(d);
        oa += stride_a[ud];
        ob += stride_b[ud];
        if (++idx[ud] < dims[ud]) break;
        oa -= stride_a[ud] * dims[ud];
        ob -= stride_b[ud] * dims[ud];
        idx[ud] = 0;
      }
    }
  }
};

// Generic broadcasting binary op. f(av,bv) and partials dfa/dfb(av,bv).
template <typename F, typename DFA, typename DFB>
Var binary_op(const Var& a, const Var& b, F f, DFA dfa, DFB dfb) {
  Bcast bc(a->val, b->val);
  Tensor out(bc.out_shape);
  const double* pa = a->val.data();
  const double* pb = b->val.data();
  double* po = out.data();
  bc.walk([&](std::int64_t i, std::int64_t ia, std::int64_t ib) { po[i] = f(pa[ia], pb[ib]); });
  return make_node(std::move(out), {a, b}, [bc = std::move(bc), dfa, dfb](Node& n) {
    const Tensor& av = n.parents[0]->val;
    const Tensor& bv = n.parents[1]->val;
    Tensor* ga = grad_of(n.parents[0]);
    Tensor* gb = grad_of(n.parents[1]);
    const double* pa = av.data();
    const double* pb = bv.data();
    const double* go = n.grad.data();
    bc.walk([&](std::int64_t i, std::int64_t ia, std::int64_t ib) {
      if (ga) (*ga)[ia] += go[i] * dfa(pa[ia], pb[ib]);
      if (gb) (*gb)[ib] += go[i] * dfb(pa[ia], pb[ib]);
    });
  });
}

// Elementwise unary with derivative expressed from (x, y).
template <typename F, typename DF>
Var unary_op(const Var& a, F f, DF df) {
  Tensor out(a->val.shape());
  const double* pa = a->val.data();
  double* po = out.data();
  std::int64_t n = a->val.numel();
  for (std::int64_t i = 0; i < n; ++i) po[i] = f(pa[i]);
  return make_node(std::move(out), {a}, [df](Node& n) {
    Tensor* ga = grad_of(n.parents[0]);
    if (!ga) return;
    const double* pa = n.parents[0]->val.data();
    const double* py = n.val.data();
    const double* go = n.grad.data();
    std::int64_t m = n.val.numel();
    for (std::int64_t i = 0; i < m; ++i) (*ga)[i] += go[i] * df(pa[i], py[i]);
  });
}

std::int64_t row_count(const Tensor& t) {
  SS_CHECK(t.rank() >= 1, "expected rank >= 1");
  return t.numel() / t.dim(t.rank() - 1);
}

}  // namespace

Var make_node(Tensor val, std::vector<Var> parents, std::function<void(Node&)> backward_fn) {
  auto n = std::make_shared<Node>();
  n->val = std::move(val);
  n->requires_grad = any_requires_grad(parents);
  n->parents = std::move(parents);
  if (n->requires_grad) n->backward_fn = std::move(backward_fn);
  n->id = g_node_ids.fetch_add(1);
  return n;
}

Var constant(Tensor t) {
  auto n = std::make_shared<Node>();
  n->val = std::move(t);
  n->requires_grad = false;
  n->id = g_node_ids.fetch_add(1);
  return n;
}

Var leaf(Tensor t) {
  auto n = std::make_shared<Node>();
  n->val = std::move(t);
  n->requires_grad = true;
  n->id = g_node_ids.fetch_add(1);
  return n;
}

Var stop_gradient(const Var& v) { return constant(v->val); }

Tensor& ensure_grad(Node& n) {
  if (n.grad.numel() != n.val.numel()) n.grad = Tensor(n.val.shape());
  return n.grad;
}

void backward(const Var& root) {
  SS_CHECK(root->val.numel() == 1, "backward() root must be a scalar");
  if (!root->requires_grad) return;
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<Node*> stack{root.get()};
  seen.insert(root.get());
  while (!stack.empty()) {
    Node* n = stack.back();
    stack.pop_back();
    order.push_back(n);
    for (const auto& p : n->parents) {
      if (!p->requires_grad) continue;
      if (seen.insert(p.get()).second) stack.push_back(p.get());
    }
  }
  std::sort(order.begin(), order.end(), [](Node* a, Node* b) { return a->id > b->id; });
  for (Node* n : order) ensure_grad(*n);
  root->grad[0] += 1.0;
  for (Node* n : order)
    if (n->backward_fn) n->backward_fn(*n);
}

// --- elementwise -------------------------------------------------------------

Var add(const Var& a, const Var& b) {
  return binary_op(
      a, b, [](double x, double y) { return x + y; }, [](double, double) { return 1.0; },
      [](double, double) { return 1.0; });
}

Var sub(const Var& a, const Var& b) {
  return binary_op(
      a, b, [](double x, double y) { return x - y; }, [](double, double) { return 1.0; },
      [](double, double) { return -1.0; });
}

Var mul(const Var& a, const Var& b) {
  return binary_op(
      a, b, [](double x, double y) { return x * y; }, [](double, double y) { return y; },
      [](double x, double) { return x; });
}

Var div(const Var& a, const Var& b) {
  return binary_op(
      a, b, [](double x, double y) { return x / y; }, [](double, double y) { return 1.0 / y; },
      [](double x, double y) { return -x / (y * y); });
}

Var minimum(const Var& a, const Var& b) {
  return binary_op(
      a, b, [](double x, double y) { return x < y ? x : y; },
      [](double x, double y) { return x <= y ? 1.0 : 0.0; },
      [](double x, double y) { return x <= y ? 0.0 : 1.0; });
}

Var maximum(const Var& a, const Var& b) {
  return binary_op(
      a, b, [](double x, double y) { return x > y ? x : y; },
      [](double x, double y) { return x >= y ? 1.0 : 0.0; },
      [](double x, double y) { return x >= y ? 0.0 : 1.0; });
}

Var add_n(const std::vector<Var>& terms) {
  SS_CHECK(!terms.empty(), "add_n: empty term list");
  Tensor out = terms[0]->val;
  for (std::size_t i = 1; i < terms.size(); ++i) {
    SS_CHECK(terms[i]->val.same_shape(out), "add_n: shape mismatch");
    const double* p = terms[i]->val.data();
    for (std::int64_t j = 0; j < out.numel(); ++j) out[j] += p[j];
  }
  return make_node(std::move(out), terms, [](Node& n) {
    for (auto& parent : n.parents) {
      Tensor* g = grad_of(parent);
      if (!g) continue;
      for (std::int64_t j = 0; j < n.grad.numel(); ++j) (*g)[j] += n.grad[j];
    }
  });
}

Var neg(const Var& a) {
  return unary_op(a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Var scale(const Var& a, double s) {
  return unary_op(a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Var add_scalar(const Var& a, double s) {
  return unary_op(a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var relu(const Var& a) {
  return unary_op(a, [](double x) { return x > 0 ? x : 0.0; },
                  [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}

Var sigmoid(const Var& a) {
  return unary_op(a,
                  [](double x) {
                    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
                    double e = std::exp(x);
                    return e / (1.0 + e);
                  },
                  [](double, double y) { return y * (1.0 - y); });
}

Var exp_(const Var& a) {
  return unary_op(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log_(const Var& a) {
  return unary_op(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var sqrt_(const Var& a) {
  return unary_op(a, [](double x) { return std::sqrt(x); },
                  [](double, double y) { return 0.5 / y; });
}

Var square(const Var& a) {
  return unary_op(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var abs_(const Var& a) {
  return unary_op(a, [](double x) { return std::fabs(x); },
                  [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Var pow_const(const Var& a, double p) {
  return unary_op(a, [p](double x) { return std::pow(x, p); },
                  [p](double x, double) { return p * std::pow(x, p - 1.0); });
}

Var softplus(const Var& a) {
  return unary_op(a, [](double x) { return std::max(x, 0.0) + std::log1p(std::exp(-std::fabs(x))); },
                  [](double x, double) {
                    if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
                    double e = std::exp(x);
                    return e / (1.0 + e);
                  });
}

Var clamp(const Var& a, double lo, double hi) {
  return unary_op(a, [lo, hi](double x) { return std::min(std::max(x, lo), hi); },
                  [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

// --- shape -------------------------------------------------------------------

Var reshape(const Var& a, Tensor::Shape shape) {
  SS_CHECK(Tensor::shape_numel(shape) == a->val.numel(),
           "reshape: element count mismatch " + a->val.shape_str() + " -> " + Tensor::shape_str(shape));
  Tensor out(std::move(shape), a->val.vec());
  return make_node(std::move(out), {a}, [](Node& n) {
    Tensor* ga = grad_of(n.parents[0]);
    if (!ga) return;
    for (std::int64_t i = 0; i < n.grad.numel(); ++i) (*ga)[i] += n.grad[i];
  });
}

namespace {
std::vector<std::int64_t> row_major_strides(const Tensor::Shape& s) {
  std::vector<std::int64_t> st(s.size(), 1);
  for (std::int64_t i = static_cast<std::int64_t>(s.size()) - 2; i >= 0; --i)
    st[static_cast<std::size_t>(i)] =
        st[static_cast<std::size_t>(i + 1)] * s[static_cast<std::size_t>(i + 1)];
  return st;
}

// maps out linear index -> in linear index for a permutation
template <typename Fn>
void permute_walk(const Tensor::Shape& in_shape, const std::vector<std::int64_t>& perm, Fn&& fn) {
  std::int64_t r = static_cast<std::int64_t>(in_shape.size());
  Tensor::Shape out_shape(static_cast<std::size_t>(r));
  for (std::int64_t i = 0; i < r; ++i)
    out_shape[static_cast<std::size_t>(i)] = in_shape[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
  auto in_strides = row_major_strides(in_shape);
  std::vector<std::int64_t> stride_for_out(static_cast<std::size_t>(r));
  for (std::int64_t i = 0; i < r; ++i)
    stride_for_out[static_cast<std::size_t>(i)] = in_strides[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])];
  std::int64_t n = Tensor::shape_numel(out_shape);
  std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
  std::int64_t off = 0;
  for (std::int64_t i = 0; i < n; ++i) {
    fn(i, off);
    for (std::int64_t d = r - 1; d >= 0; --d) {
      auto ud = static_cast<std::size_t>(d);
      off += stride_for_out[ud];
      if (++idx[ud] < out_shape[ud]) break;
      off -= stride_for_out[ud] * out_shape[ud];
      idx[ud] = 0;
    }
  }
}
}  // namespace

Var permute(const Var& a, const std::vector<std::int64_t>& perm) {
  const Tensor& av = a->val;
  std::int64_t r = av.rank();
  SS_CHECK(static_cast<std::int64_t>(perm.size()) == r, "permute: rank mismatch");
  Tensor::Shape out_shape(static_cast<std::size_t>(r));
  for (std::int64_t i = 0; i < r; ++i) out_shape[static_cast<std::size_t>(i)] = av.dim(perm[static_cast<std::size_t>(i)]);
  Tensor out(out_shape);
  const double* pa = av.data();
  double* po = out.data();
  permute_walk(av.shape(), perm, [&](std::int64_t i, std::int64_t off) { po[i] = pa[off]; });
  return make_node(std::move(out), {a}, [perm](Node& n) {
    Tensor* ga = grad_of(n.parents[0]);
    if (!ga) return;
    const double* go = n.grad.data();
    permute_walk(n.parents[0]->val.shape(), perm,
                 [&](std::int64_t i, std::int64_t off) { (*ga)[off] += go[i]; });
  });
}

Var slice(const Var& a, std::int64_t axis, std::int64_t start, std::int64_t len) {
  const Tensor& av = a->val;
  SS_CHECK(axis >= 0 && axis < av.rank(), "slice: bad axis");
  SS_CHECK(start >= 0 && len >= 0 && start + len <= av.dim(axis), "slice: out of range");
  Tensor::Shape out_shape = av.shape();
  out_shape[static_cast<std::size_t>(axis)] = len;
  std::int64_t outer = 1, inner = 1;
  for (std::int64_t i = 0; i < axis; ++i) outer *= av.dim(i);
  for (std::int64_t i = axis + 1; i < av.rank(); ++i) inner *= av.dim(i);
  std::int64_t in_axis = av.dim(axis);
  Tensor out(out_shape);
  const double* pa = av.data();
  double* po = out.data();
  for (std::int64_t o = 0; o < outer; ++o)
    std::copy(pa + (o * in_axis + start) * inner, pa + (o * in_axis + start + len) * inner,
              po + o * len * inner);
  return make_node(std::move(out), {a}, [axis, start, len, outer, inner, in_axis](Node& n) {
    Tensor* ga = grad_of(n.parents[0]);
    if (!ga) return;
    const double* go = n.grad.data();
    for (std::int64_t o = 0; o < outer; ++o) {
      double* dst = ga->data() + (o * in_axis + start) * inner;
      const double* src = go + o * len * inner;
      for (std::int64_t i = 0; i < len * inner; ++i) dst[i] += src[i];
    }
  });
}

Var concat(const std::vector<Var>& parts, std::int64_t axis) {
  SS_CHECK(!parts.empty(), "concat: empty input");
  const Tensor& first = parts[0]->val;
  std::int64_t r = first.rank();
  SS_CHECK(axis >= 0 && axis < r, "concat: bad axis");
  std::int64_t axis_total = 0;
  for (const auto& p : parts) {
    SS_CHECK(p->val.rank() == r, "concat: rank mismatch");
    for (std::int64_t i = 0; i < r; ++i)
      SS_CHECK(i == axis || p->val.dim(i) == first.dim(i), "concat: shape mismatch");
    axis_total += p->val.dim(axis);
  }
  Tensor::Shape out_shape = first.shape();
  out_shape[static_cast<std::size_t>(axis)] = axis_total;
  std::int64_t outer = 1, inner = 1;
  for (std::int64_t i = 0; i < axis; ++i) outer *= first.dim(i);
  for (std::int64_t i = axis + 1; i < r; ++i) inner *= first.dim(i);
  Tensor out(out_shape);
  double* po = out.data();
  std::int64_t offset = 0;
  std::vector<std::int64_t> part_axis(parts.size());
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    const Tensor& pv = parts[pi]->val;
    std::int64_t pa_len = pv.dim(axis);
    part_axis[pi] = pa_len;
    const double* pp = pv.data();
    for (std::int64_t o = 0; o < outer; ++o)
      std::copy(pp + o * pa_len * inner, pp + (o + 1) * pa_len * inner,
                po + (o * axis_total + offset) * inner);
    offset += pa_len;
  }
  return make_node(std::move(out), parts, [axis_total, outer, inner, part_axis](Node& n) {
    const double* go = n.grad.data();
    std::int64_t offset = 0;
    for (std::size_t pi = 0; pi < n.parents.size(); ++pi) {
      std::int64_t pa_len = part_axis[pi];
      Tensor* g = grad_of(n.parents[pi]);
      if (g) {
        for (std::int64_t o = 0; o < outer; ++o) {
          double* dst = g->data() + o * pa_len * inner;
          const double* src = go + (o * axis_total + offset) * inner;
          for (std::int64_t i = 0; i < pa_len * inner; ++i) dst[i] += src[i];
        }
      }
      offset += pa_len;
    }
  });
}

// --- linear algebra ------------------------------------------------------------

Var matmul(const Var& a, const Var& b) {
  const Tensor& av = a->val;
  const Tensor& bv = b->val;
  SS_CHECK(av.rank() == 2 && bv.rank() == 2 && av.dim(1) == bv.dim(0),
           "matmul: bad shapes " + av.shape_str() + " x " + bv.shape_str());
  std::int64_t m = av.dim(0), k = av.dim(1), n = bv.dim(1);
  Tensor out({m, n});
  CMatMap A(av.data(), m, k);
  CMatMap B(bv.data(), k, n);
  MatMap(out.data(), m, n).noalias() = A * B;
  return make_node(std::move(out), {a, b}, [m, k, n](Node& nd) {
    CMatMap A(nd.parents[0]->val.data(), m, k);
    CMatMap B(nd.parents[1]->val.data(), k, n);
    CMatMap G(nd.grad.data(), m, n);
    if (Tensor* ga = grad_of(nd.parents[0])) MatMap(ga->data(), m, k).noalias() += G * B.transpose();
    if (Tensor* gb = grad_of(nd.parents[1])) MatMap(gb->data(), k, n).noalias() += A.transpose() * G;
  });
}

Var bmm(const Var& a, const Var& b) {
  const Tensor& av = a->val;
  const Tensor& bv = b->val;
  SS_CHECK(av.rank() == 3 && bv.rank() == 3 && av.dim(0) == bv.dim(0) && av.dim(2) == bv.dim(1),
           "bmm: bad shapes " + av.shape_str() + " x " + bv.shape_str());
  std::int64_t B = av.dim(0), m = av.dim(1), k = av.dim(2), n = bv.dim(2);
  Tensor out({B, m, n});
  for (std::int64_t i = 0; i < B; ++i) {
    CMatMap A(av.data() + i * m * k, m, k);
    CMatMap Bm(bv.data() + i * k * n, k, n);
    MatMap(out.data() + i * m * n, m, n).noalias() = A * Bm;
  }
  return make_node(std::move(out), {a, b}, [B, m, k, n](Node& nd) {
    Tensor* ga = grad_of(nd.parents[0]);
    Tensor* gb = grad_of(nd.parents[1]);
    for (std::int64_t i = 0; i < B; ++i) {
      CMatMap A(nd.parents[0]->val.data() + i * m * k, m, k);
      CMatMap Bm(nd.parents[1]->val.data() + i * k * n, k, n);
      CMatMap G(nd.grad.data() + i * m * n, m, n);
      if (ga) MatMap(ga->data() + i * m * k, m, k).noalias() += G * Bm.transpose();
      if (gb) MatMap(gb->data() + i * k * n, k, n).noalias() += A.transpose() * G;
    }
  });
}

Var dot(const Var& a, const Var& b) {
  SS_CHECK(a->val.numel() == b->val.numel(), "dot: length mismatch");
  double s = 0.0;
  for (std::int64_t i = 0; i < a->val.numel(); ++i) s += a->val[i] * b->val[i];
  Tensor out({1}, {s});
  return make_node(std::move(out), {a, b}, [](Node& n) {
    double g = n.grad[0];
    Tensor* ga = grad_of(n.parents[0]);
    Tensor* gb = grad_of(n.parents[1]);
    const Tensor& av = n.parents[0]->val;
    const Tensor& bv = n.parents[1]->val;
    for (std::int64_t i = 0; i < av.numel(); ++i) {
      if (ga) (*ga)[i] += g * bv[i];
      if (gb) (*gb)[i] += g * av[i];
    }
  });
}

// --- reductions ------------------------------------------------------------------

Var sum_all(const Var& a) {
  double s = 0.0;
  for (std::int64_t i = 0; i < a->val.numel(); ++i) s += a->val[i];
  return make_node(Tensor({1}, {s}), {a}, [](Node& n) {
    Tensor* ga = grad_of(n.parents[0]);
    if (!ga) return;
    double g = n.grad[0];
    for (std::int64_t i = 0; i < ga->numel(); ++i) (*ga)[i] += g;
  });
}

Var mean_all(const Var& a) {
  SS_CHECK(a->val.numel() > 0, "mean_all: empty tensor");
  return scale(sum_all(a), 1.0 / static_cast<double>(a->val.numel()));
}

Var sum_axis(const Var& a, std::int64_t axis, bool keepdim) {
  const Tensor& av = a->val;
  SS_CHECK(axis >= 0 && axis < av.rank(), "sum_axis: bad axis");
  std::int64_t outer = 1, inner = 1, k = av.dim(axis);
  for (std::int64_t i = 0; i < axis; ++i) outer *= av.dim(i);
  for (std::int64_t i = axis + 1; i < av.rank(); ++i) inner *= av.dim(i);
  Tensor::Shape out_shape;
  for (std::int64_t i = 0; i < av.rank(); ++i) {
    if (i == axis) {
      if (keepdim) out_shape.push_back(1);
    } else {
      out_shape.push_back(av.dim(i));
    }
  }
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor out(out_shape);
  const double* pa = av.data();
  double* po = out.data();
  for (std::int64_t o = 0; o < outer; ++o)
    for (std::int64_t j = 0; j < k; ++j)
      for (std::int64_t i = 0; i < inner; ++i) po[o * inner + i] += pa[(o * k + j) * inner + i];
  return make_node(std::move(out), {a}, [outer, inner, k](Node& n) {
    Tensor* ga = grad_of(n.parents[0]);
    if (!ga) return;
    const double* go = n.grad.data();
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t j = 0; j < k; ++j)
        for (std::int64_t i = 0; i < inner; ++i)
          (*ga)[(o * k + j) * inner + i] += go[o * inner + i];
  });
}

Var mean_axis(const Var& a, std::int64_t axis, bool keepdim) {
  std::int64_t k = a->val.dim(axis);
  SS_CHECK(k > 0, "mean_axis: empty axis");
  return scale(sum_axis(a, axis, keepdim), 1.0 / static_cast<double>(k));
}

// --- fused ---------------------------------------------------------------------

Var softmax_lastdim(const Var& a) {
  const Tensor& av = a->val;
  std::int64_t d = av.dim(av.rank() - 1);
  std::int64_t rows = row_count(av);
  Tensor out(av.shape());
  const double* pa = av.data();
  double* po = out.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* x = pa + r * d;
    double* y = po + r * d;
    double m = x[0];
    for (std::int64_t j = 1; j < d; ++j) m = std::max(m, x[j]);
    double s = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      y[j] = std::exp(x[j] - m);
      s += y[j];
    }
    double inv = 1.0 / s;
    for (std::int64_t j = 0; j < d; ++j) y[j] *= inv;
  }
  return make_node(std::move(out), {a}, [rows, d](Node& n) {
    Tensor* ga = grad_of(n.parents[0]);
    if (!ga) return;
    const double* py = n.val.data();
    const double* go = n.grad.data();
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* y = py + r * d;
      const double* g = go + r * d;
      double acc = 0.0;
      for (std::int64_t j = 0; j < d; ++j) acc += g[j] * y[j];
      double* out_g = ga->data() + r * d;
      for (std::int64_t j = 0; j < d; ++j) out_g[j] += y[j] * (g[j] - acc);
    }
  });
}

Var logsumexp_lastdim(const Var& a) {
  const Tensor& av = a->val;
  std::int64_t d = av.dim(av.rank() - 1);
  std::int64_t rows = row_count(av);
  Tensor::Shape out_shape(av.shape().begin(), av.shape().end() - 1);
  if (out_shape.empty()) out_shape.push_back(1);
  Tensor out(out_shape);
  const double* pa = av.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* x = pa + r * d;
    double m = x[0];
    for (std::int64_t j = 1; j < d; ++j) m = std::max(m, x[j]);
    double s = 0.0;
    for (std::int64_t j = 0; j < d; ++j) s += std::exp(x[j] - m);
    out[r] = m + std::log(s);
  }
  return make_node(std::move(out), {a}, [rows, d](Node& n) {
    Tensor* ga = grad_of(n.parents[0]);
    if (!ga) return;
    const double* pa = n.parents[0]->val.data();
    const double* py = n.val.data();
    const double* go = n.grad.data();
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* x = pa + r * d;
      double lse = py[r];
      double g = go[r];
      double* out_g = ga->data() + r * d;
      for (std::int64_t j = 0; j < d; ++j) out_g[j] += g * std::exp(x[j] - lse);
    }
  });
}

Var layer_norm(const Var& x, const Var& gamma, const Var& beta, double eps) {
  const Tensor& xv = x->val;
  std::int64_t d = xv.dim(xv.rank() - 1);
  SS_CHECK(gamma->val.numel() == d && beta->val.numel() == d, "layer_norm: affine size mismatch");
  std::int64_t rows = row_count(xv);
  Tensor out(xv.shape());
  auto xhat = std::make_shared<Tensor>(xv.shape());
  auto inv_std = std::make_shared<Tensor>(Tensor::Shape{rows});
  const double* px = xv.data();
  const double* pg = gamma->val.data();
  const double* pb = beta->val.data();
  double* po = out.data();
  double* ph = xhat->data();
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = px + r * d;
    double mean = 0.0;
    for (std::int64_t j = 0; j < d; ++j) mean += xr[j];
    mean /= static_cast<double>(d);
    double var = 0.0;
    for (std::int64_t j = 0; j < d; ++j) {
      double c = xr[j] - mean;
      var += c * c;
    }
    var /= static_cast<double>(d);
    double is = 1.0 / std::sqrt(var + eps);
    (*inv_std)[r] = is;
    for (std::int64_t j = 0; j < d; ++j) {
      double h = (xr[j] - mean) * is;
      ph[r * d + j] = h;
      po[r * d + j] = h * pg[j] + pb[j];
    }
  }
  return make_node(std::move(out), {x, gamma, beta}, [rows, d, xhat, inv_std](Node& n) {
    Tensor* gx = grad_of(n.parents[0]);
    Tensor* gg = grad_of(n.parents[1]);
    Tensor* gb = grad_of(n.parents[2]);
    const double* pg = n.parents[1]->val.data();
    const double* go = n.grad.data();
    const double* ph = xhat->data();
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* g = go + r * d;
      const double* h = ph + r * d;
      if (gg || gb) {
        for (std::int64_t j = 0; j < d; ++j) {
          if (gg) (*gg)[j] += g[j] * h[j];
          if (gb) (*gb)[j] += g[j];
        }
      }
      if (gx) {
        double mean_dh = 0.0, mean_dh_h = 0.0;
        for (std::int64_t j = 0; j < d; ++j) {
          double dh = g[j] * pg[j];
          mean_dh += dh;
          mean_dh_h += dh * h[j];
        }
        mean_dh /= static_cast<double>(d);
        mean_dh_h /= static_cast<double>(d);
        double is = (*inv_std)[r];
        double* out_g = gx->data() + r * d;
        for (std::int64_t j = 0; j < d; ++j) {
          double dh = g[j] * pg[j];
          out_g[j] += is * (dh - mean_dh - h[j] * mean_dh_h);
        }
      }
    }
  });
}

Var l2_normalize_lastdim(const Var& x, double eps) {
  const Tensor& xv = x->val;
  std::int64_t d = xv.dim(xv.rank() - 1);
  std::int64_t rows = row_count(xv);
  Tensor out(xv.shape());
  auto norms = std::make_shared<Tensor>(Tensor::Shape{rows});
  const double* px = xv.data();
  double* po = out.data();
  for (std::int64_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (std::int64_t j = 0; j < d; ++j) s += px[r * d + j] * px[r * d + j];
    double nrm = std::sqrt(s + eps);
    (*norms)[r] = nrm;
    for (std::int64_t j = 0; j < d; ++j) po[r * d + j] = px[r * d + j] / nrm;
  }
  return make_node(std::move(out), {x}, [rows, d, norms](Node& n) {
    Tensor* gx = grad_of(n.parents[0]);
    if (!gx) return;
    const double* py = n.val.data();
    const double* go = n.grad.data();
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* y = py + r * d;
      const double* g = go + r * d;
      double ydotg = 0.0;
      for (std::int64_t j = 0; j < d; ++j) ydotg += y[j] * g[j];
      double inv = 1.0 / (*norms)[r];
      double* out_g = gx->data() + r * d;
      for (std::int64_t j = 0; j < d; ++j) out_g[j] += (g[j] - y[j] * ydotg) * inv;
    }
  });
}

Var group_norm(const Var& x, const Var& gamma, const Var& beta, std::int64_t groups, double eps) {
  const Tensor& xv = x->val;
  SS_CHECK(xv.rank() >= 2, "group_norm: expected [B,C,...]");
  std::int64_t B = xv.dim(0), C = xv.dim(1);
  SS_CHECK(groups >= 1 && C % groups == 0, "group_norm: groups must divide channels");
  SS_CHECK(gamma->val.numel() == C && beta->val.numel() == C, "group_norm: affine size mismatch");
  std::int64_t spatial = xv.numel() / (B * C);
  std::int64_t cg = C / groups;
  std::int64_t m = cg * spatial;  // elements per group
  Tensor out(xv.shape());
  auto xhat = std::make_shared<Tensor>(xv.shape());
  auto inv_std = std::make_shared<Tensor>(Tensor::Shape{B * groups});
  const double* px = xv.data();
  const double* pg = gamma->val.data();
  const double* pb = beta->val.data();
  double* po = out.data();
  double* ph = xhat->data();
  for (std::int64_t b = 0; b < B; ++b) {
    for (std::int64_t g = 0; g < groups; ++g) {
      std::int64_t base = (b * C + g * cg) * spatial;
      double mean = 0.0;
      for (std::int64_t i = 0; i < m; ++i) mean += px[base + i];
      mean /= static_cast<double>(m);
      double var = 0.0;
      for (std::int64_t i = 0; i < m; ++i) {
        double c = px[base + i] - mean;
        var += c * c;
      }
      var /= static_cast<double>(m);
      double is = 1.0 / std::sqrt(var + eps);
      (*inv_std)[b * groups + g] = is;
      for (std::int64_t c = 0; c < cg; ++c) {
        std::int64_t ch = g * cg + c;
        for (std::int64_t sidx = 0; sidx < spatial; ++sidx) {
          std::int64_t off = base + c * spatial + sidx;
          double h = (px[off] - mean) * is;
          ph[off] = h;
          po[off] = h * pg[ch] + pb[ch];
        }
      }
    }
  }
  return make_node(std::move(out), {x, gamma, beta},
                   [B, C, groups, cg, spatial, m, xhat, inv_std](Node& n) {
    Tensor* gx = grad_of(n.parents[0]);
    Tensor* gg = grad_of(n.parents[1]);
    Tensor* gb = grad_of(n.parents[2]);
    const double* pg = n.parents[1]->val.data();
    const double* go = n.grad.data();
    const double* ph = xhat->data();
    for (std::int64_t b = 0; b < B; ++b) {
      for (std::int64_t g = 0; g < groups; ++g) {
        std::int64_t base = (b * C + g * cg) * spatial;
        if (gg || gb) {
          for (std::int64_t c = 0; c < cg; ++c) {
            std::int64_t ch = g * cg + c;
            double sg = 0.0, sb = 0.0;
            for (std::int64_t sidx = 0; sidx < spatial; ++sidx) {
              std::int64_t off = base + c * spatial + sidx;
              sg += go[off] * ph[off];
              sb += go[off];
            }
            if (gg) (*gg)[ch] += sg;
            if (gb) (*gb)[ch] += sb;
          }
        }
        if (gx) {
          double mean_dh = 0.0, mean_dh_h = 0.0;
          for (std::int64_t c = 0; c < cg; ++c) {
            std::int64_t ch = g * cg + c;
            for (std::int64_t sidx = 0; sidx < spatial; ++sidx) {
              std::int64_t off = base + c * spatial + sidx;
              double dh = go[off] * pg[ch];
              mean_dh += dh;
              mean_dh_h += dh * ph[off];
            }
          }
          mean_dh /= static_cast<double>(m);
          mean_dh_h /= static_cast<double>(m);
          double is = (*inv_std)[b * groups + g];
          for (std::int64_t c = 0; c < cg; ++c) {
            std::int64_t ch = g * cg + c;
            for (std::int64_t sidx = 0; sidx < spatial; ++sidx) {
              std::int64_t off = base + c * spatial + sidx;
              double dh = go[off] * pg[ch];
              gx->data()[off] += is * (dh - mean_dh - ph[off] * mean_dh_h);
            }
          }
        }
      }
    }
  });
}

// --- convolutions --------------------------------------------------------------

namespace {

// column buffer layout: [C*kh*kw, OH*OW]
void im2col2d(const double* x, std::int64_t C, std::int64_t H, std::int64_t W, std::int64_t kh,
              std::int64_t kw, std::int64_t stride, std::int64_t pad, std::int64_t OH,
              std::int64_t OW, double* col) {
  for (std::int64_t c = 0; c < C; ++c) {
    for (std::int64_t i = 0; i < kh; ++i) {
      for (std::int64_t j = 0; j < kw; ++j) {
        double* dst = col + ((c * kh + i) * kw + j) * OH * OW;
        for (std::int64_t oy = 0; oy < OH; ++oy) {
          std::int64_t yy = oy * stride + i - pad;
          if (yy < 0 || yy >= H) {
            for (std::int64_t ox = 0; ox < OW; ++ox) dst[oy * OW + ox] = 0.0;
            continue;
          }
          const double* src = x + (c * H + yy) * W;
          for (std::int64_t ox = 0; ox < OW; ++ox) {
            std::int64_t xx = ox * stride + j - pad;
            dst[oy * OW + ox] = (xx >= 0 && xx < W) ? src[xx] : 0.0;
          }
        }
      }
    }
  }
}

void col2im2d(const double* col, std::int64_t C, std::int64_t H, std::int64_t W, std::int64_t kh,
              std::int64_t kw, std::int64_t stride, std::int64_t pad, std::int64_t OH,
              std::int64_t OW, double* dx) {
  for (std::int64_t c = 0; c < C; ++c) {
    for (std::int64_t i = 0; i < kh; ++i) {
      for (std::int64_t j = 0; j < kw; ++j) {
        const double* src = col + ((c * kh + i) * kw + j) * OH * OW;
        for (std::int64_t oy = 0; oy < OH; ++oy) {
          std::int64_t yy = oy * stride + i - pad;
          if (yy < 0 || yy >= H) continue;
          double* dst = dx + (c * H + yy) * W;
          for (std::int64_t ox = 0; ox < OW; ++ox) {
            std::int64_t xx = ox * stride + j - pad;
            if (xx >= 0 && xx < W) dst[xx] += src[oy * OW + ox];
          }
        }
      }
    }
  }
}

void im2col3d(const double* x, std::int64_t C, std::int64_t D, std::int64_t H, std::int64_t W,
              std::int64_t kd, std::int64_t kh, std::int64_t kw, std::int64_t sd, std::int64_t sh,
              std::int64_t sw, std::int64_t pd, std::int64_t ph, std::int64_t pw, std::int64_t OD,
              std::int64_t OH, std::int64_t OW, double* col) {
  std::int64_t out_sp = OD * OH * OW;
  for (std::int64_t c = 0; c < C; ++c) {
    for (std::int64_t t = 0; t < kd; ++t) {
      for (std::int64_t i = 0; i < kh; ++i) {
        for (std::int64_t j = 0; j < kw; ++j) {
          double* dst = col + (((c * kd + t) * kh + i) * kw + j) * out_sp;
          for (std::int64_t od = 0; od < OD; ++od) {
            std::int64_t dd = od * sd + t - pd;
            for (std::int64_t oy = 0; oy < OH; ++oy) {
              std::int64_t yy = oy * sh + i - ph;
              double* drow = dst + (od * OH + oy) * OW;
              if (dd < 0 || dd >= D || yy < 0 || yy >= H) {
                for (std::int64_t ox = 0; ox < OW; ++ox) drow[ox] = 0.0;
                continue;
              }
              const double* src = x + ((c * D + dd) * H + yy) * W;
              for (std::int64_t ox = 0; ox < OW; ++ox) {
                std::int64_t xx = ox * sw + j - pw;
                drow[ox] = (xx >= 0 && xx < W) ? src[xx] : 0.0;
              }
            }
          }
        }
      }
    }
  }
}

void col2im3d(const double* col, std::int64_t C, std::int64_t D, std::int64_t H, std::int64_t W,
              std::int64_t kd, std::int64_t kh, std::int64_t kw, std::int64_t sd, std::int64_t sh,
              std::int64_t sw, std::int64_t pd, std::int64_t ph, std::int64_t pw, std::int64_t OD,
              std::int64_t OH, std::int64_t OW, double* dx) {
  std::int64_t out_sp = OD * OH * OW;
  for (std::int64_t c = 0; c < C; ++c) {
    for (std::int64_t t = 0; t < kd; ++t) {
      for (std::int64_t i = 0; i < kh; ++i) {
        for (std::int64_t j = 0; j < kw; ++j) {
          const double* src = col + (((c * kd + t) * kh + i) * kw + j) * out_sp;
          for (std::int64_t od = 0; od < OD; ++od) {
            std::int64_t dd = od * sd + t - pd;
            if (dd < 0 || dd >= D) continue;
            for (std::int64_t oy = 0; oy < OH; ++oy) {
              std::int64_t yy = oy * sh + i - ph;
              if (yy < 0 || yy >= H) continue;
              double* dst = dx + ((c * D + dd) * H + yy) * W;
              const double* srow = src + (od * OH + oy) * OW;
              for (std::int64_t ox = 0; ox < OW; ++ox) {
                std::int64_t xx = ox * sw + j - pw;
                if (xx >= 0 && xx < W) dst[xx] += srow[ox];
              }
            }
          }
        }
      }
    }
  }
}

}  // namespace

Var conv2d(const Var& x, const Var& w, const Var& b, std::int64_t stride, std::int64_t pad) {
  const Tensor& xv = x->val;
  const Tensor& wv = w->val;
  SS_CHECK(xv.rank() == 4 && wv.rank() == 4, "conv2d: x must be [B,C,H,W], w [Co,C,kh,kw]");
  std::int64_t B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  std::int64_t Co = wv.dim(0), kh = wv.dim(2), kw = wv.dim(3);
  SS_CHECK(wv.dim(1) == C, "conv2d: channel mismatch");
  SS_CHECK(b->val.numel() == Co, "conv2d: bias size mismatch");
  std::int64_t OH = (H + 2 * pad - kh) / stride + 1;
  std::int64_t OW = (W + 2 * pad - kw) / stride + 1;
  SS_CHECK(OH > 0 && OW > 0, "conv2d: empty output");
  std::int64_t K = C * kh * kw, S = OH * OW;
  bool retain = x->requires_grad || w->requires_grad || b->requires_grad;
  auto cols = std::make_shared<std::vector<double>>();
  if (retain) cols->assign(static_cast<std::size_t>(B * K * S), 0.0);
  Tensor out({B, Co, OH, OW});
  const double* pb = b->val.data();
  parallel_chunks(B, 4, [&](std::int64_t lo, std::int64_t hi) {
    std::vector<double> local;
    for (std::int64_t i = lo; i < hi; ++i) {
      double* col;
      if (retain) {
        col = cols->data() + i * K * S;
      } else {
        local.assign(static_cast<std::size_t>(K * S), 0.0);
        col = local.data();
      }
      im2col2d(xv.data() + i * C * H * W, C, H, W, kh, kw, stride, pad, OH, OW, col);
      CMatMap Wm(wv.data(), Co, K);
      CMatMap Cm(col, K, S);
      MatMap Y(out.data() + i * Co * S, Co, S);
      Y.noalias() = Wm * Cm;
      for (std::int64_t co = 0; co < Co; ++co)
        for (std::int64_t s = 0; s < S; ++s) Y(co, s) += pb[co];
    }
  });
  return make_node(std::move(out), {x, w, b},
                   [B, C, H, W, Co, kh, kw, stride, pad, OH, OW, K, S, cols](Node& n) {
    Tensor* gx = grad_of(n.parents[0]);
    Tensor* gw = grad_of(n.parents[1]);
    Tensor* gb = grad_of(n.parents[2]);
    const double* go = n.grad.data();
    const Tensor& wv = n.parents[1]->val;
    // dX: independent per sample
    if (gx) {
      parallel_chunks(B, 4, [&](std::int64_t lo, std::int64_t hi) {
        std::vector<double> dcol(static_cast<std::size_t>(K * S));
        for (std::int64_t i = lo; i < hi; ++i) {
          CMatMap Wm(wv.data(), Co, K);
          CMatMap G(go + i * Co * S, Co, S);
          MatMap(dcol.data(), K, S).noalias() = Wm.transpose() * G;
          col2im2d(dcol.data(), C, H, W, kh, kw, stride, pad, OH, OW, gx->data() + i * C * H * W);
        }
      });
    }
    // dW, db: fixed-chunk partials reduced in chunk order for determinism
    if (gw || gb) {
      const std::int64_t chunk = 4;
      std::int64_t num_chunks = (B + chunk - 1) / chunk;
      std::vector<std::vector<double>> wparts(static_cast<std::size_t>(num_chunks));
      std::vector<std::vector<double>> bparts(static_cast<std::size_t>(num_chunks));
      parallel_chunks(B, chunk, [&](std::int64_t lo, std::int64_t hi) {
        std::int64_t ci = lo / chunk;
        auto& wp = wparts[static_cast<std::size_t>(ci)];
        auto& bp = bparts[static_cast<std::size_t>(ci)];
        wp.assign(static_cast<std::size_t>(Co * K), 0.0);
        bp.assign(static_cast<std::size_t>(Co), 0.0);
        for (std::int64_t i = lo; i < hi; ++i) {
          CMatMap G(go + i * Co * S, Co, S);
          CMatMap Cm(cols->data() + i * K * S, K, S);
          MatMap(wp.data(), Co, K).noalias() += G * Cm.transpose();
          for (std::int64_t co = 0; co < Co; ++co)
            for (std::int64_t s = 0; s < S; ++s) bp[static_cast<std::size_t>(co)] += G(co, s);
        }
      });
      for (std::int64_t ci = 0; ci < num_chunks; ++ci) {
        if (gw)
          for (std::int64_t j = 0; j < Co * K; ++j)
            (*gw)[j] += wparts[static_cast<std::size_t>(ci)][static_cast<std::size_t>(j)];
        if (gb)
          for (std::int64_t co = 0; co < Co; ++co)
            (*gb)[co] += bparts[static_cast<std::size_t>(ci)][static_cast<std::size_t>(co)];
      }
    }
  });
}

Var conv3d(const Var& x, const Var& w, const Var& b, std::int64_t sd, std::int64_t sh,
           std::int64_t sw, std::int64_t pd, std::int64_t ph, std::int64_t pw) {
  const Tensor& xv = x->val;
  const Tensor& wv = w->val;
  SS_CHECK(xv.rank() == 5 && wv.rank() == 5, "conv3d: x must be [B,C,D,H,W], w [Co,C,kd,kh,kw]");
  std::int64_t B = xv.dim(0), C = xv.dim(1), D = xv.dim(2), H = xv.dim(3), W = xv.dim(4);
  std::int64_t Co = wv.dim(0), kd = wv.dim(2), kh = wv.dim(3), kw = wv.dim(4);
  SS_CHECK(wv.dim(1) == C, "conv3d: channel mismatch");
  SS_CHECK(b->val.numel() == Co, "conv3d: bias size mismatch");
  std::int64_t OD = (D + 2 * pd - kd) / sd + 1;
  std::int64_t OH = (H + 2 * ph - kh) / sh + 1;
  std::int64_t OW = (W + 2 * pw - kw) / sw + 1;
  SS_CHECK(OD > 0 && OH > 0 && OW > 0, "conv3d: empty output");
  std::int64_t K = C * kd * kh * kw, S = OD * OH * OW;
  bool retain = x->requires_grad || w->requires_grad || b->requires_grad;
  auto cols = std::make_shared<std::vector<double>>();
  if (retain) cols->assign(static_cast<std::size_t>(B * K * S), 0.0);
  Tensor out({B, Co, OD, OH, OW});
  const double* pb = b->val.data();
  parallel_chunks(B, 2, [&](std::int64_t lo, std::int64_t hi) {
    std::vector<double> local;
    for (std::int64_t i = lo; i < hi; ++i) {
      double* col;
      if (retain) {
        col = cols->data() + i * K * S;
      } else {
        local.assign(static_cast<std::size_t>(K * S), 0.0);
        col = local.data();
      }
      im2col3d(xv.data() + i * C * D * H * W, C, D, H, W, kd, kh, kw, sd, sh, sw, pd, ph, pw, OD,
               OH, OW, col);
      CMatMap Wm(wv.data(), Co, K);
      CMatMap Cm(col, K, S);
      MatMap Y(out.data() + i * Co * S, Co, S);
      Y.noalias() = Wm * Cm;
      for (std::int64_t co = 0; co < Co; ++co)
        for (std::int64_t s = 0; s < S; ++s) Y(co, s) += pb[co];
    }
  });
  return make_node(std::move(out), {x, w, b},
                   [B, C, D, H, W, Co, kd, kh, kw, sd, sh, sw, pd, ph, pw, OD, OH, OW, K, S,
                    cols](Node& n) {
    Tensor* gx = grad_of(n.parents[0]);
    Tensor* gw = grad_of(n.parents[1]);
    Tensor* gb = grad_of(n.parents[2]);
    const double* go = n.grad.data();
    const Tensor& wv = n.parents[1]->val;
    if (gx) {
      parallel_chunks(B, 2, [&](std::int64_t lo, std::int64_t hi) {
        std::vector<double> dcol(static_cast<std::size_t>(K * S));
        for (std::int64_t i = lo; i < hi; ++i) {
          CMatMap Wm(wv.data(), Co, K);
          CMatMap G(go + i * Co * S, Co, S);
          MatMap(dcol.data(), K, S).noalias() = Wm.transpose() * G;
          col2im3d(dcol.data(), C, D, H, W, kd, kh, kw, sd, sh, sw, pd, ph, pw, OD, OH, OW,
                   gx->data() + i * C * D * H * W);
        }
      });
    }
    if (gw || gb) {
      const std::int64_t chunk = 2;
      std::int64_t num_chunks = (B + chunk - 1) / chunk;
      std::vector<std::vector<double>> wparts(static_cast<std::size_t>(num_chunks));
      std::vector<std::vector<double>> bparts(static_cast<std::size_t>(num_chunks));
      parallel_chunks(B, chunk, [&](std::int64_t lo, std::int64_t hi) {
        std::int64_t ci = lo / chunk;
        auto& wp = wparts[static_cast<std::size_t>(ci)];
        auto& bp = bparts[static_cast<std::size_t>(ci)];
        wp.assign(static_cast<std::size_t>(Co * K), 0.0);
        bp.assign(static_cast<std::size_t>(Co), 0.0);
        for (std::int64_t i = lo; i < hi; ++i) {
          CMatMap G(go + i * Co * S, Co, S);
          CMatMap Cm(cols->data() + i * K * S, K, S);
          MatMap(wp.data(), Co, K).noalias() += G * Cm.transpose();
          for (std::int64_t co = 0; co < Co; ++co)
            for (std::int64_t s = 0; s < S; ++s) bp[static_cast<std::size_t>(co)] += G(co, s);
        }
      });
      for (std::int64_t ci = 0; ci < num_chunks; ++ci) {
        if (gw)
          for (std::int64_t j = 0; j < Co * K; ++j)
            (*gw)[j] += wparts[static_cast<std::size_t>(ci)][static_cast<std::size_t>(j)];
        if (gb)
          for (std::int64_t co = 0; co < Co; ++co)
            (*gb)[co] += bparts[static_cast<std::size_t>(ci)][static_cast<std::size_t>(co)];
      }
    }
  });
}

Var upsample_nearest2d(const Var& x, std::int64_t factor) {
  const Tensor& xv = x->val;
  SS_CHECK(xv.rank() == 4, "upsample_nearest2d: x must be [B,C,H,W]");
  SS_CHECK(factor >= 1, "upsample_nearest2d: factor must be >= 1");
  if (factor == 1) return reshape(x, xv.shape());
  std::int64_t B = xv.dim(0), C = xv.dim(1), H = xv.dim(2), W = xv.dim(3);
  Tensor out({B, C, H * factor, W * factor});
  const double* px = xv.data();
  double* po = out.data();
  std::int64_t OW = W * factor;
  for (std::int64_t bc = 0; bc < B * C; ++bc) {
    const double* src = px + bc * H * W;
    double* dst = po + bc * H * factor * OW;
    for (std::int64_t y = 0; y < H * factor; ++y)
      for (std::int64_t xx = 0; xx < OW; ++xx)
        dst[y * OW + xx] = src[(y / factor) * W + (xx / factor)];
  }
  return make_node(std::move(out), {x}, [B, C, H, W, factor](Node& n) {
    Tensor* gx = grad_of(n.parents[0]);
    if (!gx) return;
    const double* go = n.grad.data();
    std::int64_t OW = W * factor;
    for (std::int64_t bc = 0; bc < B * C; ++bc) {
      double* dst = gx->data() + bc * H * W;
      const double* src = go + bc * H * factor * OW;
      for (std::int64_t y = 0; y < H * factor; ++y)
        for (std::int64_t xx = 0; xx < OW; ++xx)
          dst[(y / factor) * W + (xx / factor)] += src[y * OW + xx];
    }
  });
}

double finite_difference(Tensor& t, std::int64_t index, double h, const std::function<double()>& fn) {
  double orig = t[index];
  t[index] = orig + h;
  double fp = fn();
  t[index] = orig - h;
  double fm = fn();
  t[index] = orig;
  return (fp - fm) / (2.0 * h);
}

}  // namespace selfshot::ad
