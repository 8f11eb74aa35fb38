#include "selfshot/nn.hpp"

#include <cmath>

namespace selfshot::nn {

Var ParamStore::add(const std::string& name, Tensor init) {
  SS_CHECK(index_.find(name) == index_.end(), "duplicate parameter name: " + name);
  Var v = ad::leaf(std::move(init));
  index_[name] = entries_.size();
  entries_.emplace_back(name, v);
  return v;
}

Var ParamStore::get(const std::string& name) const {
  auto it = index_.find(name);
  SS_CHECK(it != index_.end(), "unknown parameter: " + name);
  return entries_[it->second].second;
}

bool ParamStore::has(const std::string& name) const { return index_.count(name) > 0; }

std::int64_t ParamStore::total_elements() const {
  std::int64_t n = 0;
  for (const auto& [name, v] : entries_) n += v->val.numel();
  return n;
}

void ParamStore::zero_grad() {
  for (auto& [name, v] : entries_) {
    if (v->grad.numel() == v->val.numel()) v->grad.fill(0.0);
  }
}

void ParamStore::freeze() {
  for (auto& [name, v] : entries_) {
    v->requires_grad = false;
    v->backward_fn = nullptr;
  }
}

void ParamStore::copy_values_from(const ParamStore& other) {
  SS_CHECK(entries_.size() == other.entries_.size(), "param store size mismatch");
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    SS_CHECK(entries_[i].first == other.entries_[i].first, "param name mismatch");
    SS_CHECK(entries_[i].second->val.same_shape(other.entries_[i].second->val),
             "param shape mismatch: " + entries_[i].first);
    entries_[i].second->val.vec() = other.entries_[i].second->val.vec();
  }
}

Tensor Init::normal(Tensor::Shape shape, double stddev) {
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng->next_normal() * stddev;
  return t;
}

Tensor Init::uniform(Tensor::Shape shape, double lo, double hi) {
  Tensor t(std::move(shape));
  for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = lo + (hi - lo) * rng->next_double();
  return t;
}

Tensor Init::kaiming(Tensor::Shape shape, std::int64_t fan_in) {
  double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  return normal(std::move(shape), stddev);
}

Linear::Linear(ParamStore& ps, const std::string& name, std::int64_t in, std::int64_t out,
               Init& init) {
  w = ps.add(name + ".w", init.kaiming({in, out}, in));
  b = ps.add(name + ".b", init.zeros({out}));
}

Var Linear::operator()(const Var& x) const { return ad::add(ad::matmul(x, w), b); }

LayerNorm::LayerNorm(ParamStore& ps, const std::string& name, std::int64_t dim) {
  gamma = ps.add(name + ".g", Tensor({dim}, 1.0));
  beta = ps.add(name + ".b", Tensor({dim}));
}

MultiHeadAttention::MultiHeadAttention(ParamStore& ps, const std::string& name, std::int64_t dim,
                                       std::int64_t heads, Init& init)
    : heads(heads), dim(dim) {
  SS_CHECK(dim % heads == 0, "attention width must divide into heads");
  wq = Linear(ps, name + ".q", dim, dim, init);
  wk = Linear(ps, name + ".k", dim, dim, init);
  wv = Linear(ps, name + ".v", dim, dim, init);
  wo = Linear(ps, name + ".o", dim, dim, init);
}

Var MultiHeadAttention::operator()(const Var& q_in, const Var& k_in, const Var& v_in) const {
  std::int64_t tq = q_in->val.dim(0);
  std::int64_t tk = k_in->val.dim(0);
  std::int64_t dh = dim / heads;
  // [t,d] -> [h,t,dh]
  auto split = [&](const Var& x, std::int64_t t) {
    return ad::permute(ad::reshape(x, {t, heads, dh}), {1, 0, 2});
  };
  Var q = split(wq(q_in), tq);
  Var k = split(wk(k_in), tk);
  Var v = split(wv(v_in), tk);
  Var scores = ad::scale(ad::bmm(q, ad::permute(k, {0, 2, 1})), 1.0 / std::sqrt(static_cast<double>(dh)));
  Var attn = ad::softmax_lastdim(scores);            // [h,tq,tk]
  Var ctx = ad::bmm(attn, v);                        // [h,tq,dh]
  Var merged = ad::reshape(ad::permute(ctx, {1, 0, 2}), {tq, dim});
  return wo(merged);
}

FeedForward::FeedForward(ParamStore& ps, const std::string& name, std::int64_t dim,
                         std::int64_t hidden, Init& init) {
  fc1 = Linear(ps, name + ".fc1", dim, hidden, init);
  fc2 = Linear(ps, name + ".fc2", hidden, dim, init);
}

Conv2d::Conv2d(ParamStore& ps, const std::string& name, std::int64_t in_ch, std::int64_t out_ch,
               std::int64_t k, std::int64_t stride_, std::int64_t pad_, Init& init)
    : stride(stride_), pad(pad_) {
  w = ps.add(name + ".w", init.kaiming({out_ch, in_ch, k, k}, in_ch * k * k));
  b = ps.add(name + ".b", init.zeros({out_ch}));
}

Conv3d::Conv3d(ParamStore& ps, const std::string& name, std::int64_t in_ch, std::int64_t out_ch,
               std::int64_t kd, std::int64_t kh, std::int64_t kw, std::int64_t sd_, std::int64_t sh_,
               std::int64_t sw_, std::int64_t pd_, std::int64_t ph_, std::int64_t pw_, Init& init)
    : sd(sd_), sh(sh_), sw(sw_), pd(pd_), ph(ph_), pw(pw_) {
  w = ps.add(name + ".w", init.kaiming({out_ch, in_ch, kd, kh, kw}, in_ch * kd * kh * kw));
  b = ps.add(name + ".b", init.zeros({out_ch}));
}

GroupNorm::GroupNorm(ParamStore& ps, const std::string& name, std::int64_t channels,
                     std::int64_t groups_)
    : groups(groups_) {
  gamma = ps.add(name + ".g", Tensor({channels}, 1.0));
  beta = ps.add(name + ".b", Tensor({channels}));
}

AdamW::AdamW(ParamStore& params, std::vector<Group> groups, double weight_decay, double beta1,
             double beta2, double eps)
    : params_(&params),
      groups_(std::move(groups)),
      weight_decay_(weight_decay),
      beta1_(beta1),
      beta2_(beta2),
      eps_(eps) {
  SS_CHECK(!groups_.empty(), "AdamW: at least one group required");
  for (const auto& [name, v] : params_->entries()) {
    double lr = groups_[0].lr;
    // longest matching prefix wins
    std::size_t best = 0;
    for (const auto& g : groups_) {
      if (!g.name_prefix.empty() && name.rfind(g.name_prefix, 0) == 0 &&
          g.name_prefix.size() >= best) {
        lr = g.lr;
        best = g.name_prefix.size();
      }
    }
    lr_per_param_.push_back(lr);
    m_.emplace_back(v->val.shape());
    v_.emplace_back(v->val.shape());
  }
}

double AdamW::clip_grad_norm(double max_norm) {
  double sq = 0.0;
  for (const auto& [name, v] : params_->entries()) {
    if (v->grad.numel() != v->val.numel()) continue;
    for (std::int64_t i = 0; i < v->grad.numel(); ++i) sq += v->grad[i] * v->grad[i];
  }
  double norm = std::sqrt(sq);
  if (max_norm > 0 && norm > max_norm) {
    double s = max_norm / (norm + 1e-12);
    for (const auto& [name, v] : params_->entries()) {
      if (v->grad.numel() != v->val.numel()) continue;
      for (std::int64_t i = 0; i < v->grad.numel(); ++i) v->grad[i] *= s;
    }
  }
  return norm;
}

void AdamW::step(double lr_scale) {
  ++t_;
  double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
  double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
  const auto& entries = params_->entries();
  for (std::size_t pi = 0; pi < entries.size(); ++pi) {
    Var v = entries[pi].second;
    if (v->grad.numel() != v->val.numel()) continue;  // no grad this step
    double lr = lr_per_param_[pi] * lr_scale;
    Tensor& m = m_[pi];
    Tensor& vv = v_[pi];
    for (std::int64_t i = 0; i < v->val.numel(); ++i) {
      double g = v->grad[i];
      m[i] = beta1_ * m[i] + (1.0 - beta1_) * g;
      vv[i] = beta2_ * vv[i] + (1.0 - beta2_) * g * g;
      double mhat = m[i] / bc1;
      double vhat = vv[i] / bc2;
      v->val[i] -= lr * (mhat / (std::sqrt(vhat) + eps_) + weight_decay_ * v->val[i]);
    }
  }
}

std::vector<std::pair<std::string, Tensor>> AdamW::state_tensors() const {
  std::vector<std::pair<std::string, Tensor>> out;
  const auto& entries = params_->entries();
  for (std::size_t pi = 0; pi < entries.size(); ++pi) {
    out.emplace_back("adam.m." + entries[pi].first, m_[pi]);
    out.emplace_back("adam.v." + entries[pi].first, v_[pi]);
  }
  out.emplace_back("adam.t", Tensor({1}, {static_cast<double>(t_)}));
  return out;
}

void AdamW::load_state(const std::map<std::string, Tensor>& state) {
  const auto& entries = params_->entries();
  for (std::size_t pi = 0; pi < entries.size(); ++pi) {
    auto im = state.find("adam.m." + entries[pi].first);
    auto iv = state.find("adam.v." + entries[pi].first);
    SS_CHECK(im != state.end() && iv != state.end(),
             "optimizer state missing for: " + entries[pi].first);
    SS_CHECK(im->second.same_shape(m_[pi]) && iv->second.same_shape(v_[pi]),
             "optimizer state shape mismatch: " + entries[pi].first);
    m_[pi] = im->second;
    v_[pi] = iv->second;
  }
  auto it = state.find("adam.t");
  SS_CHECK(it != state.end(), "optimizer state missing step counter");
  t_ = static_cast<std::int64_t>(it->second[0]);
}

}  // namespace selfshot::nn
