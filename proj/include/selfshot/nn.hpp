#pragma once

#include <map>
#include <memory>
#include <string>
#include <vector>

#include "selfshot/autodiff.hpp"
#include "selfshot/common.hpp"

namespace selfshot::nn {

using ad::Var;

// Ordered collection of named trainable leaves. Order is registration order and
// defines checkpoint layout, optimizer-state layout and EMA pairing.
class ParamStore {
 public:
  Var add(const std::string& name, Tensor init);
  Var get(const std::string& name) const;
  bool has(const std::string& name) const;
  const std::vector<std::pair<std::string, Var>>& entries() const { return entries_; }
  std::size_t size() const { return entries_.size(); }
  std::int64_t total_elements() const;

  void zero_grad();
  // Copies values elementwise (names and shapes must match).
  void copy_values_from(const ParamStore& other);
  // Turns every entry into a non-differentiable constant (e.g. EMA teachers).
  void freeze();

 private:
  std::vector<std::pair<std::string, Var>> entries_;
  std::map<std::string, std::size_t> index_;
};

// Derives per-parameter init randomness from one stream.
struct Init {
  SeedStream* rng;
  Tensor normal(Tensor::Shape shape, double stddev);
  Tensor uniform(Tensor::Shape shape, double lo, double hi);
  // Kaiming-style fan-in scaling for conv/linear weights.
  Tensor kaiming(Tensor::Shape shape, std::int64_t fan_in);
  Tensor zeros(Tensor::Shape shape) { return Tensor(std::move(shape)); }
  Tensor ones(Tensor::Shape shape) { return Tensor(std::move(shape), 1.0); }
};

struct Linear {
  Var w;  // [in, out]
  Var b;  // [out]
  Linear() = default;
  Linear(ParamStore& ps, const std::string& name, std::int64_t in, std::int64_t out, Init& init);
  // x [rows, in] -> [rows, out]
  Var operator()(const Var& x) const;
};

struct LayerNorm {
  Var gamma, beta;
  LayerNorm() = default;
  LayerNorm(ParamStore& ps, const std::string& name, std::int64_t dim);
  Var operator()(const Var& x) const { return ad::layer_norm(x, gamma, beta); }
};

struct MultiHeadAttention {
  Linear wq, wk, wv, wo;
  std::int64_t heads = 1;
  std::int64_t dim = 0;
  MultiHeadAttention() = default;
  MultiHeadAttention(ParamStore& ps, const std::string& name, std::int64_t dim, std::int64_t heads,
                     Init& init);
  // q [tq,d], k [tk,d], v [tk,d] -> [tq,d]
  Var operator()(const Var& q, const Var& k, const Var& v) const;
};

struct FeedForward {
  Linear fc1, fc2;
  FeedForward() = default;
  FeedForward(ParamStore& ps, const std::string& name, std::int64_t dim, std::int64_t hidden,
              Init& init);
  Var operator()(const Var& x) const { return fc2(ad::relu(fc1(x))); }
};

struct Conv2d {
  Var w;  // [Co,C,kh,kw]
  Var b;
  std::int64_t stride = 1, pad = 0;
  Conv2d() = default;
  Conv2d(ParamStore& ps, const std::string& name, std::int64_t in_ch, std::int64_t out_ch,
         std::int64_t k, std::int64_t stride, std::int64_t pad, Init& init);
  Var operator()(const Var& x) const { return ad::conv2d(x, w, b, stride, pad); }
};

struct Conv3d {
  Var w;  // [Co,C,kd,kh,kw]
  Var b;
  std::int64_t sd = 1, sh = 1, sw = 1, pd = 0, ph = 0, pw = 0;
  Conv3d() = default;
  Conv3d(ParamStore& ps, const std::string& name, std::int64_t in_ch, std::int64_t out_ch,
         std::int64_t kd, std::int64_t kh, std::int64_t kw, std::int64_t sd, std::int64_t sh,
         std::int64_t sw, std::int64_t pd, std::int64_t ph, std::int64_t pw, Init& init);
  Var operator()(const Var& x) const { return ad::conv3d(x, w, b, sd, sh, sw, pd, ph, pw); }
};

struct GroupNorm {
  Var gamma, beta;
  std::int64_t groups = 1;
  GroupNorm() = default;
  GroupNorm(ParamStore& ps, const std::string& name, std::int64_t channels, std::int64_t groups);
  Var operator()(const Var& x) const { return ad::group_norm(x, gamma, beta, groups); }
};

// AdamW with parameter groups selected by name prefix. Decoupled weight decay.
class AdamW {
 public:
  struct Group {
    std::string name_prefix;  // empty = default group
    double lr = 1e-4;
  };

  AdamW(ParamStore& params, std::vector<Group> groups, double weight_decay = 1e-4,
        double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

  // lr_scale multiplies every group's base lr (for schedules).
  void step(double lr_scale = 1.0);
  void zero_grad() { params_->zero_grad(); }
  // Global L2 clipping of the full gradient vector; returns pre-clip norm.
  double clip_grad_norm(double max_norm);
  std::int64_t step_count() const { return t_; }

  // optimizer state round-trips through checkpoints for exact resume
  std::vector<std::pair<std::string, Tensor>> state_tensors() const;
  void load_state(const std::map<std::string, Tensor>& state);

 private:
  ParamStore* params_;
  std::vector<Group> groups_;
  std::vector<double> lr_per_param_;
  std::vector<Tensor> m_, v_;
  double weight_decay_, beta1_, beta2_, eps_;
  std::int64_t t_ = 0;
};

}  // namespace selfshot::nn
