#pragma once

#include <memory>
#include <string>
#include <vector>

#include "selfshot/checkpoint.hpp"
#include "selfshot/image.hpp"
#include "selfshot/matchloss.hpp"
#include "selfshot/nn.hpp"

namespace selfshot::vistr {

using ad::Var;

struct VisConfig {
  std::int64_t dim = 96;  // model width, divisible by 6 (three axes x sin/cos)
  std::int64_t enc_layers = 3;
  std::int64_t fuser_layers = 2;
  std::int64_t dec_layers = 3;
  std::int64_t heads = 4;
  std::int64_t instances = 5;       // prediction slots per frame
  std::int64_t frames = 8;          // query clip length T
  std::int64_t support_frames = 8;  // clip length per support video
  std::int64_t input_h = 64;
  std::int64_t input_w = 64;
  std::int64_t mask_h = 16;  // H0
  std::int64_t mask_w = 16;  // W0
  std::int64_t backbone_width = 16;
  std::int64_t mask_channels = 8;  // segmenter feature channels
  std::int64_t ffn_mult = 2;

  static constexpr std::int64_t kStride = 8;
  std::int64_t token_h() const { return input_h / kStride; }
  std::int64_t token_w() const { return input_w / kStride; }
  std::int64_t num_queries() const { return instances * frames; }

  void validate() const;
  std::string arch_json() const;
  static VisConfig from_arch_json(const std::string& json_text);
  // the published large configuration: width 288, 6/3/6 layers, 8 heads,
  // 10 instances over 32 query frames, 24 support frames, 320x280 input
  static VisConfig paper_scale();
};

// d/3 channels per axis (t, x, y), each axis interleaving sin/cos at geometric
// frequencies; values in [-1,1]. Token order is (t, y, x) row-major.
Tensor positional_encoding(std::int64_t T, std::int64_t W, std::int64_t H, std::int64_t d);

// Query-support instance segmentation transformer: shared conv backbone,
// shared spatio-temporal encoder, query-support fuser, instance-sequence
// decoder and mask segmenter.
class VisModel {
 public:
  VisModel(const VisConfig& cfg, std::uint64_t seed);

  const VisConfig& config() const { return cfg_; }
  nn::ParamStore& params() { return ps_; }
  const nn::ParamStore& params() const { return ps_; }

  // clip [T,3,H,W] -> feature tokens; the backbone is shared between branches.
  Var extract_features(const Tensor& clip) const;  // [T, dim, th, tw]
  // flatten a feature map into [T*th*tw, dim] token rows
  Var tokens_from_features(const Var& feat) const;
  // self-attention encoder; positional encodings are re-added at every layer.
  Var encode_tokens(const Var& tokens, const Tensor& pe) const;
  // support branch fused into the query branch; output has query token count.
  Var fuse(const Var& query_tokens, const Var& support_tokens) const;
  // decode N = instances * frames instance features from the fused tokens.
  Var decode(const Var& fused) const;  // [N, dim]
  // instance segmenter + box/class heads.
  loss::PredictionsVar segment(const Var& instance_features, const Var& fused,
                               const Var& query_tokens) const;

  // full pipeline; supports must be non-empty, each [Ts,3,H,W].
  loss::PredictionsVar forward(const Tensor& query_clip,
                               const std::vector<Tensor>& support_clips) const;

  void save(const std::string& path) const;
  static std::unique_ptr<VisModel> load(const std::string& path);

 private:
  struct EncoderLayer {
    nn::MultiHeadAttention attn;
    nn::LayerNorm ln1, ln2;
    nn::FeedForward ffn;
  };
  struct FuserLayer {
    nn::MultiHeadAttention enhance_qs, enhance_sq, fuse_attn;
    nn::LayerNorm ln_qs, ln_sq, ln_fuse, ln_out;
    nn::FeedForward ffn;
  };
  struct DecoderLayer {
    nn::MultiHeadAttention self_attn, cross_attn;
    nn::LayerNorm ln1, ln2, ln3;
    nn::FeedForward ffn;
  };

  VisConfig cfg_;
  nn::ParamStore ps_;
  // backbone
  nn::Conv2d b1_, b2_, b3_, bproj_;
  nn::GroupNorm bg1_, bg2_, bg3_;
  std::vector<EncoderLayer> encoder_;
  std::vector<FuserLayer> fuser_;
  std::vector<DecoderLayer> decoder_;
  Var query_embed_;  // [N, dim] learned instance-sequence embeddings
  // heads
  nn::Linear seg_q_, seg_k_;          // segmenter attention projections
  nn::Conv2d mask_conv_;              // fuses attention map + E_q + F
  nn::GroupNorm mask_gn_;
  nn::Conv3d seg3d_1_, seg3d_2_, seg3d_3_;
  nn::GroupNorm seg_gn1_, seg_gn2_;
  nn::Linear box_fc1_, box_fc2_, box_fc3_;
  nn::Linear cls_head_;

  Tensor query_pe_;  // cached positional encoding for the query geometry
};

// Values-only predictions for evaluation and serialization.
struct Predictions {
  std::vector<double> prob;         // sequence foreground probability per slot
  std::vector<Tensor> boxes;        // per slot [T,4]
  std::vector<Tensor> mask_logits;  // per slot [T,H0,W0]
};
Predictions detach(const loss::PredictionsVar& p);

}  // namespace selfshot::vistr
