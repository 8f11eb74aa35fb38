#include "selfshot/vistr.hpp"

#include <json.hpp>

#include <cmath>

using ordered_json = nlohmann::ordered_json;

namespace selfshot::vistr {

void VisConfig::validate() const {
  SS_CHECK(dim % 6 == 0, "model width must be divisible by 6 for the positional encoding");
  SS_CHECK(dim >= 12, "model width too small");
  SS_CHECK(heads >= 1 && dim % heads == 0, "heads must divide the model width");
  SS_CHECK(enc_layers >= 0 && fuser_layers >= 0 && dec_layers >= 0, "negative layer count");
  SS_CHECK(instances >= 1, "need at least one instance slot");
  SS_CHECK(frames >= 1 && support_frames >= 1, "clip lengths must be >= 1");
  SS_CHECK(input_h % kStride == 0 && input_w % kStride == 0,
           "input resolution must be divisible by the backbone stride");
  SS_CHECK(mask_h % token_h() == 0 && mask_w % token_w() == 0,
           "mask resolution must be an integer multiple of the token grid");
  SS_CHECK(mask_h / token_h() == mask_w / token_w(), "mask upsampling must be isotropic");
  SS_CHECK(backbone_width >= 4 && mask_channels >= 2 && ffn_mult >= 1, "bad width settings");
}

std::string VisConfig::arch_json() const {
  ordered_json j;
  j["kind"] = "vis_transformer";
  j["dim"] = dim;
  j["enc_layers"] = enc_layers;
  j["fuser_layers"] = fuser_layers;
  j["dec_layers"] = dec_layers;
  j["heads"] = heads;
  j["instances"] = instances;
  j["frames"] = frames;
  j["support_frames"] = support_frames;
  j["input"] = {input_h, input_w};
  j["mask"] = {mask_h, mask_w};
  j["backbone_width"] = backbone_width;
  j["mask_channels"] = mask_channels;
  j["ffn_mult"] = ffn_mult;
  return j.dump();
}

VisConfig VisConfig::from_arch_json(const std::string& json_text) {
  ordered_json j = ordered_json::parse(json_text);
  SS_CHECK(j.value("kind", "") == "vis_transformer", "not a VIS model checkpoint");
  VisConfig c;
  c.dim = j.at("dim").get<std::int64_t>();
  c.enc_layers = j.at("enc_layers").get<std::int64_t>();
  c.fuser_layers = j.at("fuser_layers").get<std::int64_t>();
  c.dec_layers = j.at("dec_layers").get<std::int64_t>();
  c.heads = j.at("heads").get<std::int64_t>();
  c.instances = j.at("instances").get<std::int64_t>();
  c.frames = j.at("frames").get<std::int64_t>();
  c.support_frames = j.at("support_frames").get<std::int64_t>();
  auto in = j.at("input").get<std::vector<std::int64_t>>();
  auto mk = j.at("mask").get<std::vector<std::int64_t>>();
  SS_CHECK(in.size() == 2 && mk.size() == 2, "bad geometry descriptor");
  c.input_h = in[0];
  c.input_w = in[1];
  c.mask_h = mk[0];
  c.mask_w = mk[1];
  c.backbone_width = j.at("backbone_width").get<std::int64_t>();
  c.mask_channels = j.at("mask_channels").get<std::int64_t>();
  c.ffn_mult = j.value("ffn_mult", std::int64_t{2});
  c.validate();
  return c;
}

VisConfig VisConfig::paper_scale() {
  VisConfig c;
  c.dim = 288;
  c.enc_layers = 6;
  c.fuser_layers = 3;
  c.dec_layers = 6;
  c.heads = 8;
  c.instances = 10;
  c.frames = 32;
  c.support_frames = 24;
  c.input_h = 280;
  c.input_w = 320;
  c.mask_h = 35;
  c.mask_w = 40;
  c.backbone_width = 64;
  c.mask_channels = 16;
  c.ffn_mult = 4;
  return c;
}

Tensor positional_encoding(std::int64_t T, std::int64_t W, std::int64_t H, std::int64_t d) {
  SS_CHECK(d % 6 == 0, "positional encoding width must be divisible by 6");
  SS_CHECK(T >= 1 && W >= 1 && H >= 1, "positional encoding needs a non-empty grid");
  std::int64_t axis_ch = d / 3;
  std::int64_t pairs = d / 6;
  std::vector<double> omega(static_cast<std::size_t>(pairs));
  for (std::int64_t i = 0; i < pairs; ++i)
    omega[static_cast<std::size_t>(i)] =
        std::pow(10000.0, -static_cast<double>(i) / static_cast<double>(pairs));
  Tensor pe({T * H * W, d});
  std::int64_t row = 0;
  for (std::int64_t t = 0; t < T; ++t) {
    for (std::int64_t y = 0; y < H; ++y) {
      for (std::int64_t x = 0; x < W; ++x) {
        const double pos[3] = {static_cast<double>(t), static_cast<double>(x),
                               static_cast<double>(y)};
        for (int axis = 0; axis < 3; ++axis) {
          for (std::int64_t i = 0; i < pairs; ++i) {
            double arg = pos[axis] * omega[static_cast<std::size_t>(i)];
            pe.at2(row, axis * axis_ch + 2 * i) = std::sin(arg);
            pe.at2(row, axis * axis_ch + 2 * i + 1) = std::cos(arg);
          }
        }
        ++row;
      }
    }
  }
  return pe;
}

VisModel::VisModel(const VisConfig& cfg, std::uint64_t seed) : cfg_(cfg) {
  cfg_.validate();
  SeedStream rng(seed, "vis-init");
  nn::Init init{&rng};
  std::int64_t d = cfg_.dim;
  std::int64_t w = cfg_.backbone_width;
  b1_ = nn::Conv2d(ps_, "backbone.conv1", 3, w, 3, 2, 1, init);
  bg1_ = nn::GroupNorm(ps_, "backbone.norm1", w, std::min<std::int64_t>(8, w));
  b2_ = nn::Conv2d(ps_, "backbone.conv2", w, 2 * w, 3, 2, 1, init);
  bg2_ = nn::GroupNorm(ps_, "backbone.norm2", 2 * w, std::min<std::int64_t>(8, 2 * w));
  b3_ = nn::Conv2d(ps_, "backbone.conv3", 2 * w, 4 * w, 3, 2, 1, init);
  bg3_ = nn::GroupNorm(ps_, "backbone.norm3", 4 * w, std::min<std::int64_t>(8, 4 * w));
  bproj_ = nn::Conv2d(ps_, "backbone.proj", 4 * w, d, 1, 1, 0, init);

  std::int64_t hidden = d * cfg_.ffn_mult;
  for (std::int64_t l = 0; l < cfg_.enc_layers; ++l) {
    std::string p = "encoder." + std::to_string(l);
    encoder_.push_back(EncoderLayer{
        nn::MultiHeadAttention(ps_, p + ".attn", d, cfg_.heads, init),
        nn::LayerNorm(ps_, p + ".ln1", d), nn::LayerNorm(ps_, p + ".ln2", d),
        nn::FeedForward(ps_, p + ".ffn", d, hidden, init)});
  }
  for (std::int64_t l = 0; l < cfg_.fuser_layers; ++l) {
    std::string p = "fuser." + std::to_string(l);
    fuser_.push_back(FuserLayer{
        nn::MultiHeadAttention(ps_, p + ".enh_qs", d, cfg_.heads, init),
        nn::MultiHeadAttention(ps_, p + ".enh_sq", d, cfg_.heads, init),
        nn::MultiHeadAttention(ps_, p + ".fuse", d, cfg_.heads, init),
        nn::LayerNorm(ps_, p + ".ln_qs", d), nn::LayerNorm(ps_, p + ".ln_sq", d),
        nn::LayerNorm(ps_, p + ".ln_fuse", d), nn::LayerNorm(ps_, p + ".ln_out", d),
        nn::FeedForward(ps_, p + ".ffn", d, hidden, init)});
  }
  for (std::int64_t l = 0; l < cfg_.dec_layers; ++l) {
    std::string p = "decoder." + std::to_string(l);
    decoder_.push_back(DecoderLayer{
        nn::MultiHeadAttention(ps_, p + ".self", d, cfg_.heads, init),
        nn::MultiHeadAttention(ps_, p + ".cross", d, cfg_.heads, init),
        nn::LayerNorm(ps_, p + ".ln1", d), nn::LayerNorm(ps_, p + ".ln2", d),
        nn::LayerNorm(ps_, p + ".ln3", d),
        nn::FeedForward(ps_, p + ".ffn", d, hidden, init)});
  }
  query_embed_ = ps_.add("decoder.query_embed", init.normal({cfg_.num_queries(), d}, 1.0));

  seg_q_ = nn::Linear(ps_, "segmenter.attn_q", d, d, init);
  seg_k_ = nn::Linear(ps_, "segmenter.attn_k", d, d, init);
  std::int64_t a = cfg_.mask_channels;
  mask_conv_ = nn::Conv2d(ps_, "segmenter.mask_conv", 2 * d + 1, a, 3, 1, 1, init);
  mask_gn_ = nn::GroupNorm(ps_, "segmenter.mask_norm", a, std::min<std::int64_t>(4, a));
  seg3d_1_ = nn::Conv3d(ps_, "segmenter.conv3d_1", a, a, 3, 3, 3, 1, 1, 1, 1, 1, 1, init);
  seg_gn1_ = nn::GroupNorm(ps_, "segmenter.norm3d_1", a, std::min<std::int64_t>(4, a));
  seg3d_2_ = nn::Conv3d(ps_, "segmenter.conv3d_2", a, a, 3, 3, 3, 1, 1, 1, 1, 1, 1, init);
  seg_gn2_ = nn::GroupNorm(ps_, "segmenter.norm3d_2", a, std::min<std::int64_t>(4, a));
  seg3d_3_ = nn::Conv3d(ps_, "segmenter.conv3d_3", a, 1, 3, 3, 3, 1, 1, 1, 1, 1, 1, init);
  box_fc1_ = nn::Linear(ps_, "heads.box1", d, d, init);
  box_fc2_ = nn::Linear(ps_, "heads.box2", d, d, init);
  box_fc3_ = nn::Linear(ps_, "heads.box3", d, 4, init);
  cls_head_ = nn::Linear(ps_, "heads.cls", d, 2, init);

  query_pe_ = positional_encoding(cfg_.frames, cfg_.token_w(), cfg_.token_h(), d);
}

Var VisModel::extract_features(const Tensor& clip) const {
  SS_CHECK(clip.rank() == 4 && clip.dim(1) == 3, "clip must be [T,3,H,W]");
  SS_CHECK(clip.dim(2) == cfg_.input_h && clip.dim(3) == cfg_.input_w,
           "clip must be resized to the configured resolution");
  Var x = ad::constant(clip);
  Var h = ad::relu(bg1_(b1_(x)));
  h = ad::relu(bg2_(b2_(h)));
  h = ad::relu(bg3_(b3_(h)));
  h = bproj_(h);  // [T, dim, th, tw]
  SS_REQUIRE(h->val.all_finite(), "non-finite activations in the backbone");
  return h;
}

Var VisModel::tokens_from_features(const Var& feat) const {
  std::int64_t T = feat->val.dim(0);
  std::int64_t d = feat->val.dim(1);
  std::int64_t th = feat->val.dim(2), tw = feat->val.dim(3);
  return ad::reshape(ad::permute(feat, {0, 2, 3, 1}), {T * th * tw, d});
}

Var VisModel::encode_tokens(const Var& tokens, const Tensor& pe) const {
  SS_CHECK(tokens->val.rank() == 2 && tokens->val.dim(1) == cfg_.dim,
           "tokens must be [tokens, dim]");
  SS_CHECK(pe.same_shape(tokens->val), "positional encoding shape mismatch");
  Var x = tokens;
  Var pev = ad::constant(pe);
  for (const auto& layer : encoder_) {
    Var qk = ad::add(x, pev);  // PE re-added at every layer's attention input
    x = layer.ln1(ad::add(x, layer.attn(qk, qk, x)));
    x = layer.ln2(ad::add(x, layer.ffn(x)));
  }
  return x;
}

Var VisModel::fuse(const Var& query_tokens, const Var& support_tokens) const {
  SS_CHECK(query_tokens->val.dim(1) == cfg_.dim && support_tokens->val.dim(1) == cfg_.dim,
           "fuser inputs must have the model width");
  Var q = query_tokens;
  Var s = support_tokens;
  for (const auto& layer : fuser_) {
    // both branches enhanced simultaneously from each other
    Var f_qs = layer.ln_qs(ad::add(q, layer.enhance_qs(q, s, s)));
    Var f_sq = layer.ln_sq(ad::add(s, layer.enhance_sq(s, q, q)));
    Var fused = layer.ln_fuse(ad::add(f_qs, layer.fuse_attn(f_qs, f_sq, f_sq)));
    q = layer.ln_out(ad::add(fused, layer.ffn(fused)));
    s = f_sq;
  }
  return q;
}

Var VisModel::decode(const Var& fused) const {
  std::int64_t N = cfg_.num_queries();
  Var tgt = ad::constant(Tensor({N, cfg_.dim}));
  for (const auto& layer : decoder_) {
    Var qk = ad::add(tgt, query_embed_);
    tgt = layer.ln1(ad::add(tgt, layer.self_attn(qk, qk, tgt)));
    tgt = layer.ln2(ad::add(tgt, layer.cross_attn(ad::add(tgt, query_embed_), fused, fused)));
    tgt = layer.ln3(ad::add(tgt, layer.ffn(tgt)));
  }
  return tgt;  // column j: slot j / T, frame j % T
}

loss::PredictionsVar VisModel::segment(const Var& instance_features, const Var& fused,
                                       const Var& query_tokens) const {
  std::int64_t n = cfg_.instances, T = cfg_.frames, d = cfg_.dim;
  std::int64_t th = cfg_.token_h(), tw = cfg_.token_w();
  std::int64_t hw = th * tw;
  std::int64_t N = n * T;
  SS_CHECK(instance_features->val.dim(0) == N,
           "instance feature count does not match instances x frames");
  SS_CHECK(fused->val.dim(0) == T * hw && query_tokens->val.dim(0) == T * hw,
           "token count mismatch in segmenter");

  Var q_proj = seg_q_(instance_features);  // [N, d]
  Var k_proj = seg_k_(fused);              // [T*hw, d]
  double scl = 1.0 / std::sqrt(static_cast<double>(d));

  // per frame: attention of that frame's n instance features over the frame's
  // tokens -> [n, hw] maps
  std::vector<Var> frame_inputs;  // each [n, 2d+1, th, tw]
  Var q3 = ad::reshape(q_proj, {n, T, d});
  for (std::int64_t t = 0; t < T; ++t) {
    Var qt = ad::reshape(ad::slice(q3, 1, t, 1), {n, d});
    Var kt = ad::slice(k_proj, 0, t * hw, hw);                         // [hw, d]
    Var scores = ad::scale(ad::matmul(qt, ad::permute(kt, {1, 0})), scl);
    Var amap = ad::softmax_lastdim(scores);                            // [n, hw]
    Var amap_sp = ad::reshape(amap, {n, 1, th, tw});
    // encoded query feature and fused feature of frame t, shared by all slots
    Var eq_t = ad::reshape(ad::permute(ad::slice(query_tokens, 0, t * hw, hw), {1, 0}),
                           {1, d, th, tw});
    Var fu_t = ad::reshape(ad::permute(ad::slice(fused, 0, t * hw, hw), {1, 0}), {1, d, th, tw});
    std::vector<Var> eq_rep(static_cast<std::size_t>(n), eq_t);
    std::vector<Var> fu_rep(static_cast<std::size_t>(n), fu_t);
    Var eq_b = n == 1 ? eq_t : ad::concat(eq_rep, 0);  // [n, d, th, tw]
    Var fu_b = n == 1 ? fu_t : ad::concat(fu_rep, 0);
    frame_inputs.push_back(ad::concat({amap_sp, eq_b, fu_b}, 1));      // [n, 2d+1, th, tw]
  }
  Var seg_in = ad::concat(frame_inputs, 0);  // [T*n, 2d+1, th, tw] (frame-major)
  Var g = ad::relu(mask_gn_(mask_conv_(seg_in)));  // [T*n, a, th, tw]
  std::int64_t up = cfg_.mask_h / th;
  g = ad::upsample_nearest2d(g, up);  // [T*n, a, H0, W0]

  // regroup frame-major [T*n, ...] into per-slot stacks [n, a, T, H0, W0]
  std::int64_t a = cfg_.mask_channels;
  Var g5 = ad::reshape(g, {T, n, a, cfg_.mask_h, cfg_.mask_w});
  Var gi = ad::permute(g5, {1, 2, 0, 3, 4});  // [n, a, T, H0, W0]
  Var m = ad::relu(seg_gn1_(seg3d_1_(gi)));
  m = ad::relu(seg_gn2_(seg3d_2_(m)));
  m = seg3d_3_(m);  // [n, 1, T, H0, W0]

  // box and class heads on decoder features, per slot per frame
  Var box = ad::sigmoid(box_fc3_(ad::relu(box_fc2_(ad::relu(box_fc1_(instance_features))))));
  Var cls = ad::softmax_lastdim(cls_head_(instance_features));  // [N, 2]; col 0 = foreground
  Var box3 = ad::reshape(box, {n, T, 4});
  Var cls3 = ad::reshape(cls, {n, T, 2});

  loss::PredictionsVar out;
  for (std::int64_t i = 0; i < n; ++i) {
    Var prob_seq = ad::reshape(ad::slice(ad::reshape(ad::slice(cls3, 0, i, 1), {T, 2}), 1, 0, 1),
                               {T});
    out.prob_fg.push_back(ad::mean_all(prob_seq));  // foreground prob = frame mean
    out.box_seq.push_back(ad::reshape(ad::slice(box3, 0, i, 1), {T, 4}));
    out.mask_logits.push_back(
        ad::reshape(ad::slice(m, 0, i, 1), {T, cfg_.mask_h, cfg_.mask_w}));
  }
  return out;
}

loss::PredictionsVar VisModel::forward(const Tensor& query_clip,
                                       const std::vector<Tensor>& support_clips) const {
  SS_CHECK(!support_clips.empty(),
           "forward requires at least one support video; resolve supports first");
  SS_CHECK(query_clip.dim(0) == cfg_.frames, "query clip length must match the configured T");
  Var fq = extract_features(query_clip);
  Var eq_tokens = tokens_from_features(fq);
  Var eq = encode_tokens(eq_tokens, query_pe_);

  // support features are concatenated along time; temporal positions restart
  // per support video so identical clips receive identical encodings
  std::vector<Var> support_tokens;
  std::vector<Tensor> support_pes;
  std::int64_t total_rows = 0;
  for (const auto& s : support_clips) {
    Var fs = extract_features(s);
    support_tokens.push_back(tokens_from_features(fs));
    support_pes.push_back(
        positional_encoding(s.dim(0), cfg_.token_w(), cfg_.token_h(), cfg_.dim));
    total_rows += support_pes.back().dim(0);
  }
  Var es_tokens = support_tokens.size() == 1 ? support_tokens[0]
                                             : ad::concat(support_tokens, 0);
  Tensor pe_s({total_rows, cfg_.dim});
  std::int64_t row = 0;
  for (const auto& pe : support_pes) {
    std::copy(pe.data(), pe.data() + pe.numel(), pe_s.data() + row * cfg_.dim);
    row += pe.dim(0);
  }
  Var es = encode_tokens(es_tokens, pe_s);

  Var fused = fuse(eq, es);
  Var inst = decode(fused);
  return segment(inst, fused, eq);
}

void VisModel::save(const std::string& path) const {
  std::vector<std::pair<std::string, Tensor>> tensors;
  for (const auto& [name, v] : ps_.entries()) tensors.emplace_back(name, v->val);
  save_checkpoint(path, cfg_.arch_json(), tensors);
}

std::unique_ptr<VisModel> VisModel::load(const std::string& path) {
  Checkpoint ck = load_checkpoint(path);
  VisConfig cfg = VisConfig::from_arch_json(ck.arch_json);
  auto model = std::make_unique<VisModel>(cfg, 0);
  auto tensors = ck.tensor_map();
  for (auto& [name, v] : model->ps_.entries()) {
    auto it = tensors.find(name);
    SS_CHECK(it != tensors.end(), "checkpoint missing tensor: " + name);
    SS_CHECK(it->second.same_shape(v->val), "checkpoint shape mismatch: " + name);
    v->val.vec() = it->second.vec();
  }
  return model;
}

Predictions detach(const loss::PredictionsVar& p) {
  Predictions out;
  for (std::size_t i = 0; i < p.prob_fg.size(); ++i) {
    out.prob.push_back(ad::scalar_value(p.prob_fg[i]));
    out.boxes.push_back(p.box_seq[i]->val);
    out.mask_logits.push_back(p.mask_logits[i]->val);
  }
  return out;
}

}  // namespace selfshot::vistr
