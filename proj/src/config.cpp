#include "selfshot/config.hpp"

#include <algorithm>
#include <cctype>
#include <set>
#include <sstream>

namespace selfshot::config {

namespace {

std::string trim(const std::string& s) {
  std::size_t a = s.find_first_not_of(" \t\r");
  if (a == std::string::npos) return "";
  std::size_t b = s.find_last_not_of(" \t\r");
  return s.substr(a, b - a + 1);
}

struct SectionReader {
  std::string section;
  std::map<std::string, std::string> kv;
  std::set<std::string> consumed;

  std::string take(const std::string& key, bool* found) {
    auto it = kv.find(key);
    if (it == kv.end()) {
      *found = false;
      return "";
    }
    consumed.insert(key);
    *found = true;
    return it->second;
  }

  void str(const std::string& key, std::string* out) {
    bool found;
    std::string v = take(key, &found);
    if (found) *out = v;
  }
  void integer(const std::string& key, auto* out) {
    bool found;
    std::string v = take(key, &found);
    if (!found) return;
    try {
      std::size_t pos;
      long long parsed = std::stoll(v, &pos);
      SS_CHECK(pos == v.size(), "");
      *out = static_cast<std::remove_reference_t<decltype(*out)>>(parsed);
    } catch (...) {
      fail_validation("config: [" + section + "] " + key + " must be an integer, got '" + v + "'");
    }
  }
  void real(const std::string& key, double* out) {
    bool found;
    std::string v = take(key, &found);
    if (!found) return;
    try {
      std::size_t pos;
      *out = std::stod(v, &pos);
      SS_CHECK(pos == v.size(), "");
    } catch (...) {
      fail_validation("config: [" + section + "] " + key + " must be a number, got '" + v + "'");
    }
  }
  void boolean(const std::string& key, bool* out) {
    bool found;
    std::string v = take(key, &found);
    if (!found) return;
    if (v == "true" || v == "1" || v == "yes") {
      *out = true;
    } else if (v == "false" || v == "0" || v == "no") {
      *out = false;
    } else {
      fail_validation("config: [" + section + "] " + key + " must be a boolean, got '" + v + "'");
    }
  }
  void int_list(const std::string& key, std::vector<int>* out) {
    bool found;
    std::string v = take(key, &found);
    if (!found) return;
    out->clear();
    std::stringstream ss(v);
    std::string item;
    while (std::getline(ss, item, ',')) {
      item = trim(item);
      if (item.empty()) continue;
      try {
        out->push_back(std::stoi(item));
      } catch (...) {
        fail_validation("config: [" + section + "] " + key + " must be a comma-separated int list");
      }
    }
  }

  void reject_unknown() const {
    for (const auto& [key, value] : kv) {
      if (!consumed.count(key))
        fail_validation("config: unknown key '" + key + "' in section [" + section + "]");
    }
  }
};

}  // namespace

Config parse_config(const std::string& ini_text) {
  std::map<std::string, SectionReader> sections;
  const std::set<std::string> known{"data", "embed", "retrieve", "vis", "train", "eval"};
  std::string current;
  std::istringstream in(ini_text);
  std::string line;
  int line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      SS_CHECK(t.back() == ']', "config: malformed section header at line " + std::to_string(line_no));
      current = trim(t.substr(1, t.size() - 2));
      SS_CHECK(known.count(current) == 1, "config: unknown section [" + current + "]");
      sections[current].section = current;
      continue;
    }
    auto eq = t.find('=');
    SS_CHECK(eq != std::string::npos,
             "config: expected 'key = value' at line " + std::to_string(line_no));
    SS_CHECK(!current.empty(), "config: key before any [section] at line " + std::to_string(line_no));
    std::string key = trim(t.substr(0, eq));
    std::string value = trim(t.substr(eq + 1));
    SS_CHECK(!key.empty(), "config: empty key at line " + std::to_string(line_no));
    auto& sec = sections[current];
    SS_CHECK(sec.kv.emplace(key, value).second,
             "config: duplicate key '" + key + "' in section [" + current + "]");
  }

  Config cfg;
  cfg.config_hash = to_hex(fnv1a64(ini_text));

  if (sections.count("data")) {
    auto& s = sections["data"];
    s.str("root", &cfg.data.root);
    auto& g = cfg.data.gen;
    s.integer("train_classes", &g.num_train_classes);
    s.integer("eval_classes", &g.num_eval_classes);
    s.integer("train_videos_per_class", &g.train_videos_per_class);
    s.integer("eval_videos_per_class", &g.eval_videos_per_class);
    s.real("val_fraction", &g.val_fraction);
    s.integer("height", &g.height);
    s.integer("width", &g.width);
    s.integer("frames_min", &g.frames_min);
    s.integer("frames_max", &g.frames_max);
    s.integer("instances_min", &g.instances_min);
    s.integer("instances_max", &g.instances_max);
    s.integer("classes_per_video", &g.classes_per_video);
    s.integer("scale_min", &g.scale_min);
    s.integer("scale_max", &g.scale_max);
    s.real("speed_min", &g.speed_min);
    s.real("speed_max", &g.speed_max);
    s.real("rotate_prob", &g.rotate_prob);
    s.integer("noise_cells", &g.noise_cells);
    s.reject_unknown();
  }
  if (sections.count("embed")) {
    auto& s = sections["embed"];
    s.str("checkpoint", &cfg.embed.checkpoint);
    auto& e = cfg.embed.cfg;
    s.integer("dim", &e.dim);
    s.integer("base_width", &e.base_width);
    s.integer("crop_frames", &e.crop_frames);
    s.integer("crop_height", &e.crop_h);
    s.integer("crop_width", &e.crop_w);
    s.real("temperature", &e.temperature);
    s.real("ema_momentum", &e.ema_momentum);
    s.integer("queue_capacity", &e.queue_capacity);
    s.integer("crops_per_video", &e.crops_per_video);
    s.integer("batch_videos", &e.batch_videos);
    s.integer("epochs", &e.epochs);
    s.real("lr", &e.lr);
    s.real("weight_decay", &e.weight_decay);
    s.integer("lr_decay_epoch", &e.lr_decay_epoch);
    s.real("lr_decay_factor", &e.lr_decay_factor);
    s.str("loss", &e.loss);
    s.reject_unknown();
  }
  if (sections.count("retrieve")) {
    auto& s = sections["retrieve"];
    s.str("index", &cfg.retrieve.index_path);
    s.str("pool_split", &cfg.retrieve.pool_split);
    s.integer("pool_size", &cfg.retrieve.pool_size);
    s.integer("k", &cfg.retrieve.k);
    s.integer("extra", &cfg.retrieve.extra);
    s.boolean("exclude_self", &cfg.retrieve.exclude_self);
    s.integer("semi_oracle", &cfg.retrieve.semi_oracle);
    s.reject_unknown();
  }
  if (sections.count("vis")) {
    auto& s = sections["vis"];
    s.str("checkpoint", &cfg.vis.checkpoint);
    auto& v = cfg.vis.cfg;
    s.integer("dim", &v.dim);
    s.integer("enc_layers", &v.enc_layers);
    s.integer("fuser_layers", &v.fuser_layers);
    s.integer("dec_layers", &v.dec_layers);
    s.integer("heads", &v.heads);
    s.integer("instances", &v.instances);
    s.integer("frames", &v.frames);
    s.integer("support_frames", &v.support_frames);
    s.integer("input_height", &v.input_h);
    s.integer("input_width", &v.input_w);
    s.integer("mask_height", &v.mask_h);
    s.integer("mask_width", &v.mask_w);
    s.integer("backbone_width", &v.backbone_width);
    s.integer("mask_channels", &v.mask_channels);
    s.integer("ffn_mult", &v.ffn_mult);
    s.reject_unknown();
  }
  if (sections.count("train")) {
    auto& s = sections["train"];
    auto& t = cfg.train;
    s.integer("epochs", &t.epochs);
    s.integer("episodes_per_epoch", &t.episodes_per_epoch);
    s.integer("k_supports", &t.k_supports);
    s.real("lr_transformer", &t.lr_transformer);
    s.real("lr_backbone", &t.lr_backbone);
    s.real("weight_decay", &t.weight_decay);
    s.integer("lr_decay_epoch", &t.lr_decay_epoch);
    s.real("lr_decay_factor", &t.lr_decay_factor);
    s.integer("grad_accum", &t.grad_accum);
    s.real("clip_norm", &t.clip_norm);
    s.real("lambda_mask", &t.weights.lambda_mask);
    s.real("lambda_iou", &t.weights.lambda_iou);
    s.real("lambda_l1", &t.weights.lambda_l1);
    s.real("focal_alpha", &t.weights.focal_alpha);
    s.real("focal_gamma", &t.weights.focal_gamma);
    s.real("dice_eps", &t.weights.dice_eps);
    s.real("random_support_frac", &t.random_support_frac);
    s.integer("probe_episodes", &t.probe_episodes);
    s.reject_unknown();
  }
  if (sections.count("eval")) {
    auto& s = sections["eval"];
    auto& e = cfg.eval;
    s.real("iou_thresh", &e.iou_thresh);
    s.real("score_floor", &e.score_floor);
    s.str("split", &e.split);
    s.str("mode", &e.mode);
    s.integer("max_queries", &e.max_queries);
    s.int_list("pool_sizes", &e.pool_sizes);
    s.int_list("extras", &e.extras);
    s.integer("semi_oracle_max", &e.semi_oracle_max);
    s.integer("semi_self_max", &e.semi_self_max);
    s.integer("semi_max_total", &e.semi_max_total);
    s.reject_unknown();
  }

  // cross-field sanity
  (void)data::split_from_name(cfg.retrieve.pool_split);
  (void)data::split_from_name(cfg.eval.split);
  (void)data::mode_from_name(cfg.eval.mode);
  SS_CHECK(cfg.retrieve.k >= 1, "config: [retrieve] k must be >= 1");
  SS_CHECK(cfg.retrieve.extra >= 0, "config: [retrieve] extra must be >= 0");
  SS_CHECK(cfg.eval.iou_thresh > 0.0 && cfg.eval.iou_thresh <= 1.0,
           "config: [eval] iou_thresh must be in (0,1]");
  SS_CHECK(cfg.train.grad_accum >= 1, "config: [train] grad_accum must be >= 1");
  SS_CHECK(cfg.train.epochs >= 1, "config: [train] epochs must be >= 1");
  SS_CHECK(cfg.train.random_support_frac >= 0.0 && cfg.train.random_support_frac <= 1.0,
           "config: [train] random_support_frac must be in [0,1]");
  return cfg;
}

Config load_config(const std::string& path) { return parse_config(read_text_file(path)); }

}  // namespace selfshot::config
