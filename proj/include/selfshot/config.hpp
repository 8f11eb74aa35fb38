#pragma once

#include <map>
#include <string>
#include <vector>

#include "selfshot/datagen.hpp"
#include "selfshot/embed.hpp"
#include "selfshot/matchloss.hpp"
#include "selfshot/vistr.hpp"

namespace selfshot::config {

// Sections [data] [embed] [retrieve] [vis] [train] [eval]. Every key is
// optional with a documented default; unknown sections or keys are rejected.

struct DataSection {
  std::string root = "data/shapesvid";
  data::DatasetConfig gen;
};

struct EmbedSection {
  std::string checkpoint = "artifacts/embedder.ckpt";
  embed::EmbedConfig cfg;
};

struct RetrieveSection {
  std::string index_path = "artifacts/pool.index";
  std::string pool_split = "test";
  int pool_size = 0;  // 0 = whole split
  int k = 5;
  int extra = 0;
  bool exclude_self = true;
  int semi_oracle = 1;  // oracle supports seeding semi-shot retrieval
};

struct VisSection {
  std::string checkpoint = "artifacts/vis_model.ckpt";
  vistr::VisConfig cfg;
};

struct TrainSection {
  int epochs = 5;
  int episodes_per_epoch = 0;  // 0 = one episode per train video
  int k_supports = 1;
  double lr_transformer = 1e-4;
  double lr_backbone = 1e-5;
  double weight_decay = 1e-4;
  int lr_decay_epoch = 0;  // 0 = auto (7/10 of the schedule)
  double lr_decay_factor = 0.1;
  int grad_accum = 4;
  double clip_norm = 0.1;
  loss::LossWeights weights;
  double random_support_frac = 0.0;
  int probe_episodes = 1;
};

struct EvalSection {
  double iou_thresh = 0.5;
  double score_floor = 0.05;
  std::string split = "test";
  std::string mode = "selfshot";
  int max_queries = 0;  // 0 = all split videos
  std::vector<int> pool_sizes{100, 300, 1000};
  std::vector<int> extras{1, 3, 5};
  int semi_oracle_max = 1;
  int semi_self_max = 4;
  int semi_max_total = 5;
};

struct Config {
  DataSection data;
  EmbedSection embed;
  RetrieveSection retrieve;
  VisSection vis;
  TrainSection train;
  EvalSection eval;
  std::string config_hash;  // fingerprint of the raw config text
};

Config parse_config(const std::string& ini_text);
Config load_config(const std::string& path);

}  // namespace selfshot::config
