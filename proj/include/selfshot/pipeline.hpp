#pragma once

#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "selfshot/config.hpp"
#include "selfshot/embed.hpp"
#include "selfshot/evalmod.hpp"
#include "selfshot/retrieve.hpp"
#include "selfshot/vistr.hpp"

namespace selfshot::pipeline {

using LogSink = std::function<void(const std::string&)>;

// --- VIS training --------------------------------------------------------------

struct VisTrainResult {
  int steps = 0;
  double probe_loss_initial = 0.0;
  double probe_loss_final = 0.0;
};

// Model parameters + optimizer state in one container, for exact resume.
void save_train_state(const std::string& path, const vistr::VisModel& model,
                      const nn::AdamW& opt);
void load_train_state(const std::string& path, vistr::VisModel& model, nn::AdamW& opt);

// Builds the optimizer with the configured two-rate groups (backbone vs rest).
nn::AdamW make_vis_optimizer(vistr::VisModel& model, const config::TrainSection& tcfg);

// Episodic training on oracle-paired supports. Episodes are resampled每 epoch
// from the seed stream unless `fixed_episodes` is given (then every epoch uses
// exactly that list). Checkpoints land in out_dir when non-empty.
VisTrainResult train_vis(const data::DatasetManifest& m, vistr::VisModel& model, nn::AdamW& opt,
                         const config::Config& cfg, std::uint64_t seed,
                         const std::string& out_dir,
                         const std::optional<std::vector<data::Episode>>& fixed_episodes = {},
                         int start_epoch = 0, int end_epoch = -1,  // -1 = cfg.train.epochs
                         const LogSink& log = nullptr);

// --- inference -------------------------------------------------------------------

struct ResolveContext {
  const data::DatasetManifest* manifest = nullptr;
  std::vector<std::string> pool_ids;                       // support candidates
  const retrieve::EmbeddingIndex* index = nullptr;         // required for selfshot/semi/extra
  const embed::Embedder* embedder = nullptr;               // required with index
};

// Resolves supports for one query according to the mode. Self-shot consults
// only pixels and the index, never labels. `extra` appends retrieval-extended
// supports (the k+(n) setting) and requires the index for any mode.
data::Episode resolve_episode(const ResolveContext& ctx, const std::string& query_id,
                              data::EpisodeMode mode, int k, int extra, int semi_oracle,
                              std::uint64_t seed);

struct InferResult {
  data::Episode episode;          // provenance: resolved supports + mode
  vistr::Predictions predictions;
};

InferResult infer(const ResolveContext& ctx, const vistr::VisModel& model,
                  const std::string& query_id, data::EpisodeMode mode, int k, int extra,
                  int semi_oracle, std::uint64_t seed);

// --- experiment grid ---------------------------------------------------------------

struct ExperimentCell {
  std::string name;
  std::string mode;
  int k = 0;
  int extra = 0;
  int oracle_count = 0;  // semi cells
  int self_count = 0;    // semi cells
  int pool_size = 0;
  double map = -1.0;
  double mean_support_precision = -1.0;
  bool failed = false;
  std::string error;
};

struct ExperimentResult {
  std::vector<ExperimentCell> cells;
  double oracle_minus_random_map = 0.0;
  std::string summary_json;
};

// Grid over modes, k+(n) extensions, the semi-shot (oracle x self) triangle and
// the pool-size sweep. Cell failures are recorded and the grid continues.
// Writes per-cell reports and summary.json under out_dir when non-empty.
ExperimentResult run_experiment(const data::DatasetManifest& m, const config::Config& cfg,
                                const vistr::VisModel& model, const embed::Embedder& embedder,
                                const retrieve::EmbeddingIndex& full_index, std::uint64_t seed,
                                const std::string& out_dir, const LogSink& log = nullptr);

// Deterministic seed-shuffled id prefix used for pools and query subsets.
std::vector<std::string> shuffled_prefix(std::vector<std::string> ids, std::uint64_t seed,
                                         std::string_view stream, int limit);

// Per-token L2 activation norms of the query branch before and after the
// fuser, reshaped to [T, th, tw]; used for qualitative heatmaps.
std::pair<Tensor, Tensor> fuser_activation_maps(const vistr::VisModel& model,
                                                const Tensor& query_clip,
                                                const std::vector<Tensor>& support_clips);

// provenance record written by every CLI run
void write_run_json(const std::string& out_dir, const std::string& command,
                    const std::string& config_hash, std::uint64_t seed,
                    const std::vector<std::pair<std::string, std::string>>& inputs,
                    const std::vector<std::pair<std::string, std::string>>& outputs);

}  // namespace selfshot::pipeline
