#include "selfshot/pipeline.hpp"

#include <json.hpp>

#include <algorithm>
#include <chrono>
#include <cmath>
#include <set>

using ordered_json = nlohmann::ordered_json;

namespace selfshot::pipeline {

void save_train_state(const std::string& path, const vistr::VisModel& model,
                      const nn::AdamW& opt) {
  std::vector<std::pair<std::string, Tensor>> tensors;
  for (const auto& [name, v] : model.params().entries()) tensors.emplace_back(name, v->val);
  for (auto& [name, t] : opt.state_tensors()) tensors.emplace_back(name, t);
  ordered_json j = ordered_json::parse(model.config().arch_json());
  j["kind"] = "vis_train_state";
  save_checkpoint(path, j.dump(), tensors);
}

void load_train_state(const std::string& path, vistr::VisModel& model, nn::AdamW& opt) {
  Checkpoint ck = load_checkpoint(path);
  ordered_json j = ordered_json::parse(ck.arch_json);
  SS_CHECK(j.value("kind", "") == "vis_train_state", "not a training-state checkpoint: " + path);
  auto tensors = ck.tensor_map();
  for (auto& [name, v] : model.params().entries()) {
    auto it = tensors.find(name);
    SS_CHECK(it != tensors.end(), "training state missing tensor: " + name);
    SS_CHECK(it->second.same_shape(v->val), "training state shape mismatch: " + name);
    v->val.vec() = it->second.vec();
  }
  std::map<std::string, Tensor> opt_state;
  for (auto& [name, t] : tensors)
    if (name.rfind("adam.", 0) == 0) opt_state.emplace(name, t);
  opt.load_state(opt_state);
}

nn::AdamW make_vis_optimizer(vistr::VisModel& model, const config::TrainSection& tcfg) {
  return nn::AdamW(model.params(),
                   {{"", tcfg.lr_transformer}, {"backbone.", tcfg.lr_backbone}},
                   tcfg.weight_decay);
}

namespace {

// oracle episodes over the train split, shuffled and truncated per epoch;
// optionally a fraction of them get random supports instead
std::vector<data::Episode> sample_epoch_episodes(const data::DatasetManifest& m,
                                                 const config::Config& cfg, std::uint64_t seed,
                                                 int epoch) {
  std::uint64_t epoch_seed = fnv1a64("train-episodes", seed) + static_cast<std::uint64_t>(epoch);
  auto episodes =
      data::make_episodes(m, cfg.train.k_supports, data::EpisodeMode::Oracle, data::Split::Train,
                          epoch_seed);
  SeedStream order_rng(epoch_seed, "episode-order");
  order_rng.shuffle(episodes);
  if (cfg.train.episodes_per_epoch > 0 &&
      static_cast<int>(episodes.size()) > cfg.train.episodes_per_epoch)
    episodes.resize(static_cast<std::size_t>(cfg.train.episodes_per_epoch));
  if (cfg.train.random_support_frac > 0.0) {
    auto random_eps = data::make_episodes(m, cfg.train.k_supports, data::EpisodeMode::Random,
                                          data::Split::Train, epoch_seed);
    std::map<std::string, const data::Episode*> by_query;
    for (const auto& ep : random_eps) by_query[ep.query_id] = &ep;
    SeedStream pick_rng(epoch_seed, "random-support");
    for (auto& ep : episodes) {
      if (pick_rng.next_double() < cfg.train.random_support_frac) {
        ep.support_ids = by_query.at(ep.query_id)->support_ids;
      }
    }
  }
  return episodes;
}

double episode_loss_value(const data::DatasetManifest& m, const vistr::VisModel& model,
                          const data::Episode& ep, const config::Config& cfg) {
  eval::EpisodeBatch batch = eval::load_episode(m, ep, model.config(), false, 0);
  auto pred = model.forward(batch.query_clip, batch.support_clips);
  auto assign = loss::hungarian(loss::match_cost(batch.gt_sequences, pred, cfg.train.weights));
  return ad::scalar_value(loss::training_loss(batch.gt_sequences, pred, assign,
                                              cfg.train.weights).total);
}

}  // namespace

VisTrainResult train_vis(const data::DatasetManifest& m, vistr::VisModel& model, nn::AdamW& opt,
                         const config::Config& cfg, std::uint64_t seed, const std::string& out_dir,
                         const std::optional<std::vector<data::Episode>>& fixed_episodes,
                         int start_epoch, int end_epoch, const LogSink& log) {
  const auto& tcfg = cfg.train;
  if (end_epoch < 0) end_epoch = tcfg.epochs;
  SS_CHECK(start_epoch >= 0 && start_epoch <= end_epoch, "bad epoch range");
  int decay_epoch = tcfg.lr_decay_epoch > 0 ? tcfg.lr_decay_epoch
                                            : std::max(1, tcfg.epochs * 7 / 10);
  if (!out_dir.empty()) ensure_dir(out_dir);

  // fixed probe episodes from the epoch-0 stream
  std::vector<data::Episode> probe =
      fixed_episodes ? *fixed_episodes : sample_epoch_episodes(m, cfg, seed, 0);
  if (static_cast<int>(probe.size()) > tcfg.probe_episodes)
    probe.resize(static_cast<std::size_t>(tcfg.probe_episodes));
  auto probe_loss = [&]() {
    double acc = 0.0;
    for (const auto& ep : probe) acc += episode_loss_value(m, model, ep, cfg);
    return probe.empty() ? 0.0 : acc / static_cast<double>(probe.size());
  };

  VisTrainResult result;
  result.probe_loss_initial = probe_loss();

  int step = opt.step_count();
  int accum = 0;
  opt.zero_grad();
  for (int epoch = start_epoch; epoch < end_epoch; ++epoch) {
    double lr_scale = (epoch >= decay_epoch) ? tcfg.lr_decay_factor : 1.0;
    std::vector<data::Episode> episodes =
        fixed_episodes ? *fixed_episodes : sample_epoch_episodes(m, cfg, seed, epoch);
    for (std::size_t ei = 0; ei < episodes.size(); ++ei) {
      std::uint64_t cut_seed =
          fnv1a64("train-cut", seed) + static_cast<std::uint64_t>(epoch) * 1000003ull +
          static_cast<std::uint64_t>(ei);
      eval::EpisodeBatch batch = eval::load_episode(m, episodes[ei], model.config(), true, cut_seed);
      auto pred = model.forward(batch.query_clip, batch.support_clips);
      auto assign = loss::hungarian(loss::match_cost(batch.gt_sequences, pred, tcfg.weights));
      auto lb = loss::training_loss(batch.gt_sequences, pred, assign, tcfg.weights);
      double loss_val = ad::scalar_value(lb.total);
      SS_REQUIRE(std::isfinite(loss_val),
                 "vis training diverged (non-finite loss) at step " + std::to_string(step));
      ad::backward(ad::scale(lb.total, 1.0 / static_cast<double>(tcfg.grad_accum)));
      if (++accum >= tcfg.grad_accum) {
        if (tcfg.clip_norm > 0) opt.clip_grad_norm(tcfg.clip_norm);
        opt.step(lr_scale);
        opt.zero_grad();
        accum = 0;
      }
      if (log) {
        ordered_json j;
        j["step"] = step;
        j["epoch"] = epoch;
        j["loss"] = loss_val;
        j["cls"] = ad::scalar_value(lb.cls);
        j["box"] = ad::scalar_value(lb.box);
        j["mask"] = ad::scalar_value(lb.mask);
        j["lr"] = tcfg.lr_transformer * lr_scale;
        log(j.dump());
      }
      ++step;
    }
    if (accum > 0) {  // flush the tail of the epoch
      if (tcfg.clip_norm > 0) opt.clip_grad_norm(tcfg.clip_norm);
      opt.step(lr_scale);
      opt.zero_grad();
      accum = 0;
    }
    if (!out_dir.empty()) {
      model.save(out_dir + "/model_epoch" + std::to_string(epoch + 1) + ".ckpt");
      save_train_state(out_dir + "/train_state.ckpt", model, opt);
    }
  }
  result.steps = step;
  result.probe_loss_final = probe_loss();
  if (!out_dir.empty()) model.save(out_dir + "/model.ckpt");
  return result;
}

std::vector<std::string> shuffled_prefix(std::vector<std::string> ids, std::uint64_t seed,
                                         std::string_view stream, int limit) {
  SeedStream rng(seed, stream);
  rng.shuffle(ids);
  if (limit > 0 && static_cast<int>(ids.size()) > limit)
    ids.resize(static_cast<std::size_t>(limit));
  return ids;
}

data::Episode resolve_episode(const ResolveContext& ctx, const std::string& query_id,
                              data::EpisodeMode mode, int k, int extra, int semi_oracle,
                              std::uint64_t seed) {
  SS_CHECK(ctx.manifest != nullptr, "resolve_episode: manifest required");
  const auto& m = *ctx.manifest;
  SS_CHECK(m.has_video(query_id), "unknown query video: " + query_id);
  SS_CHECK(k >= 1, "k must be >= 1");

  auto need_index = [&]() {
    SS_CHECK(ctx.index != nullptr && ctx.embedder != nullptr,
             "mode '" + data::mode_name(mode) +
                 "' (or a support extension) requires an embedding index and encoder");
  };

  data::Episode ep;
  ep.query_id = query_id;
  ep.k = k;
  ep.mode = mode;
  ep.split = m.video(query_id).split;

  Tensor query_emb;
  auto ensure_query_emb = [&]() {
    if (query_emb.numel() == 0)
      query_emb = ctx.embedder->encode(data::load_video(m, query_id));
  };

  switch (mode) {
    case data::EpisodeMode::SelfShot: {
      need_index();
      ensure_query_emb();
      ep = retrieve::self_shot(query_id, query_emb, *ctx.index, k);
      ep.split = m.video(query_id).split;
      break;
    }
    case data::EpisodeMode::Random: {
      std::vector<std::string> candidates;
      for (const auto& id : ctx.pool_ids)
        if (id != query_id) candidates.push_back(id);
      SS_CHECK(static_cast<int>(candidates.size()) >= k, "support pool too small");
      SeedStream rng(seed, "resolve.random." + query_id);
      rng.shuffle(candidates);
      ep.support_ids.assign(candidates.begin(), candidates.begin() + k);
      break;
    }
    case data::EpisodeMode::Semi: {
      SS_CHECK(semi_oracle >= 0 && semi_oracle <= k, "semi-shot oracle count must be in [0,k]");
      // oracle seeds first, then self-shot retrieval keyed by query + seeds
      data::Episode oracle_part;
      oracle_part.query_id = query_id;
      oracle_part.mode = data::EpisodeMode::Semi;
      oracle_part.split = ep.split;
      oracle_part.k = k;
      if (semi_oracle > 0) {
        const auto& qcls = m.video(query_id).class_set;
        std::vector<std::string> candidates;
        for (const auto& id : ctx.pool_ids) {
          if (id == query_id) continue;
          const auto& scls = m.video(id).class_set;
          for (int c : qcls)
            if (std::find(scls.begin(), scls.end(), c) != scls.end()) {
              candidates.push_back(id);
              break;
            }
        }
        SS_CHECK(static_cast<int>(candidates.size()) >= semi_oracle,
                 "not enough same-class candidates for semi-shot seeding of " + query_id);
        SeedStream rng(seed, "resolve.semi." + query_id);
        rng.shuffle(candidates);
        oracle_part.support_ids.assign(candidates.begin(), candidates.begin() + semi_oracle);
      }
      int k_self = k - semi_oracle;
      if (k_self > 0) {
        need_index();
        ensure_query_emb();
        ep = retrieve::semi_shot(oracle_part, query_emb, *ctx.index, k_self);
      } else {
        ep = oracle_part;
      }
      ep.k = k;
      break;
    }
    case data::EpisodeMode::Oracle:
    case data::EpisodeMode::ImageSupport: {
      const auto& qcls = m.video(query_id).class_set;
      std::vector<std::string> candidates;
      for (const auto& id : ctx.pool_ids) {
        if (id == query_id) continue;
        const auto& scls = m.video(id).class_set;
        for (int c : qcls)
          if (std::find(scls.begin(), scls.end(), c) != scls.end()) {
            candidates.push_back(id);
            break;
          }
      }
      if (static_cast<int>(candidates.size()) < k) {
        std::string names;
        for (int c : qcls) {
          if (!names.empty()) names += ",";
          names += data::class_spec(c).name;
        }
        fail_validation("oracle pairing: query " + query_id + " (classes " + names + ") has only " +
                        std::to_string(candidates.size()) + " same-class candidates, need " +
                        std::to_string(k));
      }
      SeedStream rng(seed, "resolve.oracle." + query_id);
      rng.shuffle(candidates);
      ep.support_ids.assign(candidates.begin(), candidates.begin() + k);
      break;
    }
  }

  if (extra > 0) {
    need_index();
    ensure_query_emb();
    ep = retrieve::extend_supports(ep, query_emb, *ctx.index, extra);
  }
  return ep;
}

InferResult infer(const ResolveContext& ctx, const vistr::VisModel& model,
                  const std::string& query_id, data::EpisodeMode mode, int k, int extra,
                  int semi_oracle, std::uint64_t seed) {
  InferResult out;
  out.episode = resolve_episode(ctx, query_id, mode, k, extra, semi_oracle, seed);
  eval::EpisodeBatch batch = eval::load_episode(*ctx.manifest, out.episode, model.config(),
                                                /*train_cut=*/false, /*cut_seed=*/0);
  out.predictions = vistr::detach(model.forward(batch.query_clip, batch.support_clips));
  return out;
}

namespace {

eval::EvalReport evaluate_cell(const data::DatasetManifest& m, const config::Config& cfg,
                               const vistr::VisModel& model, const ResolveContext& ctx,
                               const std::vector<std::string>& queries, data::EpisodeMode mode,
                               int k, int extra, int semi_oracle, std::uint64_t seed) {
  std::vector<data::Episode> episodes;
  for (const auto& qid : queries)
    episodes.push_back(resolve_episode(ctx, qid, mode, k, extra, semi_oracle, seed));
  return eval::evaluate_run(m, episodes, model, cfg.eval.iou_thresh, cfg.eval.score_floor);
}

}  // namespace

ExperimentResult run_experiment(const data::DatasetManifest& m, const config::Config& cfg,
                                const vistr::VisModel& model, const embed::Embedder& embedder,
                                const retrieve::EmbeddingIndex& full_index, std::uint64_t seed,
                                const std::string& out_dir, const LogSink& log) {
  if (!out_dir.empty()) ensure_dir(out_dir);
  data::Split eval_split = data::split_from_name(cfg.eval.split);
  std::vector<std::string> queries =
      shuffled_prefix(m.split_ids(eval_split), seed, "experiment-queries", cfg.eval.max_queries);
  SS_CHECK(!queries.empty(), "experiment: no queries in split " + cfg.eval.split);

  data::Split pool_split = data::split_from_name(cfg.retrieve.pool_split);
  std::vector<std::string> pool_ids =
      shuffled_prefix(m.split_ids(pool_split), seed, "experiment-pool", cfg.retrieve.pool_size);

  ResolveContext ctx;
  ctx.manifest = &m;
  ctx.pool_ids = pool_ids;
  ctx.index = &full_index;
  ctx.embedder = &embedder;

  ExperimentResult result;
  int k = cfg.retrieve.k;

  auto run_cell = [&](const std::string& name, data::EpisodeMode mode, int cell_k, int extra,
                      int oracle_count, int self_count, const ResolveContext& cell_ctx,
                      int pool_size) {
    ExperimentCell cell;
    cell.name = name;
    cell.mode = data::mode_name(mode);
    cell.k = cell_k;
    cell.extra = extra;
    cell.oracle_count = oracle_count;
    cell.self_count = self_count;
    cell.pool_size = pool_size;
    try {
      auto report = evaluate_cell(m, cfg, model, cell_ctx, queries, mode, cell_k, extra,
                                  oracle_count, seed);
      cell.map = report.map;
      double sp = 0.0;
      int cnt = 0;
      for (const auto& e : report.episodes)
        if (e.support_precision >= 0) {
          sp += e.support_precision;
          ++cnt;
        }
      cell.mean_support_precision = cnt ? sp / cnt : -1.0;
      if (!out_dir.empty()) write_text_file(out_dir + "/report_" + name + ".json", report.to_json());
    } catch (const std::exception& e) {
      cell.failed = true;
      cell.error = e.what();
    }
    if (log) {
      ordered_json j;
      j["cell"] = cell.name;
      j["map"] = cell.map;
      j["failed"] = cell.failed;
      log(j.dump());
    }
    result.cells.push_back(cell);
  };

  // mode contrast at the configured k
  run_cell("random_k" + std::to_string(k), data::EpisodeMode::Random, k, 0, 0, 0, ctx, 0);
  run_cell("selfshot_k" + std::to_string(k), data::EpisodeMode::SelfShot, k, 0, 0, 0, ctx, 0);
  run_cell("oracle_k" + std::to_string(k), data::EpisodeMode::Oracle, k, 0, 0, 0, ctx, 0);

  // inference-time support increase, the k+(n) columns
  for (int extra : cfg.eval.extras)
    run_cell("selfshot_k" + std::to_string(k) + "+" + std::to_string(extra),
             data::EpisodeMode::SelfShot, k, extra, 0, 0, ctx, 0);

  // semi-shot (oracle x self) triangle
  for (int o = 0; o <= cfg.eval.semi_oracle_max; ++o) {
    for (int s = 0; s <= cfg.eval.semi_self_max; ++s) {
      int total = o + s;
      if (total < 1 || total > cfg.eval.semi_max_total) continue;
      run_cell("semi_o" + std::to_string(o) + "_s" + std::to_string(s), data::EpisodeMode::Semi,
               total, 0, o, s, ctx, 0);
    }
  }

  // pool-size scaling of self-shot retrieval
  for (int p : cfg.eval.pool_sizes) {
    if (p <= 0 || p > static_cast<int>(pool_ids.size())) continue;
    std::vector<std::string> sub(pool_ids.begin(), pool_ids.begin() + p);
    retrieve::EmbeddingIndex sub_index = full_index.subset(sub);
    ResolveContext sub_ctx = ctx;
    sub_ctx.pool_ids = sub;
    sub_ctx.index = &sub_index;
    run_cell("selfshot_pool" + std::to_string(p), data::EpisodeMode::SelfShot, k, 0, 0, 0, sub_ctx,
             p);
  }

  double random_map = -1, oracle_map = -1;
  for (const auto& c : result.cells) {
    if (c.name == "random_k" + std::to_string(k) && !c.failed) random_map = c.map;
    if (c.name == "oracle_k" + std::to_string(k) && !c.failed) oracle_map = c.map;
  }
  result.oracle_minus_random_map =
      (random_map >= 0 && oracle_map >= 0) ? oracle_map - random_map : 0.0;

  ordered_json j;
  j["schema_version"] = 1;
  j["seed"] = seed;
  j["queries"] = queries.size();
  j["pool"] = pool_ids.size();
  j["oracle_minus_random_map"] = result.oracle_minus_random_map;
  j["cells"] = ordered_json::array();
  for (const auto& c : result.cells) {
    ordered_json cj;
    cj["name"] = c.name;
    cj["mode"] = c.mode;
    cj["k"] = c.k;
    cj["extra"] = c.extra;
    cj["oracle"] = c.oracle_count;
    cj["self"] = c.self_count;
    cj["pool_size"] = c.pool_size;
    cj["map"] = c.map;
    cj["support_precision"] = c.mean_support_precision;
    cj["failed"] = c.failed;
    if (c.failed) cj["error"] = c.error;
    j["cells"].push_back(cj);
  }
  result.summary_json = j.dump(1);
  if (!out_dir.empty()) write_text_file(out_dir + "/summary.json", result.summary_json);
  return result;
}

std::pair<Tensor, Tensor> fuser_activation_maps(const vistr::VisModel& model,
                                                const Tensor& query_clip,
                                                const std::vector<Tensor>& support_clips) {
  using ad::Var;
  const auto& cfg = model.config();
  Var fq = model.extract_features(query_clip);
  Var eq = model.encode_tokens(model.tokens_from_features(fq),
                               vistr::positional_encoding(cfg.frames, cfg.token_w(), cfg.token_h(),
                                                          cfg.dim));
  std::vector<Var> sup_tokens;
  for (const auto& s : support_clips) {
    Var fs = model.extract_features(s);
    Var ts = model.tokens_from_features(fs);
    sup_tokens.push_back(model.encode_tokens(
        ts, vistr::positional_encoding(s.dim(0), cfg.token_w(), cfg.token_h(), cfg.dim)));
  }
  Var es = sup_tokens.size() == 1 ? sup_tokens[0] : ad::concat(sup_tokens, 0);
  Var fused = model.fuse(eq, es);

  auto token_norms = [&](const Var& tokens) {
    Tensor out({cfg.frames, cfg.token_h(), cfg.token_w()});
    for (std::int64_t r = 0; r < tokens->val.dim(0); ++r) {
      double s = 0;
      for (std::int64_t c = 0; c < cfg.dim; ++c) {
        double v = tokens->val.at2(r, c);
        s += v * v;
      }
      out[r] = std::sqrt(s);
    }
    return out;
  };
  return {token_norms(eq), token_norms(fused)};
}

void write_run_json(const std::string& out_dir, const std::string& command,
                    const std::string& config_hash, std::uint64_t seed,
                    const std::vector<std::pair<std::string, std::string>>& inputs,
                    const std::vector<std::pair<std::string, std::string>>& outputs) {
  ordered_json j;
  j["command"] = command;
  j["config_hash"] = config_hash;
  j["seed"] = seed;
  ordered_json in = ordered_json::object(), out = ordered_json::object();
  for (const auto& [path, fp] : inputs) in[path] = fp;
  for (const auto& [path, fp] : outputs) out[path] = fp;
  j["inputs"] = in;
  j["outputs"] = out;
  auto now = std::chrono::system_clock::now().time_since_epoch();
  j["timestamp"] = std::chrono::duration_cast<std::chrono::milliseconds>(now).count();
  write_text_file(out_dir + "/run.json", j.dump(1));
}

}  // namespace selfshot::pipeline
