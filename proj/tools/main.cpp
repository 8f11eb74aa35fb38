#include <CLI11.hpp>
#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>

#include "selfshot/config.hpp"
#include "selfshot/pipeline.hpp"
#include "selfshot/report.hpp"

using namespace selfshot;
using ordered_json = nlohmann::ordered_json;

namespace {

struct CommonArgs {
  std::string config_path;
  std::uint64_t seed = 0;
  std::string out;
};

void add_common(CLI::App* cmd, CommonArgs* args) {
  cmd->add_option("--config", args->config_path, "configuration file (INI)")->required();
  cmd->add_option("--seed", args->seed, "root seed for every stochastic choice");
  cmd->add_option("--out", args->out, "output directory")->required();
}

std::ofstream open_log(const std::string& out_dir, const std::string& name) {
  ensure_dir(out_dir);
  std::ofstream f(out_dir + "/" + name, std::ios::trunc);
  SS_REQUIRE(f.good(), "cannot open log file in " + out_dir);
  return f;
}

using Fingerprints = std::vector<std::pair<std::string, std::string>>;

Fingerprints fps(const std::vector<std::string>& paths) {
  Fingerprints out;
  for (const auto& p : paths)
    if (file_exists(p)) out.emplace_back(p, fingerprint_file(p));
  return out;
}

embed::Embedder load_embedder_checked(const config::Config& cfg) {
  SS_CHECK(file_exists(cfg.embed.checkpoint),
           "missing embedder checkpoint: " + cfg.embed.checkpoint);
  return embed::Embedder::load(cfg.embed.checkpoint);
}

retrieve::EmbeddingIndex load_index_checked(const config::Config& cfg) {
  SS_CHECK(file_exists(cfg.retrieve.index_path),
           "missing embedding index: " + cfg.retrieve.index_path);
  auto index = retrieve::EmbeddingIndex::load(cfg.retrieve.index_path);
  std::string fp = fingerprint_file(cfg.embed.checkpoint);
  SS_CHECK(index.fingerprint() == fp,
           "index was built with a different encoder (fingerprint " + index.fingerprint() +
               " vs " + fp + ")");
  return index;
}

std::vector<std::string> pool_ids_for(const config::Config& cfg, const data::DatasetManifest& m,
                                      std::uint64_t seed) {
  auto split = data::split_from_name(cfg.retrieve.pool_split);
  return pipeline::shuffled_prefix(m.split_ids(split), seed, "pool", cfg.retrieve.pool_size);
}

int cmd_gen_data(const CommonArgs& args) {
  config::Config cfg = config::load_config(args.config_path);
  data::DatasetManifest m = data::generate_dataset(cfg.data.gen, args.seed, args.out);
  std::vector<std::string> written{args.out + "/manifest.json"};
  for (auto split : {data::Split::Val, data::Split::Test}) {
    if (m.split_ids(split).empty()) continue;
    for (auto mode : {data::EpisodeMode::Oracle, data::EpisodeMode::Random,
                      data::EpisodeMode::SelfShot, data::EpisodeMode::ImageSupport}) {
      auto eps = data::make_episodes(m, cfg.retrieve.k, mode, split, args.seed);
      std::string path = args.out + "/" + data::episodes_filename(split, mode, cfg.retrieve.k);
      write_text_file(path, data::episodes_to_json(eps, args.seed));
      written.push_back(path);
    }
  }
  pipeline::write_run_json(args.out, "gen-data", cfg.config_hash, args.seed,
                           fps({args.config_path}), fps(written));
  std::cout << "generated " << m.videos.size() << " videos under " << args.out << "\n";
  return 0;
}

int cmd_train_embed(const CommonArgs& args) {
  config::Config cfg = config::load_config(args.config_path);
  data::DatasetManifest m = data::load_manifest(cfg.data.root);
  auto pool = pool_ids_for(cfg, m, args.seed);
  embed::Embedder emb(cfg.embed.cfg, args.seed);
  auto log = open_log(args.out, "train_log.jsonl");
  auto result = embed::train_embedder(
      emb, pool, [&](const std::string& id) { return data::load_video(m, id); }, args.seed,
      [&](const std::string& line) { log << line << "\n"; });
  std::string ckpt = args.out + "/embedder.ckpt";
  emb.save(ckpt);
  pipeline::write_run_json(args.out, "train-embed", cfg.config_hash, args.seed,
                           fps({args.config_path, cfg.data.root + "/manifest.json"}),
                           fps({ckpt}));
  ordered_json j{{"steps", result.steps},
                 {"probe_loss_initial", result.probe_loss_initial},
                 {"probe_loss_final", result.probe_loss_final},
                 {"checkpoint", ckpt}};
  std::cout << j.dump(1) << "\n";
  return 0;
}

int cmd_build_index(const CommonArgs& args) {
  config::Config cfg = config::load_config(args.config_path);
  data::DatasetManifest m = data::load_manifest(cfg.data.root);
  embed::Embedder emb = load_embedder_checked(cfg);
  std::string fp = fingerprint_file(cfg.embed.checkpoint);
  auto pool = pool_ids_for(cfg, m, args.seed);
  SS_CHECK(!pool.empty(), "pool split has no videos");
  retrieve::EmbeddingIndex index(emb.config().dim, fp);
  for (const auto& id : pool) index.append(id, emb.encode(data::load_video(m, id)), fp);
  ensure_dir(args.out);
  std::string path = args.out + "/pool.index";
  index.save(path);
  pipeline::write_run_json(args.out, "build-index", cfg.config_hash, args.seed,
                           fps({args.config_path, cfg.embed.checkpoint}), fps({path}));
  std::cout << "indexed " << index.size() << " videos -> " << path << "\n";
  return 0;
}

int cmd_retrieve(const CommonArgs& args, const std::string& query, int k, bool exclude_self,
                 int extra) {
  config::Config cfg = config::load_config(args.config_path);
  data::DatasetManifest m = data::load_manifest(cfg.data.root);
  embed::Embedder emb = load_embedder_checked(cfg);
  retrieve::EmbeddingIndex index = load_index_checked(cfg);
  Tensor q_emb = emb.encode(data::load_video(m, query));
  std::vector<std::string> exclude;
  if (exclude_self) exclude.push_back(query);
  auto result = retrieve::knn(index, q_emb, k, exclude);

  data::Episode ep;
  ep.query_id = query;
  ep.k = k;
  ep.mode = data::EpisodeMode::SelfShot;
  for (const auto& [id, score] : result.ranked) ep.support_ids.push_back(id);
  if (extra > 0) ep = retrieve::extend_supports(ep, q_emb, index, extra);

  ordered_json j;
  j["query"] = query;
  j["k"] = k;
  j["extra"] = extra;
  j["exclude_self"] = exclude_self;
  j["results"] = ordered_json::array();
  for (const auto& [id, score] : result.ranked) j["results"].push_back({{"id", id}, {"score", score}});
  j["supports"] = ep.support_ids;
  std::cout << j.dump(1) << "\n";
  pipeline::write_run_json(args.out, "retrieve", cfg.config_hash, args.seed,
                           fps({args.config_path, cfg.retrieve.index_path, cfg.embed.checkpoint}),
                           {});
  return 0;
}

int cmd_train_vis(const CommonArgs& args, bool paper_scale, const std::string& resume) {
  config::Config cfg = config::load_config(args.config_path);
  if (paper_scale) cfg.vis.cfg = vistr::VisConfig::paper_scale();
  data::DatasetManifest m = data::load_manifest(cfg.data.root);
  vistr::VisModel model(cfg.vis.cfg, args.seed);
  nn::AdamW opt = pipeline::make_vis_optimizer(model, cfg.train);
  if (!resume.empty()) pipeline::load_train_state(resume, model, opt);
  auto log = open_log(args.out, "train_log.jsonl");
  auto result = pipeline::train_vis(m, model, opt, cfg, args.seed, args.out, {}, 0, -1,
                                    [&](const std::string& line) { log << line << "\n"; });
  pipeline::write_run_json(args.out, "train-vis", cfg.config_hash, args.seed,
                           fps({args.config_path, cfg.data.root + "/manifest.json"}),
                           fps({args.out + "/model.ckpt"}));
  ordered_json j{{"steps", result.steps},
                 {"probe_loss_initial", result.probe_loss_initial},
                 {"probe_loss_final", result.probe_loss_final},
                 {"checkpoint", args.out + "/model.ckpt"}};
  std::cout << j.dump(1) << "\n";
  return 0;
}

int cmd_infer(const CommonArgs& args, const std::string& query, const std::string& mode_name) {
  config::Config cfg = config::load_config(args.config_path);
  data::DatasetManifest m = data::load_manifest(cfg.data.root);
  SS_CHECK(file_exists(cfg.vis.checkpoint), "missing VIS checkpoint: " + cfg.vis.checkpoint);
  auto model = vistr::VisModel::load(cfg.vis.checkpoint);
  data::EpisodeMode mode = data::mode_from_name(mode_name);
  SS_CHECK(mode == data::EpisodeMode::Oracle || mode == data::EpisodeMode::SelfShot ||
               mode == data::EpisodeMode::Semi || mode == data::EpisodeMode::Random,
           "infer mode must be one of oracle/selfshot/semi/random");

  pipeline::ResolveContext ctx;
  ctx.manifest = &m;
  ctx.pool_ids = pool_ids_for(cfg, m, args.seed);
  retrieve::EmbeddingIndex index;
  embed::Embedder* emb_ptr = nullptr;
  std::unique_ptr<embed::Embedder> emb;
  bool needs_index = mode == data::EpisodeMode::SelfShot || mode == data::EpisodeMode::Semi ||
                     cfg.retrieve.extra > 0;
  if (needs_index) {
    emb = std::make_unique<embed::Embedder>(load_embedder_checked(cfg));
    emb_ptr = emb.get();
    index = load_index_checked(cfg);
    ctx.index = &index;
    ctx.embedder = emb_ptr;
  }
  auto result = pipeline::infer(ctx, *model, query, mode, cfg.retrieve.k, cfg.retrieve.extra,
                                cfg.retrieve.semi_oracle, args.seed);

  ensure_dir(args.out);
  ensure_dir(args.out + "/masks");
  ordered_json j;
  j["query"] = query;
  j["mode"] = data::mode_name(result.episode.mode);
  j["k"] = result.episode.k;
  j["extra"] = result.episode.extra;
  j["supports"] = result.episode.support_ids;
  j["slots"] = ordered_json::array();
  const auto& pred = result.predictions;
  for (std::size_t i = 0; i < pred.prob.size(); ++i) {
    ordered_json slot;
    slot["prob"] = pred.prob[i];
    slot["boxes"] = ordered_json::array();
    const Tensor& bx = pred.boxes[i];
    for (std::int64_t t = 0; t < bx.dim(0); ++t)
      slot["boxes"].push_back({bx.at2(t, 0), bx.at2(t, 1), bx.at2(t, 2), bx.at2(t, 3)});
    j["slots"].push_back(slot);
    MaskSeq mask = eval::prediction_to_mask(pred.mask_logits[i], m.height, m.width);
    for (std::int64_t t = 0; t < mask.t; ++t) {
      Image8 img(mask.h, mask.w, 1);
      for (std::int64_t p = 0; p < mask.h * mask.w; ++p)
        img.px[static_cast<std::size_t>(p)] = mask.m[static_cast<std::size_t>(t * mask.h * mask.w + p)] ? 255 : 0;
      char name[64];
      std::snprintf(name, sizeof(name), "/masks/slot%02d_frame%04d.png", static_cast<int>(i),
                    static_cast<int>(t));
      write_png(args.out + name, img);
    }
  }
  write_text_file(args.out + "/predictions.json", j.dump(1));
  pipeline::write_run_json(args.out, "infer", cfg.config_hash, args.seed,
                           fps({args.config_path, cfg.vis.checkpoint}),
                           fps({args.out + "/predictions.json"}));
  std::cout << "wrote " << args.out << "/predictions.json\n";
  return 0;
}

int cmd_eval(const CommonArgs& args, double iou_thresh, bool iou_given, bool grid,
             const std::string& episodes_file) {
  config::Config cfg = config::load_config(args.config_path);
  if (iou_given) cfg.eval.iou_thresh = iou_thresh;
  data::DatasetManifest m = data::load_manifest(cfg.data.root);
  SS_CHECK(file_exists(cfg.vis.checkpoint), "missing VIS checkpoint: " + cfg.vis.checkpoint);
  auto model = vistr::VisModel::load(cfg.vis.checkpoint);
  ensure_dir(args.out);

  if (grid) {
    embed::Embedder emb = load_embedder_checked(cfg);
    retrieve::EmbeddingIndex index = load_index_checked(cfg);
    auto log = open_log(args.out, "experiment_log.jsonl");
    auto result = pipeline::run_experiment(m, cfg, *model, emb, index, args.seed, args.out,
                                           [&](const std::string& line) { log << line << "\n"; });
    write_text_file(args.out + "/summary.txt", report::summary_table(result.summary_json));
    pipeline::write_run_json(args.out, "eval", cfg.config_hash, args.seed,
                             fps({args.config_path, cfg.vis.checkpoint, cfg.embed.checkpoint,
                                  cfg.retrieve.index_path}),
                             fps({args.out + "/summary.json"}));
    std::cout << report::summary_table(result.summary_json);
    return 0;
  }

  std::vector<data::Episode> episodes;
  data::EpisodeMode mode = data::mode_from_name(cfg.eval.mode);
  if (!episodes_file.empty()) {
    episodes = data::episodes_from_json(read_text_file(episodes_file));
    mode = episodes.empty() ? mode : episodes[0].mode;
  }
  bool needs_resolve = episodes.empty() || mode == data::EpisodeMode::SelfShot ||
                       mode == data::EpisodeMode::Semi || cfg.retrieve.extra > 0;
  if (episodes.empty()) {
    auto split = data::split_from_name(cfg.eval.split);
    auto queries = pipeline::shuffled_prefix(m.split_ids(split), args.seed, "experiment-queries",
                                             cfg.eval.max_queries);
    for (const auto& q : queries) {
      data::Episode ep;
      ep.query_id = q;
      ep.mode = mode;
      ep.split = split;
      ep.k = cfg.retrieve.k;
      episodes.push_back(ep);
    }
    needs_resolve = true;
  }
  if (needs_resolve) {
    pipeline::ResolveContext ctx;
    ctx.manifest = &m;
    ctx.pool_ids = pool_ids_for(cfg, m, args.seed);
    std::unique_ptr<embed::Embedder> emb;
    retrieve::EmbeddingIndex index;
    if (mode == data::EpisodeMode::SelfShot || mode == data::EpisodeMode::Semi ||
        cfg.retrieve.extra > 0) {
      emb = std::make_unique<embed::Embedder>(load_embedder_checked(cfg));
      index = load_index_checked(cfg);
      ctx.index = &index;
      ctx.embedder = emb.get();
    }
    for (auto& ep : episodes) {
      if (!ep.support_ids.empty() && cfg.retrieve.extra == 0) continue;  // already resolved
      ep = pipeline::resolve_episode(ctx, ep.query_id, ep.mode, ep.k, cfg.retrieve.extra,
                                     cfg.retrieve.semi_oracle, args.seed);
    }
  }
  auto report_obj = eval::evaluate_run(m, episodes, *model, cfg.eval.iou_thresh,
                                       cfg.eval.score_floor);
  write_text_file(args.out + "/report.json", report_obj.to_json());
  pipeline::write_run_json(args.out, "eval", cfg.config_hash, args.seed,
                           fps({args.config_path, cfg.vis.checkpoint}),
                           fps({args.out + "/report.json"}));
  std::cout << "mAP@" << cfg.eval.iou_thresh << " (" << report_obj.mode
            << "): " << report_obj.map << "\n";
  return 0;
}

int cmd_report(const CommonArgs& args, const std::string& from, const std::string& attention_query) {
  config::Config cfg = config::load_config(args.config_path);
  ensure_dir(args.out);
  std::vector<std::string> written;

  std::string summary_path = from + "/summary.json";
  if (file_exists(summary_path)) {
    std::string summary = read_text_file(summary_path);
    std::string table = report::summary_table(summary);
    write_text_file(args.out + "/summary.txt", table);
    written.push_back(args.out + "/summary.txt");

    // pool-size scaling curve
    ordered_json j = ordered_json::parse(summary);
    report::Series pool_series;
    pool_series.label = "selfshot";
    std::vector<report::Series> mode_bar;
    for (const auto& c : j.at("cells")) {
      if (c.value("failed", false)) continue;
      if (c.value("pool_size", 0) > 0)
        pool_series.points.emplace_back(c.value("pool_size", 0), c.value("map", 0.0));
    }
    if (!pool_series.points.empty()) {
      std::sort(pool_series.points.begin(), pool_series.points.end());
      write_text_file(args.out + "/pool_curve.svg",
                      report::line_chart_svg("self-shot mAP vs unlabelled pool size",
                                             "pool size (log)", "mAP", {pool_series}, true));
      written.push_back(args.out + "/pool_curve.svg");
    }
  }

  // PR curves from per-cell or single reports
  for (const auto& entry : std::filesystem::directory_iterator(from)) {
    std::string name = entry.path().filename().string();
    if (name.rfind("report", 0) != 0 || entry.path().extension() != ".json") continue;
    auto rep = eval::EvalReport::from_json(read_text_file(entry.path().string()));
    if (rep.detections.empty() || rep.total_gt == 0) continue;
    auto series = report::pr_series(rep.detections, rep.total_gt, rep.mode);
    std::string base = name.substr(0, name.size() - 5);
    write_text_file(args.out + "/pr_" + base + ".svg",
                    report::line_chart_svg("precision-recall (" + rep.mode + ", IoU>=" +
                                               std::to_string(rep.iou_thresh) + ")",
                                           "recall", "precision", {series}));
    written.push_back(args.out + "/pr_" + base + ".svg");
  }

  if (!attention_query.empty()) {
    data::DatasetManifest m = data::load_manifest(cfg.data.root);
    SS_CHECK(file_exists(cfg.vis.checkpoint), "missing VIS checkpoint: " + cfg.vis.checkpoint);
    auto model = vistr::VisModel::load(cfg.vis.checkpoint);
    pipeline::ResolveContext ctx;
    ctx.manifest = &m;
    ctx.pool_ids = pool_ids_for(cfg, m, args.seed);
    std::unique_ptr<embed::Embedder> emb;
    retrieve::EmbeddingIndex index;
    data::EpisodeMode mode = data::mode_from_name(cfg.eval.mode);
    if (mode == data::EpisodeMode::SelfShot || mode == data::EpisodeMode::Semi) {
      emb = std::make_unique<embed::Embedder>(load_embedder_checked(cfg));
      index = load_index_checked(cfg);
      ctx.index = &index;
      ctx.embedder = emb.get();
    }
    auto ep = pipeline::resolve_episode(ctx, attention_query, mode, cfg.retrieve.k, 0,
                                        cfg.retrieve.semi_oracle, args.seed);
    auto batch = eval::load_episode(m, ep, model->config(), false, 0);
    auto [before, after] = pipeline::fuser_activation_maps(*model, batch.query_clip,
                                                           batch.support_clips);
    for (std::int64_t t = 0; t < before.dim(0); ++t) {
      Tensor bt({before.dim(1), before.dim(2)});
      Tensor at({after.dim(1), after.dim(2)});
      for (std::int64_t i = 0; i < bt.numel(); ++i) {
        bt[i] = before[t * bt.numel() + i];
        at[i] = after[t * at.numel() + i];
      }
      std::string bpath = args.out + "/attention_" + attention_query + "_f" + std::to_string(t) +
                          "_before.svg";
      std::string apath = args.out + "/attention_" + attention_query + "_f" + std::to_string(t) +
                          "_after.svg";
      write_text_file(bpath, report::heatmap_svg("before fuser, frame " + std::to_string(t), bt));
      write_text_file(apath, report::heatmap_svg("after fuser, frame " + std::to_string(t), at));
      written.push_back(bpath);
      written.push_back(apath);
    }
  }
  pipeline::write_run_json(args.out, "report", cfg.config_hash, args.seed,
                           fps({args.config_path}), fps(written));
  std::cout << "wrote " << written.size() << " report artifacts to " << args.out << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"self-shot video instance segmentation workbench"};
  app.require_subcommand(1);

  CommonArgs gen_args, embed_args, index_args, retrieve_args, vis_args, infer_args, eval_args,
      report_args;

  auto* gen = app.add_subcommand("gen-data", "generate the synthetic benchmark");
  add_common(gen, &gen_args);

  auto* temb = app.add_subcommand("train-embed", "train the self-supervised video embedder");
  add_common(temb, &embed_args);

  auto* bidx = app.add_subcommand("build-index", "embed the pool and build the retrieval index");
  add_common(bidx, &index_args);

  auto* retr = app.add_subcommand("retrieve", "query the embedding index");
  add_common(retr, &retrieve_args);
  std::string query_id;
  int retr_k = 5, retr_extra = 0;
  bool exclude_self = true;
  retr->add_option("--query", query_id, "query video id")->required();
  retr->add_option("--k", retr_k, "number of supports");
  retr->add_option("--exclude-self", exclude_self, "exclude the query id from results");
  retr->add_option("--extra", retr_extra, "inference-time support increase (k+(n))");

  auto* tvis = app.add_subcommand("train-vis", "train the query-support VIS transformer");
  add_common(tvis, &vis_args);
  bool paper_scale = false;
  std::string resume;
  tvis->add_flag("--paper-scale", paper_scale, "use the published large configuration");
  tvis->add_option("--resume", resume, "resume from a training-state checkpoint");

  auto* inf = app.add_subcommand("infer", "segment one query video");
  add_common(inf, &infer_args);
  std::string infer_query, infer_mode = "selfshot";
  inf->add_option("--query", infer_query, "query video id")->required();
  inf->add_option("--mode", infer_mode, "oracle|selfshot|semi|random");

  auto* ev = app.add_subcommand("eval", "evaluate episodes (or the whole experiment grid)");
  add_common(ev, &eval_args);
  double iou_thresh = 0.5;
  bool grid = false;
  std::string episodes_file;
  ev->add_option("--iou-thresh", iou_thresh, "video-IoU matching threshold")
      ->default_val(0.5);
  ev->add_flag("--grid", grid, "run the full experiment grid");
  ev->add_option("--episodes", episodes_file, "evaluate a fixed episodes file");

  auto* rep = app.add_subcommand("report", "render figures and summary tables");
  add_common(rep, &report_args);
  std::string from_dir, attention_query;
  rep->add_option("--from", from_dir, "directory with eval outputs")->required();
  rep->add_option("--attention", attention_query, "dump fuser heatmaps for this query id");

  CLI11_PARSE(app, argc, argv);

  try {
    if (gen->parsed()) return cmd_gen_data(gen_args);
    if (temb->parsed()) return cmd_train_embed(embed_args);
    if (bidx->parsed()) return cmd_build_index(index_args);
    if (retr->parsed()) return cmd_retrieve(retrieve_args, query_id, retr_k, exclude_self, retr_extra);
    if (tvis->parsed()) return cmd_train_vis(vis_args, paper_scale, resume);
    if (inf->parsed()) return cmd_infer(infer_args, infer_query, infer_mode);
    if (ev->parsed())
      return cmd_eval(eval_args, iou_thresh, ev->count("--iou-thresh") > 0, grid, episodes_file);
    if (rep->parsed()) return cmd_report(report_args, from_dir, attention_query);
  } catch (const ValidationError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  } catch (const std::exception& e) {
    std::cerr << "runtime failure: " << e.what() << "\n";
    return 2;
  }
  return 0;
}
