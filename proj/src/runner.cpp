#include "coda/runner.hpp"

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include "coda/checkpoint.hpp"
#include "coda/common.hpp"

namespace fs = std::filesystem;

namespace coda {

namespace {

void write_text(const std::string& path, const std::string& content) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << content;
  if (!out) throw IoError("failed while writing " + path);
}

std::string make_run_dir(const RunConfig& cfg, const std::string& command) {
  const std::string dir = resolve_out_dir(cfg, command);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory " + dir + ": " +
                        ec.message());
  RunConfig resolved = cfg;
  resolved.out_dir = dir;
  write_text(dir + "/config.json", config_json(resolved).dump(2) + "\n");
  return dir;
}

DomainDataset preprocess(const RunConfig& cfg, DomainDataset data) {
  if (cfg.train.instance_norm) data.inputs = instance_norm(data.inputs);
  return data;
}

std::uint64_t checkpoint_iteration(const std::string& path) {
  return load_checkpoint(path).iteration;
}

}  // namespace

std::string resolve_out_dir(const RunConfig& cfg, const std::string& command) {
  if (!cfg.out_dir.empty()) return cfg.out_dir;
  const char* env_root = std::getenv("CODA_OUT");
  const std::string root = env_root && *env_root ? env_root : "runs";
  return root + "/" + command + "-" + cfg.variant + "-seed" +
         std::to_string(cfg.train.seed);
}

std::string run_gen(const RunConfig& cfg) {
  const std::string dir = make_run_dir(cfg, "gen");
  auto [source, target] = load_datasets(cfg);
  export_csv(source, dir + "/source.csv");
  export_csv(target, dir + "/target.csv");
  std::cout << "gen: wrote " << source.size() << " source / " << target.size()
            << " target samples to " << dir << "\n";
  return dir;
}

std::string run_train(const RunConfig& cfg) {
  const std::string dir = make_run_dir(cfg, "train");
  auto [source, target] = load_datasets(cfg);

  TrainConfig tc = cfg.train;
  tc.arch = derive_arch(cfg, source);
  Trainer trainer(tc, source, target);

  const std::string metrics_path = dir + "/metrics.jsonl";
  std::ofstream metrics(metrics_path);
  if (!metrics) throw IoError("cannot write " + metrics_path);
  trainer.run([&](const MetricsRecord& rec) {
    metrics << metrics_line(rec) << "\n";
    if (!metrics) throw IoError("failed while writing " + metrics_path);
    std::cout << "iter " << rec.iter << ": acc_tgt " << rec.acc_tgt[0];
    if (!tc.single_hypothesis) std::cout << "/" << rec.acc_tgt[1];
    std::cout << " agree " << rec.agree << "\n";
  });
  metrics.close();

  trainer.save(dir + "/final.ckpt");
  std::cout << "train: checkpoint and metrics in " << dir << "\n";
  return dir;
}

LoadedModel load_model(const RunConfig& cfg, const DomainDataset& source,
                       const std::string& checkpoint_path) {
  Checkpoint ckpt = load_checkpoint(checkpoint_path);
  const bool refined = ckpt.find_or_null("refined") != nullptr;

  RunConfig resolved = cfg;
  ArchConfig arch = derive_arch(resolved, source);

  LoadedModel model;
  model.single = refined || cfg.train.single_hypothesis;
  model.iteration = ckpt.iteration;
  model.pair = model.single
                   ? make_single_hypothesis(arch, cfg.train.seed)
                   : make_hypothesis_pair(arch, cfg.train.sharing,
                                          cfg.train.seed,
                                          cfg.train.identical_hypotheses);

  for (const auto& p : model.pair.all_params()) {
    const CheckpointEntry* e = ckpt.find_or_null("param/" + p->name);
    if (!e) {
      // Refined checkpoints carry only the classifier.
      if (refined && p->name.rfind("d1/", 0) == 0) continue;
      throw IoError("checkpoint: missing entry param/" + p->name);
    }
    if (e->dims != p->shape)
      throw ShapeError("checkpoint: tensor param/" + p->name + " has shape " +
                       shape_str(e->dims) + ", expected " +
                       shape_str(p->shape));
    p->value = e->f64;
  }

  model.ema = std::make_unique<Ema>(cfg.train.ema_momentum,
                                    model.pair.classifier_params());
  model.ema->reset_to_params();
  for (const auto& p : model.ema->params()) {
    const CheckpointEntry* e = ckpt.find_or_null("ema/" + p->name);
    if (!e) continue;
    if (e->dims != p->shape)
      throw ShapeError("checkpoint: tensor ema/" + p->name + " has shape " +
                       shape_str(e->dims) + ", expected " +
                       shape_str(p->shape));
    model.ema->shadow_mutable(*p) = e->f64;
  }
  return model;
}

std::string run_eval(const RunConfig& cfg, const std::string& checkpoint) {
  const std::string dir = make_run_dir(cfg, "eval");
  auto [source_raw, target_raw] = load_datasets(cfg);
  DomainDataset source = preprocess(cfg, std::move(source_raw));
  DomainDataset target = preprocess(cfg, std::move(target_raw));

  LoadedModel model = load_model(cfg, source, checkpoint);
  Ema::Swap swap(*model.ema);

  MetricsRecord rec;
  rec.iter = model.iteration;
  rec.acc_src[0] = accuracy(model.pair.hyp[0], 1, source);
  rec.acc_tgt[0] = accuracy(model.pair.hyp[0], 1, target);
  if (model.single) {
    rec.agree = 1.0;
  } else {
    rec.acc_src[1] = accuracy(model.pair.hyp[1], 2, source);
    rec.acc_tgt[1] = accuracy(model.pair.hyp[1], 2, target);
    rec.agree = agreement_rate(model.pair.hyp[0], model.pair.hyp[1], target);
  }
  write_text(dir + "/eval.json", metrics_line(rec) + "\n");
  std::cout << "eval: " << metrics_line(rec) << "\n";
  return dir;
}

std::string run_probe(const RunConfig& cfg, const std::string& checkpoint) {
  const std::string dir = make_run_dir(cfg, "probe");
  auto [source_raw, target_raw] = load_datasets(cfg);
  DomainDataset source = preprocess(cfg, std::move(source_raw));
  DomainDataset target = preprocess(cfg, std::move(target_raw));
  if (!target.labeled())
    throw ConfigError("probe: target labels are required to score the kNN");

  LoadedModel model = load_model(cfg, source, checkpoint);
  Ema::Swap swap(*model.ema);

  nlohmann::ordered_json out;
  const int hyps = model.single ? 1 : 2;
  for (int i = 0; i < hyps; ++i) {
    Tensor src_feats = eval_feats(model.pair.hyp[i], i + 1, source.inputs);
    Tensor tgt_feats = eval_feats(model.pair.hyp[i], i + 1, target.inputs);
    const std::size_t dims = std::min<std::size_t>(50, src_feats.shape[1]);
    PcaProjection proj = pca_fit(src_feats, dims);
    auto scores = knn_probe(proj.apply(src_feats), source.labels,
                            proj.apply(tgt_feats), target.labels, cfg.knn_k);
    nlohmann::ordered_json per_k;
    for (const auto& [k, acc] : scores) per_k[std::to_string(k)] = acc;
    nlohmann::ordered_json block;
    block["pca_dims"] = proj.out_dim;
    block["pca_truncated"] = proj.truncated;
    block["knn"] = per_k;
    out["h" + std::to_string(i + 1)] = block;
  }
  write_text(dir + "/probe.json", out.dump(2) + "\n");
  std::cout << "probe: " << out.dump() << "\n";
  return dir;
}

std::string run_dirtt(const RunConfig& cfg, const std::string& checkpoint) {
  const std::string dir = make_run_dir(cfg, "dirtt");
  auto [source, target] = load_datasets(cfg);

  TrainConfig tc = cfg.train;
  tc.arch = derive_arch(cfg, source);
  tc.iterations = checkpoint_iteration(checkpoint);
  Trainer trainer(tc, source, target);
  trainer.load(checkpoint);

  const int hyps = tc.single_hypothesis ? 1 : 2;
  for (int i = 0; i < hyps; ++i) {
    const std::string metrics_path =
        dir + "/dirtt_metrics_" + std::to_string(i + 1) + ".jsonl";
    std::ofstream metrics(metrics_path);
    if (!metrics) throw IoError("cannot write " + metrics_path);
    Hypothesis refined = trainer.dirtt_refine(i, [&](const MetricsRecord& rec) {
      metrics << metrics_line(rec) << "\n";
      std::cout << "dirtt f" << (i + 1) << " iter " << rec.iter << ": acc_tgt "
                << rec.acc_tgt[0] << "\n";
    });

    Checkpoint out;
    out.iteration = tc.dirt_iterations;
    out.add_u64("refined", {1});
    std::vector<ParamPtr> params;
    refined.g.collect_params(params);
    refined.h.collect_params(params);
    for (const auto& p : params) {
      std::string name = p->name;
      // Normalize to the first-hypothesis prefix so refined models reload as
      // single-hypothesis checkpoints.
      if (name.rfind("g2/", 0) == 0 || name.rfind("h2/", 0) == 0)
        name[1] = '1';
      out.add_f64("param/" + name, p->shape, p->value);
    }
    save_checkpoint(dir + "/refined_" + std::to_string(i + 1) + ".ckpt", out);
  }
  std::cout << "dirtt: refined checkpoints in " << dir << "\n";
  return dir;
}

std::string run_plot(const std::string& metrics_path,
                     const std::string& out_dir) {
  std::string dir = out_dir;
  if (dir.empty()) {
    const fs::path parent = fs::path(metrics_path).parent_path();
    dir = parent.empty() ? std::string(".") : parent.string();
  }
  std::error_code ec;
  fs::create_directories(dir, ec);
  const auto records = parse_metrics(metrics_path);
  const auto written = emit_plots(records, dir);
  for (const auto& f : written) std::cout << "plot: wrote " << f << "\n";
  return dir;
}

std::string run_grid(const RunConfig& cfg) {
  const std::string dir = make_run_dir(cfg, "grid");

  const auto values_or = [](const std::vector<double>& vs, double current) {
    return vs.empty() ? std::vector<double>{current} : vs;
  };
  const auto lambda_ds = values_or(cfg.grid_lambda_d, cfg.train.weights.lambda_d);
  const auto lambda_ps = values_or(cfg.grid_lambda_p, cfg.train.weights.lambda_p);
  const auto nus = values_or(cfg.grid_nu, cfg.train.weights.nu);

  nlohmann::ordered_json rows = nlohmann::ordered_json::array();
  std::size_t cell = 0;
  for (double ld : lambda_ds)
    for (double lp : lambda_ps)
      for (double nu : nus) {
        RunConfig cell_cfg = cfg;
        cell_cfg.grid_lambda_d.clear();
        cell_cfg.grid_lambda_p.clear();
        cell_cfg.grid_nu.clear();
        cell_cfg.train.weights.lambda_d = ld;
        cell_cfg.train.weights.lambda_p = lp;
        cell_cfg.train.weights.nu = nu;
        if (cell_cfg.train.single_hypothesis)
          cell_cfg.train.weights.lambda_p = 0.0;
        cell_cfg.out_dir = dir + "/cell_" + std::to_string(cell);
        const std::string cell_dir = run_train(cell_cfg);

        const auto records = parse_metrics(cell_dir + "/metrics.jsonl");
        const MetricsRecord& last = records.back();
        nlohmann::ordered_json row;
        row["cell"] = cell;
        row["lambda_d"] = ld;
        row["lambda_p"] = lp;
        row["nu"] = nu;
        row["dir"] = cell_dir;
        row["acc_tgt_1"] = last.acc_tgt[0];
        row["acc_tgt_2"] = last.acc_tgt[1];
        row["agree"] = last.agree;
        rows.push_back(row);
        ++cell;
      }
  nlohmann::ordered_json summary;
  summary["cells"] = rows;
  write_text(dir + "/grid.json", summary.dump(2) + "\n");
  std::cout << "grid: " << cell << " cells summarized in " << dir
            << "/grid.json\n";
  return dir;
}

}  // namespace coda
