#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>

#include "coda/common.hpp"
#include "coda/runner.hpp"

namespace {

struct CommonFlags {
  std::string config_path;
  std::string out;
  std::string variant;
  std::string checkpoint;
  std::string k_list;
  long long seed = -1;
  long long iterations = -1;
};

void add_common(CLI::App* cmd, CommonFlags& f, bool with_checkpoint) {
  cmd->add_option("--config", f.config_path, "JSON run configuration");
  cmd->add_option("--seed", f.seed, "seed override");
  cmd->add_option("--out", f.out, "output directory override");
  cmd->add_option("--variant", f.variant,
                  "co-da | co-da-bn | co-da-sh | vada-single | co-da-nodiv");
  cmd->add_option("--iterations", f.iterations, "iteration count override");
  cmd->add_option("--k", f.k_list, "comma-separated kNN k values");
  if (with_checkpoint)
    cmd->add_option("--checkpoint", f.checkpoint, "checkpoint file")
        ->required();
}

coda::RunConfig build_config(const CommonFlags& f) {
  coda::RunConfig cfg;
  if (!f.config_path.empty()) cfg = coda::load_run_config(f.config_path);
  if (f.seed >= 0) cfg.train.seed = static_cast<std::uint64_t>(f.seed);
  if (!f.out.empty()) cfg.out_dir = f.out;
  if (!f.variant.empty()) cfg.variant = f.variant;
  if (f.iterations >= 0)
    cfg.train.iterations = static_cast<std::size_t>(f.iterations);
  if (!f.k_list.empty()) {
    cfg.knn_k.clear();
    std::stringstream ss(f.k_list);
    std::string tok;
    while (std::getline(ss, tok, ',')) {
      try {
        const long v = std::stol(tok);
        if (v <= 0) throw std::invalid_argument(tok);
        cfg.knn_k.push_back(static_cast<std::size_t>(v));
      } catch (const std::exception&) {
        throw coda::ConfigError("--k: '" + tok + "' is not a positive integer");
      }
    }
    if (cfg.knn_k.empty()) throw coda::ConfigError("--k: empty list");
  }
  const bool known = [&] {
    for (const char* v : coda::kVariants)
      if (cfg.variant == v) return true;
    return false;
  }();
  if (!known)
    throw coda::ConfigError("unknown variant '" + cfg.variant + "'");
  coda::apply_variant(cfg);
  return cfg;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"coda: co-regularized domain alignment lab"};
  app.require_subcommand(1);

  CommonFlags gen_f, train_f, dirtt_f, eval_f, probe_f, grid_f;
  std::string plot_metrics, plot_out;

  CLI::App* gen = app.add_subcommand("gen", "generate a dataset pair as CSV");
  add_common(gen, gen_f, false);
  CLI::App* train = app.add_subcommand("train", "run the main Co-DA phase");
  add_common(train, train_f, false);
  CLI::App* dirtt =
      app.add_subcommand("dirtt", "refine a trained checkpoint on target data");
  add_common(dirtt, dirtt_f, true);
  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint");
  add_common(eval, eval_f, true);
  CLI::App* probe =
      app.add_subcommand("probe", "PCA+kNN feature alignment probe");
  add_common(probe, probe_f, true);
  CLI::App* plot = app.add_subcommand("plot", "render SVG curves from metrics");
  plot->add_option("metrics", plot_metrics, "metrics.jsonl path")->required();
  plot->add_option("--out", plot_out, "output directory");
  CLI::App* grid =
      app.add_subcommand("grid", "hyperparameter grid of training runs");
  add_common(grid, grid_f, false);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) coda::run_gen(build_config(gen_f));
    if (train->parsed()) coda::run_train(build_config(train_f));
    if (dirtt->parsed())
      coda::run_dirtt(build_config(dirtt_f), dirtt_f.checkpoint);
    if (eval->parsed()) coda::run_eval(build_config(eval_f), eval_f.checkpoint);
    if (probe->parsed())
      coda::run_probe(build_config(probe_f), probe_f.checkpoint);
    if (plot->parsed()) coda::run_plot(plot_metrics, plot_out);
    if (grid->parsed()) coda::run_grid(build_config(grid_f));
  } catch (const coda::ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const coda::IoError& e) {
    std::cerr << "i/o error: " << e.what() << "\n";
    return 3;
  } catch (const coda::NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 4;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
