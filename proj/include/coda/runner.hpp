#pragma once

#include <string>

#include "coda/config.hpp"
#include "coda/eval.hpp"

namespace coda {

// Command bodies shared by the CLI binary and the test suites. Each command
// creates its output directory, drops the resolved config there, writes its
// artifacts and returns the directory path.

std::string resolve_out_dir(const RunConfig& cfg, const std::string& command);

std::string run_gen(const RunConfig& cfg);
std::string run_train(const RunConfig& cfg);
std::string run_dirtt(const RunConfig& cfg, const std::string& checkpoint);
std::string run_eval(const RunConfig& cfg, const std::string& checkpoint);
std::string run_probe(const RunConfig& cfg, const std::string& checkpoint);
std::string run_plot(const std::string& metrics_path, const std::string& out_dir);
std::string run_grid(const RunConfig& cfg);

// Model state rebuilt from a checkpoint for evaluation and probing: the pair
// (or single refined hypothesis) plus the Polyak shadows.
struct LoadedModel {
  HypothesisPair pair;
  std::unique_ptr<Ema> ema;
  bool single = false;
  std::uint64_t iteration = 0;
};

LoadedModel load_model(const RunConfig& cfg, const DomainDataset& source,
                       const std::string& checkpoint_path);

}  // namespace coda
