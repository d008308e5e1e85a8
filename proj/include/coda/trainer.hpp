#pragma once

#include <functional>
#include <memory>
#include <optional>
#include <string>

#include "coda/data.hpp"
#include "coda/eval.hpp"
#include "coda/losses.hpp"
#include "coda/optim.hpp"

namespace coda {

struct TrainConfig {
  std::size_t iterations = 3000;
  std::size_t batch_size = 64;
  std::uint64_t seed = 0;
  std::size_t eval_every = 50;
  LossWeights weights;
  SharingMode sharing = SharingMode::kIndependent;
  bool single_hypothesis = false;
  std::size_t dirt_iterations = 0;
  std::size_t dirt_refresh_interval = 500;
  AdamConfig adam;
  double ema_momentum = 0.998;
  // Reuses hypothesis 1's init and noise streams for hypothesis 2, so with
  // all pair couplings at zero the two stay bit-identical.
  bool identical_hypotheses = false;
  bool instance_norm = false;
  ArchConfig arch;

  void validate() const;
};

// One main-phase optimization loop: per step, (a) one Adam ascent step on
// L_disc for the discriminators over frozen features, (b) one Adam descent
// step on the full objective for the generators/heads with the
// discriminators frozen, (c) an EMA update. Deterministic for a fixed seed.
class Trainer {
 public:
  using MetricsSink = std::function<void(const MetricsRecord&)>;

  Trainer(TrainConfig cfg, const DomainDataset& source,
          const DomainDataset& target);

  LossBreakdown train_step(const DomainBatch& batch);

  // Runs the configured number of iterations, emitting a record at iteration
  // 0, every eval_every steps and at the end. Evaluation uses EMA weights.
  void run(const MetricsSink& sink);

  MetricsRecord evaluate(std::size_t iter);

  // Target-only DIRT-T refinement of one hypothesis. The student starts from
  // the EMA weights, the teacher snapshots the student's EMA every
  // dirt_refresh_interval steps, and there is no co-regularization.
  Hypothesis dirtt_refine(int hyp_index, const MetricsSink& sink);

  void save(const std::string& path) const;
  void load(const std::string& path);

  DomainBatch next_batch() { return sampler_.next(); }

  HypothesisPair& pair() { return pair_; }
  const HypothesisPair& pair() const { return pair_; }
  Ema& ema() { return ema_; }
  std::size_t iteration() const { return iter_; }
  const TrainConfig& config() const { return cfg_; }
  const DomainDataset& source() const { return source_; }
  const DomainDataset& target() const { return target_; }
  const LossBreakdown& last_breakdown() const { return last_bd_; }

 private:
  LossBreakdown probe_breakdown();

  TrainConfig cfg_;
  DomainDataset source_, target_;  // instance-norm applied copies when enabled
  HypothesisPair pair_;
  std::unique_ptr<Adam> opt_cls_, opt_disc_;
  Ema ema_;
  BatchSampler sampler_;
  Rng rng_h1_, rng_h2_, rng_probe_;
  std::size_t iter_ = 0;
  LossBreakdown last_bd_;
  bool has_step_bd_ = false;
};

// Refined single-hypothesis training state produced by DIRT-T, checkpointable
// on its own.
struct RefinedModel {
  Hypothesis hyp;
  std::unique_ptr<Ema> ema;
};

}  // namespace coda
