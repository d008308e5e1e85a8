#pragma once

#include <limits>

#include "coda/data.hpp"
#include "coda/layers.hpp"

namespace coda {

// Every scalar coefficient of the objective. `nu` may be set to the +inf
// sentinel to disable the diversity cap for the divergence ablation.
struct LossWeights {
  double lambda_d = 1e-2;
  double lambda_p = 1e-2;
  double lambda_div = 1e-2;
  double lambda_ce = 1e-2;
  double lambda_sv = 1.0;
  double nu = 10.0;
  double eps_vat_source = 3.5;
  double eps_vat_target = 3.5;
  double beta_dirt = 1e-2;

  void validate() const;
};

inline constexpr double kNuInfinity = std::numeric_limits<double>::infinity();

// Scale of the power-iteration probe step.
inline constexpr double kVatXi = 1e-6;

// Raw (unweighted) loss terms per hypothesis plus the pair terms and the
// weighted totals. `d_g` is the capped objective term, `d_g_raw` the
// uncapped squared mean difference kept for diagnostics.
struct LossBreakdown {
  double l_y[2]{};
  double l_d[2]{};
  double l_sv[2]{};
  double l_ce[2]{};
  double l_vt[2]{};
  double l_p = 0.0;
  double d_g = 0.0;
  double d_g_raw = 0.0;
  double dirt_kl = 0.0;
  double total[2]{};
  double coda_total = 0.0;
};

// --- loss terms over plain tensors -----------------------------------------

// -mean_batch y^T ln f(x), clamped logs. Rows of `probs` must be stochastic
// and `onehot` one-hot.
Tensor cross_entropy_source(const Tensor& probs, const Tensor& onehot);

// mean ln d(g(x_s)) + mean ln(1 - d(g(x_t))). The discriminator ascends this
// value, the generator descends it; both inputs are post-sigmoid
// probabilities of shape (b, 1).
Tensor discriminator_loss(const Tensor& d_out_source, const Tensor& d_out_target);

// mean_batch ||f1(x) - f2(x)||_1, twice the total variation; in [0, 2].
Tensor agreement_loss(const Tensor& probs1, const Tensor& probs2);

// min(nu, ||mean_b g1(x) - mean_b g2(x)||_2^2) over flattened source
// features; subtracted from the objective (maximized up to the cap).
Tensor diversity_penalty(const Tensor& feats1, const Tensor& feats2, double nu);

// -mean_batch f(x)^T ln f(x); in [0, ln K].
Tensor conditional_entropy(const Tensor& probs);

// mean_batch D_kl(p || q) with p treated as a constant (teacher side).
Tensor kl_mean(const Tensor& p_teacher, const Tensor& q);

// --- model-level terms ------------------------------------------------------

// f_i(x) = softmax(h_i(g_i(x))) under the given forward context; optionally
// also exposes the flattened features.
Tensor hyp_probs(const Hypothesis& hyp, ForwardCtx& ctx, const Tensor& x,
                 Tensor* feats_flat = nullptr);

// One power iteration for the KL-maximizing direction: sample unit Gaussian
// u, differentiate D_kl(f(x) || f(x + xi u)) w.r.t. u with parameters frozen,
// normalize per sample, scale to ||r||_2 = eps. Stochastic layers run in
// their eval collapse; batch norm keeps batch statistics. Returns a detached
// tensor; eps = 0 short-circuits to zeros.
Tensor vat_perturbation(const Hypothesis& hyp, int hyp_id, const Tensor& x,
                        double eps, Rng& rng);

// mean D_kl(f(x) || f(x + r)) with the teacher prediction f(x) detached.
// Builds the student branch on ctx's tape. A precomputed teacher overrides
// the internal one.
Tensor vat_loss(const Hypothesis& hyp, ForwardCtx& ctx, const Tensor& x,
                const Tensor& r, const Tensor* teacher = nullptr);

// Precomputed perturbations and detached teacher predictions, so the same
// objective value can be rebuilt as a pure function of the parameters (used
// by the trainer and by finite difference checks).
struct VatBundle {
  Tensor r_src[2], r_tgt[2];
  Tensor teacher_src[2], teacher_tgt[2];
};

VatBundle compute_vat_bundle(const HypothesisPair& pair, bool single,
                             const DomainBatch& batch, const LossWeights& w,
                             Rng* rng1, Rng* rng2);

struct ObjectiveOut {
  Tensor loss;
  LossBreakdown bd;
};

// VADA per-hypothesis loss
//   L(f_i) = L_y + lambda_d L_d + lambda_sv L_vt(src)
//            + lambda_ce (L_ce + L_vt(tgt)).
// Writes the hypothesis' entries into `bd` at `slot`.
Tensor vada_loss(const Hypothesis& hyp, int hyp_id, Tape& tape, Binder& binder,
                 const DomainBatch& batch, const LossWeights& w, Rng* rng,
                 const VatBundle* pre, LossBreakdown& bd, int slot,
                 Tensor* src_feats_out, Tensor* tgt_probs_out);

// Full co-regularized objective
//   L(f_1) + L(f_2) + lambda_p L_p - lambda_div D_g.
// The binder decides which parameters receive gradients (the trainer freezes
// the discriminators here). Pass `pre` to reuse perturbations computed
// earlier; otherwise they are drawn from the per-hypothesis rngs.
ObjectiveOut coda_total(Tape& tape, Binder& binder, const HypothesisPair& pair,
                        bool single, const DomainBatch& batch,
                        const LossWeights& w, Rng* rng1, Rng* rng2,
                        const VatBundle* pre = nullptr);

// Ascent objective for the discriminator phase: returns -(L_disc(d_1) +
// L_disc(d_2)) built over frozen features, so minimizing it maximizes
// L_disc. Only discriminator parameters are bound with gradients.
ObjectiveOut discriminator_phase(Tape& tape, Binder& binder,
                                 const HypothesisPair& pair, bool single,
                                 const DomainBatch& batch, Rng* rng1,
                                 Rng* rng2);

// DIRT-T refinement loss on target-only batches:
//   lambda_ce (L_ce + L_vt) + beta mean D_kl(teacher || student).
ObjectiveOut dirtt_loss(const Hypothesis& student, Tape& tape, Binder& binder,
                        const Tensor& teacher_probs, const Tensor& target_x,
                        const LossWeights& w, Rng* rng,
                        const Tensor* r_pre = nullptr);

}  // namespace coda
