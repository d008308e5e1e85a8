#include "coda/losses.hpp"

#include <cmath>

#include "coda/common.hpp"

namespace coda {

void LossWeights::validate() const {
  const auto nonneg = [](double v, const char* name) {
    if (!(v >= 0.0))
      throw ConfigError(std::string("loss weights: ") + name +
                        " must be non-negative");
  };
  nonneg(lambda_d, "lambda_d");
  nonneg(lambda_p, "lambda_p");
  nonneg(lambda_div, "lambda_div");
  nonneg(lambda_ce, "lambda_ce");
  nonneg(lambda_sv, "lambda_sv");
  nonneg(eps_vat_source, "eps_vat_source");
  nonneg(eps_vat_target, "eps_vat_target");
  nonneg(beta_dirt, "beta_dirt");
  if (!(nu > 0.0))
    throw ConfigError("loss weights: nu must be positive (or infinity)");
}

namespace {

void require_stochastic_rows(const char* op, const Tensor& probs) {
  if (probs.shape.size() != 2)
    throw ShapeError(std::string(op) + ": expected (batch, classes), got " +
                     shape_str(probs.shape));
  const std::size_t r = probs.shape[0], c = probs.shape[1];
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) s += probs.values()[i * c + j];
    if (std::abs(s - 1.0) > 1e-5)
      throw Error(std::string(op) + ": row " + std::to_string(i) +
                  " sums to " + std::to_string(s) + ", not 1");
  }
}

double batch_size_of(const char* op, const Tensor& t) {
  if (t.shape.empty() || t.shape[0] == 0)
    throw ShapeError(std::string(op) + ": empty batch");
  return static_cast<double>(t.shape[0]);
}

}  // namespace

Tensor cross_entropy_source(const Tensor& probs, const Tensor& onehot) {
  require_stochastic_rows("cross_entropy", probs);
  if (!same_shape(probs, onehot))
    throw ShapeError("cross_entropy: probs " + shape_str(probs.shape) +
                     " vs labels " + shape_str(onehot.shape));
  const std::size_t r = onehot.shape[0], c = onehot.shape[1];
  for (std::size_t i = 0; i < r; ++i) {
    double s = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double v = onehot.values()[i * c + j];
      if (v != 0.0 && v != 1.0)
        throw Error("cross_entropy: labels are not one-hot");
      s += v;
    }
    if (s != 1.0) throw Error("cross_entropy: labels are not one-hot");
  }
  const double b = batch_size_of("cross_entropy", probs);
  return scale(sum(mul(onehot, log(probs))), -1.0 / b);
}

Tensor discriminator_loss(const Tensor& d_out_source,
                          const Tensor& d_out_target) {
  for (const Tensor* t : {&d_out_source, &d_out_target})
    for (double v : t->values())
      if (v < 0.0 || v > 1.0)
        throw Error("discriminator_loss: output " + std::to_string(v) +
                    " outside [0, 1]");
  // Probabilities clamped into [eps, 1-eps]: a saturated discriminator bottoms
  // out at 2 ln(1-eps) instead of reaching 0 or diverging.
  Tensor ln_src = mean(log(clamp_max(d_out_source, 1.0 - kClampEps)));
  Tensor one_minus = add_scalar(scale(d_out_target, -1.0), 1.0);
  Tensor ln_tgt = mean(log(clamp_max(one_minus, 1.0 - kClampEps)));
  return add(ln_src, ln_tgt);
}

Tensor agreement_loss(const Tensor& probs1, const Tensor& probs2) {
  require_stochastic_rows("agreement_loss", probs1);
  require_stochastic_rows("agreement_loss", probs2);
  if (!same_shape(probs1, probs2))
    throw ShapeError("agreement_loss: " + shape_str(probs1.shape) + " vs " +
                     shape_str(probs2.shape));
  const double b = batch_size_of("agreement_loss", probs1);
  return scale(l1_norm(sub(probs1, probs2)), 1.0 / b);
}

Tensor diversity_penalty(const Tensor& feats1, const Tensor& feats2,
                         double nu) {
  if (feats1.shape.size() != 2 || !same_shape(feats1, feats2))
    throw ShapeError("diversity_penalty: expected matching (batch, feat), got " +
                     shape_str(feats1.shape) + " vs " + shape_str(feats2.shape));
  batch_size_of("diversity_penalty", feats1);
  Tensor gap = sub(mean_axis0(feats1), mean_axis0(feats2));
  return clamp_max(squared_l2_norm(gap), nu);
}

Tensor conditional_entropy(const Tensor& probs) {
  require_stochastic_rows("conditional_entropy", probs);
  const double b = batch_size_of("conditional_entropy", probs);
  return scale(sum(mul(probs, log(probs))), -1.0 / b);
}

Tensor kl_mean(const Tensor& p_teacher, const Tensor& q) {
  if (!same_shape(p_teacher, q))
    throw ShapeError("kl: " + shape_str(p_teacher.shape) + " vs " +
                     shape_str(q.shape));
  const double b = batch_size_of("kl", q);
  Tensor p = p_teacher.detached();
  // 0 ln 0 := 0 holds exactly: zero teacher entries multiply a finite log.
  Tensor per_entry = mul(p, sub(log(p), log(q)));
  return scale(sum(per_entry), 1.0 / b);
}

Tensor hyp_probs(const Hypothesis& hyp, ForwardCtx& ctx, const Tensor& x,
                 Tensor* feats_flat) {
  Tensor feats = hyp.g.forward(ctx, x);
  if (feats_flat) {
    *feats_flat = feats.shape.size() == 2
                      ? feats
                      : reshape(feats, {feats.shape[0],
                                        shape_size(feats.shape) / feats.shape[0]});
  }
  return softmax(hyp.h.forward(ctx, feats));
}

namespace {

// Per-sample L2 normalization; zero rows stay zero.
Tensor rows_normalized(const Tensor& t, double target_norm) {
  const std::size_t n = t.shape[0];
  const std::size_t row = t.size() / n;
  std::vector<double> out(t.size());
  for (std::size_t i = 0; i < n; ++i) {
    const double* src = t.values().data() + i * row;
    double norm = 0.0;
    for (std::size_t j = 0; j < row; ++j) norm += src[j] * src[j];
    norm = std::sqrt(norm);
    const double s = norm > 1e-30 ? target_norm / norm : 0.0;
    for (std::size_t j = 0; j < row; ++j) out[i * row + j] = src[j] * s;
  }
  return Tensor(t.shape, std::move(out));
}

ForwardCtx vat_ctx(Tape* tape, Binder* binder, int hyp_id) {
  ForwardCtx ctx;
  ctx.tape = tape;
  ctx.binder = binder;
  ctx.mode = Mode::kTrain;
  ctx.hypothesis_id = hyp_id;
  ctx.stochastic_eval = true;
  ctx.update_stats = false;
  return ctx;
}

Tensor teacher_probs_at(const Hypothesis& hyp, int hyp_id, const Tensor& x) {
  ForwardCtx ctx = vat_ctx(nullptr, nullptr, hyp_id);
  return hyp_probs(hyp, ctx, x.detached());
}

}  // namespace

Tensor vat_perturbation(const Hypothesis& hyp, int hyp_id, const Tensor& x,
                        double eps, Rng& rng) {
  if (eps < 0) throw Error("vat: eps must be non-negative");
  std::vector<double> u(x.size());
  for (double& v : u) v = rng.normal();
  if (eps == 0.0) return tensor_zeros(x.shape);

  Tensor direction = rows_normalized(Tensor(x.shape, std::move(u)), 1.0);
  Tensor teacher = teacher_probs_at(hyp, hyp_id, x);

  Tape tape;
  Binder binder(&tape);
  for (const ParamPtr& p : [&] {
        std::vector<ParamPtr> ps;
        hyp.collect_params(ps);
        return ps;
      }())
    binder.freeze(p.get());

  Tensor u_leaf = tape.leaf(direction, true);
  Tensor x_probe = add(x.detached(), scale(u_leaf, kVatXi));
  ForwardCtx ctx = vat_ctx(&tape, &binder, hyp_id);
  Tensor q = hyp_probs(hyp, ctx, x_probe);
  Tensor kl = kl_mean(teacher, q);
  Gradients grads = tape.backward(kl);
  Tensor g(x.shape, grads.at(u_leaf));
  return rows_normalized(g, eps);
}

Tensor vat_loss(const Hypothesis& hyp, ForwardCtx& ctx, const Tensor& x,
                const Tensor& r, const Tensor* teacher_pre) {
  if (!same_shape(x, r))
    throw ShapeError("vat_loss: x " + shape_str(x.shape) + " vs r " +
                     shape_str(r.shape));
  Tensor teacher = teacher_pre ? teacher_pre->detached()
                               : teacher_probs_at(hyp, ctx.hypothesis_id, x);
  ForwardCtx student_ctx = ctx;
  student_ctx.stochastic_eval = true;
  student_ctx.update_stats = false;
  Tensor q = hyp_probs(hyp, student_ctx, add(x.detached(), r.detached()));
  return kl_mean(teacher, q);
}

VatBundle compute_vat_bundle(const HypothesisPair& pair, bool single,
                             const DomainBatch& batch, const LossWeights& w,
                             Rng* rng1, Rng* rng2) {
  VatBundle out;
  Rng* rngs[2] = {rng1, rng2};
  const int count = single ? 1 : 2;
  for (int i = 0; i < count; ++i) {
    if (w.lambda_sv > 0.0) {
      out.r_src[i] = vat_perturbation(pair.hyp[i], i + 1, batch.source_x,
                                      w.eps_vat_source, *rngs[i]);
      out.teacher_src[i] = teacher_probs_at(pair.hyp[i], i + 1, batch.source_x);
    }
    if (w.lambda_ce > 0.0) {
      out.r_tgt[i] = vat_perturbation(pair.hyp[i], i + 1, batch.target_x,
                                      w.eps_vat_target, *rngs[i]);
      out.teacher_tgt[i] = teacher_probs_at(pair.hyp[i], i + 1, batch.target_x);
    }
  }
  return out;
}

Tensor vada_loss(const Hypothesis& hyp, int hyp_id, Tape& tape, Binder& binder,
                 const DomainBatch& batch, const LossWeights& w, Rng* rng,
                 const VatBundle* pre, LossBreakdown& bd, int slot,
                 Tensor* src_feats_out, Tensor* tgt_probs_out) {
  ForwardCtx ctx;
  ctx.tape = &tape;
  ctx.binder = &binder;
  ctx.mode = Mode::kTrain;
  ctx.hypothesis_id = hyp_id;
  ctx.rng = rng;
  ctx.update_stats = true;

  Tensor src_feats;
  Tensor src_probs = hyp_probs(hyp, ctx, batch.source_x, &src_feats);
  Tensor tgt_feats;
  Tensor tgt_probs = hyp_probs(hyp, ctx, batch.target_x, &tgt_feats);
  if (src_feats_out) *src_feats_out = src_feats;
  if (tgt_probs_out) *tgt_probs_out = tgt_probs;

  Tensor loss = cross_entropy_source(src_probs, batch.source_onehot);
  bd.l_y[slot] = loss.scalar();

  if (w.lambda_d > 0.0) {
    ForwardCtx dctx = ctx;
    Tensor d_src = hyp.d.forward(dctx, src_feats);
    Tensor d_tgt = hyp.d.forward(dctx, tgt_feats);
    Tensor l_disc = discriminator_loss(d_src, d_tgt);
    bd.l_d[slot] = l_disc.scalar();
    loss = add(loss, scale(l_disc, w.lambda_d));
  }

  if (w.lambda_sv > 0.0) {
    const bool has_pre = pre && pre->r_src[slot].defined();
    Tensor r = has_pre ? pre->r_src[slot]
                       : vat_perturbation(hyp, hyp_id, batch.source_x,
                                          w.eps_vat_source, *rng);
    Tensor l_sv = vat_loss(hyp, ctx, batch.source_x, r,
                           has_pre ? &pre->teacher_src[slot] : nullptr);
    bd.l_sv[slot] = l_sv.scalar();
    loss = add(loss, scale(l_sv, w.lambda_sv));
  }

  if (w.lambda_ce > 0.0) {
    Tensor l_ce = conditional_entropy(tgt_probs);
    bd.l_ce[slot] = l_ce.scalar();
    const bool has_pre = pre && pre->r_tgt[slot].defined();
    Tensor r = has_pre ? pre->r_tgt[slot]
                       : vat_perturbation(hyp, hyp_id, batch.target_x,
                                          w.eps_vat_target, *rng);
    Tensor l_vt = vat_loss(hyp, ctx, batch.target_x, r,
                           has_pre ? &pre->teacher_tgt[slot] : nullptr);
    bd.l_vt[slot] = l_vt.scalar();
    loss = add(loss, scale(add(l_ce, l_vt), w.lambda_ce));
  }

  bd.total[slot] = loss.scalar();
  return loss;
}

ObjectiveOut coda_total(Tape& tape, Binder& binder, const HypothesisPair& pair,
                        bool single, const DomainBatch& batch,
                        const LossWeights& w, Rng* rng1, Rng* rng2,
                        const VatBundle* pre) {
  w.validate();
  ObjectiveOut out;

  Tensor src_feats1, tgt_probs1;
  Tensor loss = vada_loss(pair.hyp[0], 1, tape, binder, batch, w, rng1,
                          pre && pre->r_src[0].defined() ? &pre->r_src[0] : nullptr,
                          pre && pre->r_tgt[0].defined() ? &pre->r_tgt[0] : nullptr,
                          out.bd, 0, &src_feats1, &tgt_probs1);

  if (!single) {
    Tensor src_feats2, tgt_probs2;
    Tensor loss2 = vada_loss(pair.hyp[1], 2, tape, binder, batch, w, rng2,
                             pre && pre->r_src[1].defined() ? &pre->r_src[1] : nullptr,
                             pre && pre->r_tgt[1].defined() ? &pre->r_tgt[1] : nullptr,
                             out.bd, 1, &src_feats2, &tgt_probs2);
    loss = add(loss, loss2);

    Tensor l_p = agreement_loss(tgt_probs1, tgt_probs2);
    out.bd.l_p = l_p.scalar();
    if (w.lambda_p > 0.0) loss = add(loss, scale(l_p, w.lambda_p));

    Tensor gap = sub(mean_axis0(src_feats1), mean_axis0(src_feats2));
    Tensor gap_sq = squared_l2_norm(gap);
    out.bd.d_g_raw = gap_sq.scalar();
    Tensor d_g = clamp_max(gap_sq, w.nu);
    out.bd.d_g = d_g.scalar();
    if (w.lambda_div > 0.0) loss = add(loss, scale(d_g, -w.lambda_div));
  }

  out.bd.coda_total = loss.scalar();
  out.loss = loss;
  return out;
}

ObjectiveOut discriminator_phase(Tape& tape, Binder& binder,
                                 const HypothesisPair& pair, bool single,
                                 const DomainBatch& batch, Rng* rng1,
                                 Rng* rng2) {
  ObjectiveOut out;
  Rng* rngs[2] = {rng1, rng2};
  Tensor total;
  const int count = single ? 1 : 2;
  for (int i = 0; i < count; ++i) {
    // Features are produced outside the tape: the generator is frozen during
    // the discriminator's ascent step.
    ForwardCtx gctx;
    gctx.mode = Mode::kTrain;
    gctx.hypothesis_id = i + 1;
    gctx.rng = rngs[i];
    gctx.update_stats = false;
    Tensor src_feats = pair.hyp[i].g.forward(gctx, batch.source_x);
    Tensor tgt_feats = pair.hyp[i].g.forward(gctx, batch.target_x);

    ForwardCtx dctx;
    dctx.tape = &tape;
    dctx.binder = &binder;
    dctx.mode = Mode::kTrain;
    dctx.hypothesis_id = i + 1;
    dctx.rng = rngs[i];
    Tensor d_src = pair.hyp[i].d.forward(dctx, src_feats);
    Tensor d_tgt = pair.hyp[i].d.forward(dctx, tgt_feats);
    Tensor l_disc = discriminator_loss(d_src, d_tgt);
    out.bd.l_d[i] = l_disc.scalar();
    total = total.defined() ? add(total, l_disc) : l_disc;
  }
  out.loss = scale(total, -1.0);
  out.bd.coda_total = out.loss.scalar();
  return out;
}

ObjectiveOut dirtt_loss(const Hypothesis& student, Tape& tape, Binder& binder,
                        const Tensor& teacher_probs, const Tensor& target_x,
                        const LossWeights& w, Rng* rng, const Tensor* r_pre) {
  ObjectiveOut out;
  ForwardCtx ctx;
  ctx.tape = &tape;
  ctx.binder = &binder;
  ctx.mode = Mode::kTrain;
  ctx.hypothesis_id = 1;
  ctx.rng = rng;
  ctx.update_stats = true;

  Tensor probs = hyp_probs(student, ctx, target_x);

  Tensor l_ce = conditional_entropy(probs);
  out.bd.l_ce[0] = l_ce.scalar();
  Tensor r = r_pre ? *r_pre
                   : vat_perturbation(student, 1, target_x, w.eps_vat_target,
                                      *rng);
  Tensor l_vt = vat_loss(student, ctx, target_x, r);
  out.bd.l_vt[0] = l_vt.scalar();

  Tensor loss = scale(add(l_ce, l_vt), w.lambda_ce);
  Tensor kl = kl_mean(teacher_probs, probs);
  out.bd.dirt_kl = kl.scalar();
  loss = add(loss, scale(kl, w.beta_dirt));

  out.bd.total[0] = loss.scalar();
  out.bd.coda_total = loss.scalar();
  out.loss = loss;
  return out;
}

}  // namespace coda
