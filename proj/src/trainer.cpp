#include "coda/trainer.hpp"

#include <cmath>

#include "coda/checkpoint.hpp"
#include "coda/common.hpp"

namespace coda {

void TrainConfig::validate() const {
  if (batch_size < 2)
    throw ConfigError("train config: batch size must be >= 2 (batch norm)");
  if (eval_every == 0)
    throw ConfigError("train config: eval_every must be positive");
  weights.validate();
  if (sharing == SharingMode::kSharedStochastic && weights.lambda_div != 0.0)
    throw ConfigError(
        "train config: lambda_div must be 0 in shared-stochastic mode");
  if (single_hypothesis &&
      (weights.lambda_p != 0.0 || weights.lambda_div != 0.0))
    throw ConfigError(
        "train config: single-hypothesis runs need lambda_p = lambda_div = 0");
  if (!(ema_momentum >= 0.0 && ema_momentum < 1.0))
    throw ConfigError("train config: ema momentum must lie in [0, 1)");
  if (dirt_refresh_interval == 0)
    throw ConfigError("train config: dirt refresh interval must be positive");
}

namespace {

DomainDataset maybe_instance_norm(const DomainDataset& data, bool enabled) {
  if (!enabled) return data;
  if (data.inputs.shape.size() != 4)
    throw ConfigError("instance norm requires image inputs");
  DomainDataset out = data;
  out.inputs = instance_norm(data.inputs);
  return out;
}

}  // namespace

Trainer::Trainer(TrainConfig cfg, const DomainDataset& source,
                 const DomainDataset& target)
    : cfg_(std::move(cfg)),
      source_(maybe_instance_norm(source, cfg_.instance_norm)),
      target_(maybe_instance_norm(target, cfg_.instance_norm)),
      pair_(cfg_.single_hypothesis
                ? make_single_hypothesis(cfg_.arch, cfg_.seed)
                : make_hypothesis_pair(cfg_.arch, cfg_.sharing, cfg_.seed,
                                       cfg_.identical_hypotheses)),
      ema_(cfg_.ema_momentum, pair_.classifier_params()),
      sampler_(&source_, &target_, cfg_.batch_size, derive_seed(cfg_.seed, 21)),
      rng_h1_(derive_seed(cfg_.seed, 22)),
      rng_h2_(cfg_.identical_hypotheses ? derive_seed(cfg_.seed, 22)
                                        : derive_seed(cfg_.seed, 23)),
      rng_probe_(derive_seed(cfg_.seed, 24)) {
  cfg_.validate();

  std::vector<ParamPtr> cls_trainable;
  for (const auto& p : pair_.classifier_params())
    if (p->trainable) cls_trainable.push_back(p);
  opt_cls_ = std::make_unique<Adam>(cfg_.adam, std::move(cls_trainable));

  std::vector<ParamPtr> disc_trainable;
  for (const auto& p : pair_.discriminator_params())
    if (p->trainable) disc_trainable.push_back(p);
  opt_disc_ = std::make_unique<Adam>(cfg_.adam, std::move(disc_trainable));
}

LossBreakdown Trainer::train_step(const DomainBatch& batch) {
  // (a) Discriminator ascent over frozen features.
  {
    Tape tape;
    Binder binder(&tape);
    ObjectiveOut disc = discriminator_phase(tape, binder, pair_,
                                            cfg_.single_hypothesis, batch,
                                            &rng_h1_, &rng_h2_);
    Gradients grads = tape.backward(disc.loss);
    opt_disc_->step([&](const Parameter& p) -> const std::vector<double>& {
      const Tensor* leaf = binder.leaf_of(&p);
      if (!leaf)
        throw Error("trainer: discriminator parameter " + p.name +
                    " missing from the phase graph");
      return grads.at(*leaf);
    });
  }

  // (b) Classifier descent on the full objective, discriminators frozen.
  LossBreakdown bd;
  {
    Tape tape;
    Binder binder(&tape);
    for (const auto& p : pair_.discriminator_params()) binder.freeze(p.get());
    VatBundle vat = compute_vat_bundle(pair_, cfg_.single_hypothesis, batch,
                                       cfg_.weights, &rng_h1_, &rng_h2_);
    ObjectiveOut obj = coda_total(tape, binder, pair_, cfg_.single_hypothesis,
                                  batch, cfg_.weights, &rng_h1_, &rng_h2_, &vat);
    bd = obj.bd;
    Gradients grads = tape.backward(obj.loss);
    opt_cls_->step([&](const Parameter& p) -> const std::vector<double>& {
      const Tensor* leaf = binder.leaf_of(&p);
      if (!leaf)
        throw Error("trainer: classifier parameter " + p.name +
                    " missing from the objective graph");
      return grads.at(*leaf);
    });
  }

  // (c) Polyak averaging.
  ema_.update();
  last_bd_ = bd;
  has_step_bd_ = true;
  return bd;
}

LossBreakdown Trainer::probe_breakdown() {
  // Objective snapshot without any update: running stats are restored
  // afterwards and the draw comes from the probe stream.
  std::vector<std::pair<ParamPtr, std::vector<double>>> stats;
  for (const auto& p : pair_.all_params())
    if (!p->trainable) stats.emplace_back(p, p->value);

  BatchSampler::State s = sampler_.state();
  DomainBatch batch = sampler_.next();
  sampler_.set_state(s);

  Tape tape;
  Binder binder(&tape);
  for (const auto& p : pair_.all_params()) binder.freeze(p.get());
  Rng probe1 = rng_probe_;
  Rng probe2 = rng_probe_;
  VatBundle vat = compute_vat_bundle(pair_, cfg_.single_hypothesis, batch,
                                     cfg_.weights, &probe1, &probe2);
  ObjectiveOut obj = coda_total(tape, binder, pair_, cfg_.single_hypothesis,
                                batch, cfg_.weights, &probe1, &probe2, &vat);

  for (auto& [p, saved] : stats) p->value = std::move(saved);
  return obj.bd;
}

MetricsRecord Trainer::evaluate(std::size_t iter) {
  const LossBreakdown bd = has_step_bd_ ? last_bd_ : probe_breakdown();

  Ema::Swap swap(ema_);
  MetricsRecord rec;
  rec.iter = iter;
  rec.acc_src[0] = accuracy(pair_.hyp[0], 1, source_);
  rec.acc_tgt[0] = accuracy(pair_.hyp[0], 1, target_);
  if (cfg_.single_hypothesis) {
    rec.agree = 1.0;
  } else {
    rec.acc_src[1] = accuracy(pair_.hyp[1], 2, source_);
    rec.acc_tgt[1] = accuracy(pair_.hyp[1], 2, target_);
    rec.agree = agreement_rate(pair_.hyp[0], pair_.hyp[1], target_);
  }
  rec.l_p = bd.l_p;
  rec.d_g = bd.d_g;
  rec.d_g_raw = bd.d_g_raw;
  for (int i = 0; i < 2; ++i) {
    rec.l_d[i] = bd.l_d[i];
    rec.l_y[i] = bd.l_y[i];
    rec.l_ce[i] = bd.l_ce[i];
  }
  return rec;
}

void Trainer::run(const MetricsSink& sink) {
  if (iter_ == 0 && sink) sink(evaluate(0));
  while (iter_ < cfg_.iterations) {
    DomainBatch batch = sampler_.next();
    train_step(batch);
    ++iter_;
    if (sink && (iter_ % cfg_.eval_every == 0 || iter_ == cfg_.iterations))
      sink(evaluate(iter_));
  }
}

Hypothesis Trainer::dirtt_refine(int hyp_index, const MetricsSink& sink) {
  if (hyp_index != 0 && hyp_index != 1)
    throw Error("dirtt: hypothesis index must be 0 or 1");
  if (cfg_.single_hypothesis && hyp_index != 0)
    throw Error("dirtt: single run has no second hypothesis");

  // Student and teacher both start from the Polyak-averaged solution.
  Hypothesis student;
  Hypothesis teacher;
  {
    Ema::Swap swap(ema_);
    student = clone_hypothesis(pair_, hyp_index);
    teacher = clone_hypothesis(pair_, hyp_index);
  }

  std::vector<ParamPtr> student_params, teacher_params;
  student.g.collect_params(student_params);
  student.h.collect_params(student_params);
  teacher.g.collect_params(teacher_params);
  teacher.h.collect_params(teacher_params);

  std::vector<ParamPtr> trainable;
  for (const auto& p : student_params)
    if (p->trainable) trainable.push_back(p);
  Adam opt(cfg_.adam, trainable);
  Ema ema(cfg_.ema_momentum, student_params);

  BatchSampler sampler(nullptr, &target_, cfg_.batch_size,
                       derive_seed(cfg_.seed, 31 + static_cast<std::uint64_t>(hyp_index)));
  Rng rng(derive_seed(cfg_.seed, 41 + static_cast<std::uint64_t>(hyp_index)));

  const auto sync_teacher = [&] {
    for (std::size_t i = 0; i < teacher_params.size(); ++i) {
      if (!student_params[i]->trainable) {
        teacher_params[i]->value = student_params[i]->value;
        continue;
      }
      teacher_params[i]->value = ema.shadow(*student_params[i]);
    }
  };

  for (std::size_t step = 1; step <= cfg_.dirt_iterations; ++step) {
    Tensor x_t = sampler.next_target_only();
    Tensor teacher_probs = eval_probs(teacher, 1, x_t);

    Tape tape;
    Binder binder(&tape);
    ObjectiveOut obj =
        dirtt_loss(student, tape, binder, teacher_probs, x_t, cfg_.weights, &rng);
    Gradients grads = tape.backward(obj.loss);
    opt.step([&](const Parameter& p) -> const std::vector<double>& {
      const Tensor* leaf = binder.leaf_of(&p);
      if (!leaf)
        throw Error("dirtt: parameter " + p.name + " missing from the graph");
      return grads.at(*leaf);
    });
    ema.update();

    if (step % cfg_.dirt_refresh_interval == 0) sync_teacher();

    if (sink && (step % cfg_.eval_every == 0 || step == cfg_.dirt_iterations)) {
      Ema::Swap swap(ema);
      MetricsRecord rec;
      rec.iter = step;
      rec.acc_tgt[0] = accuracy(student, 1, target_);
      rec.acc_src[0] = accuracy(student, 1, source_);
      rec.agree = 1.0;
      rec.l_ce[0] = obj.bd.l_ce[0];
      sink(rec);
    }
  }

  // Hand back the Polyak-averaged student.
  for (const auto& p : student_params)
    if (p->trainable) p->value = ema.shadow(*p);
  return student;
}

// ---------------------------------------------------------------------------
// Persistence.
// ---------------------------------------------------------------------------

namespace {

std::vector<std::uint64_t> rng_words(const Rng& rng) {
  const auto s = rng.state();
  return {s.begin(), s.end()};
}

void restore_rng(Rng& rng, const CheckpointEntry& e) {
  if (e.u64.size() != 4)
    throw IoError("checkpoint: rng entry " + e.name + " must hold 4 words");
  rng.set_state({e.u64[0], e.u64[1], e.u64[2], e.u64[3]});
}

void restore_values(const Checkpoint& ckpt, const std::string& key,
                    const Shape& shape, std::vector<double>& out) {
  const CheckpointEntry& e = ckpt.find(key);
  if (e.dims != shape)
    throw ShapeError("checkpoint: tensor " + key + " has shape " +
                     shape_str(e.dims) + ", expected " + shape_str(shape));
  out = e.f64;
}

}  // namespace

void Trainer::save(const std::string& path) const {
  Checkpoint ckpt;
  ckpt.iteration = iter_;
  for (const auto& p : pair_.all_params())
    ckpt.add_f64("param/" + p->name, p->shape, p->value);
  for (const auto& p : ema_.params())
    ckpt.add_f64("ema/" + p->name, p->shape, ema_.shadow(*p));
  const auto add_adam = [&](const char* tag, Adam& opt) {
    Checkpoint& c = ckpt;
    c.add_u64(std::string(tag) + "/t", {opt.t()});
    for (std::size_t i = 0; i < opt.params().size(); ++i) {
      const auto& p = opt.params()[i];
      c.add_f64(std::string(tag) + "/m/" + p->name, p->shape, opt.moment1(i));
      c.add_f64(std::string(tag) + "/v/" + p->name, p->shape, opt.moment2(i));
    }
  };
  add_adam("adam_cls", *opt_cls_);
  add_adam("adam_d", *opt_disc_);
  ckpt.add_u64("rng/h1", rng_words(rng_h1_));
  ckpt.add_u64("rng/h2", rng_words(rng_h2_));
  ckpt.add_u64("rng/probe", rng_words(rng_probe_));
  const auto s = sampler_.state();
  ckpt.add_u64("sampler", {s.src_epoch, s.src_cursor, s.tgt_epoch, s.tgt_cursor});
  save_checkpoint(path, ckpt);
}

void Trainer::load(const std::string& path) {
  Checkpoint ckpt = load_checkpoint(path);
  iter_ = ckpt.iteration;
  for (const auto& p : pair_.all_params())
    restore_values(ckpt, "param/" + p->name, p->shape, p->value);
  for (const auto& p : ema_.params())
    restore_values(ckpt, "ema/" + p->name, p->shape, ema_.shadow_mutable(*p));
  const auto load_adam = [&](const char* tag, Adam& opt) {
    const CheckpointEntry& t = ckpt.find(std::string(tag) + "/t");
    if (t.u64.size() != 1)
      throw IoError("checkpoint: malformed " + std::string(tag) + "/t");
    opt.set_t(t.u64[0]);
    for (std::size_t i = 0; i < opt.params().size(); ++i) {
      const auto& p = opt.params()[i];
      restore_values(ckpt, std::string(tag) + "/m/" + p->name, p->shape,
                     opt.moment1(i));
      restore_values(ckpt, std::string(tag) + "/v/" + p->name, p->shape,
                     opt.moment2(i));
    }
  };
  load_adam("adam_cls", *opt_cls_);
  load_adam("adam_d", *opt_disc_);
  restore_rng(rng_h1_, ckpt.find("rng/h1"));
  restore_rng(rng_h2_, ckpt.find("rng/h2"));
  restore_rng(rng_probe_, ckpt.find("rng/probe"));
  const CheckpointEntry& s = ckpt.find("sampler");
  if (s.u64.size() != 4) throw IoError("checkpoint: malformed sampler state");
  sampler_.set_state({s.u64[0], s.u64[1], s.u64[2], s.u64[3]});
  has_step_bd_ = iter_ > 0;
}

}  // namespace coda
