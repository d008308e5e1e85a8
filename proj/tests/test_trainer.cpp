#include <doctest.h>

#include <cstdio>
#include <fstream>

#include "coda/checkpoint.hpp"
#include "coda/trainer.hpp"
#include "oracles.hpp"

using namespace coda;

namespace {

TrainConfig small_config(std::uint64_t seed = 0) {
  TrainConfig cfg;
  cfg.iterations = 10;
  cfg.batch_size = 16;
  cfg.eval_every = 5;
  cfg.seed = seed;
  cfg.arch.input = ArchConfig::InputKind::kVector;
  cfg.arch.in_dim = 2;
  cfg.arch.hidden = 16;
  cfg.arch.classes = 2;
  cfg.arch.disc_hidden = 16;
  cfg.weights.lambda_d = 0.01;
  cfg.weights.lambda_p = 0.01;
  cfg.weights.lambda_div = 0.01;
  cfg.weights.lambda_ce = 0.05;
  cfg.weights.lambda_sv = 0.2;
  cfg.weights.eps_vat_source = 0.3;
  cfg.weights.eps_vat_target = 0.3;
  cfg.weights.nu = 10.0;
  return cfg;
}

std::pair<DomainDataset, DomainDataset> moons(std::uint64_t seed,
                                              std::size_t per_class = 64) {
  ShiftSpec spec;
  spec.samples_per_class = per_class;
  spec.rotation_deg = 35.0;
  spec.seed = seed;
  return gen_pair(spec);
}

std::vector<std::vector<double>> snapshot(const std::vector<ParamPtr>& ps) {
  std::vector<std::vector<double>> out;
  for (const auto& p : ps) out.push_back(p->value);
  return out;
}

}  // namespace

TEST_CASE("update routing: each phase only moves its own parameters") {
  auto [src, tgt] = moons(1);
  TrainConfig cfg = small_config();
  Trainer trainer(cfg, src, tgt);

  // Full step moves both groups...
  const auto cls_before = snapshot(trainer.pair().classifier_params());
  const auto d_before = snapshot(trainer.pair().discriminator_params());
  trainer.train_step(trainer.next_batch());
  CHECK(snapshot(trainer.pair().classifier_params()) != cls_before);
  CHECK(snapshot(trainer.pair().discriminator_params()) != d_before);

  // ...while the phases in isolation respect the routing contract.
  {
    Tape tape;
    Binder binder(&tape);
    Rng r1(1), r2(2);
    DomainBatch batch = trainer.next_batch();
    const auto cls_snap = snapshot(trainer.pair().classifier_params());
    ObjectiveOut disc = discriminator_phase(tape, binder, trainer.pair(), false,
                                            batch, &r1, &r2);
    Gradients grads = tape.backward(disc.loss);
    for (const auto& p : trainer.pair().classifier_params())
      CHECK(binder.leaf_of(p.get()) == nullptr);
    CHECK(snapshot(trainer.pair().classifier_params()) == cls_snap);
  }
  {
    Tape tape;
    Binder binder(&tape);
    for (const auto& p : trainer.pair().discriminator_params())
      binder.freeze(p.get());
    Rng r1(3), r2(4);
    DomainBatch batch = trainer.next_batch();
    ObjectiveOut obj = coda_total(tape, binder, trainer.pair(), false, batch,
                                  cfg.weights, &r1, &r2);
    Gradients grads = tape.backward(obj.loss);
    for (const auto& p : trainer.pair().discriminator_params()) {
      const Tensor* leaf = binder.leaf_of(p.get());
      REQUIRE(leaf);
      CHECK(!grads.has(*leaf));  // frozen: no gradient slot at all
    }
  }
}

TEST_CASE("two runs with the same seed are bit-identical") {
  auto [src, tgt] = moons(2);
  TrainConfig cfg = small_config(7);

  Trainer a(cfg, src, tgt);
  Trainer b(cfg, src, tgt);
  for (int i = 0; i < 5; ++i) {
    const LossBreakdown bda = a.train_step(a.next_batch());
    const LossBreakdown bdb = b.train_step(b.next_batch());
    CHECK(bda.coda_total == bdb.coda_total);
    CHECK(bda.l_y[0] == bdb.l_y[0]);
    CHECK(bda.d_g == bdb.d_g);
  }
  const auto pa = snapshot(a.pair().all_params());
  const auto pb = snapshot(b.pair().all_params());
  CHECK(pa == pb);
}

TEST_CASE("zero couplings and identical seeds keep the hypotheses identical") {
  auto [src, tgt] = moons(3);
  TrainConfig cfg = small_config(11);
  cfg.weights.lambda_d = 0.0;
  cfg.weights.lambda_p = 0.0;
  cfg.weights.lambda_div = 0.0;
  cfg.identical_hypotheses = true;
  cfg.iterations = 8;
  Trainer trainer(cfg, src, tgt);
  for (int i = 0; i < 8; ++i) trainer.train_step(trainer.next_batch());

  std::vector<ParamPtr> p1, p2;
  trainer.pair().hyp[0].g.collect_params(p1);
  trainer.pair().hyp[0].h.collect_params(p1);
  trainer.pair().hyp[1].g.collect_params(p2);
  trainer.pair().hyp[1].h.collect_params(p2);
  REQUIRE(p1.size() == p2.size());
  for (std::size_t i = 0; i < p1.size(); ++i) CHECK(p1[i]->value == p2[i]->value);
}

TEST_CASE("discriminator-only steps climb L_disc on frozen features") {
  Rng rng(5);
  ArchConfig arch;
  arch.input = ArchConfig::InputKind::kVector;
  arch.in_dim = 2;
  arch.hidden = 8;
  arch.classes = 2;
  arch.disc_hidden = 16;
  HypothesisPair pair = make_single_hypothesis(arch, 13);

  // Frozen random features from two offset clouds.
  Tensor src_feats = oracles::random_tensor({32, 8}, rng, -1.0, 1.0);
  std::vector<double> shifted = src_feats.values();
  Rng rng2(6);
  for (double& v : shifted) v = v * 0.9 + 0.8 + 0.1 * rng2.normal();
  Tensor tgt_feats({32, 8}, std::move(shifted));

  std::vector<ParamPtr> d_params;
  pair.hyp[0].d.collect_params(d_params);
  std::vector<ParamPtr> trainable;
  for (const auto& p : d_params)
    if (p->trainable) trainable.push_back(p);
  Adam opt({.lr = 1e-3, .beta1 = 0.5, .beta2 = 0.999, .eps = 1e-8}, trainable);

  double prev = -1e30;
  int increases = 0;
  const int steps = 200;
  for (int i = 0; i < steps; ++i) {
    Tape tape;
    Binder binder(&tape);
    ForwardCtx ctx;
    ctx.tape = &tape;
    ctx.binder = &binder;
    ctx.mode = Mode::kTrain;
    Tensor d_src = pair.hyp[0].d.forward(ctx, src_feats);
    Tensor d_tgt = pair.hyp[0].d.forward(ctx, tgt_feats);
    Tensor l_disc = discriminator_loss(d_src, d_tgt);
    const double value = l_disc.scalar();
    if (i > 0 && value > prev) ++increases;
    prev = value;
    Gradients grads = tape.backward(scale(l_disc, -1.0));
    opt.step([&](const Parameter& p) -> const std::vector<double>& {
      return grads.at(*binder.leaf_of(&p));
    });
  }
  CHECK(increases >= (steps - 1) * 95 / 100);
}

TEST_CASE("run with zero iterations emits only the initial record") {
  auto [src, tgt] = moons(4, 32);
  TrainConfig cfg = small_config(3);
  cfg.iterations = 0;
  Trainer trainer(cfg, src, tgt);
  std::vector<MetricsRecord> records;
  trainer.run([&](const MetricsRecord& r) { records.push_back(r); });
  REQUIRE(records.size() == 1);
  CHECK(records[0].iter == 0);
}

TEST_CASE("metrics cadence: initial, every eval_every, and final") {
  auto [src, tgt] = moons(5, 32);
  TrainConfig cfg = small_config(4);
  cfg.iterations = 12;
  cfg.eval_every = 5;
  Trainer trainer(cfg, src, tgt);
  std::vector<std::size_t> iters;
  trainer.run([&](const MetricsRecord& r) { iters.push_back(r.iter); });
  CHECK(iters == std::vector<std::size_t>{0, 5, 10, 12});
}

TEST_CASE("checkpoint round-trip continues training bit-exactly") {
  auto [src, tgt] = moons(6);
  TrainConfig cfg = small_config(17);
  cfg.iterations = 6;

  const std::string path = "/tmp/coda_test_ckpt.bin";

  // Reference: 6 + 4 steps straight through.
  Trainer ref(cfg, src, tgt);
  ref.run(nullptr);
  Trainer ref2(cfg, src, tgt);
  ref2.run(nullptr);
  ref2.save(path);

  // Resume from the checkpoint in a fresh trainer and run 4 more steps each.
  Trainer resumed(cfg, src, tgt);
  resumed.load(path);
  for (int i = 0; i < 4; ++i) {
    const LossBreakdown a = ref.train_step(ref.next_batch());
    const LossBreakdown b = resumed.train_step(resumed.next_batch());
    CHECK(a.coda_total == b.coda_total);
  }
  const auto pa = snapshot(ref.pair().all_params());
  const auto pb = snapshot(resumed.pair().all_params());
  CHECK(pa == pb);
  std::remove(path.c_str());
}

TEST_CASE("checkpoint: corrupted magic raises a magic error") {
  auto [src, tgt] = moons(7, 16);
  TrainConfig cfg = small_config(19);
  Trainer trainer(cfg, src, tgt);
  const std::string path = "/tmp/coda_bad_magic.bin";
  trainer.save(path);
  {
    std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
    f.seekp(0);
    f.write("XXXX", 4);
  }
  CHECK_THROWS_WITH_AS(trainer.load(path), doctest::Contains("magic"), IoError);
  std::remove(path.c_str());
}

TEST_CASE("checkpoint: truncated file raises a truncation error") {
  auto [src, tgt] = moons(8, 16);
  TrainConfig cfg = small_config(23);
  Trainer trainer(cfg, src, tgt);
  const std::string path = "/tmp/coda_truncated.bin";
  trainer.save(path);
  {
    std::ifstream in(path, std::ios::binary);
    std::vector<char> bytes((std::istreambuf_iterator<char>(in)),
                            std::istreambuf_iterator<char>());
    bytes.resize(bytes.size() / 2);
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  }
  CHECK_THROWS_WITH_AS(trainer.load(path), doctest::Contains("truncated"),
                       IoError);
  std::remove(path.c_str());
}

TEST_CASE("checkpoint: architecture mismatch names the offending tensor") {
  auto [src, tgt] = moons(9, 16);
  TrainConfig cfg = small_config(29);
  Trainer trainer(cfg, src, tgt);
  const std::string path = "/tmp/coda_archmismatch.bin";
  trainer.save(path);

  TrainConfig other = cfg;
  other.arch.hidden = 24;
  Trainer wider(other, src, tgt);
  CHECK_THROWS_WITH_AS(wider.load(path), doctest::Contains("g1/dense0/W"),
                       ShapeError);
  std::remove(path.c_str());
}

TEST_CASE("dirtt: zero iterations returns the EMA weights unchanged") {
  auto [src, tgt] = moons(10);
  TrainConfig cfg = small_config(31);
  cfg.iterations = 5;
  cfg.dirt_iterations = 0;
  Trainer trainer(cfg, src, tgt);
  trainer.run(nullptr);

  Hypothesis refined = trainer.dirtt_refine(0, nullptr);
  std::vector<ParamPtr> refined_params;
  refined.g.collect_params(refined_params);
  refined.h.collect_params(refined_params);

  Ema::Swap swap(trainer.ema());
  std::vector<ParamPtr> expect;
  trainer.pair().hyp[0].g.collect_params(expect);
  trainer.pair().hyp[0].h.collect_params(expect);
  REQUIRE(refined_params.size() == expect.size());
  for (std::size_t i = 0; i < expect.size(); ++i)
    CHECK(refined_params[i]->value == expect[i]->value);
}

TEST_CASE("dirtt: a huge KL anchor pins the student to the teacher") {
  auto [src, tgt] = moons(11);
  TrainConfig cfg = small_config(37);
  cfg.iterations = 5;
  cfg.dirt_iterations = 60;
  cfg.dirt_refresh_interval = 1000;  // no refresh within the run
  cfg.adam.lr = 1e-4;
  cfg.weights.beta_dirt = 1e6;
  cfg.weights.lambda_ce = 0.05;
  cfg.weights.eps_vat_target = 0.3;
  Trainer trainer(cfg, src, tgt);
  trainer.run(nullptr);

  std::vector<std::vector<double>> init;
  {
    Ema::Swap swap(trainer.ema());
    std::vector<ParamPtr> ps;
    trainer.pair().hyp[0].g.collect_params(ps);
    trainer.pair().hyp[0].h.collect_params(ps);
    init = snapshot(ps);
  }

  Hypothesis refined = trainer.dirtt_refine(0, nullptr);
  std::vector<ParamPtr> ps;
  refined.g.collect_params(ps);
  refined.h.collect_params(ps);
  double max_move = 0.0;
  for (std::size_t i = 0; i < ps.size(); ++i)
    for (std::size_t j = 0; j < ps[i]->value.size(); ++j)
      max_move = std::max(max_move, std::abs(ps[i]->value[j] - init[i][j]));
  CHECK(max_move <= 1e-3);
}

TEST_CASE("train config validation") {
  TrainConfig cfg = small_config();
  cfg.batch_size = 1;
  CHECK_THROWS_AS(cfg.validate(), ConfigError);

  TrainConfig sh = small_config();
  sh.sharing = SharingMode::kSharedStochastic;
  sh.weights.lambda_div = 0.01;
  CHECK_THROWS_AS(sh.validate(), ConfigError);

  TrainConfig single = small_config();
  single.single_hypothesis = true;
  CHECK_THROWS_AS(single.validate(), ConfigError);  // pair weights nonzero
}
