#include "coda/layers.hpp"

#include <cmath>

#include "coda/common.hpp"

namespace coda {

ParamPtr make_param(std::string name, Shape shape, std::vector<double> value,
                    bool trainable) {
  if (shape_size(shape) != value.size())
    throw ShapeError("parameter " + name + ": shape " + shape_str(shape) +
                     " does not match " + std::to_string(value.size()) +
                     " values");
  auto p = std::make_shared<Parameter>();
  p->name = std::move(name);
  p->shape = std::move(shape);
  p->value = std::move(value);
  p->trainable = trainable;
  return p;
}

Tensor Binder::bind(const ParamPtr& p) {
  auto it = bound_.find(p.get());
  if (it != bound_.end()) return it->second;
  Tensor value(p->shape, p->value);
  Tensor leaf;
  if (tape_) {
    const bool with_grad = p->trainable && !frozen_.count(p.get());
    leaf = tape_->leaf(value, with_grad);
  } else {
    leaf = value;
  }
  bound_.emplace(p.get(), leaf);
  return leaf;
}

const Tensor* Binder::leaf_of(const Parameter* p) const {
  auto it = bound_.find(p);
  return it == bound_.end() ? nullptr : &it->second;
}

Tensor Net::forward(ForwardCtx& ctx, Tensor x) const {
  for (const auto& layer : layers) x = layer->forward(ctx, x);
  return x;
}

void Net::collect_params(std::vector<ParamPtr>& out) const {
  for (const auto& layer : layers) layer->collect_params(out);
}

Net Net::clone(int keep_hyp_set) const {
  Net copy;
  for (const auto& layer : layers) copy.layers.push_back(layer->clone(keep_hyp_set));
  return copy;
}

namespace {

// Fan-in-scaled Gaussian init for relu stacks.
std::vector<double> he_init(std::size_t n, std::size_t fan_in, Rng& rng) {
  const double stddev = std::sqrt(2.0 / static_cast<double>(fan_in));
  std::vector<double> v(n);
  for (double& x : v) x = rng.normal(0.0, stddev);
  return v;
}

Tensor bind_or_value(ForwardCtx& ctx, const ParamPtr& p) {
  if (ctx.binder) return ctx.binder->bind(p);
  return Tensor(p->shape, p->value);
}

}  // namespace

DenseLayer::DenseLayer(const std::string& name, std::size_t in,
                       std::size_t out, Rng& rng) {
  weight = make_param(name + "/W", {in, out}, he_init(in * out, in, rng));
  bias = make_param(name + "/b", {out}, std::vector<double>(out, 0.0));
}

Tensor DenseLayer::forward(ForwardCtx& ctx, const Tensor& x) {
  return add_rowvec(matmul(x, bind_or_value(ctx, weight)),
                    bind_or_value(ctx, bias));
}

void DenseLayer::collect_params(std::vector<ParamPtr>& out) const {
  out.push_back(weight);
  out.push_back(bias);
}

LayerPtr DenseLayer::clone(int) const {
  auto w = make_param(weight->name, weight->shape, weight->value);
  auto b = make_param(bias->name, bias->shape, bias->value);
  return std::make_shared<DenseLayer>(std::move(w), std::move(b));
}

Conv2dLayer::Conv2dLayer(const std::string& name, std::size_t in_ch,
                         std::size_t out_ch, std::size_t kernel, Padding pad,
                         Rng& rng)
    : padding(pad) {
  const std::size_t fan_in = in_ch * kernel * kernel;
  weight = make_param(name + "/W", {out_ch, in_ch, kernel, kernel},
                      he_init(out_ch * fan_in, fan_in, rng));
  bias = make_param(name + "/b", {out_ch}, std::vector<double>(out_ch, 0.0));
}

Tensor Conv2dLayer::forward(ForwardCtx& ctx, const Tensor& x) {
  return add_chanvec(conv2d(x, bind_or_value(ctx, weight), padding),
                     bind_or_value(ctx, bias));
}

void Conv2dLayer::collect_params(std::vector<ParamPtr>& out) const {
  out.push_back(weight);
  out.push_back(bias);
}

LayerPtr Conv2dLayer::clone(int) const {
  auto w = make_param(weight->name, weight->shape, weight->value);
  auto b = make_param(bias->name, bias->shape, bias->value);
  return std::make_shared<Conv2dLayer>(std::move(w), std::move(b), padding);
}

BatchNormLayer::BatchNormLayer(const std::string& name, std::size_t features,
                               bool cond, double mom, double e)
    : conditional(cond), momentum(mom), eps(e) {
  const int sets = conditional ? 2 : 1;
  for (int s = 0; s < sets; ++s) {
    const std::string suffix = conditional ? std::to_string(s + 1) : "";
    gamma[s] = make_param(name + "/gamma" + suffix, {features},
                          std::vector<double>(features, 1.0));
    beta[s] = make_param(name + "/beta" + suffix, {features},
                         std::vector<double>(features, 0.0));
    run_mean[s] = make_param(name + "/run_mean" + suffix, {features},
                             std::vector<double>(features, 0.0), false);
    run_var[s] = make_param(name + "/run_var" + suffix, {features},
                            std::vector<double>(features, 1.0), false);
  }
}

int BatchNormLayer::set_index(const ForwardCtx& ctx) const {
  if (!conditional) return 0;
  if (ctx.hypothesis_id != 1 && ctx.hypothesis_id != 2)
    throw Error("batchnorm: hypothesis id must be 1 or 2");
  return ctx.hypothesis_id - 1;
}

Tensor BatchNormLayer::forward(ForwardCtx& ctx, const Tensor& x) {
  const int s = set_index(ctx);
  const std::size_t features = gamma[s]->shape[0];
  const bool is_image = x.shape.size() == 4;
  const std::size_t got = is_image ? x.shape[1]
                                   : (x.shape.size() == 2 ? x.shape[1] : 0);
  if (got != features)
    throw ShapeError("batchnorm: input " + shape_str(x.shape) +
                     " does not carry " + std::to_string(features) +
                     " features");

  if (ctx.mode == Mode::kTrain) {
    Tensor y = batchnorm_train(x, bind_or_value(ctx, gamma[s]),
                               bind_or_value(ctx, beta[s]), eps);
    if (ctx.update_stats) {
      // Recompute the batch statistics on raw values for the running update.
      const std::size_t outer = x.shape[0];
      const std::size_t inner = is_image ? x.shape[2] * x.shape[3] : 1;
      const double count = static_cast<double>(outer * inner);
      for (std::size_t f = 0; f < features; ++f) {
        double m = 0.0;
        for (std::size_t o = 0; o < outer; ++o) {
          const std::size_t base = (o * features + f) * inner;
          for (std::size_t i = 0; i < inner; ++i) m += x.values()[base + i];
        }
        m /= count;
        double var = 0.0;
        for (std::size_t o = 0; o < outer; ++o) {
          const std::size_t base = (o * features + f) * inner;
          for (std::size_t i = 0; i < inner; ++i) {
            const double d = x.values()[base + i] - m;
            var += d * d;
          }
        }
        var /= count;
        run_mean[s]->value[f] = momentum * run_mean[s]->value[f] + (1 - momentum) * m;
        run_var[s]->value[f] = momentum * run_var[s]->value[f] + (1 - momentum) * var;
      }
    }
    return y;
  }

  // Eval mode: normalize by running statistics. Never recorded on a tape.
  if (ctx.tape)
    throw Error("batchnorm: eval-mode forward inside an active tape");
  std::vector<double> out(x.size());
  const std::size_t outer = x.shape[0];
  const std::size_t inner = is_image ? x.shape[2] * x.shape[3] : 1;
  for (std::size_t f = 0; f < features; ++f) {
    const double invstd = 1.0 / std::sqrt(run_var[s]->value[f] + eps);
    const double sc = gamma[s]->value[f] * invstd;
    const double sh = beta[s]->value[f] - run_mean[s]->value[f] * sc;
    for (std::size_t o = 0; o < outer; ++o) {
      const std::size_t base = (o * features + f) * inner;
      for (std::size_t i = 0; i < inner; ++i)
        out[base + i] = x.values()[base + i] * sc + sh;
    }
  }
  return Tensor(x.shape, std::move(out));
}

void BatchNormLayer::collect_params(std::vector<ParamPtr>& out) const {
  const int sets = conditional ? 2 : 1;
  for (int s = 0; s < sets; ++s) {
    out.push_back(gamma[s]);
    out.push_back(beta[s]);
    out.push_back(run_mean[s]);
    out.push_back(run_var[s]);
  }
}

LayerPtr BatchNormLayer::clone(int keep_hyp_set) const {
  auto copy = std::shared_ptr<BatchNormLayer>(new BatchNormLayer());
  copy->conditional = false;
  copy->momentum = momentum;
  copy->eps = eps;
  const int s = conditional ? keep_hyp_set - 1 : 0;
  copy->gamma[0] = make_param(gamma[s]->name, gamma[s]->shape, gamma[s]->value);
  copy->beta[0] = make_param(beta[s]->name, beta[s]->shape, beta[s]->value);
  copy->run_mean[0] = make_param(run_mean[s]->name, run_mean[s]->shape,
                                 run_mean[s]->value, false);
  copy->run_var[0] = make_param(run_var[s]->name, run_var[s]->shape,
                                run_var[s]->value, false);
  return copy;
}

DropoutLayer::DropoutLayer(double r) : rate(r) {
  if (rate < 0 || rate >= 1)
    throw Error("dropout: rate must lie in [0, 1), got " +
                std::to_string(rate));
}

Tensor DropoutLayer::forward(ForwardCtx& ctx, const Tensor& x) {
  if (ctx.mode == Mode::kEval || ctx.stochastic_eval) return x;
  if (!ctx.rng) throw Error("dropout: train-mode forward without an rng");
  const double keep = 1.0 - rate;
  std::vector<double> mask(x.size());
  for (double& m : mask)
    m = ctx.rng->uniform01() <= rate ? 0.0 : 1.0 / keep;
  return mul(x, Tensor(x.shape, std::move(mask)));
}

GaussianNoiseLayer::GaussianNoiseLayer(double s) : stddev(s) {
  if (stddev < 0)
    throw Error("gaussian_noise: stddev must be non-negative");
}

Tensor GaussianNoiseLayer::forward(ForwardCtx& ctx, const Tensor& x) {
  if (ctx.mode == Mode::kEval || ctx.stochastic_eval) return x;
  if (!ctx.rng) throw Error("gaussian_noise: train-mode forward without an rng");
  std::vector<double> noise(x.size());
  for (double& n : noise) n = ctx.rng->normal(0.0, stddev);
  return add(x, Tensor(x.shape, std::move(noise)));
}

Tensor ReluLayer::forward(ForwardCtx&, const Tensor& x) { return relu(x); }

Tensor SigmoidLayer::forward(ForwardCtx&, const Tensor& x) {
  return sigmoid(x);
}

Tensor MaxPool2Layer::forward(ForwardCtx&, const Tensor& x) {
  return maxpool2(x);
}

Tensor GlobalAvgPoolLayer::forward(ForwardCtx&, const Tensor& x) {
  return global_avg_pool(x);
}

Tensor FlattenLayer::forward(ForwardCtx&, const Tensor& x) {
  if (x.shape.size() == 2) return x;
  return reshape(x, {x.shape[0], x.size() / x.shape[0]});
}

Tensor instance_norm(const Tensor& x) {
  if (x.shape.size() != 4)
    throw ShapeError("instance_norm: expected NCHW batch, got " +
                     shape_str(x.shape));
  const std::size_t planes = x.shape[0] * x.shape[1];
  const std::size_t hw = x.shape[2] * x.shape[3];
  std::vector<double> out(x.size());
  for (std::size_t p = 0; p < planes; ++p) {
    const double* in = x.values().data() + p * hw;
    double m = 0.0;
    for (std::size_t i = 0; i < hw; ++i) m += in[i];
    m /= static_cast<double>(hw);
    double var = 0.0;
    for (std::size_t i = 0; i < hw; ++i) var += (in[i] - m) * (in[i] - m);
    var /= static_cast<double>(hw);
    const double invstd = 1.0 / std::sqrt(var + kInEps);
    for (std::size_t i = 0; i < hw; ++i)
      out[p * hw + i] = (in[i] - m) * invstd;
  }
  return Tensor(x.shape, std::move(out));
}

const char* sharing_mode_name(SharingMode mode) {
  switch (mode) {
    case SharingMode::kIndependent: return "independent";
    case SharingMode::kConditionalBn: return "conditional-bn";
    case SharingMode::kSharedStochastic: return "shared-stochastic";
  }
  return "?";
}

std::size_t ArchConfig::feature_dim() const {
  if (input == InputKind::kVector) return hidden;
  // One 2x2 max-pool halves each spatial dim; the last two convs are 2x wide.
  return 2 * conv_channels * (height / 2) * (width / 2);
}

void Hypothesis::collect_params(std::vector<ParamPtr>& out) const {
  g.collect_params(out);
  h.collect_params(out);
  d.collect_params(out);
}

namespace {

std::vector<ParamPtr> dedupe(const std::vector<ParamPtr>& params) {
  std::vector<ParamPtr> out;
  std::unordered_set<const Parameter*> seen;
  for (const auto& p : params)
    if (seen.insert(p.get()).second) out.push_back(p);
  return out;
}

Net build_generator(const ArchConfig& a, const std::string& prefix,
                    bool conditional, Rng& rng) {
  Net net;
  if (a.input == ArchConfig::InputKind::kVector) {
    net.layers = {
        std::make_shared<DenseLayer>(prefix + "/dense0", a.in_dim, a.hidden, rng),
        std::make_shared<BatchNormLayer>(prefix + "/bn0", a.hidden, conditional,
                                         kBnMomentum, kBnEps),
        std::make_shared<ReluLayer>(),
        std::make_shared<GaussianNoiseLayer>(a.noise_stddev),
        std::make_shared<DenseLayer>(prefix + "/dense1", a.hidden, a.hidden, rng),
        std::make_shared<BatchNormLayer>(prefix + "/bn1", a.hidden, conditional,
                                         kBnMomentum, kBnEps),
        std::make_shared<ReluLayer>(),
        std::make_shared<DropoutLayer>(a.dropout_rate),
    };
    return net;
  }
  const std::size_t c1 = a.conv_channels, c2 = 2 * a.conv_channels;
  net.layers = {
      std::make_shared<Conv2dLayer>(prefix + "/conv0", a.channels, c1, 3,
                                    Padding::kSame, rng),
      std::make_shared<BatchNormLayer>(prefix + "/bn0", c1, conditional,
                                       kBnMomentum, kBnEps),
      std::make_shared<ReluLayer>(),
      std::make_shared<MaxPool2Layer>(),
      std::make_shared<Conv2dLayer>(prefix + "/conv1", c1, c2, 3,
                                    Padding::kSame, rng),
      std::make_shared<BatchNormLayer>(prefix + "/bn1", c2, conditional,
                                       kBnMomentum, kBnEps),
      std::make_shared<ReluLayer>(),
      std::make_shared<GaussianNoiseLayer>(a.noise_stddev),
      std::make_shared<Conv2dLayer>(prefix + "/conv2", c2, c2, 3,
                                    Padding::kSame, rng),
      std::make_shared<BatchNormLayer>(prefix + "/bn2", c2, conditional,
                                       kBnMomentum, kBnEps),
      std::make_shared<ReluLayer>(),
      std::make_shared<DropoutLayer>(a.dropout_rate),
  };
  return net;
}

// Classifier head; produces logits, softmax applied by the caller.
Net build_head(const ArchConfig& a, const std::string& prefix,
               bool conditional, Rng& rng) {
  Net net;
  if (a.input == ArchConfig::InputKind::kVector) {
    net.layers = {
        std::make_shared<BatchNormLayer>(prefix + "/bn0", a.hidden, conditional,
                                         kBnMomentum, kBnEps),
        std::make_shared<DenseLayer>(prefix + "/dense0", a.hidden, a.classes,
                                     rng),
    };
    return net;
  }
  const std::size_t c2 = 2 * a.conv_channels;
  net.layers = {
      std::make_shared<Conv2dLayer>(prefix + "/conv0", c2, c2, 3,
                                    Padding::kSame, rng),
      std::make_shared<BatchNormLayer>(prefix + "/bn0", c2, conditional,
                                       kBnMomentum, kBnEps),
      std::make_shared<ReluLayer>(),
      std::make_shared<GlobalAvgPoolLayer>(),
      std::make_shared<DenseLayer>(prefix + "/dense0", c2, a.classes, rng),
  };
  return net;
}

Net build_discriminator(const ArchConfig& a, const std::string& prefix,
                        Rng& rng) {
  Net net;
  net.layers = {
      std::make_shared<FlattenLayer>(),
      std::make_shared<DenseLayer>(prefix + "/dense0", a.feature_dim(),
                                   a.disc_hidden, rng),
      std::make_shared<ReluLayer>(),
      std::make_shared<DenseLayer>(prefix + "/dense1", a.disc_hidden, 1, rng),
      std::make_shared<SigmoidLayer>(),
  };
  return net;
}

}  // namespace

HypothesisPair make_hypothesis_pair(const ArchConfig& arch, SharingMode mode,
                                    std::uint64_t seed, bool identical_init) {
  HypothesisPair pair;
  pair.mode = mode;

  Rng rng1(derive_seed(seed, 101));
  Rng rng2(identical_init ? derive_seed(seed, 101) : derive_seed(seed, 102));
  Rng rng_d1(derive_seed(seed, 103));
  Rng rng_d2(derive_seed(seed, 104));

  const bool conditional = mode == SharingMode::kConditionalBn;
  pair.hyp[0].g = build_generator(arch, "g1", conditional, rng1);
  pair.hyp[0].h = build_head(arch, "h1", conditional, rng1);
  if (mode == SharingMode::kIndependent) {
    pair.hyp[1].g = build_generator(arch, "g2", false, rng2);
    pair.hyp[1].h = build_head(arch, "h2", false, rng2);
  } else {
    // Shared layer objects; conditional batch-norm dispatches on the
    // hypothesis id at forward time.
    pair.hyp[1].g = pair.hyp[0].g;
    pair.hyp[1].h = pair.hyp[0].h;
  }
  pair.hyp[0].d = build_discriminator(arch, "d1", rng_d1);
  pair.hyp[1].d = build_discriminator(arch, "d2", rng_d2);
  return pair;
}

HypothesisPair make_single_hypothesis(const ArchConfig& arch,
                                      std::uint64_t seed) {
  HypothesisPair pair;
  pair.mode = SharingMode::kIndependent;
  Rng rng1(derive_seed(seed, 101));
  Rng rng_d1(derive_seed(seed, 103));
  pair.hyp[0].g = build_generator(arch, "g1", false, rng1);
  pair.hyp[0].h = build_head(arch, "h1", false, rng1);
  pair.hyp[0].d = build_discriminator(arch, "d1", rng_d1);
  return pair;
}

std::vector<ParamPtr> HypothesisPair::classifier_params() const {
  std::vector<ParamPtr> out;
  hyp[0].g.collect_params(out);
  hyp[0].h.collect_params(out);
  hyp[1].g.collect_params(out);
  hyp[1].h.collect_params(out);
  return dedupe(out);
}

std::vector<ParamPtr> HypothesisPair::discriminator_params() const {
  std::vector<ParamPtr> out;
  hyp[0].d.collect_params(out);
  hyp[1].d.collect_params(out);
  return dedupe(out);
}

std::vector<ParamPtr> HypothesisPair::all_params() const {
  std::vector<ParamPtr> out = classifier_params();
  std::vector<ParamPtr> disc = discriminator_params();
  out.insert(out.end(), disc.begin(), disc.end());
  return dedupe(out);
}

Hypothesis clone_hypothesis(const HypothesisPair& pair, int index) {
  if (index != 0 && index != 1)
    throw Error("clone_hypothesis: index must be 0 or 1");
  Hypothesis out;
  out.g = pair.hyp[index].g.clone(index + 1);
  out.h = pair.hyp[index].h.clone(index + 1);
  out.d = pair.hyp[index].d.clone(index + 1);
  return out;
}

}  // namespace coda
