#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <unordered_map>
#include <unordered_set>
#include <vector>

#include "coda/ops.hpp"
#include "coda/rng.hpp"
#include "coda/tape.hpp"
#include "coda/tensor.hpp"

namespace coda {

enum class Mode { kTrain, kEval };

// Named mutable value owned by a layer and shared across networks when
// parameters are tied. Running batch-norm statistics live here too with
// trainable = false.
struct Parameter {
  std::string name;
  Shape shape;
  std::vector<double> value;
  bool trainable = true;
};
using ParamPtr = std::shared_ptr<Parameter>;

ParamPtr make_param(std::string name, Shape shape, std::vector<double> value,
                    bool trainable = true);

// Binds each parameter to one tape leaf per graph build, so parameters shared
// between the two hypotheses accumulate gradients through a single node.
// Parameters in the frozen set are bound as constants.
class Binder {
 public:
  explicit Binder(Tape* tape) : tape_(tape) {}

  void freeze(const Parameter* p) { frozen_.insert(p); }

  Tensor bind(const ParamPtr& p);

  // Leaf the binder handed out for a parameter, for gradient lookup.
  const Tensor* leaf_of(const Parameter* p) const;

 private:
  Tape* tape_;
  std::unordered_set<const Parameter*> frozen_;
  std::unordered_map<const Parameter*, Tensor> bound_;
};

struct ForwardCtx {
  Tape* tape = nullptr;      // nullptr: pure eager evaluation
  Binder* binder = nullptr;  // required when tape is set
  Mode mode = Mode::kEval;
  int hypothesis_id = 1;  // selects the conditional batch-norm set
  Rng* rng = nullptr;     // stochastic layers, train mode only
  bool stochastic_eval = false;  // dropout/noise collapse to identity
  bool update_stats = false;     // batch-norm running statistic updates
};

struct Layer {
  virtual ~Layer() = default;
  virtual Tensor forward(ForwardCtx& ctx, const Tensor& x) = 0;
  virtual void collect_params(std::vector<ParamPtr>&) const {}
  // Deep copy; conditional batch-norm collapses to the selected set.
  virtual std::shared_ptr<Layer> clone(int keep_hyp_set) const = 0;
};
using LayerPtr = std::shared_ptr<Layer>;

struct Net {
  std::vector<LayerPtr> layers;

  Tensor forward(ForwardCtx& ctx, Tensor x) const;
  void collect_params(std::vector<ParamPtr>& out) const;
  Net clone(int keep_hyp_set) const;
};

struct DenseLayer : Layer {
  ParamPtr weight, bias;

  DenseLayer(const std::string& name, std::size_t in, std::size_t out,
             Rng& rng);
  DenseLayer(ParamPtr w, ParamPtr b) : weight(std::move(w)), bias(std::move(b)) {}
  Tensor forward(ForwardCtx& ctx, const Tensor& x) override;
  void collect_params(std::vector<ParamPtr>& out) const override;
  LayerPtr clone(int keep_hyp_set) const override;
};

struct Conv2dLayer : Layer {
  ParamPtr weight, bias;
  Padding padding = Padding::kSame;

  Conv2dLayer(const std::string& name, std::size_t in_ch, std::size_t out_ch,
              std::size_t kernel, Padding pad, Rng& rng);
  Conv2dLayer(ParamPtr w, ParamPtr b, Padding pad)
      : weight(std::move(w)), bias(std::move(b)), padding(pad) {}
  Tensor forward(ForwardCtx& ctx, const Tensor& x) override;
  void collect_params(std::vector<ParamPtr>& out) const override;
  LayerPtr clone(int keep_hyp_set) const override;
};

// Batch norm over the batch axis (2-D input) or batch+spatial axes (4-D).
// In conditional mode two scale/shift/statistic sets exist and
// ctx.hypothesis_id picks one; weights feeding this layer stay shared.
struct BatchNormLayer : Layer {
  bool conditional = false;
  ParamPtr gamma[2], beta[2];
  ParamPtr run_mean[2], run_var[2];
  double momentum, eps;

  BatchNormLayer(const std::string& name, std::size_t features,
                 bool conditional, double momentum, double eps);
  Tensor forward(ForwardCtx& ctx, const Tensor& x) override;
  void collect_params(std::vector<ParamPtr>& out) const override;
  LayerPtr clone(int keep_hyp_set) const override;

 private:
  BatchNormLayer() = default;
  int set_index(const ForwardCtx& ctx) const;
};

struct DropoutLayer : Layer {
  double rate;

  explicit DropoutLayer(double rate);
  Tensor forward(ForwardCtx& ctx, const Tensor& x) override;
  LayerPtr clone(int) const override {
    return std::make_shared<DropoutLayer>(rate);
  }
};

struct GaussianNoiseLayer : Layer {
  double stddev;

  explicit GaussianNoiseLayer(double stddev);
  Tensor forward(ForwardCtx& ctx, const Tensor& x) override;
  LayerPtr clone(int) const override {
    return std::make_shared<GaussianNoiseLayer>(stddev);
  }
};

struct ReluLayer : Layer {
  Tensor forward(ForwardCtx& ctx, const Tensor& x) override;
  LayerPtr clone(int) const override { return std::make_shared<ReluLayer>(); }
};

struct SigmoidLayer : Layer {
  Tensor forward(ForwardCtx& ctx, const Tensor& x) override;
  LayerPtr clone(int) const override {
    return std::make_shared<SigmoidLayer>();
  }
};

struct MaxPool2Layer : Layer {
  Tensor forward(ForwardCtx& ctx, const Tensor& x) override;
  LayerPtr clone(int) const override {
    return std::make_shared<MaxPool2Layer>();
  }
};

struct GlobalAvgPoolLayer : Layer {
  Tensor forward(ForwardCtx& ctx, const Tensor& x) override;
  LayerPtr clone(int) const override {
    return std::make_shared<GlobalAvgPoolLayer>();
  }
};

struct FlattenLayer : Layer {
  Tensor forward(ForwardCtx& ctx, const Tensor& x) override;
  LayerPtr clone(int) const override {
    return std::make_shared<FlattenLayer>();
  }
};

// Per-sample, per-channel standardization of a batch of images. Pure input
// transform: never recorded on a tape.
Tensor instance_norm(const Tensor& x);

enum class SharingMode { kIndependent, kConditionalBn, kSharedStochastic };

const char* sharing_mode_name(SharingMode mode);

struct ArchConfig {
  enum class InputKind { kVector, kImage };
  InputKind input = InputKind::kVector;
  std::size_t in_dim = 2;  // vector input width
  std::size_t channels = 3, height = 8, width = 8;
  std::size_t classes = 2;
  std::size_t hidden = 64;         // dense feature width
  std::size_t conv_channels = 16;  // first conv width; later convs use 2x
  std::size_t disc_hidden = 100;
  double noise_stddev = 1.0;
  double dropout_rate = 0.5;

  std::size_t feature_dim() const;  // flattened g output width
};

struct Hypothesis {
  Net g, h, d;

  void collect_params(std::vector<ParamPtr>& out) const;
};

// Two (g_i, h_i, d_i) triples. Discriminators are always unshared; in the
// shared modes g2/h2 alias g1/h1's layer objects.
struct HypothesisPair {
  SharingMode mode = SharingMode::kIndependent;
  Hypothesis hyp[2];

  // Unique parameters in a fixed traversal order (g1, h1, g2, h2, d1, d2,
  // aliases skipped).
  std::vector<ParamPtr> classifier_params() const;
  std::vector<ParamPtr> discriminator_params() const;
  std::vector<ParamPtr> all_params() const;
};

// `identical_init` reuses hypothesis 1's init stream for hypothesis 2 in
// independent mode (the two stay bit-identical under symmetric training).
HypothesisPair make_hypothesis_pair(const ArchConfig& arch, SharingMode mode,
                                    std::uint64_t seed, bool identical_init);

// Single-hypothesis (VADA) assembly: pair layout with only hyp[0] populated.
HypothesisPair make_single_hypothesis(const ArchConfig& arch,
                                      std::uint64_t seed);

Hypothesis clone_hypothesis(const HypothesisPair& pair, int index);

}  // namespace coda
