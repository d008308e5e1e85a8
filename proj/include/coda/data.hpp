#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "coda/rng.hpp"
#include "coda/tensor.hpp"

namespace coda {

struct DomainDataset {
  Tensor inputs;            // (n, d) vectors or (n, c, h, w) images
  std::vector<int> labels;  // empty for unlabeled target data
  bool is_source = true;
  std::size_t classes = 2;

  std::size_t size() const { return inputs.defined() ? inputs.shape[0] : 0; }
  bool labeled() const { return !labels.empty(); }
};

enum class Family { kTwoMoons, kGaussianBlobs, kPatchBlendImages };

Family family_from_name(const std::string& name);
const char* family_name(Family family);

struct ShiftSpec {
  Family family = Family::kTwoMoons;
  double rotation_deg = 35.0;
  double translate_x = 0.0, translate_y = 0.0;
  double noise_stddev = 0.1;
  std::uint64_t patch_seed = 0;
  std::size_t samples_per_class = 1000;
  std::size_t classes = 2;  // blobs only; moons fix 2, patch images fix 4
  std::uint64_t seed = 0;

  void validate() const;
  std::size_t effective_classes() const;
};

// Source from the base family, target from the same family under the shift.
// Both sides are exactly class-balanced; the result is a pure function of the
// spec. Target labels are returned for evaluation only.
std::pair<DomainDataset, DomainDataset> gen_pair(const ShiftSpec& spec);

// Decoded IDX payload: images (rank >= 2, scaled to [0,1]) or labels (rank 1,
// kept as raw integer values).
struct IdxData {
  Shape dims;
  std::vector<double> values;
  bool is_labels = false;
};

IdxData parse_idx(const std::vector<unsigned char>& bytes);
std::vector<unsigned char> write_idx(const Shape& dims,
                                     const std::vector<unsigned char>& payload);

IdxData parse_idx_file(const std::string& path);

// Images + optional labels into a dataset; (n,h,w) images gain a channel axis.
DomainDataset load_idx_dataset(const std::string& images_path,
                               const std::string& labels_path,
                               std::size_t classes, bool is_source);

// Paired source minibatch (inputs + one-hot labels) and target minibatch
// (inputs only; target labels are unreachable from here by construction).
struct DomainBatch {
  Tensor source_x;
  Tensor source_onehot;
  Tensor target_x;
};

// Epoch-wise shuffled sampling. Each epoch's permutation is re-derived from
// (seed, side, epoch), so the sampler state is just two cursors and resumes
// bit-exactly from a checkpoint. A trailing remainder smaller than the batch
// rolls into a fresh epoch.
class BatchSampler {
 public:
  BatchSampler(const DomainDataset* source, const DomainDataset* target,
               std::size_t batch, std::uint64_t seed);

  DomainBatch next();
  Tensor next_target_only();

  struct State {
    std::uint64_t src_epoch = 0, src_cursor = 0;
    std::uint64_t tgt_epoch = 0, tgt_cursor = 0;
  };
  State state() const { return state_; }
  void set_state(const State& s);

 private:
  std::vector<std::size_t> take(bool source_side, std::size_t count);

  const DomainDataset* source_;
  const DomainDataset* target_;
  std::size_t batch_;
  std::uint64_t seed_;
  State state_;
  std::vector<std::size_t> perm_src_, perm_tgt_;
};

Tensor gather_rows(const Tensor& inputs, const std::vector<std::size_t>& idx);
Tensor one_hot(const std::vector<int>& labels, std::size_t classes);

void export_csv(const DomainDataset& data, const std::string& path);

}  // namespace coda
