#include "coda/data.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <sstream>

#include "coda/common.hpp"

namespace coda {

Family family_from_name(const std::string& name) {
  if (name == "two-moons") return Family::kTwoMoons;
  if (name == "gaussian-blobs") return Family::kGaussianBlobs;
  if (name == "patch-blend-images") return Family::kPatchBlendImages;
  throw ConfigError("unknown data family '" + name +
                    "' (expected two-moons, gaussian-blobs or "
                    "patch-blend-images)");
}

const char* family_name(Family family) {
  switch (family) {
    case Family::kTwoMoons: return "two-moons";
    case Family::kGaussianBlobs: return "gaussian-blobs";
    case Family::kPatchBlendImages: return "patch-blend-images";
  }
  return "?";
}

std::size_t ShiftSpec::effective_classes() const {
  switch (family) {
    case Family::kTwoMoons: return 2;
    case Family::kGaussianBlobs: return classes;
    case Family::kPatchBlendImages: return 4;
  }
  return classes;
}

void ShiftSpec::validate() const {
  if (rotation_deg < 0.0 || rotation_deg > 90.0)
    throw ConfigError("shift spec: rotation must lie in [0, 90] degrees, got " +
                      std::to_string(rotation_deg));
  if (noise_stddev < 0.0)
    throw ConfigError("shift spec: noise stddev must be non-negative");
  if (effective_classes() < 2)
    throw ConfigError("shift spec: need at least 2 classes");
  if (samples_per_class < 2)
    throw ConfigError("shift spec: need at least 2 samples per class");
}

namespace {

void rotate_translate(std::vector<double>& xy, double deg, double tx,
                      double ty) {
  const double rad = deg * std::numbers::pi / 180.0;
  const double c = std::cos(rad), s = std::sin(rad);
  for (std::size_t i = 0; i < xy.size(); i += 2) {
    const double x = xy[i], y = xy[i + 1];
    xy[i] = c * x - s * y + tx;
    xy[i + 1] = s * x + c * y + ty;
  }
}

// Two interleaved crescents, centered so the shift rotation acts about the
// data centroid. Class centroids have the closed form used by the tests.
DomainDataset sample_moons(const ShiftSpec& spec, std::uint64_t seed,
                           bool shifted, bool is_source) {
  const std::size_t per_class = spec.samples_per_class;
  Rng rng(seed);
  std::vector<double> xy;
  std::vector<int> labels;
  xy.reserve(4 * per_class);
  labels.reserve(2 * per_class);
  for (int cls = 0; cls < 2; ++cls)
    for (std::size_t i = 0; i < per_class; ++i) {
      const double t = rng.uniform01() * std::numbers::pi;
      double x, y;
      if (cls == 0) {
        x = std::cos(t);
        y = std::sin(t);
      } else {
        x = 1.0 - std::cos(t);
        y = 0.5 - std::sin(t);
      }
      x += rng.normal(0.0, spec.noise_stddev) - 0.5;
      y += rng.normal(0.0, spec.noise_stddev) - 0.25;
      xy.push_back(x);
      xy.push_back(y);
      labels.push_back(cls);
    }
  if (shifted)
    rotate_translate(xy, spec.rotation_deg, spec.translate_x, spec.translate_y);
  DomainDataset out;
  out.inputs = Tensor({2 * per_class, 2}, std::move(xy));
  out.labels = std::move(labels);
  out.is_source = is_source;
  out.classes = 2;
  return out;
}

DomainDataset sample_blobs(const ShiftSpec& spec, std::uint64_t seed,
                           bool shifted, bool is_source) {
  const std::size_t k = spec.effective_classes();
  const std::size_t per_class = spec.samples_per_class;
  const double radius = 2.0;
  Rng rng(seed);
  std::vector<double> xy;
  std::vector<int> labels;
  for (std::size_t cls = 0; cls < k; ++cls) {
    const double ang = 2.0 * std::numbers::pi * static_cast<double>(cls) /
                       static_cast<double>(k);
    const double cx = radius * std::cos(ang), cy = radius * std::sin(ang);
    for (std::size_t i = 0; i < per_class; ++i) {
      xy.push_back(cx + rng.normal(0.0, spec.noise_stddev));
      xy.push_back(cy + rng.normal(0.0, spec.noise_stddev));
      labels.push_back(static_cast<int>(cls));
    }
  }
  if (shifted)
    rotate_translate(xy, spec.rotation_deg, spec.translate_x, spec.translate_y);
  DomainDataset out;
  out.inputs = Tensor({k * per_class, 2}, std::move(xy));
  out.labels = std::move(labels);
  out.is_source = is_source;
  out.classes = k;
  return out;
}

// 8x8 3-channel glyphs: horizontal bar, vertical bar, diagonal, cross.
double glyph_at(int cls, std::size_t y, std::size_t x) {
  switch (cls) {
    case 0: return (y == 3 || y == 4) ? 1.0 : 0.0;
    case 1: return (x == 3 || x == 4) ? 1.0 : 0.0;
    case 2: return (y == x || y + 1 == x) ? 1.0 : 0.0;
    default: return (y == 3 || y == 4 || x == 3 || x == 4) ? 1.0 : 0.0;
  }
}

DomainDataset sample_patch_images(const ShiftSpec& spec, std::uint64_t seed,
                                  bool blended, bool is_source) {
  const std::size_t k = 4, h = 8, w = 8, c = 3;
  const std::size_t per_class = spec.samples_per_class;
  Rng rng(seed);
  Rng patch_rng(derive_seed(spec.patch_seed, 7));
  std::vector<double> img;
  std::vector<int> labels;
  img.reserve(per_class * k * c * h * w);
  for (std::size_t cls = 0; cls < k; ++cls)
    for (std::size_t i = 0; i < per_class; ++i) {
      // MNIST-M-style blend: |glyph - patch color| per channel; the patch is
      // a per-image two-color horizontal gradient.
      double c0[3], c1[3];
      for (int ch = 0; ch < 3; ++ch) {
        c0[ch] = patch_rng.uniform01();
        c1[ch] = patch_rng.uniform01();
      }
      for (std::size_t ch = 0; ch < c; ++ch)
        for (std::size_t y = 0; y < h; ++y)
          for (std::size_t x = 0; x < w; ++x) {
            const double glyph = glyph_at(static_cast<int>(cls), y, x);
            double v;
            if (blended) {
              const double frac = static_cast<double>(x) /
                                  static_cast<double>(w - 1);
              const double patch = (1.0 - frac) * c0[ch] + frac * c1[ch];
              v = std::abs(glyph - patch);
            } else {
              v = 0.1 + 0.8 * glyph;
            }
            v += rng.normal(0.0, spec.noise_stddev);
            img.push_back(v);
          }
      labels.push_back(static_cast<int>(cls));
    }
  DomainDataset out;
  out.inputs = Tensor({per_class * k, c, h, w}, std::move(img));
  out.labels = std::move(labels);
  out.is_source = is_source;
  out.classes = k;
  return out;
}

}  // namespace

std::pair<DomainDataset, DomainDataset> gen_pair(const ShiftSpec& spec) {
  spec.validate();
  const std::uint64_t src_seed = derive_seed(spec.seed, 1);
  const std::uint64_t tgt_seed = derive_seed(spec.seed, 2);
  switch (spec.family) {
    case Family::kTwoMoons:
      return {sample_moons(spec, src_seed, false, true),
              sample_moons(spec, tgt_seed, true, false)};
    case Family::kGaussianBlobs:
      return {sample_blobs(spec, src_seed, false, true),
              sample_blobs(spec, tgt_seed, true, false)};
    case Family::kPatchBlendImages:
      return {sample_patch_images(spec, src_seed, false, true),
              sample_patch_images(spec, tgt_seed, true, false)};
  }
  throw ConfigError("gen_pair: unknown family");
}

namespace {

std::uint32_t read_be_u32(const unsigned char* p) {
  return (static_cast<std::uint32_t>(p[0]) << 24) |
         (static_cast<std::uint32_t>(p[1]) << 16) |
         (static_cast<std::uint32_t>(p[2]) << 8) |
         static_cast<std::uint32_t>(p[3]);
}

}  // namespace

IdxData parse_idx(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 4) throw IoError("idx: header truncated");
  if (bytes[0] != 0 || bytes[1] != 0)
    throw IoError("idx: bad magic (first two bytes must be zero)");
  if (bytes[2] != 0x08)
    throw IoError("idx: unsupported dtype 0x" + [&] {
      std::ostringstream os;
      os << std::hex << static_cast<int>(bytes[2]);
      return os.str();
    }() + " (only unsigned byte 0x08 is supported)");
  const std::size_t ndim = bytes[3];
  if (ndim == 0) throw IoError("idx: zero dimensions");
  if (bytes.size() < 4 + 4 * ndim) throw IoError("idx: dimension list truncated");

  Shape dims(ndim);
  std::size_t total = 1;
  for (std::size_t d = 0; d < ndim; ++d) {
    dims[d] = read_be_u32(bytes.data() + 4 + 4 * d);
    total *= dims[d];
  }
  const std::size_t payload = bytes.size() - 4 - 4 * ndim;
  if (payload != total)
    throw IoError("idx: payload length mismatch, expected " +
                  std::to_string(total) + " bytes, got " +
                  std::to_string(payload));

  IdxData out;
  out.dims = dims;
  out.is_labels = ndim == 1;
  out.values.resize(total);
  const unsigned char* p = bytes.data() + 4 + 4 * ndim;
  for (std::size_t i = 0; i < total; ++i)
    out.values[i] = out.is_labels ? static_cast<double>(p[i])
                                  : static_cast<double>(p[i]) / 255.0;
  return out;
}

std::vector<unsigned char> write_idx(const Shape& dims,
                                     const std::vector<unsigned char>& payload) {
  std::size_t total = 1;
  for (std::size_t d : dims) total *= d;
  if (total != payload.size())
    throw IoError("idx write: payload length mismatch");
  std::vector<unsigned char> out;
  out.reserve(4 + 4 * dims.size() + payload.size());
  out.push_back(0);
  out.push_back(0);
  out.push_back(0x08);
  out.push_back(static_cast<unsigned char>(dims.size()));
  for (std::size_t d : dims) {
    out.push_back(static_cast<unsigned char>((d >> 24) & 0xff));
    out.push_back(static_cast<unsigned char>((d >> 16) & 0xff));
    out.push_back(static_cast<unsigned char>((d >> 8) & 0xff));
    out.push_back(static_cast<unsigned char>(d & 0xff));
  }
  out.insert(out.end(), payload.begin(), payload.end());
  return out;
}

IdxData parse_idx_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  return parse_idx(bytes);
}

DomainDataset load_idx_dataset(const std::string& images_path,
                               const std::string& labels_path,
                               std::size_t classes, bool is_source) {
  IdxData images = parse_idx_file(images_path);
  if (images.dims.size() < 2)
    throw IoError("idx: " + images_path + " holds labels, not images");
  Shape shape = images.dims;
  if (shape.size() == 3) shape = {shape[0], 1, shape[1], shape[2]};

  DomainDataset out;
  out.inputs = Tensor(shape, std::move(images.values));
  out.is_source = is_source;
  out.classes = classes;

  if (!labels_path.empty()) {
    IdxData labels = parse_idx_file(labels_path);
    if (!labels.is_labels)
      throw IoError("idx: " + labels_path + " is not a 1-D label file");
    if (labels.dims[0] != out.size())
      throw IoError("idx: " + std::to_string(labels.dims[0]) + " labels for " +
                    std::to_string(out.size()) + " images");
    out.labels.reserve(labels.values.size());
    for (double v : labels.values) {
      const int cls = static_cast<int>(v);
      if (cls < 0 || static_cast<std::size_t>(cls) >= classes)
        throw IoError("idx: label " + std::to_string(cls) +
                      " out of range for " + std::to_string(classes) +
                      " classes");
      out.labels.push_back(cls);
    }
  }
  return out;
}

BatchSampler::BatchSampler(const DomainDataset* source,
                           const DomainDataset* target, std::size_t batch,
                           std::uint64_t seed)
    : source_(source), target_(target), batch_(batch), seed_(seed) {
  if (batch_ < 2) throw ConfigError("sampler: batch size must be >= 2");
  if (source_ && source_->size() < batch_)
    throw ConfigError("sampler: batch " + std::to_string(batch_) +
                      " exceeds source size " + std::to_string(source_->size()));
  if (target_ && target_->size() < batch_)
    throw ConfigError("sampler: batch " + std::to_string(batch_) +
                      " exceeds target size " + std::to_string(target_->size()));
  if (source_ && !source_->labeled())
    throw ConfigError("sampler: source dataset has no labels");
}

namespace {

std::vector<std::size_t> epoch_permutation(std::uint64_t seed, bool source_side,
                                           std::uint64_t epoch, std::size_t n) {
  std::vector<std::size_t> perm(n);
  for (std::size_t i = 0; i < n; ++i) perm[i] = i;
  Rng rng(derive_seed(derive_seed(seed, source_side ? 11 : 12), epoch));
  rng.shuffle(perm);
  return perm;
}

}  // namespace

std::vector<std::size_t> BatchSampler::take(bool source_side,
                                            std::size_t count) {
  const DomainDataset* data = source_side ? source_ : target_;
  std::uint64_t& epoch = source_side ? state_.src_epoch : state_.tgt_epoch;
  std::uint64_t& cursor = source_side ? state_.src_cursor : state_.tgt_cursor;
  std::vector<std::size_t>& perm = source_side ? perm_src_ : perm_tgt_;

  if (perm.size() != data->size())
    perm = epoch_permutation(seed_, source_side, epoch, data->size());
  if (cursor + count > data->size()) {
    ++epoch;
    cursor = 0;
    perm = epoch_permutation(seed_, source_side, epoch, data->size());
  }
  std::vector<std::size_t> idx(perm.begin() + static_cast<std::ptrdiff_t>(cursor),
                               perm.begin() + static_cast<std::ptrdiff_t>(cursor + count));
  cursor += count;
  return idx;
}

DomainBatch BatchSampler::next() {
  if (!source_ || !target_)
    throw Error("sampler: paired batches need both datasets");
  const std::vector<std::size_t> src_idx = take(true, batch_);
  const std::vector<std::size_t> tgt_idx = take(false, batch_);

  DomainBatch batch;
  batch.source_x = gather_rows(source_->inputs, src_idx);
  std::vector<int> labels(batch_);
  for (std::size_t i = 0; i < batch_; ++i)
    labels[i] = source_->labels[src_idx[i]];
  batch.source_onehot = one_hot(labels, source_->classes);
  batch.target_x = gather_rows(target_->inputs, tgt_idx);
  return batch;
}

Tensor BatchSampler::next_target_only() {
  if (!target_) throw Error("sampler: no target dataset");
  return gather_rows(target_->inputs, take(false, batch_));
}

void BatchSampler::set_state(const State& s) {
  state_ = s;
  perm_src_.clear();
  perm_tgt_.clear();
  if (source_)
    perm_src_ = epoch_permutation(seed_, true, state_.src_epoch, source_->size());
  if (target_)
    perm_tgt_ = epoch_permutation(seed_, false, state_.tgt_epoch, target_->size());
}

Tensor gather_rows(const Tensor& inputs, const std::vector<std::size_t>& idx) {
  const std::size_t row = inputs.size() / inputs.shape[0];
  Shape shape = inputs.shape;
  shape[0] = idx.size();
  std::vector<double> out;
  out.reserve(idx.size() * row);
  for (std::size_t i : idx) {
    const double* src = inputs.values().data() + i * row;
    out.insert(out.end(), src, src + row);
  }
  return Tensor(std::move(shape), std::move(out));
}

Tensor one_hot(const std::vector<int>& labels, std::size_t classes) {
  std::vector<double> out(labels.size() * classes, 0.0);
  for (std::size_t i = 0; i < labels.size(); ++i) {
    const int cls = labels[i];
    if (cls < 0 || static_cast<std::size_t>(cls) >= classes)
      throw Error("one_hot: label " + std::to_string(cls) +
                  " out of range for " + std::to_string(classes) + " classes");
    out[i * classes + static_cast<std::size_t>(cls)] = 1.0;
  }
  return Tensor({labels.size(), classes}, std::move(out));
}

void export_csv(const DomainDataset& data, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  const std::size_t row = data.inputs.size() / data.size();
  out << std::setprecision(17);
  for (std::size_t j = 0; j < row; ++j) out << "x" << j << ",";
  out << "label\n";
  for (std::size_t i = 0; i < data.size(); ++i) {
    for (std::size_t j = 0; j < row; ++j)
      out << data.inputs.values()[i * row + j] << ",";
    if (data.labeled())
      out << data.labels[i];
    else
      out << "";
    out << "\n";
  }
  if (!out) throw IoError("failed while writing " + path);
}

}  // namespace coda
