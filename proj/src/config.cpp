#include "coda/config.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>

#include "coda/common.hpp"

namespace coda {

namespace {

using nlohmann::json;

// Checked reads with object-path context so schema errors say where and what.
class Reader {
 public:
  Reader(const json& j, std::string path) : j_(j), path_(std::move(path)) {
    if (!j_.is_object())
      throw ConfigError("config: " + path_ + " must be a JSON object");
  }

  bool has(const char* key) {
    seen_.insert(key);
    return j_.contains(key);
  }

  double number(const char* key, double def) {
    if (!has(key)) return def;
    const json& v = j_.at(key);
    if (!v.is_number())
      throw ConfigError("config: " + where(key) + " must be a number");
    return v.get<double>();
  }

  // Accepts a number, 1e308-style literals, or the strings "inf"/"infinity".
  double number_or_inf(const char* key, double def) {
    if (!has(key)) return def;
    const json& v = j_.at(key);
    if (v.is_string()) {
      std::string s = v.get<std::string>();
      std::transform(s.begin(), s.end(), s.begin(), ::tolower);
      if (s == "inf" || s == "infinity")
        return std::numeric_limits<double>::infinity();
      throw ConfigError("config: " + where(key) +
                        " must be a number or \"inf\"");
    }
    if (!v.is_number())
      throw ConfigError("config: " + where(key) +
                        " must be a number or \"inf\"");
    return v.get<double>();
  }

  std::size_t index(const char* key, std::size_t def) {
    if (!has(key)) return def;
    const json& v = j_.at(key);
    if (!v.is_number_unsigned())
      throw ConfigError("config: " + where(key) +
                        " must be a non-negative integer");
    return v.get<std::size_t>();
  }

  std::uint64_t u64(const char* key, std::uint64_t def) {
    if (!has(key)) return def;
    const json& v = j_.at(key);
    if (!v.is_number_unsigned())
      throw ConfigError("config: " + where(key) +
                        " must be a non-negative integer");
    return v.get<std::uint64_t>();
  }

  bool boolean(const char* key, bool def) {
    if (!has(key)) return def;
    const json& v = j_.at(key);
    if (!v.is_boolean())
      throw ConfigError("config: " + where(key) + " must be true or false");
    return v.get<bool>();
  }

  std::string text(const char* key, const std::string& def) {
    if (!has(key)) return def;
    const json& v = j_.at(key);
    if (!v.is_string())
      throw ConfigError("config: " + where(key) + " must be a string");
    return v.get<std::string>();
  }

  std::vector<double> numbers(const char* key) {
    std::vector<double> out;
    if (!has(key)) return out;
    const json& v = j_.at(key);
    if (!v.is_array())
      throw ConfigError("config: " + where(key) + " must be an array");
    for (const auto& e : v) {
      if (!e.is_number())
        throw ConfigError("config: " + where(key) +
                          " must hold numbers only");
      out.push_back(e.get<double>());
    }
    return out;
  }

  std::vector<std::size_t> indices(const char* key) {
    std::vector<std::size_t> out;
    if (!has(key)) return out;
    const json& v = j_.at(key);
    if (!v.is_array())
      throw ConfigError("config: " + where(key) + " must be an array");
    for (const auto& e : v) {
      if (!e.is_number_unsigned() || e.get<std::uint64_t>() == 0)
        throw ConfigError("config: " + where(key) +
                          " must hold positive integers");
      out.push_back(e.get<std::size_t>());
    }
    return out;
  }

  const json* object(const char* key) {
    if (!has(key)) return nullptr;
    return &j_.at(key);
  }

  // Rejects anything this reader never asked about.
  void finish() const {
    for (const auto& [key, value] : j_.items())
      if (!seen_.count(key))
        throw ConfigError("config: unknown key '" + path_ + key + "'");
  }

 private:
  std::string where(const char* key) const { return path_ + key; }

  const json& j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace

RunConfig parse_run_config(const nlohmann::json& j) {
  RunConfig cfg;
  Reader top(j, "");

  cfg.variant = top.text("variant", cfg.variant);
  if (std::find(std::begin(kVariants), std::end(kVariants), cfg.variant) ==
      std::end(kVariants)) {
    std::string known;
    for (const char* v : kVariants) known += std::string(v) + " ";
    throw ConfigError("config: unknown variant '" + cfg.variant +
                      "' (known: " + known + ")");
  }
  cfg.out_dir = top.text("out", "");
  top.has("version");  // informational echo in resolved configs

  TrainConfig& t = cfg.train;
  t.seed = top.u64("seed", 0);
  t.iterations = top.index("iterations", t.iterations);
  t.batch_size = top.index("batch_size", t.batch_size);
  t.eval_every = top.index("eval_every", t.eval_every);
  t.dirt_iterations = top.index("dirt_iterations", t.dirt_iterations);
  t.dirt_refresh_interval =
      top.index("dirt_refresh_interval", t.dirt_refresh_interval);
  t.ema_momentum = top.number("ema_momentum", t.ema_momentum);
  t.identical_hypotheses =
      top.boolean("identical_hypotheses", t.identical_hypotheses);
  t.instance_norm = top.boolean("instance_norm", t.instance_norm);

  if (const json* wj = top.object("weights")) {
    Reader w(*wj, "weights.");
    LossWeights& lw = t.weights;
    lw.lambda_d = w.number("lambda_d", lw.lambda_d);
    lw.lambda_p = w.number("lambda_p", lw.lambda_p);
    lw.lambda_div = w.number("lambda_div", lw.lambda_div);
    lw.lambda_ce = w.number("lambda_ce", lw.lambda_ce);
    lw.lambda_sv = w.number("lambda_sv", lw.lambda_sv);
    lw.nu = w.number_or_inf("nu", lw.nu);
    lw.eps_vat_source = w.number("eps_vat_source", lw.eps_vat_source);
    lw.eps_vat_target = w.number("eps_vat_target", lw.eps_vat_target);
    lw.beta_dirt = w.number("beta_dirt", lw.beta_dirt);
    w.finish();
  }

  if (const json* aj = top.object("adam")) {
    Reader a(*aj, "adam.");
    t.adam.lr = a.number("lr", t.adam.lr);
    t.adam.beta1 = a.number("beta1", t.adam.beta1);
    t.adam.beta2 = a.number("beta2", t.adam.beta2);
    t.adam.eps = a.number("eps", t.adam.eps);
    a.finish();
  }

  if (const json* nj = top.object("arch")) {
    Reader a(*nj, "arch.");
    ArchConfig& arch = t.arch;
    arch.hidden = a.index("hidden", arch.hidden);
    arch.conv_channels = a.index("conv_channels", arch.conv_channels);
    arch.disc_hidden = a.index("disc_hidden", arch.disc_hidden);
    arch.noise_stddev = a.number("noise_stddev", arch.noise_stddev);
    arch.dropout_rate = a.number("dropout_rate", arch.dropout_rate);
    a.finish();
  }

  if (const json* dj = top.object("data")) {
    Reader d(*dj, "data.");
    ShiftSpec& s = cfg.data;
    if (d.has("family")) {
      const json& fam = dj->at("family");
      if (!fam.is_string())
        throw ConfigError("config: data.family must be a string");
      s.family = family_from_name(fam.get<std::string>());
    }
    s.rotation_deg = d.number("rotation_deg", s.rotation_deg);
    s.translate_x = d.number("translate_x", s.translate_x);
    s.translate_y = d.number("translate_y", s.translate_y);
    s.noise_stddev = d.number("noise_stddev", s.noise_stddev);
    s.patch_seed = d.u64("patch_seed", s.patch_seed);
    s.samples_per_class = d.index("samples_per_class", s.samples_per_class);
    s.classes = d.index("classes", s.classes);
    s.seed = d.u64("seed", s.seed);
    cfg.idx_source_images = d.text("idx_source_images", "");
    cfg.idx_source_labels = d.text("idx_source_labels", "");
    cfg.idx_target_images = d.text("idx_target_images", "");
    cfg.idx_target_labels = d.text("idx_target_labels", "");
    d.finish();
  }

  if (top.has("knn_k")) {
    cfg.knn_k = top.indices("knn_k");
    if (cfg.knn_k.empty())
      throw ConfigError("config: knn_k must not be empty when given");
  }

  if (const json* gj = top.object("grid")) {
    Reader g(*gj, "grid.");
    cfg.grid_lambda_d = g.numbers("lambda_d");
    cfg.grid_lambda_p = g.numbers("lambda_p");
    cfg.grid_nu = g.numbers("nu");
    g.finish();
  }

  top.finish();
  return cfg;
}

RunConfig load_run_config(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path);
  json j;
  try {
    in >> j;
  } catch (const json::parse_error& e) {
    throw ConfigError("config: " + path + " is not valid JSON: " + e.what());
  }
  return parse_run_config(j);
}

void apply_variant(RunConfig& cfg) {
  TrainConfig& t = cfg.train;
  t.single_hypothesis = false;
  if (cfg.variant == "co-da") {
    t.sharing = SharingMode::kIndependent;
  } else if (cfg.variant == "co-da-bn") {
    t.sharing = SharingMode::kConditionalBn;
  } else if (cfg.variant == "co-da-sh") {
    t.sharing = SharingMode::kSharedStochastic;
    t.weights.lambda_div = 0.0;
  } else if (cfg.variant == "co-da-nodiv") {
    t.sharing = SharingMode::kIndependent;
    t.weights.lambda_div = 0.0;
  } else if (cfg.variant == "vada-single") {
    t.sharing = SharingMode::kIndependent;
    t.single_hypothesis = true;
    t.weights.lambda_p = 0.0;
    t.weights.lambda_div = 0.0;
  } else {
    throw ConfigError("config: unknown variant '" + cfg.variant + "'");
  }
}

nlohmann::ordered_json config_json(const RunConfig& cfg) {
  nlohmann::ordered_json j;
  j["version"] = kVersion;
  j["variant"] = cfg.variant;
  j["seed"] = cfg.train.seed;
  j["out"] = cfg.out_dir;
  j["iterations"] = cfg.train.iterations;
  j["batch_size"] = cfg.train.batch_size;
  j["eval_every"] = cfg.train.eval_every;
  j["dirt_iterations"] = cfg.train.dirt_iterations;
  j["dirt_refresh_interval"] = cfg.train.dirt_refresh_interval;
  j["ema_momentum"] = cfg.train.ema_momentum;
  j["identical_hypotheses"] = cfg.train.identical_hypotheses;
  j["instance_norm"] = cfg.train.instance_norm;

  nlohmann::ordered_json w;
  const LossWeights& lw = cfg.train.weights;
  w["lambda_d"] = lw.lambda_d;
  w["lambda_p"] = lw.lambda_p;
  w["lambda_div"] = lw.lambda_div;
  w["lambda_ce"] = lw.lambda_ce;
  w["lambda_sv"] = lw.lambda_sv;
  if (std::isinf(lw.nu))
    w["nu"] = "inf";
  else
    w["nu"] = lw.nu;
  w["eps_vat_source"] = lw.eps_vat_source;
  w["eps_vat_target"] = lw.eps_vat_target;
  w["beta_dirt"] = lw.beta_dirt;
  j["weights"] = w;

  nlohmann::ordered_json a;
  a["lr"] = cfg.train.adam.lr;
  a["beta1"] = cfg.train.adam.beta1;
  a["beta2"] = cfg.train.adam.beta2;
  a["eps"] = cfg.train.adam.eps;
  j["adam"] = a;

  nlohmann::ordered_json n;
  n["hidden"] = cfg.train.arch.hidden;
  n["conv_channels"] = cfg.train.arch.conv_channels;
  n["disc_hidden"] = cfg.train.arch.disc_hidden;
  n["noise_stddev"] = cfg.train.arch.noise_stddev;
  n["dropout_rate"] = cfg.train.arch.dropout_rate;
  j["arch"] = n;

  nlohmann::ordered_json d;
  d["family"] = family_name(cfg.data.family);
  d["rotation_deg"] = cfg.data.rotation_deg;
  d["translate_x"] = cfg.data.translate_x;
  d["translate_y"] = cfg.data.translate_y;
  d["noise_stddev"] = cfg.data.noise_stddev;
  d["patch_seed"] = cfg.data.patch_seed;
  d["samples_per_class"] = cfg.data.samples_per_class;
  d["classes"] = cfg.data.classes;
  d["seed"] = cfg.data.seed;
  if (cfg.uses_idx()) {
    d["idx_source_images"] = cfg.idx_source_images;
    d["idx_source_labels"] = cfg.idx_source_labels;
    d["idx_target_images"] = cfg.idx_target_images;
    d["idx_target_labels"] = cfg.idx_target_labels;
  }
  j["data"] = d;

  j["knn_k"] = cfg.knn_k;
  if (!cfg.grid_lambda_d.empty() || !cfg.grid_lambda_p.empty() ||
      !cfg.grid_nu.empty()) {
    nlohmann::ordered_json g;
    g["lambda_d"] = cfg.grid_lambda_d;
    g["lambda_p"] = cfg.grid_lambda_p;
    g["nu"] = cfg.grid_nu;
    j["grid"] = g;
  }
  return j;
}

std::pair<DomainDataset, DomainDataset> load_datasets(const RunConfig& cfg) {
  if (cfg.uses_idx()) {
    if (cfg.idx_source_labels.empty())
      throw ConfigError("config: idx_source_labels is required with IDX data");
    if (cfg.idx_target_images.empty())
      throw ConfigError("config: idx_target_images is required with IDX data");
    const std::size_t k = cfg.data.classes;
    DomainDataset src =
        load_idx_dataset(cfg.idx_source_images, cfg.idx_source_labels, k, true);
    DomainDataset tgt =
        load_idx_dataset(cfg.idx_target_images, cfg.idx_target_labels, k, false);
    return {std::move(src), std::move(tgt)};
  }
  return gen_pair(cfg.data);
}

ArchConfig derive_arch(const RunConfig& cfg, const DomainDataset& source) {
  ArchConfig arch = cfg.train.arch;
  arch.classes = source.classes;
  if (source.inputs.shape.size() == 2) {
    arch.input = ArchConfig::InputKind::kVector;
    arch.in_dim = source.inputs.shape[1];
  } else {
    arch.input = ArchConfig::InputKind::kImage;
    arch.channels = source.inputs.shape[1];
    arch.height = source.inputs.shape[2];
    arch.width = source.inputs.shape[3];
    if (arch.height % 2 != 0 || arch.width % 2 != 0)
      throw ConfigError("arch: image sides must be even for the pooling stage");
  }
  return arch;
}

}  // namespace coda
