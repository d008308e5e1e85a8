#pragma once

#include <string>
#include <vector>

#include <json.hpp>

#include "coda/data.hpp"
#include "coda/trainer.hpp"

namespace coda {

// Everything a reproducible run needs: the training setup, the dataset spec
// (or IDX paths), the output directory and the method variant.
struct RunConfig {
  std::string variant = "co-da";
  std::string out_dir;  // empty: derived from CODA_OUT (or ./runs)
  TrainConfig train;
  ShiftSpec data;
  std::string idx_source_images, idx_source_labels;
  std::string idx_target_images, idx_target_labels;
  std::vector<std::size_t> knn_k = {1, 3, 5, 10};
  std::vector<double> grid_lambda_d, grid_lambda_p, grid_nu;

  bool uses_idx() const { return !idx_source_images.empty(); }
};

inline constexpr const char* kVariants[] = {"co-da", "co-da-bn", "co-da-sh",
                                            "vada-single", "co-da-nodiv"};

RunConfig parse_run_config(const nlohmann::json& j);
RunConfig load_run_config(const std::string& path);

// Table-1 variant rules: co-da-sh shares everything and zeroes lambda_div,
// vada-single drops the second hypothesis and both pair terms, co-da-nodiv
// keeps the pair but zeroes lambda_div.
void apply_variant(RunConfig& cfg);

// Resolved config as written into every run directory.
nlohmann::ordered_json config_json(const RunConfig& cfg);

// Loads the configured dataset pair (synthetic family or IDX files).
std::pair<DomainDataset, DomainDataset> load_datasets(const RunConfig& cfg);

// Architecture implied by the data (input kind, dims, class count).
ArchConfig derive_arch(const RunConfig& cfg, const DomainDataset& source);

}  // namespace coda
