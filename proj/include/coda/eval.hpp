#pragma once

#include <map>
#include <string>
#include <vector>

#include "coda/data.hpp"
#include "coda/layers.hpp"

namespace coda {

// Per-evaluation snapshot; the JSONL keys match these fields.
struct MetricsRecord {
  std::size_t iter = 0;
  double acc_tgt[2]{};
  double acc_src[2]{};
  double agree = 0.0;
  double l_p = 0.0;
  double l_d[2]{};
  double l_y[2]{};
  double l_ce[2]{};
  double d_g = 0.0;
  double d_g_raw = 0.0;
  std::map<std::size_t, double> knn;  // optional probe block

  bool operator==(const MetricsRecord&) const = default;
};

// Deterministic eval-mode class probabilities (running batch-norm stats,
// stochastic layers collapsed), computed in bounded chunks.
Tensor eval_probs(const Hypothesis& hyp, int hyp_id, const Tensor& inputs);
Tensor eval_feats(const Hypothesis& hyp, int hyp_id, const Tensor& inputs);

// Argmax with ties broken toward the smallest class index.
std::vector<int> argmax_rows(const Tensor& probs);

double accuracy(const Hypothesis& hyp, int hyp_id, const DomainDataset& data);

double agreement_rate(const Hypothesis& h1, const Hypothesis& h2,
                      const DomainDataset& target);

// Mean-centered projection onto the top eigenvectors of the covariance,
// eigenvalues descending. Rank deficiency keeps the available components and
// flags the result.
struct PcaProjection {
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
  std::vector<double> mean;    // (in_dim)
  std::vector<double> basis;   // (in_dim, out_dim), column-orthonormal
  std::vector<double> eigenvalues;
  bool truncated = false;

  Tensor apply(const Tensor& feats) const;
};

PcaProjection pca_fit(const Tensor& feats, std::size_t out_dims);

// Exact brute-force Euclidean kNN with majority vote; distance and vote ties
// break toward the smaller sample / class index.
std::map<std::size_t, double> knn_probe(const Tensor& train_feats,
                                        const std::vector<int>& train_labels,
                                        const Tensor& test_feats,
                                        const std::vector<int>& test_labels,
                                        const std::vector<std::size_t>& ks);

// JSONL with one object per record and a stable key order.
void emit_metrics(const std::vector<MetricsRecord>& records,
                  const std::string& path);
std::vector<MetricsRecord> parse_metrics(const std::string& path);
std::string metrics_line(const MetricsRecord& record);

// Line charts (accuracy/agreement vs iteration, kNN accuracy vs k when probe
// data is present) plus CSV curve data. Returns the files written.
std::vector<std::string> emit_plots(const std::vector<MetricsRecord>& records,
                                    const std::string& out_dir);

// Plot geometry, exposed so tests can recompute polyline coordinates.
struct PlotTransform {
  double x0, x1, y0, y1;          // data ranges
  double px0, px1, py0, py1;      // pixel box (y flipped)
  double map_x(double x) const;
  double map_y(double y) const;
};

}  // namespace coda
