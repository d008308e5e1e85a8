#include "coda/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iostream>
#include <sstream>

#include <json.hpp>

#include "coda/common.hpp"
#include "coda/ops.hpp"

namespace coda {

namespace {

constexpr std::size_t kEvalChunk = 512;

Tensor take_rows(const Tensor& t, std::size_t lo, std::size_t hi) {
  const std::size_t row = t.size() / t.shape[0];
  Shape shape = t.shape;
  shape[0] = hi - lo;
  std::vector<double> v(t.values().begin() + static_cast<std::ptrdiff_t>(lo * row),
                        t.values().begin() + static_cast<std::ptrdiff_t>(hi * row));
  return Tensor(std::move(shape), std::move(v));
}

Tensor append_rows(Tensor acc, const Tensor& chunk) {
  if (!acc.defined()) return chunk;
  Shape shape = acc.shape;
  shape[0] += chunk.shape[0];
  std::vector<double> v;
  v.reserve(acc.size() + chunk.size());
  v.insert(v.end(), acc.values().begin(), acc.values().end());
  v.insert(v.end(), chunk.values().begin(), chunk.values().end());
  return Tensor(std::move(shape), std::move(v));
}

Tensor eval_forward(const Hypothesis& hyp, int hyp_id, const Tensor& inputs,
                    bool with_head) {
  Tensor out;
  const std::size_t n = inputs.shape[0];
  for (std::size_t lo = 0; lo < n; lo += kEvalChunk) {
    const std::size_t hi = std::min(n, lo + kEvalChunk);
    ForwardCtx ctx;
    ctx.mode = Mode::kEval;
    ctx.hypothesis_id = hyp_id;
    Tensor x = take_rows(inputs, lo, hi);
    Tensor feats = hyp.g.forward(ctx, x);
    Tensor chunk;
    if (with_head) {
      chunk = softmax(hyp.h.forward(ctx, feats));
    } else {
      chunk = feats.shape.size() == 2
                  ? feats
                  : reshape(feats, {feats.shape[0],
                                    shape_size(feats.shape) / feats.shape[0]});
    }
    out = append_rows(out, chunk);
  }
  return out;
}

}  // namespace

Tensor eval_probs(const Hypothesis& hyp, int hyp_id, const Tensor& inputs) {
  return eval_forward(hyp, hyp_id, inputs, true);
}

Tensor eval_feats(const Hypothesis& hyp, int hyp_id, const Tensor& inputs) {
  return eval_forward(hyp, hyp_id, inputs, false);
}

std::vector<int> argmax_rows(const Tensor& probs) {
  const std::size_t r = probs.shape[0], c = probs.shape[1];
  std::vector<int> out(r);
  for (std::size_t i = 0; i < r; ++i) {
    std::size_t best = 0;
    for (std::size_t j = 1; j < c; ++j)
      if (probs.values()[i * c + j] > probs.values()[i * c + best]) best = j;
    out[i] = static_cast<int>(best);
  }
  return out;
}

double accuracy(const Hypothesis& hyp, int hyp_id, const DomainDataset& data) {
  if (!data.labeled()) throw Error("accuracy: dataset has no labels");
  if (data.size() == 0) throw Error("accuracy: empty dataset");
  const std::vector<int> pred = argmax_rows(eval_probs(hyp, hyp_id, data.inputs));
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i)
    if (pred[i] == data.labels[i]) ++hits;
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

double agreement_rate(const Hypothesis& h1, const Hypothesis& h2,
                      const DomainDataset& target) {
  if (target.size() == 0) throw Error("agreement_rate: empty dataset");
  const std::vector<int> p1 = argmax_rows(eval_probs(h1, 1, target.inputs));
  const std::vector<int> p2 = argmax_rows(eval_probs(h2, 2, target.inputs));
  std::size_t same = 0;
  for (std::size_t i = 0; i < p1.size(); ++i)
    if (p1[i] == p2[i]) ++same;
  return static_cast<double>(same) / static_cast<double>(p1.size());
}

namespace {

// Cyclic Jacobi eigendecomposition of a symmetric matrix. a is overwritten
// with the rotated matrix; v accumulates the eigenvectors as columns.
void jacobi_eigen(std::vector<double>& a, std::vector<double>& v,
                  std::size_t n) {
  v.assign(n * n, 0.0);
  for (std::size_t i = 0; i < n; ++i) v[i * n + i] = 1.0;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a[p * n + q] * a[p * n + q];
    if (off < 1e-24) break;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) {
        const double apq = a[p * n + q];
        if (std::abs(apq) < 1e-300) continue;
        const double app = a[p * n + p], aqq = a[q * n + q];
        const double theta = (aqq - app) / (2.0 * apq);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t k = 0; k < n; ++k) {
          const double akp = a[k * n + p], akq = a[k * n + q];
          a[k * n + p] = c * akp - s * akq;
          a[k * n + q] = s * akp + c * akq;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double apk = a[p * n + k], aqk = a[q * n + k];
          a[p * n + k] = c * apk - s * aqk;
          a[q * n + k] = s * apk + c * aqk;
        }
        for (std::size_t k = 0; k < n; ++k) {
          const double vkp = v[k * n + p], vkq = v[k * n + q];
          v[k * n + p] = c * vkp - s * vkq;
          v[k * n + q] = s * vkp + c * vkq;
        }
      }
  }
}

}  // namespace

PcaProjection pca_fit(const Tensor& feats, std::size_t out_dims) {
  if (feats.shape.size() != 2)
    throw ShapeError("pca: expected (samples, features), got " +
                     shape_str(feats.shape));
  const std::size_t n = feats.shape[0], d = feats.shape[1];
  if (d < out_dims)
    throw Error("pca: feature dimension " + std::to_string(d) +
                " below requested " + std::to_string(out_dims));
  if (n <= out_dims)
    throw Error("pca: need more than " + std::to_string(out_dims) +
                " samples, got " + std::to_string(n));

  PcaProjection proj;
  proj.in_dim = d;
  proj.mean.assign(d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < d; ++j) proj.mean[j] += feats.values()[i * d + j];
  for (double& m : proj.mean) m /= static_cast<double>(n);

  std::vector<double> cov(d * d, 0.0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t a = 0; a < d; ++a) {
      const double xa = feats.values()[i * d + a] - proj.mean[a];
      for (std::size_t b = a; b < d; ++b)
        cov[a * d + b] += xa * (feats.values()[i * d + b] - proj.mean[b]);
    }
  for (std::size_t a = 0; a < d; ++a)
    for (std::size_t b = a; b < d; ++b) {
      cov[a * d + b] /= static_cast<double>(n - 1);
      cov[b * d + a] = cov[a * d + b];
    }

  std::vector<double> vecs;
  jacobi_eigen(cov, vecs, d);

  std::vector<std::size_t> order(d);
  for (std::size_t i = 0; i < d; ++i) order[i] = i;
  std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return cov[a * d + a] > cov[b * d + b];
  });

  const double lmax = std::max(cov[order[0] * d + order[0]], 0.0);
  const double tol = 1e-12 * std::max(1.0, lmax);
  std::size_t keep = 0;
  while (keep < out_dims && cov[order[keep] * d + order[keep]] > tol) ++keep;
  proj.truncated = keep < out_dims;
  proj.out_dim = keep;

  proj.basis.assign(d * keep, 0.0);
  proj.eigenvalues.resize(keep);
  for (std::size_t c = 0; c < keep; ++c) {
    const std::size_t src = order[c];
    proj.eigenvalues[c] = cov[src * d + src];
    // Sign convention: largest-magnitude coordinate positive, so the fit is
    // reproducible across sample orderings.
    std::size_t peak = 0;
    for (std::size_t r = 1; r < d; ++r)
      if (std::abs(vecs[r * d + src]) > std::abs(vecs[peak * d + src])) peak = r;
    const double flip = vecs[peak * d + src] < 0 ? -1.0 : 1.0;
    for (std::size_t r = 0; r < d; ++r)
      proj.basis[r * keep + c] = flip * vecs[r * d + src];
  }
  return proj;
}

Tensor PcaProjection::apply(const Tensor& feats) const {
  if (feats.shape.size() != 2 || feats.shape[1] != in_dim)
    throw ShapeError("pca: cannot project " + shape_str(feats.shape) +
                     " with a " + std::to_string(in_dim) + "-dim fit");
  const std::size_t n = feats.shape[0];
  std::vector<double> centered(feats.values());
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = 0; j < in_dim; ++j) centered[i * in_dim + j] -= mean[j];
  Tensor c(Shape{n, in_dim}, std::move(centered));
  Tensor b(Shape{in_dim, out_dim}, basis);
  return matmul(c, b);
}

std::map<std::size_t, double> knn_probe(const Tensor& train_feats,
                                        const std::vector<int>& train_labels,
                                        const Tensor& test_feats,
                                        const std::vector<int>& test_labels,
                                        const std::vector<std::size_t>& ks) {
  const std::size_t n_train = train_feats.shape[0];
  const std::size_t n_test = test_feats.shape[0];
  const std::size_t d = train_feats.shape[1];
  if (test_feats.shape[1] != d)
    throw ShapeError("knn: train dim " + std::to_string(d) + " vs test dim " +
                     std::to_string(test_feats.shape[1]));
  if (train_labels.size() != n_train || test_labels.size() != n_test)
    throw Error("knn: label count mismatch");
  for (std::size_t k : ks)
    if (k == 0 || k > n_train)
      throw Error("knn: k=" + std::to_string(k) + " outside [1, " +
                  std::to_string(n_train) + "]");

  int max_label = 0;
  for (int l : train_labels) max_label = std::max(max_label, l);
  const std::size_t classes = static_cast<std::size_t>(max_label) + 1;

  std::map<std::size_t, std::size_t> hits;
  for (std::size_t k : ks) hits[k] = 0;
  const std::size_t k_top = *std::max_element(ks.begin(), ks.end());

  std::vector<std::pair<double, std::size_t>> dist(n_train);
  for (std::size_t t = 0; t < n_test; ++t) {
    const double* q = test_feats.values().data() + t * d;
    for (std::size_t i = 0; i < n_train; ++i) {
      const double* p = train_feats.values().data() + i * d;
      double acc = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        const double diff = q[j] - p[j];
        acc += diff * diff;
      }
      dist[i] = {acc, i};
    }
    std::partial_sort(dist.begin(), dist.begin() + static_cast<std::ptrdiff_t>(k_top),
                      dist.end());
    for (std::size_t k : ks) {
      std::vector<std::size_t> votes(classes, 0);
      for (std::size_t i = 0; i < k; ++i)
        ++votes[static_cast<std::size_t>(train_labels[dist[i].second])];
      std::size_t best = 0;
      for (std::size_t c = 1; c < classes; ++c)
        if (votes[c] > votes[best]) best = c;
      if (static_cast<int>(best) == test_labels[t]) ++hits[k];
    }
  }

  std::map<std::size_t, double> out;
  for (std::size_t k : ks)
    out[k] = static_cast<double>(hits[k]) / static_cast<double>(n_test);
  return out;
}

// ---------------------------------------------------------------------------
// Metrics serialization and plots.
// ---------------------------------------------------------------------------

std::string metrics_line(const MetricsRecord& r) {
  nlohmann::ordered_json j;
  j["iter"] = r.iter;
  j["acc_tgt_1"] = r.acc_tgt[0];
  j["acc_tgt_2"] = r.acc_tgt[1];
  j["acc_src_1"] = r.acc_src[0];
  j["acc_src_2"] = r.acc_src[1];
  j["agree"] = r.agree;
  j["l_p"] = r.l_p;
  j["l_d_1"] = r.l_d[0];
  j["l_d_2"] = r.l_d[1];
  j["l_y_1"] = r.l_y[0];
  j["l_y_2"] = r.l_y[1];
  j["l_ce_1"] = r.l_ce[0];
  j["l_ce_2"] = r.l_ce[1];
  j["d_g"] = r.d_g;
  j["d_g_raw"] = r.d_g_raw;
  if (!r.knn.empty()) {
    nlohmann::ordered_json kj;
    for (const auto& [k, v] : r.knn) kj[std::to_string(k)] = v;
    j["knn"] = kj;
  }
  return j.dump();
}

void emit_metrics(const std::vector<MetricsRecord>& records,
                  const std::string& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  for (const auto& r : records) out << metrics_line(r) << "\n";
  if (!out) throw IoError("failed while writing " + path);
}

std::vector<MetricsRecord> parse_metrics(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open " + path);
  std::vector<MetricsRecord> out;
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    nlohmann::json j = nlohmann::json::parse(line);
    MetricsRecord r;
    r.iter = j.at("iter").get<std::size_t>();
    r.acc_tgt[0] = j.at("acc_tgt_1").get<double>();
    r.acc_tgt[1] = j.at("acc_tgt_2").get<double>();
    r.acc_src[0] = j.at("acc_src_1").get<double>();
    r.acc_src[1] = j.at("acc_src_2").get<double>();
    r.agree = j.at("agree").get<double>();
    r.l_p = j.at("l_p").get<double>();
    r.l_d[0] = j.at("l_d_1").get<double>();
    r.l_d[1] = j.at("l_d_2").get<double>();
    r.l_y[0] = j.at("l_y_1").get<double>();
    r.l_y[1] = j.at("l_y_2").get<double>();
    r.l_ce[0] = j.at("l_ce_1").get<double>();
    r.l_ce[1] = j.at("l_ce_2").get<double>();
    r.d_g = j.at("d_g").get<double>();
    r.d_g_raw = j.at("d_g_raw").get<double>();
    if (j.contains("knn"))
      for (const auto& [k, v] : j.at("knn").items())
        r.knn[static_cast<std::size_t>(std::stoul(k))] = v.get<double>();
    out.push_back(std::move(r));
  }
  return out;
}

double PlotTransform::map_x(double x) const {
  return px0 + (x - x0) / (x1 - x0) * (px1 - px0);
}

double PlotTransform::map_y(double y) const {
  return py0 - (y - y0) / (y1 - y0) * (py0 - py1);
}

namespace {

constexpr double kPlotW = 640, kPlotH = 400;

PlotTransform accuracy_transform(double x_max) {
  // Fixed y range [0, 1.05]; x range [0, max iteration].
  return {0.0, x_max > 0 ? x_max : 1.0, 0.0, 1.05, 60.0, kPlotW - 20.0,
          kPlotH - 40.0, 20.0};
}

struct Series {
  std::string label;
  std::string color;
  std::vector<std::pair<double, double>> points;
};

void write_svg(const std::string& path, const PlotTransform& tr,
               const std::vector<Series>& series, const std::string& x_label) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path);
  out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << kPlotW
      << "\" height=\"" << kPlotH << "\" viewBox=\"0 0 " << kPlotW << " "
      << kPlotH << "\">\n";
  out << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
  // Axes.
  out << "<line x1=\"" << tr.px0 << "\" y1=\"" << tr.py0 << "\" x2=\""
      << tr.px1 << "\" y2=\"" << tr.py0 << "\" stroke=\"black\"/>\n";
  out << "<line x1=\"" << tr.px0 << "\" y1=\"" << tr.py0 << "\" x2=\""
      << tr.px0 << "\" y2=\"" << tr.py1 << "\" stroke=\"black\"/>\n";
  for (int i = 0; i <= 4; ++i) {
    const double fy = tr.y0 + (tr.y1 - tr.y0) * i / 4.0;
    const double py = tr.map_y(fy);
    out << "<text x=\"" << tr.px0 - 8 << "\" y=\"" << py
        << "\" font-size=\"10\" text-anchor=\"end\">" << fy << "</text>\n";
    const double fx = tr.x0 + (tr.x1 - tr.x0) * i / 4.0;
    const double px = tr.map_x(fx);
    out << "<text x=\"" << px << "\" y=\"" << tr.py0 + 16
        << "\" font-size=\"10\" text-anchor=\"middle\">" << fx << "</text>\n";
  }
  out << "<text x=\"" << (tr.px0 + tr.px1) / 2 << "\" y=\"" << kPlotH - 6
      << "\" font-size=\"11\" text-anchor=\"middle\">" << x_label
      << "</text>\n";
  double ly = tr.py1 + 12;
  for (const auto& s : series) {
    out << "<polyline fill=\"none\" stroke=\"" << s.color
        << "\" stroke-width=\"1.5\" points=\"";
    char buf[64];
    for (const auto& [x, y] : s.points) {
      std::snprintf(buf, sizeof buf, "%.3f,%.3f ", tr.map_x(x), tr.map_y(y));
      out << buf;
    }
    out << "\"/>\n";
    out << "<text x=\"" << tr.px1 - 150 << "\" y=\"" << ly
        << "\" font-size=\"11\" fill=\"" << s.color << "\">" << s.label
        << "</text>\n";
    ly += 14;
  }
  out << "</svg>\n";
  if (!out) throw IoError("failed while writing " + path);
}

}  // namespace

std::vector<std::string> emit_plots(const std::vector<MetricsRecord>& records,
                                    const std::string& out_dir) {
  std::vector<std::string> written;
  if (records.empty()) {
    std::cerr << "emit_plots: no metrics records, skipping plots\n";
    return written;
  }

  const std::string csv_path = out_dir + "/curves.csv";
  {
    std::ofstream csv(csv_path);
    if (!csv) throw IoError("cannot write " + csv_path);
    csv << "iter,acc_tgt_1,acc_tgt_2,acc_src_1,acc_src_2,agree,l_p,d_g,d_g_raw\n";
    csv << std::setprecision(17);
    for (const auto& r : records)
      csv << r.iter << "," << r.acc_tgt[0] << "," << r.acc_tgt[1] << ","
          << r.acc_src[0] << "," << r.acc_src[1] << "," << r.agree << ","
          << r.l_p << "," << r.d_g << "," << r.d_g_raw << "\n";
  }
  written.push_back(csv_path);

  PlotTransform tr = accuracy_transform(static_cast<double>(records.back().iter));
  std::vector<Series> series = {
      {"target acc f1", "#1f77b4", {}},
      {"target acc f2", "#ff7f0e", {}},
      {"agreement", "#2ca02c", {}},
  };
  for (const auto& r : records) {
    const double it = static_cast<double>(r.iter);
    series[0].points.emplace_back(it, r.acc_tgt[0]);
    series[1].points.emplace_back(it, r.acc_tgt[1]);
    series[2].points.emplace_back(it, r.agree);
  }
  const std::string acc_path = out_dir + "/accuracy.svg";
  write_svg(acc_path, tr, series, "iteration");
  written.push_back(acc_path);

  const MetricsRecord* probe = nullptr;
  for (auto it = records.rbegin(); it != records.rend(); ++it)
    if (!it->knn.empty()) {
      probe = &*it;
      break;
    }
  if (probe) {
    const std::string knn_csv = out_dir + "/knn.csv";
    std::ofstream csv(knn_csv);
    if (!csv) throw IoError("cannot write " + knn_csv);
    csv << "k,accuracy\n" << std::setprecision(17);
    Series s{"knn target acc", "#d62728", {}};
    double k_max = 1.0;
    for (const auto& [k, v] : probe->knn) {
      csv << k << "," << v << "\n";
      s.points.emplace_back(static_cast<double>(k), v);
      k_max = std::max(k_max, static_cast<double>(k));
    }
    written.push_back(knn_csv);
    PlotTransform ktr = accuracy_transform(k_max);
    const std::string knn_path = out_dir + "/knn.svg";
    write_svg(knn_path, ktr, {s}, "k");
    written.push_back(knn_path);
  }
  return written;
}

}  // namespace coda
