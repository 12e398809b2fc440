#include "mscl/evaluation.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>

namespace mscl {

R2Result r_squared(std::span<const double> y_true, std::span<const double> y_pred) {
  if (y_true.size() != y_pred.size() || y_true.empty()) {
    throw ContractError("r_squared: inputs must be nonempty and of equal length");
  }
  double mean = 0.0;
  for (const double y : y_true) mean += y;
  mean /= static_cast<double>(y_true.size());
  double ss_tot = 0.0, ss_res = 0.0;
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    ss_tot += (y_true[i] - mean) * (y_true[i] - mean);
    ss_res += (y_true[i] - y_pred[i]) * (y_true[i] - y_pred[i]);
  }
  if (ss_tot == 0.0) return R2Result{0.0, true};
  return R2Result{1.0 - ss_res / ss_tot, false};
}

double rmse(std::span<const double> y_true, std::span<const double> y_pred) {
  if (y_true.size() != y_pred.size() || y_true.empty()) {
    throw ContractError("rmse: inputs must be nonempty and of equal length");
  }
  double acc = 0.0;
  for (std::size_t i = 0; i < y_true.size(); ++i) {
    acc += (y_true[i] - y_pred[i]) * (y_true[i] - y_pred[i]);
  }
  return std::sqrt(acc / static_cast<double>(y_true.size()));
}

namespace {

constexpr double kPowerTolerance = 1e-9;
constexpr std::size_t kPowerMaxIters = 10000;

std::vector<double> matvec_sym(const std::vector<double>& m, std::size_t d,
                               const std::vector<double>& v) {
  std::vector<double> out(d, 0.0);
  for (std::size_t i = 0; i < d; ++i) {
    double acc = 0.0;
    for (std::size_t j = 0; j < d; ++j) acc += m[i * d + j] * v[j];
    out[i] = acc;
  }
  return out;
}

double norm2(const std::vector<double>& v) {
  double acc = 0.0;
  for (const double x : v) acc += x * x;
  return std::sqrt(acc);
}

}  // namespace

PcaResult pca_project(const std::vector<std::vector<double>>& points, std::size_t k) {
  const std::size_t n = points.size();
  if (n < k + 1) throw ContractError("pca_project: need at least k+1 points");
  const std::size_t d = points.front().size();
  for (const auto& p : points) {
    if (p.size() != d) throw ContractError("pca_project: ragged input");
  }

  std::vector<double> mean(d, 0.0);
  for (const auto& p : points)
    for (std::size_t j = 0; j < d; ++j) mean[j] += p[j];
  for (std::size_t j = 0; j < d; ++j) mean[j] /= static_cast<double>(n);

  // Covariance of the centered data.
  std::vector<double> cov(d * d, 0.0);
  for (const auto& p : points) {
    for (std::size_t i = 0; i < d; ++i) {
      const double xi = p[i] - mean[i];
      for (std::size_t j = i; j < d; ++j) cov[i * d + j] += xi * (p[j] - mean[j]);
    }
  }
  const double denom = static_cast<double>(n - 1);
  for (std::size_t i = 0; i < d; ++i)
    for (std::size_t j = i; j < d; ++j) {
      cov[i * d + j] /= denom;
      cov[j * d + i] = cov[i * d + j];
    }
  double trace = 0.0;
  for (std::size_t i = 0; i < d; ++i) trace += cov[i * d + i];

  PcaResult result;
  Rng rng(0x9c0fffu);
  for (std::size_t comp = 0; comp < std::min(k, d); ++comp) {
    std::vector<double> v(d);
    for (double& x : v) x = rng.gaussian();
    double nv = norm2(v);
    for (double& x : v) x /= nv;

    double eigenvalue = 0.0;
    for (std::size_t iter = 0; iter < kPowerMaxIters; ++iter) {
      std::vector<double> w = matvec_sym(cov, d, v);
      const double nw = norm2(w);
      if (nw == 0.0) {
        eigenvalue = 0.0;
        break;
      }
      for (double& x : w) x /= nw;
      double diff = 0.0;
      for (std::size_t j = 0; j < d; ++j) diff += (w[j] - v[j]) * (w[j] - v[j]);
      v = std::move(w);
      eigenvalue = nw;
      if (std::sqrt(diff) < kPowerTolerance) break;
    }

    // Anything at numerical-noise scale relative to the total variance marks
    // the data as rank deficient below k.
    if (eigenvalue <= std::max(1e-12, 1e-12 * trace)) {
      result.rank_deficient = true;
      break;
    }

    // Deterministic sign: flip so the largest-magnitude coordinate is positive.
    std::size_t arg = 0;
    for (std::size_t j = 1; j < d; ++j)
      if (std::abs(v[j]) > std::abs(v[arg])) arg = j;
    if (v[arg] < 0.0)
      for (double& x : v) x = -x;

    // Deflate.
    for (std::size_t i = 0; i < d; ++i)
      for (std::size_t j = 0; j < d; ++j) cov[i * d + j] -= eigenvalue * v[i] * v[j];

    result.components.push_back(v);
    result.eigenvalues.push_back(eigenvalue);
  }
  if (result.components.size() < k) result.rank_deficient = true;

  result.coordinates.assign(n, std::vector<double>(result.components.size(), 0.0));
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t comp = 0; comp < result.components.size(); ++comp) {
      double acc = 0.0;
      for (std::size_t j = 0; j < d; ++j) acc += (points[r][j] - mean[j]) * result.components[comp][j];
      result.coordinates[r][comp] = acc;
    }
  }
  return result;
}

namespace {

double sq_dist(const std::vector<double>& a, const std::vector<double>& b) {
  double acc = 0.0;
  for (std::size_t j = 0; j < a.size(); ++j) acc += (a[j] - b[j]) * (a[j] - b[j]);
  return acc;
}

}  // namespace

KMeansResult kmeans(const std::vector<std::vector<double>>& points, std::size_t k,
                    std::uint64_t seed) {
  const std::size_t n = points.size();
  if (k == 0 || n < k) throw ContractError("kmeans: need at least k points");
  const std::size_t d = points.front().size();

  Rng rng(seed);
  KMeansResult result;
  result.centroids.reserve(k);

  // k-means++ seeding.
  result.centroids.push_back(points[rng.uniform_index(n)]);
  std::vector<double> dist(n);
  while (result.centroids.size() < k) {
    double total = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      double best = std::numeric_limits<double>::max();
      for (const auto& c : result.centroids) best = std::min(best, sq_dist(points[i], c));
      dist[i] = best;
      total += best;
    }
    if (total == 0.0) {
      result.centroids.push_back(points[rng.uniform_index(n)]);
      continue;
    }
    double target = rng.uniform() * total;
    std::size_t chosen = n - 1;
    for (std::size_t i = 0; i < n; ++i) {
      target -= dist[i];
      if (target <= 0.0) {
        chosen = i;
        break;
      }
    }
    result.centroids.push_back(points[chosen]);
  }

  result.labels.assign(n, 0);
  for (std::size_t iter = 0; iter < 300; ++iter) {
    bool changed = false;
    double inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
      std::size_t best = 0;
      double best_d = sq_dist(points[i], result.centroids[0]);
      for (std::size_t c = 1; c < k; ++c) {
        const double dd = sq_dist(points[i], result.centroids[c]);
        if (dd < best_d) {
          best_d = dd;
          best = c;
        }
      }
      if (result.labels[i] != static_cast<int>(best)) {
        result.labels[i] = static_cast<int>(best);
        changed = true;
      }
      inertia += best_d;
    }
    result.inertia = inertia;
    result.inertia_history.push_back(inertia);
    if (!changed && iter > 0) break;

    std::vector<std::vector<double>> sums(k, std::vector<double>(d, 0.0));
    std::vector<std::size_t> counts(k, 0);
    for (std::size_t i = 0; i < n; ++i) {
      counts[result.labels[i]] += 1;
      for (std::size_t j = 0; j < d; ++j) sums[result.labels[i]][j] += points[i][j];
    }
    for (std::size_t c = 0; c < k; ++c) {
      if (counts[c] == 0) {
        // Reseed an empty cluster to the point farthest from its centroid.
        std::size_t far = 0;
        double far_d = -1.0;
        for (std::size_t i = 0; i < n; ++i) {
          const double dd = sq_dist(points[i], result.centroids[result.labels[i]]);
          if (dd > far_d) {
            far_d = dd;
            far = i;
          }
        }
        result.centroids[c] = points[far];
      } else {
        for (std::size_t j = 0; j < d; ++j) {
          result.centroids[c][j] = sums[c][j] / static_cast<double>(counts[c]);
        }
      }
    }
  }
  return result;
}

double adjusted_rand_index(std::span<const int> labels_a, std::span<const int> labels_b) {
  if (labels_a.size() != labels_b.size()) {
    throw ContractError("adjusted_rand_index: label vectors differ in length");
  }
  const std::size_t n = labels_a.size();
  std::map<int, std::size_t> ia, ib;
  for (const int l : labels_a) ia.emplace(l, ia.size());
  for (const int l : labels_b) ib.emplace(l, ib.size());
  std::vector<std::vector<std::uint64_t>> contingency(ia.size(),
                                                      std::vector<std::uint64_t>(ib.size(), 0));
  for (std::size_t i = 0; i < n; ++i) contingency[ia.at(labels_a[i])][ib.at(labels_b[i])] += 1;

  const auto choose2 = [](std::uint64_t x) { return static_cast<double>(x) * (x - 1) / 2.0; };
  double sum_ij = 0.0;
  std::vector<std::uint64_t> row_sum(ia.size(), 0), col_sum(ib.size(), 0);
  for (std::size_t r = 0; r < ia.size(); ++r)
    for (std::size_t c = 0; c < ib.size(); ++c) {
      sum_ij += choose2(contingency[r][c]);
      row_sum[r] += contingency[r][c];
      col_sum[c] += contingency[r][c];
    }
  double sum_a = 0.0, sum_b = 0.0;
  for (const auto s : row_sum) sum_a += choose2(s);
  for (const auto s : col_sum) sum_b += choose2(s);
  const double total = choose2(n);
  const double expected = sum_a * sum_b / total;
  const double max_index = 0.5 * (sum_a + sum_b);
  if (max_index == expected) return 1.0;  // both partitions trivial
  return (sum_ij - expected) / (max_index - expected);
}

ClusterReport cluster_analysis(const EmbeddingTable& embeddings,
                               const std::vector<int>& region_ids,
                               const std::vector<int>& planted, std::size_t k,
                               std::uint64_t seed) {
  std::vector<std::vector<double>> points;
  points.reserve(region_ids.size());
  for (const int id : region_ids) points.push_back(embeddings.at(id));

  ClusterReport report;
  report.region_ids = region_ids;
  const PcaResult pca = pca_project(points, 2);
  report.pca_coordinates = pca.coordinates;
  const KMeansResult km = kmeans(pca.coordinates, k, seed);
  report.labels = km.labels;
  if (planted.size() == region_ids.size() && !planted.empty()) {
    report.has_planted_truth = true;
    report.ari_vs_planted = adjusted_rand_index(planted, km.labels);
  }
  return report;
}

void write_cluster_csv(const std::filesystem::path& path, const ClusterReport& report) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write '" + path.string() + "'", 0);
  out << "region_id,pc1,pc2,label\n";
  char buf[96];
  for (std::size_t i = 0; i < report.region_ids.size(); ++i) {
    const double pc1 = report.pca_coordinates[i].size() > 0 ? report.pca_coordinates[i][0] : 0.0;
    const double pc2 = report.pca_coordinates[i].size() > 1 ? report.pca_coordinates[i][1] : 0.0;
    std::snprintf(buf, sizeof(buf), "%d,%.17g,%.17g,%d\n", report.region_ids[i], pc1, pc2,
                  report.labels[i]);
    out << buf;
  }
}

}  // namespace mscl
