#include "mscl/similarity.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "mscl/error.hpp"
#include "mscl/rng.hpp"

namespace mscl {

double mobility_distance(std::int64_t in_i, std::int64_t out_i, std::int64_t in_j,
                         std::int64_t out_j) {
  const double din = static_cast<double>(in_i - in_j);
  const double dout = static_cast<double>(out_i - out_j);
  return std::sqrt(din * din + dout * dout);
}

double mobility_similarity(double dist, double epsilon) { return 1.0 / (dist + epsilon); }

double poi_distance(std::span<const std::int64_t> a, std::span<const std::int64_t> b) {
  if (a.size() != b.size()) {
    throw ContractError("poi_distance: vector lengths " + std::to_string(a.size()) + " and " +
                        std::to_string(b.size()) + " differ");
  }
  double acc = 0.0;
  for (std::size_t k = 0; k < a.size(); ++k) {
    const double d = static_cast<double>(a[k] - b[k]);
    acc += d * d;
  }
  return std::sqrt(acc);
}

double poi_similarity(double dist, double epsilon) { return 1.0 / (dist + epsilon); }

SimilarityMatrix::SimilarityMatrix(SimilarityKind kind, std::size_t n, std::vector<double> values,
                                   double epsilon, std::vector<int> region_ids)
    : kind_(kind), n_(n), values_(std::move(values)), epsilon_(epsilon),
      region_ids_(std::move(region_ids)) {
  if (values_.size() != n_ * n_) {
    throw ContractError("SimilarityMatrix: expected " + std::to_string(n_ * n_) + " values");
  }
  if (region_ids_.empty()) {
    region_ids_.resize(n_);
    std::iota(region_ids_.begin(), region_ids_.end(), 0);
  }
  if (region_ids_.size() != n_) {
    throw ContractError("SimilarityMatrix: region id count does not match size");
  }
  validate();
}

void SimilarityMatrix::validate() const {
  for (std::size_t i = 0; i < n_; ++i) {
    double row_max = 0.0;
    for (std::size_t j = 0; j < n_; ++j) {
      const double v = at(i, j);
      if (!(v > 0.0)) throw ContractError("SimilarityMatrix: entries must be positive");
      if (std::abs(v - at(j, i)) > 1e-9) throw ContractError("SimilarityMatrix: not symmetric");
      row_max = std::max(row_max, v);
    }
    if (at(i, i) < row_max) {
      throw ContractError("SimilarityMatrix: diagonal must be each row's maximum");
    }
  }
}

SimilarityMatrix similarity_matrix(const DatasetBundle& bundle, SimilarityKind kind,
                                   const SimilarityOptions& options) {
  if (bundle.regions.empty()) throw ContractError("similarity_matrix: empty bundle");
  if (options.epsilon <= 0.0) throw ContractError("similarity_matrix: epsilon must be positive");
  const std::size_t n = bundle.regions.size();

  // POI vectors, optionally L1-normalized (the distance then compares
  // distribution shape rather than volume).
  std::vector<std::vector<double>> poi;
  if (kind == SimilarityKind::kPoi) {
    poi.resize(n);
    for (std::size_t i = 0; i < n; ++i) {
      const auto& counts = bundle.regions[i].poi_counts;
      poi[i].assign(counts.begin(), counts.end());
      if (options.normalize_poi) {
        const double total = std::accumulate(poi[i].begin(), poi[i].end(), 0.0);
        if (total > 0.0)
          for (double& v : poi[i]) v /= total;
      }
    }
  }

  std::vector<double> values(n * n, 0.0);
  std::vector<int> ids(n);
  for (std::size_t i = 0; i < n; ++i) ids[i] = bundle.regions[i].id;
  for (std::size_t i = 0; i < n; ++i) {
    values[i * n + i] = 1.0 / options.epsilon;
    for (std::size_t j = i + 1; j < n; ++j) {
      double dist = 0.0;
      if (kind == SimilarityKind::kMobility) {
        dist = mobility_distance(bundle.regions[i].mobility_in, bundle.regions[i].mobility_out,
                                 bundle.regions[j].mobility_in, bundle.regions[j].mobility_out);
      } else {
        double acc = 0.0;
        for (std::size_t k = 0; k < poi[i].size(); ++k) {
          const double d = poi[i][k] - poi[j][k];
          acc += d * d;
        }
        dist = std::sqrt(acc);
      }
      const double lambda = 1.0 / (dist + options.epsilon);
      values[i * n + j] = lambda;
      values[j * n + i] = lambda;
    }
  }
  return SimilarityMatrix(kind, n, std::move(values), options.epsilon, std::move(ids));
}

MiningResult mine_triplets(const SimilarityMatrix& matrix, const MiningPolicy& policy) {
  const std::size_t n = matrix.size();
  if (policy.top_k_positive < 1) throw ContractError("mine_triplets: top_k_positive must be >= 1");
  if (policy.negative_pool_quantile <= 0.0 || policy.negative_pool_quantile >= 1.0) {
    throw ContractError("mine_triplets: negative_pool_quantile must be in (0,1)");
  }
  if (n < policy.top_k_positive + 2) {
    throw ContractError("mine_triplets: need at least top_k_positive + 2 regions, got " +
                        std::to_string(n));
  }

  MiningResult result;
  result.triplets.reserve(n * policy.triplets_per_anchor);
  const Modality modality = modality_for(matrix.kind());

  for (std::size_t a = 0; a < n; ++a) {
    std::vector<std::size_t> others;
    others.reserve(n - 1);
    for (std::size_t j = 0; j < n; ++j)
      if (j != a) others.push_back(j);

    double row_min = matrix.at(a, others[0]), row_max = row_min;
    for (const std::size_t j : others) {
      row_min = std::min(row_min, matrix.at(a, j));
      row_max = std::max(row_max, matrix.at(a, j));
    }
    if (row_min == row_max) result.degenerate_ties = true;

    // Ranking is by similarity with ascending-id tie break; scale of the
    // matrix never enters, only the order.
    std::vector<std::size_t> desc = others;
    std::sort(desc.begin(), desc.end(), [&](std::size_t x, std::size_t y) {
      const double lx = matrix.at(a, x), ly = matrix.at(a, y);
      if (lx != ly) return lx > ly;
      return x < y;
    });
    std::vector<std::size_t> asc = others;
    std::sort(asc.begin(), asc.end(), [&](std::size_t x, std::size_t y) {
      const double lx = matrix.at(a, x), ly = matrix.at(a, y);
      if (lx != ly) return lx < ly;
      return x < y;
    });

    const std::size_t pos_pool = policy.top_k_positive;
    const std::size_t neg_pool = std::max<std::size_t>(
        1, static_cast<std::size_t>(std::floor(policy.negative_pool_quantile *
                                               static_cast<double>(n - 1))));

    Rng rng(mix_seed(policy.seed, static_cast<std::uint64_t>(a)));
    for (std::size_t t = 0; t < policy.triplets_per_anchor; ++t) {
      const std::size_t p = desc[rng.uniform_index(pos_pool)];
      std::size_t q = asc[rng.uniform_index(neg_pool)];
      if (q == p) {
        // Pools can overlap for tiny n; fall back to the first distinct
        // candidate so the draw count stays fixed at two per triplet.
        bool found = false;
        for (std::size_t j = 0; j < neg_pool && !found; ++j) {
          if (asc[j] != p) {
            q = asc[j];
            found = true;
          }
        }
        if (!found) {
          for (const std::size_t j : asc) {
            if (j != p) {
              q = j;
              break;
            }
          }
        }
      }
      Triplet trip;
      trip.anchor = matrix.region_id(a);
      trip.positive = matrix.region_id(p);
      trip.negative = matrix.region_id(q);
      trip.lambda_positive = matrix.at(a, p);
      trip.lambda_negative = matrix.at(a, q);
      trip.modality = modality;
      result.triplets.push_back(trip);
    }
  }
  return result;
}

void write_triplets_csv(const std::filesystem::path& path, const std::vector<Triplet>& triplets) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write '" + path.string() + "'", 0);
  out << "modality,anchor,positive,negative,lambda_pos,lambda_neg\n";
  char buf[64];
  for (const auto& t : triplets) {
    out << modality_name(t.modality) << "," << t.anchor << "," << t.positive << "," << t.negative;
    std::snprintf(buf, sizeof(buf), ",%.17g", t.lambda_positive);
    out << buf;
    std::snprintf(buf, sizeof(buf), ",%.17g", t.lambda_negative);
    out << buf << "\n";
  }
}

std::vector<Triplet> read_triplets_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open '" + path.string() + "'", 0);
  std::string line;
  if (!std::getline(in, line) || line != "modality,anchor,positive,negative,lambda_pos,lambda_neg") {
    throw FormatError("triplets csv: bad header in '" + path.string() + "'", 0);
  }
  std::vector<Triplet> out;
  std::uint64_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::vector<std::string> fields;
    std::size_t start = 0;
    for (std::size_t i = 0; i <= line.size(); ++i) {
      if (i == line.size() || line[i] == ',') {
        fields.push_back(line.substr(start, i - start));
        start = i + 1;
      }
    }
    if (fields.size() != 6) throw FormatError("triplets csv: expected 6 fields", lineno);
    Triplet t;
    if (fields[0] == "SV") t.modality = Modality::kSV;
    else if (fields[0] == "RV") t.modality = Modality::kRV;
    else throw FormatError("triplets csv: unknown modality '" + fields[0] + "'", lineno);
    t.anchor = std::stoi(fields[1]);
    t.positive = std::stoi(fields[2]);
    t.negative = std::stoi(fields[3]);
    t.lambda_positive = std::stod(fields[4]);
    t.lambda_negative = std::stod(fields[5]);
    out.push_back(t);
  }
  return out;
}

}  // namespace mscl
