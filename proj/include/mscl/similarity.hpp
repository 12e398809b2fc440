#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "mscl/dataset.hpp"

namespace mscl {

enum class SimilarityKind { kMobility, kPoi };
enum class Modality { kSV, kRV };

// Mobility similarity drives street-view triplets; POI similarity drives
// remote-view triplets.
inline Modality modality_for(SimilarityKind kind) {
  return kind == SimilarityKind::kMobility ? Modality::kSV : Modality::kRV;
}
inline const char* modality_name(Modality m) { return m == Modality::kSV ? "SV" : "RV"; }

struct SimilarityOptions {
  double epsilon = 1e-8;        // regularizer: lambda = 1 / (dist + epsilon)
  bool normalize_poi = false;   // L1-normalize POI count vectors before Eq. 3
};

// Euclidean distance over (m_in, m_out).
double mobility_distance(std::int64_t in_i, std::int64_t out_i, std::int64_t in_j,
                         std::int64_t out_j);
// 1 / (dist + epsilon).
double mobility_similarity(double dist, double epsilon);
// Euclidean distance over POI type counts; lengths must match.
double poi_distance(std::span<const std::int64_t> a, std::span<const std::int64_t> b);
double poi_similarity(double dist, double epsilon);

// Symmetric positive matrix of pairwise similarities; the diagonal holds
// 1/epsilon, which is each row's maximum.
class SimilarityMatrix {
 public:
  // region_ids maps matrix index to region id; empty means identity.
  SimilarityMatrix(SimilarityKind kind, std::size_t n, std::vector<double> values, double epsilon,
                   std::vector<int> region_ids = {});

  SimilarityKind kind() const { return kind_; }
  std::size_t size() const { return n_; }
  double epsilon() const { return epsilon_; }
  double at(std::size_t i, std::size_t j) const { return values_[i * n_ + j]; }
  int region_id(std::size_t i) const { return region_ids_[i]; }

  // Validates symmetry (1e-9), positivity and the diagonal-maximum property.
  void validate() const;

 private:
  SimilarityKind kind_;
  std::size_t n_;
  std::vector<double> values_;
  double epsilon_;
  std::vector<int> region_ids_;
};

SimilarityMatrix similarity_matrix(const DatasetBundle& bundle, SimilarityKind kind,
                                   const SimilarityOptions& options = {});

struct Triplet {
  int anchor = 0;
  int positive = 0;
  int negative = 0;
  double lambda_positive = 0.0;
  double lambda_negative = 0.0;
  Modality modality = Modality::kSV;

  bool operator==(const Triplet&) const = default;
};

struct MiningPolicy {
  std::size_t top_k_positive = 5;
  double negative_pool_quantile = 0.5;  // bottom fraction of each row
  std::size_t triplets_per_anchor = 4;
  std::uint64_t seed = 0;
};

struct MiningResult {
  std::vector<Triplet> triplets;
  // Set when some anchor's row was fully tied, in which case the
  // lambda(a,p) > lambda(a,n) guarantee cannot hold for that anchor.
  bool degenerate_ties = false;
};

// Rank-based mining: positives drawn uniformly from each anchor's
// top_k_positive most similar regions, negatives from the bottom quantile of
// its row. Ties break by ascending region id; sampling is driven by
// per-anchor generators Rng(mix_seed(policy.seed, anchor_index)), drawing the
// positive then the negative slot for each triplet in order.
MiningResult mine_triplets(const SimilarityMatrix& matrix, const MiningPolicy& policy);

// CSV: header modality,anchor,positive,negative,lambda_pos,lambda_neg
void write_triplets_csv(const std::filesystem::path& path, const std::vector<Triplet>& triplets);
std::vector<Triplet> read_triplets_csv(const std::filesystem::path& path);

}  // namespace mscl
