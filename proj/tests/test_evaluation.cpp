#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>

#include "mscl/evaluation.hpp"
#include "mscl/grad_check.hpp"
#include "test_helpers.hpp"

using namespace mscl;
using mscl::testing::random_tensor;

namespace {

// Cyclic Jacobi eigensolver for small symmetric matrices, the independent
// oracle for the power-iteration PCA.
void jacobi_eigen(std::vector<std::vector<double>> a, std::vector<double>& values,
                  std::vector<std::vector<double>>& vectors) {
  const std::size_t n = a.size();
  vectors.assign(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) vectors[i][i] = 1.0;
  for (int sweep = 0; sweep < 100; ++sweep) {
    double off = 0.0;
    for (std::size_t p = 0; p < n; ++p)
      for (std::size_t q = p + 1; q < n; ++q) off += a[p][q] * a[p][q];
    if (off < 1e-24) break;
    for (std::size_t p = 0; p < n; ++p) {
      for (std::size_t q = p + 1; q < n; ++q) {
        if (std::abs(a[p][q]) < 1e-30) continue;
        const double theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
        const double t = (theta >= 0 ? 1.0 : -1.0) /
                         (std::abs(theta) + std::sqrt(theta * theta + 1.0));
        const double c = 1.0 / std::sqrt(t * t + 1.0);
        const double s = t * c;
        for (std::size_t i = 0; i < n; ++i) {
          const double aip = a[i][p], aiq = a[i][q];
          a[i][p] = c * aip - s * aiq;
          a[i][q] = s * aip + c * aiq;
        }
        for (std::size_t i = 0; i < n; ++i) {
          const double api = a[p][i], aqi = a[q][i];
          a[p][i] = c * api - s * aqi;
          a[q][i] = s * api + c * aqi;
          const double vip = vectors[i][p], viq = vectors[i][q];
          vectors[i][p] = c * vip - s * viq;
          vectors[i][q] = s * vip + c * viq;
        }
      }
    }
  }
  values.resize(n);
  for (std::size_t i = 0; i < n; ++i) values[i] = a[i][i];
}

// Pair-counting ARI: 2(ad - bc) / ((a+b)(b+d) + (a+c)(c+d)).
double ari_pair_oracle(const std::vector<int>& la, const std::vector<int>& lb) {
  double a = 0, b = 0, c = 0, d = 0;
  for (std::size_t i = 0; i < la.size(); ++i) {
    for (std::size_t j = i + 1; j < la.size(); ++j) {
      const bool sa = la[i] == la[j], sb = lb[i] == lb[j];
      if (sa && sb) a += 1;
      else if (sa && !sb) b += 1;
      else if (!sa && sb) c += 1;
      else d += 1;
    }
  }
  const double denom = (a + b) * (b + d) + (a + c) * (c + d);
  if (denom == 0.0) return 1.0;
  return 2.0 * (a * d - b * c) / denom;
}

}  // namespace

TEST_CASE("r_squared") {
  const std::vector<double> y = {1, 2, 3};
  SUBCASE("perfect prediction is 1, mean prediction is 0") {
    CHECK(r_squared(y, y).value == doctest::Approx(1.0));
    const std::vector<double> mean_pred = {2, 2, 2};
    CHECK(r_squared(y, mean_pred).value == doctest::Approx(0.0));
  }
  SUBCASE("hand computation") {
    const std::vector<double> pred = {1, 2, 2};
    CHECK(r_squared(y, pred).value == doctest::Approx(0.5));
  }
  SUBCASE("constant truth flags undefined") {
    const std::vector<double> constant = {4, 4, 4};
    const R2Result r = r_squared(constant, y);
    CHECK(r.undefined);
  }
  SUBCASE("invariant under a common positive affine transform") {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<double> truth(8), pred(8);
      for (std::size_t i = 0; i < 8; ++i) {
        truth[i] = rng.gaussian();
        pred[i] = truth[i] + 0.3 * rng.gaussian();
      }
      const double base = r_squared(truth, pred).value;
      const double scale = std::exp(rng.uniform(-1.0, 1.0));
      const double shift = rng.uniform(-5.0, 5.0);
      std::vector<double> t2(8), p2(8);
      for (std::size_t i = 0; i < 8; ++i) {
        t2[i] = scale * truth[i] + shift;
        p2[i] = scale * pred[i] + shift;
      }
      CHECK(r_squared(t2, p2).value == doctest::Approx(base).epsilon(1e-9));
    }
  }
}

TEST_CASE("rmse") {
  const std::vector<double> a = {0, 0}, b = {3, 4};
  CHECK(rmse(a, a) == 0.0);
  CHECK(rmse(a, b) == doctest::Approx(std::sqrt(12.5)));
  SUBCASE("scale equivariance") {
    const std::vector<double> a2 = {0, 0}, b2 = {-6, -8};
    CHECK(rmse(a2, b2) == doctest::Approx(2.0 * rmse(a, b)));
  }
}

TEST_CASE("pca_project") {
  SUBCASE("collinear data is explained by the first component") {
    std::vector<std::vector<double>> points;
    for (int i = 0; i < 12; ++i) {
      const double t = static_cast<double>(i);
      points.push_back({2.0 * t, -1.0 * t, 0.5 * t});
    }
    const PcaResult pca = pca_project(points, 2);
    REQUIRE(!pca.eigenvalues.empty());
    double total = 0.0;
    for (const double v : pca.eigenvalues) total += v;
    CHECK(pca.eigenvalues[0] / total > 0.999);
    CHECK(pca.rank_deficient);  // only one direction of variance
  }
  SUBCASE("matches the Jacobi oracle on random points up to sign") {
    Rng rng(19);
    std::vector<std::vector<double>> points;
    for (int i = 0; i < 5; ++i) {
      points.push_back(to_row(random_tensor<double>({4}, rng)));
    }
    const PcaResult pca = pca_project(points, 2);

    const std::size_t d = 4;
    std::vector<double> mean(d, 0.0);
    for (const auto& p : points)
      for (std::size_t j = 0; j < d; ++j) mean[j] += p[j] / 5.0;
    std::vector<std::vector<double>> cov(d, std::vector<double>(d, 0.0));
    for (const auto& p : points)
      for (std::size_t i = 0; i < d; ++i)
        for (std::size_t j = 0; j < d; ++j) cov[i][j] += (p[i] - mean[i]) * (p[j] - mean[j]) / 4.0;
    std::vector<double> values;
    std::vector<std::vector<double>> vectors;
    jacobi_eigen(cov, values, vectors);
    std::vector<std::size_t> order = {0, 1, 2, 3};
    std::sort(order.begin(), order.end(), [&](std::size_t x, std::size_t y) {
      return values[x] > values[y];
    });
    for (std::size_t comp = 0; comp < 2; ++comp) {
      CHECK(pca.eigenvalues[comp] == doctest::Approx(values[order[comp]]).epsilon(1e-6));
      double dot_abs = 0.0;
      for (std::size_t j = 0; j < d; ++j) {
        dot_abs += pca.components[comp][j] * vectors[j][order[comp]];
      }
      CHECK(std::abs(dot_abs) == doctest::Approx(1.0).epsilon(1e-6));
    }
  }
  SUBCASE("components are orthonormal within 1e-6") {
    Rng rng(23);
    std::vector<std::vector<double>> points;
    for (int i = 0; i < 20; ++i) points.push_back(to_row(random_tensor<double>({6}, rng)));
    const PcaResult pca = pca_project(points, 3);
    for (std::size_t a = 0; a < pca.components.size(); ++a) {
      for (std::size_t b = 0; b < pca.components.size(); ++b) {
        double dot_ab = 0.0;
        for (std::size_t j = 0; j < 6; ++j) dot_ab += pca.components[a][j] * pca.components[b][j];
        CHECK(dot_ab == doctest::Approx(a == b ? 1.0 : 0.0).epsilon(1e-6));
      }
    }
  }
}

TEST_CASE("kmeans") {
  SUBCASE("well-separated blobs are recovered exactly") {
    Rng rng(7);
    std::vector<std::vector<double>> points;
    std::vector<int> truth;
    const std::vector<std::vector<double>> centers = {{0, 0}, {10, 0}, {0, 10}};
    for (int c = 0; c < 3; ++c) {
      for (int i = 0; i < 15; ++i) {
        points.push_back({centers[c][0] + 0.4 * rng.gaussian(), centers[c][1] + 0.4 * rng.gaussian()});
        truth.push_back(c);
      }
    }
    const KMeansResult km = kmeans(points, 3, 5);
    CHECK(adjusted_rand_index(truth, km.labels) == doctest::Approx(1.0));
  }
  SUBCASE("k == n puts every point in its own cluster with zero inertia") {
    Rng rng(9);
    std::vector<std::vector<double>> points;
    for (int i = 0; i < 6; ++i) points.push_back(to_row(random_tensor<double>({2}, rng)));
    const KMeansResult km = kmeans(points, 6, 1);
    CHECK(km.inertia == doctest::Approx(0.0));
    std::vector<int> sorted = km.labels;
    std::sort(sorted.begin(), sorted.end());
    for (int i = 0; i < 6; ++i) CHECK(sorted[i] == i);
  }
  SUBCASE("inertia is non-increasing across Lloyd iterations") {
    Rng rng(11);
    std::vector<std::vector<double>> points;
    for (int i = 0; i < 40; ++i) points.push_back(to_row(random_tensor<double>({3}, rng)));
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
      const KMeansResult km = kmeans(points, 4, seed);
      for (std::size_t i = 1; i < km.inertia_history.size(); ++i) {
        CHECK(km.inertia_history[i] <= km.inertia_history[i - 1] + 1e-9);
      }
    }
  }
  SUBCASE("identical seeds give identical labels") {
    Rng rng(13);
    std::vector<std::vector<double>> points;
    for (int i = 0; i < 25; ++i) points.push_back(to_row(random_tensor<double>({2}, rng)));
    CHECK(kmeans(points, 3, 42).labels == kmeans(points, 3, 42).labels);
  }
}

TEST_CASE("adjusted_rand_index") {
  SUBCASE("identical labelings score 1, renaming is invariant") {
    const std::vector<int> a = {0, 0, 1, 1, 2, 2};
    const std::vector<int> renamed = {5, 5, 9, 9, 1, 1};
    CHECK(adjusted_rand_index(a, a) == doctest::Approx(1.0));
    CHECK(adjusted_rand_index(a, renamed) == doctest::Approx(1.0));
  }
  SUBCASE("fixed 6-point contingency matches the all-pairs oracle") {
    const std::vector<int> a = {0, 0, 0, 1, 1, 1};
    const std::vector<int> b = {0, 0, 1, 1, 2, 2};
    CHECK(adjusted_rand_index(a, b) == doctest::Approx(ari_pair_oracle(a, b)).epsilon(1e-12));
  }
  SUBCASE("random labelings agree with the oracle and symmetry holds") {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
      std::vector<int> a(12), b(12);
      for (std::size_t i = 0; i < 12; ++i) {
        a[i] = static_cast<int>(rng.uniform_index(3));
        b[i] = static_cast<int>(rng.uniform_index(4));
      }
      const double ab = adjusted_rand_index(a, b);
      CHECK(ab == doctest::Approx(ari_pair_oracle(a, b)).epsilon(1e-12));
      CHECK(ab == doctest::Approx(adjusted_rand_index(b, a)).epsilon(1e-12));
    }
  }
}

namespace {

struct MlpFixture {
  EmbeddingTable embeddings;
  std::map<int, double> targets;
  SplitAssignment splits;
};

MlpFixture realizable_fixture(std::size_t n, std::size_t dim, std::uint64_t seed) {
  MlpFixture fx;
  fx.embeddings.dim = dim;
  Rng rng(seed);
  std::vector<double> w(dim);
  for (double& v : w) v = rng.gaussian() * 0.25;
  DatasetBundle fake;
  for (std::size_t i = 0; i < n; ++i) {
    const auto row = to_row(random_tensor<double>({dim}, rng));
    double wx = 0.0;
    for (std::size_t j = 0; j < dim; ++j) wx += w[j] * row[j];
    fx.embeddings.insert(static_cast<int>(i), row);
    // log1p(target) = 4 + wx exactly; wx is kept small enough that the
    // target stays positive
    fx.targets[static_cast<int>(i)] = std::expm1(4.0 + wx);
    RegionRecord r;
    r.id = static_cast<int>(i);
    fake.regions.push_back(r);
  }
  fx.splits = split_regions(fake, {0.6, 0.2, 0.2}, seed + 1);
  return fx;
}

}  // namespace

TEST_CASE("train_mlp_regressor") {
  SUBCASE("realizable linear target reaches test R^2 > 0.99") {
    const MlpFixture fx = realizable_fixture(200, 8, 3);
    RegressorConfig config;
    config.epochs = 2000;
    config.patience = 500;
    config.lr = 5e-3;
    config.batch_size = 256;  // full batch: less gradient noise near the optimum
    const RegressionReport report =
        train_mlp_regressor<double>(fx.embeddings, "toy", fx.targets, fx.splits, config, 7);
    CHECK(report.test.r2 > 0.99);
    CHECK(report.predictions.size() == 200);
  }

  SUBCASE("random-embedding control sits near zero R^2 (10 seeds)") {
    // Targets depend on a latent cluster, embeddings are pure noise.
    double total_r2 = 0.0;
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Rng rng(seed);
      MlpFixture fx;
      fx.embeddings.dim = 8;
      DatasetBundle fake;
      for (int i = 0; i < 60; ++i) {
        fx.embeddings.insert(i, to_row(random_tensor<double>({8}, rng)));
        fx.targets[i] = std::expm1(3.0 + (i % 3) + 0.2 * rng.gaussian());
        RegionRecord r;
        r.id = i;
        fake.regions.push_back(r);
      }
      fx.splits = split_regions(fake, {0.6, 0.2, 0.2}, seed);
      RegressorConfig config;
      config.epochs = 60;
      const RegressionReport report =
          train_mlp_regressor<double>(fx.embeddings, "noise", fx.targets, fx.splits, config, seed);
      total_r2 += report.test.r2;
    }
    CHECK(std::abs(total_r2 / 10.0) < 0.15);
  }

  SUBCASE("empty split is a contract error") {
    const MlpFixture fx = realizable_fixture(20, 4, 5);
    SplitAssignment broken = fx.splits;
    broken.validation.clear();
    CHECK_THROWS_AS(
        train_mlp_regressor<double>(fx.embeddings, "x", fx.targets, broken, RegressorConfig{}, 1),
        ContractError);
  }

  SUBCASE("deterministic given the seed") {
    const MlpFixture fx = realizable_fixture(40, 6, 11);
    RegressorConfig config;
    config.epochs = 30;
    const auto a = train_mlp_regressor<double>(fx.embeddings, "t", fx.targets, fx.splits, config, 9);
    const auto b = train_mlp_regressor<double>(fx.embeddings, "t", fx.targets, fx.splits, config, 9);
    CHECK(a.test.r2 == b.test.r2);
    REQUIRE(a.predictions.size() == b.predictions.size());
    for (std::size_t i = 0; i < a.predictions.size(); ++i) {
      CHECK(a.predictions[i].predicted == b.predictions[i].predicted);
    }
  }
}

TEST_CASE("mlp loss gradient passes the finite-difference oracle") {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Rng rng(seed);
    std::vector<Tensor<double>> inputs = {
        random_tensor<double>({4, 6}, rng),  // w1
        random_tensor<double>({6}, rng),     // b1
        random_tensor<double>({6, 1}, rng),  // w2
        random_tensor<double>({1}, rng),     // b2
    };
    const auto x = random_tensor<double>({3, 4}, rng);
    const auto y = random_tensor<double>({3, 1}, rng);
    const double err = grad_check<double>(
        [&x, &y](Tape<double>& tp, const std::vector<Var>& v) {
          Var h = relu(tp, affine(tp, tp.constant(x), v[0], v[1]));
          Var pred = affine(tp, h, v[2], v[3]);
          Var diff = sub(tp, pred, tp.constant(y));
          return mean(tp, mul(tp, diff, diff));
        },
        inputs, 1e-5);
    CHECK(err < 1e-4);
  }
}

TEST_CASE("cluster_analysis recovers planted structure from clean tables") {
  EmbeddingTable table;
  table.dim = 6;
  std::vector<int> ids, planted;
  Rng rng(2);
  for (int i = 0; i < 30; ++i) {
    std::vector<double> row(6, 0.0);
    row[i % 3] = 1.0;
    for (double& v : row) v += 0.05 * rng.gaussian();
    table.insert(i, row);
    ids.push_back(i);
    planted.push_back(i % 3);
  }
  const ClusterReport report = cluster_analysis(table, ids, planted, 3, 4);
  CHECK(report.has_planted_truth);
  CHECK(report.ari_vs_planted == doctest::Approx(1.0));
}
