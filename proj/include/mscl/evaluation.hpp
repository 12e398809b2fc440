#pragma once

#include <array>
#include <cstdint>
#include <map>
#include <span>
#include <string>
#include <vector>

#include "mscl/adam.hpp"
#include "mscl/dataset.hpp"
#include "mscl/embedding.hpp"
#include "mscl/rng.hpp"
#include "mscl/tape.hpp"

namespace mscl {

struct R2Result {
  double value = 0.0;
  bool undefined = false;  // y_true constant
};

// 1 - SS_res / SS_tot.
R2Result r_squared(std::span<const double> y_true, std::span<const double> y_pred);
double rmse(std::span<const double> y_true, std::span<const double> y_pred);

struct RegressorConfig {
  std::size_t hidden = 64;
  double lr = 5e-4;
  std::size_t epochs = 200;
  std::size_t patience = 10;  // epochs without validation RMSE improvement
  std::size_t batch_size = 32;
};

struct SplitMetrics {
  double r2 = 0.0;
  double rmse = 0.0;
  bool r2_undefined = false;
};

struct Prediction {
  int region_id = 0;
  double true_log = 0.0;
  double predicted = 0.0;
};

struct RegressionReport {
  std::string indicator;
  SplitMetrics train, validation, test;
  std::vector<Prediction> predictions;  // all splits, region id order
};

// One-hidden-layer MLP on log1p targets, Adam, model selection by validation
// RMSE with patience. Features and targets are standardized internally on
// train statistics; reported metrics are on the log scale.
template <typename T>
RegressionReport train_mlp_regressor(const EmbeddingTable& embeddings,
                                     const std::string& indicator,
                                     const std::map<int, double>& raw_targets,
                                     const SplitAssignment& splits, const RegressorConfig& config,
                                     std::uint64_t seed);

struct PcaResult {
  std::vector<std::vector<double>> coordinates;  // n x k
  std::vector<std::vector<double>> components;   // k x d, orthonormal
  std::vector<double> eigenvalues;               // descending
  bool rank_deficient = false;                   // fewer than k usable components
};

// Mean-centered projection onto the top-k covariance eigenvectors, computed
// by power iteration with deflation (tol 1e-9, max 10000 iterations).
PcaResult pca_project(const std::vector<std::vector<double>>& points, std::size_t k = 2);

struct KMeansResult {
  std::vector<int> labels;
  std::vector<std::vector<double>> centroids;
  double inertia = 0.0;
  std::vector<double> inertia_history;  // per Lloyd iteration, non-increasing
};

// k-means++ seeding then Lloyd iterations to a fixed point (at most 300);
// empty clusters are reseeded to the farthest point.
KMeansResult kmeans(const std::vector<std::vector<double>>& points, std::size_t k,
                    std::uint64_t seed);

double adjusted_rand_index(std::span<const int> labels_a, std::span<const int> labels_b);

struct ClusterReport {
  std::vector<int> region_ids;
  std::vector<std::vector<double>> pca_coordinates;  // n x 2
  std::vector<int> labels;
  double ari_vs_planted = 0.0;
  bool has_planted_truth = false;
};

// PCA to 2-D then k-means, scored against planted clusters when available.
ClusterReport cluster_analysis(const EmbeddingTable& embeddings,
                               const std::vector<int>& region_ids,
                               const std::vector<int>& planted, std::size_t k,
                               std::uint64_t seed);

void write_cluster_csv(const std::filesystem::path& path, const ClusterReport& report);

// ---------------------------------------------------------------------------
// Template implementation
// ---------------------------------------------------------------------------

template <typename T>
RegressionReport train_mlp_regressor(const EmbeddingTable& embeddings,
                                     const std::string& indicator,
                                     const std::map<int, double>& raw_targets,
                                     const SplitAssignment& splits, const RegressorConfig& config,
                                     std::uint64_t seed) {
  if (splits.train.empty() || splits.validation.empty() || splits.test.empty()) {
    throw ContractError("train_mlp_regressor: every split must be nonempty");
  }
  for (const auto& ids : {splits.train, splits.validation, splits.test}) {
    for (const int id : ids) {
      if (!embeddings.has(id)) {
        throw ContractError("train_mlp_regressor: region " + std::to_string(id) +
                            " has no embedding");
      }
      if (!raw_targets.count(id)) {
        throw ContractError("train_mlp_regressor: region " + std::to_string(id) +
                            " has no target");
      }
    }
  }

  const std::size_t dim = embeddings.dim;

  // Standardization fitted on the train split.
  std::vector<double> feat_mean(dim, 0.0), feat_std(dim, 0.0);
  double y_mean = 0.0, y_std = 0.0;
  for (const int id : splits.train) {
    const auto& row = embeddings.at(id);
    for (std::size_t j = 0; j < dim; ++j) feat_mean[j] += row[j];
    y_mean += log_transform(raw_targets.at(id));
  }
  const double n_train = static_cast<double>(splits.train.size());
  for (std::size_t j = 0; j < dim; ++j) feat_mean[j] /= n_train;
  y_mean /= n_train;
  for (const int id : splits.train) {
    const auto& row = embeddings.at(id);
    for (std::size_t j = 0; j < dim; ++j) {
      const double d = row[j] - feat_mean[j];
      feat_std[j] += d * d;
    }
    const double dy = log_transform(raw_targets.at(id)) - y_mean;
    y_std += dy * dy;
  }
  for (std::size_t j = 0; j < dim; ++j) {
    feat_std[j] = std::sqrt(feat_std[j] / n_train);
    if (feat_std[j] == 0.0) feat_std[j] = 1.0;
  }
  y_std = std::sqrt(y_std / n_train);
  if (y_std == 0.0) y_std = 1.0;

  const auto features_of = [&](int id) {
    const auto& row = embeddings.at(id);
    std::vector<T> f(dim);
    for (std::size_t j = 0; j < dim; ++j) f[j] = static_cast<T>((row[j] - feat_mean[j]) / feat_std[j]);
    return f;
  };
  const auto target_of = [&](int id) {
    return (log_transform(raw_targets.at(id)) - y_mean) / y_std;
  };

  // Parameters. The output head starts at zero so the untrained model is
  // exactly the train-mean predictor; validation selection can never settle
  // on anything worse than that baseline.
  Rng rng(seed);
  ParamSet<T> params;
  {
    Tensor<T> w1({dim, config.hidden});
    const double s1 = std::sqrt(2.0 / static_cast<double>(dim));
    for (std::size_t i = 0; i < w1.numel(); ++i) w1.at(i) = static_cast<T>(s1 * rng.gaussian());
    params.emplace("w1", std::move(w1));
    params.emplace("b1", Tensor<T>({config.hidden}));
    params.emplace("w2", Tensor<T>({config.hidden, 1}));
    params.emplace("b2", Tensor<T>({1}));
  }

  // Forward pass for a block of ids; returns predictions in standardized space.
  const auto forward_block = [&](Tape<T>& tp, const std::map<std::string, Var>& vars,
                                 const std::vector<int>& ids) {
    const std::size_t n = ids.size();
    Tensor<T> x({n, dim});
    for (std::size_t i = 0; i < n; ++i) {
      const auto f = features_of(ids[i]);
      for (std::size_t j = 0; j < dim; ++j) x.at(i, j) = f[j];
    }
    Var xv = tp.constant(std::move(x));
    Var h = relu(tp, affine(tp, xv, vars.at("w1"), vars.at("b1")));
    return affine(tp, h, vars.at("w2"), vars.at("b2")); // n x 1
  };

  const auto predict = [&](const ParamSet<T>& p, const std::vector<int>& ids) {
    Tape<T> tp;
    std::map<std::string, Var> vars;
    for (const auto& [name, t] : p) vars.emplace(name, tp.constant(t));
    const Var out = forward_block(tp, vars, ids);
    std::vector<double> pred(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) {
      pred[i] = static_cast<double>(tp.value(out).at(i, 0)) * y_std + y_mean;
    }
    return pred;
  };

  const auto val_rmse = [&](const ParamSet<T>& p) {
    const std::vector<double> pred = predict(p, splits.validation);
    std::vector<double> truth(splits.validation.size());
    for (std::size_t i = 0; i < truth.size(); ++i) {
      truth[i] = log_transform(raw_targets.at(splits.validation[i]));
    }
    return rmse(truth, pred);
  };

  AdamState<T> adam;
  adam.config.lr = static_cast<T>(config.lr);
  ParamSet<T> best = params;
  double best_rmse = val_rmse(params);
  std::size_t since_improvement = 0;
  std::vector<int> order = splits.train;

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    rng.shuffle(order);
    for (std::size_t start = 0; start < order.size(); start += config.batch_size) {
      const std::size_t end = std::min(order.size(), start + config.batch_size);
      std::vector<int> batch(order.begin() + start, order.begin() + end);

      Tape<T> tp;
      std::map<std::string, Var> vars;
      for (auto& [name, p] : params) {
        Tensor<T> leaf = p;
        leaf.set_requires_grad(true);
        vars.emplace(name, tp.leaf(std::move(leaf)));
      }
      const Var pred = forward_block(tp, vars, batch);
      Tensor<T> y({batch.size(), 1});
      for (std::size_t i = 0; i < batch.size(); ++i) y.at(i, 0) = static_cast<T>(target_of(batch[i]));
      const Var diff = sub(tp, pred, tp.constant(std::move(y)));
      const Var loss = mean(tp, mul(tp, diff, diff));

      const Gradients<T> grads = tp.backward(loss);
      ParamSet<T> grad_map;
      for (const auto& [name, var] : vars) grad_map.emplace(name, grads.at(var));
      adam_step(params, grad_map, adam);
    }
    const double current = val_rmse(params);
    if (current < best_rmse) {
      best_rmse = current;
      best = params;
      since_improvement = 0;
    } else {
      since_improvement += 1;
      if (since_improvement >= config.patience) break;
    }
  }

  RegressionReport report;
  report.indicator = indicator;
  const auto score = [&](const std::vector<int>& ids, SplitMetrics& metrics) {
    const std::vector<double> pred = predict(best, ids);
    std::vector<double> truth(ids.size());
    for (std::size_t i = 0; i < ids.size(); ++i) truth[i] = log_transform(raw_targets.at(ids[i]));
    const R2Result r2 = r_squared(truth, pred);
    metrics.r2 = r2.value;
    metrics.r2_undefined = r2.undefined;
    metrics.rmse = rmse(truth, pred);
    for (std::size_t i = 0; i < ids.size(); ++i) {
      report.predictions.push_back(Prediction{ids[i], truth[i], pred[i]});
    }
  };
  score(splits.train, report.train);
  score(splits.validation, report.validation);
  score(splits.test, report.test);
  std::sort(report.predictions.begin(), report.predictions.end(),
            [](const Prediction& a, const Prediction& b) { return a.region_id < b.region_id; });
  return report;
}

}  // namespace mscl
