#pragma once

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "mscl/adam.hpp"
#include "mscl/dataset.hpp"
#include "mscl/rng.hpp"
#include "mscl/similarity.hpp"
#include "mscl/tape.hpp"

namespace mscl {

struct EncoderConfig {
  std::vector<std::size_t> channels = {8, 16};  // conv plan after the input channels
  std::size_t kernel = 3;
  std::size_t stride = 1;
  std::size_t padding = 1;
  std::size_t pool = 2;          // max-pool window and stride between conv blocks
  std::size_t embed_dim = 32;    // 128 matches the full-scale setup
  double margin = 0.2;
  std::size_t batch_size = 32;
  double lr = 5e-4;
  std::size_t epochs = 4;
};

// Small conv encoder: per block conv -> bias -> relu -> max-pool, then global
// average pool, linear projection and L2 normalization. Both modalities use
// this architecture with separate parameters.
template <typename T>
struct Encoder {
  EncoderConfig config;
  std::size_t in_channels = 3;
  ParamSet<T> params;

  static Encoder init(const EncoderConfig& config, std::size_t in_channels, std::uint64_t seed);
};

template <typename T>
struct EmbedResult {
  Tensor<T> embedding;
  bool degenerate = false;
};

// Forward pass on a tape; param_vars must hold one var per encoder parameter.
template <typename T>
Var encode_image(Tape<T>& tp, const std::map<std::string, Var>& param_vars,
                 const EncoderConfig& config, Var image);

// Convenience forward pass outside any training loop.
template <typename T>
EmbedResult<T> encode_image(const Encoder<T>& encoder, const Tensor<float>& image);

// max(0, margin + sim(anchor, negative) - sim(anchor, positive)), cosine sim.
template <typename T>
Var triplet_loss(Tape<T>& tp, Var anchor, Var positive, Var negative, T margin);

struct TrainHistory {
  std::vector<double> epoch_mean_loss;
};

// Mini-batch Adam over triplet batches. For SV triplets one street-view image
// is drawn per region slot per (epoch, triplet) instance from
// Rng(mix_seed(mix_seed(seed, epoch), triplet_index)); RV uses the region's
// single remote image. Aborts with diagnostics if the loss goes non-finite.
template <typename T>
TrainHistory train_visual_encoder(Encoder<T>& encoder, const DatasetBundle& bundle,
                                  const std::vector<Triplet>& triplets, Modality modality,
                                  std::uint64_t seed);

// Region embedding: SV averages encode_image over all of the region's street
// views and re-normalizes; RV encodes the remote image directly.
template <typename T>
EmbedResult<T> region_visual_embedding(const Encoder<T>& encoder, const RegionRecord& region,
                                       Modality modality);

// epoch,mean_loss rows
void write_history_csv(const std::filesystem::path& path, const TrainHistory& history);

// ---------------------------------------------------------------------------
// Template implementations
// ---------------------------------------------------------------------------

template <typename T>
Encoder<T> Encoder<T>::init(const EncoderConfig& config, std::size_t in_channels,
                            std::uint64_t seed) {
  if (config.embed_dim < 2) throw ContractError("EncoderConfig: embed_dim must be >= 2");
  if (config.margin < 0.0) throw ContractError("EncoderConfig: margin must be >= 0");
  if (config.channels.empty()) throw ContractError("EncoderConfig: empty conv plan");

  Encoder<T> enc{config, in_channels, {}};
  Rng rng(seed);
  std::size_t cin = in_channels;
  for (std::size_t layer = 0; layer < config.channels.size(); ++layer) {
    const std::size_t cout = config.channels[layer];
    Tensor<T> w({cout, cin, config.kernel, config.kernel});
    const double std_dev = std::sqrt(2.0 / static_cast<double>(cin * config.kernel * config.kernel));
    for (std::size_t i = 0; i < w.numel(); ++i) w.at(i) = static_cast<T>(std_dev * rng.gaussian());
    enc.params.emplace("conv" + std::to_string(layer) + "/weight", std::move(w));
    enc.params.emplace("conv" + std::to_string(layer) + "/bias", Tensor<T>({cout}));
    cin = cout;
  }
  Tensor<T> proj({cin, config.embed_dim});
  const double std_dev = std::sqrt(1.0 / static_cast<double>(cin));
  for (std::size_t i = 0; i < proj.numel(); ++i) proj.at(i) = static_cast<T>(std_dev * rng.gaussian());
  enc.params.emplace("proj/weight", std::move(proj));
  enc.params.emplace("proj/bias", Tensor<T>({config.embed_dim}));
  return enc;
}

template <typename T>
Var encode_image(Tape<T>& tp, const std::map<std::string, Var>& param_vars,
                 const EncoderConfig& config, Var image) {
  Var x = image;
  for (std::size_t layer = 0; layer < config.channels.size(); ++layer) {
    const std::string base = "conv" + std::to_string(layer);
    x = conv2d(tp, x, param_vars.at(base + "/weight"), config.stride, config.padding);
    x = bias_channels(tp, x, param_vars.at(base + "/bias"));
    x = relu(tp, x);
    x = max_pool2d(tp, x, config.pool, config.pool);
  }
  Var pooled = global_avg_pool(tp, x);
  const std::size_t cin = tp.value(pooled).dim(0);
  Var row = reshape(tp, pooled, {1, cin});
  Var projected = affine(tp, row, param_vars.at("proj/weight"), param_vars.at("proj/bias"));
  Var flat = reshape(tp, projected, {config.embed_dim});
  return l2_normalize(tp, flat);
}

template <typename T>
EmbedResult<T> encode_image(const Encoder<T>& encoder, const Tensor<float>& image) {
  if (image.ndim() != 3 || image.dim(0) != encoder.in_channels) {
    throw ContractError("encode_image: image shape " + shape_string(image.shape()) +
                        " does not match encoder input channels " +
                        std::to_string(encoder.in_channels));
  }
  Tape<T> tp;
  std::map<std::string, Var> vars;
  for (const auto& [name, p] : encoder.params) vars.emplace(name, tp.constant(p));
  const Var out = encode_image(tp, vars, encoder.config, tp.constant(image.template cast<T>()));
  return EmbedResult<T>{tp.value(out), tp.degenerate(out)};
}

template <typename T>
Var triplet_loss(Tape<T>& tp, Var anchor, Var positive, Var negative, T margin) {
  Var sim_pos = cosine_similarity(tp, anchor, positive);
  Var sim_neg = cosine_similarity(tp, anchor, negative);
  return relu(tp, add_const(tp, sub(tp, sim_neg, sim_pos), margin));
}

namespace detail {

template <typename T>
std::string param_norms(const ParamSet<T>& params) {
  std::ostringstream os;
  for (const auto& [name, p] : params) {
    double acc = 0.0;
    for (std::size_t i = 0; i < p.numel(); ++i) acc += static_cast<double>(p.at(i)) * p.at(i);
    os << " " << name << "=" << std::sqrt(acc);
  }
  return os.str();
}

}  // namespace detail

template <typename T>
TrainHistory train_visual_encoder(Encoder<T>& encoder, const DatasetBundle& bundle,
                                  const std::vector<Triplet>& triplets, Modality modality,
                                  std::uint64_t seed) {
  if (triplets.empty()) throw ContractError("train_visual_encoder: no triplets");
  std::map<int, const RegionRecord*> by_id;
  for (const auto& region : bundle.regions) by_id.emplace(region.id, &region);
  for (const auto& t : triplets) {
    if (t.modality != modality) {
      throw ContractError("train_visual_encoder: triplet modality does not match encoder");
    }
    for (const int id : {t.anchor, t.positive, t.negative}) {
      if (!by_id.count(id)) {
        throw ContractError("train_visual_encoder: triplet names unknown region " +
                            std::to_string(id));
      }
    }
  }

  AdamState<T> adam;
  adam.config.lr = static_cast<T>(encoder.config.lr);
  TrainHistory history;
  Rng shuffle_rng(mix_seed(seed, 0x5u));

  std::vector<std::size_t> order(triplets.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

  for (std::size_t epoch = 0; epoch < encoder.config.epochs; ++epoch) {
    shuffle_rng.shuffle(order);
    const std::uint64_t epoch_stream = mix_seed(seed, epoch);
    double loss_sum = 0.0;
    std::size_t loss_count = 0;

    for (std::size_t start = 0; start < order.size(); start += encoder.config.batch_size) {
      const std::size_t end = std::min(order.size(), start + encoder.config.batch_size);
      Tape<T> tp;
      std::map<std::string, Var> vars;
      for (auto& [name, p] : encoder.params) {
        Tensor<T> leaf = p;
        leaf.set_requires_grad(true);
        vars.emplace(name, tp.leaf(std::move(leaf)));
      }

      std::vector<Var> losses;
      losses.reserve(end - start);
      for (std::size_t b = start; b < end; ++b) {
        const Triplet& trip = triplets[order[b]];
        Rng draw(mix_seed(epoch_stream, order[b]));
        const auto image_of = [&](int region_id) -> const Tensor<float>& {
          const RegionRecord& region = *by_id.at(region_id);
          if (modality == Modality::kRV) return region.rv_image;
          return region.sv_images[draw.uniform_index(region.sv_images.size())];
        };
        Var anchor = encode_image(tp, vars, encoder.config, tp.constant(image_of(trip.anchor).template cast<T>()));
        Var positive = encode_image(tp, vars, encoder.config, tp.constant(image_of(trip.positive).template cast<T>()));
        Var negative = encode_image(tp, vars, encoder.config, tp.constant(image_of(trip.negative).template cast<T>()));
        losses.push_back(triplet_loss(tp, anchor, positive, negative,
                                      static_cast<T>(encoder.config.margin)));
      }
      const Var batch_loss = mean(tp, pack(tp, losses));
      const double loss_value = static_cast<double>(tp.value(batch_loss).at(0));
      if (!std::isfinite(loss_value)) {
        std::ostringstream os;
        os << "train_visual_encoder: non-finite loss in epoch " << epoch << ", batch at " << start
           << "; triplets";
        for (std::size_t b = start; b < end; ++b) {
          const Triplet& trip = triplets[order[b]];
          os << " (" << trip.anchor << "," << trip.positive << "," << trip.negative << ")";
        }
        os << "; param norms:" << detail::param_norms(encoder.params);
        throw TrainingError(os.str());
      }
      loss_sum += loss_value * static_cast<double>(end - start);
      loss_count += end - start;

      const Gradients<T> grads = tp.backward(batch_loss);
      ParamSet<T> grad_map;
      for (const auto& [name, var] : vars) grad_map.emplace(name, grads.at(var));
      adam_step(encoder.params, grad_map, adam);
    }
    history.epoch_mean_loss.push_back(loss_sum / static_cast<double>(loss_count));
  }
  return history;
}

template <typename T>
EmbedResult<T> region_visual_embedding(const Encoder<T>& encoder, const RegionRecord& region,
                                       Modality modality) {
  if (modality == Modality::kRV) return encode_image(encoder, region.rv_image);

  Tensor<T> acc({encoder.config.embed_dim});
  bool any_ok = false;
  for (const auto& image : region.sv_images) {
    const EmbedResult<T> one = encode_image(encoder, image);
    if (one.degenerate) continue;
    for (std::size_t j = 0; j < acc.numel(); ++j) acc.at(j) += one.embedding.at(j);
    any_ok = true;
  }
  if (!any_ok) return EmbedResult<T>{std::move(acc), true};
  const T inv = T(1) / static_cast<T>(region.sv_images.size());
  T norm_sq = 0;
  for (std::size_t j = 0; j < acc.numel(); ++j) {
    acc.at(j) *= inv;
    norm_sq += acc.at(j) * acc.at(j);
  }
  const T norm = std::sqrt(norm_sq);
  if (norm == T(0)) return EmbedResult<T>{std::move(acc), true};
  for (std::size_t j = 0; j < acc.numel(); ++j) acc.at(j) /= norm;
  return EmbedResult<T>{std::move(acc), false};
}

}  // namespace mscl
