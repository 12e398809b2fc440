#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include "mscl/adam.hpp"
#include "mscl/dataset.hpp"
#include "mscl/embedding.hpp"
#include "mscl/rng.hpp"
#include "mscl/tape.hpp"
#include "mscl/visual.hpp"

namespace mscl {

// Learnable attention parameters: alpha = c^T relu(M e + b), plus an optional
// linear adapter that maps text embeddings into the image dimension when the
// two differ.
template <typename T>
struct FusionParams {
  Tensor<T> c;                       // [hidden]
  Tensor<T> m;                       // [hidden x d]
  Tensor<T> b;                       // [hidden]
  std::optional<Tensor<T>> adapter;  // [d x d_text]

  static FusionParams init(std::size_t d, std::size_t d_text, std::size_t hidden,
                           std::uint64_t seed) {
    if (hidden == 0) hidden = d;
    FusionParams p{Tensor<T>({hidden}), Tensor<T>({hidden, d}), Tensor<T>({hidden}), std::nullopt};
    Rng rng(seed);
    const double cs = 1.0 / std::sqrt(static_cast<double>(hidden));
    for (std::size_t i = 0; i < p.c.numel(); ++i) p.c.at(i) = static_cast<T>(cs * rng.gaussian());
    const double ms = 1.0 / std::sqrt(static_cast<double>(d));
    for (std::size_t i = 0; i < p.m.numel(); ++i) p.m.at(i) = static_cast<T>(ms * rng.gaussian());
    if (d_text != d) {
      Tensor<T> a({d, d_text});
      const double as = 1.0 / std::sqrt(static_cast<double>(d_text));
      for (std::size_t i = 0; i < a.numel(); ++i) a.at(i) = static_cast<T>(as * rng.gaussian());
      p.adapter = std::move(a);
    }
    return p;
  }

  ParamSet<T> as_param_set() const {
    ParamSet<T> out{{"fusion/c", c}, {"fusion/m", m}, {"fusion/b", b}};
    if (adapter) out.emplace("fusion/adapter", *adapter);
    return out;
  }
};

struct AlignmentConfig {
  std::size_t batch_size = 32;   // InfoNCE mini-batch n
  double temperature = 1.0;
  double lr = 5e-4;
  std::size_t epochs = 40;
  bool freeze_encoders = true;   // fine-tune visual encoders only when false
  bool symmetric = false;        // add the text->image InfoNCE term
  std::size_t hidden_dim = 0;    // 0 means same as embedding dim
};

// alpha = c^T relu(M e + b)
template <typename T>
Var attention_logit(Tape<T>& tp, Var c, Var m, Var b, Var e) {
  return dot(tp, c, relu(tp, add(tp, matvec(tp, m, e), b)));
}

template <typename T>
struct FusedVar {
  Var e_image;
  Var beta_sv;
  Var beta_rv;
};

// Two-way softmax over the attention logits, then the beta-weighted sum.
template <typename T>
FusedVar<T> attentive_fusion(Tape<T>& tp, Var c, Var m, Var b, Var e_sv, Var e_rv) {
  Var alpha_sv = attention_logit(tp, c, m, b, e_sv);
  Var alpha_rv = attention_logit(tp, c, m, b, e_rv);
  Var betas = softmax_row(tp, pack(tp, {alpha_sv, alpha_rv}));
  Var beta_sv = slice_scalar(tp, betas, 0);
  Var beta_rv = slice_scalar(tp, betas, 1);
  Var fused = add(tp, mul_scalar(tp, e_sv, beta_sv), mul_scalar(tp, e_rv, beta_rv));
  return FusedVar<T>{fused, beta_sv, beta_rv};
}

// Plain evaluation of Eq. 8-10 for one region.
template <typename T>
struct FusedRow {
  std::vector<double> e_image;
  double beta_sv = 0.0;
  double beta_rv = 0.0;
};

template <typename T>
FusedRow<T> fuse_row(const FusionParams<T>& params, const std::vector<double>& e_sv,
                     const std::vector<double>& e_rv) {
  Tape<T> tp;
  const Var c = tp.constant(params.c);
  const Var m = tp.constant(params.m);
  const Var b = tp.constant(params.b);
  const FusedVar<T> fused = attentive_fusion(tp, c, m, b, tp.constant(row_tensor<T>(e_sv)),
                                             tp.constant(row_tensor<T>(e_rv)));
  return FusedRow<T>{to_row(tp.value(fused.e_image)),
                     static_cast<double>(tp.value(fused.beta_sv).at(0)),
                     static_cast<double>(tp.value(fused.beta_rv).at(0))};
}

// Eq. 8-10 applied to every region of the two tables.
template <typename T>
EmbeddingTable apply_fusion(const FusionParams<T>& params, const EmbeddingTable& sv,
                            const EmbeddingTable& rv) {
  EmbeddingTable out;
  out.dim = sv.dim;
  for (const auto& [id, row] : sv.rows) out.insert(id, fuse_row(params, row, rv.at(id)).e_image);
  return out;
}

// Mean over rows of -log( exp(sim_ii/tau) / sum_j exp(sim_ij/tau) ) with
// cosine similarity; degenerate (zero) rows contribute sim 0 rather than NaN.
template <typename T>
Var infonce_loss(Tape<T>& tp, const std::vector<Var>& images, const std::vector<Var>& texts,
                 T tau) {
  if (images.size() != texts.size()) {
    throw ContractError("infonce_loss: row counts differ");
  }
  const std::size_t n = images.size();
  if (n < 2) throw ContractError("infonce_loss: mini-batch must have at least 2 rows");
  if (tau <= T(0)) throw ContractError("infonce_loss: temperature must be positive");

  std::vector<Var> per_row;
  per_row.reserve(n);
  const T inv_tau = T(1) / tau;
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<Var> sims;
    sims.reserve(n);
    for (std::size_t j = 0; j < n; ++j) {
      sims.push_back(scale(tp, cosine_similarity(tp, images[i], texts[j]), inv_tau));
    }
    const Var lse = logsumexp(tp, pack(tp, sims));
    per_row.push_back(sub(tp, lse, sims[i]));
  }
  return mean(tp, pack(tp, per_row));
}

template <typename T>
struct FusionResult {
  FusionParams<T> initial;          // pre-alignment parameters (Fusion-svrv variant)
  FusionParams<T> params;           // post-alignment parameters
  EmbeddingTable epsilon;           // final region embeddings e^Image
  std::vector<double> loss_history; // per-epoch mean InfoNCE
};

// InfoNCE alignment over mini-batches of regions. With freeze_encoders the
// visual encoders are untouched and the sv/rv tables feed the tape as
// constants; otherwise both encoders' parameters join the optimizer and the
// region embeddings are recomputed from images on the tape.
template <typename T>
FusionResult<T> train_fusion(const DatasetBundle& bundle, const EmbeddingTable& sv,
                             const EmbeddingTable& rv, const EmbeddingTable& poi,
                             const AlignmentConfig& config, std::uint64_t seed,
                             Encoder<T>* sv_encoder = nullptr, Encoder<T>* rv_encoder = nullptr);

// Ablation variants over trained artifacts.
enum class VariantMode { kPoiOnly, kSvOnly, kRvOnly, kAddSvRv, kFusionSvRv, kConcat, kFull };

inline const char* variant_name(VariantMode mode) {
  switch (mode) {
    case VariantMode::kPoiOnly: return "poi_only";
    case VariantMode::kSvOnly: return "sv_only";
    case VariantMode::kRvOnly: return "rv_only";
    case VariantMode::kAddSvRv: return "add_svrv";
    case VariantMode::kFusionSvRv: return "fusion_svrv";
    case VariantMode::kConcat: return "concat";
    case VariantMode::kFull: return "full";
  }
  return "?";
}

inline const std::vector<VariantMode>& all_variants() {
  static const std::vector<VariantMode> v = {
      VariantMode::kPoiOnly, VariantMode::kSvOnly,    VariantMode::kRvOnly,
      VariantMode::kAddSvRv, VariantMode::kFusionSvRv, VariantMode::kConcat,
      VariantMode::kFull};
  return v;
}

struct VariantSet {
  EmbeddingTable sv, rv, poi;
  EmbeddingTable fusion_initial;  // Eq. 8-10 with the pre-alignment parameters
  EmbeddingTable full;            // post-alignment epsilon
};

// add_svrv = e_sv + e_rv; concat = [e_sv | e_rv | e_poi]; fusion_svrv and
// full come precomputed in the set.
EmbeddingTable variant_embeddings(VariantMode mode, const VariantSet& set);

// ---------------------------------------------------------------------------
// Template implementation
// ---------------------------------------------------------------------------

template <typename T>
FusionResult<T> train_fusion(const DatasetBundle& bundle, const EmbeddingTable& sv,
                             const EmbeddingTable& rv, const EmbeddingTable& poi,
                             const AlignmentConfig& config, std::uint64_t seed,
                             Encoder<T>* sv_encoder, Encoder<T>* rv_encoder) {
  if (config.batch_size < 2) throw ContractError("train_fusion: batch_size must be >= 2");
  if (config.temperature <= 0.0) throw ContractError("train_fusion: temperature must be positive");
  for (const auto& region : bundle.regions) {
    for (const auto* table : {&sv, &rv, &poi}) {
      if (!table->has(region.id)) {
        throw ContractError("train_fusion: region " + std::to_string(region.id) +
                            " missing from an embedding table");
      }
    }
  }
  const bool tune_encoders = !config.freeze_encoders;
  if (tune_encoders && (sv_encoder == nullptr || rv_encoder == nullptr)) {
    throw ContractError("train_fusion: fine-tuning requires both encoders");
  }

  const std::size_t d = sv.dim;
  FusionResult<T> result;
  result.initial = FusionParams<T>::init(d, poi.dim, config.hidden_dim, mix_seed(seed, 0x11u));
  result.params = result.initial;

  ParamSet<T> trainable = result.params.as_param_set();
  if (tune_encoders) {
    for (const auto& [name, p] : sv_encoder->params) trainable.emplace("sv_encoder/" + name, p);
    for (const auto& [name, p] : rv_encoder->params) trainable.emplace("rv_encoder/" + name, p);
  }

  AdamState<T> adam;
  adam.config.lr = static_cast<T>(config.lr);
  Rng shuffle_rng(mix_seed(seed, 0x12u));
  const T tau = static_cast<T>(config.temperature);

  std::map<int, const RegionRecord*> by_id;
  for (const auto& region : bundle.regions) by_id.emplace(region.id, &region);

  std::vector<int> ids;
  ids.reserve(bundle.regions.size());
  for (const auto& region : bundle.regions) ids.push_back(region.id);

  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    shuffle_rng.shuffle(ids);
    double loss_sum = 0.0;
    std::size_t batch_count = 0;
    for (std::size_t start = 0; start + 2 <= ids.size(); start += config.batch_size) {
      const std::size_t end = std::min(ids.size(), start + config.batch_size);
      if (end - start < 2) break;

      Tape<T> tp;
      std::map<std::string, Var> vars;
      for (auto& [name, p] : trainable) {
        Tensor<T> leaf = p;
        leaf.set_requires_grad(true);
        vars.emplace(name, tp.leaf(std::move(leaf)));
      }
      const Var c = vars.at("fusion/c");
      const Var m = vars.at("fusion/m");
      const Var b = vars.at("fusion/b");

      const auto visual_row = [&](int id, Modality modality) -> Var {
        if (!tune_encoders) {
          const EmbeddingTable& table = modality == Modality::kSV ? sv : rv;
          return tp.constant(row_tensor<T>(table.at(id)));
        }
        const std::string prefix = modality == Modality::kSV ? "sv_encoder/" : "rv_encoder/";
        const Encoder<T>& enc = modality == Modality::kSV ? *sv_encoder : *rv_encoder;
        std::map<std::string, Var> enc_vars;
        for (const auto& [name, _] : enc.params) enc_vars.emplace(name, vars.at(prefix + name));
        const RegionRecord& region = *by_id.at(id);
        if (modality == Modality::kRV) {
          return encode_image(tp, enc_vars, enc.config, tp.constant(region.rv_image.template cast<T>()));
        }
        std::vector<Var> embeds;
        embeds.reserve(region.sv_images.size());
        for (const auto& image : region.sv_images) {
          embeds.push_back(encode_image(tp, enc_vars, enc.config, tp.constant(image.template cast<T>())));
        }
        Var acc = embeds[0];
        for (std::size_t i = 1; i < embeds.size(); ++i) acc = add(tp, acc, embeds[i]);
        return l2_normalize(tp, scale(tp, acc, T(1) / static_cast<T>(embeds.size())));
      };

      std::vector<Var> images, texts;
      images.reserve(end - start);
      texts.reserve(end - start);
      for (std::size_t i = start; i < end; ++i) {
        const int id = ids[i];
        const FusedVar<T> fused =
            attentive_fusion(tp, c, m, b, visual_row(id, Modality::kSV), visual_row(id, Modality::kRV));
        images.push_back(fused.e_image);
        Var text = tp.constant(row_tensor<T>(poi.at(id)));
        if (result.params.adapter) text = matvec(tp, vars.at("fusion/adapter"), text);
        texts.push_back(text);
      }

      Var loss = infonce_loss(tp, images, texts, tau);
      if (config.symmetric) {
        loss = scale(tp, add(tp, loss, infonce_loss(tp, texts, images, tau)), T(0.5));
      }
      const double loss_value = static_cast<double>(tp.value(loss).at(0));
      if (!std::isfinite(loss_value)) {
        throw TrainingError("train_fusion: non-finite loss in epoch " + std::to_string(epoch));
      }
      loss_sum += loss_value;
      batch_count += 1;

      const Gradients<T> grads = tp.backward(loss);
      ParamSet<T> grad_map;
      for (const auto& [name, var] : vars) grad_map.emplace(name, grads.at(var));
      adam_step(trainable, grad_map, adam);
    }
    result.loss_history.push_back(loss_sum / static_cast<double>(batch_count));
  }

  result.params.c = trainable.at("fusion/c");
  result.params.m = trainable.at("fusion/m");
  result.params.b = trainable.at("fusion/b");
  if (result.params.adapter) result.params.adapter = trainable.at("fusion/adapter");
  if (tune_encoders) {
    for (auto& [name, p] : sv_encoder->params) p = trainable.at("sv_encoder/" + name);
    for (auto& [name, p] : rv_encoder->params) p = trainable.at("rv_encoder/" + name);
  }

  // Final epsilon: post-alignment fusion of the (possibly re-derived) visual
  // embeddings.
  const EmbeddingTable* sv_final = &sv;
  const EmbeddingTable* rv_final = &rv;
  EmbeddingTable sv_recomputed, rv_recomputed;
  if (tune_encoders) {
    sv_recomputed.dim = d;
    rv_recomputed.dim = d;
    for (const auto& region : bundle.regions) {
      sv_recomputed.insert(region.id,
                           to_row(region_visual_embedding(*sv_encoder, region, Modality::kSV).embedding));
      rv_recomputed.insert(region.id,
                           to_row(region_visual_embedding(*rv_encoder, region, Modality::kRV).embedding));
    }
    sv_final = &sv_recomputed;
    rv_final = &rv_recomputed;
  }
  result.epsilon = apply_fusion(result.params, *sv_final, *rv_final);
  return result;
}

}  // namespace mscl
