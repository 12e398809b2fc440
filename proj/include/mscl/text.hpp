#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mscl/rng.hpp"
#include "mscl/tape.hpp"
#include "mscl/tensor.hpp"

namespace mscl {

using TokenCorpus = std::vector<std::vector<std::string>>;  // sentences of tokens

// Token table with dense indices ordered by (frequency desc, token lex asc).
class Vocab {
 public:
  static Vocab build(const TokenCorpus& corpus, std::size_t min_count);

  std::size_t size() const { return tokens_.size(); }
  const std::string& token(std::size_t index) const { return tokens_[index]; }
  std::uint64_t count(std::size_t index) const { return counts_[index]; }
  std::optional<std::size_t> index_of(const std::string& token) const;

  void write_tsv(const std::filesystem::path& path) const;  // token\tcount lines
  static Vocab read_tsv(const std::filesystem::path& path);

 private:
  std::vector<std::string> tokens_;
  std::vector<std::uint64_t> counts_;
  std::map<std::string, std::size_t> index_;
};

// Full binary Huffman tree over the vocabulary. Codes are prefix-free and
// satisfy Kraft equality exactly; merging is greedy two-smallest with
// earliest-created-node tie breaking (leaves in vocab order, then parents in
// creation order; the first node popped becomes the 0 branch).
class HuffmanTree {
 public:
  static HuffmanTree build(const Vocab& vocab);

  struct LeafPath {
    std::vector<std::uint32_t> inner_nodes;  // root -> leaf
    std::vector<std::uint8_t> bits;          // branch taken below each inner node
  };

  std::size_t leaf_count() const { return paths_.size(); }
  std::size_t inner_count() const { return paths_.empty() ? 0 : paths_.size() - 1; }
  const LeafPath& path(std::size_t leaf) const { return paths_[leaf]; }
  std::size_t code_length(std::size_t leaf) const { return paths_[leaf].bits.size(); }
  // Total weighted code length, sum of count * code_length.
  std::uint64_t weighted_path_length(const Vocab& vocab) const;

 private:
  std::vector<LeafPath> paths_;
};

struct SkipGramConfig {
  std::size_t dim = 32;
  std::size_t window = 4;
  std::size_t min_count = 1;
  std::size_t epochs = 3;
  double lr = 0.025;
  std::uint64_t seed = 0;
};

// Hierarchical-softmax loss of predicting one context token from a center
// word vector: sum over the context's Huffman path of
// softplus(-sign * dot(center, inner_node)), sign = +1 for the 0 branch.
template <typename T>
Var hs_pair_loss(Tape<T>& tp, Var center, const std::vector<Var>& path_nodes,
                 const std::vector<std::uint8_t>& bits) {
  if (path_nodes.size() != bits.size()) {
    throw ContractError("hs_pair_loss: path and bits lengths differ");
  }
  std::vector<Var> terms;
  terms.reserve(path_nodes.size());
  for (std::size_t i = 0; i < path_nodes.size(); ++i) {
    const T sign = bits[i] == 0 ? T(1) : T(-1);
    Var z = dot(tp, center, path_nodes[i]);
    terms.push_back(softplus(tp, scale(tp, z, -sign)));
  }
  return terms.size() == 1 ? terms[0] : sum(tp, pack(tp, terms));
}

template <typename T>
struct SkipGramModel {
  Vocab vocab;
  HuffmanTree tree;
  SkipGramConfig config;
  Tensor<T> word_vectors;   // |V| x dim
  Tensor<T> inner_vectors;  // (|V|-1) x dim
  std::uint64_t skipped_tokens = 0;  // out-of-vocab tokens seen while training
};

template <typename T>
struct PoiEmbedding {
  Tensor<T> value;  // dim vector
  bool degenerate = false;
  std::size_t used = 0;
  std::size_t skipped = 0;
};

// Sequential SGD over (center, context) pairs within the window, ascending
// the hierarchical-softmax log likelihood. Deterministic given the seed.
template <typename T>
SkipGramModel<T> skipgram_train(const TokenCorpus& corpus, const Vocab& vocab,
                                const HuffmanTree& tree, const SkipGramConfig& config);

// Eq.-style category averaging: mean of word vectors over in-vocab tokens.
// A region whose tokens are all out-of-vocab yields a flagged zero vector.
template <typename T>
PoiEmbedding<T> region_poi_embedding(const SkipGramModel<T>& model,
                                     const std::vector<std::string>& categories);

// ---------------------------------------------------------------------------
// Template implementations
// ---------------------------------------------------------------------------

namespace detail {

template <typename T>
Tensor<T> row_of(const Tensor<T>& table, std::size_t row) {
  const std::size_t dim = table.dim(1);
  Tensor<T> out({dim});
  for (std::size_t j = 0; j < dim; ++j) out.at(j) = table.at(row, j);
  return out;
}

template <typename T>
void add_scaled_row(Tensor<T>& table, std::size_t row, const Tensor<T>& delta, T factor) {
  const std::size_t dim = table.dim(1);
  for (std::size_t j = 0; j < dim; ++j) table.at(row, j) += factor * delta.at(j);
}

}  // namespace detail

template <typename T>
SkipGramModel<T> skipgram_train(const TokenCorpus& corpus, const Vocab& vocab,
                                const HuffmanTree& tree, const SkipGramConfig& config) {
  if (vocab.size() < 2) throw ContractError("skipgram_train: vocabulary too small");
  if (config.window == 0) throw ContractError("skipgram_train: window must be >= 1");

  SkipGramModel<T> model{vocab, tree, config, Tensor<T>({vocab.size(), config.dim}),
                         Tensor<T>({vocab.size() - 1, config.dim}), 0};
  Rng rng(config.seed);
  for (std::size_t i = 0; i < model.word_vectors.numel(); ++i) {
    model.word_vectors.at(i) =
        static_cast<T>(rng.uniform(-0.5, 0.5) / static_cast<double>(config.dim));
  }
  // Inner node vectors start at zero, the classic word2vec initialization.

  // Sentences indexed once up front; OOV tokens are skipped and counted.
  std::vector<std::vector<std::size_t>> indexed;
  indexed.reserve(corpus.size());
  for (const auto& sentence : corpus) {
    std::vector<std::size_t> ids;
    ids.reserve(sentence.size());
    for (const auto& token : sentence) {
      if (const auto idx = vocab.index_of(token)) {
        ids.push_back(*idx);
      } else {
        model.skipped_tokens += 1;
      }
    }
    indexed.push_back(std::move(ids));
  }

  const T lr = static_cast<T>(config.lr);
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    for (const auto& sentence : indexed) {
      for (std::size_t center_pos = 0; center_pos < sentence.size(); ++center_pos) {
        const std::size_t center = sentence[center_pos];
        const std::size_t lo = center_pos >= config.window ? center_pos - config.window : 0;
        const std::size_t hi = std::min(sentence.size(), center_pos + config.window + 1);
        for (std::size_t ctx_pos = lo; ctx_pos < hi; ++ctx_pos) {
          if (ctx_pos == center_pos) continue;
          const std::size_t context = sentence[ctx_pos];
          const auto& path = tree.path(context);

          Tape<T> tp;
          Var center_var = tp.leaf(detail::row_of(model.word_vectors, center).set_requires_grad(true));
          std::vector<Var> node_vars;
          node_vars.reserve(path.inner_nodes.size());
          for (const std::uint32_t node : path.inner_nodes) {
            node_vars.push_back(
                tp.leaf(detail::row_of(model.inner_vectors, node).set_requires_grad(true)));
          }
          const Var loss = hs_pair_loss(tp, center_var, node_vars, path.bits);
          const Gradients<T> grads = tp.backward(loss);

          detail::add_scaled_row(model.word_vectors, center, grads.at(center_var), -lr);
          for (std::size_t i = 0; i < node_vars.size(); ++i) {
            detail::add_scaled_row(model.inner_vectors, path.inner_nodes[i], grads.at(node_vars[i]),
                                   -lr);
          }
        }
      }
    }
  }
  return model;
}

template <typename T>
PoiEmbedding<T> region_poi_embedding(const SkipGramModel<T>& model,
                                     const std::vector<std::string>& categories) {
  PoiEmbedding<T> out;
  out.value = Tensor<T>({model.config.dim});
  for (const auto& token : categories) {
    if (const auto idx = model.vocab.index_of(token)) {
      for (std::size_t j = 0; j < model.config.dim; ++j) {
        out.value.at(j) += model.word_vectors.at(*idx, j);
      }
      out.used += 1;
    } else {
      out.skipped += 1;
    }
  }
  if (out.used == 0) {
    out.degenerate = true;
    return out;
  }
  const T inv = T(1) / static_cast<T>(out.used);
  for (std::size_t j = 0; j < model.config.dim; ++j) out.value.at(j) *= inv;
  return out;
}

}  // namespace mscl
