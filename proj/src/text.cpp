#include "mscl/text.hpp"

#include <algorithm>
#include <fstream>
#include <queue>

#include "mscl/error.hpp"

namespace mscl {

Vocab Vocab::build(const TokenCorpus& corpus, std::size_t min_count) {
  if (corpus.empty()) throw ContractError("Vocab::build: empty corpus");
  std::map<std::string, std::uint64_t> freq;
  for (const auto& sentence : corpus) {
    for (const auto& token : sentence) freq[token] += 1;
  }
  std::vector<std::pair<std::string, std::uint64_t>> kept;
  for (const auto& [token, count] : freq) {
    if (count >= min_count) kept.emplace_back(token, count);
  }
  if (kept.empty()) throw ContractError("Vocab::build: no token meets min_count");
  std::sort(kept.begin(), kept.end(), [](const auto& a, const auto& b) {
    if (a.second != b.second) return a.second > b.second;
    return a.first < b.first;
  });
  Vocab v;
  v.tokens_.reserve(kept.size());
  v.counts_.reserve(kept.size());
  for (std::size_t i = 0; i < kept.size(); ++i) {
    v.tokens_.push_back(kept[i].first);
    v.counts_.push_back(kept[i].second);
    v.index_.emplace(kept[i].first, i);
  }
  return v;
}

std::optional<std::size_t> Vocab::index_of(const std::string& token) const {
  const auto it = index_.find(token);
  if (it == index_.end()) return std::nullopt;
  return it->second;
}

void Vocab::write_tsv(const std::filesystem::path& path) const {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write '" + path.string() + "'", 0);
  for (std::size_t i = 0; i < tokens_.size(); ++i) {
    out << tokens_[i] << "\t" << counts_[i] << "\n";
  }
}

HuffmanTree HuffmanTree::build(const Vocab& vocab) {
  const std::size_t n = vocab.size();
  if (n < 2) throw ContractError("HuffmanTree::build: need at least 2 tokens");

  // Node ids: 0..n-1 leaves in vocab order, then parents in creation order.
  struct NodeRef {
    std::uint64_t weight;
    std::size_t id;
  };
  const auto cmp = [](const NodeRef& a, const NodeRef& b) {
    if (a.weight != b.weight) return a.weight > b.weight;
    return a.id > b.id;  // earliest-created node first on ties
  };
  std::priority_queue<NodeRef, std::vector<NodeRef>, decltype(cmp)> heap(cmp);
  for (std::size_t i = 0; i < n; ++i) heap.push({vocab.count(i), i});

  std::vector<std::size_t> parent(2 * n - 1, 0);
  std::vector<std::uint8_t> branch(2 * n - 1, 0);
  std::size_t next_id = n;
  while (heap.size() > 1) {
    const NodeRef a = heap.top();
    heap.pop();
    const NodeRef b = heap.top();
    heap.pop();
    parent[a.id] = next_id;
    branch[a.id] = 0;
    parent[b.id] = next_id;
    branch[b.id] = 1;
    heap.push({a.weight + b.weight, next_id});
    ++next_id;
  }
  const std::size_t root = next_id - 1;

  HuffmanTree tree;
  tree.paths_.resize(n);
  for (std::size_t leaf = 0; leaf < n; ++leaf) {
    std::vector<std::uint32_t> nodes;
    std::vector<std::uint8_t> bits;
    std::size_t cur = leaf;
    while (cur != root) {
      // inner node ids are offset by the leaf count
      nodes.push_back(static_cast<std::uint32_t>(parent[cur] - n));
      bits.push_back(branch[cur]);
      cur = parent[cur];
    }
    std::reverse(nodes.begin(), nodes.end());
    std::reverse(bits.begin(), bits.end());
    tree.paths_[leaf] = LeafPath{std::move(nodes), std::move(bits)};
  }
  return tree;
}

std::uint64_t HuffmanTree::weighted_path_length(const Vocab& vocab) const {
  std::uint64_t total = 0;
  for (std::size_t i = 0; i < paths_.size(); ++i) {
    total += vocab.count(i) * static_cast<std::uint64_t>(paths_[i].bits.size());
  }
  return total;
}

}  // namespace mscl
