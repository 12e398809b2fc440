#pragma once

#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "mscl/error.hpp"
#include "mscl/tensor.hpp"

namespace mscl {

// Region-indexed table of fixed-dimension embedding vectors.
struct EmbeddingTable {
  std::size_t dim = 0;
  std::map<int, std::vector<double>> rows;

  bool has(int region_id) const { return rows.count(region_id) != 0; }

  const std::vector<double>& at(int region_id) const {
    const auto it = rows.find(region_id);
    if (it == rows.end()) {
      throw ContractError("embedding table has no row for region " + std::to_string(region_id));
    }
    return it->second;
  }

  void insert(int region_id, std::vector<double> row) {
    if (row.size() != dim) {
      throw ShapeError("embedding row for region " + std::to_string(region_id) + " has length " +
                       std::to_string(row.size()) + ", table dim is " + std::to_string(dim));
    }
    rows[region_id] = std::move(row);
  }

  bool operator==(const EmbeddingTable&) const = default;
};

template <typename T>
std::vector<double> to_row(const Tensor<T>& v) {
  std::vector<double> out(v.numel());
  for (std::size_t i = 0; i < v.numel(); ++i) out[i] = static_cast<double>(v.at(i));
  return out;
}

template <typename T>
Tensor<T> row_tensor(const std::vector<double>& row) {
  std::vector<T> data(row.size());
  for (std::size_t i = 0; i < row.size(); ++i) data[i] = static_cast<T>(row[i]);
  return Tensor<T>({row.size()}, std::move(data));
}

// region_id,dim_0..dim_{d-1} rows, one per region in id order.
void write_embeddings_csv(const std::filesystem::path& path, const EmbeddingTable& table);
EmbeddingTable read_embeddings_csv(const std::filesystem::path& path);

}  // namespace mscl
