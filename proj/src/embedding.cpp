#include "mscl/embedding.hpp"

#include <cstdio>
#include <fstream>
#include <sstream>

namespace mscl {

void write_embeddings_csv(const std::filesystem::path& path, const EmbeddingTable& table) {
  std::ofstream out(path, std::ios::trunc);
  if (!out) throw FormatError("cannot write '" + path.string() + "'", 0);
  out << "region_id";
  for (std::size_t j = 0; j < table.dim; ++j) out << ",dim_" << j;
  out << "\n";
  char buf[64];
  for (const auto& [id, row] : table.rows) {
    out << id;
    for (const double v : row) {
      std::snprintf(buf, sizeof(buf), ",%.17g", v);
      out << buf;
    }
    out << "\n";
  }
}

EmbeddingTable read_embeddings_csv(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw FormatError("cannot open '" + path.string() + "'", 0);
  std::string line;
  if (!std::getline(in, line) || line.rfind("region_id", 0) != 0) {
    throw FormatError("embeddings csv: bad header in '" + path.string() + "'", 0);
  }
  std::size_t dim = 0;
  for (const char c : line) dim += c == ',' ? 1 : 0;
  EmbeddingTable table;
  table.dim = dim;
  std::uint64_t lineno = 1;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string field;
    if (!std::getline(ss, field, ',')) throw FormatError("embeddings csv: bad row", lineno);
    const int id = std::stoi(field);
    std::vector<double> row;
    row.reserve(dim);
    while (std::getline(ss, field, ',')) row.push_back(std::stod(field));
    if (row.size() != dim) throw FormatError("embeddings csv: wrong column count", lineno);
    table.rows.emplace(id, std::move(row));
  }
  return table;
}

}  // namespace mscl
