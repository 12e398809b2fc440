#include "mscl/fusion.hpp"

namespace mscl {

EmbeddingTable variant_embeddings(VariantMode mode, const VariantSet& set) {
  switch (mode) {
    case VariantMode::kPoiOnly:
      return set.poi;
    case VariantMode::kSvOnly:
      return set.sv;
    case VariantMode::kRvOnly:
      return set.rv;
    case VariantMode::kFusionSvRv:
      return set.fusion_initial;
    case VariantMode::kFull:
      return set.full;
    case VariantMode::kAddSvRv: {
      EmbeddingTable out;
      out.dim = set.sv.dim;
      for (const auto& [id, row] : set.sv.rows) {
        const auto& rv_row = set.rv.at(id);
        std::vector<double> sum(row.size());
        for (std::size_t j = 0; j < row.size(); ++j) sum[j] = row[j] + rv_row[j];
        out.insert(id, std::move(sum));
      }
      return out;
    }
    case VariantMode::kConcat: {
      EmbeddingTable out;
      out.dim = set.sv.dim + set.rv.dim + set.poi.dim;
      for (const auto& [id, row] : set.sv.rows) {
        std::vector<double> cat;
        cat.reserve(out.dim);
        cat.insert(cat.end(), row.begin(), row.end());
        const auto& rv_row = set.rv.at(id);
        cat.insert(cat.end(), rv_row.begin(), rv_row.end());
        const auto& poi_row = set.poi.at(id);
        cat.insert(cat.end(), poi_row.begin(), poi_row.end());
        out.insert(id, std::move(cat));
      }
      return out;
    }
  }
  throw ContractError("variant_embeddings: unknown mode");
}

}  // namespace mscl
