#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "mscl/tensor.hpp"

namespace mscl {

// One region with all of its modal attributes. Indicator values are stored
// raw; the log transform happens at evaluation time.
struct RegionRecord {
  int id = 0;
  std::vector<std::int64_t> poi_counts;                   // per POI type
  std::int64_t mobility_in = 0;
  std::int64_t mobility_out = 0;
  std::vector<std::vector<std::string>> poi_categories;   // one token bag per POI;
                                                          // first token is the POI's category
  std::vector<Tensor<float>> sv_images;                   // C x H x W each, nonempty
  Tensor<float> rv_image;                                 // C x H x W
  std::map<std::string, double> indicators;

  bool operator==(const RegionRecord&) const = default;
};

struct SyntheticWorldConfig {
  std::size_t n_regions = 150;
  std::size_t n_clusters = 3;
  std::size_t poi_types = 12;
  std::size_t image_channels = 3;
  std::size_t image_size = 32;
  std::size_t sv_images_min = 2;
  std::size_t sv_images_max = 4;
  double noise_counts = 2.0;     // std of POI count noise
  double noise_flows = 25.0;     // std of mobility count noise
  double noise_pixels = 0.08;    // std of per-pixel noise
  double sv_nuisance = 0.25;     // amplitude of the per-region distractor in SV images
  double text_noise = 0.25;      // probability a POI token comes from the shared pool
  double indicator_noise = 0.35; // log-space std of indicator noise
  std::uint64_t seed = 1;

  void validate() const;  // throws ConfigError
};

struct DatasetBundle {
  std::size_t poi_types = 0;
  std::size_t image_channels = 0;
  std::size_t image_size = 0;
  std::uint64_t seed = 0;
  std::vector<RegionRecord> regions;
  // Planted ground truth, present for synthetic worlds; empty when unknown.
  std::vector<int> latent_clusters;

  bool operator==(const DatasetBundle&) const = default;
  std::vector<std::string> indicator_names() const;
};

// Names of the indicators every synthetic world carries. "density" is the
// primary recoverability target.
const std::vector<std::string>& synthetic_indicator_names();

// Deterministic function of the config: same config gives a byte-identical
// bundle. Regions get a latent cluster; POI counts, mobility, imagery, text
// and indicators are all monotone in (or keyed by) that cluster, plus noise.
DatasetBundle generate_world(const SyntheticWorldConfig& config);

// Directory layout: regions.jsonl, images.mscl, manifest.txt (and truth.csv
// for synthetic bundles carrying planted cluster labels).
void write_bundle(const DatasetBundle& bundle, const std::filesystem::path& dir);
DatasetBundle read_bundle(const std::filesystem::path& dir);

enum class Split { kTrain, kValidation, kTest };

struct SplitAssignment {
  std::map<int, Split> by_region;
  std::vector<int> train, validation, test;
};

// Seeded shuffle then contiguous assignment; counts match ratios up to
// rounding. Ratios must sum to 1.
SplitAssignment split_regions(const DatasetBundle& bundle, std::array<double, 3> ratios,
                              std::uint64_t seed);

// ln(1 + x); indicators can legitimately be zero. Negative input is a
// contract violation.
double log_transform(double value);

// Category token (first token) of each POI in the region, in order.
std::vector<std::string> region_category_tokens(const RegionRecord& region);

}  // namespace mscl
