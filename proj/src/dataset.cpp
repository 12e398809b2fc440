#include "mscl/dataset.hpp"

#include <cmath>
#include <fstream>
#include <numbers>
#include <sstream>

#include "json.hpp"
#include "mscl/checkpoint.hpp"
#include "mscl/error.hpp"
#include "mscl/rng.hpp"

namespace mscl {

namespace {

using json = nlohmann::json;

constexpr double kTau = 2.0 * std::numbers::pi;

const std::vector<std::vector<std::string>>& cluster_word_pools() {
  static const std::vector<std::vector<std::string>> pools = {
      {"farm", "field", "orchard", "meadow", "silo", "barn"},
      {"cafe", "office", "market", "school", "bakery", "clinic"},
      {"tower", "plaza", "mall", "hotel", "terminal", "arcade"},
  };
  return pools;
}

const std::vector<std::string>& shared_word_pool() {
  static const std::vector<std::string> pool = {"road", "park", "river",
                                                "bridge", "yard", "corner"};
  return pool;
}

std::string pool_token(std::size_t cluster, std::size_t slot) {
  const auto& pools = cluster_word_pools();
  const auto& base = pools[cluster % pools.size()];
  std::string token = base[slot % base.size()];
  if (cluster >= pools.size()) token += std::to_string(cluster / pools.size());
  return token;
}

std::int64_t noisy_count(double rate, double noise, Rng& rng) {
  const double v = rate + noise * rng.gaussian();
  return v <= 0.0 ? 0 : static_cast<std::int64_t>(std::llround(v));
}

}  // namespace

void SyntheticWorldConfig::validate() const {
  if (n_clusters == 0) throw ConfigError("world: n_clusters must be positive");
  if (n_regions < 3 * n_clusters) {
    throw ConfigError("world: n_regions must be at least 3 * n_clusters, got " +
                      std::to_string(n_regions));
  }
  if (poi_types == 0) throw ConfigError("world: poi_types must be positive");
  if (image_channels == 0 || image_size == 0) throw ConfigError("world: image dims must be positive");
  if (sv_images_min == 0 || sv_images_max < sv_images_min) {
    throw ConfigError("world: invalid sv image count range");
  }
  for (const double v : {noise_counts, noise_flows, noise_pixels, sv_nuisance, indicator_noise}) {
    if (v < 0.0) throw ConfigError("world: noise levels must be >= 0");
  }
  if (text_noise < 0.0 || text_noise > 1.0) throw ConfigError("world: text_noise must be in [0,1]");
}

const std::vector<std::string>& synthetic_indicator_names() {
  static const std::vector<std::string> names = {"density", "activity", "amenity"};
  return names;
}

std::vector<std::string> DatasetBundle::indicator_names() const {
  std::vector<std::string> names;
  if (!regions.empty()) {
    for (const auto& [name, _] : regions.front().indicators) names.push_back(name);
  }
  return names;
}

DatasetBundle generate_world(const SyntheticWorldConfig& config) {
  config.validate();
  Rng rng(config.seed);

  const std::size_t C = config.image_channels;
  const std::size_t S = config.image_size;
  const std::size_t nc = config.n_clusters;

  DatasetBundle bundle;
  bundle.poi_types = config.poi_types;
  bundle.image_channels = C;
  bundle.image_size = S;
  bundle.seed = config.seed;
  bundle.regions.reserve(config.n_regions);
  bundle.latent_clusters.reserve(config.n_regions);

  for (std::size_t i = 0; i < config.n_regions; ++i) {
    const std::size_t cluster = i % nc;
    const double intensity = static_cast<double>(cluster) + 1.0;
    RegionRecord region;
    region.id = static_cast<int>(i);

    // POI counts: each cluster prefers the POI types congruent to it mod nc.
    region.poi_counts.resize(config.poi_types);
    for (std::size_t k = 0; k < config.poi_types; ++k) {
      const double rate = 2.0 + (k % nc == cluster ? 18.0 : 0.0);
      region.poi_counts[k] = noisy_count(rate, config.noise_counts, rng);
    }

    region.mobility_in = noisy_count(160.0 * intensity, config.noise_flows, rng);
    region.mobility_out = noisy_count(130.0 * intensity, config.noise_flows, rng);

    // POI token bags: category first, then 1-2 descriptor tokens; each token
    // leaks to the shared pool with probability text_noise.
    const std::size_t n_poi = 4 + cluster + rng.uniform_index(3);
    region.poi_categories.reserve(n_poi);
    for (std::size_t p = 0; p < n_poi; ++p) {
      std::vector<std::string> bag;
      const std::size_t n_tokens = 2 + rng.uniform_index(2);
      for (std::size_t t = 0; t < n_tokens; ++t) {
        if (rng.uniform() < config.text_noise) {
          const auto& shared = shared_word_pool();
          bag.push_back(shared[rng.uniform_index(shared.size())]);
        } else {
          bag.push_back(pool_token(cluster, rng.uniform_index(6)));
        }
      }
      region.poi_categories.push_back(std::move(bag));
    }

    // Street view: oriented grating per cluster plus a region-level distractor
    // grating that is identical across the region's SV images.
    const double angle = std::numbers::pi * static_cast<double>(cluster) / static_cast<double>(nc);
    const double ca = std::cos(angle), sa = std::sin(angle);
    const double nuis_freq = 2.0 + static_cast<double>(rng.uniform_index(4));
    const double nuis_angle = rng.uniform(0.0, std::numbers::pi);
    const double nuis_phase = rng.uniform(0.0, kTau);
    const double nca = std::cos(nuis_angle), nsa = std::sin(nuis_angle);

    const std::size_t n_sv =
        config.sv_images_min + rng.uniform_index(config.sv_images_max - config.sv_images_min + 1);
    region.sv_images.reserve(n_sv);
    for (std::size_t img = 0; img < n_sv; ++img) {
      Tensor<float> im({C, S, S});
      for (std::size_t ch = 0; ch < C; ++ch) {
        const double phase = kTau * static_cast<double>(ch) / 3.0;
        for (std::size_t y = 0; y < S; ++y) {
          for (std::size_t x = 0; x < S; ++x) {
            const double u = (ca * static_cast<double>(x) + sa * static_cast<double>(y)) /
                             static_cast<double>(S);
            const double nu = (nca * static_cast<double>(x) + nsa * static_cast<double>(y)) /
                              static_cast<double>(S);
            double v = 0.5 + 0.35 * std::sin(kTau * 3.0 * u + phase) +
                       config.sv_nuisance * std::sin(kTau * nuis_freq * nu + nuis_phase);
            if (config.noise_pixels > 0.0) v += config.noise_pixels * rng.gaussian();
            im.at(ch, y, x) = static_cast<float>(v);
          }
        }
      }
      region.sv_images.push_back(std::move(im));
    }

    // Remote view: separable checker-like pattern whose frequency grows with
    // the cluster index.
    {
      const double freq = static_cast<double>(cluster + 1);
      Tensor<float> im({C, S, S});
      for (std::size_t ch = 0; ch < C; ++ch) {
        const double phase = kTau * static_cast<double>(ch) / 3.0;
        for (std::size_t y = 0; y < S; ++y) {
          for (std::size_t x = 0; x < S; ++x) {
            const double gx = std::sin(kTau * freq * static_cast<double>(x) / static_cast<double>(S) + phase);
            const double gy = std::sin(kTau * freq * static_cast<double>(y) / static_cast<double>(S) + phase);
            double v = 0.5 + 0.35 * gx * gy;
            if (config.noise_pixels > 0.0) v += config.noise_pixels * rng.gaussian();
            im.at(ch, y, x) = static_cast<float>(v);
          }
        }
      }
      region.rv_image = std::move(im);
    }

    // Indicators: log-space linear in the cluster intensity plus noise, so the
    // log transform used downstream recovers a clean signal-to-noise ratio.
    const auto indicator = [&](double base, double slope, double noise_scale) {
      const double log_value =
          base + slope * intensity + noise_scale * config.indicator_noise * rng.gaussian();
      return std::max(0.0, std::expm1(log_value));
    };
    region.indicators["density"] = indicator(5.0, 1.0, 1.0);
    region.indicators["activity"] = indicator(3.0, 0.8, 0.9);
    region.indicators["amenity"] = indicator(2.0, 0.6, 0.8);

    bundle.regions.push_back(std::move(region));
    bundle.latent_clusters.push_back(static_cast<int>(cluster));
  }
  return bundle;
}

void write_bundle(const DatasetBundle& bundle, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);

  {
    std::ofstream out(dir / "regions.jsonl", std::ios::trunc);
    if (!out) throw FormatError("cannot write regions.jsonl in '" + dir.string() + "'", 0);
    for (const auto& region : bundle.regions) {
      json j;
      j["id"] = region.id;
      j["poi_counts"] = region.poi_counts;
      j["mobility"] = {region.mobility_in, region.mobility_out};
      j["categories"] = region.poi_categories;
      j["indicators"] = region.indicators;
      out << j.dump() << "\n";
    }
  }

  {
    NamedTensors images;
    for (const auto& region : bundle.regions) {
      const std::string id = std::to_string(region.id);
      for (std::size_t s = 0; s < region.sv_images.size(); ++s) {
        images.emplace("sv/" + id + "/" + std::to_string(s), region.sv_images[s]);
      }
      images.emplace("rv/" + id, region.rv_image);
    }
    save_checkpoint(dir / "images.mscl", images);
  }

  {
    std::ofstream out(dir / "manifest.txt", std::ios::trunc);
    if (!out) throw FormatError("cannot write manifest.txt in '" + dir.string() + "'", 0);
    out << "K=" << bundle.poi_types << "\n";
    out << "image_dims=" << bundle.image_channels << "x" << bundle.image_size << "x"
        << bundle.image_size << "\n";
    out << "n_regions=" << bundle.regions.size() << "\n";
    out << "seed=" << bundle.seed << "\n";
  }

  if (!bundle.latent_clusters.empty()) {
    std::ofstream out(dir / "truth.csv", std::ios::trunc);
    out << "region_id,cluster\n";
    for (std::size_t i = 0; i < bundle.latent_clusters.size(); ++i) {
      out << bundle.regions[i].id << "," << bundle.latent_clusters[i] << "\n";
    }
  } else {
    std::filesystem::remove(dir / "truth.csv");
  }
}

DatasetBundle read_bundle(const std::filesystem::path& dir) {
  DatasetBundle bundle;

  {
    std::ifstream in(dir / "manifest.txt");
    if (!in) throw FormatError("missing manifest.txt in '" + dir.string() + "'", 0);
    std::string line;
    std::uint64_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      const auto eq = line.find('=');
      if (eq == std::string::npos) throw FormatError("manifest.txt: expected key=value", lineno);
      const std::string key = line.substr(0, eq);
      const std::string value = line.substr(eq + 1);
      if (key == "K") {
        bundle.poi_types = std::stoull(value);
      } else if (key == "image_dims") {
        std::size_t c = 0, h = 0, w = 0;
        char x1 = 0, x2 = 0;
        std::istringstream dims(value);
        dims >> c >> x1 >> h >> x2 >> w;
        if (!dims || x1 != 'x' || x2 != 'x' || h != w) {
          throw FormatError("manifest.txt: bad image_dims '" + value + "'", lineno);
        }
        bundle.image_channels = c;
        bundle.image_size = h;
      } else if (key == "n_regions") {
        // validated against regions.jsonl below
      } else if (key == "seed") {
        bundle.seed = std::stoull(value);
      } else {
        throw FormatError("manifest.txt: unknown key '" + key + "'", lineno);
      }
    }
  }

  NamedTensors images = load_checkpoint(dir / "images.mscl");

  {
    std::ifstream in(dir / "regions.jsonl");
    if (!in) throw FormatError("missing regions.jsonl in '" + dir.string() + "'", 0);
    std::string line;
    std::uint64_t lineno = 0;
    while (std::getline(in, line)) {
      ++lineno;
      if (line.empty()) continue;
      json j;
      try {
        j = json::parse(line);
      } catch (const json::parse_error& e) {
        throw FormatError("regions.jsonl line " + std::to_string(lineno) + ": " + e.what(), lineno);
      }
      RegionRecord region;
      region.id = j.at("id").get<int>();
      region.poi_counts = j.at("poi_counts").get<std::vector<std::int64_t>>();
      const auto mob = j.at("mobility").get<std::vector<std::int64_t>>();
      if (mob.size() != 2) throw FormatError("regions.jsonl: mobility must have 2 entries", lineno);
      region.mobility_in = mob[0];
      region.mobility_out = mob[1];
      region.poi_categories = j.at("categories").get<std::vector<std::vector<std::string>>>();
      region.indicators = j.at("indicators").get<std::map<std::string, double>>();
      if (region.poi_counts.size() != bundle.poi_types) {
        throw FormatError("regions.jsonl: poi_counts length " +
                              std::to_string(region.poi_counts.size()) + " != K " +
                              std::to_string(bundle.poi_types),
                          lineno);
      }
      const std::string id = std::to_string(region.id);
      for (std::size_t s = 0;; ++s) {
        const auto it = images.find("sv/" + id + "/" + std::to_string(s));
        if (it == images.end()) break;
        region.sv_images.push_back(it->second);
      }
      if (region.sv_images.empty()) {
        throw FormatError("images.mscl: no sv images for region " + id, 0);
      }
      const auto rv = images.find("rv/" + id);
      if (rv == images.end()) throw FormatError("images.mscl: missing rv image for region " + id, 0);
      region.rv_image = rv->second;
      bundle.regions.push_back(std::move(region));
    }
  }

  {
    std::ifstream in(dir / "truth.csv");
    if (in) {
      std::string line;
      std::getline(in, line);  // header
      while (std::getline(in, line)) {
        if (line.empty()) continue;
        const auto comma = line.find(',');
        bundle.latent_clusters.push_back(std::stoi(line.substr(comma + 1)));
      }
    }
  }

  return bundle;
}

SplitAssignment split_regions(const DatasetBundle& bundle, std::array<double, 3> ratios,
                              std::uint64_t seed) {
  const double total = ratios[0] + ratios[1] + ratios[2];
  if (std::abs(total - 1.0) > 1e-9) throw ContractError("split_regions: ratios must sum to 1");
  const std::size_t n = bundle.regions.size();
  if (n < 3) throw ContractError("split_regions: need at least 3 regions");

  std::vector<int> ids;
  ids.reserve(n);
  for (const auto& region : bundle.regions) ids.push_back(region.id);
  Rng rng(seed);
  rng.shuffle(ids);

  const std::size_t n_train =
      static_cast<std::size_t>(std::llround(ratios[0] * static_cast<double>(n)));
  const std::size_t n_train_val =
      static_cast<std::size_t>(std::llround((ratios[0] + ratios[1]) * static_cast<double>(n)));

  SplitAssignment out;
  for (std::size_t i = 0; i < n; ++i) {
    const Split s = i < n_train ? Split::kTrain : (i < n_train_val ? Split::kValidation : Split::kTest);
    out.by_region.emplace(ids[i], s);
    if (s == Split::kTrain) out.train.push_back(ids[i]);
    else if (s == Split::kValidation) out.validation.push_back(ids[i]);
    else out.test.push_back(ids[i]);
  }
  return out;
}

double log_transform(double value) {
  if (value < 0.0) throw ContractError("log_transform: value must be >= 0");
  return std::log1p(value);
}

std::vector<std::string> region_category_tokens(const RegionRecord& region) {
  std::vector<std::string> tokens;
  tokens.reserve(region.poi_categories.size());
  for (const auto& bag : region.poi_categories) {
    if (!bag.empty()) tokens.push_back(bag.front());
  }
  return tokens;
}

}  // namespace mscl
