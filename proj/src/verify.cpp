#include "mscl/verify.hpp"

#include <cstdint>

#include "mscl/fusion.hpp"
#include "mscl/grad_check.hpp"
#include "mscl/rng.hpp"
#include "mscl/tape.hpp"
#include "mscl/text.hpp"
#include "mscl/visual.hpp"

namespace mscl {

namespace {

constexpr std::size_t kSeeds = 20;
constexpr double kH = 1e-5;

Tensor<double> random_tensor(std::vector<std::size_t> shape, Rng& rng, double scale = 1.0) {
  Tensor<double> t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) t.at(i) = scale * rng.gaussian();
  return t;
}

// Inputs bounded away from zero, for ops with a kink at the origin.
Tensor<double> random_offzero(std::vector<std::size_t> shape, Rng& rng) {
  Tensor<double> t(std::move(shape));
  for (std::size_t i = 0; i < t.numel(); ++i) {
    const double mag = 0.2 + rng.uniform(0.0, 1.8);
    t.at(i) = rng.uniform() < 0.5 ? -mag : mag;
  }
  return t;
}

using Builder = std::function<double(std::uint64_t seed)>;

GradCheckEntry run_entry(const std::string& name, const Builder& one_seed,
                         double threshold = 1e-4) {
  GradCheckEntry entry;
  entry.name = name;
  entry.threshold = threshold;
  for (std::uint64_t seed = 0; seed < kSeeds; ++seed) {
    entry.max_error = std::max(entry.max_error, one_seed(seed));
  }
  entry.passed = entry.max_error < entry.threshold;
  return entry;
}

}  // namespace

std::vector<GradCheckEntry> gradcheck_suite() {
  std::vector<GradCheckEntry> out;

  out.push_back(run_entry("affine", [](std::uint64_t seed) {
    Rng rng(mix_seed(seed, 1));
    std::vector<Tensor<double>> inputs = {random_tensor({3, 4}, rng), random_tensor({4, 5}, rng),
                                          random_tensor({5}, rng)};
    return grad_check<double>(
        [](Tape<double>& tp, const std::vector<Var>& v) {
          return sum(tp, affine(tp, v[0], v[1], v[2]));
        },
        inputs, kH);
  }));

  out.push_back(run_entry("conv2d", [](std::uint64_t seed) {
    Rng rng(mix_seed(seed, 2));
    std::vector<Tensor<double>> inputs = {random_tensor({2, 6, 7}, rng),
                                          random_tensor({3, 2, 3, 3}, rng, 0.5)};
    const std::size_t stride = 1 + seed % 2, padding = seed % 2;
    return grad_check<double>(
        [stride, padding](Tape<double>& tp, const std::vector<Var>& v) {
          return sum(tp, conv2d(tp, v[0], v[1], stride, padding));
        },
        inputs, kH);
  }));

  out.push_back(run_entry("relu", [](std::uint64_t seed) {
    Rng rng(mix_seed(seed, 3));
    return grad_check<double>(
        [](Tape<double>& tp, Var x) { return sum(tp, relu(tp, x)); }, random_offzero({8}, rng),
        kH);
  }));

  out.push_back(run_entry("softmax_row", [](std::uint64_t seed) {
    Rng rng(mix_seed(seed, 4));
    const Tensor<double> probe = random_tensor({15}, rng);
    return grad_check<double>(
        [probe](Tape<double>& tp, Var x) {
          Var s = softmax_row(tp, x);
          Var flat = reshape(tp, s, {15});
          return dot(tp, flat, tp.constant(probe));
        },
        random_tensor({3, 5}, rng, 2.0), kH);
  }));

  out.push_back(run_entry("max_pool2d", [](std::uint64_t seed) {
    Rng rng(mix_seed(seed, 5));
    return grad_check<double>(
        [](Tape<double>& tp, Var x) { return sum(tp, max_pool2d(tp, x, 2, 2)); },
        random_tensor({2, 6, 6}, rng), kH);
  }));

  out.push_back(run_entry("global_avg_pool", [](std::uint64_t seed) {
    Rng rng(mix_seed(seed, 6));
    return grad_check<double>(
        [](Tape<double>& tp, Var x) { return sum(tp, global_avg_pool(tp, x)); },
        random_tensor({3, 4, 4}, rng), kH);
  }));

  out.push_back(run_entry("l2_normalize", [](std::uint64_t seed) {
    Rng rng(mix_seed(seed, 7));
    const Tensor<double> probe = random_tensor({6}, rng);
    return grad_check<double>(
        [probe](Tape<double>& tp, Var x) {
          return dot(tp, l2_normalize(tp, x), tp.constant(probe));
        },
        random_tensor({6}, rng), kH);
  }));

  out.push_back(run_entry("cosine_similarity", [](std::uint64_t seed) {
    Rng rng(mix_seed(seed, 8));
    std::vector<Tensor<double>> inputs = {random_tensor({5}, rng), random_tensor({5}, rng)};
    return grad_check<double>(
        [](Tape<double>& tp, const std::vector<Var>& v) {
          return cosine_similarity(tp, v[0], v[1]);
        },
        inputs, kH);
  }));

  out.push_back(run_entry("softplus", [](std::uint64_t seed) {
    Rng rng(mix_seed(seed, 9));
    return grad_check<double>(
        [](Tape<double>& tp, Var x) { return sum(tp, softplus(tp, x)); },
        random_tensor({7}, rng, 2.0), kH);
  }));

  out.push_back(run_entry("logsumexp", [](std::uint64_t seed) {
    Rng rng(mix_seed(seed, 10));
    return grad_check<double>(
        [](Tape<double>& tp, Var x) { return logsumexp(tp, x); }, random_tensor({7}, rng, 2.0),
        kH);
  }));

  out.push_back(run_entry("triplet_loss", [](std::uint64_t seed) {
    Rng rng(mix_seed(seed, 11));
    std::vector<Tensor<double>> inputs = {random_tensor({6}, rng), random_tensor({6}, rng),
                                          random_tensor({6}, rng)};
    return grad_check<double>(
        [](Tape<double>& tp, const std::vector<Var>& v) {
          return triplet_loss(tp, v[0], v[1], v[2], 0.4);
        },
        inputs, kH);
  }));

  out.push_back(run_entry("hs_pair_loss", [](std::uint64_t seed) {
    Rng rng(mix_seed(seed, 12));
    std::vector<Tensor<double>> inputs;
    inputs.push_back(random_tensor({6}, rng, 0.5));
    std::vector<std::uint8_t> bits;
    for (int i = 0; i < 3; ++i) {
      inputs.push_back(random_tensor({6}, rng, 0.5));
      bits.push_back(static_cast<std::uint8_t>(rng.uniform_index(2)));
    }
    return grad_check<double>(
        [bits](Tape<double>& tp, const std::vector<Var>& v) {
          return hs_pair_loss(tp, v[0], {v.begin() + 1, v.end()}, bits);
        },
        inputs, kH);
  }));

  out.push_back(run_entry("infonce_loss", [](std::uint64_t seed) {
    Rng rng(mix_seed(seed, 13));
    std::vector<Tensor<double>> inputs;
    for (int i = 0; i < 6; ++i) inputs.push_back(random_tensor({4}, rng));
    return grad_check<double>(
        [](Tape<double>& tp, const std::vector<Var>& v) {
          return infonce_loss(tp, {v[0], v[1], v[2]}, {v[3], v[4], v[5]}, 1.0);
        },
        inputs, kH);
  }));

  out.push_back(run_entry("attentive_fusion_infonce", [](std::uint64_t seed) {
    Rng rng(mix_seed(seed, 14));
    std::vector<Tensor<double>> inputs = {
        random_tensor({4}, rng),     // c
        random_tensor({4, 4}, rng),  // M
        random_tensor({4}, rng),     // b
    };
    std::vector<Tensor<double>> rows;
    for (int i = 0; i < 6; ++i) rows.push_back(random_tensor({4}, rng));
    return grad_check<double>(
        [rows](Tape<double>& tp, const std::vector<Var>& v) {
          std::vector<Var> images, texts;
          for (int i = 0; i < 2; ++i) {
            Var sv = tp.constant(rows[3 * i]);
            Var rv = tp.constant(rows[3 * i + 1]);
            images.push_back(attentive_fusion(tp, v[0], v[1], v[2], sv, rv).e_image);
            texts.push_back(tp.constant(rows[3 * i + 2]));
          }
          return infonce_loss(tp, images, texts, 1.0);
        },
        inputs, kH);
  }));

  out.push_back(run_entry("mlp_mse_loss", [](std::uint64_t seed) {
    Rng rng(mix_seed(seed, 15));
    std::vector<Tensor<double>> inputs = {
        random_tensor({4, 6}, rng),
        random_tensor({6}, rng),
        random_tensor({6, 1}, rng),
        random_tensor({1}, rng),
    };
    const Tensor<double> x = random_tensor({3, 4}, rng);
    const Tensor<double> y = random_tensor({3, 1}, rng);
    return grad_check<double>(
        [x, y](Tape<double>& tp, const std::vector<Var>& v) {
          Var h = relu(tp, affine(tp, tp.constant(x), v[0], v[1]));
          Var pred = affine(tp, h, v[2], v[3]);
          Var diff = sub(tp, pred, tp.constant(y));
          return mean(tp, mul(tp, diff, diff));
        },
        inputs, kH);
  }));

  return out;
}

}  // namespace mscl
