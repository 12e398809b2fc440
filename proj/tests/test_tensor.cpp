#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <filesystem>

#include "mscl/adam.hpp"
#include "mscl/checkpoint.hpp"
#include "mscl/grad_check.hpp"
#include "mscl/tape.hpp"
#include "test_helpers.hpp"

using namespace mscl;
using mscl::testing::approx;
using mscl::testing::random_tensor;

namespace {

// Independent sliding-window cross-correlation used as the conv2d oracle.
Tensor<double> conv_oracle(const Tensor<double>& x, const Tensor<double>& k, std::size_t stride,
                           std::size_t padding) {
  const std::size_t cin = x.dim(0), h = x.dim(1), w = x.dim(2);
  const std::size_t cout = k.dim(0), ks = k.dim(2);
  const std::size_t oh = (h + 2 * padding - ks) / stride + 1;
  const std::size_t ow = (w + 2 * padding - ks) / stride + 1;
  Tensor<double> out({cout, oh, ow});
  for (std::size_t co = 0; co < cout; ++co)
    for (std::size_t oy = 0; oy < oh; ++oy)
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double acc = 0.0;
        for (std::size_t ci = 0; ci < cin; ++ci)
          for (std::size_t ky = 0; ky < ks; ++ky)
            for (std::size_t kx = 0; kx < ks; ++kx) {
              const std::ptrdiff_t iy = static_cast<std::ptrdiff_t>(oy * stride + ky) -
                                        static_cast<std::ptrdiff_t>(padding);
              const std::ptrdiff_t ix = static_cast<std::ptrdiff_t>(ox * stride + kx) -
                                        static_cast<std::ptrdiff_t>(padding);
              if (iy < 0 || iy >= static_cast<std::ptrdiff_t>(h)) continue;
              if (ix < 0 || ix >= static_cast<std::ptrdiff_t>(w)) continue;
              acc += x.at(ci, iy, ix) * k.at(co, ci, ky, kx);
            }
        out.at(co, oy, ox) = acc;
      }
  return out;
}

}  // namespace

TEST_CASE("affine matches hand oracle") {
  Tape<double> tp;
  SUBCASE("identity weights pass input through") {
    Var x = tp.constant(Tensor<double>({1, 2}, {1, 2}));
    Var w = tp.constant(Tensor<double>({2, 2}, {1, 0, 0, 1}));
    Var b = tp.constant(Tensor<double>({2}, {0, 0}));
    Var y = affine(tp, x, w, b);
    CHECK(tp.value(y).at(0, 0) == 1.0);
    CHECK(tp.value(y).at(0, 1) == 2.0);
  }
  SUBCASE("hand matrix multiply") {
    Var x = tp.constant(Tensor<double>({1, 2}, {1, 1}));
    Var w = tp.constant(Tensor<double>({2, 2}, {2, 3, 4, 5}));
    Var b = tp.constant(Tensor<double>({2}, {1, 1}));
    Var y = affine(tp, x, w, b);
    CHECK(tp.value(y).at(0, 0) == 7.0);
    CHECK(tp.value(y).at(0, 1) == 9.0);
  }
  SUBCASE("nonconforming shapes name both operands") {
    Var x = tp.constant(Tensor<double>({2, 3}));
    Var w = tp.constant(Tensor<double>({4, 5}));
    Var b = tp.constant(Tensor<double>({5}));
    CHECK_THROWS_WITH_AS(affine(tp, x, w, b),
                         doctest::Contains("[2x3]"), ShapeError);
  }
}

TEST_CASE("conv2d") {
  Tape<double> tp;
  SUBCASE("full overlap of ones sums the window") {
    Var x = tp.constant(Tensor<double>::full({1, 3, 3}, 1.0));
    Var k = tp.constant(Tensor<double>::full({1, 1, 3, 3}, 1.0));
    Var y = conv2d(tp, x, k, 1, 0);
    CHECK(tp.value(y).shape() == std::vector<std::size_t>{1, 1, 1});
    CHECK(tp.value(y).at(0) == 9.0);
  }
  SUBCASE("ramp input with averaging kernel matches sliding-window oracle") {
    Tensor<double> x({1, 4, 4});
    for (std::size_t i = 0; i < 16; ++i) x.at(i) = static_cast<double>(i);
    Tensor<double> k = Tensor<double>::full({1, 1, 2, 2}, 0.25);
    const Tensor<double> expected = conv_oracle(x, k, 1, 0);
    Var y = conv2d(tp, tp.constant(x), tp.constant(k), 1, 0);
    CHECK(tp.value(y).shape() == std::vector<std::size_t>{1, 3, 3});
    for (std::size_t i = 0; i < 9; ++i) CHECK(tp.value(y).at(i) == doctest::Approx(expected.at(i)));
  }
  SUBCASE("padding keeps the spatial size") {
    Var x = tp.constant(Tensor<double>::full({1, 2, 2}, 1.0));
    Var k = tp.constant(Tensor<double>::full({1, 1, 3, 3}, 1.0));
    Var y = conv2d(tp, x, k, 1, 1);
    CHECK(tp.value(y).shape() == std::vector<std::size_t>{1, 2, 2});
  }
  SUBCASE("kernel larger than padded input is a shape error") {
    Var x = tp.constant(Tensor<double>::full({1, 2, 2}, 1.0));
    Var k = tp.constant(Tensor<double>::full({1, 1, 3, 3}, 1.0));
    CHECK_THROWS_AS(conv2d(tp, x, k, 1, 0), ShapeError);
  }
  SUBCASE("random conv matches oracle") {
    Rng rng(7);
    for (int trial = 0; trial < 5; ++trial) {
      const auto x = random_tensor<double>({2, 5, 6}, rng);
      const auto k = random_tensor<double>({3, 2, 3, 3}, rng);
      const std::size_t stride = 1 + trial % 2, padding = trial % 3;
      const Tensor<double> expected = conv_oracle(x, k, stride, padding);
      Tape<double> local;
      Var y = conv2d(local, local.constant(x), local.constant(k), stride, padding);
      REQUIRE(local.value(y).shape() == expected.shape());
      for (std::size_t i = 0; i < expected.numel(); ++i) {
        CHECK(local.value(y).at(i) == doctest::Approx(expected.at(i)).epsilon(1e-12));
      }
    }
  }
}

TEST_CASE("elementwise and pooling basics") {
  Tape<double> tp;
  SUBCASE("relu") {
    Var y = relu(tp, tp.constant(Tensor<double>({3}, {-1, 0, 2})));
    CHECK(tp.value(y).at(0) == 0.0);
    CHECK(tp.value(y).at(1) == 0.0);
    CHECK(tp.value(y).at(2) == 2.0);
  }
  SUBCASE("softmax of equal logits is uniform") {
    Var y = softmax_row(tp, tp.constant(Tensor<double>({2}, {0, 0})));
    CHECK(tp.value(y).at(0) == doctest::Approx(0.5));
    CHECK(tp.value(y).at(1) == doctest::Approx(0.5));
  }
  SUBCASE("softmax matches exp/sum oracle") {
    Var y = softmax_row(tp, tp.constant(Tensor<double>({3}, {1, 2, 3})));
    const double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    for (std::size_t i = 0; i < 3; ++i) {
      CHECK(tp.value(y).at(i) == doctest::Approx(std::exp(1.0 + i) / z).epsilon(1e-12));
    }
  }
  SUBCASE("softmax rows sum to one and are shift invariant") {
    Rng rng(3);
    for (int trial = 0; trial < 20; ++trial) {
      const auto x = random_tensor<double>({4, 5}, rng, 3.0);
      Tape<double> local;
      Var y = softmax_row(local, local.constant(x));
      Tensor<double> shifted = x;
      const double c = rng.uniform(-100.0, 100.0);
      for (std::size_t r = 0; r < 4; ++r)
        for (std::size_t j = 0; j < 5; ++j) shifted.at(r, j) += c;
      Var y2 = softmax_row(local, local.constant(shifted));
      for (std::size_t r = 0; r < 4; ++r) {
        double row_sum = 0.0;
        for (std::size_t j = 0; j < 5; ++j) {
          const double v = local.value(y).at(r, j);
          CHECK(v >= 0.0);
          row_sum += v;
          CHECK(approx(v, local.value(y2).at(r, j), 1e-6));
        }
        CHECK(approx(row_sum, 1.0, 1e-6));
      }
    }
  }
  SUBCASE("max_pool2d picks window maxima") {
    Tensor<double> x({1, 2, 4}, {1, 5, 2, 0, 3, 4, 8, 7});
    Var y = max_pool2d(tp, tp.constant(x), 2, 2);
    CHECK(tp.value(y).shape() == std::vector<std::size_t>{1, 1, 2});
    CHECK(tp.value(y).at(0) == 5.0);
    CHECK(tp.value(y).at(1) == 8.0);
  }
  SUBCASE("global_avg_pool means each channel") {
    Tensor<double> x({2, 1, 2}, {1, 3, 10, 20});
    Var y = global_avg_pool(tp, tp.constant(x));
    CHECK(tp.value(y).at(0) == doctest::Approx(2.0));
    CHECK(tp.value(y).at(1) == doctest::Approx(15.0));
  }
  SUBCASE("l2_normalize of zero flags degenerate") {
    Var y = l2_normalize(tp, tp.constant(Tensor<double>({3})));
    CHECK(tp.degenerate(y));
    for (std::size_t i = 0; i < 3; ++i) CHECK(tp.value(y).at(i) == 0.0);
    Var y2 = l2_normalize(tp, tp.constant(Tensor<double>({2}, {3, 4})));
    CHECK_FALSE(tp.degenerate(y2));
    CHECK(tp.value(y2).at(0) == doctest::Approx(0.6));
    CHECK(tp.value(y2).at(1) == doctest::Approx(0.8));
  }
}

TEST_CASE("cosine similarity") {
  Tape<double> tp;
  SUBCASE("identical, orthogonal, hand value") {
    Var a = tp.constant(Tensor<double>({2}, {1, 0}));
    Var b = tp.constant(Tensor<double>({2}, {0, 1}));
    CHECK(tp.value(cosine_similarity(tp, a, a)).at(0) == doctest::Approx(1.0));
    CHECK(tp.value(cosine_similarity(tp, a, b)).at(0) == doctest::Approx(0.0));
    Var u = tp.constant(Tensor<double>({2}, {1, 2}));
    Var v = tp.constant(Tensor<double>({2}, {2, 1}));
    CHECK(tp.value(cosine_similarity(tp, u, v)).at(0) == doctest::Approx(0.8));
  }
  SUBCASE("both-zero input gives flagged zero") {
    Var z = tp.constant(Tensor<double>({2}));
    Var s = cosine_similarity(tp, z, z);
    CHECK(tp.value(s).at(0) == 0.0);
    CHECK(tp.degenerate(s));
  }
  SUBCASE("symmetric and scale invariant") {
    Rng rng(11);
    for (int trial = 0; trial < 20; ++trial) {
      const auto u = random_tensor<double>({6}, rng);
      const auto v = random_tensor<double>({6}, rng);
      const double a = std::exp(rng.uniform(-3.0, 3.0));
      const double b = std::exp(rng.uniform(-3.0, 3.0));
      Tensor<double> ua = u, vb = v;
      for (std::size_t i = 0; i < 6; ++i) {
        ua.at(i) *= a;
        vb.at(i) *= b;
      }
      Tape<double> local;
      const double s1 = local.value(cosine_similarity(local, local.constant(u), local.constant(v))).at(0);
      const double s2 = local.value(cosine_similarity(local, local.constant(v), local.constant(u))).at(0);
      const double s3 = local.value(cosine_similarity(local, local.constant(ua), local.constant(vb))).at(0);
      CHECK(approx(s1, s2, 1e-12));
      CHECK(approx(s1, s3, 1e-6));
      CHECK(s1 >= -1.0 - 1e-6);
      CHECK(s1 <= 1.0 + 1e-6);
    }
  }
}

TEST_CASE("backward") {
  SUBCASE("sum gradient is ones") {
    Tape<double> tp;
    Var x = tp.leaf(Tensor<double>({3}, {1, 2, 3}, true));
    const auto grads = tp.backward(sum(tp, x));
    for (std::size_t i = 0; i < 3; ++i) CHECK(grads.at(x).at(i) == 1.0);
  }
  SUBCASE("dot(x,x) gradient is 2x") {
    Tape<double> tp;
    Var x = tp.leaf(Tensor<double>({2}, {1, 2}, true));
    const auto grads = tp.backward(dot(tp, x, x));
    CHECK(grads.at(x).at(0) == doctest::Approx(2.0));
    CHECK(grads.at(x).at(1) == doctest::Approx(4.0));
  }
  SUBCASE("unused leaf gets exactly zero") {
    Tape<double> tp;
    Var used = tp.leaf(Tensor<double>({2}, {1, 2}, true));
    Var unused = tp.leaf(Tensor<double>({3}, {5, 6, 7}, true));
    const auto grads = tp.backward(sum(tp, used));
    for (std::size_t i = 0; i < 3; ++i) CHECK(grads.at(unused).at(i) == 0.0);
  }
  SUBCASE("non-scalar loss is a contract error") {
    Tape<double> tp;
    Var x = tp.leaf(Tensor<double>({3}, {1, 2, 3}, true));
    CHECK_THROWS_AS(tp.backward(relu(tp, x)), ContractError);
  }
}

TEST_CASE("grad_check on composites of the registered ops") {
  SUBCASE("sum of squares is near machine precision") {
    const double err = grad_check<double>(
        [](Tape<double>& tp, Var x) { return dot(tp, x, x); },
        Tensor<double>({4}, {0.5, -1.25, 2.0, 3.5}), 1e-5);
    CHECK(err < 1e-8);
  }
  SUBCASE("affine/relu/softmax/cosine composite over 20 seeds") {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Rng rng(seed);
      std::vector<Tensor<double>> inputs = {
          random_tensor<double>({2, 3}, rng),
          random_tensor<double>({3, 4}, rng),
          random_tensor<double>({4}, rng),
          random_tensor<double>({4}, rng),
      };
      const double err = grad_check<double>(
          [](Tape<double>& tp, const std::vector<Var>& v) {
            Var h = relu(tp, affine(tp, v[0], v[1], v[2]));
            Var s = softmax_row(tp, h);
            Var row0 = reshape(tp, s, {2, 4});
            Var flat = reshape(tp, row0, {8});
            Var a = slice_scalar(tp, flat, 0);
            Var probe = cosine_similarity(tp, v[3], v[3]);
            return add(tp, mul(tp, a, probe), mean(tp, flat));
          },
          inputs, 1e-5);
      CHECK(err < 1e-4);
    }
  }
  SUBCASE("conv/pool/normalize composite over 20 seeds") {
    // relu is checked separately away from its kink; pooling over continuous
    // random conv outputs avoids max ties.
    for (std::uint64_t seed = 100; seed < 120; ++seed) {
      Rng rng(seed);
      std::vector<Tensor<double>> inputs = {
          random_tensor<double>({2, 6, 6}, rng),
          random_tensor<double>({3, 2, 3, 3}, rng, 0.5),
          random_tensor<double>({3}, rng, 0.1),
      };
      const double err = grad_check<double>(
          [](Tape<double>& tp, const std::vector<Var>& v) {
            Var c = conv2d(tp, v[0], v[1], 1, 1);
            Var biased = bias_channels(tp, c, v[2]);
            Var pooled = max_pool2d(tp, biased, 2, 2);
            Var g = global_avg_pool(tp, pooled);
            Var n = l2_normalize(tp, g);
            return sum(tp, n);
          },
          inputs, 1e-5);
      CHECK(err < 1e-4);
    }
  }
  SUBCASE("relu gradient away from the kink") {
    Rng rng(9);
    for (int trial = 0; trial < 20; ++trial) {
      Tensor<double> x({6});
      for (std::size_t i = 0; i < 6; ++i) {
        const double mag = rng.uniform(0.2, 2.0);
        x.at(i) = rng.uniform() < 0.5 ? -mag : mag;
      }
      const double err = grad_check<double>(
          [](Tape<double>& tp, Var v) { return sum(tp, relu(tp, v)); }, x, 1e-5);
      CHECK(err < 1e-8);
    }
  }
  SUBCASE("softplus and logsumexp") {
    Rng rng(42);
    const double err = grad_check<double>(
        [](Tape<double>& tp, Var x) { return sum(tp, softplus(tp, x)); },
        random_tensor<double>({5}, rng, 2.0), 1e-5);
    CHECK(err < 1e-6);
    const double err2 = grad_check<double>(
        [](Tape<double>& tp, Var x) { return logsumexp(tp, x); },
        random_tensor<double>({5}, rng, 2.0), 1e-5);
    CHECK(err2 < 1e-6);
  }
}

TEST_CASE("adam") {
  SUBCASE("zero gradient leaves fresh parameters unchanged") {
    ParamSet<double> params{{"p", Tensor<double>({2}, {1.0, -2.0})}};
    ParamSet<double> grads{{"p", Tensor<double>({2})}};
    AdamState<double> state;
    adam_step(params, grads, state);
    CHECK(params.at("p").at(0) == 1.0);
    CHECK(params.at("p").at(1) == -2.0);
  }
  SUBCASE("single step matches the scalar hand trace") {
    // g=1: m=0.1, v=0.001, mhat=1, vhat=1 -> delta = lr / (1 + eps)
    ParamSet<double> params{{"p", Tensor<double>({1}, {0.0})}};
    ParamSet<double> grads{{"p", Tensor<double>({1}, {1.0})}};
    AdamState<double> state;
    state.config.lr = 5e-4;
    adam_step(params, grads, state);
    const double expected = -5e-4 * 1.0 / (1.0 + 1e-8);
    CHECK(params.at("p").at(0) == doctest::Approx(expected).epsilon(1e-12));
  }
  SUBCASE("two identical steps reproduce the two-step trace") {
    ParamSet<double> params{{"p", Tensor<double>({1}, {0.0})}};
    ParamSet<double> grads{{"p", Tensor<double>({1}, {1.0})}};
    AdamState<double> state;
    state.config.lr = 5e-4;
    adam_step(params, grads, state);
    adam_step(params, grads, state);

    // Independent scalar re-derivation.
    double m = 0.0, v = 0.0, p = 0.0;
    for (int t = 1; t <= 2; ++t) {
      m = 0.9 * m + 0.1 * 1.0;
      v = 0.999 * v + 0.001 * 1.0;
      const double mhat = m / (1.0 - std::pow(0.9, t));
      const double vhat = v / (1.0 - std::pow(0.999, t));
      p -= 5e-4 * mhat / (std::sqrt(vhat) + 1e-8);
    }
    CHECK(params.at("p").at(0) == doctest::Approx(p).epsilon(1e-12));
  }
}

TEST_CASE("tensor invariants") {
  SUBCASE("construction rejects non-finite data") {
    CHECK_THROWS_AS(Tensor<double>({2}, {1.0, std::nan("")}), ContractError);
    CHECK_THROWS_AS(Tensor<double>({1}, {INFINITY}), ContractError);
  }
  SUBCASE("shape/data length mismatch") {
    CHECK_THROWS_AS(Tensor<double>({3}, {1.0, 2.0}), ShapeError);
  }
}

TEST_CASE("checkpoint round trip is bit exact") {
  const auto dir = std::filesystem::temp_directory_path() / "mscl_ckpt_test";
  std::filesystem::create_directories(dir);
  const auto path = dir / "test.mscl";

  Rng rng(5);
  NamedTensors tensors;
  tensors.emplace("a/weight", random_tensor<float>({2, 3}, rng));
  tensors.emplace("a/bias", random_tensor<float>({3}, rng));
  tensors.emplace("z", random_tensor<float>({4, 1, 2}, rng));
  save_checkpoint(path, tensors);
  const NamedTensors loaded = load_checkpoint(path);
  REQUIRE(loaded.size() == tensors.size());
  for (const auto& [name, t] : tensors) {
    REQUIRE(loaded.count(name) == 1);
    CHECK(loaded.at(name) == t);
  }

  SUBCASE("bad magic reports offset") {
    std::ofstream bad(dir / "bad.mscl", std::ios::binary);
    bad << "NOPE1234";
    bad.close();
    CHECK_THROWS_AS(load_checkpoint(dir / "bad.mscl"), FormatError);
  }
  SUBCASE("unsupported version is rejected") {
    std::ofstream bad(dir / "ver.mscl", std::ios::binary);
    const char payload[] = {'M', 'S', 'C', 'L', 9, 0, 0, 0};
    bad.write(payload, sizeof(payload));
    bad.close();
    CHECK_THROWS_WITH_AS(load_checkpoint(dir / "ver.mscl"),
                         doctest::Contains("version"), FormatError);
  }
  SUBCASE("truncation is a format error, not a crash") {
    std::string bytes;
    {
      std::ifstream in(path, std::ios::binary);
      bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
    }
    std::ofstream bad(dir / "trunc.mscl", std::ios::binary);
    bad.write(bytes.data(), static_cast<std::streamsize>(bytes.size() / 2));
    bad.close();
    CHECK_THROWS_AS(load_checkpoint(dir / "trunc.mscl"), FormatError);
  }
}
