#include <cmath>
#include <stdexcept>
#include <vector>

#include "cimlite/rng.hpp"
#include "cimlite/tape.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace cimlite;
using oracles::max_abs_diff;

namespace {

Tensor randn(std::vector<int> shape, uint64_t seed, double sd = 1.0) {
  Rng rng(seed);
  return Tensor::randn(std::move(shape), rng, sd);
}

// keeps relu/hinge inputs away from their kinks so finite differences are clean
Tensor randn_away_from(std::vector<int> shape, uint64_t seed, double kink, double margin) {
  Tensor t = randn(std::move(shape), seed);
  for (auto& v : t.data)
    if (std::fabs(v - kink) < margin) v = kink + (v >= kink ? margin : -margin) * 2.0;
  return t;
}

}  // namespace

TEST_CASE("grouped 1x1 conv with identity weights reproduces the input") {
  const int c = 3;
  Tensor x = randn({2, c, 4, 4}, 42);
  Tensor w = Tensor::zeros({c, c, 1, 1});
  for (int i = 0; i < c; ++i) w.at(i, i, 0, 0) = 1.0;
  Tensor b = Tensor::zeros({c});

  Tape t;
  int out = t.conv2d_grouped(t.push(x), t.push(w), t.push(b), 1, 1, 0);
  CHECK(t.val(out).same_shape(x));
  CHECK(max_abs_diff(t.val(out), x) == 0.0);
}

TEST_CASE("grouped 3x3 all-ones filter sums its receptive field") {
  Tensor x = Tensor::full({1, 2, 3, 3}, 1.0);
  Tensor w = Tensor::full({2, 1, 3, 3}, 1.0);
  Tensor b = Tensor::zeros({2});

  Tape t;
  int out = t.conv2d_grouped(t.push(x), t.push(w), t.push(b), 2, 1, 0);
  REQUIRE(t.val(out).shape == std::vector<int>{1, 2, 1, 1});
  CHECK(t.val(out).at(0, 0, 0, 0) == 9.0);
  CHECK(t.val(out).at(0, 1, 0, 0) == 9.0);
}

TEST_CASE("grouped conv matches the naive direct-convolution oracle") {
  struct Case {
    int n, c, h, w, cout, k, groups, pad;
  };
  const Case cases[] = {
      {1, 4, 5, 5, 4, 3, 2, 1},  // the reference case
      {2, 6, 5, 7, 9, 3, 3, 1},
      {1, 8, 6, 6, 8, 3, 8, 1},
      {3, 4, 4, 4, 5, 1, 1, 0},
      {1, 2, 3, 3, 2, 3, 2, 0},
      {2, 12, 8, 8, 24, 1, 12, 0},
  };
  uint64_t seed = 100;
  for (const auto& cs : cases) {
    CAPTURE(cs.c);
    CAPTURE(cs.groups);
    Tensor x = randn({cs.n, cs.c, cs.h, cs.w}, seed++);
    Tensor w = randn({cs.cout, cs.c / cs.groups, cs.k, cs.k}, seed++);
    Tensor b = randn({cs.cout}, seed++);
    Tape t;
    int out = t.conv2d_grouped(t.push(x), t.push(w), t.push(b), cs.groups, 1, cs.pad);
    Tensor ref = oracles::naive_conv2d(x, w, b, cs.groups, cs.pad);
    REQUIRE(t.val(out).same_shape(ref));
    CHECK(max_abs_diff(t.val(out), ref) < 1e-10);
  }
}

TEST_CASE("depthwise conv: delta kernel is the identity") {
  Tensor x = randn({2, 3, 5, 5}, 7);
  Tensor w = Tensor::zeros({3, 1, 3, 3});
  for (int c = 0; c < 3; ++c) w.at(c, 0, 1, 1) = 1.0;
  Tensor b = Tensor::zeros({3});

  Tape t;
  int out = t.depthwise_conv2d(t.push(x), t.push(w), t.push(b), 1);
  CHECK(max_abs_diff(t.val(out), x) == 0.0);
}

TEST_CASE("depthwise conv: all-ones kernel on constant input gives 9c in the interior") {
  const double c = 2.5;
  Tensor x = Tensor::full({1, 2, 5, 5}, c);
  Tensor w = Tensor::full({2, 1, 3, 3}, 1.0);
  Tensor b = Tensor::zeros({2});

  Tape t;
  int out = t.depthwise_conv2d(t.push(x), t.push(w), t.push(b), 1);
  for (int ch = 0; ch < 2; ++ch)
    for (int y = 1; y < 4; ++y)
      for (int xo = 1; xo < 4; ++xo)
        CHECK(t.val(out).at(0, ch, y, xo) == doctest::Approx(9.0 * c).epsilon(1e-12));
}

TEST_CASE("depthwise conv is bitwise identical to the grouped path") {
  Tensor x = randn({2, 3, 6, 6}, 11);
  Tensor w = randn({3, 1, 3, 3}, 12);
  Tensor b = randn({3}, 13);

  Tape t1, t2;
  int o1 = t1.depthwise_conv2d(t1.push(x), t1.push(w), t1.push(b), 1);
  int o2 = t2.conv2d_grouped(t2.push(x), t2.push(w), t2.push(b), 3, 1, 1);
  REQUIRE(t1.val(o1).same_shape(t2.val(o2)));
  for (size_t i = 0; i < t1.val(o1).data.size(); ++i)
    CHECK(t1.val(o1).data[i] == t2.val(o2).data[i]);
}

TEST_CASE("batchnorm eval mode with unit stats is the identity") {
  Tensor x = randn({2, 3, 4, 4}, 21);
  BnStats stats = BnStats::make(3);
  Tape t;
  int out = t.batchnorm2d(t.push(x), t.push(Tensor::full({3}, 1.0)),
                          t.push(Tensor::zeros({3})), &stats, Mode::eval, 1e-12);
  CHECK(max_abs_diff(t.val(out), x) < 1e-10);
}

TEST_CASE("batchnorm train mode on constant input returns beta") {
  Tensor x = Tensor::full({2, 2, 3, 3}, 7.25);
  BnStats stats = BnStats::make(2);
  Tape t;
  int out = t.batchnorm2d(t.push(x), t.push(Tensor::full({2}, 1.0)),
                          t.push(Tensor::full({2}, 5.0)), &stats, Mode::train);
  for (double v : t.val(out).data) CHECK(v == doctest::Approx(5.0).epsilon(1e-12));
}

TEST_CASE("batchnorm train mode matches the scalar-loop oracle and updates stats") {
  Tensor x = randn({3, 4, 2, 5}, 31);
  Tensor gamma = randn({4}, 32);
  Tensor beta = randn({4}, 33);
  const double eps = 1e-5, momentum = 0.1;

  BnStats stats = BnStats::make(4);
  Tape t;
  int out = t.batchnorm2d(t.push(x), t.push(gamma), t.push(beta), &stats, Mode::train, eps,
                          momentum);
  auto ref = oracles::naive_batchnorm_train(x, gamma, beta, eps);
  CHECK(max_abs_diff(t.val(out), ref.out) < 1e-12);
  for (int c = 0; c < 4; ++c) {
    CHECK(stats.mean.at(c) ==
          doctest::Approx(momentum * ref.mean[static_cast<size_t>(c)]).epsilon(1e-12));
    CHECK(stats.var.at(c) ==
          doctest::Approx((1.0 - momentum) * 1.0 + momentum * ref.var[static_cast<size_t>(c)])
              .epsilon(1e-12));
  }
}

TEST_CASE("batchnorm output channel depends only on its own input channel") {
  Tensor x = randn({2, 3, 4, 4}, 41);
  Tensor x2 = x;
  for (int n = 0; n < 2; ++n)
    for (int y = 0; y < 4; ++y)
      for (int xo = 0; xo < 4; ++xo) x2.at(n, 2, y, xo) += 3.0;

  auto run = [](const Tensor& in) {
    BnStats stats = BnStats::make(3);
    Tape t;
    int out = t.batchnorm2d(t.push(in), t.push(Tensor::full({3}, 1.0)),
                            t.push(Tensor::zeros({3})), &stats, Mode::train);
    return t.val(out);
  };
  Tensor a = run(x), b = run(x2);
  for (int n = 0; n < 2; ++n)
    for (int c = 0; c < 2; ++c)
      for (int y = 0; y < 4; ++y)
        for (int xo = 0; xo < 4; ++xo) CHECK(a.at(n, c, y, xo) == b.at(n, c, y, xo));
}

TEST_CASE("pointwise and pooling trivial cases") {
  Tape t;
  SUBCASE("global average pool of a constant channel") {
    int out = t.global_avg_pool(t.push(Tensor::full({2, 3, 4, 5}, 2.5)));
    REQUIRE(t.val(out).shape == std::vector<int>{2, 3});
    for (double v : t.val(out).data) CHECK(v == doctest::Approx(2.5).epsilon(1e-15));
  }
  SUBCASE("linear with identity weight and zero bias") {
    Tensor x = randn({3, 4}, 51);
    Tensor w = Tensor::zeros({4, 4});
    for (int i = 0; i < 4; ++i) w.at(i, i) = 1.0;
    int out = t.linear(t.push(x), t.push(w), t.push(Tensor::zeros({4})));
    CHECK(max_abs_diff(t.val(out), x) == 0.0);
  }
  SUBCASE("sigmoid at zero") {
    int out = t.sigmoid(t.push(Tensor::zeros({3})));
    for (double v : t.val(out).data) CHECK(v == 0.5);
  }
  SUBCASE("relu clamps negatives only") {
    int out = t.relu(t.push(Tensor::from({4}, {-1.0, 0.0, 0.5, 2.0})));
    CHECK(t.val(out).data == std::vector<double>{0.0, 0.0, 0.5, 2.0});
  }
}

TEST_CASE("grouped locality: other groups' inputs never reach a group's output") {
  const int groups = 3, c = 6;
  Tensor x = randn({2, c, 5, 5}, 61);
  Tensor w = randn({9, c / groups, 3, 3}, 62);
  Tensor b = randn({9}, 63);

  for (int gi = 0; gi < groups; ++gi) {
    Tensor masked = x;
    for (int n = 0; n < 2; ++n)
      for (int ch = 0; ch < c; ++ch) {
        if (ch / (c / groups) == gi) continue;
        for (int y = 0; y < 5; ++y)
          for (int xo = 0; xo < 5; ++xo) masked.at(n, ch, y, xo) = 0.0;
      }
    Tape t1, t2;
    int full = t1.conv2d_grouped(t1.push(x), t1.push(w), t1.push(b), groups, 1, 1);
    int part = t2.conv2d_grouped(t2.push(masked), t2.push(w), t2.push(b), groups, 1, 1);
    for (int n = 0; n < 2; ++n)
      for (int oc = gi * 3; oc < (gi + 1) * 3; ++oc)
        for (int y = 0; y < 5; ++y)
          for (int xo = 0; xo < 5; ++xo)
            CHECK(t1.val(full).at(n, oc, y, xo) == t2.val(part).at(n, oc, y, xo));
  }
}

TEST_CASE("gradient check: sum is exact, relu is clean away from zero") {
  Tensor x = Tensor::from({4}, {0.5, -0.25, 1.0, 2.0});
  double err = grad_check([](Tape& t, int id) { return t.sum_all(id); }, x, 0x1.0p-17);
  CHECK(err == 0.0);

  Tensor y = randn_away_from({3, 5}, 71, 0.0, 0.05);
  err = grad_check([](Tape& t, int id) { return t.sum_all(t.relu(id)); }, y);
  CHECK(err < 1e-7);
}

TEST_CASE("every primitive passes gradient checks across seeds") {
  const double tol = 1e-4;
  const int seeds = 20;

  SUBCASE("conv2d_grouped") {
    for (int s = 0; s < seeds; ++s) {
      std::vector<Tensor> pts = {randn({2, 4, 4, 4}, 1000 + s), randn({6, 2, 3, 3}, 2000 + s),
                                 randn({6}, 3000 + s)};
      double err = grad_check_many(
          [](Tape& t, const std::vector<int>& ids) {
            return t.sum_all(t.sigmoid(t.conv2d_grouped(ids[0], ids[1], ids[2], 2, 1, 1)));
          },
          pts);
      CAPTURE(s);
      CHECK(err < tol);
    }
  }
  SUBCASE("depthwise_conv2d") {
    for (int s = 0; s < seeds; ++s) {
      std::vector<Tensor> pts = {randn({1, 3, 4, 4}, 1100 + s), randn({3, 1, 3, 3}, 2100 + s),
                                 randn({3}, 3100 + s)};
      double err = grad_check_many(
          [](Tape& t, const std::vector<int>& ids) {
            return t.sum_all(t.sigmoid(t.depthwise_conv2d(ids[0], ids[1], ids[2], 1)));
          },
          pts);
      CHECK(err < tol);
    }
  }
  SUBCASE("batchnorm train") {
    for (int s = 0; s < seeds; ++s) {
      std::vector<Tensor> pts = {randn({3, 2, 3, 3}, 1200 + s), randn({2}, 2200 + s),
                                 randn({2}, 3200 + s)};
      double err = grad_check_many(
          [](Tape& t, const std::vector<int>& ids) {
            BnStats stats = BnStats::make(2);
            return t.sum_all(
                t.sigmoid(t.batchnorm2d(ids[0], ids[1], ids[2], &stats, Mode::train)));
          },
          pts);
      CHECK(err < tol);
    }
  }
  SUBCASE("batchnorm eval") {
    for (int s = 0; s < seeds; ++s) {
      std::vector<Tensor> pts = {randn({2, 2, 3, 3}, 1300 + s), randn({2}, 2300 + s),
                                 randn({2}, 3300 + s)};
      double err = grad_check_many(
          [](Tape& t, const std::vector<int>& ids) {
            BnStats stats = BnStats::make(2);
            stats.mean.at(0) = 0.3;
            stats.var.at(1) = 2.0;
            return t.sum_all(
                t.sigmoid(t.batchnorm2d(ids[0], ids[1], ids[2], &stats, Mode::eval)));
          },
          pts);
      CHECK(err < tol);
    }
  }
  SUBCASE("relu") {
    for (int s = 0; s < seeds; ++s) {
      double err = grad_check(
          [](Tape& t, int id) { return t.sum_all(t.sigmoid(t.relu(id))); },
          randn_away_from({4, 5}, 1400 + s, 0.0, 0.05));
      CHECK(err < tol);
    }
  }
  SUBCASE("sigmoid") {
    for (int s = 0; s < seeds; ++s) {
      double err = grad_check([](Tape& t, int id) { return t.sum_all(t.sigmoid(id)); },
                              randn({4, 5}, 1500 + s));
      CHECK(err < tol);
    }
  }
  SUBCASE("global_avg_pool") {
    for (int s = 0; s < seeds; ++s) {
      double err = grad_check(
          [](Tape& t, int id) { return t.sum_all(t.sigmoid(t.global_avg_pool(id))); },
          randn({2, 3, 4, 4}, 1600 + s));
      CHECK(err < tol);
    }
  }
  SUBCASE("linear") {
    for (int s = 0; s < seeds; ++s) {
      std::vector<Tensor> pts = {randn({3, 4}, 1700 + s), randn({5, 4}, 2700 + s),
                                 randn({5}, 3700 + s)};
      double err = grad_check_many(
          [](Tape& t, const std::vector<int>& ids) {
            return t.sum_all(t.sigmoid(t.linear(ids[0], ids[1], ids[2])));
          },
          pts);
      CHECK(err < tol);
    }
  }
  SUBCASE("add and scale") {
    for (int s = 0; s < seeds; ++s) {
      std::vector<Tensor> pts = {randn({3, 4}, 1800 + s), randn({3, 4}, 2800 + s)};
      double err = grad_check_many(
          [](Tape& t, const std::vector<int>& ids) {
            return t.sum_all(t.sigmoid(t.scale(t.add(ids[0], ids[1]), 0.7)));
          },
          pts);
      CHECK(err < tol);
    }
  }
  SUBCASE("scale_channels") {
    for (int s = 0; s < seeds; ++s) {
      std::vector<Tensor> pts = {randn({2, 3, 3, 3}, 1900 + s), randn({2, 3}, 2900 + s)};
      double err = grad_check_many(
          [](Tape& t, const std::vector<int>& ids) {
            return t.sum_all(t.sigmoid(t.scale_channels(ids[0], ids[1])));
          },
          pts);
      CHECK(err < tol);
    }
  }
  SUBCASE("reshape") {
    for (int s = 0; s < seeds; ++s) {
      double err = grad_check(
          [](Tape& t, int id) { return t.sum_all(t.sigmoid(t.reshape(id, {2, 8}))); },
          randn({4, 4}, 2050 + s));
      CHECK(err < tol);
    }
  }
  SUBCASE("slice_rows") {
    for (int s = 0; s < seeds; ++s) {
      double err = grad_check(
          [](Tape& t, int id) { return t.sum_all(t.sigmoid(t.slice_rows(id, 1, 3))); },
          randn({4, 3}, 2080 + s));
      CHECK(err < tol);
    }
  }
  SUBCASE("l2_normalize_rows") {
    for (int s = 0; s < seeds; ++s) {
      Tensor x = randn({3, 4}, 2150 + s);
      for (int i = 0; i < 3; ++i) {
        double nrm = 0.0;
        for (int j = 0; j < 4; ++j) nrm += x.at(i, j) * x.at(i, j);
        if (std::sqrt(nrm) < 0.5)
          for (int j = 0; j < 4; ++j) x.at(i, j) += 1.0;
      }
      double err = grad_check(
          [](Tape& t, int id) { return t.sum_all(t.sigmoid(t.l2_normalize_rows(id))); }, x);
      CHECK(err < tol);
    }
  }
  SUBCASE("matmul_nt, including the self-similarity case") {
    for (int s = 0; s < seeds; ++s) {
      std::vector<Tensor> pts = {randn({3, 4}, 2250 + s), randn({5, 4}, 3250 + s)};
      double err = grad_check_many(
          [](Tape& t, const std::vector<int>& ids) {
            return t.sum_all(t.sigmoid(t.matmul_nt(ids[0], ids[1])));
          },
          pts);
      CHECK(err < tol);
      double err_self = grad_check(
          [](Tape& t, int id) { return t.sum_all(t.sigmoid(t.matmul_nt(id, id))); },
          randn({3, 4}, 4250 + s));
      CHECK(err_self < tol);
    }
  }
  SUBCASE("ntxent_from_sims") {
    for (int s = 0; s < seeds; ++s) {
      double err = grad_check([](Tape& t, int id) { return t.ntxent_from_sims(id); },
                              randn({6, 6}, 2350 + s));
      CHECK(err < tol);
    }
  }
  SUBCASE("vicreg") {
    for (int s = 0; s < seeds; ++s) {
      auto guard_stds = [](Tensor z) {
        const int b = z.dim(0), d = z.dim(1);
        for (int j = 0; j < d; ++j) {
          double mu = 0.0;
          for (int i = 0; i < b; ++i) mu += z.at(i, j);
          mu /= b;
          double v = 0.0;
          for (int i = 0; i < b; ++i) v += (z.at(i, j) - mu) * (z.at(i, j) - mu);
          v /= (b - 1);
          if (std::fabs(std::sqrt(v + 1e-4) - 1.0) < 0.1)
            for (int i = 0; i < b; ++i) z.at(i, j) = mu + (z.at(i, j) - mu) * 0.7;
        }
        return z;
      };
      std::vector<Tensor> pts = {guard_stds(randn({4, 3}, 2450 + s)),
                                 guard_stds(randn({4, 3}, 3450 + s))};
      double err = grad_check_many(
          [](Tape& t, const std::vector<int>& ids) {
            return t.vicreg_node(ids[0], ids[1], 25.0, 25.0, 1.0);
          },
          pts);
      CHECK(err < tol);
    }
  }
  SUBCASE("weighted cross-entropy") {
    for (int s = 0; s < seeds; ++s) {
      std::vector<int> labels = {0, 2, 1, 2};
      Tensor weights = Tensor::from({3}, {0.5, 1.0, 1.5});
      double err = grad_check(
          [&](Tape& t, int id) { return t.wce_node(id, labels, weights); },
          randn({4, 3}, 2550 + s));
      CHECK(err < tol);
    }
  }
}

TEST_CASE("backward through a residual-style reuse accumulates both paths") {
  // y = sum(x + relu(x)) at strictly positive x: gradient must be exactly 2
  Tensor x = Tensor::from({3}, {0.5, 1.0, 2.0});
  Tape t;
  int id = t.push(x);
  int loss = t.sum_all(t.add(id, t.relu(id)));
  t.backward(loss);
  for (double g : t.grad(id).data) CHECK(g == 2.0);
}

TEST_CASE("invalid configurations are rejected") {
  Tape t;
  Tensor x = randn({1, 4, 5, 5}, 81);
  CHECK_THROWS_AS(
      t.conv2d_grouped(t.push(x), t.push(randn({4, 2, 3, 3}, 82)),
                       t.push(Tensor::zeros({4})), 3, 1, 1),
      std::invalid_argument);
  CHECK_THROWS_AS(
      t.conv2d_grouped(t.push(x), t.push(randn({4, 4, 3, 3}, 83)),
                       t.push(Tensor::zeros({4})), 2, 1, 1),
      std::invalid_argument);
  CHECK_THROWS_AS(
      t.conv2d_grouped(t.push(x), t.push(randn({4, 4, 3, 3}, 83)),
                       t.push(Tensor::zeros({4})), 1, 1, 2),
      std::invalid_argument);

  BnStats stats = BnStats::make(4);
  CHECK_THROWS_AS(t.batchnorm2d(t.push(x), t.push(Tensor::full({4}, 1.0)),
                                t.push(Tensor::zeros({4})), &stats, Mode::train, 0.0),
                  std::invalid_argument);

  CHECK_THROWS_AS(t.linear(t.push(randn({2, 3}, 84)), t.push(randn({4, 5}, 85)),
                           t.push(Tensor::zeros({4}))),
                  std::invalid_argument);

  CHECK_THROWS(t.l2_normalize_rows(t.push(Tensor::zeros({2, 3}))));

  CHECK_THROWS_AS(t.vicreg_node(t.push(randn({1, 3}, 86)), t.push(randn({1, 3}, 87)), 25.0,
                                25.0, 1.0),
                  std::invalid_argument);

  CHECK_THROWS_AS(t.wce_node(t.push(randn({2, 3}, 88)), {0, 5}, Tensor::full({3}, 1.0)),
                  std::invalid_argument);

  CHECK_THROWS_AS(t.backward(t.push(randn({2, 2}, 89))), std::invalid_argument);
}

TEST_CASE("forward passes are bit-reproducible") {
  auto run = []() {
    Tensor x = randn({2, 4, 6, 6}, 91);
    Tensor w = randn({8, 2, 3, 3}, 92);
    Tensor b = randn({8}, 93);
    Tape t;
    BnStats stats = BnStats::make(8);
    int conv = t.conv2d_grouped(t.push(x), t.push(w), t.push(b), 2, 1, 1);
    int bn = t.batchnorm2d(conv, t.push(Tensor::full({8}, 1.0)), t.push(Tensor::zeros({8})),
                           &stats, Mode::train);
    int out = t.global_avg_pool(t.relu(bn));
    return t.val(out);
  };
  Tensor a = run(), b = run();
  for (size_t i = 0; i < a.data.size(); ++i) CHECK(a.data[i] == b.data[i]);
}
