#include <doctest.h>

#include <cmath>
#include <numeric>

#include "mtclip/error.hpp"
#include "mtclip/ops.hpp"
#include "support/grad_suite.hpp"
#include "support/gradcheck.hpp"

using namespace mtclip;
using mtclip::testing::pick;
using mtclip::testing::gradcheck;
using mtclip::testing::random_tensor;
using mtclip::testing::weighted_sum;

namespace {

Tensor mat(std::size_t r, std::size_t c, std::vector<double> v, bool rg = false) {
  return Tensor::from_vector({r, c}, std::move(v), rg);
}

// Naive triple loop used as the matmul oracle.
std::vector<double> naive_matmul(const std::vector<double>& a, const std::vector<double>& b,
                                 std::size_t m, std::size_t k, std::size_t n) {
  std::vector<double> out(m * n, 0.0);
  for (std::size_t i = 0; i < m; ++i)
    for (std::size_t j = 0; j < n; ++j)
      for (std::size_t p = 0; p < k; ++p) out[i * n + j] += a[i * k + p] * b[p * n + j];
  return out;
}

constexpr int kTrials = 20;
constexpr double kGradTol = 1e-4;

}  // namespace

TEST_CASE("matmul examples") {
  auto a = mat(2, 2, {1, 2, 3, 4});
  auto id = mat(2, 2, {1, 0, 0, 1});
  auto r = ops::matmul(a, id);
  CHECK(std::vector<double>(r.data().begin(), r.data().end()) == std::vector<double>{1, 2, 3, 4});

  auto b = mat(2, 2, {5, 6, 7, 8});
  auto p = ops::matmul(a, b);
  const auto oracle = naive_matmul({1, 2, 3, 4}, {5, 6, 7, 8}, 2, 2, 2);
  CHECK(oracle == std::vector<double>{19, 22, 43, 50});
  CHECK(std::vector<double>(p.data().begin(), p.data().end()) == oracle);

  auto bad_a = Tensor::zeros({2, 3});
  auto bad_b = Tensor::zeros({4, 2});
  try {
    ops::matmul(bad_a, bad_b);
    FAIL("expected dimension error");
  } catch (const DimensionError& e) {
    const std::string msg = e.what();
    CHECK(msg.find("[2x3]") != std::string::npos);
    CHECK(msg.find("[4x2]") != std::string::npos);
  }
}

TEST_CASE("matmul agrees with the triple-loop oracle on random shapes") {
  std::mt19937_64 rng(5);
  for (int t = 0; t < 10; ++t) {
    const std::size_t m = pick(rng, 1, 7), k = pick(rng, 1, 7), n = pick(rng, 1, 7);
    auto a = random_tensor({m, k}, rng, -1, 1, false);
    auto b = random_tensor({k, n}, rng, -1, 1, false);
    auto oracle = naive_matmul({a.data().begin(), a.data().end()},
                               {b.data().begin(), b.data().end()}, m, k, n);
    auto got = ops::matmul(a, b);
    for (std::size_t i = 0; i < oracle.size(); ++i) CHECK(got.data()[i] == doctest::Approx(oracle[i]).epsilon(1e-12));
  }
}

TEST_CASE("conv2d examples") {
  SUBCASE("pointwise identity") {
    std::mt19937_64 rng(1);
    auto x = random_tensor({2, 3, 4, 5}, rng, 0, 1, false);
    std::vector<double> w(9, 0.0);
    for (int c = 0; c < 3; ++c) w[static_cast<std::size_t>(c * 3 + c)] = 1.0;
    auto k = Tensor::from_vector({3, 3, 1, 1}, w);
    auto b = Tensor::zeros({3});
    auto y = ops::conv2d(x, k, b, 1, 0);
    CHECK(y.shape() == x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(y.data()[i] == x.data()[i]);
  }
  SUBCASE("3x3 ones on constant input") {
    auto x = Tensor::full({1, 1, 5, 5}, 1.0);
    auto k = Tensor::full({1, 1, 3, 3}, 1.0);
    auto y = ops::conv2d(x, k, Tensor(), 1, 1);
    // Direct summation oracle: count in-bounds taps around each pixel.
    for (std::size_t r = 0; r < 5; ++r)
      for (std::size_t c = 0; c < 5; ++c) {
        int taps = 0;
        for (int dy = -1; dy <= 1; ++dy)
          for (int dx = -1; dx <= 1; ++dx) {
            const int yy = static_cast<int>(r) + dy, xx = static_cast<int>(c) + dx;
            taps += (yy >= 0 && yy < 5 && xx >= 0 && xx < 5);
          }
        CHECK(y.at({0, 0, r, c}) == taps);
      }
    CHECK(y.at({0, 0, 2, 2}) == 9);
    CHECK(y.at({0, 0, 0, 0}) == 4);
  }
  SUBCASE("stride 2 pointwise samples even coordinates") {
    std::vector<double> v(16);
    std::iota(v.begin(), v.end(), 0.0);
    auto x = Tensor::from_vector({1, 1, 4, 4}, v);
    auto y = ops::conv2d(x, Tensor::full({1, 1, 1, 1}, 1.0), Tensor(), 2, 0);
    REQUIRE(y.shape() == Shape{1, 1, 2, 2});
    CHECK(y.at({0, 0, 0, 0}) == 0);
    CHECK(y.at({0, 0, 0, 1}) == 2);
    CHECK(y.at({0, 0, 1, 0}) == 8);
    CHECK(y.at({0, 0, 1, 1}) == 10);
  }
  SUBCASE("channel mismatch") {
    CHECK_THROWS_AS(ops::conv2d(Tensor::zeros({1, 2, 4, 4}), Tensor::zeros({1, 3, 1, 1}), Tensor(), 1, 0),
                    DimensionError);
  }
}

TEST_CASE("adaptive_avg_pool2d examples") {
  std::vector<double> ramp(16);
  std::iota(ramp.begin(), ramp.end(), 0.0);
  auto x = Tensor::from_vector({1, 1, 4, 4}, ramp);
  auto same = ops::adaptive_avg_pool2d(x, 4, 4);
  for (std::size_t i = 0; i < 16; ++i) CHECK(same.data()[i] == x.data()[i]);

  auto global = ops::adaptive_avg_pool2d(x, 1, 1);
  CHECK(global.item() == doctest::Approx(7.5));

  auto half = ops::adaptive_avg_pool2d(x, 2, 2);
  for (std::size_t by = 0; by < 2; ++by)
    for (std::size_t bx = 0; bx < 2; ++bx) {
      double s = 0;
      for (std::size_t y = 0; y < 2; ++y)
        for (std::size_t xx = 0; xx < 2; ++xx) s += ramp[(by * 2 + y) * 4 + bx * 2 + xx];
      CHECK(half.at({0, 0, by, bx}) == doctest::Approx(s / 4.0));
    }
  CHECK_THROWS_AS(ops::adaptive_avg_pool2d(x, 0, 2), ArgumentError);
}

TEST_CASE("nearest_upsample examples") {
  auto x = Tensor::from_vector({1, 1, 2, 2}, {1, 2, 3, 4});
  auto same = ops::nearest_upsample(x, 2, 2);
  for (std::size_t i = 0; i < 4; ++i) CHECK(same.data()[i] == x.data()[i]);

  auto up = ops::nearest_upsample(x, 4, 4);
  for (std::size_t y = 0; y < 4; ++y)
    for (std::size_t c = 0; c < 4; ++c) CHECK(up.at({0, 0, y, c}) == x.at({0, 0, y / 2, c / 2}));

  auto odd = ops::nearest_upsample(x, 3, 3);
  // floor(y * 2 / 3) for y = 0, 1, 2 -> 0, 0, 1
  const std::size_t rows[3] = {0, 0, 1};
  for (std::size_t y = 0; y < 3; ++y)
    for (std::size_t c = 0; c < 3; ++c) CHECK(odd.at({0, 0, y, c}) == x.at({0, 0, rows[y], rows[c]}));
}

TEST_CASE("softmax examples and properties") {
  auto eq = ops::softmax(Tensor::from_vector({4}, {2, 2, 2, 2}), 0);
  for (double v : eq.data()) CHECK(v == doctest::Approx(0.25).epsilon(1e-15));

  auto two = ops::softmax(Tensor::from_vector({2}, {0.0, std::log(3.0)}), 0);
  CHECK(two.data()[0] == doctest::Approx(0.25).epsilon(1e-14));
  CHECK(two.data()[1] == doctest::Approx(0.75).epsilon(1e-14));

  std::mt19937_64 rng(3);
  auto x = random_tensor({3, 5, 4}, rng, -5, 5, false);
  for (std::size_t axis = 0; axis < 3; ++axis) {
    auto s = ops::softmax(x, axis);
    auto shifted = ops::softmax(ops::add_scalar(x, 123.25), axis);
    for (std::size_t i = 0; i < s.numel(); ++i) {
      CHECK(s.data()[i] > 0.0);
      CHECK(std::abs(s.data()[i] - shifted.data()[i]) < 1e-12);
    }
    auto sums = ops::sum_axis(s, axis);
    for (double v : sums.data()) CHECK(std::abs(v - 1.0) < 1e-9);
  }
}

TEST_CASE("backward examples") {
  auto x = Tensor::scalar(3.0, true);
  auto loss = ops::mul(x, x);
  loss.backward();
  CHECK(x.grad()[0] == 6.0);

  auto v = Tensor::from_vector({5}, {1, -2, 3, 0.5, 9}, true);
  ops::sum(v).backward();
  for (double g : v.grad()) CHECK(g == 1.0);

  // Repeated calls without reset accumulate.
  ops::sum(v).backward();
  for (double g : v.grad()) CHECK(g == 2.0);
  v.zero_grad();
  CHECK_FALSE(v.has_grad());

  CHECK_THROWS_AS(ops::scale(v, 2.0).backward(), ArgumentError);
}

TEST_CASE("gradient check: every differentiable primitive") {
  for (const auto& c : mtclip::testing::primitive_cases()) {
    const double err = mtclip::testing::worst_error(c, kTrials);
    INFO(c.name << " worst rel err " << err);
    CHECK(err < kGradTol);
  }
}

TEST_CASE("pooling preserves the global mean; upsample then pool restores the source") {
  std::mt19937_64 rng(11);
  for (int t = 0; t < 10; ++t) {
    const std::size_t h = pick(rng, 1, 6), w = pick(rng, 1, 6), f = pick(rng, 1, 4);
    auto x = random_tensor({2, 3, h, w}, rng, -1, 1, false);
    auto g = ops::adaptive_avg_pool2d(x, 1, 1);
    auto m = ops::mean_axis(ops::reshape(x, {2, 3, h * w}), 2);
    for (std::size_t i = 0; i < 6; ++i) CHECK(g.data()[i] == doctest::Approx(m.data()[i]).epsilon(1e-14));

    auto back = ops::adaptive_avg_pool2d(ops::nearest_upsample(x, h * f, w * f), h, w);
    for (std::size_t i = 0; i < x.numel(); ++i) CHECK(back.data()[i] == x.data()[i]);
  }
}

TEST_CASE("identical seeds give bit-identical outputs and gradients") {
  auto run = [] {
    std::mt19937_64 rng(99);
    auto x = random_tensor({2, 3, 6, 6}, rng);
    auto k = random_tensor({4, 3, 3, 3}, rng);
    auto y = ops::gelu(ops::conv2d(x, k, Tensor(), 1, 1));
    auto loss = ops::mean(ops::square(ops::softmax(y, 1)));
    loss.backward();
    std::vector<double> out{loss.item()};
    out.insert(out.end(), k.grad().begin(), k.grad().end());
    out.insert(out.end(), x.grad().begin(), x.grad().end());
    return out;
  };
  CHECK(run() == run());
}

TEST_CASE("no-grad results carry no graph") {
  auto w = Tensor::from_vector({2}, {1.0, 2.0}, true);
  Tensor y;
  {
    NoGradGuard guard;
    y = ops::mul(w, w);
  }
  CHECK_FALSE(y.requires_grad());
  auto z = ops::mul(w, w);
  CHECK(z.requires_grad());
}
