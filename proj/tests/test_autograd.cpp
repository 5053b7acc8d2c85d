#include <cmath>
#include <functional>

#include "doctest.h"
#include "support.hpp"
#include "tsn/autograd.hpp"

using namespace tsn;
using test::random_tensor;

namespace {

using Op = std::function<ag::Var(ag::Tape*, const std::vector<ag::Var>&)>;

double weighted_sum(const Tensor& y, const Tensor& w) {
  double s = 0.0;
  for (std::size_t i = 0; i < y.size(); ++i) s += y[i] * w[i];
  return s;
}

// Central differences of <op(inputs), w> against the taped gradient for every
// input element (or up to `max_probe` evenly spaced ones).
double grad_check(const Op& op, std::vector<Tensor> inputs, std::uint64_t seed, std::size_t max_probe = 400) {
  RandomState rng(seed);
  std::vector<ag::Var> vars;
  for (auto& t : inputs) vars.push_back(ag::parameter(t));
  ag::Tape tape;
  const ag::Var y = op(&tape, vars);
  const Tensor w = random_tensor(y->value.shape(), rng);
  tape.backward(y, w);

  const double h = 1e-6;
  double worst = 0.0;
  for (std::size_t k = 0; k < inputs.size(); ++k) {
    REQUIRE(!vars[k]->grad.empty());
    const std::size_t n = inputs[k].size();
    const std::size_t stride = std::max<std::size_t>(1, n / max_probe);
    for (std::size_t i = 0; i < n; i += stride) {
      auto eval = [&](double delta) {
        std::vector<ag::Var> probe;
        for (std::size_t j = 0; j < inputs.size(); ++j) {
          Tensor t = inputs[j];
          if (j == k) t[i] += delta;
          probe.push_back(ag::constant(std::move(t)));
        }
        return weighted_sum(op(nullptr, probe)->value, w);
      };
      const double numeric = (eval(h) - eval(-h)) / (2 * h);
      const double analytic = vars[k]->grad[i];
      const double err = std::abs(numeric - analytic) / std::max({std::abs(numeric), std::abs(analytic), 1e-3});
      worst = std::max(worst, err);
    }
  }
  return worst;
}

constexpr double kTol = 1e-6;

}  // namespace

TEST_CASE("conv2d gradients") {
  RandomState rng(1);
  const Op op = [](ag::Tape* t, const std::vector<ag::Var>& v) { return ag::conv2d(t, v[0], v[1], v[2]); };
  CHECK(grad_check(op, {random_tensor({2, 3, 6, 5}, rng), random_tensor({4, 3, 3, 3}, rng),
                        random_tensor({1, 4, 1, 1}, rng)},
                   11) < kTol);
  CHECK(grad_check(op, {random_tensor({1, 2, 4, 4}, rng), random_tensor({3, 2, 1, 1}, rng),
                        random_tensor({1, 3, 1, 1}, rng)},
                   12) < kTol);
}

TEST_CASE("pointwise nonlinearity gradients") {
  RandomState rng(2);
  // Keep relu inputs away from the kink.
  Tensor x = random_tensor({2, 2, 4, 4}, rng);
  for (auto& v : x.vec()) v += v >= 0 ? 0.1 : -0.1;
  CHECK(grad_check([](ag::Tape* t, const std::vector<ag::Var>& v) { return ag::relu(t, v[0]); }, {x}, 21) < kTol);
  CHECK(grad_check([](ag::Tape* t, const std::vector<ag::Var>& v) { return ag::sigmoid(t, v[0]); },
                   {random_tensor({2, 2, 4, 4}, rng, -4, 4)}, 22) < kTol);
  CHECK(grad_check([](ag::Tape* t, const std::vector<ag::Var>& v) { return ag::scale(t, v[0], -2.5); },
                   {random_tensor({1, 1, 3, 3}, rng)}, 23) < kTol);
}

TEST_CASE("pooling and resampling gradients") {
  RandomState rng(3);
  CHECK(grad_check([](ag::Tape* t, const std::vector<ag::Var>& v) { return ag::maxpool2(t, v[0]); },
                   {random_tensor({2, 2, 6, 8}, rng)}, 31) < kTol);
  CHECK(grad_check([](ag::Tape* t, const std::vector<ag::Var>& v) { return ag::avgpool(t, v[0], 2); },
                   {random_tensor({2, 2, 6, 8}, rng)}, 32) < kTol);
  CHECK(grad_check([](ag::Tape* t, const std::vector<ag::Var>& v) { return ag::resize_bilinear(t, v[0], 8, 10); },
                   {random_tensor({2, 3, 4, 5}, rng)}, 33) < kTol);
  CHECK(grad_check([](ag::Tape* t, const std::vector<ag::Var>& v) { return ag::global_avgpool(t, v[0]); },
                   {random_tensor({2, 3, 4, 5}, rng)}, 34) < kTol);
}

TEST_CASE("structural op gradients") {
  RandomState rng(4);
  CHECK(grad_check([](ag::Tape* t, const std::vector<ag::Var>& v) { return ag::add(t, v[0], v[1]); },
                   {random_tensor({2, 2, 3, 3}, rng), random_tensor({2, 2, 3, 3}, rng)}, 41) < kTol);
  CHECK(grad_check([](ag::Tape* t, const std::vector<ag::Var>& v) { return ag::concat_channels(t, v[0], v[1]); },
                   {random_tensor({2, 2, 3, 3}, rng), random_tensor({2, 3, 3, 3}, rng)}, 42) < kTol);
  CHECK(grad_check(
            [](ag::Tape* t, const std::vector<ag::Var>& v) {
              return ag::scale(t, ag::reshape(t, v[0], {2, 1, 3, 6}), 1.5);
            },
            {random_tensor({2, 2, 3, 3}, rng)}, 43) < kTol);
  CHECK(grad_check([](ag::Tape* t, const std::vector<ag::Var>& v) { return ag::channel_scale(t, v[0], v[1]); },
                   {random_tensor({2, 3, 3, 4}, rng), random_tensor({2, 3, 1, 1}, rng)}, 44) < kTol);
}

TEST_CASE("matrix product and softmax gradients") {
  RandomState rng(5);
  CHECK(grad_check([](ag::Tape* t, const std::vector<ag::Var>& v) { return ag::matmul(t, v[0], v[1]); },
                   {random_tensor({2, 1, 3, 4}, rng), random_tensor({2, 1, 4, 5}, rng)}, 51) < kTol);
  // Shared right operand (batch 1) accumulates over the batch.
  CHECK(grad_check([](ag::Tape* t, const std::vector<ag::Var>& v) { return ag::matmul(t, v[0], v[1]); },
                   {random_tensor({3, 1, 3, 4}, rng), random_tensor({1, 1, 4, 4}, rng)}, 52) < kTol);
  CHECK(grad_check([](ag::Tape* t, const std::vector<ag::Var>& v) { return ag::matmul_nt(t, v[0], v[1]); },
                   {random_tensor({2, 1, 3, 4}, rng), random_tensor({2, 1, 5, 4}, rng)}, 53) < kTol);
  CHECK(grad_check([](ag::Tape* t, const std::vector<ag::Var>& v) { return ag::softmax_rows(t, v[0]); },
                   {random_tensor({2, 1, 3, 6}, rng, -3, 3)}, 54) < kTol);
}

TEST_CASE("softmax rows sum to one and survive large logits") {
  Tensor x({1, 1, 2, 3}, std::vector<double>{1000, 1001, 1002, -5, 0, 5});
  const auto y = ag::softmax_rows(nullptr, ag::constant(x));
  for (int r = 0; r < 2; ++r) {
    double s = 0;
    for (int c = 0; c < 3; ++c) s += y->value.at(0, 0, r, c);
    CHECK(s == doctest::Approx(1.0).epsilon(1e-15));
  }
  CHECK(y->value.all_finite());
}

TEST_CASE("normalization gradients") {
  RandomState rng(6);
  CHECK(grad_check(
            [](ag::Tape* t, const std::vector<ag::Var>& v) {
              Tensor mean({1, 3, 1, 1}), var({1, 3, 1, 1}, 1.0);
              return ag::batch_norm(t, v[0], v[1], v[2], {&mean, &var}, true);
            },
            {random_tensor({3, 3, 4, 4}, rng), random_tensor({1, 3, 1, 1}, rng), random_tensor({1, 3, 1, 1}, rng)},
            61) < 1e-5);
  CHECK(grad_check(
            [](ag::Tape* t, const std::vector<ag::Var>& v) {
              return ag::group_norm(t, v[0], v[1], v[2], 2);
            },
            {random_tensor({2, 4, 3, 3}, rng), random_tensor({1, 4, 1, 1}, rng), random_tensor({1, 4, 1, 1}, rng)},
            62) < 1e-5);
  CHECK(grad_check(
            [](ag::Tape* t, const std::vector<ag::Var>& v) {
              Tensor mean({1, 2, 1, 1}, 0.3), var({1, 2, 1, 1}, 2.0);
              return ag::batch_norm(t, v[0], v[1], v[2], {&mean, &var}, false);
            },
            {random_tensor({2, 2, 3, 3}, rng), random_tensor({1, 2, 1, 1}, rng), random_tensor({1, 2, 1, 1}, rng)},
            63) < kTol);
}

TEST_CASE("batch norm updates running statistics only in training mode") {
  RandomState rng(7);
  const Tensor x = random_tensor({4, 2, 3, 3}, rng, 1.0, 3.0);
  Tensor mean({1, 2, 1, 1}), var({1, 2, 1, 1}, 1.0);
  const auto gamma = ag::constant(Tensor({1, 2, 1, 1}, 1.0));
  const auto beta = ag::constant(Tensor({1, 2, 1, 1}));
  ag::batch_norm(nullptr, ag::constant(x), gamma, beta, {&mean, &var}, false);
  CHECK(mean[0] == 0.0);
  CHECK(var[0] == 1.0);

  const auto y = ag::batch_norm(nullptr, ag::constant(x), gamma, beta, {&mean, &var}, true);
  // Batch mean of channel 0, then momentum 0.1 from zero.
  double m0 = 0.0;
  for (int n = 0; n < 4; ++n)
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) m0 += x.at(n, 0, i, j);
  m0 /= 36.0;
  CHECK(mean[0] == doctest::Approx(0.1 * m0).epsilon(1e-12));
  // Training-mode output is standardized per channel.
  double s = 0.0, ss = 0.0;
  for (int n = 0; n < 4; ++n)
    for (int i = 0; i < 3; ++i)
      for (int j = 0; j < 3; ++j) {
        s += y->value.at(n, 1, i, j);
        ss += y->value.at(n, 1, i, j) * y->value.at(n, 1, i, j);
      }
  CHECK(s / 36.0 == doctest::Approx(0.0).scale(1.0).epsilon(1e-12));
  CHECK(ss / 36.0 == doctest::Approx(1.0).epsilon(1e-3));
}

TEST_CASE("gradients accumulate across uses of the same variable") {
  const auto x = ag::parameter(Tensor({1, 1, 1, 2}, std::vector<double>{2.0, -1.0}));
  ag::Tape tape;
  const auto y = ag::add(&tape, ag::scale(&tape, x, 3.0), x);
  tape.backward(y, Tensor({1, 1, 1, 2}, 1.0));
  CHECK(x->grad[0] == 4.0);
  CHECK(x->grad[1] == 4.0);
}

TEST_CASE("constants receive no gradient and untaped ops record nothing") {
  const auto c = ag::constant(Tensor({1, 1, 2, 2}, 1.0));
  ag::Tape tape;
  const auto y = ag::scale(&tape, c, 2.0);
  CHECK(tape.size() == 0);
  CHECK(y->value[0] == 2.0);
}

TEST_CASE("shape errors are reported") {
  RandomState rng(8);
  const auto a = ag::constant(random_tensor({1, 2, 3, 3}, rng));
  const auto b = ag::constant(random_tensor({1, 2, 4, 4}, rng));
  CHECK_THROWS_AS(ag::add(nullptr, a, b), DimensionError);
  CHECK_THROWS_AS(ag::concat_channels(nullptr, a, b), DimensionError);
  CHECK_THROWS_AS(ag::reshape(nullptr, a, {1, 1, 5, 4}), DimensionError);
}
