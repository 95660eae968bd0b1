#include <doctest.h>

#include <cmath>

#include "bindlab/error.hpp"
#include "bindlab/metrics.hpp"
#include "metrics_oracle.hpp"

using namespace bindlab;

namespace {

LogProbTable hand_table() {
  // Two contexts, two slots.
  LogProbTable t(2, 2);
  t(0, 0, 0) = -0.1, t(0, 0, 1) = -2.0;
  t(0, 1, 0) = -1.5, t(0, 1, 1) = -0.3;
  t(1, 0, 0) = -0.5, t(1, 0, 1) = -0.6;
  t(1, 1, 0) = -0.2, t(1, 1, 1) = -0.9;
  return t;
}

}  // namespace

TEST_CASE("mean_log_prob examples") {
  LogProbTable zero(3, 2);
  CHECK(mean_log_prob(zero).sigma == std::vector<double>{0.0, 0.0});
  LogProbTable one(1, 2);
  one(0, 0, 0) = -1.0;
  one(0, 1, 1) = -2.0;
  one(0, 0, 1) = -5.0;
  CHECK(mean_log_prob(one).sigma == std::vector<double>{-1.0, -2.0});
  CHECK_THROWS_AS(mean_log_prob(LogProbTable(0, 2)), EmptyPopulationError);
  CHECK_THROWS_AS(top1_accuracy(LogProbTable(0, 2)), EmptyPopulationError);
  CHECK_THROWS_AS(median_calibrated_accuracy(LogProbTable(0, 2)), EmptyPopulationError);
}

TEST_CASE("top1_accuracy examples") {
  LogProbTable perfect(4, 3);
  for (std::size_t i = 0; i < 4; ++i) {
    for (std::size_t k = 0; k < 3; ++k) {
      for (std::size_t l = 0; l < 3; ++l) perfect(i, k, l) = k == l ? -0.1 : -3.0;
    }
  }
  CHECK(top1_accuracy(perfect).sigma == std::vector<double>{1.0, 1.0, 1.0});
  const LogProbTable flat(5, 3);
  for (double s : top1_accuracy(flat).sigma) CHECK(s == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
  for (double s : median_calibrated_accuracy(flat).sigma) CHECK(s == doctest::Approx(1.0 / 3.0).epsilon(1e-15));
}

TEST_CASE("hand-worked calibration example") {
  // Column medians over (i, k): slot 0 {-0.1,-1.5,-0.5,-0.2} -> -0.35,
  // slot 1 {-2.0,-0.3,-0.6,-0.9} -> -0.75. Calibrated rows:
  //   i0 k0 ( 0.25,-1.25) right    i0 k1 (-1.15, 0.45) right
  //   i1 k0 (-0.15, 0.15) wrong    i1 k1 ( 0.15,-0.15) wrong
  const LogProbTable t = hand_table();
  const auto m = calibration_medians(t);
  CHECK(m[0] == doctest::Approx(-0.35).epsilon(1e-15));
  CHECK(m[1] == doctest::Approx(-0.75).epsilon(1e-15));
  CHECK(median_calibrated_accuracy(t).sigma == std::vector<double>{0.5, 0.5});
  CHECK(top1_accuracy(t).sigma == std::vector<double>{1.0, 0.5});
  const auto mlp = mean_log_prob(t).sigma;
  CHECK(mlp[0] == doctest::Approx(-0.3).epsilon(1e-15));
  CHECK(mlp[1] == doctest::Approx(-0.6).epsilon(1e-15));
}

TEST_CASE("calibration repairs a constant slot bias") {
  SeededRng rng(3);
  LogProbTable t(50, 2);
  for (std::size_t i = 0; i < 50; ++i) {
    for (std::size_t k = 0; k < 2; ++k) {
      for (std::size_t l = 0; l < 2; ++l) {
        double v = (k == l ? -1.0 : -3.0) - 0.5 * rng.uniform();
        if (l == 1) v += 3.0;  // slot 1 always favoured
        t(i, k, l) = v - 2.0;
      }
    }
  }
  CHECK(top1_accuracy(t).sigma[0] < 0.5);
  CHECK(median_calibrated_accuracy(t).sigma == std::vector<double>{1.0, 1.0});
}

TEST_CASE("property: statistics match brute force") {
  SeededRng rng(17);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + rng.uniform_index(3);
    const std::size_t N = 1 + rng.uniform_index(12);
    const LogProbTable t = oracle::random_table(rng, N, n, trial % 2 == 0 ? 4 : 0);
    CHECK(top1_accuracy(t).sigma == oracle::top1(t));
    CHECK(calibration_medians(t) == oracle::medians(t));
    CHECK(median_calibrated_accuracy(t).sigma == oracle::calibrated(t));
    const auto a = mean_log_prob(t).sigma;
    const auto b = oracle::mean_log_prob(t);
    for (std::size_t k = 0; k < n; ++k) CHECK(std::abs(a[k] - b[k]) <= 1e-12);
    for (double s : top1_accuracy(t).sigma) CHECK((s >= 0.0 && s <= 1.0));
    for (double s : a) CHECK(s <= 0.0);
  }
}

TEST_CASE("property: calibration-shift invariance on exact tables") {
  SeededRng rng(23);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + rng.uniform_index(3);
    const std::size_t N = 1 + rng.uniform_index(20);
    const LogProbTable t = oracle::random_table(rng, N, n, 8);
    LogProbTable biased = t;
    std::vector<double> beta(n);
    for (auto& b : beta) b = -static_cast<double>(rng.uniform_index(33)) / 8.0;
    for (std::size_t i = 0; i < N; ++i) {
      for (std::size_t k = 0; k < n; ++k) {
        for (std::size_t l = 0; l < n; ++l) biased(i, k, l) += beta[l];
      }
    }
    CHECK(median_calibrated_accuracy(biased).sigma == median_calibrated_accuracy(t).sigma);
  }
}

TEST_CASE("property: context order does not matter") {
  SeededRng rng(29);
  for (int trial = 0; trial < 200; ++trial) {
    const std::size_t n = 2 + rng.uniform_index(2);
    const std::size_t N = 2 + rng.uniform_index(10);
    const LogProbTable t = oracle::random_table(rng, N, n, 4);
    LogProbTable r(N, n);
    for (std::size_t i = 0; i < N; ++i) {
      for (std::size_t k = 0; k < n; ++k) {
        for (std::size_t l = 0; l < n; ++l) r(i, k, l) = t(N - 1 - i, k, l);
      }
    }
    CHECK(median_calibrated_accuracy(r).sigma == median_calibrated_accuracy(t).sigma);
    CHECK(top1_accuracy(r).sigma == top1_accuracy(t).sigma);
    const auto a = mean_log_prob(r).sigma, b = mean_log_prob(t).sigma;
    for (std::size_t k = 0; k < n; ++k) CHECK(std::abs(a[k] - b[k]) <= 1e-12);
  }
}

TEST_CASE("LogProbTable CSV") {
  SeededRng rng(31);
  const LogProbTable t = oracle::random_table(rng, 5, 3, 0);
  const LogProbTable back = LogProbTable::from_csv(t.to_csv());
  CHECK(back.raw() == t.raw());
  CHECK_THROWS_AS(LogProbTable::from_csv("a,b\n"), FormatError);
  CHECK_THROWS_AS(LogProbTable::from_csv("context_id,query_slot,attribute_slot,log_prob\n0,0,0,-1\n0,0,1,-1\n"),
                  FormatError);
  CHECK_THROWS_AS(LogProbTable::from_csv("context_id,query_slot,attribute_slot,log_prob\n0,0,0,0.5\n"), InputError);
}
