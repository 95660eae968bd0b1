#pragma once

// Brute-force reimplementations of the three statistics, written without the
// library's helpers. Shared by the unit tests and the acceptance binary.

#include <cstddef>
#include <vector>

#include "bindlab/metrics.hpp"
#include "bindlab/numerics.hpp"

namespace oracle {

// Median by order-statistic selection: the value with exactly r smaller
// entries (counting duplicates).
inline double select_rank(const std::vector<double>& v, std::size_t r) {
  for (double x : v) {
    std::size_t below = 0, equal = 0;
    for (double y : v) {
      below += y < x ? 1 : 0;
      equal += y == x ? 1 : 0;
    }
    if (below <= r && r < below + equal) return x;
  }
  return v.front();
}

inline double median(const std::vector<double>& v) {
  const std::size_t n = v.size();
  if (n % 2 == 1) return select_rank(v, n / 2);
  return 0.5 * (select_rank(v, n / 2 - 1) + select_rank(v, n / 2));
}

inline std::vector<double> medians(const bindlab::LogProbTable& t) {
  std::vector<double> m;
  for (std::size_t l = 0; l < t.slots(); ++l) {
    std::vector<double> col;
    for (std::size_t i = 0; i < t.contexts(); ++i) {
      for (std::size_t k = 0; k < t.slots(); ++k) col.push_back(t(i, k, l));
    }
    m.push_back(median(col));
  }
  return m;
}

inline std::vector<double> accuracy(const bindlab::LogProbTable& t, const std::vector<double>& m) {
  std::vector<double> out;
  for (std::size_t k = 0; k < t.slots(); ++k) {
    double credit = 0.0;
    for (std::size_t i = 0; i < t.contexts(); ++i) {
      std::vector<std::size_t> winners;
      for (std::size_t l = 0; l < t.slots(); ++l) {
        bool beaten = false;
        for (std::size_t j = 0; j < t.slots(); ++j) beaten = beaten || (t(i, k, j) - m[j] > t(i, k, l) - m[l]);
        if (!beaten) winners.push_back(l);
      }
      for (std::size_t w : winners) {
        if (w == k) credit += 1.0 / static_cast<double>(winners.size());
      }
    }
    out.push_back(credit / static_cast<double>(t.contexts()));
  }
  return out;
}

inline std::vector<double> top1(const bindlab::LogProbTable& t) {
  return accuracy(t, std::vector<double>(t.slots(), 0.0));
}

inline std::vector<double> calibrated(const bindlab::LogProbTable& t) { return accuracy(t, medians(t)); }

// Welford running mean of the diagonal.
inline std::vector<double> mean_log_prob(const bindlab::LogProbTable& t) {
  std::vector<double> out;
  for (std::size_t k = 0; k < t.slots(); ++k) {
    double mean = 0.0;
    for (std::size_t i = 0; i < t.contexts(); ++i) mean += (t(i, k, k) - mean) / static_cast<double>(i + 1);
    out.push_back(mean);
  }
  return out;
}

// Random table; `grid` > 0 draws from multiples of 1/grid in [-8, 0] so that
// ties are common and sums are exact.
inline bindlab::LogProbTable random_table(bindlab::SeededRng& rng, std::size_t contexts, std::size_t slots,
                                          int grid) {
  bindlab::LogProbTable t(contexts, slots);
  for (std::size_t i = 0; i < contexts; ++i) {
    for (std::size_t k = 0; k < slots; ++k) {
      for (std::size_t l = 0; l < slots; ++l) {
        t(i, k, l) = grid > 0 ? -static_cast<double>(rng.uniform_index(8 * grid + 1)) / grid : -8.0 * rng.uniform();
      }
    }
  }
  return t;
}

}  // namespace oracle
