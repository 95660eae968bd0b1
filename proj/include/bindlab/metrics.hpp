#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

namespace bindlab {

/// Phi[i][k][l]: log probability of context i's attribute slot l when
/// querying entity slot k. Correct answers sit on the diagonal k == l.
class LogProbTable {
 public:
  LogProbTable() = default;
  /// n_contexts x n_slots x n_slots, zero-filled.
  LogProbTable(std::size_t n_contexts, std::size_t n_slots);

  std::size_t contexts() const { return n_contexts_; }
  std::size_t slots() const { return n_slots_; }
  double operator()(std::size_t i, std::size_t k, std::size_t l) const { return data_[index(i, k, l)]; }
  double& operator()(std::size_t i, std::size_t k, std::size_t l) { return data_[index(i, k, l)]; }
  const std::vector<double>& raw() const { return data_; }

  /// Throws InputError when an entry is not a finite value <= 0.
  void validate() const;

  /// Columns: context_id,query_slot,attribute_slot,log_prob.
  std::string to_csv() const;
  static LogProbTable from_csv(const std::string& text);

 private:
  std::size_t n_contexts_ = 0;
  std::size_t n_slots_ = 0;
  std::vector<double> data_;

  std::size_t index(std::size_t i, std::size_t k, std::size_t l) const {
    return (i * n_slots_ + k) * n_slots_ + l;
  }
};

/// sigma[k] per query slot.
struct SummaryStatistic {
  std::vector<double> sigma;
  double mean() const;
};

/// m[l]: median over every (i, k) of Phi[i][k][l]. Even counts average the
/// two central order statistics.
std::vector<double> calibration_medians(const LogProbTable& t);

/// Throw EmptyPopulationError when the table has no contexts.
SummaryStatistic mean_log_prob(const LogProbTable& t);
/// Exact ties for the maximum share credit uniformly.
SummaryStatistic top1_accuracy(const LogProbTable& t);
/// top1_accuracy of Phi[i][k][l] - m[l].
SummaryStatistic median_calibrated_accuracy(const LogProbTable& t);

}  // namespace bindlab
