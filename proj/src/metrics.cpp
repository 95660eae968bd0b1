#include "bindlab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <iomanip>
#include <limits>
#include <sstream>

#include "bindlab/error.hpp"

namespace bindlab {

LogProbTable::LogProbTable(std::size_t n_contexts, std::size_t n_slots)
    : n_contexts_(n_contexts), n_slots_(n_slots), data_(n_contexts * n_slots * n_slots, 0.0) {}

void LogProbTable::validate() const {
  for (double x : data_) {
    if (!std::isfinite(x) || x > 0.0) throw InputError("LogProbTable: entries must be finite log probabilities");
  }
}

std::string LogProbTable::to_csv() const {
  std::ostringstream out;
  out << std::setprecision(17);
  out << "context_id,query_slot,attribute_slot,log_prob\n";
  for (std::size_t i = 0; i < n_contexts_; ++i) {
    for (std::size_t k = 0; k < n_slots_; ++k) {
      for (std::size_t l = 0; l < n_slots_; ++l) out << i << ',' << k << ',' << l << ',' << (*this)(i, k, l) << '\n';
    }
  }
  return out.str();
}

LogProbTable LogProbTable::from_csv(const std::string& text) {
  std::istringstream in(text);
  std::string line;
  if (!std::getline(in, line) || line != "context_id,query_slot,attribute_slot,log_prob") {
    throw FormatError("LogProbTable CSV: unexpected header");
  }
  struct Cell {
    std::size_t i, k, l;
    double v;
  };
  std::vector<Cell> cells;
  std::size_t max_i = 0, max_s = 0;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream row(line);
    Cell c{};
    char c1 = 0, c2 = 0, c3 = 0;
    if (!(row >> c.i >> c1 >> c.k >> c2 >> c.l >> c3 >> c.v) || c1 != ',' || c2 != ',' || c3 != ',') {
      throw FormatError("LogProbTable CSV line " + std::to_string(line_no) + ": malformed row");
    }
    max_i = std::max(max_i, c.i + 1);
    max_s = std::max({max_s, c.k + 1, c.l + 1});
    cells.push_back(c);
  }
  LogProbTable t(max_i, max_s);
  std::vector<char> seen(t.data_.size(), 0);
  for (const auto& c : cells) {
    const std::size_t idx = t.index(c.i, c.k, c.l);
    if (seen[idx]) throw FormatError("LogProbTable CSV: duplicate cell");
    seen[idx] = 1;
    t.data_[idx] = c.v;
  }
  if (std::find(seen.begin(), seen.end(), 0) != seen.end()) throw FormatError("LogProbTable CSV: missing cells");
  t.validate();
  return t;
}

double SummaryStatistic::mean() const {
  if (sigma.empty()) return 0.0;
  double s = 0.0;
  for (double x : sigma) s += x;
  return s / static_cast<double>(sigma.size());
}

namespace {

void require_population(const LogProbTable& t) {
  if (t.contexts() == 0 || t.slots() == 0) throw EmptyPopulationError("metrics need at least one context");
}

double median(std::vector<double> v) {
  std::sort(v.begin(), v.end());
  const std::size_t n = v.size();
  if (n % 2 == 1) return v[n / 2];
  return 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

SummaryStatistic accuracy_with_offsets(const LogProbTable& t, const std::vector<double>& offset) {
  require_population(t);
  const std::size_t n = t.slots();
  SummaryStatistic s;
  s.sigma.assign(n, 0.0);
  for (std::size_t k = 0; k < n; ++k) {
    double total = 0.0;
    for (std::size_t i = 0; i < t.contexts(); ++i) {
      double best = -std::numeric_limits<double>::infinity();
      for (std::size_t l = 0; l < n; ++l) best = std::max(best, t(i, k, l) - offset[l]);
      std::size_t ties = 0;
      for (std::size_t l = 0; l < n; ++l) ties += (t(i, k, l) - offset[l] == best) ? 1 : 0;
      if (t(i, k, k) - offset[k] == best) total += 1.0 / static_cast<double>(ties);
    }
    s.sigma[k] = total / static_cast<double>(t.contexts());
  }
  return s;
}

}  // namespace

std::vector<double> calibration_medians(const LogProbTable& t) {
  require_population(t);
  std::vector<double> m(t.slots());
  for (std::size_t l = 0; l < t.slots(); ++l) {
    std::vector<double> column;
    column.reserve(t.contexts() * t.slots());
    for (std::size_t i = 0; i < t.contexts(); ++i) {
      for (std::size_t k = 0; k < t.slots(); ++k) column.push_back(t(i, k, l));
    }
    m[l] = median(std::move(column));
  }
  return m;
}

SummaryStatistic mean_log_prob(const LogProbTable& t) {
  require_population(t);
  SummaryStatistic s;
  s.sigma.assign(t.slots(), 0.0);
  for (std::size_t k = 0; k < t.slots(); ++k) {
    double total = 0.0;
    for (std::size_t i = 0; i < t.contexts(); ++i) total += t(i, k, k);
    s.sigma[k] = total / static_cast<double>(t.contexts());
  }
  return s;
}

SummaryStatistic top1_accuracy(const LogProbTable& t) {
  return accuracy_with_offsets(t, std::vector<double>(t.slots(), 0.0));
}

SummaryStatistic median_calibrated_accuracy(const LogProbTable& t) {
  return accuracy_with_offsets(t, calibration_medians(t));
}

}  // namespace bindlab
