#include "bindlab/numerics.hpp"

#include <algorithm>
#include <cmath>
#include <exception>
#include <limits>
#include <mutex>
#include <numbers>
#include <string>
#include <thread>

#include "bindlab/error.hpp"

namespace bindlab {

namespace {

void require_same_dim(std::size_t a, std::size_t b, const char* op) {
  if (a != b) {
    throw DimensionError(std::string(op) + ": dimension mismatch (" + std::to_string(a) +
                         " vs " + std::to_string(b) + ")");
  }
}

bool finite_range(std::span<const double> v) {
  return std::all_of(v.begin(), v.end(), [](double x) { return std::isfinite(x); });
}

std::uint64_t rotl(std::uint64_t x, int k) { return (x << k) | (x >> (64 - k)); }

}  // namespace

// ---------------------------------------------------------------- Vector

Vector::Vector(std::size_t dim, double fill) : data_(dim, fill) {}

Vector::Vector(std::vector<double> data) : data_(std::move(data)) {
  if (!finite_range(data_)) throw NumericError("Vector: non-finite entry");
}

Vector::Vector(std::initializer_list<double> values) : Vector(std::vector<double>(values)) {}

Vector& Vector::operator+=(const Vector& other) {
  require_same_dim(dim(), other.dim(), "Vector +=");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Vector& Vector::operator-=(const Vector& other) {
  require_same_dim(dim(), other.dim(), "Vector -=");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
  return *this;
}

Vector& Vector::operator*=(double s) {
  for (double& x : data_) x *= s;
  return *this;
}

Vector& Vector::add_scaled(const Vector& other, double s) {
  require_same_dim(dim(), other.dim(), "Vector add_scaled");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += s * other.data_[i];
  return *this;
}

double Vector::dot(const Vector& other) const {
  require_same_dim(dim(), other.dim(), "Vector dot");
  double acc = 0.0;
  for (std::size_t i = 0; i < data_.size(); ++i) acc += data_[i] * other.data_[i];
  return acc;
}

double Vector::squared_norm() const { return dot(*this); }
double Vector::norm() const { return std::sqrt(squared_norm()); }
bool Vector::all_finite() const { return finite_range(data_); }

Vector operator+(Vector a, const Vector& b) { return a += b; }
Vector operator-(Vector a, const Vector& b) { return a -= b; }
Vector operator*(Vector a, double s) { return a *= s; }
Vector operator*(double s, Vector a) { return a *= s; }

// ---------------------------------------------------------------- Matrix

Matrix::Matrix(std::size_t rows, std::size_t cols, double fill)
    : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

Matrix::Matrix(std::size_t rows, std::size_t cols, std::vector<double> data)
    : rows_(rows), cols_(cols), data_(std::move(data)) {
  if (data_.size() != rows * cols) {
    throw DimensionError("Matrix: data length " + std::to_string(data_.size()) +
                         " != " + std::to_string(rows) + "x" + std::to_string(cols));
  }
  if (!finite_range(data_)) throw NumericError("Matrix: non-finite entry");
}

Vector Matrix::row_vector(std::size_t r) const {
  auto s = row(r);
  return Vector(std::vector<double>(s.begin(), s.end()));
}

void Matrix::set_row(std::size_t r, std::span<const double> values) {
  require_same_dim(cols_, values.size(), "Matrix set_row");
  std::copy(values.begin(), values.end(), data_.begin() + static_cast<std::ptrdiff_t>(r * cols_));
}

Matrix& Matrix::operator+=(const Matrix& other) {
  if (!same_shape(other)) throw DimensionError("Matrix +=: shape mismatch");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += other.data_[i];
  return *this;
}

Matrix& Matrix::operator-=(const Matrix& other) {
  if (!same_shape(other)) throw DimensionError("Matrix -=: shape mismatch");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] -= other.data_[i];
  return *this;
}

Matrix& Matrix::operator*=(double s) {
  for (double& x : data_) x *= s;
  return *this;
}

Matrix& Matrix::add_scaled(const Matrix& other, double s) {
  if (!same_shape(other)) throw DimensionError("Matrix add_scaled: shape mismatch");
  for (std::size_t i = 0; i < data_.size(); ++i) data_[i] += s * other.data_[i];
  return *this;
}

double Matrix::squared_norm() const {
  double acc = 0.0;
  for (double x : data_) acc += x * x;
  return acc;
}

double Matrix::norm() const { return std::sqrt(squared_norm()); }
bool Matrix::all_finite() const { return finite_range(data_); }

Matrix operator+(Matrix a, const Matrix& b) { return a += b; }
Matrix operator-(Matrix a, const Matrix& b) { return a -= b; }
Matrix operator*(Matrix a, double s) { return a *= s; }
Matrix operator*(double s, Matrix a) { return a *= s; }

double dot(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw DimensionError("dot: shape mismatch");
  auto x = a.values();
  auto y = b.values();
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) acc += x[i] * y[i];
  return acc;
}

double squared_distance(const Matrix& a, const Matrix& b) {
  if (!a.same_shape(b)) throw DimensionError("squared_distance: shape mismatch");
  auto x = a.values();
  auto y = b.values();
  double acc = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double d = x[i] - y[i];
    acc += d * d;
  }
  return acc;
}

// ---------------------------------------------------------------- RNG

std::uint64_t splitmix64(std::uint64_t& state) {
  std::uint64_t z = (state += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream) {
  std::uint64_t st = seed;
  std::uint64_t a = splitmix64(st);
  std::uint64_t st2 = stream ^ 0xD1B54A32D192ED03ULL;
  std::uint64_t b = splitmix64(st2);
  std::uint64_t mix = a ^ rotl(b, 17);
  return splitmix64(mix);
}

SeededRng::SeededRng(std::uint64_t seed) : seed_(seed) {
  std::uint64_t st = seed;
  for (auto& word : s_) word = splitmix64(st);
}

std::uint64_t SeededRng::next_u64() {
  const std::uint64_t result = rotl(s_[1] * 5, 7) * 9;
  const std::uint64_t t = s_[1] << 17;
  s_[2] ^= s_[0];
  s_[3] ^= s_[1];
  s_[1] ^= s_[2];
  s_[0] ^= s_[3];
  s_[2] ^= t;
  s_[3] = rotl(s_[3], 45);
  return result;
}

double SeededRng::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

std::uint64_t SeededRng::uniform_index(std::uint64_t bound) {
  if (bound == 0) throw SamplingError("uniform_index: bound must be positive");
  // Lemire's nearly-divisionless rejection method.
  std::uint64_t x = next_u64();
  __uint128_t m = static_cast<__uint128_t>(x) * bound;
  auto low = static_cast<std::uint64_t>(m);
  if (low < bound) {
    const std::uint64_t threshold = (0 - bound) % bound;
    while (low < threshold) {
      x = next_u64();
      m = static_cast<__uint128_t>(x) * bound;
      low = static_cast<std::uint64_t>(m);
    }
  }
  return static_cast<std::uint64_t>(m >> 64);
}

double SeededRng::normal() {
  // 1 - uniform() lies in (0, 1], so the log is finite.
  const double u1 = 1.0 - uniform();
  const double u2 = uniform();
  return std::sqrt(-2.0 * std::log(u1)) * std::cos(2.0 * std::numbers::pi * u2);
}

SeededRng SeededRng::derive(std::uint64_t stream) const {
  return SeededRng(derive_seed(seed_, stream));
}

// ---------------------------------------------------------------- functions

void log_softmax_inplace(std::span<double> values) {
  if (values.empty()) throw DimensionError("log_softmax: empty input");
  double max_v = -std::numeric_limits<double>::infinity();
  for (double x : values) {
    if (std::isnan(x)) throw NumericError("log_softmax: NaN input");
    if (!std::isfinite(x)) throw NumericError("log_softmax: infinite input");
    max_v = std::max(max_v, x);
  }
  double sum = 0.0;
  for (double x : values) sum += std::exp(x - max_v);
  const double log_z = std::log(sum);
  for (double& x : values) x = (x - max_v) - log_z;
}

Vector log_softmax(const Vector& logits) {
  std::vector<double> out(logits.values().begin(), logits.values().end());
  log_softmax_inplace(out);
  return Vector(std::move(out));
}

Vector finite_difference_gradient(const std::function<double(const Vector&)>& f,
                                  const Vector& x, double h) {
  if (!(h > 0.0) || !std::isfinite(h)) throw NumericError("finite_difference_gradient: h must be > 0");
  Vector grad(x.dim());
  Vector probe = x;
  for (std::size_t i = 0; i < x.dim(); ++i) {
    const double xi = x[i];
    probe[i] = xi + h;
    const double fp = f(probe);
    probe[i] = xi - h;
    const double fm = f(probe);
    probe[i] = xi;
    if (!std::isfinite(fp) || !std::isfinite(fm)) {
      throw NumericError("finite_difference_gradient: non-finite evaluation at index " +
                         std::to_string(i));
    }
    grad[i] = (fp - fm) / (2.0 * h);
  }
  return grad;
}

void parallel_for(std::size_t n, unsigned jobs, const std::function<void(std::size_t)>& body) {
  if (jobs <= 1 || n <= 1) {
    for (std::size_t i = 0; i < n; ++i) body(i);
    return;
  }
  const unsigned workers = static_cast<unsigned>(std::min<std::size_t>(jobs, n));
  std::exception_ptr first_error;
  std::mutex error_mutex;
  std::vector<std::thread> pool;
  pool.reserve(workers);
  for (unsigned w = 0; w < workers; ++w) {
    pool.emplace_back([&, w] {
      for (std::size_t i = w; i < n; i += workers) {
        try {
          body(i);
        } catch (...) {
          std::lock_guard lock(error_mutex);
          if (!first_error) first_error = std::current_exception();
          return;
        }
      }
    });
  }
  for (auto& t : pool) t.join();
  if (first_error) std::rethrow_exception(first_error);
}

}  // namespace bindlab
