#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <initializer_list>
#include <span>
#include <vector>

namespace bindlab {

/// Dense 64-bit float vector. Arithmetic sums in ascending index order so
/// results are bitwise-stable.
class Vector {
 public:
  Vector() = default;
  explicit Vector(std::size_t dim, double fill = 0.0);
  /// Throws NumericError if any entry is not finite.
  explicit Vector(std::vector<double> data);
  Vector(std::initializer_list<double> values);

  std::size_t dim() const { return data_.size(); }
  bool empty() const { return data_.empty(); }
  double operator[](std::size_t i) const { return data_[i]; }
  double& operator[](std::size_t i) { return data_[i]; }
  std::span<const double> values() const { return data_; }
  std::span<double> values() { return data_; }
  const std::vector<double>& raw() const { return data_; }

  Vector& operator+=(const Vector& other);
  Vector& operator-=(const Vector& other);
  Vector& operator*=(double s);
  Vector& add_scaled(const Vector& other, double s);

  double dot(const Vector& other) const;
  double squared_norm() const;
  double norm() const;
  bool all_finite() const;

  friend bool operator==(const Vector&, const Vector&) = default;

 private:
  std::vector<double> data_;
};

Vector operator+(Vector a, const Vector& b);
Vector operator-(Vector a, const Vector& b);
Vector operator*(Vector a, double s);
Vector operator*(double s, Vector a);

/// Row-major dense matrix.
class Matrix {
 public:
  Matrix() = default;
  Matrix(std::size_t rows, std::size_t cols, double fill = 0.0);
  /// Throws DimensionError on size mismatch, NumericError on non-finite data.
  Matrix(std::size_t rows, std::size_t cols, std::vector<double> data);

  std::size_t rows() const { return rows_; }
  std::size_t cols() const { return cols_; }
  std::size_t size() const { return data_.size(); }

  double operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }
  double& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }

  std::span<const double> row(std::size_t r) const {
    return {data_.data() + r * cols_, cols_};
  }
  std::span<double> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
  Vector row_vector(std::size_t r) const;
  void set_row(std::size_t r, std::span<const double> values);

  std::span<const double> values() const { return data_; }
  std::span<double> values() { return data_; }
  const std::vector<double>& raw() const { return data_; }

  Matrix& operator+=(const Matrix& other);
  Matrix& operator-=(const Matrix& other);
  Matrix& operator*=(double s);
  Matrix& add_scaled(const Matrix& other, double s);

  double squared_norm() const;
  double norm() const;
  bool all_finite() const;
  bool same_shape(const Matrix& other) const {
    return rows_ == other.rows_ && cols_ == other.cols_;
  }

  friend bool operator==(const Matrix&, const Matrix&) = default;

 private:
  std::size_t rows_ = 0;
  std::size_t cols_ = 0;
  std::vector<double> data_;
};

Matrix operator+(Matrix a, const Matrix& b);
Matrix operator-(Matrix a, const Matrix& b);
Matrix operator*(Matrix a, double s);
Matrix operator*(double s, Matrix a);

/// A per-token activation stack: one row per layer, d_model columns.
using LayerStack = Matrix;

/// Flattened dot product / distance over two equally-shaped stacks.
double dot(const Matrix& a, const Matrix& b);
double squared_distance(const Matrix& a, const Matrix& b);

/// xoshiro256** seeded through splitmix64. Every draw (integers, uniforms,
/// normals) is implemented here rather than with <random> distributions, whose
/// output differs between standard library implementations.
class SeededRng {
 public:
  explicit SeededRng(std::uint64_t seed);

  std::uint64_t seed() const { return seed_; }
  std::uint64_t next_u64();
  /// Uniform double in [0, 1) with 53 random bits.
  double uniform();
  /// Uniform integer in [0, bound); bound must be positive.
  std::uint64_t uniform_index(std::uint64_t bound);
  /// Standard normal via Box-Muller (one output per call).
  double normal();
  double normal(double mean, double stddev) { return mean + stddev * normal(); }
  /// Independent generator for a sub-stream (e.g. one context index).
  SeededRng derive(std::uint64_t stream) const;

  friend bool operator==(const SeededRng&, const SeededRng&) = default;

 private:
  std::uint64_t seed_;
  std::uint64_t s_[4];
};

std::uint64_t splitmix64(std::uint64_t& state);
/// Stateless seed derivation used for per-context reproducibility.
std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t stream);

/// Numerically stable log-softmax (max subtraction, ascending-order sums).
/// Throws DimensionError for an empty input, NumericError for NaN/inf input.
Vector log_softmax(const Vector& logits);
/// In-place variant over a raw span; same contract.
void log_softmax_inplace(std::span<double> values);

/// Central differences (f(x + h e_i) - f(x - h e_i)) / 2h for every i.
/// Throws NumericError when an evaluation is not finite or h <= 0.
Vector finite_difference_gradient(const std::function<double(const Vector&)>& f,
                                  const Vector& x, double h);

/// Runs body(i) for i in [0, n) on up to `jobs` threads. Callers write
/// results into index-addressed slots and reduce afterwards in index order.
void parallel_for(std::size_t n, unsigned jobs, const std::function<void(std::size_t)>& body);

}  // namespace bindlab
