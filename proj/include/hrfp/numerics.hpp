/* Copyright 2026 The hrfp Authors. All Rights Reserved.

Licensed under the Apache License, Version 2.0 (the "License");
you may not use this file except in compliance with the License.
You may obtain a copy of the License at

    http://www.apache.org/licenses/LICENSE-2.0

Unless required by applicable law or agreed to in writing, software
distributed under the License is distributed on an "AS IS" BASIS,
WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
See the License for the specific language governing permissions and
limitations under the License.
==============================================================================*/

// Dense linear algebra, seeded sampling and similarity kernels.
//
// Values are stored as 32-bit floats; every reduction (dot products, norms,
// matrix products) accumulates in 64-bit.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstddef>
#include <cstdint>
#include <numeric>
#include <span>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include <Eigen/Dense>

#include "hrfp/error.hpp"

namespace hrfp {

// Counter-based Philox4x32-10 generator. The output stream is a pure
// function of (seed, stream id), so two machines that agree on those agree
// on every draw.
class Rng {
 public:
  static constexpr std::string_view kAlgorithm = "philox4x32-10";

  explicit Rng(uint64_t seed, uint64_t stream = 0) : seed_(seed), stream_(stream) {}

  uint64_t seed() const { return seed_; }
  uint64_t stream() const { return stream_; }

  // Independent substream sharing this generator's seed.
  Rng split(uint64_t stream) const { return Rng(seed_, stream); }

  uint32_t next_u32() {
    if (lane_ == 4) refill();
    return block_[lane_++];
  }

  uint64_t next_u64() {
    const uint64_t hi = next_u32();
    return (hi << 32) | next_u32();
  }

  // Uniform on [0, 1) with 53 random bits.
  double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

  // Standard normal via Box-Muller; the second variate is cached.
  double normal() {
    if (has_spare_) {
      has_spare_ = false;
      return spare_;
    }
    const double u1 = 1.0 - uniform();  // (0, 1]
    const double u2 = uniform();
    const double radius = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * 3.14159265358979323846 * u2;
    spare_ = radius * std::sin(theta);
    has_spare_ = true;
    return radius * std::cos(theta);
  }

  // Uniform integer in [0, n), rejection sampled so there is no modulo bias.
  uint64_t below(uint64_t n) {
    if (n <= 1) return 0;
    const uint64_t limit = UINT64_MAX - UINT64_MAX % n;
    uint64_t x = next_u64();
    while (x >= limit) x = next_u64();
    return x % n;
  }

  // Raw block function, exposed for known-answer tests.
  static std::array<uint32_t, 4> philox(std::array<uint32_t, 4> ctr, std::array<uint32_t, 2> key) {
    constexpr uint32_t kM0 = 0xD2511F53u, kM1 = 0xCD9E8D57u;
    constexpr uint32_t kW0 = 0x9E3779B9u, kW1 = 0xBB67AE85u;
    for (int round = 0; round < 10; ++round) {
      if (round > 0) {
        key[0] += kW0;
        key[1] += kW1;
      }
      const uint64_t p0 = static_cast<uint64_t>(kM0) * ctr[0];
      const uint64_t p1 = static_cast<uint64_t>(kM1) * ctr[2];
      ctr = {static_cast<uint32_t>(p1 >> 32) ^ ctr[1] ^ key[0], static_cast<uint32_t>(p1),
             static_cast<uint32_t>(p0 >> 32) ^ ctr[3] ^ key[1], static_cast<uint32_t>(p0)};
    }
    return ctr;
  }

 private:
  void refill() {
    block_ = philox({static_cast<uint32_t>(counter_), static_cast<uint32_t>(counter_ >> 32),
                     static_cast<uint32_t>(stream_), static_cast<uint32_t>(stream_ >> 32)},
                    {static_cast<uint32_t>(seed_), static_cast<uint32_t>(seed_ >> 32)});
    ++counter_;
    lane_ = 0;
  }

  uint64_t seed_;
  uint64_t stream_;
  uint64_t counter_ = 0;
  std::array<uint32_t, 4> block_{};
  int lane_ = 4;
  double spare_ = 0.0;
  bool has_spare_ = false;
};

// Row-major dense matrix of 32-bit values.
class Matrix {
 public:
  Matrix() = default;
  Matrix(size_t rows, size_t cols, float fill = 0.0f) : rows_(rows), cols_(cols), data_(rows * cols, fill) {}
  Matrix(size_t rows, size_t cols, std::vector<float> data) : rows_(rows), cols_(cols), data_(std::move(data)) {
    if (data_.size() != rows_ * cols_) {
      throw DimensionError("matrix data length " + std::to_string(data_.size()) + " != " + std::to_string(rows_) +
                           "x" + std::to_string(cols_));
    }
  }

  static Matrix identity(size_t n) {
    Matrix m(n, n);
    for (size_t i = 0; i < n; ++i) m(i, i) = 1.0f;
    return m;
  }

  size_t rows() const { return rows_; }
  size_t cols() const { return cols_; }
  size_t size() const { return data_.size(); }
  bool empty() const { return data_.empty(); }

  float& operator()(size_t r, size_t c) { return data_[r * cols_ + c]; }
  float operator()(size_t r, size_t c) const { return data_[r * cols_ + c]; }

  std::span<float> values() { return data_; }
  std::span<const float> values() const { return data_; }
  std::span<float> row(size_t r) { return {data_.data() + r * cols_, cols_}; }
  std::span<const float> row(size_t r) const { return {data_.data() + r * cols_, cols_}; }

  const std::vector<float>& storage() const { return data_; }
  std::vector<float>&& release() && { return std::move(data_); }

  bool operator==(const Matrix&) const = default;

 private:
  size_t rows_ = 0;
  size_t cols_ = 0;
  std::vector<float> data_;
};

inline std::string shape_string(const Matrix& m) {
  return std::to_string(m.rows()) + "x" + std::to_string(m.cols());
}

// a (n x k) times b (k x m), 64-bit accumulation per output row.
inline Matrix matmul(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.rows()) {
    throw DimensionError("matmul " + shape_string(a) + " * " + shape_string(b));
  }
  Matrix out(a.rows(), b.cols());
  std::vector<double> acc(b.cols());
  for (size_t i = 0; i < a.rows(); ++i) {
    std::fill(acc.begin(), acc.end(), 0.0);
    for (size_t k = 0; k < a.cols(); ++k) {
      const double aik = a(i, k);
      if (aik == 0.0) continue;
      const auto brow = b.row(k);
      for (size_t j = 0; j < brow.size(); ++j) acc[j] += aik * brow[j];
    }
    auto orow = out.row(i);
    for (size_t j = 0; j < acc.size(); ++j) orow[j] = static_cast<float>(acc[j]);
  }
  return out;
}

// a (n x k) times b^T where b is (m x k); rows of both are contiguous.
inline Matrix matmul_bt(const Matrix& a, const Matrix& b) {
  if (a.cols() != b.cols()) {
    throw DimensionError("matmul_bt " + shape_string(a) + " * (" + shape_string(b) + ")^T");
  }
  Matrix out(a.rows(), b.rows());
  for (size_t i = 0; i < a.rows(); ++i) {
    const auto arow = a.row(i);
    for (size_t j = 0; j < b.rows(); ++j) {
      const auto brow = b.row(j);
      double acc = 0.0;
      for (size_t k = 0; k < arow.size(); ++k) acc += static_cast<double>(arow[k]) * brow[k];
      out(i, j) = static_cast<float>(acc);
    }
  }
  return out;
}

inline Matrix transpose(const Matrix& m) {
  Matrix out(m.cols(), m.rows());
  for (size_t i = 0; i < m.rows(); ++i)
    for (size_t j = 0; j < m.cols(); ++j) out(j, i) = m(i, j);
  return out;
}

inline Eigen::MatrixXd to_eigen(const Matrix& m) {
  Eigen::MatrixXd out(m.rows(), m.cols());
  for (size_t i = 0; i < m.rows(); ++i)
    for (size_t j = 0; j < m.cols(); ++j) out(i, j) = m(i, j);
  return out;
}

inline Matrix from_eigen(const Eigen::MatrixXd& m) {
  Matrix out(m.rows(), m.cols());
  for (Eigen::Index i = 0; i < m.rows(); ++i)
    for (Eigen::Index j = 0; j < m.cols(); ++j) out(i, j) = static_cast<float>(m(i, j));
  return out;
}

// Inverse through partial-pivot LU in 64-bit.
inline Matrix inverse(const Matrix& m) {
  if (m.rows() != m.cols()) throw DimensionError("inverse of non-square " + shape_string(m));
  const Eigen::PartialPivLU<Eigen::MatrixXd> lu(to_eigen(m));
  if (lu.determinant() == 0.0) throw NumericError("inverse of singular matrix");
  return from_eigen(lu.inverse());
}

// Spectral (2-norm) condition number, from the eigenvalues of m^T m.
inline double condition_number(const Matrix& m) {
  if (m.rows() != m.cols() || m.empty()) throw DimensionError("condition number of " + shape_string(m));
  const Eigen::MatrixXd a = to_eigen(m);
  const Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> eig(a.transpose() * a, Eigen::EigenvaluesOnly);
  const double lo = eig.eigenvalues().minCoeff();
  const double hi = eig.eigenvalues().maxCoeff();
  if (lo <= 0.0) return std::numeric_limits<double>::infinity();
  return std::sqrt(hi / lo);
}

inline double dot(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw DimensionError("dot of lengths " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
  double acc = 0.0;
  for (size_t i = 0; i < a.size(); ++i) acc += static_cast<double>(a[i]) * b[i];
  return acc;
}

inline double norm(std::span<const float> a) { return std::sqrt(dot(a, a)); }

inline double cosine_similarity(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) {
    throw DimensionError("cosine of lengths " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
  }
  if (a.empty()) throw DimensionError("cosine of empty vectors");
  double ab = 0.0, aa = 0.0, bb = 0.0;
  for (size_t i = 0; i < a.size(); ++i) {
    const double x = a[i], y = b[i];
    ab += x * y;
    aa += x * x;
    bb += y * y;
  }
  if (aa == 0.0 || bb == 0.0) throw NumericError("cosine of zero-norm vector");
  // sqrt(aa * bb) is exact when a == b, so self-similarity is exactly 1.
  return std::clamp(ab / std::sqrt(aa * bb), -1.0, 1.0);
}

inline double max_abs_diff(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) throw DimensionError("max_abs_diff length mismatch");
  double worst = 0.0;
  for (size_t i = 0; i < a.size(); ++i) worst = std::max(worst, std::abs(static_cast<double>(a[i]) - b[i]));
  return worst;
}

inline bool all_finite(std::span<const float> a) {
  return std::all_of(a.begin(), a.end(), [](float x) { return std::isfinite(x); });
}

inline Matrix sample_gaussian(Rng& rng, size_t rows, size_t cols, double mean, double std) {
  Matrix m(rows, cols);
  for (float& x : m.values()) x = static_cast<float>(mean + std * rng.normal());
  return m;
}

// Fisher-Yates; entry i of the result is the source index of position i.
inline std::vector<size_t> sample_permutation_indices(Rng& rng, size_t n) {
  std::vector<size_t> idx(n);
  std::iota(idx.begin(), idx.end(), size_t{0});
  for (size_t i = n; i > 1; --i) std::swap(idx[i - 1], idx[rng.below(i)]);
  return idx;
}

// Permutation matrix P with P(i, perm[i]) = 1, so (P x) picks x[perm[i]].
inline Matrix permutation_matrix(std::span<const size_t> perm) {
  Matrix p(perm.size(), perm.size());
  for (size_t i = 0; i < perm.size(); ++i) p(i, perm[i]) = 1.0f;
  return p;
}

inline Matrix sample_permutation(Rng& rng, size_t n) {
  if (n == 0) throw RangeError("permutation size must be >= 1");
  const auto perm = sample_permutation_indices(rng, n);
  return permutation_matrix(perm);
}

// Recovers perm from a permutation matrix; throws if m is not one.
inline std::vector<size_t> permutation_indices(const Matrix& m) {
  if (m.rows() != m.cols()) throw DimensionError("permutation matrix must be square");
  std::vector<size_t> perm(m.rows());
  std::vector<bool> used(m.cols(), false);
  for (size_t i = 0; i < m.rows(); ++i) {
    size_t hits = 0;
    for (size_t j = 0; j < m.cols(); ++j) {
      if (m(i, j) == 1.0f) {
        perm[i] = j;
        ++hits;
      } else if (m(i, j) != 0.0f) {
        throw NumericError("not a permutation matrix");
      }
    }
    if (hits != 1 || used[perm[i]]) throw NumericError("not a permutation matrix");
    used[perm[i]] = true;
  }
  return perm;
}

inline constexpr double kDefaultConditionMax = 1e4;
inline constexpr int kInvertibleAttempts = 64;

// Gaussian N(0, 1/n) draw, resampled until its condition number is at most
// cond_max.
inline Matrix sample_invertible(Rng& rng, size_t n, double cond_max = kDefaultConditionMax) {
  if (n == 0) throw RangeError("invertible size must be >= 1");
  if (!(cond_max > 1.0)) throw RangeError("cond_max must exceed 1");
  const double std = 1.0 / std::sqrt(static_cast<double>(n));
  for (int attempt = 0; attempt < kInvertibleAttempts; ++attempt) {
    Matrix c = sample_gaussian(rng, n, n, 0.0, std);
    if (condition_number(c) <= cond_max) return c;
  }
  throw NumericError("no matrix with condition <= " + std::to_string(cond_max) + " after " +
                     std::to_string(kInvertibleAttempts) + " draws");
}

}  // namespace hrfp
