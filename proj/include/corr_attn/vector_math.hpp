#pragma once

#include <cmath>
#include <cstddef>
#include <span>
#include <vector>

#include "corr_attn/error.hpp"

namespace corr_attn {

inline constexpr int kGrid = 7;
inline constexpr int kCells = kGrid * kGrid;
inline constexpr double kUnitTolerance = 1e-6;

// Products of two floats are exact in double; the sum runs left to right so
// every caller sees the same value for the same pair of vectors.
inline double dot(std::span<const float> a, std::span<const float> b) {
  double acc = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    acc += static_cast<double>(a[i]) * static_cast<double>(b[i]);
  }
  return acc;
}

inline double l2_norm(std::span<const float> v) { return std::sqrt(dot(v, v)); }

/// Cosine similarity of two unit vectors.
inline double cosine_similarity(std::span<const float> a, std::span<const float> b) {
  if (a.size() != b.size()) {
    throw Error(ErrorCode::DimensionMismatch,
                "vectors have dimensions " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
  }
  return dot(a, b);
}

inline std::vector<float> normalize(std::span<const float> v) {
  const double norm = l2_norm(v);
  if (!(norm > 0.0) || !std::isfinite(norm)) {
    throw Error(ErrorCode::ZeroVector, "cannot normalize a zero or non-finite vector");
  }
  std::vector<float> out(v.size());
  for (std::size_t i = 0; i < v.size(); ++i) {
    out[i] = static_cast<float>(static_cast<double>(v[i]) / norm);
  }
  return out;
}

inline bool is_unit(std::span<const float> v) { return std::abs(l2_norm(v) - 1.0) < kUnitTolerance; }

/// Normalizes in place unless the vector is already unit within tolerance.
/// Leaving unit vectors untouched makes ingestion idempotent, so a written
/// index reloads bit for bit.
inline void normalize_in_place(std::span<float> v) {
  if (is_unit(v)) return;
  auto n = normalize(v);
  std::copy(n.begin(), n.end(), v.begin());
}

/// Normalized mean of the 49 patch vectors (flattened row-major, dim floats
/// each), in double precision.
inline std::vector<double> mean_patch_direction(std::span<const float> patch_grid, std::size_t dim) {
  if (dim == 0 || patch_grid.size() != static_cast<std::size_t>(kCells) * dim) {
    throw Error(ErrorCode::DimensionMismatch, "patch grid must hold 49 vectors of dimension " + std::to_string(dim));
  }
  std::vector<double> mean(dim, 0.0);
  for (int cell = 0; cell < kCells; ++cell) {
    for (std::size_t d = 0; d < dim; ++d) mean[d] += patch_grid[cell * dim + d];
  }
  double norm = 0.0;
  for (auto& m : mean) {
    m /= kCells;
    norm += m * m;
  }
  norm = std::sqrt(norm);
  if (!(norm > 0.0)) throw Error(ErrorCode::ZeroVector, "mean of patch vectors is the zero vector");
  for (auto& m : mean) m /= norm;
  return mean;
}

/// Fallback global descriptor: the mean patch direction stored as floats.
inline std::vector<float> mean_pool_patches(std::span<const float> patch_grid, std::size_t dim) {
  const auto mean = mean_patch_direction(patch_grid, dim);
  return std::vector<float>(mean.begin(), mean.end());
}

}  // namespace corr_attn
