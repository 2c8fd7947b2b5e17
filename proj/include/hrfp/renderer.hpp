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

// Fingerprint renderer: a deterministic, locality-preserving map from the
// 512-long fingerprint vector to an RGB image.
//
//   z = R v                      R: 48 x 512, entries +-1/sqrt(512) drawn
//                                from philox4x32-10 (seed kRendererSeed)
//   f_c(x, y) = sum_{a,b<4} z[16c + 4a + b] cos(pi a u) cos(pi b w) / S
//                                u = (x + 0.5)/width, w = (y + 0.5)/height,
//                                S = sqrt(mean over pixels of sum phi^2)
//   p_c = (1 + tanh(f_c)) / 2
//   byte = floor(255 p_c + 0.5)
//
// Every stage is Lipschitz: |dp| <= |df| / 2 and |df| <= B |dz| with
// B = max_pixel sqrt(sum phi^2) / S, so the normalised image distance obeys
//   image_distance(G(v1), G(v2)) <= L |v1 - v2| + 1/255,
//   L = B * ||R||_2 / 2,
// where the 1/255 term covers rounding. Renderer::lipschitz_constant()
// returns L for the shipped projection.

#pragma once

#include <png.h>

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "hrfp/bytes.hpp"
#include "hrfp/encoder.hpp"
#include "hrfp/error.hpp"
#include "hrfp/numerics.hpp"

namespace hrfp {

inline constexpr uint32_t kRendererVersion = 1;
inline constexpr uint64_t kRendererSeed = 0x48524650'52454e44ull;  // "HRFPREND"
inline constexpr size_t kRendererLatentDim = 48;
inline constexpr size_t kBasisPerChannel = 16;
inline constexpr size_t kBasisFrequencies = 4;  // 4 x 4 grid of cosine products
inline constexpr size_t kDefaultImageSize = 256;

struct FingerprintImage {
  size_t width = 0;
  size_t height = 0;
  std::vector<uint8_t> rgb;  // row-major, 3 bytes per pixel
  std::map<std::string, std::string> provenance;

  uint8_t at(size_t x, size_t y, size_t c) const { return rgb[(y * width + x) * 3 + c]; }
  bool operator==(const FingerprintImage&) const = default;
};

class Renderer {
 public:
  explicit Renderer(size_t width = kDefaultImageSize, size_t height = kDefaultImageSize)
      : width_(width), height_(height) {
    if (width == 0 || height == 0) throw RangeError("image size must be positive");
    Rng rng(kRendererSeed);
    const float entry = static_cast<float>(1.0 / std::sqrt(static_cast<double>(kFingerprintDim)));
    projection_.resize(kRendererLatentDim * kFingerprintDim);
    for (float& r : projection_) r = (rng.next_u32() & 1u) ? entry : -entry;

    cos_u_ = cosine_table(width);
    cos_w_ = cosine_table(height);
    double mean_sq = 0.0, max_sq = 0.0;
    for (size_t y = 0; y < height; ++y) {
      for (size_t x = 0; x < width; ++x) {
        double sq = 0.0;
        for (size_t a = 0; a < kBasisFrequencies; ++a)
          for (size_t b = 0; b < kBasisFrequencies; ++b) {
            const double phi = cos_u_[a * width + x] * cos_w_[b * height + y];
            sq += phi * phi;
          }
        mean_sq += sq;
        max_sq = std::max(max_sq, sq);
      }
    }
    mean_sq /= static_cast<double>(width * height);
    scale_ = 1.0 / std::sqrt(mean_sq);
    const Eigen::Map<const Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>> r(
        projection_.data(), static_cast<Eigen::Index>(kRendererLatentDim), static_cast<Eigen::Index>(kFingerprintDim));
    const double spectral = Eigen::JacobiSVD<Eigen::MatrixXd>(r.cast<double>()).singularValues()(0);
    lipschitz_ = std::sqrt(max_sq) * scale_ * spectral / 2.0;
  }

  size_t width() const { return width_; }
  size_t height() const { return height_; }
  double lipschitz_constant() const { return lipschitz_; }

  std::vector<double> project(std::span<const float> v) const {
    if (v.size() != kFingerprintDim) {
      throw DimensionError("fingerprint vector must have length " + std::to_string(kFingerprintDim));
    }
    std::vector<double> z(kRendererLatentDim, 0.0);
    for (size_t i = 0; i < kRendererLatentDim; ++i) {
      const float* row = projection_.data() + i * kFingerprintDim;
      double acc = 0.0;
      for (size_t j = 0; j < kFingerprintDim; ++j) acc += static_cast<double>(row[j]) * v[j];
      z[i] = acc;
    }
    return z;
  }

  FingerprintImage render(std::span<const float> v) const {
    if (!all_finite(v)) throw NumericError("fingerprint vector has non-finite entries");
    const auto z = project(v);
    FingerprintImage img;
    img.width = width_;
    img.height = height_;
    img.rgb.resize(width_ * height_ * 3);
    img.provenance["renderer_version"] = std::to_string(kRendererVersion);
    for (size_t c = 0; c < 3; ++c) {
      const double* coef = z.data() + c * kBasisPerChannel;
      // Separable: g[a][y] = sum_b coef[4a + b] cos(pi b w_y).
      std::vector<double> g(kBasisFrequencies * height_);
      for (size_t a = 0; a < kBasisFrequencies; ++a)
        for (size_t y = 0; y < height_; ++y) {
          double acc = 0.0;
          for (size_t b = 0; b < kBasisFrequencies; ++b) acc += coef[a * kBasisFrequencies + b] * cos_w_[b * height_ + y];
          g[a * height_ + y] = acc;
        }
      for (size_t y = 0; y < height_; ++y)
        for (size_t x = 0; x < width_; ++x) {
          double f = 0.0;
          for (size_t a = 0; a < kBasisFrequencies; ++a) f += g[a * height_ + y] * cos_u_[a * width_ + x];
          const double p = 0.5 * (1.0 + std::tanh(f * scale_));
          img.rgb[(y * width_ + x) * 3 + c] = static_cast<uint8_t>(std::floor(255.0 * p + 0.5));
        }
    }
    return img;
  }

 private:
  static std::vector<double> cosine_table(size_t n) {
    constexpr double kPi = 3.14159265358979323846;
    std::vector<double> t(kBasisFrequencies * n);
    for (size_t a = 0; a < kBasisFrequencies; ++a)
      for (size_t i = 0; i < n; ++i)
        t[a * n + i] = std::cos(kPi * static_cast<double>(a) * (static_cast<double>(i) + 0.5) / static_cast<double>(n));
    return t;
  }

  size_t width_, height_;
  std::vector<float> projection_;
  std::vector<double> cos_u_, cos_w_;
  double scale_ = 1.0;
  double lipschitz_ = 0.0;
};

// Rescales an encoder output to unit root mean square, as a GAN mapping
// network does with its input latent. The contrastive objective only shapes
// the direction of v, so its raw scale carries no information; without this
// step a small-norm v renders as flat grey.
inline std::vector<float> normalize_latent(std::span<const float> v) {
  double sq = 0.0;
  for (float x : v) sq += static_cast<double>(x) * x;
  if (!(sq > 0.0) || !std::isfinite(sq)) throw NumericError("fingerprint vector has zero or non-finite norm");
  const double inv = 1.0 / std::sqrt(sq / static_cast<double>(v.size()));
  std::vector<float> out(v.size());
  for (size_t i = 0; i < v.size(); ++i) out[i] = static_cast<float>(v[i] * inv);
  return out;
}

inline FingerprintImage render_fingerprint(std::span<const float> v, size_t width = kDefaultImageSize,
                                           size_t height = kDefaultImageSize) {
  return Renderer(width, height).render(v);
}

// Mean absolute per-channel difference, normalised to [0, 1].
inline double image_distance(const FingerprintImage& a, const FingerprintImage& b) {
  if (a.width != b.width || a.height != b.height || a.rgb.size() != b.rgb.size()) {
    throw DimensionError("image sizes differ: " + std::to_string(a.width) + "x" + std::to_string(a.height) + " vs " +
                         std::to_string(b.width) + "x" + std::to_string(b.height));
  }
  if (a.rgb.empty()) return 0.0;
  uint64_t total = 0;
  for (size_t i = 0; i < a.rgb.size(); ++i) total += static_cast<uint64_t>(std::abs(int{a.rgb[i]} - int{b.rgb[i]}));
  return static_cast<double>(total) / (255.0 * static_cast<double>(a.rgb.size()));
}

// ---------------------------------------------------------------------------
// Locality

inline constexpr size_t kLocalityMinPairs = 100;

using RenderFn = std::function<FingerprintImage(std::span<const float>)>;

struct LocalityReport {
  double rank_correlation = 0.0;
  std::vector<double> latent_distance;
  std::vector<double> image_distance;
};

// Ranks with ties sharing their average rank.
inline std::vector<double> ranks(std::span<const double> xs) {
  std::vector<size_t> order(xs.size());
  std::iota(order.begin(), order.end(), size_t{0});
  std::stable_sort(order.begin(), order.end(), [&](size_t a, size_t b) { return xs[a] < xs[b]; });
  std::vector<double> r(xs.size());
  for (size_t i = 0; i < order.size();) {
    size_t j = i;
    while (j + 1 < order.size() && xs[order[j + 1]] == xs[order[i]]) ++j;
    const double avg = 0.5 * static_cast<double>(i + j) + 1.0;
    for (size_t t = i; t <= j; ++t) r[order[t]] = avg;
    i = j + 1;
  }
  return r;
}

inline double spearman(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size() || a.size() < 2) throw DimensionError("rank correlation needs two equal-length samples");
  const auto ra = ranks(a), rb = ranks(b);
  const double n = static_cast<double>(a.size());
  const double ma = std::accumulate(ra.begin(), ra.end(), 0.0) / n;
  const double mb = std::accumulate(rb.begin(), rb.end(), 0.0) / n;
  double sab = 0.0, saa = 0.0, sbb = 0.0;
  for (size_t i = 0; i < ra.size(); ++i) {
    sab += (ra[i] - ma) * (rb[i] - mb);
    saa += (ra[i] - ma) * (ra[i] - ma);
    sbb += (rb[i] - mb) * (rb[i] - mb);
  }
  if (saa == 0.0 || sbb == 0.0) return 0.0;
  return sab / std::sqrt(saa * sbb);
}

// Pairs (v, cos(t) v + sin(t) n) with v, n standard normal and t uniform on
// [0, pi/2], so latent distances run from zero to the independent case.
inline LocalityReport locality_check(const RenderFn& render, size_t n_pairs, Rng& rng) {
  if (n_pairs < kLocalityMinPairs) {
    throw RangeError("locality check needs >= " + std::to_string(kLocalityMinPairs) + " pairs, got " +
                     std::to_string(n_pairs));
  }
  LocalityReport report;
  constexpr double kHalfPi = 1.57079632679489661923;
  for (size_t i = 0; i < n_pairs; ++i) {
    std::vector<float> v(kFingerprintDim), w(kFingerprintDim);
    for (float& x : v) x = static_cast<float>(rng.normal());
    const double t = kHalfPi * rng.uniform();
    double dist = 0.0;
    for (size_t j = 0; j < kFingerprintDim; ++j) {
      w[j] = static_cast<float>(std::cos(t) * v[j] + std::sin(t) * rng.normal());
      dist += (static_cast<double>(w[j]) - v[j]) * (static_cast<double>(w[j]) - v[j]);
    }
    report.latent_distance.push_back(std::sqrt(dist));
    report.image_distance.push_back(image_distance(render(v), render(w)));
  }
  report.rank_correlation = spearman(report.latent_distance, report.image_distance);
  return report;
}

inline LocalityReport locality_check(const Renderer& renderer, size_t n_pairs, Rng& rng) {
  return locality_check([&](std::span<const float> v) { return renderer.render(v); }, n_pairs, rng);
}

// ---------------------------------------------------------------------------
// PNG and sidecar

inline std::vector<uint8_t> encode_png(const FingerprintImage& img) {
  if (img.rgb.size() != img.width * img.height * 3) throw DimensionError("pixel buffer does not match image size");
  png_structp png = png_create_write_struct(PNG_LIBPNG_VER_STRING, nullptr, nullptr, nullptr);
  if (png == nullptr) throw IoError("png_create_write_struct failed");
  png_infop info = png_create_info_struct(png);
  if (info == nullptr) {
    png_destroy_write_struct(&png, nullptr);
    throw IoError("png_create_info_struct failed");
  }
  std::vector<uint8_t> out;
  std::vector<png_bytep> rows(img.height);
  if (setjmp(png_jmpbuf(png))) {
    png_destroy_write_struct(&png, &info);
    throw IoError("libpng failed while encoding");
  }
  png_set_write_fn(
      png, &out,
      [](png_structp p, png_bytep data, png_size_t n) {
        auto* buf = static_cast<std::vector<uint8_t>*>(png_get_io_ptr(p));
        buf->insert(buf->end(), data, data + n);
      },
      nullptr);
  png_set_IHDR(png, info, static_cast<png_uint_32>(img.width), static_cast<png_uint_32>(img.height), 8,
               PNG_COLOR_TYPE_RGB, PNG_INTERLACE_NONE, PNG_COMPRESSION_TYPE_DEFAULT, PNG_FILTER_TYPE_DEFAULT);
  png_set_compression_level(png, 9);
  png_write_info(png, info);
  for (size_t y = 0; y < img.height; ++y) rows[y] = const_cast<png_bytep>(img.rgb.data() + y * img.width * 3);
  png_write_image(png, rows.data());
  png_write_end(png, nullptr);
  png_destroy_write_struct(&png, &info);
  return out;
}

inline nlohmann::json image_metadata(const FingerprintImage& img) {
  nlohmann::json j = img.provenance;
  j["width"] = img.width;
  j["height"] = img.height;
  j["renderer_version"] = kRendererVersion;
  return j;
}

// Writes `path` and a JSON sidecar at `path` + ".json".
inline void write_png(const FingerprintImage& img, const std::filesystem::path& path) {
  write_file(path, encode_png(img));
  auto sidecar = path;
  sidecar += ".json";
  write_text_file(sidecar, image_metadata(img).dump(2) + "\n");
}

}  // namespace hrfp
