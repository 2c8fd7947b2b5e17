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

// Convolutional fingerprint encoder and MLP discriminator.
//
// Encoder: per-channel RMS normalization of the input, four strided
// convolutions with widths C -> 8 -> 64 -> 256 -> 512 (leaky ReLU after the
// first three, slope 0.2), then a mean over the remaining spatial positions.
// The fingerprint vector has 512 entries regardless of K.
//
// Discriminator: 512 -> 256 -> 128 -> 128 linear layers with leaky ReLU,
// then a scalar read-out through a sigmoid.
//
// Both are templates over the scalar type so the finite-difference check can
// run the exact same code in double.

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>

#include "hrfp/error.hpp"
#include "hrfp/numerics.hpp"

namespace hrfp {

inline constexpr size_t kFingerprintDim = 512;
inline constexpr std::array<size_t, 4> kEncoderWidths = {8, 64, 256, 512};
inline constexpr std::array<size_t, 4> kDiscriminatorWidths = {256, 128, 128, 1};
inline constexpr double kLeakySlope = 0.2;
inline constexpr double kInitStd = 0.02;

struct ConvGeometry {
  size_t kernel = 6;
  size_t stride = 2;
  size_t padding = 2;
  bool operator==(const ConvGeometry&) const = default;
};

// (48, 4, 22) is the published geometry for K = 4096. For K a multiple of 16
// a (6, 2, 2) kernel halves the map at each layer (64 -> 32 -> 16 -> 8 -> 4);
// anything else falls back to (4, 2, 2), which is valid for every K >= 1.
inline ConvGeometry default_geometry(size_t k) {
  if (k == 4096) return {48, 4, 22};
  if (k >= 16 && k % 16 == 0) return {6, 2, 2};
  return {4, 2, 2};
}

inline size_t conv_output_size(size_t n, const ConvGeometry& g) {
  if (g.kernel == 0 || g.stride == 0 || n + 2 * g.padding < g.kernel) {
    throw DimensionError("spatial size " + std::to_string(n) + " too small for kernel " + std::to_string(g.kernel));
  }
  return (n + 2 * g.padding - g.kernel) / g.stride + 1;
}

// Spatial side length after each of the four convolutions.
inline std::array<size_t, 4> encoder_spatial_sizes(size_t k, const ConvGeometry& g) {
  std::array<size_t, 4> out{};
  size_t n = k;
  for (size_t i = 0; i < 4; ++i) out[i] = n = conv_output_size(n, g);
  return out;
}

template <typename T>
using RowMatrix = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename T>
struct ConvLayer {
  size_t in_channels = 0;
  size_t out_channels = 0;
  std::vector<T> weight;  // [out][in][ky][kx]
  std::vector<T> bias;    // [out]
  bool operator==(const ConvLayer&) const = default;
};

template <typename T>
struct LinearLayer {
  size_t in = 0;
  size_t out = 0;
  std::vector<T> weight;  // [out][in]
  std::vector<T> bias;
  bool operator==(const LinearLayer&) const = default;
};

template <typename T>
struct EncoderParams {
  size_t input_channels = 0;
  ConvGeometry geometry;
  double leaky_slope = kLeakySlope;
  std::array<ConvLayer<T>, 4> conv;

  bool operator==(const EncoderParams&) const = default;

  template <typename U>
  EncoderParams<U> cast() const {
    EncoderParams<U> out;
    out.input_channels = input_channels;
    out.geometry = geometry;
    out.leaky_slope = leaky_slope;
    for (size_t i = 0; i < 4; ++i) {
      out.conv[i].in_channels = conv[i].in_channels;
      out.conv[i].out_channels = conv[i].out_channels;
      out.conv[i].weight.assign(conv[i].weight.begin(), conv[i].weight.end());
      out.conv[i].bias.assign(conv[i].bias.begin(), conv[i].bias.end());
    }
    return out;
  }

  // Visits every parameter tensor in canonical order with a stable name.
  template <typename Fn>
  void for_each_tensor(Fn&& fn) {
    for (size_t i = 0; i < 4; ++i) {
      fn("conv" + std::to_string(i + 1) + ".weight", conv[i].weight);
      fn("conv" + std::to_string(i + 1) + ".bias", conv[i].bias);
    }
  }
  template <typename Fn>
  void for_each_tensor(Fn&& fn) const {
    for (size_t i = 0; i < 4; ++i) {
      fn("conv" + std::to_string(i + 1) + ".weight", conv[i].weight);
      fn("conv" + std::to_string(i + 1) + ".bias", conv[i].bias);
    }
  }

  // Same shapes, all zeros; used as a gradient accumulator.
  EncoderParams zeros_like() const {
    EncoderParams z = *this;
    z.for_each_tensor([](const std::string&, std::vector<T>& t) { std::fill(t.begin(), t.end(), T(0)); });
    return z;
  }
};

template <typename T>
struct DiscriminatorParams {
  double leaky_slope = kLeakySlope;
  std::array<LinearLayer<T>, 4> layers;

  bool operator==(const DiscriminatorParams&) const = default;

  template <typename U>
  DiscriminatorParams<U> cast() const {
    DiscriminatorParams<U> out;
    out.leaky_slope = leaky_slope;
    for (size_t i = 0; i < 4; ++i) {
      out.layers[i].in = layers[i].in;
      out.layers[i].out = layers[i].out;
      out.layers[i].weight.assign(layers[i].weight.begin(), layers[i].weight.end());
      out.layers[i].bias.assign(layers[i].bias.begin(), layers[i].bias.end());
    }
    return out;
  }

  template <typename Fn>
  void for_each_tensor(Fn&& fn) {
    for (size_t i = 0; i < 4; ++i) {
      fn("linear" + std::to_string(i + 1) + ".weight", layers[i].weight);
      fn("linear" + std::to_string(i + 1) + ".bias", layers[i].bias);
    }
  }

  DiscriminatorParams zeros_like() const {
    DiscriminatorParams z = *this;
    z.for_each_tensor([](const std::string&, std::vector<T>& t) { std::fill(t.begin(), t.end(), T(0)); });
    return z;
  }
};

template <typename T = float>
EncoderParams<T> init_encoder(size_t input_channels, const ConvGeometry& geometry, Rng& rng) {
  if (input_channels == 0) throw RangeError("encoder needs at least one input channel");
  EncoderParams<T> p;
  p.input_channels = input_channels;
  p.geometry = geometry;
  size_t in = input_channels;
  const size_t taps = geometry.kernel * geometry.kernel;
  for (size_t i = 0; i < 4; ++i) {
    auto& layer = p.conv[i];
    layer.in_channels = in;
    layer.out_channels = kEncoderWidths[i];
    layer.weight.resize(layer.out_channels * in * taps);
    for (T& w : layer.weight) w = static_cast<T>(kInitStd * rng.normal());
    layer.bias.assign(layer.out_channels, T(0));
    in = layer.out_channels;
  }
  return p;
}

template <typename T = float>
DiscriminatorParams<T> init_discriminator(Rng& rng) {
  DiscriminatorParams<T> p;
  size_t in = kFingerprintDim;
  for (size_t i = 0; i < 4; ++i) {
    auto& layer = p.layers[i];
    layer.in = in;
    layer.out = kDiscriminatorWidths[i];
    layer.weight.resize(layer.in * layer.out);
    for (T& w : layer.weight) w = static_cast<T>(kInitStd * rng.normal());
    layer.bias.assign(layer.out, T(0));
    in = layer.out;
  }
  return p;
}

namespace detail {

template <typename T>
T leaky(T x, double slope) {
  return x > T(0) ? x : static_cast<T>(slope) * x;
}

template <typename T>
T leaky_grad(T pre, double slope) {
  return pre > T(0) ? T(1) : static_cast<T>(slope);
}

// Activations are stored [channel][sample][y][x] so that a whole batch goes
// through each layer as one matrix product.
//
// Unfolds output rows [row_begin, row_end) of a convolution over `x`
// (channels x batch x n x n) into a (channels*k*k) x (batch*rows*n_out)
// matrix whose columns are ordered (sample, row, column).
template <typename T>
void im2col(const T* x, size_t channels, size_t batch, size_t n, const ConvGeometry& g, size_t n_out,
            size_t row_begin, size_t row_end, RowMatrix<T>& col) {
  const size_t k = g.kernel;
  const size_t rows = row_end - row_begin;
  const size_t width = batch * rows * n_out;
  col.resize(static_cast<Eigen::Index>(channels * k * k), static_cast<Eigen::Index>(width));
  for (size_t c = 0; c < channels; ++c) {
    for (size_t ky = 0; ky < k; ++ky) {
      for (size_t kx = 0; kx < k; ++kx) {
        T* dst = col.data() + ((c * k + ky) * k + kx) * width;
        for (size_t b = 0; b < batch; ++b) {
          const T* plane = x + (c * batch + b) * n * n;
          for (size_t oy = row_begin; oy < row_end; ++oy) {
            const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.padding);
            T* out_row = dst + (b * rows + oy - row_begin) * n_out;
            if (iy < 0 || iy >= static_cast<long>(n)) {
              std::fill(out_row, out_row + n_out, T(0));
              continue;
            }
            const T* in_row = plane + static_cast<size_t>(iy) * n;
            for (size_t ox = 0; ox < n_out; ++ox) {
              const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.padding);
              out_row[ox] = (ix < 0 || ix >= static_cast<long>(n)) ? T(0) : in_row[ix];
            }
          }
        }
      }
    }
  }
}

// Adjoint of im2col over the full output map: scatters `col` back onto dx.
template <typename T>
void col2im(const RowMatrix<T>& col, size_t channels, size_t batch, size_t n, const ConvGeometry& g, size_t n_out,
            T* dx) {
  const size_t k = g.kernel;
  const size_t positions = n_out * n_out;
  const size_t width = batch * positions;
  for (size_t c = 0; c < channels; ++c) {
    for (size_t ky = 0; ky < k; ++ky) {
      for (size_t kx = 0; kx < k; ++kx) {
        const T* src = col.data() + ((c * k + ky) * k + kx) * width;
        for (size_t b = 0; b < batch; ++b) {
          T* plane = dx + (c * batch + b) * n * n;
          for (size_t oy = 0; oy < n_out; ++oy) {
            const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.padding);
            if (iy < 0 || iy >= static_cast<long>(n)) continue;
            T* in_row = plane + static_cast<size_t>(iy) * n;
            const T* src_row = src + b * positions + oy * n_out;
            for (size_t ox = 0; ox < n_out; ++ox) {
              const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.padding);
              if (ix >= 0 && ix < static_cast<long>(n)) in_row[ix] += src_row[ox];
            }
          }
        }
      }
    }
  }
}

// Keeps one im2col chunk under this many elements (K = 4096 would otherwise
// need a 14-billion-entry matrix for the first layer).
inline constexpr size_t kIm2colBudget = size_t{1} << 24;

// Output is out_channels x batch x n_out x n_out. Chunks over output rows
// when the unfolded input would exceed the budget.
template <typename T>
std::vector<T> conv_forward(const ConvLayer<T>& layer, const ConvGeometry& g, const std::vector<T>& x, size_t batch,
                            size_t n, size_t n_out) {
  const size_t taps = layer.in_channels * g.kernel * g.kernel;
  const size_t positions = n_out * n_out;
  Eigen::Map<const RowMatrix<T>> w(layer.weight.data(), static_cast<Eigen::Index>(layer.out_channels),
                                   static_cast<Eigen::Index>(taps));
  std::vector<T> y(layer.out_channels * batch * positions);
  Eigen::Map<RowMatrix<T>> out(y.data(), static_cast<Eigen::Index>(layer.out_channels),
                               static_cast<Eigen::Index>(batch * positions));
  const size_t rows_per_chunk = std::max<size_t>(1, kIm2colBudget / std::max<size_t>(1, taps * n_out * batch));
  RowMatrix<T> col;
  if (rows_per_chunk >= n_out) {
    im2col(x.data(), layer.in_channels, batch, n, g, n_out, 0, n_out, col);
    out.noalias() = w * col;
  } else {
    // Chunked path, one sample at a time; the column order within a chunk is
    // (row, column) so each chunk is a contiguous block of output positions.
    RowMatrix<T> part;
    for (size_t b = 0; b < batch; ++b) {
      std::vector<T> plane(layer.in_channels * n * n);
      for (size_t c = 0; c < layer.in_channels; ++c) {
        std::copy_n(x.data() + (c * batch + b) * n * n, n * n, plane.data() + c * n * n);
      }
      for (size_t r0 = 0; r0 < n_out; r0 += rows_per_chunk) {
        const size_t r1 = std::min(n_out, r0 + rows_per_chunk);
        im2col(plane.data(), layer.in_channels, 1, n, g, n_out, r0, r1, col);
        part.noalias() = w * col;
        out.middleCols(static_cast<Eigen::Index>(b * positions + r0 * n_out), part.cols()) = part;
      }
    }
  }
  for (size_t o = 0; o < layer.out_channels; ++o) {
    T* row = y.data() + o * batch * positions;
    for (size_t p = 0; p < batch * positions; ++p) row[p] += layer.bias[o];
  }
  return y;
}

}  // namespace detail

// Divides each channel by its root mean square; all-zero channels stay zero.
template <typename T>
std::vector<T> normalize_channels(std::span<const float> m, size_t channels, size_t k) {
  if (m.size() != channels * k * k) throw DimensionError("input length does not match channels x K x K");
  std::vector<T> out(m.size());
  for (size_t c = 0; c < channels; ++c) {
    double sq = 0.0;
    for (size_t i = 0; i < k * k; ++i) sq += static_cast<double>(m[c * k * k + i]) * m[c * k * k + i];
    const double rms = std::sqrt(sq / static_cast<double>(k * k));
    const double scale = rms > 0.0 ? 1.0 / rms : 0.0;
    for (size_t i = 0; i < k * k; ++i) out[c * k * k + i] = static_cast<T>(m[c * k * k + i] * scale);
  }
  return out;
}

// Everything the backward pass needs from one forward pass over a batch.
template <typename T>
struct EncoderTrace {
  size_t k = 0;
  size_t batch = 0;
  std::array<size_t, 5> sizes{};          // spatial side: input, then per layer
  std::array<std::vector<T>, 4> inputs;   // input to each conv layer
  std::array<std::vector<T>, 4> pre;      // conv outputs before activation
  std::vector<T> v;                       // batch x 512, sample-major

  std::span<const T> output(size_t b) const { return {v.data() + b * kFingerprintDim, kFingerprintDim}; }
};

template <typename T>
EncoderTrace<T> encoder_trace_batch(const EncoderParams<T>& params, std::span<const std::span<const float>> ms,
                                    size_t k) {
  EncoderTrace<T> trace;
  trace.k = k;
  trace.batch = ms.size();
  trace.sizes[0] = k;
  const auto spatial = encoder_spatial_sizes(k, params.geometry);
  const size_t batch = ms.size();
  const size_t c_in = params.input_channels;
  std::vector<T> x(c_in * batch * k * k);
  for (size_t b = 0; b < batch; ++b) {
    const auto normalized = normalize_channels<T>(ms[b], c_in, k);
    for (size_t c = 0; c < c_in; ++c) {
      std::copy_n(normalized.data() + c * k * k, k * k, x.data() + (c * batch + b) * k * k);
    }
  }
  for (size_t i = 0; i < 4; ++i) {
    trace.sizes[i + 1] = spatial[i];
    trace.pre[i] = detail::conv_forward(params.conv[i], params.geometry, x, batch, trace.sizes[i], spatial[i]);
    trace.inputs[i] = std::move(x);
    x = trace.pre[i];
    if (i < 3) {
      for (T& value : x) value = detail::leaky(value, params.leaky_slope);
    }
  }
  const size_t positions = spatial[3] * spatial[3];
  trace.v.assign(batch * kFingerprintDim, T(0));
  for (size_t o = 0; o < kFingerprintDim; ++o) {
    for (size_t b = 0; b < batch; ++b) {
      const T* src = x.data() + (o * batch + b) * positions;
      T acc = 0;
      for (size_t p = 0; p < positions; ++p) acc += src[p];
      trace.v[b * kFingerprintDim + o] = acc / static_cast<T>(positions);
    }
  }
  return trace;
}

template <typename T>
EncoderTrace<T> encoder_trace(const EncoderParams<T>& params, std::span<const float> m, size_t k) {
  const std::array<std::span<const float>, 1> one{m};
  return encoder_trace_batch(params, std::span<const std::span<const float>>(one), k);
}

// Fingerprint vector for a C x K x K invariant tensor (channel-major).
template <typename T>
std::vector<T> encoder_forward(const EncoderParams<T>& params, std::span<const float> m, size_t k) {
  return encoder_trace(params, m, k).v;
}

// Accumulates dL/dparams into `grad` given dL/dv (batch x 512, sample-major).
template <typename T>
void encoder_backward(const EncoderParams<T>& params, const EncoderTrace<T>& trace, std::span<const T> dv,
                      EncoderParams<T>& grad) {
  if (dv.size() != trace.batch * kFingerprintDim) throw DimensionError("dv does not match the traced batch");
  const auto& g = params.geometry;
  const size_t batch = trace.batch;
  const size_t positions = trace.sizes[4] * trace.sizes[4];
  std::vector<T> dy(kFingerprintDim * batch * positions);
  for (size_t o = 0; o < kFingerprintDim; ++o)
    for (size_t b = 0; b < batch; ++b)
      std::fill_n(dy.data() + (o * batch + b) * positions, positions,
                  dv[b * kFingerprintDim + o] / static_cast<T>(positions));

  RowMatrix<T> col;
  for (size_t li = 4; li-- > 0;) {
    const auto& layer = params.conv[li];
    auto& glayer = grad.conv[li];
    const size_t n = trace.sizes[li], n_out = trace.sizes[li + 1];
    if (li < 3) {
      for (size_t i = 0; i < dy.size(); ++i) dy[i] *= detail::leaky_grad(trace.pre[li][i], params.leaky_slope);
    }
    const auto out_idx = static_cast<Eigen::Index>(layer.out_channels);
    const auto cols = static_cast<Eigen::Index>(batch * n_out * n_out);
    const auto taps = static_cast<Eigen::Index>(layer.in_channels * g.kernel * g.kernel);
    Eigen::Map<const RowMatrix<T>> dout(dy.data(), out_idx, cols);
    detail::im2col(trace.inputs[li].data(), layer.in_channels, batch, n, g, n_out, 0, n_out, col);
    Eigen::Map<RowMatrix<T>> dw(glayer.weight.data(), out_idx, taps);
    dw.noalias() += dout * col.transpose();
    // Plain loop: Eigen's vectorized sum peels to the first aligned address,
    // which would make the summation order depend on the heap layout.
    for (size_t o = 0; o < layer.out_channels; ++o) {
      const T* row = dy.data() + o * batch * n_out * n_out;
      T acc = 0;
      for (size_t p = 0; p < batch * n_out * n_out; ++p) acc += row[p];
      glayer.bias[o] += acc;
    }
    if (li == 0) break;
    Eigen::Map<const RowMatrix<T>> w(layer.weight.data(), out_idx, taps);
    col.noalias() = w.transpose() * dout;
    std::vector<T> dx(layer.in_channels * batch * n * n, T(0));
    detail::col2im(col, layer.in_channels, batch, n, g, n_out, dx.data());
    dy = std::move(dx);
  }
}

template <typename T>
struct DiscriminatorTrace {
  std::array<std::vector<T>, 4> inputs;
  std::array<std::vector<T>, 4> pre;
  T logit = 0;
};

template <typename T>
DiscriminatorTrace<T> discriminator_trace(const DiscriminatorParams<T>& params, std::span<const T> v) {
  if (v.size() != kFingerprintDim) {
    throw DimensionError("discriminator input must have length " + std::to_string(kFingerprintDim));
  }
  DiscriminatorTrace<T> trace;
  std::vector<T> x(v.begin(), v.end());
  for (size_t i = 0; i < 4; ++i) {
    const auto& layer = params.layers[i];
    Eigen::Map<const RowMatrix<T>> w(layer.weight.data(), static_cast<Eigen::Index>(layer.out),
                                     static_cast<Eigen::Index>(layer.in));
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> xin(x.data(), static_cast<Eigen::Index>(layer.in));
    std::vector<T> z(layer.out);
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> zv(z.data(), static_cast<Eigen::Index>(layer.out));
    zv.noalias() = w * xin;
    for (size_t o = 0; o < layer.out; ++o) z[o] += layer.bias[o];
    trace.inputs[i] = std::move(x);
    trace.pre[i] = z;
    if (i < 3) {
      for (T& value : z) value = detail::leaky(value, params.leaky_slope);
    }
    x = std::move(z);
  }
  trace.logit = x[0];
  return trace;
}

template <typename T>
T sigmoid(T z) {
  return z >= T(0) ? T(1) / (T(1) + std::exp(-z)) : std::exp(z) / (T(1) + std::exp(z));
}

// log(1 + e^z) without overflow.
template <typename T>
T softplus(T z) {
  return z > T(0) ? z + std::log1p(std::exp(-z)) : std::log1p(std::exp(z));
}

// Probability that v is a real Gaussian sample, kept strictly inside (0, 1)
// even when the sigmoid rounds to an endpoint. Losses use the logit directly.
template <typename T>
T discriminator_forward(const DiscriminatorParams<T>& params, std::span<const T> v) {
  const T p = sigmoid(discriminator_trace(params, v).logit);
  return std::clamp(p, std::nextafter(T(0), T(1)), std::nextafter(T(1), T(0)));
}

// Given dL/dlogit, accumulates parameter gradients (if grad != nullptr) and
// returns dL/dv.
template <typename T>
std::vector<T> discriminator_backward(const DiscriminatorParams<T>& params, const DiscriminatorTrace<T>& trace,
                                      T dlogit, DiscriminatorParams<T>* grad) {
  std::vector<T> dz{dlogit};
  for (size_t i = 4; i-- > 0;) {
    const auto& layer = params.layers[i];
    if (i < 3) {
      for (size_t o = 0; o < dz.size(); ++o) dz[o] *= detail::leaky_grad(trace.pre[i][o], params.leaky_slope);
    }
    const auto out_idx = static_cast<Eigen::Index>(layer.out);
    const auto in_idx = static_cast<Eigen::Index>(layer.in);
    Eigen::Map<const Eigen::Matrix<T, Eigen::Dynamic, 1>> dzv(dz.data(), out_idx);
    if (grad != nullptr) {
      auto& gl = grad->layers[i];
      Eigen::Map<RowMatrix<T>> gw(gl.weight.data(), out_idx, in_idx);
      Eigen::Map<const Eigen::Matrix<T, 1, Eigen::Dynamic>> xin(trace.inputs[i].data(), in_idx);
      gw.noalias() += dzv * xin;
      for (size_t o = 0; o < layer.out; ++o) gl.bias[o] += dz[o];
    }
    Eigen::Map<const RowMatrix<T>> w(layer.weight.data(), out_idx, in_idx);
    std::vector<T> dx(layer.in);
    Eigen::Map<Eigen::Matrix<T, Eigen::Dynamic, 1>> dxv(dx.data(), in_idx);
    dxv.noalias() = w.transpose() * dzv;
    dz = std::move(dx);
  }
  return dz;
}

}  // namespace hrfp
