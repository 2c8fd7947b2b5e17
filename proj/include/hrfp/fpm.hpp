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

// Fingerprinting-model training: synthetic invariant-like tensors,
// contrastive + adversarial objective, alternating optimisation, and the
// checks that go with it (output gaussianity, finite-difference gradients).
//
// Training never sees real model weights. Every input channel is synthesised
// as P_1 P_2 P_3 P_1^T from standard-normal factors; the positive partner
// perturbs each factor by N(0, alpha^2) noise and the negative partner uses
// fresh factors.
//
// Encoder parameter file ("HRFE"), little-endian:
//   0   magic "HRFE", u8 version, 3 zero bytes
//   8   u64 header length H, then H bytes of compact JSON (training config
//       echo, input channels, geometry, activation slope, tensor index)
//   ..  zero padding to 64 bytes, then one f32 blob per tensor in canonical
//       order (conv1.weight, conv1.bias, ..., conv4.bias), each padded to 64

#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "hrfp/bytes.hpp"
#include "hrfp/checkpoint.hpp"
#include "hrfp/encoder.hpp"
#include "hrfp/error.hpp"
#include "hrfp/numerics.hpp"

namespace hrfp {

enum class OptimizerKind { kSgd, kAdam };

NLOHMANN_JSON_SERIALIZE_ENUM(OptimizerKind, {{OptimizerKind::kSgd, "sgd"}, {OptimizerKind::kAdam, "adam"}})

struct TrainConfig {
  size_t k = 64;
  size_t channels = 6;
  size_t inner_dim = 0;  // inner dimension of the synthetic factors; 0 means K
  double alpha = 0.16;
  size_t batch_size = 10;
  double lr = 1e-4;
  size_t alternation_period = 10;
  size_t epochs = 16;
  size_t steps_per_epoch = 125;
  uint64_t seed = 0;
  OptimizerKind optimizer = OptimizerKind::kAdam;
  std::optional<ConvGeometry> geometry;  // default_geometry(k) when unset
  double leaky_slope = kLeakySlope;

  size_t factor_dim() const { return inner_dim == 0 ? k : inner_dim; }
  ConvGeometry conv_geometry() const { return geometry.value_or(default_geometry(k)); }
  size_t total_steps() const { return epochs * steps_per_epoch; }

  void validate() const {
    if (k == 0 || channels == 0 || batch_size == 0 || alternation_period == 0 || steps_per_epoch == 0) {
      throw RangeError("training config counts must be positive");
    }
    if (!(alpha >= 0.0) || !(lr > 0.0)) throw RangeError("alpha must be >= 0 and lr > 0");
    encoder_spatial_sizes(k, conv_geometry());
  }
};

inline void to_json(nlohmann::json& j, const ConvGeometry& g) {
  j = {{"kernel", g.kernel}, {"stride", g.stride}, {"padding", g.padding}};
}
inline void from_json(const nlohmann::json& j, ConvGeometry& g) {
  j.at("kernel").get_to(g.kernel);
  j.at("stride").get_to(g.stride);
  j.at("padding").get_to(g.padding);
}

inline void to_json(nlohmann::json& j, const TrainConfig& c) {
  j = {{"k", c.k},
       {"channels", c.channels},
       {"inner_dim", c.factor_dim()},
       {"alpha", c.alpha},
       {"batch_size", c.batch_size},
       {"lr", c.lr},
       {"alternation_period", c.alternation_period},
       {"epochs", c.epochs},
       {"steps_per_epoch", c.steps_per_epoch},
       {"seed", c.seed},
       {"optimizer", c.optimizer},
       {"geometry", c.conv_geometry()},
       {"leaky_slope", c.leaky_slope}};
}

inline void from_json(const nlohmann::json& j, TrainConfig& c) {
  j.at("k").get_to(c.k);
  j.at("channels").get_to(c.channels);
  c.inner_dim = j.value("inner_dim", size_t{0});
  j.at("alpha").get_to(c.alpha);
  j.at("batch_size").get_to(c.batch_size);
  j.at("lr").get_to(c.lr);
  j.at("alternation_period").get_to(c.alternation_period);
  j.at("epochs").get_to(c.epochs);
  j.at("steps_per_epoch").get_to(c.steps_per_epoch);
  j.at("seed").get_to(c.seed);
  j.at("optimizer").get_to(c.optimizer);
  if (j.contains("geometry")) c.geometry = j.at("geometry").get<ConvGeometry>();
  c.leaky_slope = j.value("leaky_slope", kLeakySlope);
}

// ---------------------------------------------------------------------------
// Synthetic data

struct ChannelFactors {
  Matrix p1;  // K x d
  Matrix p2;  // d x d
  Matrix p3;  // d x d
};

// Anchor, positive and negative tensors, each channels x K x K.
struct SyntheticTriplet {
  size_t k = 0;
  size_t channels = 0;
  std::vector<float> anchor;
  std::vector<float> positive;
  std::vector<float> negative;
  std::vector<ChannelFactors> anchor_factors;
};

namespace detail {

using FloatMatrix = RowMatrix<float>;

inline FloatMatrix as_eigen(const Matrix& m) {
  return Eigen::Map<const FloatMatrix>(m.values().data(), static_cast<Eigen::Index>(m.rows()),
                                       static_cast<Eigen::Index>(m.cols()));
}

// P_1 P_2 P_3 P_1^T appended to `out`.
inline void append_product(const ChannelFactors& f, std::vector<float>& out) {
  const FloatMatrix p1 = as_eigen(f.p1);
  const FloatMatrix m = ((p1 * as_eigen(f.p2)) * as_eigen(f.p3)) * p1.transpose();
  out.insert(out.end(), m.data(), m.data() + m.size());
}

inline ChannelFactors sample_factors(Rng& rng, size_t k, size_t d) {
  return {sample_gaussian(rng, k, d, 0.0, 1.0), sample_gaussian(rng, d, d, 0.0, 1.0),
          sample_gaussian(rng, d, d, 0.0, 1.0)};
}

inline Matrix perturbed(const Matrix& m, Rng& rng, double alpha) {
  Matrix out = m;
  if (alpha == 0.0) return out;
  for (float& x : out.values()) x = static_cast<float>(x + alpha * rng.normal());
  return out;
}

}  // namespace detail

inline SyntheticTriplet synth_triplet(Rng& rng, size_t k, size_t channels, double alpha, size_t inner_dim = 0) {
  if (!(alpha >= 0.0)) throw RangeError("alpha must be >= 0");
  const size_t d = inner_dim == 0 ? k : inner_dim;
  SyntheticTriplet t;
  t.k = k;
  t.channels = channels;
  for (size_t c = 0; c < channels; ++c) {
    ChannelFactors anchor = detail::sample_factors(rng, k, d);
    const ChannelFactors positive{detail::perturbed(anchor.p1, rng, alpha), detail::perturbed(anchor.p2, rng, alpha),
                                  detail::perturbed(anchor.p3, rng, alpha)};
    const ChannelFactors negative = detail::sample_factors(rng, k, d);
    detail::append_product(anchor, t.anchor);
    detail::append_product(positive, t.positive);
    detail::append_product(negative, t.negative);
    t.anchor_factors.push_back(std::move(anchor));
  }
  return t;
}

// A single synthetic tensor (what the discriminator phase consumes).
inline std::vector<float> synth_tensor(Rng& rng, size_t k, size_t channels, size_t inner_dim = 0) {
  const size_t d = inner_dim == 0 ? k : inner_dim;
  std::vector<float> out;
  out.reserve(channels * k * k);
  for (size_t c = 0; c < channels; ++c) detail::append_product(detail::sample_factors(rng, k, d), out);
  return out;
}

// ---------------------------------------------------------------------------
// Losses

template <typename T>
struct CosineWithGrad {
  T value = 0;
  std::vector<T> da;
  std::vector<T> db;
};

// cos(a, b) and its gradients; throws NumericError on a zero-norm input.
template <typename T>
CosineWithGrad<T> cosine_with_grad(std::span<const T> a, std::span<const T> b) {
  T ab = 0, aa = 0, bb = 0;
  for (size_t i = 0; i < a.size(); ++i) {
    ab += a[i] * b[i];
    aa += a[i] * a[i];
    bb += b[i] * b[i];
  }
  if (aa == T(0) || bb == T(0)) throw NumericError("zero-norm encoder output");
  const T na = std::sqrt(aa), nb = std::sqrt(bb);
  CosineWithGrad<T> out;
  out.value = ab / (na * nb);
  out.da.resize(a.size());
  out.db.resize(b.size());
  for (size_t i = 0; i < a.size(); ++i) {
    out.da[i] = b[i] / (na * nb) - out.value * a[i] / aa;
    out.db[i] = a[i] / (na * nb) - out.value * b[i] / bb;
  }
  return out;
}

struct LossValues {
  double contrastive = 0.0;     // L_C
  double discriminator = 0.0;   // two-sided binary cross-entropy
  double adversarial = 0.0;     // mean log(1 - D(v))
  double generator = 0.0;       // L_C + adversarial
};

// L_C = |1 - cos(v, v+)| + |cos(v, v-)|.
template <typename T>
double contrastive_loss(std::span<const T> v, std::span<const T> pos, std::span<const T> neg) {
  const auto cp = cosine_with_grad<T>(v, pos);
  const auto cn = cosine_with_grad<T>(v, neg);
  return std::abs(1.0 - static_cast<double>(cp.value)) + std::abs(static_cast<double>(cn.value));
}

// Batch losses from encoder outputs and discriminator probabilities.
// d_real / d_fake are D(x) on Gaussian samples and D(v) on encoder outputs.
inline LossValues losses(std::span<const std::vector<double>> v, std::span<const std::vector<double>> pos,
                         std::span<const std::vector<double>> neg, std::span<const double> d_real,
                         std::span<const double> d_fake) {
  LossValues out;
  if (!v.empty()) {
    for (size_t i = 0; i < v.size(); ++i) out.contrastive += contrastive_loss<double>(v[i], pos[i], neg[i]);
    out.contrastive /= static_cast<double>(v.size());
  }
  if (!d_fake.empty()) {
    for (double d : d_fake) out.adversarial += std::log(1.0 - d);
    out.adversarial /= static_cast<double>(d_fake.size());
  }
  if (!d_real.empty() && !d_fake.empty()) {
    double real = 0.0, fake = 0.0;
    for (double d : d_real) real -= std::log(d);
    for (double d : d_fake) fake -= std::log(1.0 - d);
    out.discriminator = real / static_cast<double>(d_real.size()) + fake / static_cast<double>(d_fake.size());
  }
  out.generator = out.contrastive + out.adversarial;
  return out;
}

// ---------------------------------------------------------------------------
// One batch: loss value plus gradients

template <typename T>
struct GeneratorStep {
  double loss = 0.0;
  double contrastive = 0.0;
  double adversarial = 0.0;
  double cos_positive = 0.0;
  double abs_cos_negative = 0.0;
  size_t used = 0;
  size_t skipped = 0;
};

// Generator objective over triplets; stores the mean gradient in `grad` (if
// non-null). Triplets with a zero-norm output are skipped and counted.
template <typename T>
GeneratorStep<T> generator_step(const EncoderParams<T>& enc, const DiscriminatorParams<T>& disc,
                                std::span<const SyntheticTriplet> batch, EncoderParams<T>* grad) {
  GeneratorStep<T> out;
  if (batch.empty()) return out;
  const size_t n = batch.size();
  const size_t k = batch.front().k;
  // Sample order: anchors, then positives, then negatives.
  std::vector<std::span<const float>> inputs;
  inputs.reserve(3 * n);
  for (const auto& t : batch) inputs.emplace_back(t.anchor);
  for (const auto& t : batch) inputs.emplace_back(t.positive);
  for (const auto& t : batch) inputs.emplace_back(t.negative);
  const auto trace = encoder_trace_batch<T>(enc, inputs, k);
  std::vector<T> dv(3 * n * kFingerprintDim, T(0));

  for (size_t i = 0; i < n; ++i) {
    const auto va = trace.output(i), vp = trace.output(n + i), vn = trace.output(2 * n + i);
    CosineWithGrad<T> cp, cn;
    try {
      cp = cosine_with_grad<T>(va, vp);
      cn = cosine_with_grad<T>(va, vn);
    } catch (const NumericError&) {
      ++out.skipped;
      continue;
    }
    ++out.used;
    const auto dtrace = discriminator_trace<T>(disc, va);
    const T z = dtrace.logit;
    out.contrastive += std::abs(1.0 - static_cast<double>(cp.value)) + std::abs(static_cast<double>(cn.value));
    out.adversarial -= static_cast<double>(softplus(z));  // log(1 - sigmoid(z))
    out.cos_positive += cp.value;
    out.abs_cos_negative += std::abs(static_cast<double>(cn.value));
    if (grad == nullptr) continue;

    // d|1 - c|/dc = -sign(1 - c); d|c|/dc = sign(c).
    const T sp = cp.value < T(1) ? T(-1) : T(1);
    const T sn = cn.value >= T(0) ? T(1) : T(-1);
    const auto dv_adv = discriminator_backward<T>(disc, dtrace, -sigmoid(z), nullptr);
    T* da = dv.data() + i * kFingerprintDim;
    T* dp = dv.data() + (n + i) * kFingerprintDim;
    T* dn = dv.data() + (2 * n + i) * kFingerprintDim;
    for (size_t j = 0; j < kFingerprintDim; ++j) {
      da[j] = sp * cp.da[j] + sn * cn.da[j] + dv_adv[j];
      dp[j] = sp * cp.db[j];
      dn[j] = sn * cn.db[j];
    }
  }
  if (out.used == 0) return out;
  const double inv = 1.0 / static_cast<double>(out.used);
  out.contrastive *= inv;
  out.adversarial *= inv;
  out.cos_positive *= inv;
  out.abs_cos_negative *= inv;
  out.loss = out.contrastive + out.adversarial;
  if (grad != nullptr) {
    for (T& x : dv) x = static_cast<T>(x * inv);
    *grad = enc.zeros_like();
    encoder_backward<T>(enc, trace, dv, *grad);
  }
  return out;
}

struct DiscriminatorStep {
  double loss = 0.0;
  double accuracy = 0.0;
};

// Two-sided cross-entropy: -log D(x_real) - log(1 - D(v_fake)).
template <typename T>
DiscriminatorStep discriminator_step(const DiscriminatorParams<T>& disc, std::span<const std::vector<T>> real,
                                     std::span<const std::vector<T>> fake, DiscriminatorParams<T>* grad) {
  DiscriminatorStep out;
  DiscriminatorParams<T> local = disc.zeros_like();
  size_t correct = 0;
  for (const auto& x : real) {
    const auto tr = discriminator_trace<T>(disc, x);
    out.loss += softplus(-tr.logit);
    correct += tr.logit > T(0);
    if (grad != nullptr) discriminator_backward<T>(disc, tr, sigmoid(tr.logit) - T(1), &local);
  }
  for (const auto& v : fake) {
    const auto tf = discriminator_trace<T>(disc, v);
    out.loss += softplus(tf.logit);
    correct += tf.logit <= T(0);
    if (grad != nullptr) discriminator_backward<T>(disc, tf, sigmoid(tf.logit), &local);
  }
  const double n = static_cast<double>(real.size());
  out.loss /= n;
  out.accuracy = static_cast<double>(correct) / static_cast<double>(real.size() + fake.size());
  if (grad != nullptr) {
    local.for_each_tensor([&](const std::string&, std::vector<T>& t) {
      for (T& x : t) x = static_cast<T>(x / n);
    });
    *grad = std::move(local);
  }
  return out;
}

// ---------------------------------------------------------------------------
// Optimisers

template <typename T>
class Optimizer {
 public:
  Optimizer(OptimizerKind kind, double lr) : kind_(kind), lr_(lr) {}

  template <typename Params>
  void step(Params& params, Params& grad) {
    std::vector<std::vector<T>*> ps, gs;
    params.for_each_tensor([&](const std::string&, std::vector<T>& t) { ps.push_back(&t); });
    grad.for_each_tensor([&](const std::string&, std::vector<T>& t) { gs.push_back(&t); });
    if (kind_ == OptimizerKind::kSgd) {
      for (size_t i = 0; i < ps.size(); ++i)
        for (size_t j = 0; j < ps[i]->size(); ++j) (*ps[i])[j] -= static_cast<T>(lr_ * (*gs[i])[j]);
      return;
    }
    constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
    if (first_.empty()) {
      for (auto* p : ps) {
        first_.emplace_back(p->size(), 0.0);
        second_.emplace_back(p->size(), 0.0);
      }
    }
    ++t_;
    const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(t_));
    const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(t_));
    for (size_t i = 0; i < ps.size(); ++i) {
      auto& m = first_[i];
      auto& v = second_[i];
      for (size_t j = 0; j < ps[i]->size(); ++j) {
        const double g = (*gs[i])[j];
        m[j] = kBeta1 * m[j] + (1.0 - kBeta1) * g;
        v[j] = kBeta2 * v[j] + (1.0 - kBeta2) * g * g;
        (*ps[i])[j] -= static_cast<T>(lr_ * (m[j] / c1) / (std::sqrt(v[j] / c2) + kEps));
      }
    }
  }

 private:
  OptimizerKind kind_;
  double lr_;
  size_t t_ = 0;
  std::vector<std::vector<double>> first_, second_;
};

// ---------------------------------------------------------------------------
// Training

struct EpochMetrics {
  size_t epoch = 0;
  double contrastive = 0.0;
  double adversarial = 0.0;
  double cos_positive = 0.0;
  double abs_cos_negative = 0.0;
  double separation = 0.0;  // cos_positive - abs_cos_negative
  double discriminator_loss = 0.0;
  double discriminator_accuracy = 0.0;
  size_t skipped = 0;
};

inline void to_json(nlohmann::json& j, const EpochMetrics& m) {
  j = {{"epoch", m.epoch},
       {"contrastive", m.contrastive},
       {"adversarial", m.adversarial},
       {"cos_positive", m.cos_positive},
       {"abs_cos_negative", m.abs_cos_negative},
       {"separation", m.separation},
       {"discriminator_loss", m.discriminator_loss},
       {"discriminator_accuracy", m.discriminator_accuracy},
       {"skipped", m.skipped}};
}

struct TrainedModel {
  TrainConfig config;
  EncoderParams<float> encoder;
  DiscriminatorParams<float> discriminator;
  std::vector<EpochMetrics> history;
};

inline TrainedModel initial_model(const TrainConfig& config) {
  config.validate();
  const Rng root(config.seed);
  Rng enc_rng = root.split(1);
  Rng disc_rng = root.split(2);
  TrainedModel model;
  model.config = config;
  model.encoder = init_encoder<float>(config.channels, config.conv_geometry(), enc_rng);
  model.encoder.leaky_slope = config.leaky_slope;
  model.discriminator = init_discriminator<float>(disc_rng);
  model.discriminator.leaky_slope = config.leaky_slope;
  return model;
}

// Alternates every `alternation_period` steps between discriminator and
// encoder updates, discriminator first. Deterministic per config.seed.
inline TrainedModel train_fpm(const TrainConfig& config,
                              const std::function<void(const EpochMetrics&)>& on_epoch = nullptr) {
  TrainedModel model = initial_model(config);
  Rng data = Rng(config.seed).split(3);
  Optimizer<float> enc_opt(config.optimizer, config.lr);
  Optimizer<float> disc_opt(config.optimizer, config.lr);
  const size_t k = config.k, c = config.channels, d = config.factor_dim();

  for (size_t epoch = 0; epoch < config.epochs; ++epoch) {
    EpochMetrics m;
    m.epoch = epoch;
    size_t gen_steps = 0, disc_steps = 0;
    for (size_t s = 0; s < config.steps_per_epoch; ++s) {
      const size_t step = epoch * config.steps_per_epoch + s;
      const bool train_discriminator = (step / config.alternation_period) % 2 == 0;
      if (train_discriminator) {
        std::vector<std::vector<float>> real(config.batch_size), fake(config.batch_size);
        for (size_t b = 0; b < config.batch_size; ++b) {
          fake[b] = encoder_forward(model.encoder, synth_tensor(data, k, c, d), k);
          real[b].resize(kFingerprintDim);
          for (float& x : real[b]) x = static_cast<float>(data.normal());
        }
        DiscriminatorParams<float> grad;
        const auto r = discriminator_step<float>(model.discriminator, real, fake, &grad);
        if (!std::isfinite(r.loss)) {
          throw NumericError("discriminator loss diverged at step " + std::to_string(step));
        }
        disc_opt.step(model.discriminator, grad);
        m.discriminator_loss += r.loss;
        m.discriminator_accuracy += r.accuracy;
        ++disc_steps;
      } else {
        std::vector<SyntheticTriplet> batch;
        for (size_t b = 0; b < config.batch_size; ++b) batch.push_back(synth_triplet(data, k, c, config.alpha, d));
        EncoderParams<float> grad;
        const auto r = generator_step<float>(model.encoder, model.discriminator, batch, &grad);
        m.skipped += r.skipped;
        if (r.used == 0) continue;
        if (!std::isfinite(r.loss)) {
          throw NumericError("encoder loss diverged at step " + std::to_string(step) +
                             " (contrastive=" + std::to_string(r.contrastive) +
                             ", adversarial=" + std::to_string(r.adversarial) + ")");
        }
        enc_opt.step(model.encoder, grad);
        m.contrastive += r.contrastive;
        m.adversarial += r.adversarial;
        m.cos_positive += r.cos_positive;
        m.abs_cos_negative += r.abs_cos_negative;
        ++gen_steps;
      }
    }
    if (gen_steps > 0) {
      m.contrastive /= static_cast<double>(gen_steps);
      m.adversarial /= static_cast<double>(gen_steps);
      m.cos_positive /= static_cast<double>(gen_steps);
      m.abs_cos_negative /= static_cast<double>(gen_steps);
    }
    if (disc_steps > 0) {
      m.discriminator_loss /= static_cast<double>(disc_steps);
      m.discriminator_accuracy /= static_cast<double>(disc_steps);
    }
    m.separation = m.cos_positive - m.abs_cos_negative;
    model.history.push_back(m);
    if (on_epoch) on_epoch(m);
  }
  return model;
}

// ---------------------------------------------------------------------------
// Held-out evaluation and output statistics

struct LocalityEvaluation {
  double mean_cos_positive = 0.0;
  double mean_abs_cos_negative = 0.0;
  double ordered_fraction = 0.0;  // cos(v, v+) > cos(v, v-)
};

inline LocalityEvaluation evaluate_locality(const EncoderParams<float>& enc, size_t k, size_t channels, double alpha,
                                            size_t triplets, Rng& rng, size_t inner_dim = 0) {
  LocalityEvaluation out;
  size_t ordered = 0;
  for (size_t i = 0; i < triplets; ++i) {
    const auto t = synth_triplet(rng, k, channels, alpha, inner_dim);
    const auto va = encoder_forward(enc, t.anchor, k);
    const auto vp = encoder_forward(enc, t.positive, k);
    const auto vn = encoder_forward(enc, t.negative, k);
    const double cp = cosine_similarity(va, vp), cn = cosine_similarity(va, vn);
    out.mean_cos_positive += cp;
    out.mean_abs_cos_negative += std::abs(cn);
    ordered += cp > cn;
  }
  out.mean_cos_positive /= static_cast<double>(triplets);
  out.mean_abs_cos_negative /= static_cast<double>(triplets);
  out.ordered_fraction = static_cast<double>(ordered) / static_cast<double>(triplets);
  return out;
}

inline constexpr size_t kGaussianityMinSamples = 100;

struct GaussianityReport {
  std::vector<double> mean, variance, skewness, excess_kurtosis;
  std::vector<bool> coordinate_pass;
  double pass_fraction = 0.0;
  bool pass = false;
};

// Standardises the whole batch by its pooled mean and standard deviation,
// then requires every coordinate to have mean in [-0.2, 0.2], variance in
// [0.5, 2], |skew| <= 0.5 and |excess kurtosis| <= 1.
inline GaussianityReport gaussianity_check(std::span<const std::vector<float>> vs) {
  if (vs.size() < kGaussianityMinSamples) {
    throw RangeError("gaussianity check needs >= " + std::to_string(kGaussianityMinSamples) + " vectors, got " +
                     std::to_string(vs.size()));
  }
  const size_t dim = vs.front().size();
  for (const auto& v : vs) {
    if (v.size() != dim) throw DimensionError("vectors of unequal length");
  }
  const double n = static_cast<double>(vs.size());
  double pooled_mean = 0.0;
  for (const auto& v : vs)
    for (float x : v) pooled_mean += x;
  pooled_mean /= n * static_cast<double>(dim);
  double pooled_var = 0.0;
  for (const auto& v : vs)
    for (float x : v) pooled_var += (x - pooled_mean) * (x - pooled_mean);
  pooled_var /= n * static_cast<double>(dim);
  const double scale = pooled_var > 0.0 ? 1.0 / std::sqrt(pooled_var) : 0.0;

  GaussianityReport r;
  r.mean.resize(dim);
  r.variance.resize(dim);
  r.skewness.resize(dim);
  r.excess_kurtosis.resize(dim);
  r.coordinate_pass.resize(dim);
  size_t passing = 0;
  for (size_t j = 0; j < dim; ++j) {
    double mean = 0.0;
    for (const auto& v : vs) mean += (v[j] - pooled_mean) * scale;
    mean /= n;
    double m2 = 0.0, m3 = 0.0, m4 = 0.0;
    for (const auto& v : vs) {
      const double c = (v[j] - pooled_mean) * scale - mean;
      m2 += c * c;
      m3 += c * c * c;
      m4 += c * c * c * c;
    }
    m2 /= n;
    m3 /= n;
    m4 /= n;
    r.mean[j] = mean;
    r.variance[j] = m2;
    r.skewness[j] = m2 > 0.0 ? m3 / std::pow(m2, 1.5) : 0.0;
    r.excess_kurtosis[j] = m2 > 0.0 ? m4 / (m2 * m2) - 3.0 : 0.0;
    const bool ok = m2 > 0.0 && std::abs(mean) <= 0.2 && m2 >= 0.5 && m2 <= 2.0 && std::abs(r.skewness[j]) <= 0.5 &&
                    std::abs(r.excess_kurtosis[j]) <= 1.0;
    r.coordinate_pass[j] = ok;
    passing += ok;
  }
  r.pass_fraction = static_cast<double>(passing) / static_cast<double>(dim);
  r.pass = passing == dim;
  return r;
}

// ---------------------------------------------------------------------------
// Finite-difference gradient check

struct GradientCheckReport {
  double max_relative_error = 0.0;
  std::map<std::string, double> by_class;   // conv.weight, conv.bias, linear.weight, linear.bias
  std::map<std::string, double> by_tensor;
  size_t checked = 0;
  size_t skipped_kinks = 0;  // probes whose +/- epsilon evaluations straddle a kink
};

namespace detail {

inline double relative_error(double analytic, double numeric) {
  constexpr double kFloor = 1e-10;
  const double scale = std::max({std::abs(analytic), std::abs(numeric), kFloor});
  return std::abs(analytic - numeric) / scale;
}

inline std::string parameter_class(const std::string& tensor) {
  const auto dot = tensor.find('.');
  const std::string family = tensor.rfind("conv", 0) == 0 ? "conv" : "linear";
  return family + tensor.substr(dot);
}

// Which side of every kink the objective sits on: signs of all leaky
// pre-activations and of the arguments of the absolute values.
inline std::vector<bool> kink_pattern(const DiscriminatorParams<double>& disc, std::span<const double> v) {
  std::vector<bool> out;
  const auto t = discriminator_trace<double>(disc, v);
  for (size_t i = 0; i < 3; ++i)
    for (double x : t.pre[i]) out.push_back(x > 0.0);
  return out;
}

inline std::vector<bool> kink_pattern(const EncoderParams<double>& enc, const DiscriminatorParams<double>& disc,
                                      const SyntheticTriplet& t) {
  const std::array<std::span<const float>, 3> inputs{std::span<const float>(t.anchor), t.positive, t.negative};
  const auto trace = encoder_trace_batch<double>(enc, inputs, t.k);
  std::vector<bool> out;
  for (size_t i = 0; i < 3; ++i)
    for (double x : trace.pre[i]) out.push_back(x > 0.0);
  const double cp = cosine_with_grad<double>(trace.output(0), trace.output(1)).value;
  const double cn = cosine_with_grad<double>(trace.output(0), trace.output(2)).value;
  out.push_back(cp < 1.0);
  out.push_back(cn >= 0.0);
  const auto d = kink_pattern(disc, trace.output(0));
  out.insert(out.end(), d.begin(), d.end());
  return out;
}

inline std::vector<bool> kink_pattern(const DiscriminatorParams<double>& disc,
                                      std::span<const std::vector<double>> reals,
                                      std::span<const std::vector<double>> fakes) {
  std::vector<bool> out;
  for (const auto* set : {&reals, &fakes}) {
    for (const auto& v : *set) {
      const auto p = kink_pattern(disc, v);
      out.insert(out.end(), p.begin(), p.end());
    }
  }
  return out;
}

}  // namespace detail

// A well-conditioned instance for finite differences. At the training init
// (std 0.02) pre-activations are of order 1e-3, so an epsilon of 1e-3 steps
// across the leaky kink and the central difference stops measuring the
// derivative. Variance-preserving weights and N(0, 0.1^2) biases keep
// pre-activations of order one.
struct GradientCheckInstance {
  EncoderParams<double> encoder;
  DiscriminatorParams<double> discriminator;
  SyntheticTriplet triplet;
  std::vector<double> real;
};

inline GradientCheckInstance gradient_check_instance(size_t k, size_t channels, Rng& rng) {
  GradientCheckInstance g;
  g.encoder = init_encoder<double>(channels, default_geometry(k), rng);
  g.discriminator = init_discriminator<double>(rng);
  auto rescale = [&](std::vector<double>& w, std::vector<double>& b, size_t fan_in) {
    const double scale = std::sqrt(2.0 / static_cast<double>(fan_in)) / kInitStd;
    for (double& x : w) x *= scale;
    for (double& x : b) x = 0.1 * rng.normal();
  };
  for (auto& layer : g.encoder.conv) rescale(layer.weight, layer.bias, layer.weight.size() / layer.out_channels);
  for (auto& layer : g.discriminator.layers) rescale(layer.weight, layer.bias, layer.in);
  g.triplet = synth_triplet(rng, k, channels, 0.16);
  g.real.resize(kFingerprintDim);
  for (double& x : g.real) x = rng.normal();
  return g;
}

// Central differences in 64-bit against the analytic gradients: the encoder
// under the generator objective on `triplet`, the discriminator under its
// cross-entropy with `real` as the Gaussian sample. `per_tensor` entries
// (chosen with `rng`) are probed in each tensor; 0 probes every entry.
// A probe whose two evaluations land on different sides of a kink than the
// unperturbed point is not a derivative measurement; it is counted in
// `skipped_kinks` instead of being scored.
inline GradientCheckReport gradient_check(const EncoderParams<double>& enc, const DiscriminatorParams<double>& disc,
                                          const SyntheticTriplet& triplet, std::span<const double> real, double eps,
                                          size_t per_tensor, Rng& rng) {
  GradientCheckReport report;
  const std::array<SyntheticTriplet, 1> batch{triplet};
  auto record = [&](const std::string& name, double err) {
    report.max_relative_error = std::max(report.max_relative_error, err);
    auto& t = report.by_tensor[name];
    t = std::max(t, err);
    auto& c = report.by_class[detail::parameter_class(name)];
    c = std::max(c, err);
    ++report.checked;
  };
  auto probes = [&](size_t size) {
    std::vector<size_t> idx;
    if (per_tensor == 0 || per_tensor >= size) {
      idx.resize(size);
      std::iota(idx.begin(), idx.end(), size_t{0});
    } else {
      for (size_t i = 0; i < per_tensor; ++i) idx.push_back(rng.below(size));
    }
    return idx;
  };

  // Encoder parameters.
  EncoderParams<double> enc_grad;
  generator_step<double>(enc, disc, batch, &enc_grad);
  const auto enc_pattern = detail::kink_pattern(enc, disc, triplet);
  EncoderParams<double> probe = enc;
  std::vector<std::pair<std::string, std::vector<double>*>> enc_tensors, enc_grads;
  probe.for_each_tensor([&](const std::string& n, std::vector<double>& t) { enc_tensors.emplace_back(n, &t); });
  enc_grad.for_each_tensor([&](const std::string& n, std::vector<double>& t) { enc_grads.emplace_back(n, &t); });
  for (size_t ti = 0; ti < enc_tensors.size(); ++ti) {
    auto& [name, tensor] = enc_tensors[ti];
    for (size_t i : probes(tensor->size())) {
      const double saved = (*tensor)[i];
      (*tensor)[i] = saved + eps;
      const double up = generator_step<double>(probe, disc, batch, nullptr).loss;
      const bool up_same = detail::kink_pattern(probe, disc, triplet) == enc_pattern;
      (*tensor)[i] = saved - eps;
      const double down = generator_step<double>(probe, disc, batch, nullptr).loss;
      const bool down_same = detail::kink_pattern(probe, disc, triplet) == enc_pattern;
      (*tensor)[i] = saved;
      if (!up_same || !down_same) {
        ++report.skipped_kinks;
        continue;
      }
      record(name, detail::relative_error((*enc_grads[ti].second)[i], (up - down) / (2 * eps)));
    }
  }

  // Discriminator parameters.
  const std::vector<std::vector<double>> reals{std::vector<double>(real.begin(), real.end())};
  const std::vector<std::vector<double>> fakes{encoder_forward(enc, triplet.anchor, triplet.k)};
  DiscriminatorParams<double> disc_grad;
  discriminator_step<double>(disc, reals, fakes, &disc_grad);
  const auto disc_pattern = detail::kink_pattern(disc, reals, fakes);
  DiscriminatorParams<double> dprobe = disc;
  std::vector<std::pair<std::string, std::vector<double>*>> d_tensors, d_grads;
  dprobe.for_each_tensor([&](const std::string& n, std::vector<double>& t) { d_tensors.emplace_back(n, &t); });
  disc_grad.for_each_tensor([&](const std::string& n, std::vector<double>& t) { d_grads.emplace_back(n, &t); });
  for (size_t ti = 0; ti < d_tensors.size(); ++ti) {
    auto& [name, tensor] = d_tensors[ti];
    for (size_t i : probes(tensor->size())) {
      const double saved = (*tensor)[i];
      (*tensor)[i] = saved + eps;
      const double up = discriminator_step<double>(dprobe, reals, fakes, nullptr).loss;
      const bool up_same = detail::kink_pattern(dprobe, reals, fakes) == disc_pattern;
      (*tensor)[i] = saved - eps;
      const double down = discriminator_step<double>(dprobe, reals, fakes, nullptr).loss;
      const bool down_same = detail::kink_pattern(dprobe, reals, fakes) == disc_pattern;
      (*tensor)[i] = saved;
      if (!up_same || !down_same) {
        ++report.skipped_kinks;
        continue;
      }
      record(name, detail::relative_error((*d_grads[ti].second)[i], (up - down) / (2 * eps)));
    }
  }
  return report;
}

// ---------------------------------------------------------------------------
// Parameter file

inline constexpr char kEncoderMagic[4] = {'H', 'R', 'F', 'E'};
inline constexpr uint8_t kEncoderVersion = 1;

inline std::vector<uint8_t> serialize_encoder(const EncoderParams<float>& enc, const TrainConfig& config) {
  nlohmann::json index = nlohmann::json::array();
  enc.for_each_tensor([&](const std::string& name, const std::vector<float>& t) {
    index.push_back({{"name", name}, {"count", t.size()}});
  });
  const nlohmann::json header = {{"config", config},
                                 {"input_channels", enc.input_channels},
                                 {"geometry", enc.geometry},
                                 {"leaky_slope", enc.leaky_slope},
                                 {"widths", kEncoderWidths},
                                 {"rng", std::string(Rng::kAlgorithm)},
                                 {"tensors", std::move(index)}};
  const std::string text = header.dump();
  ByteWriter w;
  w.bytes({reinterpret_cast<const uint8_t*>(kEncoderMagic), 4});
  w.u8(kEncoderVersion);
  w.u8(0);
  w.u8(0);
  w.u8(0);
  w.u64(text.size());
  w.text(text);
  w.pad_to(64);
  enc.for_each_tensor([&](const std::string&, const std::vector<float>& t) {
    w.f32s(t);
    w.pad_to(64);
  });
  return std::move(w.buffer());
}

struct EncoderFile {
  EncoderParams<float> encoder;
  TrainConfig config;
  Digest hash{};  // SHA-256 of the file bytes
};

inline EncoderFile parse_encoder(std::span<const uint8_t> bytes) {
  ByteReader r(bytes);
  const auto magic = r.bytes(4, "magic");
  if (!std::equal(magic.begin(), magic.end(), kEncoderMagic)) throw FormatError("bad magic: not an HRFE encoder");
  const uint8_t version = r.u8("version");
  if (version != kEncoderVersion) throw FormatError("unsupported HRFE version " + std::to_string(version));
  r.bytes(3, "reserved");
  const uint64_t len = r.u64("header length");
  const auto text = r.bytes(len, "header");
  EncoderFile out;
  try {
    const auto header = nlohmann::json::parse(text.begin(), text.end());
    out.config = header.at("config").get<TrainConfig>();
    Rng unused(0);
    out.encoder = init_encoder<float>(header.at("input_channels").get<size_t>(), header.at("geometry").get<ConvGeometry>(),
                                      unused);
    out.encoder.leaky_slope = header.at("leaky_slope").get<double>();
    std::vector<std::pair<std::string, size_t>> index;
    for (const auto& e : header.at("tensors")) index.emplace_back(e.at("name").get<std::string>(), e.at("count").get<size_t>());
    r.seek(aligned(r.position()));
    size_t i = 0;
    out.encoder.for_each_tensor([&](const std::string& name, std::vector<float>& t) {
      if (i >= index.size() || index[i].first != name || index[i].second != t.size()) {
        throw ValidationError("encoder tensor index does not match architecture at " + name);
      }
      t = r.f32s(t.size(), name);
      r.seek(std::min(bytes.size(), aligned(r.position())));
      ++i;
    });
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(std::string("malformed encoder header: ") + e.what());
  }
  out.hash = sha256(bytes);
  return out;
}

inline void write_encoder(const EncoderParams<float>& enc, const TrainConfig& config, const std::filesystem::path& path) {
  write_file(path, serialize_encoder(enc, config));
}

inline EncoderFile read_encoder(const std::filesystem::path& path) { return parse_encoder(read_file(path)); }

}  // namespace hrfp
