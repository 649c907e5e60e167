#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <iostream>
#include <limits>
#include <string>
#include <vector>

#include "vitlab/augment.hpp"
#include "vitlab/dataset.hpp"
#include "vitlab/metrics.hpp"
#include "vitlab/tensor.hpp"
#include "vitlab/vit.hpp"

namespace vitlab {

enum class Precision { F32, F64 };

struct TrainConfig {
  double lr0 = 1e-4;
  int epochs = 80;
  int lr_period = 25;  // epochs between halvings
  double weight_decay = 0.01;
  double beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
  std::int64_t batch_size = 128;
  std::uint64_t seed = 0;
  double clip_norm = 0.0;  // 0 disables global-norm clipping
  Precision precision = Precision::F32;
  AugmentationPolicy augment;
  bool verbose = false;

  void validate() const {
    if (lr0 <= 0) tensor_fail("lr0 must be positive");
    if (epochs < 1) tensor_fail("epochs must be at least 1");
    if (lr_period < 1) tensor_fail("lr halving period must be at least 1");
    if (batch_size < 1) tensor_fail("batch size must be at least 1");
    if (weight_decay < 0 || beta1 < 0 || beta1 >= 1 || beta2 < 0 || beta2 >= 1 || eps <= 0)
      tensor_fail("optimizer hyperparameters out of range");
    if (clip_norm < 0) tensor_fail("clip norm must be >= 0");
    augment.validate();
  }
};

inline double lr_at_epoch(int epoch, const TrainConfig& cfg) {
  if (epoch < 0 || epoch >= cfg.epochs)
    tensor_fail("epoch " + std::to_string(epoch) + " outside [0, " +
                std::to_string(cfg.epochs) + ")");
  return cfg.lr0 * std::ldexp(1.0, -(epoch / cfg.lr_period));
}

// Decoupled-weight-decay Adam over a named parameter list. Moments live in
// the parameter scalar type; the step count is shared.
template <typename S>
class AdamW {
 public:
  AdamW(double beta1, double beta2, double eps, double weight_decay)
      : b1_(beta1), b2_(beta2), eps_(eps), wd_(weight_decay) {}

  std::int64_t steps() const { return t_; }

  // One update from the gradients accumulated on the parameters. Parameters
  // without a gradient buffer are treated as zero-gradient.
  void step(std::vector<std::pair<std::string, Tensor<S>>>& params, double lr) {
    if (m_.empty()) {
      for (auto& [name, p] : params) {
        m_.emplace_back(p.size(), S(0));
        v_.emplace_back(p.size(), S(0));
      }
    }
    if (m_.size() != params.size()) tensor_fail("optimizer state does not match parameter list");
    ++t_;
    const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (std::size_t i = 0; i < params.size(); ++i) {
      auto& p = params[i].second;
      auto& value = p.data();
      const auto& grad = p.node()->grad;
      auto& m = m_[i];
      auto& v = v_[i];
      if (m.size() != value.size()) tensor_fail("optimizer moment shape drifted");
      for (std::size_t j = 0; j < value.size(); ++j) {
        const double g = grad.empty() ? 0.0 : static_cast<double>(grad[j]);
        const double mj = b1_ * static_cast<double>(m[j]) + (1.0 - b1_) * g;
        const double vj = b2_ * static_cast<double>(v[j]) + (1.0 - b2_) * g * g;
        m[j] = static_cast<S>(mj);
        v[j] = static_cast<S>(vj);
        const double m_hat = mj / bc1;
        const double v_hat = vj / bc2;
        value[j] = static_cast<S>(
            static_cast<double>(value[j]) -
            lr * (m_hat / (std::sqrt(v_hat) + eps_) + wd_ * static_cast<double>(value[j])));
      }
    }
  }

 private:
  double b1_, b2_, eps_, wd_;
  std::int64_t t_ = 0;
  std::vector<std::vector<S>> m_, v_;
};

struct EpochLog {
  int epoch = 0;
  double train_loss = 0.0;
  double val_loss = 0.0;
  double lr = 0.0;
};

struct FitResult {
  Checkpoint best;
  int best_epoch = -1;
  double best_val_loss = 0.0;
  std::vector<EpochLog> log;
};

namespace detail_train {

template <typename S>
void check_geometry(const ViT<S>& model, const DatasetBundle& bundle) {
  const PatchSpec& p = model.cfg.patch;
  if (p.H != bundle.H || p.W != bundle.W || p.D != bundle.D || p.C != bundle.C)
    tensor_fail("model expects " + std::to_string(p.H) + "x" + std::to_string(p.W) +
                (p.is3d() ? "x" + std::to_string(p.D) : "") + "x" + std::to_string(p.C) +
                " inputs, dataset provides " + std::to_string(bundle.H) + "x" +
                std::to_string(bundle.W) + (bundle.is3d() ? "x" + std::to_string(bundle.D) : "") +
                "x" + std::to_string(bundle.C));
}

template <typename S>
std::vector<S> gather(const DatasetBundle& bundle, const SplitData& split,
                      const std::vector<std::int64_t>& indices) {
  const std::int64_t per = bundle.sample_values();
  std::vector<S> out(static_cast<std::size_t>(per) * indices.size());
  for (std::size_t i = 0; i < indices.size(); ++i) {
    const float* src = bundle.image(split, indices[i]);
    for (std::int64_t j = 0; j < per; ++j)
      out[i * static_cast<std::size_t>(per) + static_cast<std::size_t>(j)] =
          static_cast<S>(src[j]);
  }
  return out;
}

}  // namespace detail_train

// Mean cross-entropy of a split under the current weights; no augmentation,
// no gradients.
template <typename S>
double split_loss(ViT<S>& model, const DatasetBundle& bundle, const SplitData& split,
                  std::int64_t batch_size) {
  detail_train::check_geometry(model, bundle);
  if (split.n == 0) tensor_fail("cannot evaluate an empty split");
  double total = 0.0;
  for (std::int64_t at = 0; at < split.n; at += batch_size) {
    const std::int64_t b = std::min(batch_size, split.n - at);
    std::vector<std::int64_t> indices(static_cast<std::size_t>(b));
    for (std::int64_t i = 0; i < b; ++i) indices[static_cast<std::size_t>(i)] = at + i;
    const auto images = detail_train::gather<S>(bundle, split, indices);
    std::vector<int> labels(split.labels.begin() + at, split.labels.begin() + at + b);
    Tensor<S> logits = model.forward_images(images.data(), b);
    Tensor<S> loss = cross_entropy(logits, labels);
    total += static_cast<double>(loss.data()[0]) * static_cast<double>(b);
  }
  return total / static_cast<double>(split.n);
}

// Softmax probabilities for every sample of a split.
template <typename S>
PredictionSet predict_split(ViT<S>& model, const DatasetBundle& bundle, const SplitData& split,
                            std::int64_t batch_size, const std::string& tag = {}) {
  detail_train::check_geometry(model, bundle);
  if (split.n == 0) tensor_fail("cannot evaluate an empty split");
  PredictionSet preds;
  preds.n = split.n;
  preds.k = model.cfg.num_classes;
  preds.labels = split.labels;
  preds.tag = tag;
  preds.probs.resize(static_cast<std::size_t>(split.n * preds.k));
  for (std::int64_t at = 0; at < split.n; at += batch_size) {
    const std::int64_t b = std::min(batch_size, split.n - at);
    std::vector<std::int64_t> indices(static_cast<std::size_t>(b));
    for (std::int64_t i = 0; i < b; ++i) indices[static_cast<std::size_t>(i)] = at + i;
    const auto images = detail_train::gather<S>(bundle, split, indices);
    Tensor<S> logits = model.forward_images(images.data(), b);
    for (std::int64_t i = 0; i < b; ++i) {
      // max-shifted softmax in double
      double peak = -1e300;
      for (int c = 0; c < preds.k; ++c)
        peak = std::max(peak,
                        static_cast<double>(logits.data()[static_cast<std::size_t>(i * preds.k + c)]));
      double z = 0.0;
      for (int c = 0; c < preds.k; ++c)
        z += std::exp(
            static_cast<double>(logits.data()[static_cast<std::size_t>(i * preds.k + c)]) - peak);
      for (int c = 0; c < preds.k; ++c)
        preds.probs[static_cast<std::size_t>((at + i) * preds.k + c)] =
            std::exp(static_cast<double>(
                         logits.data()[static_cast<std::size_t>(i * preds.k + c)]) -
                     peak) /
            z;
    }
  }
  preds.validate();
  return preds;
}

// The training protocol: per-epoch shuffled+augmented train pass, full
// unaugmented validation pass, step-halved learning rate, snapshot on strict
// validation-loss improvement.
template <typename S>
FitResult fit(ViT<S>& model, const DatasetBundle& bundle, const TrainConfig& cfg) {
  cfg.validate();
  detail_train::check_geometry(model, bundle);
  if (bundle.train.n == 0 || bundle.val.n == 0)
    tensor_fail("training needs non-empty train and val splits");

  AdamW<S> opt(cfg.beta1, cfg.beta2, cfg.eps, cfg.weight_decay);
  FitResult result;
  result.best_val_loss = std::numeric_limits<double>::infinity();

  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const double lr = lr_at_epoch(epoch, cfg);
    const auto plan = batches(bundle.train.n, cfg.batch_size, cfg.seed, epoch);
    double train_loss = 0.0;
    for (std::size_t batch_index = 0; batch_index < plan.size(); ++batch_index) {
      const auto& indices = plan[batch_index];
      const std::int64_t b = static_cast<std::int64_t>(indices.size());
      std::vector<S> images(static_cast<std::size_t>(b * bundle.sample_values()));
      std::vector<int> labels(static_cast<std::size_t>(b));
      for (std::int64_t i = 0; i < b; ++i) {
        const std::int64_t idx = indices[static_cast<std::size_t>(i)];
        const float* src = bundle.image(bundle.train, idx);
        std::vector<float> sample(src, src + bundle.sample_values());
        sample = augment_sample(sample, bundle.D, bundle.H, bundle.W, bundle.C, cfg.augment,
                                cfg.seed, idx, epoch);
        for (std::int64_t j = 0; j < bundle.sample_values(); ++j)
          images[static_cast<std::size_t>(i * bundle.sample_values() + j)] =
              static_cast<S>(sample[static_cast<std::size_t>(j)]);
        labels[static_cast<std::size_t>(i)] =
            bundle.train.labels[static_cast<std::size_t>(idx)];
      }

      double loss_value;
      {
        Tape<S> tape;
        TapeScope<S> scope(tape);
        Tensor<S> logits = model.forward_images(
            images.data(), b, true, nullptr,
            Rng::mix(cfg.seed, static_cast<std::uint64_t>(epoch), batch_index));
        Tensor<S> loss = cross_entropy(logits, labels);
        loss_value = static_cast<double>(loss.data()[0]);
        if (!std::isfinite(loss_value))
          tensor_fail("loss became non-finite at epoch " + std::to_string(epoch) + ", batch " +
                      std::to_string(batch_index));
        tape.backward(loss);
      }

      if (cfg.clip_norm > 0.0) {
        double sq = 0.0;
        for (auto& [name, p] : model.params())
          for (S g : p.node()->grad) sq += static_cast<double>(g) * static_cast<double>(g);
        const double norm = std::sqrt(sq);
        if (norm > cfg.clip_norm) {
          const S scale = static_cast<S>(cfg.clip_norm / norm);
          for (auto& [name, p] : model.params())
            for (S& g : p.node()->grad) g *= scale;
        }
      }

      opt.step(model.params(), lr);
      for (auto& [name, p] : model.params()) p.zero_grad();
      train_loss += loss_value * static_cast<double>(b);
    }
    train_loss /= static_cast<double>(bundle.train.n);

    const double val_loss = split_loss(model, bundle, bundle.val, cfg.batch_size);
    if (!std::isfinite(val_loss))
      tensor_fail("validation loss became non-finite at epoch " + std::to_string(epoch));
    result.log.push_back(EpochLog{epoch, train_loss, val_loss, lr});
    if (val_loss < result.best_val_loss) {
      result.best_val_loss = val_loss;
      result.best_epoch = epoch;
      result.best = model.to_checkpoint();
    }
    if (cfg.verbose)
      std::cerr << "epoch " << epoch << "  train " << train_loss << "  val " << val_loss
                << "  lr " << lr << "\n";
  }
  return result;
}

}  // namespace vitlab
