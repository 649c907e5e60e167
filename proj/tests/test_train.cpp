#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <limits>
#include <string>
#include <vector>

#include "vitlab/dataset.hpp"
#include "vitlab/metrics.hpp"
#include "vitlab/train.hpp"
#include "vitlab/vit.hpp"

using namespace vitlab;

namespace {

TrainConfig fast_config(int epochs, double lr0, std::int64_t batch) {
  TrainConfig cfg;
  cfg.lr0 = lr0;
  cfg.epochs = epochs;
  cfg.batch_size = batch;
  cfg.augment = AugmentationPolicy::none();
  cfg.weight_decay = 0.0;
  return cfg;
}

}  // namespace

TEST_CASE("learning-rate schedule halves every period") {
  TrainConfig cfg;
  CHECK(lr_at_epoch(0, cfg) == doctest::Approx(1e-4).epsilon(1e-12));
  CHECK(lr_at_epoch(24, cfg) == doctest::Approx(1e-4).epsilon(1e-12));
  CHECK(lr_at_epoch(25, cfg) == doctest::Approx(5e-5).epsilon(1e-12));
  CHECK(lr_at_epoch(50, cfg) == doctest::Approx(2.5e-5).epsilon(1e-12));
  CHECK(lr_at_epoch(75, cfg) == doctest::Approx(1.25e-5).epsilon(1e-12));
  CHECK(lr_at_epoch(79, cfg) == doctest::Approx(1.25e-5).epsilon(1e-12));

  for (int e = 1; e < cfg.epochs; ++e) {
    CHECK(lr_at_epoch(e, cfg) <= lr_at_epoch(e - 1, cfg));
    if (e % cfg.lr_period == 0)
      CHECK(lr_at_epoch(e, cfg) < lr_at_epoch(e - 1, cfg));
    else
      CHECK(lr_at_epoch(e, cfg) == lr_at_epoch(e - 1, cfg));
  }
  CHECK_THROWS_AS((void)lr_at_epoch(-1, cfg), std::invalid_argument);
  CHECK_THROWS_AS((void)lr_at_epoch(80, cfg), std::invalid_argument);
}

TEST_CASE("adamw first step matches the hand-evaluated update") {
  Tensor<double> theta(Shape{1}, std::vector<double>{1.0}, true);
  theta.node()->grad = {1.0};
  std::vector<std::pair<std::string, Tensor<double>>> params;
  params.emplace_back("w", theta);

  AdamW<double> opt(0.9, 0.999, 1e-8, 0.0);
  opt.step(params, 0.1);
  CHECK(opt.steps() == 1);
  CHECK(params[0].second.data()[0] == doctest::Approx(0.9).epsilon(1e-6));
}

TEST_CASE("adamw zero-gradient cases") {
  SUBCASE("no decay leaves parameters untouched") {
    Tensor<double> theta(Shape{2}, std::vector<double>{1.5, -0.5}, true);
    std::vector<std::pair<std::string, Tensor<double>>> params;
    params.emplace_back("w", theta);
    AdamW<double> opt(0.9, 0.999, 1e-8, 0.0);
    opt.step(params, 0.1);
    CHECK(params[0].second.data()[0] == 1.5);
    CHECK(params[0].second.data()[1] == -0.5);
  }
  SUBCASE("decoupled decay shrinks parameters by lr*lambda") {
    Tensor<double> theta(Shape{1}, std::vector<double>{1.0}, true);
    std::vector<std::pair<std::string, Tensor<double>>> params;
    params.emplace_back("w", theta);
    AdamW<double> opt(0.9, 0.999, 1e-8, 0.01);
    opt.step(params, 0.1);
    CHECK(params[0].second.data()[0] == doctest::Approx(0.999).epsilon(1e-12));
  }
}

TEST_CASE("adamw update magnitude approaches lr under constant gradient") {
  Tensor<double> theta(Shape{1}, std::vector<double>{0.0}, true);
  std::vector<std::pair<std::string, Tensor<double>>> params;
  params.emplace_back("w", theta);
  AdamW<double> opt(0.9, 0.999, 1e-8, 0.0);
  const double lr = 0.01;
  double before = 0.0, after = 0.0;
  for (int t = 0; t < 100; ++t) {
    params[0].second.node()->grad = {0.5};
    before = params[0].second.data()[0];
    opt.step(params, lr);
    after = params[0].second.data()[0];
  }
  CHECK(std::abs(std::abs(after - before) - lr) < 0.01 * lr);
}

TEST_CASE("cross-entropy gradient is (softmax - one-hot) / batch") {
  Rng rng(3);
  const std::int64_t b = 4;
  const int k = 5;
  std::vector<double> raw(static_cast<std::size_t>(b * k));
  for (auto& v : raw) v = rng.uniform() * 4.0 - 2.0;
  Tensor<double> logits(Shape{b, k}, raw, true);
  std::vector<int> labels{3, 0, 4, 2};

  Tape<double> tape;
  {
    TapeScope<double> scope(tape);
    Tensor<double> loss = cross_entropy(logits, labels);
    tape.backward(loss);
  }
  const auto& grad = logits.node()->grad;
  REQUIRE(grad.size() == raw.size());
  for (std::int64_t i = 0; i < b; ++i) {
    double peak = -1e300;
    for (int c = 0; c < k; ++c) peak = std::max(peak, raw[static_cast<std::size_t>(i * k + c)]);
    double z = 0.0;
    for (int c = 0; c < k; ++c) z += std::exp(raw[static_cast<std::size_t>(i * k + c)] - peak);
    for (int c = 0; c < k; ++c) {
      const double soft = std::exp(raw[static_cast<std::size_t>(i * k + c)] - peak) / z;
      const double expect =
          (soft - (labels[static_cast<std::size_t>(i)] == c ? 1.0 : 0.0)) / static_cast<double>(b);
      CHECK(grad[static_cast<std::size_t>(i * k + c)] ==
            doctest::Approx(expect).epsilon(1e-6));
    }
  }
}

TEST_CASE("fit honors the protocol contracts") {
  DatasetBundle data = generate_synthetic_texture(20, 5);
  auto model = ViT<float>::init(vit_micro(data.patch_spec(7), 2), 1);
  TrainConfig cfg = fast_config(3, 1e-3, 8);
  cfg.seed = 11;
  FitResult result = fit(model, data, cfg);

  REQUIRE(result.log.size() == 3);
  double best = std::numeric_limits<double>::infinity();
  for (int e = 0; e < 3; ++e) {
    CHECK(result.log[static_cast<std::size_t>(e)].epoch == e);
    CHECK(result.log[static_cast<std::size_t>(e)].lr == lr_at_epoch(e, cfg));
    best = std::min(best, result.log[static_cast<std::size_t>(e)].val_loss);
  }
  CHECK(result.best_val_loss == best);
  CHECK(result.best_val_loss <= result.log.back().val_loss);
  CHECK(result.best_epoch >= 0);

  // the snapshot really is the weights that scored best_val_loss
  auto reloaded = ViT<float>::from_checkpoint(result.best, model.cfg.patch);
  CHECK(split_loss(reloaded, data, data.val, cfg.batch_size) ==
        doctest::Approx(result.best_val_loss).epsilon(1e-9));
}

TEST_CASE("fit is bit-reproducible under a fixed seed") {
  DatasetBundle data = generate_synthetic_texture(12, 9);
  TrainConfig cfg = fast_config(2, 1e-3, 8);
  cfg.seed = 4;
  cfg.augment = AugmentationPolicy();  // exercise the augmentation path too

  auto run = [&] {
    auto model = ViT<float>::init(vit_micro(data.patch_spec(7), 2), 2);
    return fit(model, data, cfg);
  };
  FitResult a = run();
  FitResult b = run();
  REQUIRE(a.log.size() == b.log.size());
  for (std::size_t i = 0; i < a.log.size(); ++i) {
    CHECK(a.log[i].train_loss == b.log[i].train_loss);
    CHECK(a.log[i].val_loss == b.log[i].val_loss);
  }
  REQUIRE(a.best.tensors.size() == b.best.tensors.size());
  for (std::size_t i = 0; i < a.best.tensors.size(); ++i)
    CHECK(a.best.tensors[i].second.data == b.best.tensors[i].second.data);
}

TEST_CASE("non-finite loss aborts with the failing epoch") {
  DatasetBundle data = generate_synthetic_texture(12, 9);
  auto model = ViT<float>::init(vit_micro(data.patch_spec(7), 2), 2);
  model.param("cls_token").data()[0] = std::numeric_limits<float>::quiet_NaN();
  TrainConfig cfg = fast_config(1, 1e-3, 8);
  try {
    (void)fit(model, data, cfg);
    CHECK(false);
  } catch (const std::exception& e) {
    const std::string msg = e.what();
    CHECK(msg.find("epoch 0") != std::string::npos);
    CHECK(msg.find("batch") != std::string::npos);
  }
}

TEST_CASE("geometry mismatches are rejected") {
  DatasetBundle data = generate_synthetic_texture(12, 9);
  auto model = ViT<float>::init(vit_micro(PatchSpec{2, 14, 14, 0, 3}, 2), 2);
  TrainConfig cfg = fast_config(1, 1e-3, 8);
  CHECK_THROWS_AS((void)fit(model, data, cfg), std::invalid_argument);
  CHECK_THROWS_AS((void)split_loss(model, data, data.val, 8), std::invalid_argument);
  CHECK_THROWS_AS((void)predict_split(model, data, data.val, 8), std::invalid_argument);
}

TEST_CASE("a micro model overfits a 64-sample subset") {
  DatasetBundle data = generate_synthetic_texture(48, 13);
  DatasetBundle subset = data;
  // 32 train samples per class
  subset.train.n = 64;
  subset.train.images.clear();
  subset.train.labels.clear();
  std::int64_t taken0 = 0, taken1 = 0;
  for (std::int64_t i = 0; i < data.train.n; ++i) {
    auto& taken = data.train.labels[static_cast<std::size_t>(i)] == 0 ? taken0 : taken1;
    if (taken >= 32) continue;
    ++taken;
    const float* img = data.image(data.train, i);
    subset.train.images.insert(subset.train.images.end(), img, img + data.sample_values());
    subset.train.labels.push_back(data.train.labels[static_cast<std::size_t>(i)]);
  }
  REQUIRE(subset.train.labels.size() == 64);

  auto model = ViT<float>::init(vit_micro(subset.patch_spec(4), 2), 3);
  TrainConfig cfg = fast_config(60, 1e-3, 16);
  cfg.seed = 7;
  (void)fit(model, subset, cfg);

  PredictionSet preds = predict_split(model, subset, subset.train, 16);
  auto cm = confusion_matrix(preds);
  CHECK(accuracy(cm, 2) >= 0.99);
}
