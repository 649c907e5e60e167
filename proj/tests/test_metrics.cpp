#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <vector>

#include "oracles.hpp"
#include "vitlab/metrics.hpp"
#include "vitlab/rng.hpp"

using namespace vitlab;

namespace {

PredictionSet binary_from_scores(const std::vector<double>& scores,
                                 const std::vector<int>& labels) {
  PredictionSet preds;
  preds.n = static_cast<std::int64_t>(scores.size());
  preds.k = 2;
  preds.labels = labels;
  for (double s : scores) {
    preds.probs.push_back(1.0 - s);
    preds.probs.push_back(s);
  }
  return preds;
}

// labels fixed so every class appears; probabilities from small integer grids
// so column ties actually occur
PredictionSet random_instance(Rng& rng, std::int64_t n, int k) {
  PredictionSet preds;
  preds.n = n;
  preds.k = k;
  preds.labels.resize(static_cast<std::size_t>(n));
  for (std::int64_t i = 0; i < n; ++i)
    preds.labels[static_cast<std::size_t>(i)] =
        i < k ? static_cast<int>(i) : static_cast<int>(rng.below(static_cast<std::uint64_t>(k)));
  preds.probs.resize(static_cast<std::size_t>(n * k));
  for (std::int64_t i = 0; i < n; ++i) {
    double row = 0.0;
    std::vector<double> cells(static_cast<std::size_t>(k));
    for (auto& c : cells) {
      c = static_cast<double>(1 + rng.below(5));
      row += c;
    }
    for (int c = 0; c < k; ++c)
      preds.probs[static_cast<std::size_t>(i * k + c)] = cells[static_cast<std::size_t>(c)] / row;
  }
  return preds;
}

}  // namespace

TEST_CASE("confusion matrix counts argmax predictions") {
  PredictionSet preds;
  preds.k = 2;
  auto add = [&](int label, int predicted) {
    preds.labels.push_back(label);
    preds.probs.push_back(predicted == 0 ? 0.9 : 0.1);
    preds.probs.push_back(predicted == 0 ? 0.1 : 0.9);
    preds.n++;
  };
  for (int i = 0; i < 8; ++i) add(0, 0);
  for (int i = 0; i < 2; ++i) add(0, 1);
  for (int i = 0; i < 7; ++i) add(1, 1);
  for (int i = 0; i < 3; ++i) add(1, 0);

  auto cm = confusion_matrix(preds);
  CHECK(cm == std::vector<std::int64_t>{8, 2, 3, 7});
  CHECK(balanced_accuracy(cm, 2) == doctest::Approx(0.75).epsilon(1e-12));
  CHECK(accuracy(cm, 2) == doctest::Approx(0.75).epsilon(1e-12));

  // equal class supports make balanced accuracy collapse to plain accuracy
  CHECK(balanced_accuracy(cm, 2) == doctest::Approx(accuracy(cm, 2)));
}

TEST_CASE("perfect predictions give a diagonal matrix and metric 1") {
  PredictionSet preds;
  preds.k = 3;
  for (int label : {0, 0, 1, 2, 2, 2}) {
    preds.labels.push_back(label);
    for (int c = 0; c < 3; ++c) preds.probs.push_back(c == label ? 0.8 : 0.1);
    preds.n++;
  }
  auto cm = confusion_matrix(preds);
  CHECK(cm == std::vector<std::int64_t>{2, 0, 0, 0, 1, 0, 0, 0, 3});
  CHECK(balanced_accuracy(cm, 3) == 1.0);
  CHECK(accuracy(cm, 3) == 1.0);
  CHECK(auc_one_vs_rest(preds) == 1.0);
}

TEST_CASE("argmax ties break toward the lower class index") {
  const double row[3] = {0.4, 0.4, 0.2};
  CHECK(argmax_class(row, 3) == 0);
  const double row2[3] = {0.2, 0.4, 0.4};
  CHECK(argmax_class(row2, 3) == 1);
}

TEST_CASE("zero-support class is named") {
  std::vector<std::int64_t> cm{3, 0, 0, 0};  // class 1 empty
  try {
    (void)balanced_accuracy(cm, 2);
    CHECK(false);
  } catch (const std::exception& e) {
    CHECK(std::string(e.what()).find("1") != std::string::npos);
  }
}

TEST_CASE("AUC frozen examples") {
  auto preds = binary_from_scores({0.1, 0.4, 0.35, 0.8}, {0, 0, 1, 1});
  CHECK(auc_one_vs_rest(preds) == doctest::Approx(0.75).epsilon(1e-12));

  // reversing the score order reverses the AUC
  auto flipped = binary_from_scores({0.9, 0.6, 0.65, 0.2}, {0, 0, 1, 1});
  CHECK(auc_one_vs_rest(flipped) == doctest::Approx(0.25).epsilon(1e-12));

  // tied scores earn half credit
  auto tied = binary_from_scores({0.2, 0.5, 0.5, 0.9}, {0, 0, 1, 1});
  CHECK(auc_one_vs_rest(tied) == doctest::Approx(0.875).epsilon(1e-12));

  CHECK_THROWS_AS((void)auc_one_vs_rest(binary_from_scores({0.2, 0.6}, {1, 1})),
                  std::invalid_argument);
}

TEST_CASE("AUC is invariant under strictly increasing transforms") {
  Rng rng(17);
  for (int trial = 0; trial < 50; ++trial) {
    const std::int64_t n = 3 + static_cast<std::int64_t>(rng.below(40));
    std::vector<double> scores(static_cast<std::size_t>(n));
    std::vector<int> labels(static_cast<std::size_t>(n));
    labels[0] = 0;
    labels[1] = 1;
    for (std::size_t i = 0; i < scores.size(); ++i) {
      scores[i] = rng.uniform();
      if (i >= 2) labels[i] = static_cast<int>(rng.below(2));
    }
    const double base = auc_one_vs_rest(binary_from_scores(scores, labels));
    auto cubed = scores;
    for (auto& s : cubed) s = s * s * s;
    auto shrunk = scores;
    for (auto& s : shrunk) s = s / (2.0 - s);
    CHECK(auc_one_vs_rest(binary_from_scores(cubed, labels)) ==
          doctest::Approx(base).epsilon(1e-12));
    CHECK(auc_one_vs_rest(binary_from_scores(shrunk, labels)) ==
          doctest::Approx(base).epsilon(1e-12));
  }
}

TEST_CASE("metrics agree with brute-force oracles") {
  Rng rng(23);
  for (int trial = 0; trial < 1000; ++trial) {
    const int k = 2 + static_cast<int>(rng.below(4));
    const std::int64_t n =
        static_cast<std::int64_t>(k) + static_cast<std::int64_t>(rng.below(50 - k));
    PredictionSet preds = random_instance(rng, n, k);

    auto cm = confusion_matrix(preds);
    std::int64_t total = 0;
    for (auto v : cm) total += v;
    CHECK(total == n);

    std::vector<int> argmaxes(static_cast<std::size_t>(n));
    for (std::int64_t i = 0; i < n; ++i)
      argmaxes[static_cast<std::size_t>(i)] = argmax_class(preds.probs.data() + i * k, k);
    const double bal = balanced_accuracy(cm, k);
    CHECK(bal == doctest::Approx(oracle::direct_balanced_accuracy(preds.labels, argmaxes, k))
                     .epsilon(1e-12));

    std::int64_t hits = 0;
    for (std::int64_t i = 0; i < n; ++i)
      if (argmaxes[static_cast<std::size_t>(i)] == preds.labels[static_cast<std::size_t>(i)])
        ++hits;
    CHECK(accuracy(cm, k) == static_cast<double>(hits) / static_cast<double>(n));

    std::vector<double> per_class(static_cast<std::size_t>(k));
    for (int c = 0; c < k; ++c) {
      std::vector<double> scores(static_cast<std::size_t>(n));
      std::vector<int> is_pos(static_cast<std::size_t>(n));
      for (std::int64_t i = 0; i < n; ++i) {
        scores[static_cast<std::size_t>(i)] = preds.prob(i, c);
        is_pos[static_cast<std::size_t>(i)] =
            preds.labels[static_cast<std::size_t>(i)] == c ? 1 : 0;
      }
      per_class[static_cast<std::size_t>(c)] = oracle::pair_count_auc(scores, is_pos);
    }
    double expected = 0.0;
    if (k == 2) {
      expected = per_class[1];  // binary reports class 1 alone
    } else {
      for (double v : per_class) expected += v;
      expected /= static_cast<double>(k);
    }
    CHECK(auc_one_vs_rest(preds) == doctest::Approx(expected).epsilon(1e-12));
  }
}

TEST_CASE("aggregation over runs") {
  RunStats stats = aggregate_runs({1.0, 2.0, 3.0});
  CHECK(stats.mean == doctest::Approx(2.0).epsilon(1e-12));
  CHECK(stats.stdev == doctest::Approx(1.0).epsilon(1e-12));

  RunStats same = aggregate_runs({0.7, 0.7, 0.7});
  CHECK(same.stdev == 0.0);

  RunStats single = aggregate_runs({0.42});
  CHECK(single.mean == 0.42);
  CHECK(single.stdev == 0.0);

  CHECK_THROWS_AS((void)aggregate_runs({}), std::invalid_argument);

  MetricsReport a, b;
  a.acc = 0.8;
  a.bal_acc = 0.7;
  a.auc = 0.9;
  b.acc = 0.6;
  b.bal_acc = 0.5;
  b.auc = 0.7;
  AggregateReport agg = aggregate_reports({a, b});
  CHECK(agg.acc.mean == doctest::Approx(0.7));
  CHECK(agg.bal_acc.mean == doctest::Approx(0.6));
  CHECK(agg.auc.mean == doctest::Approx(0.8));
}

TEST_CASE("ensemble averaging") {
  auto member = [&](double p0) {
    PredictionSet m;
    m.n = 1;
    m.k = 2;
    m.probs = {p0, 1.0 - p0};
    m.labels = {0};
    return m;
  };
  PredictionSet avg = ensemble_average({member(0.9), member(0.6), member(0.3)});
  CHECK(avg.prob(0, 0) == doctest::Approx(0.6).epsilon(1e-12));
  CHECK(avg.prob(0, 1) == doctest::Approx(0.4).epsilon(1e-12));

  Rng rng(31);
  PredictionSet base = random_instance(rng, 20, 4);
  PredictionSet same = ensemble_average({base, base, base});
  for (std::size_t i = 0; i < base.probs.size(); ++i)
    CHECK(same.probs[i] == doctest::Approx(base.probs[i]).epsilon(1e-12));
  for (std::int64_t i = 0; i < base.n; ++i)
    CHECK(argmax_class(same.probs.data() + i * 4, 4) ==
          argmax_class(base.probs.data() + i * 4, 4));

  // row sums survive averaging
  PredictionSet other = random_instance(rng, 20, 4);
  other.labels = base.labels;
  PredictionSet mixed = ensemble_average({base, other});
  for (std::int64_t i = 0; i < mixed.n; ++i) {
    double row = 0.0;
    for (int c = 0; c < 4; ++c) row += mixed.prob(i, c);
    CHECK(row == doctest::Approx(1.0).epsilon(1e-9));
  }

  PredictionSet wrong_n = random_instance(rng, 19, 4);
  CHECK_THROWS_AS((void)ensemble_average({base, wrong_n}), std::invalid_argument);
  PredictionSet wrong_order = base;
  std::swap(wrong_order.labels[0], wrong_order.labels[1]);
  CHECK_THROWS_AS((void)ensemble_average({base, wrong_order}), std::invalid_argument);
  CHECK_THROWS_AS((void)ensemble_average({}), std::invalid_argument);
}
