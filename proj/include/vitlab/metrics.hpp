#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace vitlab {

// Per-sample class probabilities with their ground-truth labels.
struct PredictionSet {
  std::int64_t n = 0;
  int k = 0;
  std::vector<double> probs;  // n x k, rows sum to 1
  std::vector<int> labels;    // n
  std::string tag;            // provenance, e.g. "patch=2 seed=0"

  double prob(std::int64_t i, int c) const {
    return probs[static_cast<std::size_t>(i * k + c)];
  }
  void validate() const;
};

struct RunStats {
  double mean = 0.0;
  double stdev = 0.0;
};

struct MetricsReport {
  int k = 0;
  double acc = 0.0;
  double bal_acc = 0.0;
  double auc = 0.0;
  std::vector<std::int64_t> cm;  // k x k, rows = true class, cols = argmax
};

// Argmax with ties broken toward the lower class index.
int argmax_class(const double* row, int k);

// Entry (i, j) counts samples of true class i predicted as j.
std::vector<std::int64_t> confusion_matrix(const PredictionSet& preds);

double accuracy(const std::vector<std::int64_t>& cm, int k);

// Mean per-class recall; every class needs support.
double balanced_accuracy(const std::vector<std::int64_t>& cm, int k);

// One-vs-rest AUC via the rank statistic (ties credited half). Multi-class
// averages per-class AUCs (macro by default, support-weighted on request);
// binary problems report the class-1 AUC.
double auc_one_vs_rest(const PredictionSet& preds, bool weighted = false);

MetricsReport evaluate(const PredictionSet& preds);

// Arithmetic mean and sample standard deviation (divisor n-1, zero for n=1).
RunStats aggregate_runs(const std::vector<double>& values);

struct AggregateReport {
  RunStats acc, bal_acc, auc;
};
AggregateReport aggregate_reports(const std::vector<MetricsReport>& reports);

// Elementwise mean of the probability matrices; members must agree on N, K,
// and sample order (identical label vectors).
PredictionSet ensemble_average(const std::vector<PredictionSet>& members);

}  // namespace vitlab
