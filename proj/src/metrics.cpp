#include "vitlab/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "vitlab/tensor.hpp"

namespace vitlab {

void PredictionSet::validate() const {
  if (n <= 0 || k < 2) tensor_fail("prediction set needs n >= 1 and k >= 2");
  if (static_cast<std::int64_t>(probs.size()) != n * k ||
      static_cast<std::int64_t>(labels.size()) != n)
    tensor_fail("prediction buffers do not match n x k");
  for (std::int64_t i = 0; i < n; ++i) {
    double row = 0.0;
    for (int c = 0; c < k; ++c) {
      const double p = prob(i, c);
      if (p < 0.0) tensor_fail("negative probability at row " + std::to_string(i));
      row += p;
    }
    if (std::abs(row - 1.0) > 1e-6)
      tensor_fail("probability row " + std::to_string(i) + " sums to " + std::to_string(row));
    const int label = labels[static_cast<std::size_t>(i)];
    if (label < 0 || label >= k)
      tensor_fail("label " + std::to_string(label) + " outside [0, " + std::to_string(k) + ")");
  }
}

int argmax_class(const double* row, int k) {
  int best = 0;
  for (int c = 1; c < k; ++c)
    if (row[c] > row[best]) best = c;
  return best;
}

std::vector<std::int64_t> confusion_matrix(const PredictionSet& preds) {
  preds.validate();
  std::vector<std::int64_t> cm(static_cast<std::size_t>(preds.k) * preds.k, 0);
  for (std::int64_t i = 0; i < preds.n; ++i) {
    const int pred = argmax_class(preds.probs.data() + i * preds.k, preds.k);
    cm[static_cast<std::size_t>(preds.labels[static_cast<std::size_t>(i)] * preds.k + pred)]++;
  }
  return cm;
}

double accuracy(const std::vector<std::int64_t>& cm, int k) {
  std::int64_t hit = 0, total = 0;
  for (int i = 0; i < k; ++i)
    for (int j = 0; j < k; ++j) {
      total += cm[static_cast<std::size_t>(i * k + j)];
      if (i == j) hit += cm[static_cast<std::size_t>(i * k + j)];
    }
  if (total == 0) tensor_fail("empty confusion matrix");
  return static_cast<double>(hit) / static_cast<double>(total);
}

double balanced_accuracy(const std::vector<std::int64_t>& cm, int k) {
  double acc = 0.0;
  for (int c = 0; c < k; ++c) {
    std::int64_t support = 0;
    for (int j = 0; j < k; ++j) support += cm[static_cast<std::size_t>(c * k + j)];
    if (support == 0) tensor_fail("class " + std::to_string(c) + " has no support");
    acc += static_cast<double>(cm[static_cast<std::size_t>(c * k + c)]) /
           static_cast<double>(support);
  }
  return acc / static_cast<double>(k);
}

namespace {

// Mann-Whitney AUC from average ranks; ties within a score group share rank.
double binary_auc(const std::vector<double>& scores, const std::vector<char>& is_pos) {
  const std::size_t n = scores.size();
  std::vector<std::size_t> order(n);
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });

  double rank_sum_pos = 0.0;
  std::int64_t pos = 0;
  std::size_t at = 0;
  while (at < n) {
    std::size_t end = at + 1;
    while (end < n && scores[order[end]] == scores[order[at]]) ++end;
    const double avg_rank = (static_cast<double>(at + 1) + static_cast<double>(end)) / 2.0;
    for (std::size_t i = at; i < end; ++i)
      if (is_pos[order[i]]) {
        rank_sum_pos += avg_rank;
        ++pos;
      }
    at = end;
  }
  const std::int64_t neg = static_cast<std::int64_t>(n) - pos;
  return (rank_sum_pos - static_cast<double>(pos) * (static_cast<double>(pos) + 1.0) / 2.0) /
         (static_cast<double>(pos) * static_cast<double>(neg));
}

}  // namespace

double auc_one_vs_rest(const PredictionSet& preds, bool weighted) {
  preds.validate();
  std::vector<std::int64_t> support(static_cast<std::size_t>(preds.k), 0);
  for (int label : preds.labels) support[static_cast<std::size_t>(label)]++;
  for (int c = 0; c < preds.k; ++c)
    if (support[static_cast<std::size_t>(c)] == 0)
      tensor_fail("class " + std::to_string(c) + " absent, one-vs-rest AUC undefined");
  for (int c = 0; c < preds.k; ++c)
    if (support[static_cast<std::size_t>(c)] == preds.n)
      tensor_fail("single-class input, AUC undefined");

  auto class_auc = [&](int c) {
    std::vector<double> scores(static_cast<std::size_t>(preds.n));
    std::vector<char> is_pos(static_cast<std::size_t>(preds.n));
    for (std::int64_t i = 0; i < preds.n; ++i) {
      scores[static_cast<std::size_t>(i)] = preds.prob(i, c);
      is_pos[static_cast<std::size_t>(i)] = preds.labels[static_cast<std::size_t>(i)] == c;
    }
    return binary_auc(scores, is_pos);
  };

  if (preds.k == 2) return class_auc(1);

  double acc = 0.0, weight_total = 0.0;
  for (int c = 0; c < preds.k; ++c) {
    const double w = weighted ? static_cast<double>(support[static_cast<std::size_t>(c)]) : 1.0;
    acc += w * class_auc(c);
    weight_total += w;
  }
  return acc / weight_total;
}

MetricsReport evaluate(const PredictionSet& preds) {
  MetricsReport report;
  report.k = preds.k;
  report.cm = confusion_matrix(preds);
  report.acc = accuracy(report.cm, preds.k);
  report.bal_acc = balanced_accuracy(report.cm, preds.k);
  report.auc = auc_one_vs_rest(preds);
  return report;
}

RunStats aggregate_runs(const std::vector<double>& values) {
  if (values.empty()) tensor_fail("cannot aggregate zero runs");
  bool all_equal = true;
  for (double v : values) all_equal &= (v == values[0]);
  if (all_equal) return RunStats{values[0], 0.0};
  RunStats stats;
  for (double v : values) stats.mean += v;
  stats.mean /= static_cast<double>(values.size());
  if (values.size() > 1) {
    double ss = 0.0;
    for (double v : values) ss += (v - stats.mean) * (v - stats.mean);
    stats.stdev = std::sqrt(ss / static_cast<double>(values.size() - 1));
  }
  return stats;
}

AggregateReport aggregate_reports(const std::vector<MetricsReport>& reports) {
  std::vector<double> acc, bal, auc;
  for (const auto& r : reports) {
    acc.push_back(r.acc);
    bal.push_back(r.bal_acc);
    auc.push_back(r.auc);
  }
  return AggregateReport{aggregate_runs(acc), aggregate_runs(bal), aggregate_runs(auc)};
}

PredictionSet ensemble_average(const std::vector<PredictionSet>& members) {
  if (members.empty()) tensor_fail("cannot ensemble zero members");
  PredictionSet out = members[0];
  for (std::size_t m = 1; m < members.size(); ++m) {
    const auto& member = members[m];
    if (member.n != out.n || member.k != out.k)
      tensor_fail("ensemble member " + std::to_string(m) + " has shape " +
                  std::to_string(member.n) + "x" + std::to_string(member.k) + ", expected " +
                  std::to_string(out.n) + "x" + std::to_string(out.k));
    if (member.labels != out.labels)
      tensor_fail("ensemble member " + std::to_string(m) + " orders samples differently");
    for (std::size_t i = 0; i < out.probs.size(); ++i) out.probs[i] += member.probs[i];
  }
  const double inv = 1.0 / static_cast<double>(members.size());
  for (auto& p : out.probs) p *= inv;
  out.tag = "ensemble";
  out.validate();
  return out;
}

}  // namespace vitlab
