#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "vitlab/adapt.hpp"
#include "vitlab/dataset.hpp"
#include "vitlab/metrics.hpp"
#include "vitlab/train.hpp"

namespace vitlab {

// Model selection: a named preset or an explicit geometry.
struct ModelPreset {
  std::string preset = "vit_micro";  // "vit_small" | "vit_micro" | "custom"
  int layers = 0, dim = 0, heads = 0, mlp_ratio = 4;
  double drop_rate = 0.0;

  ViTConfig config(const PatchSpec& patch, int num_classes) const;
};

// One sweep = every (patch size x seed) pair trained and evaluated, plus the
// per-seed prediction-average ensemble and the over-seeds aggregation.
struct ExperimentConfig {
  std::string dataset_path;
  std::string dataset_name;  // empty = derive from the file name
  int dims = 0;              // 0 = take from the dataset, else must match
  ModelPreset model;
  bool model_set = false;
  std::vector<std::int64_t> patch_sizes;
  std::vector<std::uint64_t> seeds{0, 1, 2};
  TrainConfig train;
  bool batch_size_set = false;
  std::string source_checkpoint;  // adapt-from when non-empty
  std::vector<std::int64_t> ensemble;
  bool ensemble_set = false;
  std::string out_dir = "out";

  void validate() const;
};

ExperimentConfig parse_experiment_config(const std::string& json_text);
ExperimentConfig load_experiment_config(const std::string& path);

// Batch-size default is geometry-dependent (128 in 2D, 32 in 3D) unless the
// config pinned one; the run's seed is filled in per task.
TrainConfig effective_train_config(const ExperimentConfig& cfg, const DatasetBundle& bundle);

// Ensemble members resolved against the sweep's patch list: an explicit list
// is taken as-is, otherwise {1,2,4} when all three are swept, else nothing.
std::vector<std::int64_t> resolve_ensemble(const ExperimentConfig& cfg);

struct RunRow {
  std::string dataset;
  int dims = 2;
  std::string patch;  // "2", or "1+2+4" for ensembles
  std::uint64_t seed = 0;
  double acc = 0.0, bal_acc = 0.0, auc = 0.0, gflops = 0.0;
};

struct AggRow {
  std::string dataset;
  int dims = 2;
  std::string patch;
  RunStats acc, bal_acc, auc;
  double gflops = 0.0;
};

// "1+2+4" (CSV cell) and "(1, 2, 4)" (table row label).
std::string ensemble_label(const std::vector<std::int64_t>& members);
std::string ensemble_table_label(const std::vector<std::int64_t>& members);

// Groups per-run rows by patch label; numeric labels ascending, ensemble
// labels after, each aggregated over seeds.
std::vector<AggRow> aggregate_rows(const std::vector<RunRow>& runs);

std::vector<std::vector<std::string>> run_csv_rows(const std::vector<RunRow>& runs);
std::vector<std::vector<std::string>> aggregate_csv_rows(const std::vector<AggRow>& rows);

// rows[0] is the header; every row needs the same arity and comma-free cells.
// Output is UTF-8 with LF line endings.
void write_results_csv(const std::vector<std::vector<std::string>>& rows,
                       const std::string& path);

std::string markdown_table(const std::vector<AggRow>& rows);

struct SweepResult {
  std::vector<RunRow> runs;       // (patch x seed) rows, then per-seed ensembles
  std::vector<AggRow> aggregate;  // per patch ascending, ensemble last
  std::string run_csv, aggregate_csv, markdown;  // written file paths
};

// Trains/evaluates every task (forking `parallel` workers when > 1), writes
// out_dir/<dataset>/<patch>/<seed>/{checkpoint.bin,log.csv,preds.npy,
// metrics.json} plus the sweep-level CSVs and markdown table. With resume,
// tasks whose metrics.json exists are skipped and outputs reproduce
// byte-identically. A failed task aborts after the completed rows are
// flushed to the per-run CSV.
SweepResult run_sweep(const ExperimentConfig& cfg, int parallel = 1, bool resume = false);

std::string run_directory(const std::string& out_dir, const std::string& dataset,
                          std::int64_t patch, std::uint64_t seed);

// Writes input.pgm, grid.pgm, and heatmap.pgm for one channel-last H x W x C
// image under a 2D checkpoint's model; 3D checkpoints are rejected.
struct HeatmapFiles {
  std::string input, grid, heatmap;
  int predicted = 0;
  std::vector<double> probs;
};
HeatmapFiles export_attention_heatmap(const Checkpoint& ckpt, const float* image,
                                      const std::string& out_dir);

// VITLAB_SEED environment value, when set: a single seed overriding the
// config's list (smoke tests).
std::optional<std::uint64_t> parse_seed_override(const char* env_value);

}  // namespace vitlab
