#include <cstdint>
#include <cstdio>
#include <cstdlib>
#include <exception>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "vitlab/cost.hpp"
#include "vitlab/experiment.hpp"

using namespace vitlab;

namespace {

int cmd_run(const std::string& config_path, const std::string& out_dir, int parallel,
            bool resume) {
  ExperimentConfig cfg = load_experiment_config(config_path);
  if (!out_dir.empty()) cfg.out_dir = out_dir;
  if (const auto seed = parse_seed_override(std::getenv("VITLAB_SEED"))) {
    cfg.seeds = {*seed};
    std::fprintf(stderr, "VITLAB_SEED=%llu overrides the config seeds\n",
                 static_cast<unsigned long long>(*seed));
  }
  const SweepResult result = run_sweep(cfg, parallel, resume);
  std::printf("%s", markdown_table(result.aggregate).c_str());
  std::printf("wrote %s\n", result.run_csv.c_str());
  std::printf("wrote %s\n", result.aggregate_csv.c_str());
  std::printf("wrote %s\n", result.markdown.c_str());
  return 0;
}

int cmd_cost(const std::string& preset, int layers, int dim, int heads, int mlp_ratio,
             std::int64_t edge, std::int64_t depth, std::int64_t channels, int classes,
             const std::vector<std::int64_t>& patches, const std::string& mode) {
  const FlopsMode fm = mode == "full" ? FlopsMode::Full : FlopsMode::PaperCompatible;
  std::printf("patch,tokens,macs,gflops\n");
  for (auto p : patches) {
    const PatchSpec spec{p, edge, edge, depth, channels};
    ModelPreset model;
    model.preset = preset;
    model.layers = layers;
    model.dim = dim;
    model.heads = heads;
    model.mlp_ratio = mlp_ratio;
    const CostReport rep = model_flops(model.config(spec, classes), fm);
    std::printf("%lld,%lld,%lld,%.4f\n", static_cast<long long>(p),
                static_cast<long long>(rep.t_total), static_cast<long long>(rep.total_macs),
                rep.total_gflops);
  }
  return 0;
}

int cmd_adapt(const std::string& in_path, const std::string& out_path, std::int64_t patch,
              std::int64_t edge, std::int64_t depth, int classes, const std::string& mode,
              bool fresh_patch_embed, bool no_normalize, std::uint64_t head_seed) {
  const Checkpoint source = load_checkpoint(in_path);
  const Shape& ks = source.at("patch_embed.weight").shape;
  AdaptationPlan plan;
  plan.target = PatchSpec{patch, edge, edge, depth, ks[ks.size() - 2]};
  plan.num_classes = classes > 0 ? classes : source.num_classes();
  plan.mode = mode == "bilinear"    ? InterpMode::Bilinear
              : mode == "trilinear" ? InterpMode::Trilinear
                                    : default_interp_mode(plan.target);
  plan.normalize_inflation = !no_normalize;
  plan.fresh_patch_embed = fresh_patch_embed;
  plan.head_seed = head_seed;
  save_checkpoint(apply_adaptation(source, plan), out_path);
  std::printf("wrote %s (patch=%lld classes=%d)\n", out_path.c_str(),
              static_cast<long long>(patch), plan.num_classes);
  return 0;
}

int cmd_attmap(const std::string& ckpt_path, const std::string& data_path,
               const std::string& name, const std::string& split_name, std::int64_t index,
               const std::string& out_dir) {
  const Checkpoint ckpt = load_checkpoint(ckpt_path);
  DatasetBundle bundle = load_dataset(data_path, name);
  const Shape& ks = ckpt.at("patch_embed.weight").shape;
  if (bundle.C == 1 && !ckpt.is3d() && ks[2] == 3) bundle = to_three_channels(std::move(bundle));
  const SplitData* split = &bundle.test;
  if (split_name == "train")
    split = &bundle.train;
  else if (split_name == "val")
    split = &bundle.val;
  else if (split_name != "test")
    throw std::runtime_error("split must be train, val, or test");
  if (index < 0 || index >= split->n)
    throw std::runtime_error("index " + std::to_string(index) + " outside the " + split_name +
                             " split (" + std::to_string(split->n) + " samples)");
  if (!ckpt.is3d()) {
    const std::int64_t p = ckpt.meta.patch;
    const std::int64_t h = ckpt.meta.grid[0] * p, w = ckpt.meta.grid[1] * p;
    if (bundle.is3d() || bundle.H != h || bundle.W != w || bundle.C != ks[2])
      throw std::runtime_error("checkpoint expects " + std::to_string(h) + "x" +
                               std::to_string(w) + "x" + std::to_string(ks[2]) +
                               " images, dataset provides " + std::to_string(bundle.H) + "x" +
                               std::to_string(bundle.W) + "x" + std::to_string(bundle.C));
  }
  const HeatmapFiles files =
      export_attention_heatmap(ckpt, bundle.image(*split, index), out_dir);
  std::printf("predicted class %d, probabilities", files.predicted);
  for (double p : files.probs) std::printf(" %.4f", p);
  std::printf("\n");
  std::printf("wrote %s\n", files.input.c_str());
  std::printf("wrote %s\n", files.grid.c_str());
  std::printf("wrote %s\n", files.heatmap.c_str());
  return 0;
}

int cmd_synth(const std::string& out_path, std::int64_t per_class, std::uint64_t seed) {
  const DatasetBundle bundle = generate_synthetic_texture(per_class, seed);
  save_dataset(bundle, out_path);
  std::printf("wrote %s (train %lld, val %lld, test %lld)\n", out_path.c_str(),
              static_cast<long long>(bundle.train.n), static_cast<long long>(bundle.val.n),
              static_cast<long long>(bundle.test.n));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"vision-transformer laboratory"};
  app.require_subcommand(1);

  auto* run = app.add_subcommand("run", "train and evaluate a patch-size sweep");
  std::string run_config, run_out;
  int run_parallel = 1;
  bool run_resume = false;
  run->add_option("--config", run_config, "experiment config (JSON)")->required();
  run->add_option("--out", run_out, "output directory (overrides the config)");
  run->add_option("--parallel", run_parallel, "worker processes")->check(CLI::PositiveNumber);
  run->add_flag("--resume", run_resume, "skip runs whose metrics.json exists");

  auto* cost = app.add_subcommand("cost", "report the FLOPs model");
  std::string cost_preset = "vit_small", cost_mode = "paper";
  int cost_layers = 0, cost_dim = 0, cost_heads = 0, cost_mlp = 4, cost_classes = 2;
  std::int64_t cost_edge = 28, cost_depth = 0, cost_channels = 3;
  std::vector<std::int64_t> cost_patches;
  cost->add_option("--model", cost_preset, "vit_small | vit_micro | custom");
  cost->add_option("--layers", cost_layers, "custom model layers");
  cost->add_option("--dim", cost_dim, "custom model width");
  cost->add_option("--heads", cost_heads, "custom model heads");
  cost->add_option("--mlp-ratio", cost_mlp, "custom model MLP ratio");
  cost->add_option("--edge", cost_edge, "input edge length");
  cost->add_option("--depth", cost_depth, "input depth (0 = 2D)");
  cost->add_option("--channels", cost_channels, "input channels");
  cost->add_option("--classes", cost_classes, "class count");
  cost->add_option("--patch", cost_patches, "patch sizes")->required();
  cost->add_option("--mode", cost_mode, "paper | full")
      ->check(CLI::IsMember({"paper", "full"}));

  auto* adapt = app.add_subcommand("adapt", "retarget a checkpoint");
  std::string adapt_in, adapt_out, adapt_mode = "auto";
  std::int64_t adapt_patch = 0, adapt_edge = 28, adapt_depth = 0;
  int adapt_classes = 0;
  bool adapt_fresh = false, adapt_no_norm = false;
  std::uint64_t adapt_seed = 0;
  adapt->add_option("--in", adapt_in, "source checkpoint")->required();
  adapt->add_option("--out", adapt_out, "adapted checkpoint")->required();
  adapt->add_option("--patch", adapt_patch, "target patch size")->required();
  adapt->add_option("--edge", adapt_edge, "target edge length");
  adapt->add_option("--depth", adapt_depth, "target depth (0 = 2D)");
  adapt->add_option("--classes", adapt_classes, "target classes (0 = keep)");
  adapt->add_option("--mode", adapt_mode, "auto | bilinear | trilinear")
      ->check(CLI::IsMember({"auto", "bilinear", "trilinear"}));
  adapt->add_flag("--fresh-patch-embed", adapt_fresh, "reinitialize the kernel");
  adapt->add_flag("--no-normalize", adapt_no_norm, "skip depth normalization");
  adapt->add_option("--head-seed", adapt_seed, "head initialization seed");

  auto* attmap = app.add_subcommand("attmap", "export attention heatmaps");
  std::string att_ckpt, att_data, att_name, att_split = "test", att_out = "attmap";
  std::int64_t att_index = 0;
  attmap->add_option("--ckpt", att_ckpt, "trained 2D checkpoint")->required();
  attmap->add_option("--data", att_data, "dataset archive")->required();
  attmap->add_option("--name", att_name, "dataset name");
  attmap->add_option("--split", att_split, "train | val | test");
  attmap->add_option("--index", att_index, "sample index");
  attmap->add_option("--out", att_out, "output directory");

  auto* synth = app.add_subcommand("synth", "generate the synthetic texture dataset");
  std::string synth_out;
  std::int64_t synth_per_class = 100;
  std::uint64_t synth_seed = 0;
  synth->add_option("--out", synth_out, "output archive")->required();
  synth->add_option("--per-class", synth_per_class, "samples per class");
  synth->add_option("--seed", synth_seed, "generator seed");

  CLI11_PARSE(app, argc, argv);

  try {
    if (run->parsed()) return cmd_run(run_config, run_out, run_parallel, run_resume);
    if (cost->parsed())
      return cmd_cost(cost_preset, cost_layers, cost_dim, cost_heads, cost_mlp, cost_edge,
                      cost_depth, cost_channels, cost_classes, cost_patches, cost_mode);
    if (adapt->parsed())
      return cmd_adapt(adapt_in, adapt_out, adapt_patch, adapt_edge, adapt_depth, adapt_classes,
                       adapt_mode, adapt_fresh, adapt_no_norm, adapt_seed);
    if (attmap->parsed())
      return cmd_attmap(att_ckpt, att_data, att_name, att_split, att_index, att_out);
    if (synth->parsed()) return cmd_synth(synth_out, synth_per_class, synth_seed);
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 1;
}
