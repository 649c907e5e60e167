#include "vitlab/experiment.hpp"

#include <sys/wait.h>
#include <unistd.h>

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>

#include <json.hpp>

#include "vitlab/cost.hpp"
#include "vitlab/image_io.hpp"
#include "vitlab/npy.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace vitlab {

namespace {

[[noreturn]] void config_fail(const std::string& msg) {
  throw std::runtime_error("config: " + msg);
}

void check_keys(const json& obj, std::initializer_list<const char*> allowed,
                const std::string& where) {
  for (const auto& item : obj.items()) {
    bool known = false;
    for (const char* k : allowed) known |= item.key() == k;
    if (!known) config_fail("unknown key \"" + item.key() + "\" in " + where);
  }
}

double num_field(const json& obj, const char* key, double fallback) {
  if (!obj.contains(key)) return fallback;
  if (!obj[key].is_number()) config_fail(std::string(key) + " must be a number");
  return obj[key].get<double>();
}

std::int64_t int_field(const json& obj, const char* key, std::int64_t fallback) {
  if (!obj.contains(key)) return fallback;
  if (!obj[key].is_number_integer()) config_fail(std::string(key) + " must be an integer");
  return obj[key].get<std::int64_t>();
}

bool bool_field(const json& obj, const char* key, bool fallback) {
  if (!obj.contains(key)) return fallback;
  if (!obj[key].is_boolean()) config_fail(std::string(key) + " must be a boolean");
  return obj[key].get<bool>();
}

std::string str_field(const json& obj, const char* key, const std::string& fallback) {
  if (!obj.contains(key)) return fallback;
  if (!obj[key].is_string()) config_fail(std::string(key) + " must be a string");
  return obj[key].get<std::string>();
}

std::vector<std::int64_t> int_list(const json& value, const char* key) {
  if (!value.is_array()) config_fail(std::string(key) + " must be an array");
  std::vector<std::int64_t> out;
  for (const auto& v : value) {
    if (!v.is_number_integer()) config_fail(std::string(key) + " entries must be integers");
    out.push_back(v.get<std::int64_t>());
  }
  return out;
}

std::string sanitize(const std::string& name) {
  std::string out;
  for (char c : name)
    out += (std::isalnum(static_cast<unsigned char>(c)) || c == '-' || c == '_')
               ? static_cast<char>(std::tolower(static_cast<unsigned char>(c)))
               : '_';
  return out.empty() ? "dataset" : out;
}

std::string format4(double v) {
  char buf[64];
  std::snprintf(buf, sizeof(buf), "%.4f", v);
  return buf;
}

std::string read_text_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::string text((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  return text;
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + path + " for writing");
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  if (!out) throw std::runtime_error("write to " + path + " failed");
}

}  // namespace

ViTConfig ModelPreset::config(const PatchSpec& patch, int num_classes) const {
  if (preset == "vit_small") return vit_small(patch, num_classes, drop_rate);
  if (preset == "vit_micro") return vit_micro(patch, num_classes, drop_rate);
  if (preset == "custom")
    return ViTConfig{layers, dim, heads, mlp_ratio, num_classes, patch, drop_rate};
  config_fail("unknown model preset \"" + preset + "\"");
}

void ExperimentConfig::validate() const {
  if (dataset_path.empty()) config_fail("dataset.path is required");
  if (patch_sizes.empty()) config_fail("patch_sizes must be non-empty");
  std::set<std::int64_t> unique_p;
  for (auto p : patch_sizes) {
    if (p < 1) config_fail("patch size " + std::to_string(p) + " must be positive");
    if (!unique_p.insert(p).second)
      config_fail("patch size " + std::to_string(p) + " listed twice");
  }
  if (seeds.empty()) config_fail("seeds must be non-empty");
  if (dims != 0 && dims != 2 && dims != 3) config_fail("dims must be 2 or 3");
  if (model_set && !source_checkpoint.empty())
    config_fail("model and source_checkpoint are mutually exclusive; the architecture "
                "comes from the checkpoint");
  if (model.preset == "custom") {
    if (model.layers < 1 || model.dim < 1 || model.heads < 1 || model.mlp_ratio < 1)
      config_fail("custom model needs positive layers, dim, heads, mlp_ratio");
  } else if (model.preset != "vit_small" && model.preset != "vit_micro") {
    config_fail("unknown model preset \"" + model.preset + "\"");
  }
  if (ensemble_set && !ensemble.empty()) {
    if (ensemble.size() < 2) config_fail("ensemble needs at least 2 members");
    std::set<std::int64_t> seen;
    for (auto m : ensemble) {
      if (!unique_p.count(m))
        config_fail("ensemble member " + std::to_string(m) + " is not in patch_sizes");
      if (!seen.insert(m).second)
        config_fail("ensemble member " + std::to_string(m) + " listed twice");
    }
  }
  train.validate();
}

ExperimentConfig parse_experiment_config(const std::string& json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::parse_error& e) {
    config_fail(e.what());
  }
  if (!doc.is_object()) config_fail("top level must be an object");
  check_keys(doc,
             {"dataset", "dims", "model", "patch_sizes", "seeds", "train", "augment",
              "source_checkpoint", "ensemble", "out_dir"},
             "the top level");

  ExperimentConfig cfg;
  if (!doc.contains("dataset")) config_fail("dataset is required");
  const json& ds = doc["dataset"];
  if (!ds.is_object()) config_fail("dataset must be an object");
  check_keys(ds, {"path", "name"}, "dataset");
  cfg.dataset_path = str_field(ds, "path", "");
  cfg.dataset_name = str_field(ds, "name", "");

  cfg.dims = static_cast<int>(int_field(doc, "dims", 0));

  if (doc.contains("model")) {
    cfg.model_set = true;
    const json& m = doc["model"];
    if (m.is_string()) {
      cfg.model.preset = m.get<std::string>();
    } else if (m.is_object()) {
      check_keys(m, {"preset", "layers", "dim", "heads", "mlp_ratio", "drop_rate"}, "model");
      const bool geometry = m.contains("layers") || m.contains("dim") || m.contains("heads");
      if (m.contains("preset")) {
        cfg.model.preset = str_field(m, "preset", "");
        if (geometry && cfg.model.preset != "custom")
          config_fail("model preset and explicit geometry are mutually exclusive");
      } else if (geometry) {
        cfg.model.preset = "custom";
      }
      cfg.model.layers = static_cast<int>(int_field(m, "layers", 0));
      cfg.model.dim = static_cast<int>(int_field(m, "dim", 0));
      cfg.model.heads = static_cast<int>(int_field(m, "heads", 0));
      cfg.model.mlp_ratio = static_cast<int>(int_field(m, "mlp_ratio", 4));
      cfg.model.drop_rate = num_field(m, "drop_rate", 0.0);
    } else {
      config_fail("model must be a preset name or an object");
    }
  }

  if (!doc.contains("patch_sizes")) config_fail("patch_sizes is required");
  cfg.patch_sizes = int_list(doc["patch_sizes"], "patch_sizes");

  if (doc.contains("seeds")) {
    cfg.seeds.clear();
    for (auto s : int_list(doc["seeds"], "seeds")) {
      if (s < 0) config_fail("seeds must be non-negative");
      cfg.seeds.push_back(static_cast<std::uint64_t>(s));
    }
  }

  if (doc.contains("train")) {
    const json& t = doc["train"];
    if (!t.is_object()) config_fail("train must be an object");
    check_keys(t,
               {"lr0", "epochs", "lr_period", "weight_decay", "beta1", "beta2", "eps",
                "batch_size", "clip_norm", "verbose"},
               "train");
    cfg.train.lr0 = num_field(t, "lr0", cfg.train.lr0);
    cfg.train.epochs = static_cast<int>(int_field(t, "epochs", cfg.train.epochs));
    cfg.train.lr_period = static_cast<int>(int_field(t, "lr_period", cfg.train.lr_period));
    cfg.train.weight_decay = num_field(t, "weight_decay", cfg.train.weight_decay);
    cfg.train.beta1 = num_field(t, "beta1", cfg.train.beta1);
    cfg.train.beta2 = num_field(t, "beta2", cfg.train.beta2);
    cfg.train.eps = num_field(t, "eps", cfg.train.eps);
    if (t.contains("batch_size")) {
      cfg.train.batch_size = int_field(t, "batch_size", cfg.train.batch_size);
      cfg.batch_size_set = true;
    }
    cfg.train.clip_norm = num_field(t, "clip_norm", cfg.train.clip_norm);
    cfg.train.verbose = bool_field(t, "verbose", cfg.train.verbose);
  }

  if (doc.contains("augment")) {
    const json& a = doc["augment"];
    if (a.is_boolean()) {
      if (!a.get<bool>()) cfg.train.augment = AugmentationPolicy::none();
    } else if (a.is_object()) {
      check_keys(a,
                 {"crop", "crop_scale_lo", "crop_scale_hi", "hflip", "hflip_p", "rotate",
                  "rotate_deg", "jitter", "jitter_amp", "flip3d", "flip3d_p", "rot90", "rot90_p"},
                 "augment");
      AugmentationPolicy& pol = cfg.train.augment;
      pol.crop = bool_field(a, "crop", pol.crop);
      pol.crop_scale_lo = num_field(a, "crop_scale_lo", pol.crop_scale_lo);
      pol.crop_scale_hi = num_field(a, "crop_scale_hi", pol.crop_scale_hi);
      pol.hflip = bool_field(a, "hflip", pol.hflip);
      pol.hflip_p = num_field(a, "hflip_p", pol.hflip_p);
      pol.rotate = bool_field(a, "rotate", pol.rotate);
      pol.rotate_deg = num_field(a, "rotate_deg", pol.rotate_deg);
      pol.jitter = bool_field(a, "jitter", pol.jitter);
      pol.jitter_amp = num_field(a, "jitter_amp", pol.jitter_amp);
      pol.flip3d = bool_field(a, "flip3d", pol.flip3d);
      pol.flip3d_p = num_field(a, "flip3d_p", pol.flip3d_p);
      pol.rot90 = bool_field(a, "rot90", pol.rot90);
      pol.rot90_p = num_field(a, "rot90_p", pol.rot90_p);
    } else {
      config_fail("augment must be an object or a boolean");
    }
  }

  cfg.source_checkpoint = str_field(doc, "source_checkpoint", "");
  if (doc.contains("ensemble")) {
    cfg.ensemble = int_list(doc["ensemble"], "ensemble");
    cfg.ensemble_set = true;
  }
  cfg.out_dir = str_field(doc, "out_dir", cfg.out_dir);

  cfg.validate();
  return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
  std::string text;
  try {
    text = read_text_file(path);
  } catch (const std::exception& e) {
    config_fail(e.what());
  }
  return parse_experiment_config(text);
}

TrainConfig effective_train_config(const ExperimentConfig& cfg, const DatasetBundle& bundle) {
  TrainConfig tc = cfg.train;
  if (!cfg.batch_size_set && bundle.is3d()) tc.batch_size = 32;
  return tc;
}

std::vector<std::int64_t> resolve_ensemble(const ExperimentConfig& cfg) {
  if (cfg.ensemble_set) {
    auto members = cfg.ensemble;
    std::sort(members.begin(), members.end());
    return members;
  }
  const std::vector<std::int64_t> preferred{1, 2, 4};
  for (auto m : preferred)
    if (std::find(cfg.patch_sizes.begin(), cfg.patch_sizes.end(), m) == cfg.patch_sizes.end())
      return {};
  return preferred;
}

std::string ensemble_label(const std::vector<std::int64_t>& members) {
  std::string out;
  for (std::size_t i = 0; i < members.size(); ++i)
    out += (i ? "+" : "") + std::to_string(members[i]);
  return out;
}

std::string ensemble_table_label(const std::vector<std::int64_t>& members) {
  std::string out = "(";
  for (std::size_t i = 0; i < members.size(); ++i)
    out += (i ? ", " : "") + std::to_string(members[i]);
  return out + ")";
}

std::vector<AggRow> aggregate_rows(const std::vector<RunRow>& runs) {
  if (runs.empty()) return {};
  // numeric patch labels ascending, then ensemble labels by first appearance
  std::vector<std::string> order;
  std::vector<std::int64_t> numeric;
  for (const auto& r : runs) {
    if (r.patch.find('+') != std::string::npos) {
      if (std::find(order.begin(), order.end(), r.patch) == order.end()) order.push_back(r.patch);
    } else {
      const std::int64_t p = std::stoll(r.patch);
      if (std::find(numeric.begin(), numeric.end(), p) == numeric.end()) numeric.push_back(p);
    }
  }
  std::sort(numeric.begin(), numeric.end());
  std::vector<std::string> labels;
  for (auto p : numeric) labels.push_back(std::to_string(p));
  labels.insert(labels.end(), order.begin(), order.end());

  std::vector<AggRow> out;
  for (const auto& label : labels) {
    AggRow agg;
    std::vector<double> acc, bal, auc;
    for (const auto& r : runs) {
      if (r.patch != label) continue;
      agg.dataset = r.dataset;
      agg.dims = r.dims;
      agg.patch = label;
      agg.gflops = r.gflops;
      acc.push_back(r.acc);
      bal.push_back(r.bal_acc);
      auc.push_back(r.auc);
    }
    agg.acc = aggregate_runs(acc);
    agg.bal_acc = aggregate_runs(bal);
    agg.auc = aggregate_runs(auc);
    out.push_back(std::move(agg));
  }
  return out;
}

std::vector<std::vector<std::string>> run_csv_rows(const std::vector<RunRow>& runs) {
  std::vector<std::vector<std::string>> rows;
  rows.push_back({"dataset", "dims", "patch_size", "seed", "acc", "bal_acc", "auc", "gflops"});
  for (const auto& r : runs)
    rows.push_back({r.dataset, std::to_string(r.dims), r.patch, std::to_string(r.seed),
                    format4(r.acc), format4(r.bal_acc), format4(r.auc), format4(r.gflops)});
  return rows;
}

std::vector<std::vector<std::string>> aggregate_csv_rows(const std::vector<AggRow>& rows) {
  std::vector<std::vector<std::string>> out;
  out.push_back({"dataset", "dims", "patch_size", "acc_mean", "acc_std", "bal_acc_mean",
                 "bal_acc_std", "auc_mean", "auc_std", "gflops"});
  for (const auto& r : rows)
    out.push_back({r.dataset, std::to_string(r.dims), r.patch, format4(r.acc.mean),
                   format4(r.acc.stdev), format4(r.bal_acc.mean), format4(r.bal_acc.stdev),
                   format4(r.auc.mean), format4(r.auc.stdev), format4(r.gflops)});
  return out;
}

void write_results_csv(const std::vector<std::vector<std::string>>& rows,
                       const std::string& path) {
  if (rows.empty()) throw std::runtime_error("results: no rows to write");
  std::string text;
  for (const auto& row : rows) {
    if (row.size() != rows[0].size())
      throw std::runtime_error("results: rows do not share a schema");
    for (std::size_t i = 0; i < row.size(); ++i) {
      if (row[i].find_first_of(",\n\r") != std::string::npos)
        throw std::runtime_error("results: cell \"" + row[i] + "\" needs quoting");
      text += (i ? "," : "") + row[i];
    }
    text += '\n';
  }
  try {
    write_text_file(path, text);
  } catch (const std::exception& e) {
    throw std::runtime_error("results: " + std::string(e.what()));
  }
}

std::string markdown_table(const std::vector<AggRow>& rows) {
  auto pm = [](const RunStats& s) { return format4(s.mean) + " ± " + format4(s.stdev); };
  std::string text = "| Patch size | Accuracy | Balanced accuracy | AUC | GFLOPs |\n";
  text += "| --- | --- | --- | --- | --- |\n";
  for (const auto& r : rows) {
    std::string label = r.patch;
    if (label.find('+') != std::string::npos) {
      std::vector<std::int64_t> members;
      std::size_t at = 0;
      while (at < label.size()) {
        const std::size_t next = label.find('+', at);
        members.push_back(std::stoll(label.substr(at, next - at)));
        if (next == std::string::npos) break;
        at = next + 1;
      }
      label = ensemble_table_label(members);
    }
    text += "| " + label + " | " + pm(r.acc) + " | " + pm(r.bal_acc) + " | " + pm(r.auc) +
            " | " + format4(r.gflops) + " |\n";
  }
  return text;
}

std::string run_directory(const std::string& out_dir, const std::string& dataset,
                          std::int64_t patch, std::uint64_t seed) {
  return out_dir + "/" + sanitize(dataset) + "/" + std::to_string(patch) + "/" +
         std::to_string(seed);
}

std::optional<std::uint64_t> parse_seed_override(const char* env_value) {
  if (!env_value || !*env_value) return std::nullopt;
  char* end = nullptr;
  const unsigned long long v = std::strtoull(env_value, &end, 10);
  if (!end || *end != '\0')
    config_fail("VITLAB_SEED must be an unsigned integer, got \"" + std::string(env_value) +
                "\"");
  return static_cast<std::uint64_t>(v);
}

namespace {

struct SweepTask {
  std::int64_t patch = 0;
  std::uint64_t seed = 0;
  std::string dir;
};

PredictionSet load_predictions(const std::string& dir, const DatasetBundle& bundle,
                               const std::string& tag) {
  const std::string path = dir + "/preds.npy";
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(in)),
                                   std::istreambuf_iterator<char>());
  NpyArray arr = parse_npy(bytes);
  if (arr.type != NpyType::F8 || arr.shape.size() != 2)
    throw std::runtime_error(path + " is not an n x k double array");
  PredictionSet preds;
  preds.n = arr.shape[0];
  preds.k = static_cast<int>(arr.shape[1]);
  preds.probs = arr.f8;
  preds.labels = bundle.test.labels;
  preds.tag = tag;
  preds.validate();
  return preds;
}

void save_predictions(const std::string& dir, const PredictionSet& preds) {
  NpyArray arr;
  arr.type = NpyType::F8;
  arr.shape = {preds.n, preds.k};
  arr.f8 = preds.probs;
  const auto bytes = serialize_npy(arr);
  std::ofstream out(dir + "/preds.npy", std::ios::binary);
  if (!out) throw std::runtime_error("cannot open " + dir + "/preds.npy for writing");
  out.write(reinterpret_cast<const char*>(bytes.data()),
            static_cast<std::streamsize>(bytes.size()));
  if (!out) throw std::runtime_error("write to " + dir + "/preds.npy failed");
}

}  // namespace

SweepResult run_sweep(const ExperimentConfig& config, int parallel, bool resume) {
  ExperimentConfig cfg = config;
  cfg.validate();
  if (parallel < 1) config_fail("parallel must be >= 1");
  std::sort(cfg.patch_sizes.begin(), cfg.patch_sizes.end());

  std::string name = cfg.dataset_name;
  if (name.empty()) name = fs::path(cfg.dataset_path).stem().string();
  DatasetBundle bundle = load_dataset(cfg.dataset_path, name);
  const int dims = bundle.is3d() ? 3 : 2;
  if (cfg.dims != 0 && cfg.dims != dims)
    config_fail("config says dims=" + std::to_string(cfg.dims) + ", dataset " + bundle.name +
                " is " + std::to_string(dims) + "D");

  std::optional<Checkpoint> source;
  if (!cfg.source_checkpoint.empty()) {
    source = load_checkpoint(cfg.source_checkpoint);
    const Shape& ks = source->at("patch_embed.weight").shape;
    const std::int64_t kernel_c = ks[ks.size() - 2];
    if (bundle.C == 1 && kernel_c == 3) bundle = to_three_channels(std::move(bundle));
  }

  // every geometry must be valid before any training starts
  for (auto p : cfg.patch_sizes) bundle.patch_spec(p).validate();

  const TrainConfig base_tc = effective_train_config(cfg, bundle);
  const std::vector<std::int64_t> members = resolve_ensemble(cfg);
  const std::string ds = sanitize(bundle.name);

  auto model_config = [&](std::int64_t p) -> ViTConfig {
    const PatchSpec spec = bundle.patch_spec(p);
    if (source)
      return ViTConfig{source->meta.layers, source->meta.dim,   source->meta.heads,
                       source->meta.mlp_ratio, bundle.K, spec, 0.0};
    return cfg.model.config(spec, bundle.K);
  };
  auto patch_gflops = [&](std::int64_t p) { return model_flops(model_config(p)).total_gflops; };

  std::vector<SweepTask> tasks;
  for (auto p : cfg.patch_sizes)
    for (auto s : cfg.seeds) tasks.push_back({p, s, run_directory(cfg.out_dir, ds, p, s)});

  auto run_one = [&](const SweepTask& t) {
    if (resume && fs::exists(t.dir + "/metrics.json")) {
      std::fprintf(stderr, "[run] %s patch=%lld seed=%llu already done, skipping\n", ds.c_str(),
                   static_cast<long long>(t.patch), static_cast<unsigned long long>(t.seed));
      return;
    }
    const auto t0 = std::chrono::steady_clock::now();
    fs::create_directories(t.dir);
    TrainConfig tc = base_tc;
    tc.seed = t.seed;
    const ViTConfig mc = model_config(t.patch);

    ViT<float> model = [&] {
      if (source) {
        AdaptationPlan plan;
        plan.target = mc.patch;
        plan.num_classes = bundle.K;
        plan.mode = default_interp_mode(mc.patch);
        plan.head_seed = t.seed;
        return ViT<float>::from_checkpoint(apply_adaptation(*source, plan), mc.patch);
      }
      return ViT<float>::init(mc, t.seed);
    }();

    FitResult fr = fit(model, bundle, tc);
    ViT<float> best = ViT<float>::from_checkpoint(fr.best, mc.patch);
    PredictionSet preds =
        predict_split(best, bundle, bundle.test, tc.batch_size,
                      "patch=" + std::to_string(t.patch) + " seed=" + std::to_string(t.seed));
    const MetricsReport rep = evaluate(preds);

    save_checkpoint(fr.best, t.dir + "/checkpoint.bin");
    std::string log = "epoch,train_loss,val_loss,lr\n";
    for (const auto& e : fr.log) {
      char line[160];
      std::snprintf(line, sizeof(line), "%d,%.10g,%.10g,%.10g\n", e.epoch, e.train_loss,
                    e.val_loss, e.lr);
      log += line;
    }
    write_text_file(t.dir + "/log.csv", log);
    save_predictions(t.dir, preds);

    json m;
    m["dataset"] = bundle.name;
    m["dims"] = dims;
    m["patch_size"] = t.patch;
    m["seed"] = t.seed;
    m["n_test"] = preds.n;
    m["k"] = preds.k;
    m["acc"] = rep.acc;
    m["bal_acc"] = rep.bal_acc;
    m["auc"] = rep.auc;
    m["gflops"] = patch_gflops(t.patch);
    m["best_epoch"] = fr.best_epoch;
    m["best_val_loss"] = fr.best_val_loss;
    // metrics.json lands last so its presence marks a completed run
    write_text_file(t.dir + "/metrics.json.tmp", m.dump(2) + "\n");
    fs::rename(t.dir + "/metrics.json.tmp", t.dir + "/metrics.json");

    const double secs =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    std::fprintf(stderr, "[run] %s patch=%lld seed=%llu best_epoch=%d val=%.6f acc=%.4f (%.1fs)\n",
                 ds.c_str(), static_cast<long long>(t.patch),
                 static_cast<unsigned long long>(t.seed), fr.best_epoch, fr.best_val_loss,
                 rep.acc, secs);
  };

  fs::create_directories(cfg.out_dir);
  std::string failure;
  if (parallel == 1) {
    for (const auto& t : tasks) {
      try {
        run_one(t);
      } catch (const std::exception& e) {
        failure = "run patch=" + std::to_string(t.patch) + " seed=" + std::to_string(t.seed) +
                  " failed: " + e.what();
        break;
      }
    }
  } else {
    std::map<pid_t, std::size_t> inflight;
    std::size_t next = 0;
    bool failed = false;
    while ((next < tasks.size() && !failed) || !inflight.empty()) {
      while (!failed && next < tasks.size() &&
             inflight.size() < static_cast<std::size_t>(parallel)) {
        const pid_t pid = fork();
        if (pid < 0) {
          failed = true;
          failure = "fork failed";
          break;
        }
        if (pid == 0) {
          try {
            run_one(tasks[next]);
          } catch (const std::exception& e) {
            std::fprintf(stderr, "run patch=%lld seed=%llu failed: %s\n",
                         static_cast<long long>(tasks[next].patch),
                         static_cast<unsigned long long>(tasks[next].seed), e.what());
            std::_Exit(1);
          }
          std::_Exit(0);
        }
        inflight[pid] = next++;
      }
      if (inflight.empty()) break;
      int status = 0;
      const pid_t done = waitpid(-1, &status, 0);
      if (done <= 0) continue;
      const auto it = inflight.find(done);
      if (it == inflight.end()) continue;
      if (!(WIFEXITED(status) && WEXITSTATUS(status) == 0) && !failed) {
        failed = true;
        const auto& t = tasks[it->second];
        failure = "run patch=" + std::to_string(t.patch) + " seed=" + std::to_string(t.seed) +
                  " failed";
      }
      inflight.erase(it);
    }
  }

  // collect whatever completed, flush, and only then fail the sweep
  SweepResult result;
  result.run_csv = cfg.out_dir + "/results.csv";
  for (const auto& t : tasks) {
    const std::string mpath = t.dir + "/metrics.json";
    if (!fs::exists(mpath)) {
      if (failure.empty()) failure = "run patch=" + std::to_string(t.patch) + " seed=" +
                                     std::to_string(t.seed) + " left no metrics.json";
      continue;
    }
    const json m = json::parse(read_text_file(mpath));
    result.runs.push_back(RunRow{ds, dims, std::to_string(t.patch), t.seed,
                                 m.at("acc").get<double>(), m.at("bal_acc").get<double>(),
                                 m.at("auc").get<double>(), m.at("gflops").get<double>()});
  }
  if (!failure.empty()) {
    write_results_csv(run_csv_rows(result.runs), result.run_csv);
    throw std::runtime_error(failure);
  }

  if (!members.empty()) {
    const std::string label = ensemble_label(members);
    double ensemble_gflops = 0.0;
    for (auto p : members) ensemble_gflops += patch_gflops(p);
    for (auto s : cfg.seeds) {
      std::vector<PredictionSet> sets;
      for (auto p : members)
        sets.push_back(load_predictions(run_directory(cfg.out_dir, ds, p, s), bundle,
                                        "patch=" + std::to_string(p)));
      const MetricsReport rep = evaluate(ensemble_average(sets));
      result.runs.push_back(
          RunRow{ds, dims, label, s, rep.acc, rep.bal_acc, rep.auc, ensemble_gflops});
    }
  }

  write_results_csv(run_csv_rows(result.runs), result.run_csv);
  result.aggregate = aggregate_rows(result.runs);
  result.aggregate_csv = cfg.out_dir + "/aggregated.csv";
  write_results_csv(aggregate_csv_rows(result.aggregate), result.aggregate_csv);
  result.markdown = cfg.out_dir + "/results.md";
  write_text_file(result.markdown, markdown_table(result.aggregate));
  return result;
}

HeatmapFiles export_attention_heatmap(const Checkpoint& ckpt, const float* image,
                                      const std::string& out_dir) {
  validate_checkpoint(ckpt);
  if (ckpt.is3d())
    throw std::runtime_error("attention-map export supports 2D checkpoints only");
  const Shape& ks = ckpt.at("patch_embed.weight").shape;
  const std::int64_t p = ckpt.meta.patch, c = ks[2];
  const std::int64_t h = ckpt.meta.grid[0] * p, w = ckpt.meta.grid[1] * p;
  const PatchSpec spec{p, h, w, 0, c};
  ViT<float> model = ViT<float>::from_checkpoint(ckpt, spec);
  const AttentionMapResult<float> res = extract_attention_map(model, image);

  fs::create_directories(out_dir);
  const std::vector<float> gray = to_grayscale(image, h, w, c);
  HeatmapFiles files;
  files.input = out_dir + "/input.pgm";
  write_pgm(files.input, gray, h, w);
  files.grid = out_dir + "/grid.pgm";
  write_pgm(files.grid, grid_overlay(gray, h, w, p), h, w);
  files.heatmap = out_dir + "/heatmap.pgm";
  write_pgm(files.heatmap, res.heatmap, h, w);
  files.predicted = res.predicted;
  files.probs.assign(res.probs.begin(), res.probs.end());
  return files;
}

}  // namespace vitlab
