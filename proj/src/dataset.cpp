#include "vitlab/dataset.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <iostream>

#include "vitlab/npy.hpp"
#include "vitlab/rng.hpp"
#include "vitlab/zipfile.hpp"

namespace vitlab {

void DatasetBundle::validate() const {
  if (H <= 0 || W <= 0 || C <= 0 || D < 0) tensor_fail("dataset has non-positive extents");
  if (K < 2) tensor_fail("dataset needs at least 2 classes");
  for (const auto* split : {&train, &val, &test}) {
    if (split->n != static_cast<std::int64_t>(split->labels.size()) ||
        split->n * sample_values() != static_cast<std::int64_t>(split->images.size()))
      tensor_fail("split buffers do not match the declared sample count");
    for (int label : split->labels)
      if (label < 0 || label >= K)
        tensor_fail("label " + std::to_string(label) + " outside [0, " + std::to_string(K) + ")");
  }
}

const std::vector<RegistryRow>& dataset_registry() {
  static const std::vector<RegistryRow> rows = {
      {"breast", 546, 78, 156, 2, false, "Ultrasound"},
      {"retina", 1080, 120, 400, 5, false, "Fundus imaging"},
      {"blood", 11959, 1712, 3421, 8, false, "Microscopy"},
      {"derma", 7007, 1003, 2005, 7, false, "Dermatoscopy"},
      {"oct", 97477, 10832, 1000, 4, false, "Retinal OCT"},
      {"organs", 13932, 2452, 8827, 11, false, "Abdominal CT"},
      {"pneumonia", 4708, 524, 624, 2, false, "X-ray"},
      {"adrenal", 1188, 98, 298, 2, true, "Abdominal CT"},
      {"fracture", 1027, 103, 240, 3, true, "Chest CT"},
      {"nodule", 1158, 165, 310, 2, true, "Chest CT"},
      {"synapse", 1230, 177, 352, 2, true, "Electron Microscopy"},
      {"vessel", 1335, 191, 382, 2, true, "Brain MRA"},
  };
  return rows;
}

std::string normalize_dataset_name(const std::string& name) {
  std::string key;
  for (char c : name)
    if (std::isalnum(static_cast<unsigned char>(c)))
      key += static_cast<char>(std::tolower(static_cast<unsigned char>(c)));
  if (auto at = key.find("mnist"); at != std::string::npos) key.erase(at, 5);
  if (key.size() > 2 && key.ends_with("3d")) key.erase(key.size() - 2);
  return key;
}

std::vector<std::string> registry_mismatches(const DatasetBundle& bundle) {
  std::vector<std::string> out;
  const std::string key = normalize_dataset_name(bundle.name);
  for (const auto& row : dataset_registry()) {
    if (key != row.key) continue;
    auto check = [&](const char* split, std::int64_t have, int want) {
      if (have != want)
        out.push_back("dataset '" + bundle.name + "': " + split + " split has " +
                      std::to_string(have) + " samples, registry says " + std::to_string(want));
    };
    check("train", bundle.train.n, row.train);
    check("val", bundle.val.n, row.val);
    check("test", bundle.test.n, row.test);
    if (bundle.K != row.k)
      out.push_back("dataset '" + bundle.name + "': " + std::to_string(bundle.K) +
                    " classes, registry says " + std::to_string(row.k));
    if (bundle.is3d() != row.is3d)
      out.push_back("dataset '" + bundle.name + "': dimensionality does not match the registry");
    break;
  }
  return out;
}

namespace {

struct RawSplit {
  NpyArray images, labels;
};

void bundle_geometry(DatasetBundle& bundle, const Shape& img_shape) {
  // (N,H,W) | (N,H,W,C<=4) | (N,D,H,W) | (N,D,H,W,C)
  if (img_shape.size() == 3) {
    bundle.D = 0;
    bundle.H = img_shape[1];
    bundle.W = img_shape[2];
    bundle.C = 1;
  } else if (img_shape.size() == 4 && (img_shape[3] == 1 || img_shape[3] == 3)) {
    bundle.D = 0;
    bundle.H = img_shape[1];
    bundle.W = img_shape[2];
    bundle.C = img_shape[3];
  } else if (img_shape.size() == 4) {
    bundle.D = img_shape[1];
    bundle.H = img_shape[2];
    bundle.W = img_shape[3];
    bundle.C = 1;
  } else if (img_shape.size() == 5) {
    bundle.D = img_shape[1];
    bundle.H = img_shape[2];
    bundle.W = img_shape[3];
    bundle.C = img_shape[4];
  } else {
    tensor_fail("image array rank " + std::to_string(img_shape.size()) + " is not supported");
  }
}

SplitData materialize(const RawSplit& raw, const DatasetBundle& bundle, const char* split) {
  SplitData out;
  out.n = raw.images.shape.empty() ? 0 : raw.images.shape[0];
  const std::int64_t per = bundle.sample_values();
  if (raw.images.type != NpyType::U1)
    tensor_fail(std::string(split) + "_images must be unsigned bytes");
  if (static_cast<std::int64_t>(raw.images.u1.size()) != out.n * per)
    tensor_fail(std::string(split) + "_images does not match the bundle geometry");
  out.images.resize(raw.images.u1.size());
  for (std::size_t i = 0; i < raw.images.u1.size(); ++i)
    out.images[i] = static_cast<float>(raw.images.u1[i]) / 255.0f;

  const std::int64_t n_labels = raw.labels.numel();
  if (n_labels != out.n)
    tensor_fail(std::string(split) + "_labels has " + std::to_string(n_labels) +
                " entries for " + std::to_string(out.n) + " images");
  out.labels.resize(static_cast<std::size_t>(n_labels));
  for (std::int64_t i = 0; i < n_labels; ++i)
    out.labels[static_cast<std::size_t>(i)] = static_cast<int>(raw.labels.as_int(i));
  return out;
}

}  // namespace

DatasetBundle load_dataset(const std::string& path, const std::string& name) {
  const auto entries = read_zip(path);
  auto member = [&](const std::string& base) -> const ZipEntry& {
    for (const auto& entry : entries)
      if (entry.name == base || entry.name == base + ".npy") return entry;
    return zip_member(entries, base);  // throws with the member name
  };

  RawSplit train{parse_npy(member("train_images").data), parse_npy(member("train_labels").data)};
  RawSplit val{parse_npy(member("val_images").data), parse_npy(member("val_labels").data)};
  RawSplit test{parse_npy(member("test_images").data), parse_npy(member("test_labels").data)};

  DatasetBundle bundle;
  bundle.name = name;
  bundle_geometry(bundle, train.images.shape);
  for (const auto* raw : {&val, &test}) {
    DatasetBundle other;
    bundle_geometry(other, raw->images.shape);
    if (other.H != bundle.H || other.W != bundle.W || other.D != bundle.D || other.C != bundle.C)
      tensor_fail("splits disagree on image shape");
  }

  int max_label = 0;
  for (const auto* raw : {&train, &val, &test})
    for (std::int64_t i = 0; i < raw->labels.numel(); ++i)
      max_label = std::max(max_label, static_cast<int>(raw->labels.as_int(i)));
  bundle.K = max_label + 1;

  const std::string key = normalize_dataset_name(name);
  for (const auto& row : dataset_registry())
    if (key == row.key) {
      bundle.K = std::max(bundle.K, row.k);
      bundle.modality = row.modality;
    }

  bundle.train = materialize(train, bundle, "train");
  bundle.val = materialize(val, bundle, "val");
  bundle.test = materialize(test, bundle, "test");
  bundle.validate();

  for (const auto& warning : registry_mismatches(bundle))
    std::cerr << "warning: " << warning << "\n";
  return bundle;
}

void save_dataset(const DatasetBundle& bundle, const std::string& path) {
  bundle.validate();
  std::vector<ZipEntry> entries;
  auto push = [&](const std::string& base, const SplitData& split) {
    NpyArray images;
    images.type = NpyType::U1;
    images.shape = bundle.is3d() && bundle.C == 1
                       ? Shape{split.n, bundle.D, bundle.H, bundle.W}
                   : bundle.is3d() ? Shape{split.n, bundle.D, bundle.H, bundle.W, bundle.C}
                                   : Shape{split.n, bundle.H, bundle.W, bundle.C};
    images.u1.resize(split.images.size());
    for (std::size_t i = 0; i < split.images.size(); ++i)
      images.u1[i] = static_cast<unsigned char>(
          std::clamp<long>(std::lround(split.images[i] * 255.0f), 0, 255));
    NpyArray labels;
    labels.type = NpyType::U1;
    labels.shape = Shape{split.n};
    labels.u1.resize(split.labels.size());
    for (std::size_t i = 0; i < split.labels.size(); ++i)
      labels.u1[i] = static_cast<unsigned char>(split.labels[i]);
    entries.push_back({base + "_images.npy", serialize_npy(images)});
    entries.push_back({base + "_labels.npy", serialize_npy(labels)});
  };
  push("train", bundle.train);
  push("val", bundle.val);
  push("test", bundle.test);
  write_zip(path, entries);
}

DatasetBundle to_three_channels(DatasetBundle bundle) {
  if (bundle.C == 3) return bundle;
  if (bundle.C != 1) tensor_fail("channel replication needs 1 or 3 channels, got " +
                                 std::to_string(bundle.C));
  for (auto* split : {&bundle.train, &bundle.val, &bundle.test}) {
    std::vector<float> wide(split->images.size() * 3);
    for (std::size_t i = 0; i < split->images.size(); ++i)
      wide[i * 3] = wide[i * 3 + 1] = wide[i * 3 + 2] = split->images[i];
    split->images = std::move(wide);
  }
  bundle.C = 3;
  return bundle;
}

std::vector<std::vector<std::int64_t>> batches(std::int64_t n, std::int64_t batch_size,
                                               std::uint64_t seed, std::int64_t epoch) {
  if (n <= 0) tensor_fail("cannot batch an empty split");
  if (batch_size < 1) tensor_fail("batch size must be at least 1");
  Rng rng(Rng::mix(seed, static_cast<std::uint64_t>(epoch), 0x626174ull));
  std::vector<std::int64_t> order = random_permutation(n, rng);
  std::vector<std::vector<std::int64_t>> out;
  for (std::int64_t at = 0; at < n; at += batch_size) {
    const std::int64_t end = std::min(n, at + batch_size);
    out.emplace_back(order.begin() + at, order.begin() + end);
  }
  return out;
}

DatasetBundle generate_synthetic_texture(std::int64_t n_per_class, std::uint64_t seed) {
  if (n_per_class < 8) tensor_fail("synthetic generator needs at least 8 samples per class");
  const std::int64_t hw = 28;
  DatasetBundle bundle;
  bundle.name = "synthetic";
  bundle.modality = "Synthetic texture";
  bundle.H = bundle.W = hw;
  bundle.D = 0;
  bundle.C = 3;
  bundle.K = 2;

  const std::int64_t n_val = std::max<std::int64_t>(1, n_per_class / 10);
  const std::int64_t n_test = std::max<std::int64_t>(1, n_per_class / 5);
  const std::int64_t n_train = n_per_class - n_val - n_test;

  auto emit = [&](SplitData& split, int label, const std::vector<float>& img) {
    split.images.insert(split.images.end(), img.begin(), img.end());
    split.labels.push_back(label);
    split.n++;
  };

  for (int label = 0; label < 2; ++label)
    for (std::int64_t i = 0; i < n_per_class; ++i) {
      Rng rng(Rng::mix(seed, static_cast<std::uint64_t>(label),
                       static_cast<std::uint64_t>(i), 0x73796eull));
      const double base = 0.4 + 0.2 * rng.uniform();
      const double grad_y = 0.6 * rng.uniform() - 0.3;
      const double grad_x = 0.6 * rng.uniform() - 0.3;
      std::int64_t y0 = 0, x0 = 0;
      if (label == 1) {
        y0 = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(hw - 8 + 1)));
        x0 = static_cast<std::int64_t>(rng.below(static_cast<std::uint64_t>(hw - 8 + 1)));
      }
      std::vector<float> img(static_cast<std::size_t>(hw * hw * 3));
      for (std::int64_t y = 0; y < hw; ++y)
        for (std::int64_t x = 0; x < hw; ++x) {
          double v = base + grad_y * (static_cast<double>(y) / (hw - 1.0) - 0.5) +
                     grad_x * (static_cast<double>(x) / (hw - 1.0) - 0.5);
          if (label == 1 && y >= y0 && y < y0 + 8 && x >= x0 && x < x0 + 8)
            v += 0.25 * ((x + y) % 2 == 0 ? 1.0 : -1.0);
          v += 0.05 * rng.normal();
          const float pixel = static_cast<float>(std::clamp(v, 0.0, 1.0));
          for (std::int64_t c = 0; c < 3; ++c)
            img[static_cast<std::size_t>((y * hw + x) * 3 + c)] = pixel;
        }
      if (i < n_train)
        emit(bundle.train, label, img);
      else if (i < n_train + n_val)
        emit(bundle.val, label, img);
      else
        emit(bundle.test, label, img);
    }

  bundle.validate();
  return bundle;
}

}  // namespace vitlab
