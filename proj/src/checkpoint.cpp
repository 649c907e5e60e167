#include "vitlab/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <stdexcept>

#include <json.hpp>

namespace vitlab {

using json = nlohmann::ordered_json;

namespace {

[[noreturn]] void ckpt_fail(const std::string& msg) {
  throw std::runtime_error("checkpoint: " + msg);
}

}  // namespace

bool Checkpoint::has(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return true;
  return false;
}

NamedArray& Checkpoint::at(const std::string& name) {
  for (auto& [n, t] : tensors)
    if (n == name) return t;
  ckpt_fail("missing tensor " + name);
}

const NamedArray& Checkpoint::at(const std::string& name) const {
  for (const auto& [n, t] : tensors)
    if (n == name) return t;
  ckpt_fail("missing tensor " + name);
}

void Checkpoint::put(const std::string& name, NamedArray arr) {
  for (auto& [n, t] : tensors)
    if (n == name) {
      t = std::move(arr);
      return;
    }
  tensors.emplace_back(name, std::move(arr));
}

int Checkpoint::num_classes() const {
  const auto& head = at("head.weight");
  return static_cast<int>(head.shape.back());
}

std::int64_t Checkpoint::grid_tokens() const {
  std::int64_t t = 1;
  for (auto g : meta.grid) t *= g;
  return t + 1;
}

std::vector<std::pair<std::string, Shape>> checkpoint_schema(const CkptMeta& meta,
                                                             int num_classes) {
  const std::int64_t d = meta.dim;
  const std::int64_t p = meta.patch;
  const std::int64_t hidden = d * meta.mlp_ratio;
  std::int64_t tokens = 1;
  for (auto g : meta.grid) tokens *= g;
  tokens += 1;
  Shape kernel = meta.grid.size() == 3 ? Shape{p, p, p, 3, d} : Shape{p, p, 3, d};

  std::vector<std::pair<std::string, Shape>> out;
  out.emplace_back("cls_token", Shape{1, d});
  out.emplace_back("pos_embed", Shape{tokens, d});
  out.emplace_back("patch_embed.weight", kernel);
  out.emplace_back("patch_embed.bias", Shape{d});
  for (int i = 0; i < meta.layers; ++i) {
    const std::string b = "blocks." + std::to_string(i) + ".";
    out.emplace_back(b + "norm1.gamma", Shape{d});
    out.emplace_back(b + "norm1.beta", Shape{d});
    out.emplace_back(b + "attn.qkv.weight", Shape{d, 3 * d});
    out.emplace_back(b + "attn.qkv.bias", Shape{3 * d});
    out.emplace_back(b + "attn.proj.weight", Shape{d, d});
    out.emplace_back(b + "attn.proj.bias", Shape{d});
    out.emplace_back(b + "norm2.gamma", Shape{d});
    out.emplace_back(b + "norm2.beta", Shape{d});
    out.emplace_back(b + "mlp.fc1.weight", Shape{d, hidden});
    out.emplace_back(b + "mlp.fc1.bias", Shape{hidden});
    out.emplace_back(b + "mlp.fc2.weight", Shape{hidden, d});
    out.emplace_back(b + "mlp.fc2.bias", Shape{d});
  }
  out.emplace_back("norm.gamma", Shape{d});
  out.emplace_back("norm.beta", Shape{d});
  out.emplace_back("head.weight", Shape{d, num_classes});
  out.emplace_back("head.bias", Shape{num_classes});
  return out;
}

void validate_checkpoint(const Checkpoint& ckpt) {
  if (ckpt.meta.layers <= 0 || ckpt.meta.dim <= 0 || ckpt.meta.heads <= 0 ||
      ckpt.meta.patch <= 0)
    ckpt_fail("metadata has non-positive geometry");
  if (ckpt.meta.grid.size() != 2 && ckpt.meta.grid.size() != 3)
    ckpt_fail("metadata grid must have 2 or 3 extents");
  if (!ckpt.has("head.weight")) ckpt_fail("missing tensor head.weight");
  const int k = ckpt.num_classes();
  auto schema = checkpoint_schema(ckpt.meta, k);
  for (const auto& [name, shape] : schema) {
    if (!ckpt.has(name)) ckpt_fail("missing tensor " + name);
    const auto& arr = ckpt.at(name);
    if (arr.shape != shape)
      ckpt_fail("tensor " + name + " has shape " + shape_str(arr.shape) + ", expected " +
                shape_str(shape));
    if (arr.numel() != shape_numel(shape))
      ckpt_fail("tensor " + name + " data length does not match its shape");
  }
  if (ckpt.tensors.size() != schema.size())
    for (const auto& [name, arr] : ckpt.tensors) {
      bool known = false;
      for (const auto& [sname, s] : schema)
        if (sname == name) {
          known = true;
          break;
        }
      if (!known) ckpt_fail("unexpected tensor " + name);
    }
}

void save_checkpoint(const Checkpoint& ckpt, const std::string& path) {
  validate_checkpoint(ckpt);
  json header;
  header["__meta__"] = {{"layers", ckpt.meta.layers},   {"dim", ckpt.meta.dim},
                        {"heads", ckpt.meta.heads},     {"mlp_ratio", ckpt.meta.mlp_ratio},
                        {"patch", ckpt.meta.patch},     {"grid", ckpt.meta.grid}};
  std::int64_t offset = 0;
  for (const auto& [name, arr] : ckpt.tensors) {
    const std::int64_t nbytes = arr.numel() * 4;
    header[name] = {{"dtype", "f32"}, {"shape", arr.shape}, {"offset", offset}, {"nbytes", nbytes}};
    offset += nbytes;
  }
  const std::string hs = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) ckpt_fail("cannot open " + path + " for writing");
  std::uint64_t hlen = hs.size();
  char lenbuf[8];
  for (int i = 0; i < 8; ++i) lenbuf[i] = static_cast<char>((hlen >> (8 * i)) & 0xff);
  out.write(lenbuf, 8);
  out.write(hs.data(), static_cast<std::streamsize>(hs.size()));
  for (const auto& [name, arr] : ckpt.tensors)
    out.write(reinterpret_cast<const char*>(arr.data.data()),
              static_cast<std::streamsize>(arr.data.size() * 4));
  if (!out) ckpt_fail("write failed for " + path);
}

Checkpoint load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) ckpt_fail("cannot open " + path);
  char lenbuf[8];
  if (!in.read(lenbuf, 8)) ckpt_fail("truncated header length in " + path);
  std::uint64_t hlen = 0;
  for (int i = 0; i < 8; ++i)
    hlen |= static_cast<std::uint64_t>(static_cast<unsigned char>(lenbuf[i])) << (8 * i);
  if (hlen == 0 || hlen > (1ull << 30)) ckpt_fail("implausible header length in " + path);
  std::string hs(hlen, '\0');
  if (!in.read(hs.data(), static_cast<std::streamsize>(hlen)))
    ckpt_fail("truncated header in " + path);
  json header;
  try {
    header = json::parse(hs);
  } catch (const std::exception& e) {
    ckpt_fail("corrupt header in " + path + ": " + e.what());
  }
  if (!header.contains("__meta__")) ckpt_fail("header missing __meta__ in " + path);

  Checkpoint ckpt;
  const auto& m = header["__meta__"];
  ckpt.meta.layers = m.at("layers").get<int>();
  ckpt.meta.dim = m.at("dim").get<int>();
  ckpt.meta.heads = m.at("heads").get<int>();
  ckpt.meta.mlp_ratio = m.at("mlp_ratio").get<int>();
  ckpt.meta.patch = m.at("patch").get<int>();
  ckpt.meta.grid = m.at("grid").get<std::vector<std::int64_t>>();

  std::vector<char> body((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
  for (auto it = header.begin(); it != header.end(); ++it) {
    if (it.key() == "__meta__") continue;
    const auto& desc = it.value();
    if (desc.at("dtype").get<std::string>() != "f32")
      ckpt_fail("tensor " + it.key() + " has unsupported dtype");
    NamedArray arr;
    arr.shape = desc.at("shape").get<Shape>();
    const std::int64_t offset = desc.at("offset").get<std::int64_t>();
    const std::int64_t nbytes = desc.at("nbytes").get<std::int64_t>();
    if (nbytes != shape_numel(arr.shape) * 4)
      ckpt_fail("tensor " + it.key() + " nbytes does not match its shape");
    if (offset < 0 || offset + nbytes > static_cast<std::int64_t>(body.size()))
      ckpt_fail("tensor " + it.key() + " data range out of bounds");
    arr.data.resize(static_cast<std::size_t>(nbytes / 4));
    std::memcpy(arr.data.data(), body.data() + offset, static_cast<std::size_t>(nbytes));
    ckpt.tensors.emplace_back(it.key(), std::move(arr));
  }
  validate_checkpoint(ckpt);
  return ckpt;
}

}  // namespace vitlab
