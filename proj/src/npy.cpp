#include "vitlab/npy.hpp"

#include <cstring>
#include <stdexcept>
#include <string>

namespace vitlab {

namespace {

[[noreturn]] void npy_fail(const std::string& msg) {
  throw std::runtime_error("npy: " + msg);
}

// Pulls the value following `'key':` out of the header dict text.
std::string dict_value(const std::string& header, const std::string& key) {
  const std::string needle = "'" + key + "':";
  const auto at = header.find(needle);
  if (at == std::string::npos) npy_fail("header lacks '" + key + "'");
  auto i = at + needle.size();
  while (i < header.size() && header[i] == ' ') ++i;
  auto j = i;
  int depth = 0;
  while (j < header.size()) {
    const char c = header[j];
    if (c == '(') ++depth;
    if (c == ')') {
      --depth;
      ++j;
      if (depth == 0) break;
      continue;
    }
    if (depth == 0 && (c == ',' || c == '}')) break;
    ++j;
  }
  return header.substr(i, j - i);
}

}  // namespace

NpyArray parse_npy(const std::vector<unsigned char>& bytes) {
  if (bytes.size() < 10 || std::memcmp(bytes.data(), "\x93NUMPY", 6) != 0)
    npy_fail("bad magic");
  if (bytes[6] != 1) npy_fail("unsupported version " + std::to_string(bytes[6]));
  const std::size_t header_len =
      static_cast<std::size_t>(bytes[8]) | (static_cast<std::size_t>(bytes[9]) << 8);
  if (bytes.size() < 10 + header_len) npy_fail("truncated header");
  const std::string header(reinterpret_cast<const char*>(bytes.data()) + 10, header_len);

  const std::string descr = dict_value(header, "descr");
  const std::string order = dict_value(header, "fortran_order");
  if (order.find("False") == std::string::npos)
    npy_fail("fortran_order must be False");

  NpyArray arr;
  if (descr.find("u1") != std::string::npos)
    arr.type = NpyType::U1;
  else if (descr.find("i8") != std::string::npos)
    arr.type = NpyType::I8;
  else if (descr.find("f8") != std::string::npos)
    arr.type = NpyType::F8;
  else
    npy_fail("unsupported dtype " + descr);

  const std::string tuple = dict_value(header, "shape");
  std::int64_t numel = 1;
  std::int64_t value = 0;
  bool in_number = false;
  for (char c : tuple) {
    if (c >= '0' && c <= '9') {
      value = value * 10 + (c - '0');
      in_number = true;
    } else if (in_number) {
      arr.shape.push_back(value);
      numel *= value;
      value = 0;
      in_number = false;
    }
  }
  if (in_number) {
    arr.shape.push_back(value);
    numel *= value;
  }
  if (arr.shape.empty()) npy_fail("scalar arrays are not supported");

  const std::size_t itemsize = arr.type == NpyType::U1 ? 1 : 8;
  const unsigned char* data = bytes.data() + 10 + header_len;
  const std::size_t avail = bytes.size() - 10 - header_len;
  if (avail < static_cast<std::size_t>(numel) * itemsize)
    npy_fail("payload holds " + std::to_string(avail) + " bytes, shape needs " +
             std::to_string(numel * static_cast<std::int64_t>(itemsize)));

  if (arr.type == NpyType::U1) {
    arr.u1.assign(data, data + numel);
  } else if (arr.type == NpyType::I8) {
    arr.i8.resize(static_cast<std::size_t>(numel));
    std::memcpy(arr.i8.data(), data, static_cast<std::size_t>(numel) * 8);
  } else {
    arr.f8.resize(static_cast<std::size_t>(numel));
    std::memcpy(arr.f8.data(), data, static_cast<std::size_t>(numel) * 8);
  }
  return arr;
}

std::vector<unsigned char> serialize_npy(const NpyArray& arr) {
  std::string dict = "{'descr': '";
  dict += arr.type == NpyType::U1 ? "|u1" : (arr.type == NpyType::I8 ? "<i8" : "<f8");
  dict += "', 'fortran_order': False, 'shape': (";
  for (std::size_t i = 0; i < arr.shape.size(); ++i)
    dict += std::to_string(arr.shape[i]) + (arr.shape.size() == 1 || i + 1 < arr.shape.size()
                                                ? ","
                                                : "");
  dict += "), }";
  std::size_t total = 10 + dict.size() + 1;
  dict.append((64 - total % 64) % 64, ' ');
  dict += '\n';

  std::vector<unsigned char> out;
  out.reserve(10 + dict.size() + static_cast<std::size_t>(arr.numel()) * 8);
  const char magic[8] = {'\x93', 'N', 'U', 'M', 'P', 'Y', 1, 0};
  out.insert(out.end(), magic, magic + 8);
  out.push_back(static_cast<unsigned char>(dict.size() & 0xff));
  out.push_back(static_cast<unsigned char>(dict.size() >> 8));
  out.insert(out.end(), dict.begin(), dict.end());
  if (arr.type == NpyType::U1) {
    out.insert(out.end(), arr.u1.begin(), arr.u1.end());
  } else if (arr.type == NpyType::I8) {
    const auto* p = reinterpret_cast<const unsigned char*>(arr.i8.data());
    out.insert(out.end(), p, p + arr.i8.size() * 8);
  } else {
    const auto* p = reinterpret_cast<const unsigned char*>(arr.f8.data());
    out.insert(out.end(), p, p + arr.f8.size() * 8);
  }
  return out;
}

}  // namespace vitlab
