#include "vitlab/zipfile.hpp"

#include <zlib.h>

#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

namespace vitlab {

namespace {

[[noreturn]] void zip_fail(const std::string& msg) {
  throw std::runtime_error("archive: " + msg);
}

std::uint32_t rd32(const unsigned char* p) {
  return static_cast<std::uint32_t>(p[0]) | (static_cast<std::uint32_t>(p[1]) << 8) |
         (static_cast<std::uint32_t>(p[2]) << 16) | (static_cast<std::uint32_t>(p[3]) << 24);
}
std::uint16_t rd16(const unsigned char* p) {
  return static_cast<std::uint16_t>(p[0] | (p[1] << 8));
}

void wr32(std::vector<unsigned char>& out, std::uint32_t v) {
  for (int i = 0; i < 4; ++i) out.push_back(static_cast<unsigned char>((v >> (8 * i)) & 0xff));
}
void wr16(std::vector<unsigned char>& out, std::uint16_t v) {
  out.push_back(static_cast<unsigned char>(v & 0xff));
  out.push_back(static_cast<unsigned char>(v >> 8));
}

std::vector<unsigned char> inflate_raw(const unsigned char* src, std::size_t n,
                                       std::size_t out_size, std::size_t offset) {
  std::vector<unsigned char> out(out_size);
  z_stream strm{};
  if (inflateInit2(&strm, -15) != Z_OK) zip_fail("inflate init failed");
  strm.next_in = const_cast<unsigned char*>(src);
  strm.avail_in = static_cast<uInt>(n);
  strm.next_out = out.data();
  strm.avail_out = static_cast<uInt>(out.size());
  const int rc = inflate(&strm, Z_FINISH);
  inflateEnd(&strm);
  if (rc != Z_STREAM_END || strm.avail_out != 0)
    zip_fail("bad deflate stream at offset " + std::to_string(offset));
  return out;
}

std::vector<unsigned char> deflate_raw(const std::vector<unsigned char>& src) {
  z_stream strm{};
  if (deflateInit2(&strm, Z_DEFAULT_COMPRESSION, Z_DEFLATED, -15, 8, Z_DEFAULT_STRATEGY) != Z_OK)
    zip_fail("deflate init failed");
  std::vector<unsigned char> out(deflateBound(&strm, static_cast<uLong>(src.size())));
  strm.next_in = const_cast<unsigned char*>(src.data());
  strm.avail_in = static_cast<uInt>(src.size());
  strm.next_out = out.data();
  strm.avail_out = static_cast<uInt>(out.size());
  const int rc = deflate(&strm, Z_FINISH);
  deflateEnd(&strm);
  if (rc != Z_STREAM_END) zip_fail("deflate failed");
  out.resize(out.size() - strm.avail_out);
  return out;
}

}  // namespace

std::vector<ZipEntry> read_zip(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) zip_fail("cannot open " + path);
  std::vector<unsigned char> bytes((std::istreambuf_iterator<char>(f)),
                                   std::istreambuf_iterator<char>());
  if (bytes.size() < 22) zip_fail("file too short (" + std::to_string(bytes.size()) + " bytes)");

  // end-of-central-directory record, scanned from the tail
  std::size_t eocd = std::string::npos;
  const std::size_t lowest = bytes.size() >= 22 + 65535 ? bytes.size() - 22 - 65535 : 0;
  for (std::size_t i = bytes.size() - 22 + 1; i-- > lowest;) {
    if (rd32(bytes.data() + i) == 0x06054b50) {
      eocd = i;
      break;
    }
  }
  if (eocd == std::string::npos) zip_fail("no end-of-central-directory record");

  const std::uint16_t count = rd16(bytes.data() + eocd + 10);
  const std::uint32_t cd_offset = rd32(bytes.data() + eocd + 16);
  if (cd_offset > bytes.size()) zip_fail("central directory offset " +
                                         std::to_string(cd_offset) + " past end of file");

  std::vector<ZipEntry> entries;
  std::size_t at = cd_offset;
  for (std::uint16_t e = 0; e < count; ++e) {
    if (at + 46 > bytes.size() || rd32(bytes.data() + at) != 0x02014b50)
      zip_fail("bad central directory entry at offset " + std::to_string(at));
    const std::uint16_t method = rd16(bytes.data() + at + 10);
    const std::uint32_t crc = rd32(bytes.data() + at + 16);
    const std::uint32_t csize = rd32(bytes.data() + at + 20);
    const std::uint32_t usize = rd32(bytes.data() + at + 24);
    const std::uint16_t name_len = rd16(bytes.data() + at + 28);
    const std::uint16_t extra_len = rd16(bytes.data() + at + 30);
    const std::uint16_t comment_len = rd16(bytes.data() + at + 32);
    const std::uint32_t local_at = rd32(bytes.data() + at + 42);
    if (at + 46 + name_len > bytes.size())
      zip_fail("truncated central directory at offset " + std::to_string(at));
    std::string name(reinterpret_cast<const char*>(bytes.data()) + at + 46, name_len);
    at += 46u + name_len + extra_len + comment_len;

    if (local_at + 30 > bytes.size() || rd32(bytes.data() + local_at) != 0x04034b50)
      zip_fail("bad local header for " + name + " at offset " + std::to_string(local_at));
    const std::uint16_t lname = rd16(bytes.data() + local_at + 26);
    const std::uint16_t lextra = rd16(bytes.data() + local_at + 28);
    const std::size_t data_at = local_at + 30u + lname + lextra;
    if (data_at + csize > bytes.size())
      zip_fail("member " + name + " truncated at offset " + std::to_string(data_at));

    ZipEntry entry;
    entry.name = std::move(name);
    if (method == 0) {
      if (csize != usize) zip_fail("stored member " + entry.name + " with mismatched sizes");
      entry.data.assign(bytes.begin() + static_cast<std::ptrdiff_t>(data_at),
                        bytes.begin() + static_cast<std::ptrdiff_t>(data_at + csize));
    } else if (method == 8) {
      entry.data = inflate_raw(bytes.data() + data_at, csize, usize, data_at);
    } else {
      zip_fail("member " + entry.name + " uses unsupported method " + std::to_string(method));
    }
    const auto actual = static_cast<std::uint32_t>(
        crc32(0, entry.data.data(), static_cast<uInt>(entry.data.size())));
    if (actual != crc)
      zip_fail("crc mismatch for " + entry.name + " at offset " + std::to_string(data_at));
    entries.push_back(std::move(entry));
  }
  return entries;
}

void write_zip(const std::string& path, const std::vector<ZipEntry>& entries, bool compress) {
  std::vector<unsigned char> out;
  struct Record {
    std::string name;
    std::uint32_t crc, csize, usize, offset;
    std::uint16_t method;
  };
  std::vector<Record> records;

  for (const auto& entry : entries) {
    std::vector<unsigned char> packed;
    std::uint16_t method = 0;
    if (compress) {
      packed = deflate_raw(entry.data);
      if (packed.size() < entry.data.size())
        method = 8;
      else
        packed.clear();
    }
    const std::vector<unsigned char>& payload = method == 8 ? packed : entry.data;

    Record rec;
    rec.name = entry.name;
    rec.crc = static_cast<std::uint32_t>(
        crc32(0, entry.data.data(), static_cast<uInt>(entry.data.size())));
    rec.csize = static_cast<std::uint32_t>(payload.size());
    rec.usize = static_cast<std::uint32_t>(entry.data.size());
    rec.offset = static_cast<std::uint32_t>(out.size());
    rec.method = method;

    wr32(out, 0x04034b50);
    wr16(out, 20);
    wr16(out, 0);
    wr16(out, method);
    wr16(out, 0);
    wr16(out, 0);
    wr32(out, rec.crc);
    wr32(out, rec.csize);
    wr32(out, rec.usize);
    wr16(out, static_cast<std::uint16_t>(rec.name.size()));
    wr16(out, 0);
    out.insert(out.end(), rec.name.begin(), rec.name.end());
    out.insert(out.end(), payload.begin(), payload.end());
    records.push_back(std::move(rec));
  }

  const std::uint32_t cd_offset = static_cast<std::uint32_t>(out.size());
  for (const auto& rec : records) {
    wr32(out, 0x02014b50);
    wr16(out, 20);
    wr16(out, 20);
    wr16(out, 0);
    wr16(out, rec.method);
    wr16(out, 0);
    wr16(out, 0);
    wr32(out, rec.crc);
    wr32(out, rec.csize);
    wr32(out, rec.usize);
    wr16(out, static_cast<std::uint16_t>(rec.name.size()));
    wr16(out, 0);
    wr16(out, 0);
    wr16(out, 0);
    wr16(out, 0);
    wr32(out, 0);
    wr32(out, rec.offset);
    out.insert(out.end(), rec.name.begin(), rec.name.end());
  }
  const std::uint32_t cd_size = static_cast<std::uint32_t>(out.size()) - cd_offset;

  wr32(out, 0x06054b50);
  wr16(out, 0);
  wr16(out, 0);
  wr16(out, static_cast<std::uint16_t>(records.size()));
  wr16(out, static_cast<std::uint16_t>(records.size()));
  wr32(out, cd_size);
  wr32(out, cd_offset);
  wr16(out, 0);

  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) zip_fail("cannot write " + path);
  f.write(reinterpret_cast<const char*>(out.data()),
          static_cast<std::streamsize>(out.size()));
  if (!f) zip_fail("short write to " + path);
}

const ZipEntry& zip_member(const std::vector<ZipEntry>& entries, const std::string& name) {
  for (const auto& entry : entries)
    if (entry.name == name) return entry;
  zip_fail("archive has no member " + name);
}

}  // namespace vitlab
