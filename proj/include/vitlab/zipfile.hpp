#pragma once

#include <string>
#include <vector>

namespace vitlab {

struct ZipEntry {
  std::string name;
  std::vector<unsigned char> data;
};

// Minimal ZIP archive support: stored and deflate members, no zip64, no
// encryption. CRCs are verified on read. Errors carry the byte offset.
std::vector<ZipEntry> read_zip(const std::string& path);
void write_zip(const std::string& path, const std::vector<ZipEntry>& entries,
               bool compress = true);

const ZipEntry& zip_member(const std::vector<ZipEntry>& entries, const std::string& name);

}  // namespace vitlab
