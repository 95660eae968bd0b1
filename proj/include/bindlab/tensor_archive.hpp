#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include <json.hpp>

namespace bindlab {

/// One named float64 tensor.
struct TensorEntry {
  std::string name;
  std::vector<std::size_t> shape;
  std::vector<double> data;
};

/// Flat binary tensor archive with a JSON header.
///
/// Layout: the 8-byte magic "BINDLAB1", a little-endian u64 header length,
/// the UTF-8 JSON header, then every tensor's float64 little-endian payload
/// back to back in header order. The header carries
/// {"format", "version", "meta", "tensors": [{name, shape, dtype, offset, count}]},
/// where offset/count are in elements relative to the start of the payload.
struct TensorArchive {
  nlohmann::json meta = nlohmann::json::object();
  std::vector<TensorEntry> tensors;

  void add(std::string name, std::vector<std::size_t> shape, std::vector<double> data);
  const TensorEntry& get(const std::string& name) const;
  bool contains(const std::string& name) const;
};

void write_archive(const std::filesystem::path& path, const TensorArchive& archive);
/// Throws FormatError on a malformed file.
TensorArchive read_archive(const std::filesystem::path& path);
/// Reads only the JSON header (cheap probe of an archive's kind/config).
nlohmann::json read_archive_header(const std::filesystem::path& path);

}  // namespace bindlab
