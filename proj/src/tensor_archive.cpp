#include "bindlab/tensor_archive.hpp"

#include <bit>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <fstream>

#include "bindlab/error.hpp"

namespace bindlab {

static_assert(std::endian::native == std::endian::little,
              "tensor archives are written in host order; big-endian hosts need byte swapping");

namespace {

constexpr char kMagic[8] = {'B', 'I', 'N', 'D', 'L', 'A', 'B', '1'};
constexpr const char* kFormat = "bindlab-tensor-archive";

std::size_t element_count(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

struct Header {
  nlohmann::json json;
  std::uint64_t payload_offset = 0;
};

Header read_header(std::ifstream& in, const std::filesystem::path& path) {
  char magic[8];
  if (!in.read(magic, 8) || std::memcmp(magic, kMagic, 8) != 0) {
    throw FormatError(path.string() + ": not a bindlab tensor archive");
  }
  std::uint64_t len = 0;
  if (!in.read(reinterpret_cast<char*>(&len), sizeof(len))) {
    throw FormatError(path.string() + ": truncated header length");
  }
  std::string text(len, '\0');
  if (!in.read(text.data(), static_cast<std::streamsize>(len))) {
    throw FormatError(path.string() + ": truncated header");
  }
  Header h;
  try {
    h.json = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw FormatError(path.string() + ": bad header JSON: " + e.what());
  }
  if (h.json.value("format", "") != kFormat) {
    throw FormatError(path.string() + ": unexpected format tag");
  }
  h.payload_offset = 16 + len;
  return h;
}

}  // namespace

void TensorArchive::add(std::string name, std::vector<std::size_t> shape, std::vector<double> data) {
  if (element_count(shape) != data.size()) {
    throw DimensionError("TensorArchive::add(" + name + "): shape does not match data");
  }
  if (contains(name)) throw FormatError("TensorArchive::add: duplicate tensor " + name);
  tensors.push_back({std::move(name), std::move(shape), std::move(data)});
}

const TensorEntry& TensorArchive::get(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return t;
  }
  throw FormatError("tensor archive: missing tensor " + name);
}

bool TensorArchive::contains(const std::string& name) const {
  for (const auto& t : tensors) {
    if (t.name == name) return true;
  }
  return false;
}

void write_archive(const std::filesystem::path& path, const TensorArchive& archive) {
  nlohmann::json header;
  header["format"] = kFormat;
  header["version"] = 1;
  header["meta"] = archive.meta;
  header["tensors"] = nlohmann::json::array();
  std::size_t offset = 0;
  for (const auto& t : archive.tensors) {
    header["tensors"].push_back({{"name", t.name},
                                 {"shape", t.shape},
                                 {"dtype", "f64"},
                                 {"offset", offset},
                                 {"count", t.data.size()}});
    offset += t.data.size();
  }
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw Error("cannot open " + path.string() + " for writing");
  out.write(kMagic, 8);
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : archive.tensors) {
    out.write(reinterpret_cast<const char*>(t.data.data()),
              static_cast<std::streamsize>(t.data.size() * sizeof(double)));
  }
  if (!out) throw Error("write failed: " + path.string());
}

nlohmann::json read_archive_header(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  return read_header(in, path).json;
}

TensorArchive read_archive(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw InputError("cannot open " + path.string());
  Header h = read_header(in, path);
  TensorArchive archive;
  archive.meta = h.json.value("meta", nlohmann::json::object());
  for (const auto& entry : h.json.at("tensors")) {
    TensorEntry t;
    t.name = entry.at("name").get<std::string>();
    t.shape = entry.at("shape").get<std::vector<std::size_t>>();
    if (entry.value("dtype", "") != "f64") throw FormatError(t.name + ": unsupported dtype");
    const auto offset = entry.at("offset").get<std::uint64_t>();
    const auto count = entry.at("count").get<std::uint64_t>();
    if (count != element_count(t.shape)) throw FormatError(t.name + ": count/shape mismatch");
    t.data.resize(count);
    in.seekg(static_cast<std::streamoff>(h.payload_offset + offset * sizeof(double)));
    if (!in.read(reinterpret_cast<char*>(t.data.data()),
                 static_cast<std::streamsize>(count * sizeof(double)))) {
      throw FormatError(path.string() + ": truncated payload for " + t.name);
    }
    for (double x : t.data) {
      if (!std::isfinite(x)) throw FormatError(t.name + ": non-finite value");
    }
    archive.tensors.push_back(std::move(t));
  }
  return archive;
}

}  // namespace bindlab
