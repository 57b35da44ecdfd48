#include "flip/tensor_io.hpp"

#include "flip/errors.hpp"

#include <json.hpp>

#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>

namespace flip {
namespace {

using json = nlohmann::json;
using RowMajor = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

static_assert(std::endian::native == std::endian::little, "safetensors I/O assumes a little-endian host");

double half_to_double(std::uint16_t h) {
  const std::uint32_t sign = (h >> 15) & 1u;
  const std::uint32_t exp = (h >> 10) & 0x1fu;
  const std::uint32_t mant = h & 0x3ffu;
  double v;
  if (exp == 0) {
    v = std::ldexp(static_cast<double>(mant), -24);
  } else if (exp == 31) {
    v = mant ? std::numeric_limits<double>::quiet_NaN() : std::numeric_limits<double>::infinity();
  } else {
    v = std::ldexp(static_cast<double>(mant | 0x400u), static_cast<int>(exp) - 25);
  }
  return sign ? -v : v;
}

double bf16_to_double(std::uint16_t h) {
  const std::uint32_t bits = static_cast<std::uint32_t>(h) << 16;
  return static_cast<double>(std::bit_cast<float>(bits));
}

std::size_t dtype_size(const std::string& dtype) {
  if (dtype == "F64") return 8;
  if (dtype == "F32") return 4;
  if (dtype == "F16" || dtype == "BF16") return 2;
  if (dtype == "I64") return 8;
  throw IoError("unsupported safetensors dtype " + dtype);
}

}  // namespace

std::pair<long, long> matrix_extent(const std::vector<long>& shape) {
  if (shape.empty()) return {1, 1};
  if (shape.size() == 1) return {1, shape[0]};
  long cols = 1;
  for (std::size_t i = 1; i < shape.size(); ++i) cols *= shape[i];
  return {shape[0], cols};
}

TensorArchive read_safetensors(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw IoError("cannot open checkpoint " + path.string());
  const auto file_size = std::filesystem::file_size(path);
  std::uint64_t header_len = 0;
  if (file_size < 8 || !in.read(reinterpret_cast<char*>(&header_len), 8)) {
    throw IoError("truncated checkpoint " + path.string() + ": missing header length");
  }
  if (header_len > file_size - 8) {
    throw IoError("truncated checkpoint " + path.string() + ": header exceeds file size");
  }
  std::string header(header_len, '\0');
  in.read(header.data(), static_cast<std::streamsize>(header_len));
  json meta;
  try {
    meta = json::parse(header);
  } catch (const json::exception& e) {
    throw IoError("corrupt checkpoint header in " + path.string() + ": " + e.what());
  }
  const std::uint64_t data_start = 8 + header_len;
  const std::uint64_t data_len = file_size - data_start;
  std::vector<char> data(data_len);
  if (!in.read(data.data(), static_cast<std::streamsize>(data_len))) {
    throw IoError("truncated checkpoint " + path.string() + ": short data section");
  }

  TensorArchive archive;
  for (const auto& [name, entry] : meta.items()) {
    if (name == "__metadata__") {
      for (const auto& [k, v] : entry.items()) archive.metadata[k] = v.get<std::string>();
      continue;
    }
    const auto dtype = entry.at("dtype").get<std::string>();
    auto shape = entry.at("shape").get<std::vector<long>>();
    const auto offsets = entry.at("data_offsets").get<std::vector<std::uint64_t>>();
    const std::size_t esize = dtype_size(dtype);
    long count = 1;
    for (long s : shape) count *= s;
    if (offsets.size() != 2 || offsets[1] < offsets[0] || offsets[1] > data_len ||
        offsets[1] - offsets[0] != static_cast<std::uint64_t>(count) * esize) {
      throw IoError("truncated checkpoint " + path.string() + ": tensor '" + name + "' has invalid byte range");
    }
    const char* src = data.data() + offsets[0];
    const auto [rows, cols] = matrix_extent(shape);
    RowMajor m(rows, cols);
    double* dst = m.data();
    for (long i = 0; i < count; ++i) {
      const char* p = src + static_cast<std::size_t>(i) * esize;
      if (dtype == "F64") {
        std::memcpy(dst + i, p, 8);
      } else if (dtype == "F32") {
        float f;
        std::memcpy(&f, p, 4);
        dst[i] = f;
      } else if (dtype == "I64") {
        std::int64_t v;
        std::memcpy(&v, p, 8);
        dst[i] = static_cast<double>(v);
      } else {
        std::uint16_t h;
        std::memcpy(&h, p, 2);
        dst[i] = dtype == "F16" ? half_to_double(h) : bf16_to_double(h);
      }
    }
    archive.tensors.emplace(name, NamedTensor{std::move(shape), Matrix(m)});
  }
  return archive;
}

void write_safetensors(const std::filesystem::path& path, const TensorArchive& archive, StorageType storage) {
  const std::size_t esize = storage == StorageType::F64 ? 8 : 4;
  json header = json::object();
  std::uint64_t offset = 0;
  for (const auto& [name, t] : archive.tensors) {
    const std::uint64_t bytes = static_cast<std::uint64_t>(t.value.size()) * esize;
    header[name] = {{"dtype", storage == StorageType::F64 ? "F64" : "F32"},
                    {"shape", t.shape},
                    {"data_offsets", {offset, offset + bytes}}};
    offset += bytes;
  }
  if (!archive.metadata.empty()) header["__metadata__"] = archive.metadata;
  std::string text = header.dump();
  while ((text.size() + 8) % 8 != 0) text.push_back(' ');

  const auto tmp = path.string() + ".partial";
  {
    std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
    if (!out) throw IoError("cannot write checkpoint " + path.string());
    const std::uint64_t len = text.size();
    out.write(reinterpret_cast<const char*>(&len), 8);
    out.write(text.data(), static_cast<std::streamsize>(text.size()));
    for (const auto& [name, t] : archive.tensors) {
      const RowMajor rm = t.value;
      if (storage == StorageType::F64) {
        out.write(reinterpret_cast<const char*>(rm.data()), static_cast<std::streamsize>(rm.size() * 8));
      } else {
        std::vector<float> f(rm.data(), rm.data() + rm.size());
        out.write(reinterpret_cast<const char*>(f.data()), static_cast<std::streamsize>(f.size() * 4));
      }
    }
    if (!out) throw IoError("failed writing checkpoint " + path.string());
  }
  std::filesystem::rename(tmp, path);
}

}  // namespace flip
