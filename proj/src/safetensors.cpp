#include "b2p/safetensors.hpp"

#include <bit>
#include <cstring>

#include "json.hpp"

#include "b2p/error.hpp"
#include "b2p/image.hpp"

namespace b2p {

using nlohmann::json;

namespace {

float half_to_float(std::uint16_t h) {
  const std::uint32_t sign = (h & 0x8000u) << 16;
  std::uint32_t exp = (h >> 10) & 0x1F;
  std::uint32_t mant = h & 0x3FF;
  std::uint32_t bits;
  if (exp == 0) {
    if (mant == 0) {
      bits = sign;
    } else {
      exp = 127 - 15 + 1;
      while (!(mant & 0x400)) {
        mant <<= 1;
        --exp;
      }
      mant &= 0x3FF;
      bits = sign | (exp << 23) | (mant << 13);
    }
  } else if (exp == 31) {
    bits = sign | 0x7F800000u | (mant << 13);
  } else {
    bits = sign | ((exp - 15 + 127) << 23) | (mant << 13);
  }
  return std::bit_cast<float>(bits);
}

}  // namespace

std::map<std::string, Tensor> read_safetensors(const std::filesystem::path& path,
                                               std::map<std::string, std::string>* metadata) {
  const Bytes bytes = read_file_bytes(path);
  if (bytes.size() < 8) throw IntegrityError(path.string() + ": truncated safetensors file");
  std::uint64_t header_len = 0;
  for (int i = 7; i >= 0; --i) header_len = (header_len << 8) | bytes[static_cast<std::size_t>(i)];
  if (header_len > bytes.size() - 8) throw IntegrityError(path.string() + ": bad header length");
  json header;
  try {
    header = json::parse(bytes.begin() + 8, bytes.begin() + 8 + static_cast<std::ptrdiff_t>(header_len));
  } catch (const json::exception& e) {
    throw IntegrityError(path.string() + ": bad header: " + e.what());
  }
  const std::size_t data_start = 8 + header_len;
  std::map<std::string, Tensor> out;
  for (const auto& [name, entry] : header.items()) {
    if (name == "__metadata__") {
      if (metadata)
        for (const auto& [k, v] : entry.items()) (*metadata)[k] = v.get<std::string>();
      continue;
    }
    try {
      const std::string dtype = entry.at("dtype").get<std::string>();
      std::vector<int> shape;
      for (const auto& d : entry.at("shape")) shape.push_back(d.get<int>());
      const auto begin = entry.at("data_offsets").at(0).get<std::size_t>();
      const auto end = entry.at("data_offsets").at(1).get<std::size_t>();
      if (end < begin || data_start + end > bytes.size())
        throw IntegrityError(path.string() + ": tensor " + name + " out of bounds");
      Tensor t(shape);
      const std::uint8_t* src = bytes.data() + data_start + begin;
      const std::size_t n = t.numel();
      auto expect = [&](std::size_t width) {
        if (end - begin != n * width)
          throw IntegrityError(path.string() + ": tensor " + name + " has wrong byte size");
      };
      if (dtype == "F32") {
        expect(4);
        std::memcpy(t.data(), src, n * 4);
      } else if (dtype == "F64") {
        expect(8);
        for (std::size_t i = 0; i < n; ++i) {
          double v;
          std::memcpy(&v, src + i * 8, 8);
          t[i] = static_cast<float>(v);
        }
      } else if (dtype == "F16" || dtype == "BF16") {
        expect(2);
        for (std::size_t i = 0; i < n; ++i) {
          std::uint16_t v;
          std::memcpy(&v, src + i * 2, 2);
          t[i] = dtype == "F16" ? half_to_float(v)
                                : std::bit_cast<float>(static_cast<std::uint32_t>(v) << 16);
        }
      } else {
        continue;  // integer tensors are not model weights here
      }
      out.emplace(name, std::move(t));
    } catch (const json::exception& e) {
      throw IntegrityError(path.string() + ": malformed entry " + name + ": " + e.what());
    }
  }
  return out;
}

void write_safetensors(const std::filesystem::path& path,
                       const std::vector<std::pair<std::string, const Tensor*>>& tensors,
                       const std::map<std::string, std::string>& metadata) {
  json header = json::object();
  if (!metadata.empty()) header["__metadata__"] = metadata;
  std::size_t offset = 0;
  for (const auto& [name, t] : tensors) {
    const std::size_t bytes = t->numel() * 4;
    header[name] = {{"dtype", "F32"}, {"shape", t->shape()}, {"data_offsets", {offset, offset + bytes}}};
    offset += bytes;
  }
  std::string h = header.dump();
  while ((8 + h.size()) % 8) h += ' ';
  Bytes out(8 + h.size() + offset);
  std::uint64_t len = h.size();
  for (int i = 0; i < 8; ++i) out[static_cast<std::size_t>(i)] = static_cast<std::uint8_t>(len >> (8 * i));
  std::memcpy(out.data() + 8, h.data(), h.size());
  std::size_t pos = 8 + h.size();
  for (const auto& [name, t] : tensors) {
    std::memcpy(out.data() + pos, t->data(), t->numel() * 4);
    pos += t->numel() * 4;
  }
  write_file_atomic(path, out);
}

}  // namespace b2p
