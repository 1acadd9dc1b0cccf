#pragma once

// Checkpoints: raw little-endian float32 blob plus a plain-text manifest of
// (name, shape, byte offset) lines.

#include <cstdint>
#include <cstring>
#include <fstream>
#include <sstream>
#include <string>
#include <vector>

#include "fbseg/params.hpp"

namespace fbseg {

template <typename T>
void save_checkpoint(const ModelParams<T>& params, const std::string& prefix) {
  std::ofstream bin(prefix + ".bin", std::ios::binary);
  std::ofstream man(prefix + ".manifest.txt");
  if (!bin || !man) throw DataError("cannot write checkpoint: " + prefix);
  std::uint64_t offset = 0;
  for (const auto& p : params.all()) {
    const Shape& s = p.tensor.shape();
    man << p.name << " " << s[0] << " " << s[1] << " " << s[2] << " " << s[3] << " " << offset
        << "\n";
    for (T v : p.tensor.data()) {
      const float f = static_cast<float>(v);
      std::uint32_t bits;
      std::memcpy(&bits, &f, 4);
      const unsigned char bytes[4] = {
          static_cast<unsigned char>(bits & 0xff), static_cast<unsigned char>((bits >> 8) & 0xff),
          static_cast<unsigned char>((bits >> 16) & 0xff),
          static_cast<unsigned char>((bits >> 24) & 0xff)};
      bin.write(reinterpret_cast<const char*>(bytes), 4);
    }
    offset += p.tensor.data().size() * 4;
  }
}

template <typename T>
void load_checkpoint(ModelParams<T>& params, const std::string& prefix) {
  std::ifstream man(prefix + ".manifest.txt");
  std::ifstream bin(prefix + ".bin", std::ios::binary);
  if (!man || !bin) throw DataError("cannot read checkpoint: " + prefix);
  std::string line;
  size_t loaded = 0;
  while (std::getline(man, line)) {
    if (line.empty()) continue;
    std::istringstream ss(line);
    std::string name;
    Shape shape;
    std::uint64_t offset;
    if (!(ss >> name >> shape[0] >> shape[1] >> shape[2] >> shape[3] >> offset))
      throw DataError("bad manifest line: " + line);
    if (!params.contains(name)) throw DataError("checkpoint parameter not in model: " + name);
    auto& p = params.at(name);
    if (p.tensor.shape() != shape)
      throw DataError("shape mismatch for " + name + ": model " + shape_str(p.tensor.shape()) +
                      " vs checkpoint " + shape_str(shape));
    bin.seekg(static_cast<std::streamoff>(offset));
    for (T& v : p.tensor.data()) {
      unsigned char bytes[4];
      if (!bin.read(reinterpret_cast<char*>(bytes), 4))
        throw DataError("truncated checkpoint blob for " + name);
      const std::uint32_t bits = static_cast<std::uint32_t>(bytes[0]) |
                                 (static_cast<std::uint32_t>(bytes[1]) << 8) |
                                 (static_cast<std::uint32_t>(bytes[2]) << 16) |
                                 (static_cast<std::uint32_t>(bytes[3]) << 24);
      float f;
      std::memcpy(&f, &bits, 4);
      v = static_cast<T>(f);
    }
    ++loaded;
  }
  if (loaded != params.size())
    throw DataError("checkpoint holds " + std::to_string(loaded) + " parameters, model has " +
                    std::to_string(params.size()));
}

}  // namespace fbseg
