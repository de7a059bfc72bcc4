/*
 * Copyright 2026 The flowreg Authors
 *
 * Licensed under the Apache License, Version 2.0 (the "License");
 * you may not use this file except in compliance with the License.
 * You may obtain a copy of the License at
 *
 *     http://www.apache.org/licenses/LICENSE-2.0
 *
 * Unless required by applicable law or agreed to in writing, software
 * distributed under the License is distributed on an "AS IS" BASIS,
 * WITHOUT WARRANTIES OR CONDITIONS OF ANY KIND, either express or implied.
 * See the License for the specific language governing permissions and
 * limitations under the License.
 */

#include "flowreg/checkpoint.hpp"

#include <bit>
#include <cstring>
#include <fstream>
#include <stdexcept>
#include <string>

#include <json.hpp>

namespace flowreg {

namespace {

constexpr const char* kFormat = "flowreg-checkpoint-v1";

std::uint64_t to_little_endian(std::uint64_t bits) {
  if constexpr (std::endian::native == std::endian::big) {
    std::uint64_t out = 0;
    for (int i = 0; i < 8; ++i) out |= ((bits >> (8 * i)) & 0xffu) << (8 * (7 - i));
    return out;
  }
  return bits;
}

}  // namespace

void save_checkpoint(const std::filesystem::path& path, const Network& net, std::uint64_t seed, int epoch) {
  const ArchDescriptor& d = net.descriptor();
  nlohmann::json header = {
      {"format", kFormat},
      {"arch",
       {{"name", d.name},
        {"height", d.height},
        {"width", d.width},
        {"channels", d.channels},
        {"num_classes", d.num_classes},
        {"width_multiplier", d.width_multiplier}}},
      {"seed", seed},
      {"epoch", epoch},
      {"parameter_count", net.parameter_count()},
  };
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw std::runtime_error("cannot write checkpoint " + path.string());
  out << header.dump() << '\n';
  for (const Tensor& p : net.parameters()) {
    for (Index i = 0; i < p.numel(); ++i) {
      const std::uint64_t bits = to_little_endian(std::bit_cast<std::uint64_t>(p[i]));
      char bytes[8];
      std::memcpy(bytes, &bits, 8);
      out.write(bytes, 8);
    }
  }
  if (!out) throw std::runtime_error("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint " + path.string());
  std::string line;
  if (!std::getline(in, line)) throw std::runtime_error("checkpoint " + path.string() + " has no header");
  nlohmann::json header;
  try {
    header = nlohmann::json::parse(line);
  } catch (const nlohmann::json::exception& e) {
    throw std::runtime_error("checkpoint " + path.string() + ": malformed header: " + e.what());
  }
  if (header.value("format", "") != kFormat) {
    throw std::runtime_error("checkpoint " + path.string() + ": unsupported format");
  }
  const auto& a = header.at("arch");
  ArchDescriptor desc{a.at("name").get<std::string>(), a.at("height").get<Index>(), a.at("width").get<Index>(),
                      a.at("channels").get<Index>(), a.at("num_classes").get<int>(),
                      a.at("width_multiplier").get<double>()};
  Checkpoint ckpt{Network::build(desc, 0), header.at("seed").get<std::uint64_t>(), header.at("epoch").get<int>()};
  if (header.at("parameter_count").get<Index>() != ckpt.net.parameter_count()) {
    throw std::runtime_error("checkpoint " + path.string() + ": parameter count does not match architecture");
  }
  std::vector<Tensor> params;
  for (const Tensor& p : ckpt.net.parameters()) {
    Array values(p.numel());
    for (Index i = 0; i < p.numel(); ++i) {
      char bytes[8];
      if (!in.read(bytes, 8)) throw std::runtime_error("checkpoint " + path.string() + " is truncated");
      std::uint64_t bits = 0;
      std::memcpy(&bits, bytes, 8);
      values[i] = std::bit_cast<double>(to_little_endian(bits));
    }
    params.emplace_back(p.shape(), std::move(values));
  }
  if (in.peek() != std::char_traits<char>::eof()) {
    throw std::runtime_error("checkpoint " + path.string() + " has trailing bytes");
  }
  ckpt.net.set_parameters(std::move(params));
  return ckpt;
}

}  // namespace flowreg
