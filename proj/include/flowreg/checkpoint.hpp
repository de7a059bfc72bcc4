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

#ifndef FLOWREG_CHECKPOINT_HPP
#define FLOWREG_CHECKPOINT_HPP

#include <cstdint>
#include <filesystem>

#include "flowreg/nets.hpp"

namespace flowreg {

// On-disk layout: one line of compact JSON (architecture descriptor, seed,
// epoch, parameter count) terminated by '\n', followed by every parameter
// value as a little-endian IEEE-754 double, in declaration order.

struct Checkpoint {
  Network net;
  std::uint64_t seed = 0;
  int epoch = 0;
};

void save_checkpoint(const std::filesystem::path& path, const Network& net, std::uint64_t seed, int epoch);
Checkpoint load_checkpoint(const std::filesystem::path& path);

}  // namespace flowreg

#endif  // FLOWREG_CHECKPOINT_HPP
