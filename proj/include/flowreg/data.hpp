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

#ifndef FLOWREG_DATA_HPP
#define FLOWREG_DATA_HPP

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "flowreg/tensor.hpp"

namespace flowreg {

/// Labelled NHWC images with pixel values in [0, 1].
struct Dataset {
  Tensor images;
  std::vector<int> labels;
  std::string split;
  int num_classes = 0;

  Index size() const { return static_cast<Index>(labels.size()); }
  Index height() const { return images.dim(1); }
  Index width() const { return images.dim(2); }
  Index channels() const { return images.dim(3); }

  Tensor images_at(std::span<const Index> indices) const;
  std::vector<int> labels_at(std::span<const Index> indices) const;
  Dataset subset(std::span<const Index> indices) const;
  /// Throws when pixel range, label range or counts are inconsistent.
  void validate() const;
};

struct DatasetPair {
  Dataset train;
  Dataset test;
};

/// CIFAR binary batches: data_batch_{1..5}.bin + test_batch.bin for variant 10,
/// train.bin + test.bin (fine labels) for variant 100. A nested
/// cifar-10-batches-bin / cifar-100-binary directory is also accepted.
DatasetPair load_cifar(const std::filesystem::path& dir, int variant);

/// MNIST IDX files (train-images-idx3-ubyte etc.), raw or gzipped.
DatasetPair load_mnist_idx(const std::filesystem::path& dir);

/// Reads one IDX image file into [N, rows, cols, 1] scaled by 1/255.
Tensor read_idx_images(const std::filesystem::path& path);
std::vector<int> read_idx_labels(const std::filesystem::path& path);

enum class ShapeKind { kSquare = 0, kDisc = 1 };

/// Anti-aliased filled shape on a size x size canvas. For a square `radius` is
/// half the side length.
Tensor render_shape(ShapeKind kind, Index size, double center_row, double center_col, double radius);

/// Rendering knobs for synth_shapes; the defaults give clean white shapes on black.
struct SynthOptions {
  double min_radius = 0.18;  // fraction of the canvas size
  double max_radius = 0.32;
  double min_contrast = 1.0;  // contrast drawn from [min_contrast, 1], background below
  double noise = 0.0;         // std of additive Gaussian pixel noise, clipped to [0, 1]
  int clutter = 0;            // thin distractor strokes per image
};

/// Two-class set alternating squares (label 0) and discs (label 1) at random
/// positions and scales, as [n, size, size, 1].
Dataset synth_shapes(Index n, Index size, std::uint64_t seed);
Dataset synth_shapes(Index n, Index size, std::uint64_t seed, const SynthOptions& options);

struct AugmentConfig {
  bool enabled = false;
  Index pad = 4;
  bool flip = true;
};

/// Reflect-pad, random crop back to the input size, random horizontal flip.
Tensor augment(const Tensor& batch, const AugmentConfig& config, std::uint64_t seed);

/// Shuffled sample order for an epoch; a pure function of (seed, epoch).
std::vector<Index> batch_order(Index n, std::uint64_t seed, int epoch);

/// Seed-selected evaluation subset of `count` indices (all when count >= n),
/// returned in ascending order.
std::vector<Index> select_subset(Index n, Index count, std::uint64_t seed);

}  // namespace flowreg

#endif  // FLOWREG_DATA_HPP
