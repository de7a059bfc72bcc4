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

#include "flowreg/data.hpp"

#include <zlib.h>

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <random>
#include <sstream>
#include <stdexcept>

namespace flowreg {

namespace {

constexpr std::uint32_t kIdxImageMagic = 0x00000803;
constexpr std::uint32_t kIdxLabelMagic = 0x00000801;

std::string hex(std::uint32_t v) {
  std::ostringstream out;
  out << "0x" << std::hex;
  out.width(8);
  out.fill('0');
  out << v;
  return out.str();
}

std::vector<unsigned char> read_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open " + path.string());
  return std::vector<unsigned char>(std::istreambuf_iterator<char>(in), {});
}

// gzread passes uncompressed files through unchanged.
std::vector<unsigned char> read_maybe_gzip(const std::filesystem::path& path) {
  gzFile f = gzopen(path.string().c_str(), "rb");
  if (f == nullptr) throw std::runtime_error("cannot open " + path.string());
  std::vector<unsigned char> out;
  unsigned char buffer[1 << 16];
  int got = 0;
  while ((got = gzread(f, buffer, sizeof(buffer))) > 0) out.insert(out.end(), buffer, buffer + got);
  const bool failed = got < 0;
  gzclose(f);
  if (failed) throw std::runtime_error("failed to decompress " + path.string());
  return out;
}

std::uint32_t big_endian_u32(const std::vector<unsigned char>& bytes, std::size_t at) {
  return (std::uint32_t{bytes[at]} << 24) | (std::uint32_t{bytes[at + 1]} << 16) | (std::uint32_t{bytes[at + 2]} << 8) |
         std::uint32_t{bytes[at + 3]};
}

std::filesystem::path first_existing(const std::filesystem::path& dir, std::initializer_list<const char*> names) {
  for (const char* name : names) {
    if (std::filesystem::exists(dir / name)) return dir / name;
  }
  throw std::runtime_error("missing file " + (dir / *names.begin()).string());
}

// Appends CIFAR records (label bytes, then 3 x 32 x 32 planar RGB) as HWC.
void read_cifar_file(const std::filesystem::path& path, std::size_t records, std::size_t label_bytes,
                     std::size_t label_offset, Array& pixels, std::vector<int>& labels) {
  constexpr std::size_t kPlane = 32 * 32;
  const std::size_t record = label_bytes + 3 * kPlane;
  const std::size_t expected = records * record;
  std::error_code ec;
  const auto actual = std::filesystem::file_size(path, ec);
  if (ec) throw std::runtime_error("missing CIFAR file " + path.string());
  if (actual != expected) {
    throw std::runtime_error("CIFAR file " + path.string() + " has " + std::to_string(actual) + " bytes, expected " +
                             std::to_string(expected));
  }
  const std::vector<unsigned char> bytes = read_file(path);
  const Index base = static_cast<Index>(labels.size());
  pixels.conservativeResize((base + static_cast<Index>(records)) * static_cast<Index>(3 * kPlane));
  for (std::size_t r = 0; r < records; ++r) {
    const unsigned char* rec = bytes.data() + r * record;
    labels.push_back(rec[label_offset]);
    double* dst = pixels.data() + (base + static_cast<Index>(r)) * static_cast<Index>(3 * kPlane);
    for (std::size_t p = 0; p < kPlane; ++p)
      for (std::size_t c = 0; c < 3; ++c) dst[p * 3 + c] = rec[label_bytes + c * kPlane + p] / 255.0;
  }
}

Dataset make_dataset(Array pixels, std::vector<int> labels, Index h, Index w, Index c, std::string split, int classes) {
  const Index n = static_cast<Index>(labels.size());
  Dataset d{Tensor({n, h, w, c}, std::move(pixels)), std::move(labels), std::move(split), classes};
  d.validate();
  return d;
}

double coverage(ShapeKind kind, double y, double x, double cy, double cx, double radius) {
  // 4 x 4 supersampling of the unit pixel whose top-left corner is (y, x).
  constexpr int kSub = 4;
  int inside = 0;
  for (int i = 0; i < kSub; ++i)
    for (int j = 0; j < kSub; ++j) {
      const double py = y + (i + 0.5) / kSub, px = x + (j + 0.5) / kSub;
      const double dy = py - cy, dx = px - cx;
      const bool in = kind == ShapeKind::kDisc ? dy * dy + dx * dx <= radius * radius
                                               : std::abs(dy) <= radius && std::abs(dx) <= radius;
      inside += in ? 1 : 0;
    }
  return static_cast<double>(inside) / (kSub * kSub);
}

}  // namespace

Tensor Dataset::images_at(std::span<const Index> indices) const {
  const Index stride = images.numel() / std::max<Index>(size(), 1);
  Array out(static_cast<Index>(indices.size()) * stride);
  for (std::size_t k = 0; k < indices.size(); ++k) {
    const Index i = indices[k];
    if (i < 0 || i >= size()) throw std::out_of_range("dataset index " + std::to_string(i) + " out of range");
    out.segment(static_cast<Index>(k) * stride, stride) = images.array().segment(i * stride, stride);
  }
  Shape shape = images.shape();
  shape[0] = static_cast<Index>(indices.size());
  return Tensor(std::move(shape), std::move(out));
}

std::vector<int> Dataset::labels_at(std::span<const Index> indices) const {
  std::vector<int> out;
  out.reserve(indices.size());
  for (Index i : indices) out.push_back(labels.at(static_cast<std::size_t>(i)));
  return out;
}

Dataset Dataset::subset(std::span<const Index> indices) const {
  return Dataset{images_at(indices), labels_at(indices), split, num_classes};
}

void Dataset::validate() const {
  if (images.rank() != 4 || images.dim(0) != size()) {
    throw std::invalid_argument("dataset: " + std::to_string(size()) + " labels for images " + to_string(images.shape()));
  }
  if (images.numel() > 0 && (images.array().minCoeff() < 0.0 || images.array().maxCoeff() > 1.0)) {
    throw std::invalid_argument("dataset: pixel values outside [0, 1]");
  }
  for (int y : labels) {
    if (y < 0 || y >= num_classes) {
      throw std::invalid_argument("dataset: label " + std::to_string(y) + " outside [0, " + std::to_string(num_classes) + ")");
    }
  }
}

DatasetPair load_cifar(const std::filesystem::path& dir, int variant) {
  if (variant != 10 && variant != 100) throw std::invalid_argument("load_cifar: variant must be 10 or 100");
  std::filesystem::path root = dir;
  const char* nested = variant == 10 ? "cifar-10-batches-bin" : "cifar-100-binary";
  if (std::filesystem::is_directory(dir / nested)) root = dir / nested;

  Array train_pixels, test_pixels;
  std::vector<int> train_labels, test_labels;
  if (variant == 10) {
    for (int b = 1; b <= 5; ++b) {
      read_cifar_file(root / ("data_batch_" + std::to_string(b) + ".bin"), 10000, 1, 0, train_pixels, train_labels);
    }
    read_cifar_file(root / "test_batch.bin", 10000, 1, 0, test_pixels, test_labels);
  } else {
    read_cifar_file(root / "train.bin", 50000, 2, 1, train_pixels, train_labels);
    read_cifar_file(root / "test.bin", 10000, 2, 1, test_pixels, test_labels);
  }
  return {make_dataset(std::move(train_pixels), std::move(train_labels), 32, 32, 3, "train", variant),
          make_dataset(std::move(test_pixels), std::move(test_labels), 32, 32, 3, "test", variant)};
}

Tensor read_idx_images(const std::filesystem::path& path) {
  const std::vector<unsigned char> bytes = read_maybe_gzip(path);
  if (bytes.size() < 16) throw std::runtime_error("IDX file " + path.string() + " is too short for its header");
  const std::uint32_t magic = big_endian_u32(bytes, 0);
  if (magic != kIdxImageMagic) {
    throw std::runtime_error("IDX image file " + path.string() + ": found magic " + hex(magic) + ", expected " +
                             hex(kIdxImageMagic));
  }
  const Index n = big_endian_u32(bytes, 4), rows = big_endian_u32(bytes, 8), cols = big_endian_u32(bytes, 12);
  const std::size_t expected = 16 + static_cast<std::size_t>(n * rows * cols);
  if (bytes.size() != expected) {
    throw std::runtime_error("IDX image file " + path.string() + " has " + std::to_string(bytes.size()) +
                             " bytes, expected " + std::to_string(expected));
  }
  Array pixels(n * rows * cols);
  for (Index i = 0; i < pixels.size(); ++i) pixels[i] = bytes[16 + static_cast<std::size_t>(i)] / 255.0;
  return Tensor({n, rows, cols, 1}, std::move(pixels));
}

std::vector<int> read_idx_labels(const std::filesystem::path& path) {
  const std::vector<unsigned char> bytes = read_maybe_gzip(path);
  if (bytes.size() < 8) throw std::runtime_error("IDX file " + path.string() + " is too short for its header");
  const std::uint32_t magic = big_endian_u32(bytes, 0);
  if (magic != kIdxLabelMagic) {
    throw std::runtime_error("IDX label file " + path.string() + ": found magic " + hex(magic) + ", expected " +
                             hex(kIdxLabelMagic));
  }
  const std::size_t n = big_endian_u32(bytes, 4);
  if (bytes.size() != 8 + n) {
    throw std::runtime_error("IDX label file " + path.string() + " has " + std::to_string(bytes.size()) +
                             " bytes, expected " + std::to_string(8 + n));
  }
  return std::vector<int>(bytes.begin() + 8, bytes.end());
}

DatasetPair load_mnist_idx(const std::filesystem::path& dir) {
  auto load = [&](const char* images, const char* images_gz, const char* labels, const char* labels_gz,
                  const char* split) {
    Tensor x = read_idx_images(first_existing(dir, {images, images_gz}));
    std::vector<int> y = read_idx_labels(first_existing(dir, {labels, labels_gz}));
    if (x.dim(0) != static_cast<Index>(y.size())) {
      throw std::runtime_error("MNIST " + std::string(split) + ": " + std::to_string(x.dim(0)) + " images but " +
                               std::to_string(y.size()) + " labels");
    }
    Dataset d{std::move(x), std::move(y), split, 10};
    d.validate();
    return d;
  };
  return {load("train-images-idx3-ubyte", "train-images-idx3-ubyte.gz", "train-labels-idx1-ubyte",
               "train-labels-idx1-ubyte.gz", "train"),
          load("t10k-images-idx3-ubyte", "t10k-images-idx3-ubyte.gz", "t10k-labels-idx1-ubyte",
               "t10k-labels-idx1-ubyte.gz", "test")};
}

Tensor render_shape(ShapeKind kind, Index size, double center_row, double center_col, double radius) {
  Array pixels(size * size);
  for (Index i = 0; i < size; ++i)
    for (Index j = 0; j < size; ++j) {
      pixels[i * size + j] = coverage(kind, static_cast<double>(i), static_cast<double>(j), center_row, center_col, radius);
    }
  return Tensor({size, size, 1}, std::move(pixels));
}

Dataset synth_shapes(Index n, Index size, std::uint64_t seed) { return synth_shapes(n, size, seed, SynthOptions{}); }

Dataset synth_shapes(Index n, Index size, std::uint64_t seed, const SynthOptions& options) {
  if (size < 8) throw std::invalid_argument("synth_shapes: size must be >= 8");
  if (n < 0) throw std::invalid_argument("synth_shapes: negative count");
  if (!(options.min_radius > 0.0 && options.min_radius <= options.max_radius && options.max_radius < 0.5)) {
    throw std::invalid_argument("synth_shapes: radius range must satisfy 0 < min <= max < 0.5");
  }
  if (!(options.min_contrast > 0.0 && options.min_contrast <= 1.0) || !(options.noise >= 0.0) || options.clutter < 0) {
    throw std::invalid_argument("synth_shapes: invalid contrast, noise or clutter setting");
  }
  std::mt19937_64 rng(seed);
  const double s = static_cast<double>(size);
  std::uniform_real_distribution<double> radius_dist(options.min_radius * s, options.max_radius * s);
  std::uniform_real_distribution<double> unit(0.0, 1.0);
  std::normal_distribution<double> gauss(0.0, 1.0);
  const Index area = size * size;
  Array pixels(n * area);
  std::vector<int> labels(static_cast<std::size_t>(n));
  for (Index k = 0; k < n; ++k) {
    const ShapeKind kind = k % 2 == 0 ? ShapeKind::kSquare : ShapeKind::kDisc;
    const double radius = radius_dist(rng);
    const double margin = radius + 0.5;
    const double cy = margin + unit(rng) * (s - 2.0 * margin);
    const double cx = margin + unit(rng) * (s - 2.0 * margin);
    Array img = render_shape(kind, size, cy, cx, radius).array();
    if (options.min_contrast < 1.0) {
      const double contrast = options.min_contrast + unit(rng) * (1.0 - options.min_contrast);
      const double background = unit(rng) * (1.0 - contrast);
      img = background + contrast * img;
    }
    for (int c = 0; c < options.clutter; ++c) {
      // Anti-aliased 1-pixel stroke between two random points.
      const double y0 = unit(rng) * s, x0 = unit(rng) * s, y1 = unit(rng) * s, x1 = unit(rng) * s;
      const double level = 0.3 + 0.7 * unit(rng);
      const double dy = y1 - y0, dx = x1 - x0, len2 = std::max(dy * dy + dx * dx, 1e-12);
      for (Index i = 0; i < size; ++i)
        for (Index j = 0; j < size; ++j) {
          const double py = static_cast<double>(i) + 0.5, px = static_cast<double>(j) + 0.5;
          const double t = std::clamp(((py - y0) * dy + (px - x0) * dx) / len2, 0.0, 1.0);
          const double d = std::hypot(py - (y0 + t * dy), px - (x0 + t * dx));
          const double cover = std::clamp(1.0 - d, 0.0, 1.0);
          img[i * size + j] = std::max(img[i * size + j], level * cover);
        }
    }
    if (options.noise > 0.0) {
      for (Index i = 0; i < area; ++i) img[i] = std::clamp(img[i] + options.noise * gauss(rng), 0.0, 1.0);
    }
    pixels.segment(k * area, area) = img;
    labels[static_cast<std::size_t>(k)] = static_cast<int>(kind);
  }
  return make_dataset(std::move(pixels), std::move(labels), size, size, 1, "synthetic", 2);
}

Tensor augment(const Tensor& batch, const AugmentConfig& config, std::uint64_t seed) {
  if (!config.enabled) return batch;
  if (batch.rank() != 4) throw ShapeError("augment: expected NHWC batch, got " + to_string(batch.shape()));
  const Index n = batch.dim(0), h = batch.dim(1), w = batch.dim(2), c = batch.dim(3);
  const Index pad = std::min({config.pad, h - 1, w - 1});
  std::mt19937_64 rng(seed);
  std::uniform_int_distribution<Index> offset(0, 2 * pad);
  std::bernoulli_distribution flip(0.5);
  auto reflect = [](Index i, Index extent) {
    if (i < 0) return -i;
    if (i >= extent) return 2 * (extent - 1) - i;
    return i;
  };
  Array out(batch.numel());
  for (Index b = 0; b < n; ++b) {
    const Index dy = offset(rng) - pad, dx = offset(rng) - pad;
    const bool mirror = config.flip && flip(rng);
    for (Index i = 0; i < h; ++i)
      for (Index j = 0; j < w; ++j) {
        const Index sj = mirror ? w - 1 - j : j;
        const Index si = reflect(i + dy, h), sx = reflect(sj + dx, w);
        for (Index ch = 0; ch < c; ++ch) {
          out[((b * h + i) * w + j) * c + ch] = batch[((b * h + si) * w + sx) * c + ch];
        }
      }
  }
  return Tensor(batch.shape(), std::move(out));
}

std::vector<Index> batch_order(Index n, std::uint64_t seed, int epoch) {
  std::vector<Index> order(static_cast<std::size_t>(n));
  std::iota(order.begin(), order.end(), Index{0});
  std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ull + static_cast<std::uint64_t>(epoch) + 1);
  for (std::size_t i = order.size(); i > 1; --i) {
    std::uniform_int_distribution<std::size_t> pick(0, i - 1);
    std::swap(order[i - 1], order[pick(rng)]);
  }
  return order;
}

std::vector<Index> select_subset(Index n, Index count, std::uint64_t seed) {
  std::vector<Index> order = batch_order(n, seed ^ 0x5EEDu, 0);
  if (count < n) order.resize(static_cast<std::size_t>(std::max<Index>(count, 0)));
  std::sort(order.begin(), order.end());
  return order;
}

}  // namespace flowreg
