#pragma once

#include <cstdint>
#include <filesystem>
#include <utility>
#include <vector>

#include "spectr/rng.hpp"
#include "spectr/tensor.hpp"

namespace spectr {

// Raw hyperspectral volume, band-major: value(x, y, s) at (s*H + y)*W + x.
// This matches the HSC1 payload order byte for byte.
struct HsiCube {
  int width = 0;
  int height = 0;
  int bands = 0;
  std::vector<float> values;

  float& at(int x, int y, int s) {
    return values[(static_cast<size_t>(s) * height + y) * width + x];
  }
  float at(int x, int y, int s) const {
    return values[(static_cast<size_t>(s) * height + y) * width + x];
  }
  // [L, H, W, 1] tensor sharing the same element order
  Tensor to_tensor() const;
};

// Binary per-pixel label map, row-major y*W + x.
struct Mask {
  int width = 0;
  int height = 0;
  std::vector<uint8_t> values;

  uint8_t& at(int x, int y) { return values[static_cast<size_t>(y) * width + x]; }
  uint8_t at(int x, int y) const { return values[static_cast<size_t>(y) * width + x]; }
  size_t count() const;

  bool operator==(const Mask&) const = default;
};

// Synthetic phantom: a smooth background spectrum plus per-voxel noise, with
// 1..3 random ellipses whose union is shifted by +delta inside the
// discriminative band window only. Outside the window, lesion and background
// are identically distributed.
struct PhantomConfig {
  int width = 32;
  int height = 32;
  int bands = 30;
  int window_lo = 8;
  int window_hi = 13;  // inclusive
  float delta = 0.4f;
  float sigma = 0.1f;
  int min_lesions = 1;
  int max_lesions = 3;
  float min_coverage = 0.05f;
  float max_coverage = 0.40f;
  uint64_t seed = 0;
};

std::pair<HsiCube, Mask> generate_phantom(const PhantomConfig& cfg, int index);

// binary formats (little-endian):
//   HSC1: magic "HSC1", u32 W, u32 H, u32 L, then W*H*L float32 at (s*H+y)*W+x
//   HSM1: magic "HSM1", u32 W, u32 H, then W*H bytes in {0,1} at y*W+x
void write_cube(const std::filesystem::path& path, const HsiCube& cube);
HsiCube read_cube(const std::filesystem::path& path);
void write_mask(const std::filesystem::path& path, const Mask& mask);
Mask read_mask(const std::filesystem::path& path);

// augmentation pieces; the spatial transform is identical for every band
HsiCube rotate_cube(const HsiCube& cube, double degrees);  // bilinear, zero fill
Mask rotate_mask(const Mask& mask, double degrees);        // nearest, zero fill
void flip_horizontal(HsiCube& cube);
void flip_horizontal(Mask& mask);
void flip_vertical(HsiCube& cube);
void flip_vertical(Mask& mask);

// rotation by U[0,90) degrees, then vertical / horizontal flip each with
// probability 0.2; draws exactly (theta, u_vflip, u_hflip) from rng
std::pair<HsiCube, Mask> augment(const HsiCube& cube, const Mask& mask, Rng& rng);

struct Dataset {
  std::vector<HsiCube> cubes;
  std::vector<Mask> masks;
  std::vector<int> train_indices;
  std::vector<int> test_indices;
};

// Writes n phantom pairs as cubes/NNNN.hsc + masks/NNNN.hsm with a seeded
// disjoint 80/20 split.json. Deterministic byte-for-byte given the config.
void write_dataset(const std::filesystem::path& dir, int n, const PhantomConfig& cfg);
Dataset load_dataset(const std::filesystem::path& dir);

}  // namespace spectr
