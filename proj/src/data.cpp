#include "spectr/data.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>

#include <json.hpp>

#include "spectr/error.hpp"

namespace spectr {

namespace fs = std::filesystem;

Tensor HsiCube::to_tensor() const {
  return Tensor::from({bands, height, width, 1}, values);
}

size_t Mask::count() const {
  size_t n = 0;
  for (uint8_t v : values) n += v;
  return n;
}

namespace {

constexpr double kPi = 3.14159265358979323846;
// refuse absurd headers before allocating: 2^28 elements = 1 GiB of float32
constexpr uint64_t kMaxElements = uint64_t{1} << 28;

void put_u32le(std::string& out, uint32_t v) {
  out.push_back(static_cast<char>(v & 0xFF));
  out.push_back(static_cast<char>((v >> 8) & 0xFF));
  out.push_back(static_cast<char>((v >> 16) & 0xFF));
  out.push_back(static_cast<char>((v >> 24) & 0xFF));
}

uint32_t get_u32le(const unsigned char* p) {
  return static_cast<uint32_t>(p[0]) | (static_cast<uint32_t>(p[1]) << 8) |
         (static_cast<uint32_t>(p[2]) << 16) | (static_cast<uint32_t>(p[3]) << 24);
}

void append_f32le(std::string& out, const float* data, size_t n) {
  if constexpr (std::endian::native == std::endian::little) {
    out.append(reinterpret_cast<const char*>(data), n * sizeof(float));
  } else {
    for (size_t i = 0; i < n; ++i) {
      uint32_t bits = std::bit_cast<uint32_t>(data[i]);
      put_u32le(out, bits);
    }
  }
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw FormatError("cannot open " + path.string());
  std::string bytes((std::istreambuf_iterator<char>(in)),
                    std::istreambuf_iterator<char>());
  return bytes;
}

void write_file(const fs::path& path, const std::string& bytes) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw FormatError("cannot write " + path.string());
  out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
  if (!out) throw FormatError("short write to " + path.string());
}

}  // namespace

void write_cube(const fs::path& path, const HsiCube& cube) {
  std::string bytes;
  bytes.reserve(16 + cube.values.size() * 4);
  bytes += "HSC1";
  put_u32le(bytes, static_cast<uint32_t>(cube.width));
  put_u32le(bytes, static_cast<uint32_t>(cube.height));
  put_u32le(bytes, static_cast<uint32_t>(cube.bands));
  append_f32le(bytes, cube.values.data(), cube.values.size());
  write_file(path, bytes);
}

HsiCube read_cube(const fs::path& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() < 16)
    throw FormatError(path.string() + ": truncated header, " +
                      std::to_string(bytes.size()) + " bytes present, 16 required");
  if (bytes.compare(0, 4, "HSC1") != 0)
    throw FormatError(path.string() + ": bad magic at byte 0, expected 'HSC1'");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const uint32_t w = get_u32le(p + 4), h = get_u32le(p + 8), l = get_u32le(p + 12);
  if (w == 0) throw FormatError(path.string() + ": zero width at byte 4");
  if (h == 0) throw FormatError(path.string() + ": zero height at byte 8");
  if (l == 0) throw FormatError(path.string() + ": zero band count at byte 12");
  const uint64_t n = static_cast<uint64_t>(w) * h * l;
  if (n > kMaxElements)
    throw FormatError(path.string() + ": dimension overflow at byte 4 (" +
                      std::to_string(n) + " elements)");
  const uint64_t expected = n * 4;
  if (bytes.size() - 16 != expected)
    throw FormatError(path.string() + ": payload length mismatch at byte 16, expected " +
                      std::to_string(expected) + " bytes, found " +
                      std::to_string(bytes.size() - 16));
  HsiCube cube;
  cube.width = static_cast<int>(w);
  cube.height = static_cast<int>(h);
  cube.bands = static_cast<int>(l);
  cube.values.resize(n);
  if constexpr (std::endian::native == std::endian::little) {
    std::memcpy(cube.values.data(), bytes.data() + 16, expected);
  } else {
    const auto* q = reinterpret_cast<const unsigned char*>(bytes.data()) + 16;
    for (uint64_t i = 0; i < n; ++i)
      cube.values[i] = std::bit_cast<float>(get_u32le(q + i * 4));
  }
  return cube;
}

void write_mask(const fs::path& path, const Mask& mask) {
  std::string bytes;
  bytes.reserve(12 + mask.values.size());
  bytes += "HSM1";
  put_u32le(bytes, static_cast<uint32_t>(mask.width));
  put_u32le(bytes, static_cast<uint32_t>(mask.height));
  bytes.append(reinterpret_cast<const char*>(mask.values.data()), mask.values.size());
  write_file(path, bytes);
}

Mask read_mask(const fs::path& path) {
  const std::string bytes = read_file(path);
  if (bytes.size() < 12)
    throw FormatError(path.string() + ": truncated header, " +
                      std::to_string(bytes.size()) + " bytes present, 12 required");
  if (bytes.compare(0, 4, "HSM1") != 0)
    throw FormatError(path.string() + ": bad magic at byte 0, expected 'HSM1'");
  const auto* p = reinterpret_cast<const unsigned char*>(bytes.data());
  const uint32_t w = get_u32le(p + 4), h = get_u32le(p + 8);
  if (w == 0) throw FormatError(path.string() + ": zero width at byte 4");
  if (h == 0) throw FormatError(path.string() + ": zero height at byte 8");
  const uint64_t n = static_cast<uint64_t>(w) * h;
  if (n > kMaxElements)
    throw FormatError(path.string() + ": dimension overflow at byte 4");
  if (bytes.size() - 12 != n)
    throw FormatError(path.string() + ": payload length mismatch at byte 12, expected " +
                      std::to_string(n) + " bytes, found " +
                      std::to_string(bytes.size() - 12));
  Mask m;
  m.width = static_cast<int>(w);
  m.height = static_cast<int>(h);
  m.values.resize(n);
  for (uint64_t i = 0; i < n; ++i) {
    const unsigned char v = static_cast<unsigned char>(bytes[12 + i]);
    if (v > 1)
      throw FormatError(path.string() + ": invalid mask value " + std::to_string(v) +
                        " at byte " + std::to_string(12 + i));
    m.values[i] = v;
  }
  return m;
}

std::pair<HsiCube, Mask> generate_phantom(const PhantomConfig& cfg, int index) {
  if (cfg.width < 1 || cfg.height < 1 || cfg.bands < 1)
    throw ConfigError("phantom: dimensions must be positive");
  if (cfg.window_lo < 0 || cfg.window_hi < cfg.window_lo || cfg.window_hi >= cfg.bands)
    throw ConfigError("phantom: band window [" + std::to_string(cfg.window_lo) + "," +
                      std::to_string(cfg.window_hi) + "] outside [0," +
                      std::to_string(cfg.bands) + ")");
  if (!(cfg.delta > 0.0f)) throw ConfigError("phantom: delta must be positive");
  if (cfg.sigma < 0.0f) throw ConfigError("phantom: sigma must be non-negative");
  if (cfg.min_lesions < 1 || cfg.max_lesions < cfg.min_lesions)
    throw ConfigError("phantom: bad lesion count range");

  const int W = cfg.width, H = cfg.height, L = cfg.bands;
  Rng rng(mix_seed(cfg.seed, static_cast<uint64_t>(index)));

  const double phi = rng.uniform(0.0, 2.0 * kPi);
  const double psi = rng.uniform(0.0, 2.0 * kPi);
  std::vector<float> base(static_cast<size_t>(L));
  for (int s = 0; s < L; ++s) {
    const double t = static_cast<double>(s) / L;
    base[static_cast<size_t>(s)] = static_cast<float>(
        0.55 + 0.25 * std::sin(2.0 * kPi * t + phi) + 0.08 * std::cos(4.0 * kPi * t + psi));
  }

  struct Ellipse {
    double cx, cy, a, b, cosT, sinT;
  };
  Mask mask;
  mask.width = W;
  mask.height = H;
  const double axis_scale = std::min(W, H);
  for (int attempt = 0; attempt < 200; ++attempt) {
    mask.values.assign(static_cast<size_t>(W) * H, 0);
    const int k = rng.uniform_int(cfg.min_lesions, cfg.max_lesions);
    std::vector<Ellipse> es;
    for (int i = 0; i < k; ++i) {
      Ellipse e;
      e.cx = rng.uniform(0.0, W);
      e.cy = rng.uniform(0.0, H);
      e.a = rng.uniform(0.10, 0.28) * axis_scale;
      e.b = rng.uniform(0.10, 0.28) * axis_scale;
      const double theta = rng.uniform(0.0, kPi);
      e.cosT = std::cos(theta);
      e.sinT = std::sin(theta);
      es.push_back(e);
    }
    size_t covered = 0;
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        for (const Ellipse& e : es) {
          const double u = x - e.cx, v = y - e.cy;
          const double ur = u * e.cosT + v * e.sinT;
          const double vr = -u * e.sinT + v * e.cosT;
          if ((ur / e.a) * (ur / e.a) + (vr / e.b) * (vr / e.b) <= 1.0) {
            mask.at(x, y) = 1;
            ++covered;
            break;
          }
        }
      }
    const double coverage = static_cast<double>(covered) / (static_cast<double>(W) * H);
    if (coverage >= cfg.min_coverage && coverage <= cfg.max_coverage) break;
  }

  HsiCube cube;
  cube.width = W;
  cube.height = H;
  cube.bands = L;
  cube.values.resize(static_cast<size_t>(W) * H * L);
  for (int s = 0; s < L; ++s) {
    const bool in_window = s >= cfg.window_lo && s <= cfg.window_hi;
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x) {
        double v = base[static_cast<size_t>(s)];
        if (cfg.sigma > 0.0f) v += cfg.sigma * rng.normal();
        if (in_window && mask.at(x, y)) v += cfg.delta;
        cube.at(x, y, s) = static_cast<float>(v);
      }
  }
  return {std::move(cube), std::move(mask)};
}

HsiCube rotate_cube(const HsiCube& cube, double degrees) {
  const int W = cube.width, H = cube.height, L = cube.bands;
  const double rad = degrees * kPi / 180.0;
  const double c = std::cos(rad), s = std::sin(rad);
  const double cx = (W - 1) / 2.0, cy = (H - 1) / 2.0;
  HsiCube out;
  out.width = W;
  out.height = H;
  out.bands = L;
  out.values.assign(cube.values.size(), 0.0f);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double dx = x - cx, dy = y - cy;
      const double sx = cx + c * dx + s * dy;
      const double sy = cy - s * dx + c * dy;
      const int x0 = static_cast<int>(std::floor(sx));
      const int y0 = static_cast<int>(std::floor(sy));
      const double fx = sx - x0, fy = sy - y0;
      if (x0 < -1 || x0 > W - 1 || y0 < -1 || y0 > H - 1) continue;
      auto sample = [&](int xx, int yy, int band) -> double {
        if (xx < 0 || xx >= W || yy < 0 || yy >= H) return 0.0;
        return cube.at(xx, yy, band);
      };
      for (int band = 0; band < L; ++band) {
        const double v00 = sample(x0, y0, band);
        const double v10 = sample(x0 + 1, y0, band);
        const double v01 = sample(x0, y0 + 1, band);
        const double v11 = sample(x0 + 1, y0 + 1, band);
        // difference form: exact for constant fields
        const double v = v00 + fx * (v10 - v00) + fy * (v01 - v00) +
                         fx * fy * (v00 - v10 - v01 + v11);
        out.at(x, y, band) = static_cast<float>(v);
      }
    }
  return out;
}

Mask rotate_mask(const Mask& mask, double degrees) {
  const int W = mask.width, H = mask.height;
  const double rad = degrees * kPi / 180.0;
  const double c = std::cos(rad), s = std::sin(rad);
  const double cx = (W - 1) / 2.0, cy = (H - 1) / 2.0;
  Mask out;
  out.width = W;
  out.height = H;
  out.values.assign(mask.values.size(), 0);
  for (int y = 0; y < H; ++y)
    for (int x = 0; x < W; ++x) {
      const double dx = x - cx, dy = y - cy;
      const double sx = cx + c * dx + s * dy;
      const double sy = cy - s * dx + c * dy;
      const int xx = static_cast<int>(std::lround(sx));
      const int yy = static_cast<int>(std::lround(sy));
      if (xx < 0 || xx >= W || yy < 0 || yy >= H) continue;
      out.at(x, y) = mask.at(xx, yy);
    }
  return out;
}

void flip_horizontal(HsiCube& cube) {
  for (int s = 0; s < cube.bands; ++s)
    for (int y = 0; y < cube.height; ++y)
      for (int x = 0; x < cube.width / 2; ++x)
        std::swap(cube.at(x, y, s), cube.at(cube.width - 1 - x, y, s));
}

void flip_horizontal(Mask& mask) {
  for (int y = 0; y < mask.height; ++y)
    for (int x = 0; x < mask.width / 2; ++x)
      std::swap(mask.at(x, y), mask.at(mask.width - 1 - x, y));
}

void flip_vertical(HsiCube& cube) {
  for (int s = 0; s < cube.bands; ++s)
    for (int y = 0; y < cube.height / 2; ++y)
      for (int x = 0; x < cube.width; ++x)
        std::swap(cube.at(x, y, s), cube.at(x, cube.height - 1 - y, s));
}

void flip_vertical(Mask& mask) {
  for (int y = 0; y < mask.height / 2; ++y)
    for (int x = 0; x < mask.width; ++x)
      std::swap(mask.at(x, y), mask.at(x, mask.height - 1 - y));
}

std::pair<HsiCube, Mask> augment(const HsiCube& cube, const Mask& mask, Rng& rng) {
  const double theta = rng.uniform(0.0, 90.0);
  const bool vflip = rng.uniform() < 0.2;
  const bool hflip = rng.uniform() < 0.2;
  HsiCube c = rotate_cube(cube, theta);
  Mask m = rotate_mask(mask, theta);
  if (vflip) {
    flip_vertical(c);
    flip_vertical(m);
  }
  if (hflip) {
    flip_horizontal(c);
    flip_horizontal(m);
  }
  return {std::move(c), std::move(m)};
}

namespace {

std::string item_name(int index, const char* ext) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%04d%s", index, ext);
  return buf;
}

}  // namespace

void write_dataset(const fs::path& dir, int n, const PhantomConfig& cfg) {
  if (n < 1) throw ConfigError("dataset: need at least one item");
  fs::create_directories(dir / "cubes");
  fs::create_directories(dir / "masks");
  for (int i = 0; i < n; ++i) {
    auto [cube, mask] = generate_phantom(cfg, i);
    write_cube(dir / "cubes" / item_name(i, ".hsc"), cube);
    write_mask(dir / "masks" / item_name(i, ".hsm"), mask);
  }
  std::vector<int> order(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) order[static_cast<size_t>(i)] = i;
  Rng rng(mix_seed(cfg.seed, 0x53504C49u));  // split stream
  shuffle(order, rng);
  const int n_train = static_cast<int>(std::llround(0.8 * n));
  std::vector<int> train(order.begin(), order.begin() + n_train);
  std::vector<int> test(order.begin() + n_train, order.end());
  std::sort(train.begin(), train.end());
  std::sort(test.begin(), test.end());
  nlohmann::json j;
  j["train"] = train;
  j["test"] = test;
  std::ofstream out(dir / "split.json", std::ios::trunc);
  out << j.dump(2) << "\n";
}

Dataset load_dataset(const fs::path& dir) {
  std::ifstream in(dir / "split.json");
  if (!in) throw FormatError("cannot open " + (dir / "split.json").string());
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::parse_error& e) {
    throw FormatError("split.json: " + std::string(e.what()));
  }
  Dataset ds;
  ds.train_indices = j.at("train").get<std::vector<int>>();
  ds.test_indices = j.at("test").get<std::vector<int>>();
  int max_index = -1;
  for (int i : ds.train_indices) max_index = std::max(max_index, i);
  for (int i : ds.test_indices) max_index = std::max(max_index, i);
  ds.cubes.resize(static_cast<size_t>(max_index) + 1);
  ds.masks.resize(static_cast<size_t>(max_index) + 1);
  auto load_item = [&](int i) {
    ds.cubes[static_cast<size_t>(i)] = read_cube(dir / "cubes" / item_name(i, ".hsc"));
    ds.masks[static_cast<size_t>(i)] = read_mask(dir / "masks" / item_name(i, ".hsm"));
  };
  for (int i : ds.train_indices) load_item(i);
  for (int i : ds.test_indices) load_item(i);
  return ds;
}

}  // namespace spectr
