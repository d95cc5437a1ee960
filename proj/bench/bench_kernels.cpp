// Timing comparison between the OpenMP float kernels and the serial
// double-precision reference implementations, plus a whole-forward run.
#include <chrono>
#include <cstdio>
#include <cstring>
#include <string>
#include <vector>

#include "spectr/data.hpp"
#include "spectr/model.hpp"
#include "spectr/ops.hpp"
#include "spectr/reference.hpp"
#include "spectr/rng.hpp"
#include "spectr/tensor.hpp"
#include "spectr/threading.hpp"

using namespace spectr;

namespace {

double now_ms() {
  return std::chrono::duration<double, std::milli>(
             std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

template <typename F>
double time_best_ms(F&& fn, int reps) {
  double best = 1e300;
  for (int r = 0; r < reps; ++r) {
    const double t0 = now_ms();
    fn();
    best = std::min(best, now_ms() - t0);
  }
  return best;
}

Tensor random_tensor(std::vector<int> shape, Rng& rng) {
  Tensor t(std::move(shape));
  for (size_t i = 0; i < t.size(); ++i)
    t.data()[i] = static_cast<float>(rng.normal());
  return t;
}

std::vector<double> to_double(const Tensor& t) {
  std::vector<double> v(t.size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = t.data()[i];
  return v;
}

void report(const char* name, double omp_ms, double ref_ms) {
  std::printf("%-22s  omp %8.2f ms   serial ref %9.2f ms   speedup %5.1fx\n", name,
              omp_ms, ref_ms, ref_ms / omp_ms);
}

}  // namespace

int main(int argc, char** argv) {
  const bool quick = argc > 1 && std::string(argv[1]) == "--quick";
  const int reps = quick ? 1 : 3;
  const double scale = quick ? 0.5 : 1.0;
  Rng rng(7);
  NoGradGuard ng;

  std::printf("threads: %d, deterministic: %s\n", max_threads(),
              deterministic() ? "on" : "off");

  {
    const int m = static_cast<int>(256 * scale) + 8;
    Tensor a = random_tensor({m, m}, rng);
    Tensor b = random_tensor({m, m}, rng);
    const auto ad = to_double(a);
    const auto bd = to_double(b);
    const double t_omp = time_best_ms([&] { matmul(a, b); }, reps);
    const double t_ref = time_best_ms([&] { ref::matmul(ad, m, m, bd, m); }, reps);
    report("matmul", t_omp, t_ref);
  }

  {
    const int L = 30, H = static_cast<int>(32 * scale) + 8, W = H, Ci = 16, Co = 16;
    Tensor f = random_tensor({L, H, W, Ci}, rng);
    Tensor k = random_tensor({Co, Ci, 3, 3}, rng);
    Tensor bias = random_tensor({Co}, rng);
    const auto fd = to_double(f);
    const auto kd = to_double(k);
    const auto bd = to_double(bias);
    const double t_omp = time_best_ms([&] { band_conv2d(f, k, bias); }, reps);
    const double t_ref =
        time_best_ms([&] { ref::band_conv2d(fd, L, H, W, Ci, kd, Co, 3, bd); }, reps);
    report("band_conv2d", t_omp, t_ref);
  }

  {
    const int L = 15, H = static_cast<int>(16 * scale) + 8, W = H, Ci = 32, Co = 32;
    Tensor f = random_tensor({L, H, W, Ci}, rng);
    Tensor k = random_tensor({Co, Ci, 3, 3, 3}, rng);
    Tensor bias = random_tensor({Co}, rng);
    const auto fd = to_double(f);
    const auto kd = to_double(k);
    const auto bd = to_double(bias);
    const double t_omp = time_best_ms([&] { conv3d(f, k, bias); }, reps);
    const double t_ref =
        time_best_ms([&] { ref::conv3d(fd, L, H, W, Ci, kd, Co, 3, bd); }, reps);
    report("conv3d", t_omp, t_ref);
  }

  {
    const int L = 30, H = static_cast<int>(32 * scale) + 8, W = H, C = 16;
    Tensor f = random_tensor({L, H, W, C}, rng);
    const auto fd = to_double(f);
    const double t_omp = time_best_ms([&] { maxpool3(f); }, reps);
    const double t_ref = time_best_ms([&] { ref::maxpool3(fd, L, H, W, C); }, reps);
    report("maxpool3", t_omp, t_ref);
  }

  {
    // full forward, float/OpenMP model vs serial double reference
    const int side = quick ? 16 : 32, bands = quick ? 16 : 30;
    ModelConfig cfg;
    cfg.base_channels = quick ? 8 : 16;
    SpectrModel model(cfg, bands, 11);
    PhantomConfig pc;
    pc.width = side;
    pc.height = side;
    pc.bands = bands;
    pc.window_lo = 4;
    pc.window_hi = 9;
    auto [cube, mask] = generate_phantom(pc, 0);
    Tensor x = cube.to_tensor();
    const double t_omp = time_best_ms([&] { model.forward(x); }, reps);
    const double t_ref = time_best_ms([&] { ref::forward_prob_map(model, cube); }, reps);
    report("model forward", t_omp, t_ref);
  }

  return 0;
}
