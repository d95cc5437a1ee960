#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <memory>
#include <string>
#include <vector>

#include "ops_common.hpp"
#include "spectr/ops.hpp"

namespace spectr {

using detail::ensure_grad;
using detail::make_output;
using detail::track;

namespace {

// Kernels are repacked to [tap][cin][cout] so both the forward accumulation
// and the input-gradient gather run with a contiguous cout inner loop.
std::vector<float> repack_taps_first(const float* k, int co, int ci, int taps) {
  std::vector<float> r(static_cast<size_t>(taps) * ci * co);
  for (int t = 0; t < taps; ++t)
    for (int i = 0; i < ci; ++i)
      for (int o = 0; o < co; ++o)
        r[(static_cast<size_t>(t) * ci + i) * co + o] =
            k[(static_cast<size_t>(o) * ci + i) * taps + t];
  return r;
}

// Deterministic kernel-gradient reduction: the pixel range is split into a
// fixed number of chunks, each chunk accumulates a private [tap][cin][cout]
// buffer, and partials are merged in chunk order.
constexpr int kConvGradChunks = 8;

}  // namespace

Tensor band_conv2d(const Tensor& f, const Tensor& k, const Tensor& bias) {
  if (f.ndim() != 4) throw ShapeError("band_conv2d: expected [L,H,W,C] input");
  const bool per_band = k.ndim() == 5;
  if (!per_band && k.ndim() != 4)
    throw ShapeError("band_conv2d: kernel must be [Cout,Cin,K,K] or [L,Cout,Cin,K,K]");
  const int L = f.dim(0), H = f.dim(1), W = f.dim(2), Cin = f.dim(3);
  const int kb = per_band ? 1 : 0;
  const int Cout = k.dim(kb + 0), KCi = k.dim(kb + 1), Kh = k.dim(kb + 2), Kw = k.dim(kb + 3);
  if (per_band && k.dim(0) != L)
    throw ShapeError("band_conv2d: per-band kernel band count mismatch");
  if (KCi != Cin)
    throw ShapeError("band_conv2d: kernel input channels " + std::to_string(KCi) +
                     " != feature channels " + std::to_string(Cin));
  if (Kh != Kw || Kh % 2 == 0) throw ShapeError("band_conv2d: kernel must be odd square");
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != Cout))
    throw ShapeError("band_conv2d: bias shape mismatch");
  const int K = Kh, P = K / 2, taps = K * K;

  const bool rg = track({&f, &k, &bias});
  Tensor y = make_output({L, H, W, Cout}, rg);

  const size_t ksz = static_cast<size_t>(taps) * Cin * Cout;
  std::vector<float> kr(per_band ? ksz * L : ksz);
  if (per_band) {
    for (int s = 0; s < L; ++s) {
      auto one = repack_taps_first(k.data() + static_cast<size_t>(s) * Cout * Cin * taps,
                                   Cout, Cin, taps);
      std::copy(one.begin(), one.end(), kr.begin() + static_cast<size_t>(s) * ksz);
    }
  } else {
    kr = repack_taps_first(k.data(), Cout, Cin, taps);
  }

  const float* pf = f.data();
  const float* pb = bias.defined() ? bias.data() : nullptr;
  float* py = y.data();
#pragma omp parallel for num_threads(max_threads()) schedule(static) collapse(2)
  for (int s = 0; s < L; ++s) {
    for (int yy = 0; yy < H; ++yy) {
      const float* krs = kr.data() + (per_band ? static_cast<size_t>(s) * ksz : 0);
      std::vector<float> acc(static_cast<size_t>(Cout));
      for (int xx = 0; xx < W; ++xx) {
        if (pb)
          std::memcpy(acc.data(), pb, sizeof(float) * static_cast<size_t>(Cout));
        else
          std::fill(acc.begin(), acc.end(), 0.0f);
        for (int ky = 0; ky < K; ++ky) {
          const int sy = yy + ky - P;
          if (sy < 0 || sy >= H) continue;
          for (int kx = 0; kx < K; ++kx) {
            const int sx = xx + kx - P;
            if (sx < 0 || sx >= W) continue;
            const float* fv = pf + ((static_cast<size_t>(s) * H + sy) * W + sx) * Cin;
            const float* kt = krs + (static_cast<size_t>(ky * K + kx) * Cin) * Cout;
            for (int i = 0; i < Cin; ++i) {
              const float v = fv[i];
              const float* krow = kt + static_cast<size_t>(i) * Cout;
              for (int o = 0; o < Cout; ++o) acc[static_cast<size_t>(o)] += v * krow[o];
            }
          }
        }
        std::memcpy(py + ((static_cast<size_t>(s) * H + yy) * W + xx) * Cout, acc.data(),
                    sizeof(float) * static_cast<size_t>(Cout));
      }
    }
  }

  if (rg) {
    Tape::active().record(
        {y.storage()},
        [fs = f.storage(), ks = k.storage(),
         bs = bias.defined() ? bias.storage() : nullptr, ys = y.storage(), kr,
         per_band, L, H, W, Cin, Cout, K, P, taps, ksz]() {
          const float* g = ys->g.data();
          if (detail::wants_grad(fs)) {
            ensure_grad(*fs);
            float* gf = fs->g.data();
#pragma omp parallel for num_threads(max_threads()) schedule(static) collapse(2)
            for (int s = 0; s < L; ++s) {
              for (int sy = 0; sy < H; ++sy) {
                const float* krs = kr.data() + (per_band ? static_cast<size_t>(s) * ksz : 0);
                for (int sx = 0; sx < W; ++sx) {
                  float* gfi = gf + ((static_cast<size_t>(s) * H + sy) * W + sx) * Cin;
                  for (int ky = 0; ky < K; ++ky) {
                    const int oy = sy - (ky - P);
                    if (oy < 0 || oy >= H) continue;
                    for (int kx = 0; kx < K; ++kx) {
                      const int ox = sx - (kx - P);
                      if (ox < 0 || ox >= W) continue;
                      const float* gr = g + ((static_cast<size_t>(s) * H + oy) * W + ox) * Cout;
                      const float* kt = krs + (static_cast<size_t>(ky * K + kx) * Cin) * Cout;
                      for (int i = 0; i < Cin; ++i) {
                        const float* krow = kt + static_cast<size_t>(i) * Cout;
                        float acc = 0.0f;
                        for (int o = 0; o < Cout; ++o) acc += gr[o] * krow[o];
                        gfi[i] += acc;
                      }
                    }
                  }
                }
              }
            }
          }
          if (detail::wants_grad(ks)) {
            ensure_grad(*ks);
            const float* pf = fs->v.data();
            const int bands_out = per_band ? L : 1;
            const size_t gbuf = static_cast<size_t>(bands_out) * taps * Cin * Cout;
            std::vector<float> partial(static_cast<size_t>(kConvGradChunks) * gbuf, 0.0f);
            const int total_rows = L * H;
            const int chunk = (total_rows + kConvGradChunks - 1) / kConvGradChunks;
#pragma omp parallel for num_threads(max_threads()) schedule(static)
            for (int c = 0; c < kConvGradChunks; ++c) {
              float* part = partial.data() + static_cast<size_t>(c) * gbuf;
              const int rb = c * chunk, re = std::min(total_rows, rb + chunk);
              for (int row = rb; row < re; ++row) {
                const int s = row / H, yy = row % H;
                float* base = part + (per_band ? static_cast<size_t>(s) * taps * Cin * Cout : 0);
                for (int xx = 0; xx < W; ++xx) {
                  const float* gr = g + ((static_cast<size_t>(s) * H + yy) * W + xx) * Cout;
                  for (int ky = 0; ky < K; ++ky) {
                    const int sy = yy + ky - P;
                    if (sy < 0 || sy >= H) continue;
                    for (int kx = 0; kx < K; ++kx) {
                      const int sx = xx + kx - P;
                      if (sx < 0 || sx >= W) continue;
                      const float* fv = pf + ((static_cast<size_t>(s) * H + sy) * W + sx) * Cin;
                      float* kt = base + (static_cast<size_t>(ky * K + kx) * Cin) * Cout;
                      for (int i = 0; i < Cin; ++i) {
                        const float v = fv[i];
                        float* krow = kt + static_cast<size_t>(i) * Cout;
                        for (int o = 0; o < Cout; ++o) krow[o] += v * gr[o];
                      }
                    }
                  }
                }
              }
            }
            // merge chunks in order, then transpose back to [cout][cin][tap]
            for (int c = 1; c < kConvGradChunks; ++c) {
              float* dst = partial.data();
              const float* src = partial.data() + static_cast<size_t>(c) * gbuf;
              for (size_t i = 0; i < gbuf; ++i) dst[i] += src[i];
            }
            float* gk = ks->g.data();
            for (int bnd = 0; bnd < bands_out; ++bnd) {
              const float* part = partial.data() + static_cast<size_t>(bnd) * taps * Cin * Cout;
              float* gkb = gk + static_cast<size_t>(bnd) * Cout * Cin * taps;
              for (int t = 0; t < taps; ++t)
                for (int i = 0; i < Cin; ++i)
                  for (int o = 0; o < Cout; ++o)
                    gkb[(static_cast<size_t>(o) * Cin + i) * taps + t] +=
                        part[(static_cast<size_t>(t) * Cin + i) * Cout + o];
            }
          }
          if (bs && detail::wants_grad(bs)) {
            ensure_grad(*bs);
            float* gb = bs->g.data();
            const size_t vox = static_cast<size_t>(L) * H * W;
            for (size_t vx = 0; vx < vox; ++vx) {
              const float* gr = g + vx * Cout;
              for (int o = 0; o < Cout; ++o) gb[o] += gr[o];
            }
          }
        });
  }
  return y;
}

Tensor conv3d(const Tensor& f, const Tensor& k, const Tensor& bias) {
  if (f.ndim() != 4) throw ShapeError("conv3d: expected [L,H,W,C] input");
  if (k.ndim() != 5) throw ShapeError("conv3d: kernel must be [Cout,Cin,K,K,K]");
  const int L = f.dim(0), H = f.dim(1), W = f.dim(2), Cin = f.dim(3);
  const int Cout = k.dim(0), KCi = k.dim(1), Kl = k.dim(2), Kh = k.dim(3), Kw = k.dim(4);
  if (KCi != Cin)
    throw ShapeError("conv3d: kernel input channels " + std::to_string(KCi) +
                     " != feature channels " + std::to_string(Cin));
  if (Kl != Kh || Kh != Kw || Kl % 2 == 0) throw ShapeError("conv3d: kernel must be odd cube");
  if (bias.defined() && (bias.ndim() != 1 || bias.dim(0) != Cout))
    throw ShapeError("conv3d: bias shape mismatch");
  const int K = Kl, P = K / 2, taps = K * K * K;

  const bool rg = track({&f, &k, &bias});
  Tensor y = make_output({L, H, W, Cout}, rg);
  std::vector<float> kr = repack_taps_first(k.data(), Cout, Cin, taps);

  const float* pf = f.data();
  const float* pb = bias.defined() ? bias.data() : nullptr;
  float* py = y.data();
#pragma omp parallel for num_threads(max_threads()) schedule(static) collapse(2)
  for (int s = 0; s < L; ++s) {
    for (int yy = 0; yy < H; ++yy) {
      std::vector<float> acc(static_cast<size_t>(Cout));
      for (int xx = 0; xx < W; ++xx) {
        if (pb)
          std::memcpy(acc.data(), pb, sizeof(float) * static_cast<size_t>(Cout));
        else
          std::fill(acc.begin(), acc.end(), 0.0f);
        for (int ks_ = 0; ks_ < K; ++ks_) {
          const int ss = s + ks_ - P;
          if (ss < 0 || ss >= L) continue;
          for (int ky = 0; ky < K; ++ky) {
            const int sy = yy + ky - P;
            if (sy < 0 || sy >= H) continue;
            for (int kx = 0; kx < K; ++kx) {
              const int sx = xx + kx - P;
              if (sx < 0 || sx >= W) continue;
              const float* fv = pf + ((static_cast<size_t>(ss) * H + sy) * W + sx) * Cin;
              const float* kt = kr.data() +
                                (static_cast<size_t>((ks_ * K + ky) * K + kx) * Cin) * Cout;
              for (int i = 0; i < Cin; ++i) {
                const float v = fv[i];
                const float* krow = kt + static_cast<size_t>(i) * Cout;
                for (int o = 0; o < Cout; ++o) acc[static_cast<size_t>(o)] += v * krow[o];
              }
            }
          }
        }
        std::memcpy(py + ((static_cast<size_t>(s) * H + yy) * W + xx) * Cout, acc.data(),
                    sizeof(float) * static_cast<size_t>(Cout));
      }
    }
  }

  if (rg) {
    Tape::active().record(
        {y.storage()},
        [fs = f.storage(), ks = k.storage(),
         bs = bias.defined() ? bias.storage() : nullptr, ys = y.storage(), kr, L,
         H, W, Cin, Cout, K, P, taps]() {
          const float* g = ys->g.data();
          if (detail::wants_grad(fs)) {
            ensure_grad(*fs);
            float* gf = fs->g.data();
#pragma omp parallel for num_threads(max_threads()) schedule(static) collapse(2)
            for (int ss = 0; ss < L; ++ss) {
              for (int sy = 0; sy < H; ++sy) {
                for (int sx = 0; sx < W; ++sx) {
                  float* gfi = gf + ((static_cast<size_t>(ss) * H + sy) * W + sx) * Cin;
                  for (int ks_ = 0; ks_ < K; ++ks_) {
                    const int os = ss - (ks_ - P);
                    if (os < 0 || os >= L) continue;
                    for (int ky = 0; ky < K; ++ky) {
                      const int oy = sy - (ky - P);
                      if (oy < 0 || oy >= H) continue;
                      for (int kx = 0; kx < K; ++kx) {
                        const int ox = sx - (kx - P);
                        if (ox < 0 || ox >= W) continue;
                        const float* gr =
                            g + ((static_cast<size_t>(os) * H + oy) * W + ox) * Cout;
                        const float* kt =
                            kr.data() +
                            (static_cast<size_t>((ks_ * K + ky) * K + kx) * Cin) * Cout;
                        for (int i = 0; i < Cin; ++i) {
                          const float* krow = kt + static_cast<size_t>(i) * Cout;
                          float acc = 0.0f;
                          for (int o = 0; o < Cout; ++o) acc += gr[o] * krow[o];
                          gfi[i] += acc;
                        }
                      }
                    }
                  }
                }
              }
            }
          }
          if (detail::wants_grad(ks)) {
            ensure_grad(*ks);
            const float* pf = fs->v.data();
            const size_t gbuf = static_cast<size_t>(taps) * Cin * Cout;
            std::vector<float> partial(static_cast<size_t>(kConvGradChunks) * gbuf, 0.0f);
            const int total_rows = L * H;
            const int chunk = (total_rows + kConvGradChunks - 1) / kConvGradChunks;
#pragma omp parallel for num_threads(max_threads()) schedule(static)
            for (int c = 0; c < kConvGradChunks; ++c) {
              float* part = partial.data() + static_cast<size_t>(c) * gbuf;
              const int rb = c * chunk, re = std::min(total_rows, rb + chunk);
              for (int row = rb; row < re; ++row) {
                const int s = row / H, yy = row % H;
                for (int xx = 0; xx < W; ++xx) {
                  const float* gr = g + ((static_cast<size_t>(s) * H + yy) * W + xx) * Cout;
                  for (int ks_ = 0; ks_ < K; ++ks_) {
                    const int ss = s + ks_ - P;
                    if (ss < 0 || ss >= L) continue;
                    for (int ky = 0; ky < K; ++ky) {
                      const int sy = yy + ky - P;
                      if (sy < 0 || sy >= H) continue;
                      for (int kx = 0; kx < K; ++kx) {
                        const int sx = xx + kx - P;
                        if (sx < 0 || sx >= W) continue;
                        const float* fv =
                            pf + ((static_cast<size_t>(ss) * H + sy) * W + sx) * Cin;
                        float* kt = part +
                                    (static_cast<size_t>((ks_ * K + ky) * K + kx) * Cin) * Cout;
                        for (int i = 0; i < Cin; ++i) {
                          const float v = fv[i];
                          float* krow = kt + static_cast<size_t>(i) * Cout;
                          for (int o = 0; o < Cout; ++o) krow[o] += v * gr[o];
                        }
                      }
                    }
                  }
                }
              }
            }
            for (int c = 1; c < kConvGradChunks; ++c) {
              float* dst = partial.data();
              const float* src = partial.data() + static_cast<size_t>(c) * gbuf;
              for (size_t i = 0; i < gbuf; ++i) dst[i] += src[i];
            }
            float* gk = ks->g.data();
            for (int t = 0; t < taps; ++t)
              for (int i = 0; i < Cin; ++i)
                for (int o = 0; o < Cout; ++o)
                  gk[(static_cast<size_t>(o) * Cin + i) * taps + t] +=
                      partial[(static_cast<size_t>(t) * Cin + i) * Cout + o];
          }
          if (bs && detail::wants_grad(bs)) {
            ensure_grad(*bs);
            float* gb = bs->g.data();
            const size_t vox = static_cast<size_t>(L) * H * W;
            for (size_t vx = 0; vx < vox; ++vx) {
              const float* gr = g + vx * Cout;
              for (int o = 0; o < Cout; ++o) gb[o] += gr[o];
            }
          }
        });
  }
  return y;
}

Tensor maxpool3(const Tensor& f) {
  if (f.ndim() != 4) throw ShapeError("maxpool3: expected [L,H,W,C]");
  const int L = f.dim(0), H = f.dim(1), W = f.dim(2), C = f.dim(3);
  const int Lo = (L + 1) / 2, Ho = (H + 1) / 2, Wo = (W + 1) / 2;
  const bool rg = track({&f});
  Tensor y = make_output({Lo, Ho, Wo, C}, rg);
  // ceil mode: odd extents replicate the edge, i.e. the second window index
  // clamps. Argmax ties go to the lowest linear input index.
  auto argmax = std::make_shared<std::vector<int>>(y.size());
  const float* pf = f.data();
  float* py = y.data();
  int* pa = argmax->data();
#pragma omp parallel for num_threads(max_threads()) schedule(static) collapse(2)
  for (int so = 0; so < Lo; ++so) {
    for (int yo = 0; yo < Ho; ++yo) {
      for (int xo = 0; xo < Wo; ++xo) {
        for (int c = 0; c < C; ++c) {
          float best = -std::numeric_limits<float>::infinity();
          int best_idx = -1;
          for (int ds = 0; ds < 2; ++ds) {
            const int s = std::min(2 * so + ds, L - 1);
            for (int dy = 0; dy < 2; ++dy) {
              const int yy = std::min(2 * yo + dy, H - 1);
              for (int dx = 0; dx < 2; ++dx) {
                const int xx = std::min(2 * xo + dx, W - 1);
                const size_t idx = ((static_cast<size_t>(s) * H + yy) * W + xx) * C + c;
                if (pf[idx] > best) {
                  best = pf[idx];
                  best_idx = static_cast<int>(idx);
                }
              }
            }
          }
          const size_t oidx = ((static_cast<size_t>(so) * Ho + yo) * Wo + xo) * C + c;
          py[oidx] = best;
          pa[oidx] = best_idx;
        }
      }
    }
  }
  if (rg) {
    Tape::active().record({y.storage()}, [fs = f.storage(), ys = y.storage(), argmax]() {
      if (!detail::wants_grad(fs)) return;
      ensure_grad(*fs);
      const float* g = ys->g.data();
      const int* pa = argmax->data();
      for (size_t i = 0; i < ys->g.size(); ++i) fs->g[static_cast<size_t>(pa[i])] += g[i];
    });
  }
  return y;
}

Tensor upsample3(const Tensor& f) {
  if (f.ndim() != 4) throw ShapeError("upsample3: expected [L,H,W,C]");
  const int L = f.dim(0), H = f.dim(1), W = f.dim(2), C = f.dim(3);
  const int Lo = 2 * L, Ho = 2 * H, Wo = 2 * W;
  const bool rg = track({&f});
  Tensor y = make_output({Lo, Ho, Wo, C}, rg);
  const float* pf = f.data();
  float* py = y.data();
#pragma omp parallel for num_threads(max_threads()) schedule(static) collapse(2)
  for (int so = 0; so < Lo; ++so) {
    for (int yo = 0; yo < Ho; ++yo) {
      for (int xo = 0; xo < Wo; ++xo) {
        const float* src = pf + ((static_cast<size_t>(so / 2) * H + yo / 2) * W + xo / 2) * C;
        float* dst = py + ((static_cast<size_t>(so) * Ho + yo) * Wo + xo) * C;
        std::memcpy(dst, src, sizeof(float) * static_cast<size_t>(C));
      }
    }
  }
  if (rg) {
    Tape::active().record({y.storage()}, [fs = f.storage(), ys = y.storage(), L, H, W,
                                          Ho, Wo, C]() {
      if (!detail::wants_grad(fs)) return;
      ensure_grad(*fs);
      const float* g = ys->g.data();
#pragma omp parallel for num_threads(max_threads()) schedule(static) collapse(2)
      for (int s = 0; s < L; ++s) {
        for (int yy = 0; yy < H; ++yy) {
          for (int xx = 0; xx < W; ++xx) {
            float* dst = fs->g.data() + ((static_cast<size_t>(s) * H + yy) * W + xx) * C;
            for (int ds = 0; ds < 2; ++ds)
              for (int dy = 0; dy < 2; ++dy)
                for (int dx = 0; dx < 2; ++dx) {
                  const float* gr =
                      g + ((static_cast<size_t>(2 * s + ds) * Ho + 2 * yy + dy) * Wo +
                           2 * xx + dx) *
                              C;
                  for (int c = 0; c < C; ++c) dst[c] += gr[c];
                }
          }
        }
      }
    });
  }
  return y;
}

}  // namespace spectr
