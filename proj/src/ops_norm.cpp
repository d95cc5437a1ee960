#include <cmath>
#include <memory>
#include <string>
#include <vector>

#include "ops_common.hpp"
#include "spectr/ops.hpp"

namespace spectr {

using detail::ensure_grad;
using detail::make_output;
using detail::track;

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, float eps) {
  const int D = x.dim(x.ndim() - 1);
  if (gamma.ndim() != 1 || gamma.dim(0) != D || beta.ndim() != 1 || beta.dim(0) != D)
    throw ShapeError("layer_norm: affine parameters must be [D]");
  const size_t rows = x.size() / static_cast<size_t>(D);
  const bool rg = track({&x, &gamma, &beta});
  Tensor y = make_output(x.shape(), rg);

  auto mu = std::make_shared<std::vector<float>>(rows);
  auto istd = std::make_shared<std::vector<float>>(rows);
  const float* px = x.data();
  const float* pg = gamma.data();
  const float* pb = beta.data();
  float* py = y.data();
#pragma omp parallel for num_threads(max_threads()) schedule(static) if (rows * D > 16384)
  for (long long r = 0; r < static_cast<long long>(rows); ++r) {
    const float* xr = px + static_cast<size_t>(r) * D;
    double s = 0.0;
    for (int i = 0; i < D; ++i) s += xr[i];
    const double m = s / D;
    double v = 0.0;
    for (int i = 0; i < D; ++i) {
      double d = xr[i] - m;
      v += d * d;
    }
    v /= D;
    const double is = 1.0 / std::sqrt(v + eps);
    (*mu)[static_cast<size_t>(r)] = static_cast<float>(m);
    (*istd)[static_cast<size_t>(r)] = static_cast<float>(is);
    float* yr = py + static_cast<size_t>(r) * D;
    for (int i = 0; i < D; ++i)
      yr[i] = pg[i] * static_cast<float>((xr[i] - m) * is) + pb[i];
  }

  if (rg) {
    Tape::active().record(
        {y.storage()},
        [xs = x.storage(), gs = gamma.storage(), bs = beta.storage(),
         ys = y.storage(), mu, istd, rows, D]() {
          const float* g = ys->g.data();
          const float* px = xs->v.data();
          const float* pg = gs->v.data();
          if (detail::wants_grad(xs)) {
            ensure_grad(*xs);
            float* gx = xs->g.data();
#pragma omp parallel for num_threads(max_threads()) schedule(static) if (rows * D > 16384)
            for (long long r = 0; r < static_cast<long long>(rows); ++r) {
              const float m = (*mu)[static_cast<size_t>(r)];
              const float is = (*istd)[static_cast<size_t>(r)];
              const float* xr = px + static_cast<size_t>(r) * D;
              const float* gr = g + static_cast<size_t>(r) * D;
              double sum_gg = 0.0, sum_ggx = 0.0;
              for (int i = 0; i < D; ++i) {
                const double gg = static_cast<double>(gr[i]) * pg[i];
                const double xh = (xr[i] - m) * is;
                sum_gg += gg;
                sum_ggx += gg * xh;
              }
              const double mg = sum_gg / D, mgx = sum_ggx / D;
              float* gxr = gx + static_cast<size_t>(r) * D;
              for (int i = 0; i < D; ++i) {
                const double gg = static_cast<double>(gr[i]) * pg[i];
                const double xh = (xr[i] - m) * is;
                gxr[i] += static_cast<float>(is * (gg - mg - xh * mgx));
              }
            }
          }
          if (detail::wants_grad(gs)) {
            ensure_grad(*gs);
            for (size_t r = 0; r < rows; ++r) {
              const float m = (*mu)[r], is = (*istd)[r];
              const float* xr = px + r * D;
              const float* gr = g + r * D;
              for (int i = 0; i < D; ++i) gs->g[i] += gr[i] * (xr[i] - m) * is;
            }
          }
          if (detail::wants_grad(bs)) {
            ensure_grad(*bs);
            for (size_t r = 0; r < rows; ++r) {
              const float* gr = g + r * D;
              for (int i = 0; i < D; ++i) bs->g[i] += gr[i];
            }
          }
        });
  }
  return y;
}

Tensor spectral_group_norm(const Tensor& x, int bands, const Tensor& gamma,
                           const Tensor& beta, int groups, float eps) {
  const int C = x.dim(x.ndim() - 1);
  if (C % groups != 0)
    throw ConfigError("spectral_group_norm: channels " + std::to_string(C) +
                      " not divisible by groups " + std::to_string(groups));
  if (x.size() % (static_cast<size_t>(bands) * C) != 0)
    throw ShapeError("spectral_group_norm: size not divisible by bands*C");
  if (gamma.ndim() != 2 || gamma.dim(0) != bands || gamma.dim(1) != C ||
      beta.shape() != gamma.shape())
    throw ShapeError("spectral_group_norm: affine parameters must be [bands, C]");
  const size_t spatial = x.size() / (static_cast<size_t>(bands) * C);
  const int gc = C / groups;  // channels per group
  const bool rg = track({&x, &gamma, &beta});
  Tensor y = make_output(x.shape(), rg);

  const size_t nstats = static_cast<size_t>(bands) * groups;
  auto mu = std::make_shared<std::vector<float>>(nstats);
  auto istd = std::make_shared<std::vector<float>>(nstats);
  const float* px = x.data();
  const float* pg = gamma.data();
  const float* pb = beta.data();
  float* py = y.data();
  // statistics per (band, group) over spatial x (C/groups) elements of that
  // band only; bands never mix
#pragma omp parallel for num_threads(max_threads()) schedule(static) collapse(2)
  for (int s = 0; s < bands; ++s) {
    for (int grp = 0; grp < groups; ++grp) {
      const size_t band_off = static_cast<size_t>(s) * spatial * C;
      const int c0 = grp * gc;
      double sum = 0.0, sq = 0.0;
      for (size_t n = 0; n < spatial; ++n) {
        const float* xr = px + band_off + n * C + c0;
        for (int c = 0; c < gc; ++c) {
          const double v = xr[c];
          sum += v;
          sq += v * v;
        }
      }
      const double cnt = static_cast<double>(spatial) * gc;
      const double m = sum / cnt;
      const double var = std::max(0.0, sq / cnt - m * m);
      const double is = 1.0 / std::sqrt(var + eps);
      (*mu)[static_cast<size_t>(s) * groups + grp] = static_cast<float>(m);
      (*istd)[static_cast<size_t>(s) * groups + grp] = static_cast<float>(is);
      for (size_t n = 0; n < spatial; ++n) {
        const float* xr = px + band_off + n * C + c0;
        float* yr = py + band_off + n * C + c0;
        for (int c = 0; c < gc; ++c) {
          const float xh = static_cast<float>((xr[c] - m) * is);
          yr[c] = pg[static_cast<size_t>(s) * C + c0 + c] * xh +
                  pb[static_cast<size_t>(s) * C + c0 + c];
        }
      }
    }
  }

  if (rg) {
    Tape::active().record(
        {y.storage()},
        [xs = x.storage(), gs = gamma.storage(), bs = beta.storage(),
         ys = y.storage(), mu, istd, bands, groups, gc, spatial, C]() {
          const float* g = ys->g.data();
          const float* px = xs->v.data();
          const float* pg = gs->v.data();
          if (detail::wants_grad(xs)) {
            ensure_grad(*xs);
            float* gx = xs->g.data();
#pragma omp parallel for num_threads(max_threads()) schedule(static) collapse(2)
            for (int s = 0; s < bands; ++s) {
              for (int grp = 0; grp < groups; ++grp) {
                const size_t band_off = static_cast<size_t>(s) * spatial * C;
                const int c0 = grp * gc;
                const float m = (*mu)[static_cast<size_t>(s) * groups + grp];
                const float is = (*istd)[static_cast<size_t>(s) * groups + grp];
                const double cnt = static_cast<double>(spatial) * gc;
                double sum_gg = 0.0, sum_ggx = 0.0;
                for (size_t n = 0; n < spatial; ++n) {
                  const float* xr = px + band_off + n * C + c0;
                  const float* gr = g + band_off + n * C + c0;
                  for (int c = 0; c < gc; ++c) {
                    const double gg =
                        static_cast<double>(gr[c]) * pg[static_cast<size_t>(s) * C + c0 + c];
                    sum_gg += gg;
                    sum_ggx += gg * (xr[c] - m) * is;
                  }
                }
                const double mg = sum_gg / cnt, mgx = sum_ggx / cnt;
                for (size_t n = 0; n < spatial; ++n) {
                  const float* xr = px + band_off + n * C + c0;
                  const float* gr = g + band_off + n * C + c0;
                  float* gxr = gx + band_off + n * C + c0;
                  for (int c = 0; c < gc; ++c) {
                    const double gg =
                        static_cast<double>(gr[c]) * pg[static_cast<size_t>(s) * C + c0 + c];
                    const double xh = (xr[c] - m) * is;
                    gxr[c] += static_cast<float>(is * (gg - mg - xh * mgx));
                  }
                }
              }
            }
          }
          if (detail::wants_grad(gs) || detail::wants_grad(bs)) {
            if (detail::wants_grad(gs)) ensure_grad(*gs);
            if (detail::wants_grad(bs)) ensure_grad(*bs);
#pragma omp parallel for num_threads(max_threads()) schedule(static)
            for (int s = 0; s < bands; ++s) {
              const size_t band_off = static_cast<size_t>(s) * spatial * C;
              for (int c = 0; c < C; ++c) {
                const int grp = c / gc;
                const float m = (*mu)[static_cast<size_t>(s) * groups + grp];
                const float is = (*istd)[static_cast<size_t>(s) * groups + grp];
                double sg = 0.0, sb = 0.0;
                for (size_t n = 0; n < spatial; ++n) {
                  const float gv = g[band_off + n * C + c];
                  sg += static_cast<double>(gv) * (px[band_off + n * C + c] - m) * is;
                  sb += gv;
                }
                if (detail::wants_grad(gs))
                  gs->g[static_cast<size_t>(s) * C + c] += static_cast<float>(sg);
                if (detail::wants_grad(bs))
                  bs->g[static_cast<size_t>(s) * C + c] += static_cast<float>(sb);
              }
            }
          }
        });
  }
  return y;
}

}  // namespace spectr
