#include <algorithm>
#include <cmath>
#include <cstring>
#include <string>

#include "ops_common.hpp"
#include "spectr/ops.hpp"

namespace spectr {

using detail::ensure_grad;
using detail::make_output;
using detail::track;

namespace detail {

double reduce_sum(const float* x, size_t n) {
  if (deterministic() || n < 4096) {
    if (n < 4096 || max_threads() == 1) {
      double s = 0.0;
      for (size_t i = 0; i < n; ++i) s += x[i];
      return s;
    }
    double part[kReduceChunks] = {};
    const size_t chunk = (n + kReduceChunks - 1) / kReduceChunks;
#pragma omp parallel for num_threads(max_threads()) schedule(static)
    for (int c = 0; c < kReduceChunks; ++c) {
      size_t b = static_cast<size_t>(c) * chunk;
      size_t e = std::min(n, b + chunk);
      double s = 0.0;
      for (size_t i = b; i < e; ++i) s += x[i];
      part[c] = s;
    }
    double s = 0.0;
    for (double p : part) s += p;
    return s;
  }
  double s = 0.0;
#pragma omp parallel for num_threads(max_threads()) reduction(+ : s) schedule(static)
  for (long long i = 0; i < static_cast<long long>(n); ++i) s += x[i];
  return s;
}

}  // namespace detail

namespace {

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": operand shapes differ");
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  const bool rg = track({&a, &b});
  Tensor y = make_output(a.shape(), rg);
  const size_t n = y.size();
  const float* pa = a.data();
  const float* pb = b.data();
  float* py = y.data();
#pragma omp parallel for num_threads(max_threads()) schedule(static) if (n > 16384)
  for (long long i = 0; i < static_cast<long long>(n); ++i) py[i] = pa[i] + pb[i];
  if (rg) {
    Tape::active().record({y.storage()}, [as = a.storage(), bs = b.storage(),
                                          ys = y.storage(), n]() {
      const float* g = ys->g.data();
      if (detail::wants_grad(as)) {
        ensure_grad(*as);
        for (size_t i = 0; i < n; ++i) as->g[i] += g[i];
      }
      if (detail::wants_grad(bs)) {
        ensure_grad(*bs);
        for (size_t i = 0; i < n; ++i) bs->g[i] += g[i];
      }
    });
  }
  return y;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  const bool rg = track({&a, &b});
  Tensor y = make_output(a.shape(), rg);
  const size_t n = y.size();
  const float* pa = a.data();
  const float* pb = b.data();
  float* py = y.data();
  for (size_t i = 0; i < n; ++i) py[i] = pa[i] * pb[i];
  if (rg) {
    Tape::active().record({y.storage()}, [as = a.storage(), bs = b.storage(),
                                          ys = y.storage(), n]() {
      const float* g = ys->g.data();
      if (detail::wants_grad(as)) {
        ensure_grad(*as);
        for (size_t i = 0; i < n; ++i) as->g[i] += g[i] * bs->v[i];
      }
      if (detail::wants_grad(bs)) {
        ensure_grad(*bs);
        for (size_t i = 0; i < n; ++i) bs->g[i] += g[i] * as->v[i];
      }
    });
  }
  return y;
}

Tensor div(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "div");
  const bool rg = track({&a, &b});
  Tensor y = make_output(a.shape(), rg);
  const size_t n = y.size();
  for (size_t i = 0; i < n; ++i) y.data()[i] = a.data()[i] / b.data()[i];
  if (rg) {
    Tape::active().record({y.storage()}, [as = a.storage(), bs = b.storage(),
                                          ys = y.storage(), n]() {
      const float* g = ys->g.data();
      if (detail::wants_grad(as)) {
        ensure_grad(*as);
        for (size_t i = 0; i < n; ++i) as->g[i] += g[i] / bs->v[i];
      }
      if (detail::wants_grad(bs)) {
        ensure_grad(*bs);
        for (size_t i = 0; i < n; ++i)
          bs->g[i] -= g[i] * as->v[i] / (bs->v[i] * bs->v[i]);
      }
    });
  }
  return y;
}

Tensor add_scalar(const Tensor& a, float c) {
  const bool rg = track({&a});
  Tensor y = make_output(a.shape(), rg);
  const size_t n = y.size();
  for (size_t i = 0; i < n; ++i) y.data()[i] = a.data()[i] + c;
  if (rg) {
    Tape::active().record({y.storage()}, [as = a.storage(), ys = y.storage(), n]() {
      if (!detail::wants_grad(as)) return;
      ensure_grad(*as);
      for (size_t i = 0; i < n; ++i) as->g[i] += ys->g[i];
    });
  }
  return y;
}

Tensor mul_scalar(const Tensor& a, float c) {
  const bool rg = track({&a});
  Tensor y = make_output(a.shape(), rg);
  const size_t n = y.size();
  for (size_t i = 0; i < n; ++i) y.data()[i] = a.data()[i] * c;
  if (rg) {
    Tape::active().record({y.storage()}, [as = a.storage(), ys = y.storage(), n, c]() {
      if (!detail::wants_grad(as)) return;
      ensure_grad(*as);
      for (size_t i = 0; i < n; ++i) as->g[i] += ys->g[i] * c;
    });
  }
  return y;
}

Tensor relu(const Tensor& x) {
  const bool rg = track({&x});
  Tensor y = make_output(x.shape(), rg);
  const size_t n = y.size();
  const float* px = x.data();
  float* py = y.data();
#pragma omp parallel for num_threads(max_threads()) schedule(static) if (n > 16384)
  for (long long i = 0; i < static_cast<long long>(n); ++i)
    py[i] = px[i] > 0.0f ? px[i] : 0.0f;
  if (rg) {
    Tape::active().record({y.storage()}, [xs = x.storage(), ys = y.storage(), n]() {
      if (!detail::wants_grad(xs)) return;
      ensure_grad(*xs);
      const float* g = ys->g.data();
      const float* v = xs->v.data();
      float* gx = xs->g.data();
#pragma omp parallel for num_threads(max_threads()) schedule(static) if (n > 16384)
      for (long long i = 0; i < static_cast<long long>(n); ++i)
        if (v[i] > 0.0f) gx[i] += g[i];
    });
  }
  return y;
}

Tensor sigmoid(const Tensor& x) {
  const bool rg = track({&x});
  Tensor y = make_output(x.shape(), rg);
  const size_t n = y.size();
  const float* px = x.data();
  float* py = y.data();
#pragma omp parallel for num_threads(max_threads()) schedule(static) if (n > 16384)
  for (long long i = 0; i < static_cast<long long>(n); ++i)
    py[i] = static_cast<float>(1.0 / (1.0 + std::exp(-static_cast<double>(px[i]))));
  if (rg) {
    Tape::active().record({y.storage()}, [xs = x.storage(), ys = y.storage(), n]() {
      if (!detail::wants_grad(xs)) return;
      ensure_grad(*xs);
      for (size_t i = 0; i < n; ++i) {
        float s = ys->v[i];
        xs->g[i] += ys->g[i] * s * (1.0f - s);
      }
    });
  }
  return y;
}

Tensor log(const Tensor& x) {
  const bool rg = track({&x});
  Tensor y = make_output(x.shape(), rg);
  const size_t n = y.size();
  for (size_t i = 0; i < n; ++i) {
    float v = x.data()[i];
    if (v <= 0.0f) throw DomainError("log: non-positive input");
    y.data()[i] = std::log(v);
  }
  if (rg) {
    Tape::active().record({y.storage()}, [xs = x.storage(), ys = y.storage(), n]() {
      if (!detail::wants_grad(xs)) return;
      ensure_grad(*xs);
      for (size_t i = 0; i < n; ++i) xs->g[i] += ys->g[i] / xs->v[i];
    });
  }
  return y;
}

Tensor clamp(const Tensor& x, float lo, float hi) {
  const bool rg = track({&x});
  Tensor y = make_output(x.shape(), rg);
  const size_t n = y.size();
  for (size_t i = 0; i < n; ++i)
    y.data()[i] = std::min(hi, std::max(lo, x.data()[i]));
  if (rg) {
    Tape::active().record({y.storage()}, [xs = x.storage(), ys = y.storage(), n, lo, hi]() {
      if (!detail::wants_grad(xs)) return;
      ensure_grad(*xs);
      for (size_t i = 0; i < n; ++i) {
        float v = xs->v[i];
        if (v >= lo && v <= hi) xs->g[i] += ys->g[i];
      }
    });
  }
  return y;
}

Tensor add_rows(const Tensor& x, const Tensor& rows) {
  if (rows.ndim() != 2) throw ShapeError("add_rows: rows must be 2-D");
  const int L = rows.dim(0), D = rows.dim(1);
  if (x.ndim() < 2 || x.dim(x.ndim() - 2) != L || x.dim(x.ndim() - 1) != D)
    throw ShapeError("add_rows: trailing dims of x must match rows");
  const bool rg = track({&x, &rows});
  Tensor y = make_output(x.shape(), rg);
  const size_t n = x.size();
  const size_t block = static_cast<size_t>(L) * D;
  const float* px = x.data();
  const float* pr = rows.data();
  float* py = y.data();
  for (size_t i = 0; i < n; ++i) py[i] = px[i] + pr[i % block];
  if (rg) {
    Tape::active().record({y.storage()}, [xs = x.storage(), rs = rows.storage(),
                                          ys = y.storage(), n, block]() {
      const float* g = ys->g.data();
      if (detail::wants_grad(xs)) {
        ensure_grad(*xs);
        for (size_t i = 0; i < n; ++i) xs->g[i] += g[i];
      }
      if (detail::wants_grad(rs)) {
        ensure_grad(*rs);
        for (size_t i = 0; i < n; ++i) rs->g[i % block] += g[i];
      }
    });
  }
  return y;
}

Tensor sum_all(const Tensor& x) {
  const bool rg = track({&x});
  Tensor y = make_output({1}, rg);
  y.data()[0] = static_cast<float>(detail::reduce_sum(x.data(), x.size()));
  if (rg) {
    Tape::active().record({y.storage()}, [xs = x.storage(), ys = y.storage()]() {
      if (!detail::wants_grad(xs)) return;
      ensure_grad(*xs);
      const float g = ys->g[0];
      for (float& v : xs->g) v += g;
    });
  }
  return y;
}

Tensor mean_all(const Tensor& x) {
  const bool rg = track({&x});
  Tensor y = make_output({1}, rg);
  const size_t n = x.size();
  y.data()[0] = static_cast<float>(detail::reduce_sum(x.data(), n) / static_cast<double>(n));
  if (rg) {
    Tape::active().record({y.storage()}, [xs = x.storage(), ys = y.storage(), n]() {
      if (!detail::wants_grad(xs)) return;
      ensure_grad(*xs);
      const float g = ys->g[0] / static_cast<float>(n);
      for (float& v : xs->g) v += g;
    });
  }
  return y;
}

Tensor mean_axis0(const Tensor& x) {
  if (x.ndim() < 2) throw ShapeError("mean_axis0: need at least 2 dims");
  const int B = x.dim(0);
  std::vector<int> out_shape(x.shape().begin() + 1, x.shape().end());
  const bool rg = track({&x});
  Tensor y = make_output(out_shape, rg);
  const size_t m = y.size();
  const float* px = x.data();
  float* py = y.data();
  const double inv = 1.0 / B;
  for (size_t j = 0; j < m; ++j) {
    double s = 0.0;
    for (int b = 0; b < B; ++b) s += px[static_cast<size_t>(b) * m + j];
    py[j] = static_cast<float>(s * inv);
  }
  if (rg) {
    Tape::active().record({y.storage()}, [xs = x.storage(), ys = y.storage(), B, m]() {
      if (!detail::wants_grad(xs)) return;
      ensure_grad(*xs);
      const float inv = 1.0f / static_cast<float>(B);
      for (size_t j = 0; j < m; ++j) {
        const float g = ys->g[j] * inv;
        for (int b = 0; b < B; ++b) xs->g[static_cast<size_t>(b) * m + j] += g;
      }
    });
  }
  return y;
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.ndim() != 2 || b.ndim() != 2) throw ShapeError("matmul: operands must be 2-D");
  const int m = a.dim(0), k = a.dim(1), k2 = b.dim(0), n = b.dim(1);
  if (k != k2)
    throw ShapeError("matmul: inner dimensions disagree (" + std::to_string(k) +
                     " vs " + std::to_string(k2) + ")");
  const bool rg = track({&a, &b});
  Tensor y = make_output({m, n}, rg);
  const float* pa = a.data();
  const float* pb = b.data();
  float* py = y.data();
#pragma omp parallel for num_threads(max_threads()) schedule(static) if (static_cast<long long>(m) * k * n > 32768)
  for (int i = 0; i < m; ++i) {
    float* yr = py + static_cast<size_t>(i) * n;
    for (int l = 0; l < k; ++l) {
      const float av = pa[static_cast<size_t>(i) * k + l];
      const float* br = pb + static_cast<size_t>(l) * n;
      for (int j = 0; j < n; ++j) yr[j] += av * br[j];
    }
  }
  if (rg) {
    Tape::active().record({y.storage()}, [as = a.storage(), bs = b.storage(),
                                          ys = y.storage(), m, k, n]() {
      const float* g = ys->g.data();
      if (detail::wants_grad(as)) {
        ensure_grad(*as);
        float* ga = as->g.data();
        const float* pb = bs->v.data();
#pragma omp parallel for num_threads(max_threads()) schedule(static) if (static_cast<long long>(m) * k * n > 32768)
        for (int i = 0; i < m; ++i) {
          for (int l = 0; l < k; ++l) {
            const float* gr = g + static_cast<size_t>(i) * n;
            const float* br = pb + static_cast<size_t>(l) * n;
            float s = 0.0f;
            for (int j = 0; j < n; ++j) s += gr[j] * br[j];
            ga[static_cast<size_t>(i) * k + l] += s;
          }
        }
      }
      if (detail::wants_grad(bs)) {
        ensure_grad(*bs);
        float* gb = bs->g.data();
        const float* pa = as->v.data();
#pragma omp parallel for num_threads(max_threads()) schedule(static) if (static_cast<long long>(m) * k * n > 32768)
        for (int l = 0; l < k; ++l) {
          float* gbr = gb + static_cast<size_t>(l) * n;
          for (int i = 0; i < m; ++i) {
            const float av = pa[static_cast<size_t>(i) * k + l];
            const float* gr = g + static_cast<size_t>(i) * n;
            for (int j = 0; j < n; ++j) gbr[j] += av * gr[j];
          }
        }
      }
    });
  }
  return y;
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (w.ndim() != 2) throw ShapeError("linear: weight must be 2-D");
  const int din = w.dim(0), dout = w.dim(1);
  if (x.dim(x.ndim() - 1) != din)
    throw ShapeError("linear: input feature dim " + std::to_string(x.dim(x.ndim() - 1)) +
                     " != weight rows " + std::to_string(din));
  if (b.defined() && (b.ndim() != 1 || b.dim(0) != dout))
    throw ShapeError("linear: bias shape mismatch");
  const size_t rows = x.size() / static_cast<size_t>(din);
  std::vector<int> out_shape(x.shape());
  out_shape.back() = dout;
  const bool rg = track({&x, &w, &b});
  Tensor y = make_output(out_shape, rg);
  const float* px = x.data();
  const float* pw = w.data();
  const float* pbias = b.defined() ? b.data() : nullptr;
  float* py = y.data();
#pragma omp parallel for num_threads(max_threads()) schedule(static) if (rows * din * dout > 32768)
  for (long long r = 0; r < static_cast<long long>(rows); ++r) {
    float* yr = py + static_cast<size_t>(r) * dout;
    if (pbias)
      std::memcpy(yr, pbias, sizeof(float) * static_cast<size_t>(dout));
    const float* xr = px + static_cast<size_t>(r) * din;
    for (int i = 0; i < din; ++i) {
      const float xv = xr[i];
      const float* wr = pw + static_cast<size_t>(i) * dout;
      for (int o = 0; o < dout; ++o) yr[o] += xv * wr[o];
    }
  }
  if (rg) {
    Tape::active().record(
        {y.storage()},
        [xs = x.storage(), ws = w.storage(),
         bs = b.defined() ? b.storage() : nullptr, ys = y.storage(), rows, din,
         dout]() {
          const float* g = ys->g.data();
          if (detail::wants_grad(xs)) {
            ensure_grad(*xs);
            float* gx = xs->g.data();
            const float* pw = ws->v.data();
#pragma omp parallel for num_threads(max_threads()) schedule(static) if (rows * din * dout > 32768)
            for (long long r = 0; r < static_cast<long long>(rows); ++r) {
              const float* gr = g + static_cast<size_t>(r) * dout;
              float* gxr = gx + static_cast<size_t>(r) * din;
              for (int i = 0; i < din; ++i) {
                const float* wr = pw + static_cast<size_t>(i) * dout;
                float s = 0.0f;
                for (int o = 0; o < dout; ++o) s += gr[o] * wr[o];
                gxr[i] += s;
              }
            }
          }
          if (detail::wants_grad(ws)) {
            ensure_grad(*ws);
            float* gw = ws->g.data();
            const float* px = xs->v.data();
#pragma omp parallel for num_threads(max_threads()) schedule(static) if (rows * din * dout > 32768)
            for (int i = 0; i < din; ++i) {
              float* gwr = gw + static_cast<size_t>(i) * dout;
              for (size_t r = 0; r < rows; ++r) {
                const float xv = px[r * din + i];
                const float* gr = g + r * dout;
                for (int o = 0; o < dout; ++o) gwr[o] += xv * gr[o];
              }
            }
          }
          if (bs && detail::wants_grad(bs)) {
            ensure_grad(*bs);
            float* gb = bs->g.data();
            for (size_t r = 0; r < rows; ++r) {
              const float* gr = g + r * dout;
              for (int o = 0; o < dout; ++o) gb[o] += gr[o];
            }
          }
        });
  }
  return y;
}

Tensor concat_channels(const Tensor& a, const Tensor& b) {
  if (a.ndim() != b.ndim()) throw ShapeError("concat_channels: rank mismatch");
  for (int i = 0; i + 1 < a.ndim(); ++i)
    if (a.dim(i) != b.dim(i)) throw ShapeError("concat_channels: leading dims differ");
  const int ca = a.dim(a.ndim() - 1), cb = b.dim(b.ndim() - 1);
  std::vector<int> out_shape = a.shape();
  out_shape.back() = ca + cb;
  const bool rg = track({&a, &b});
  Tensor y = make_output(out_shape, rg);
  const size_t rows = a.size() / static_cast<size_t>(ca);
  const float* pa = a.data();
  const float* pb = b.data();
  float* py = y.data();
  for (size_t r = 0; r < rows; ++r) {
    std::memcpy(py + r * (ca + cb), pa + r * ca, sizeof(float) * static_cast<size_t>(ca));
    std::memcpy(py + r * (ca + cb) + ca, pb + r * cb, sizeof(float) * static_cast<size_t>(cb));
  }
  if (rg) {
    Tape::active().record({y.storage()}, [as = a.storage(), bs = b.storage(),
                                          ys = y.storage(), rows, ca, cb]() {
      const float* g = ys->g.data();
      if (detail::wants_grad(as)) {
        ensure_grad(*as);
        for (size_t r = 0; r < rows; ++r)
          for (int c = 0; c < ca; ++c) as->g[r * ca + c] += g[r * (ca + cb) + c];
      }
      if (detail::wants_grad(bs)) {
        ensure_grad(*bs);
        for (size_t r = 0; r < rows; ++r)
          for (int c = 0; c < cb; ++c) bs->g[r * cb + c] += g[r * (ca + cb) + ca + c];
      }
    });
  }
  return y;
}

Tensor gather_sequences(const Tensor& f) {
  if (f.ndim() != 4) throw ShapeError("gather_sequences: expected [L,H,W,C]");
  const int L = f.dim(0), H = f.dim(1), W = f.dim(2), C = f.dim(3);
  const int N = H * W;
  const bool rg = track({&f});
  Tensor y = make_output({N, L, C}, rg);
  const float* pf = f.data();
  float* py = y.data();
#pragma omp parallel for num_threads(max_threads()) schedule(static) if (f.size() > 16384)
  for (int n = 0; n < N; ++n) {
    for (int s = 0; s < L; ++s) {
      const float* src = pf + (static_cast<size_t>(s) * N + n) * C;
      float* dst = py + (static_cast<size_t>(n) * L + s) * C;
      std::memcpy(dst, src, sizeof(float) * static_cast<size_t>(C));
    }
  }
  if (rg) {
    Tape::active().record({y.storage()}, [fs = f.storage(), ys = y.storage(), N, L, C]() {
      if (!detail::wants_grad(fs)) return;
      ensure_grad(*fs);
      for (int n = 0; n < N; ++n)
        for (int s = 0; s < L; ++s) {
          const float* g = ys->g.data() + (static_cast<size_t>(n) * L + s) * C;
          float* dst = fs->g.data() + (static_cast<size_t>(s) * N + n) * C;
          for (int c = 0; c < C; ++c) dst[c] += g[c];
        }
    });
  }
  return y;
}

Tensor scatter_sequences(const Tensor& seq, int H, int W) {
  if (seq.ndim() != 3) throw ShapeError("scatter_sequences: expected [N,L,C]");
  const int N = seq.dim(0), L = seq.dim(1), C = seq.dim(2);
  if (N != H * W) throw ShapeError("scatter_sequences: N != H*W");
  const bool rg = track({&seq});
  Tensor y = make_output({L, H, W, C}, rg);
  const float* ps = seq.data();
  float* py = y.data();
#pragma omp parallel for num_threads(max_threads()) schedule(static) if (seq.size() > 16384)
  for (int s = 0; s < L; ++s) {
    for (int n = 0; n < N; ++n) {
      const float* src = ps + (static_cast<size_t>(n) * L + s) * C;
      float* dst = py + (static_cast<size_t>(s) * N + n) * C;
      std::memcpy(dst, src, sizeof(float) * static_cast<size_t>(C));
    }
  }
  if (rg) {
    Tape::active().record({y.storage()}, [ss = seq.storage(), ys = y.storage(), N, L, C]() {
      if (!detail::wants_grad(ss)) return;
      ensure_grad(*ss);
      for (int n = 0; n < N; ++n)
        for (int s = 0; s < L; ++s) {
          const float* g = ys->g.data() + (static_cast<size_t>(s) * N + n) * C;
          float* dst = ss->g.data() + (static_cast<size_t>(n) * L + s) * C;
          for (int c = 0; c < C; ++c) dst[c] += g[c];
        }
    });
  }
  return y;
}

Tensor crop3(const Tensor& f, int L, int H, int W) {
  if (f.ndim() != 4) throw ShapeError("crop3: expected [L,H,W,C]");
  const int L0 = f.dim(0), H0 = f.dim(1), W0 = f.dim(2), C = f.dim(3);
  if (L > L0 || H > H0 || W > W0) throw ShapeError("crop3: target exceeds input");
  if (L == L0 && H == H0 && W == W0) return f;
  const bool rg = track({&f});
  Tensor y = make_output({L, H, W, C}, rg);
  const float* pf = f.data();
  float* py = y.data();
  for (int s = 0; s < L; ++s)
    for (int yy = 0; yy < H; ++yy) {
      const float* src = pf + ((static_cast<size_t>(s) * H0 + yy) * W0) * C;
      float* dst = py + ((static_cast<size_t>(s) * H + yy) * W) * C;
      std::memcpy(dst, src, sizeof(float) * static_cast<size_t>(W) * C);
    }
  if (rg) {
    Tape::active().record({y.storage()}, [fs = f.storage(), ys = y.storage(), L, H,
                                          W, H0, W0, C]() {
      if (!detail::wants_grad(fs)) return;
      ensure_grad(*fs);
      for (int s = 0; s < L; ++s)
        for (int yy = 0; yy < H; ++yy) {
          const float* g = ys->g.data() + ((static_cast<size_t>(s) * H + yy) * W) * C;
          float* dst = fs->g.data() + ((static_cast<size_t>(s) * H0 + yy) * W0) * C;
          for (int i = 0; i < W * C; ++i) dst[i] += g[i];
        }
    });
  }
  return y;
}

}  // namespace spectr
