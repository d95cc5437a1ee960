#include <cmath>
#include <cstring>
#include <memory>
#include <string>
#include <vector>

#include "ops_common.hpp"
#include "spectr/entmax.hpp"
#include "spectr/ops.hpp"

namespace spectr {

using detail::ensure_grad;
using detail::make_output;
using detail::track;

Tensor alpha_from_raw(const Tensor& raw) {
  const bool rg = track({&raw});
  Tensor y = make_output(raw.shape(), rg);
  const size_t n = raw.size();
  for (size_t i = 0; i < n; ++i) {
    const double s = 1.0 / (1.0 + std::exp(-static_cast<double>(raw.data()[i])));
    y.data()[i] = static_cast<float>(1.0 + s);
  }
  if (rg) {
    Tape::active().record({y.storage()}, [rs = raw.storage(), ys = y.storage(), n]() {
      if (!detail::wants_grad(rs)) return;
      ensure_grad(*rs);
      for (size_t i = 0; i < n; ++i) {
        const float s = ys->v[i] - 1.0f;  // logistic(raw)
        rs->g[i] += ys->g[i] * s * (1.0f - s);
      }
    });
  }
  return y;
}

Tensor multihead_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                           int heads, const Tensor& alphas, Tensor* weights_out) {
  if (q.ndim() != 3 || k.shape() != q.shape() || v.shape() != q.shape())
    throw ShapeError("multihead_attention: q/k/v must share shape [N,L,D]");
  const int N = q.dim(0), L = q.dim(1), D = q.dim(2);
  if (D % heads != 0)
    throw ShapeError("multihead_attention: D=" + std::to_string(D) +
                     " not divisible by heads=" + std::to_string(heads));
  const bool sparse = alphas.defined();
  if (sparse && (alphas.ndim() != 1 || alphas.dim(0) != heads))
    throw ShapeError("multihead_attention: alphas must be [heads]");
  const int d = D / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));

  const bool rg = track({&q, &k, &v, &alphas});
  Tensor y = make_output({N, L, D}, rg);
  Tensor weights({N, heads, L, L});

  const float* pq = q.data();
  const float* pk = k.data();
  const float* pv = v.data();
  const float* pa = sparse ? alphas.data() : nullptr;
  float* py = y.data();
  float* pw = weights.data();

#pragma omp parallel for num_threads(max_threads()) schedule(static) collapse(2)
  for (int n = 0; n < N; ++n) {
    for (int h = 0; h < heads; ++h) {
      const size_t base = static_cast<size_t>(n) * L * D + static_cast<size_t>(h) * d;
      const size_t wbase = (static_cast<size_t>(n) * heads + h) * L * L;
      std::vector<double> row(static_cast<size_t>(L));
      for (int i = 0; i < L; ++i) {
        const float* qi = pq + base + static_cast<size_t>(i) * D;
        for (int j = 0; j < L; ++j) {
          const float* kj = pk + base + static_cast<size_t>(j) * D;
          double s = 0.0;
          for (int e = 0; e < d; ++e) s += static_cast<double>(qi[e]) * kj[e];
          row[static_cast<size_t>(j)] = s * scale;
        }
        std::vector<double> p;
        if (sparse) {
          p = entmax_forward(row, static_cast<double>(pa[h])).p;
        } else {
          p = softmax_forward(row);
        }
        float* wr = pw + wbase + static_cast<size_t>(i) * L;
        for (int j = 0; j < L; ++j) wr[j] = static_cast<float>(p[static_cast<size_t>(j)]);
        float* yo = py + base + static_cast<size_t>(i) * D;
        for (int j = 0; j < L; ++j) {
          const float pj = wr[j];
          if (pj == 0.0f) continue;
          const float* vj = pv + base + static_cast<size_t>(j) * D;
          for (int e = 0; e < d; ++e) yo[e] += pj * vj[e];
        }
      }
    }
  }

  if (weights_out) *weights_out = weights;

  if (rg) {
    Tape::active().record(
        {y.storage()},
        [qs = q.storage(), ks = k.storage(), vs = v.storage(),
         as = sparse ? alphas.storage() : nullptr, ys = y.storage(),
         ws = weights.storage(), N, L, D, heads, d, scale, sparse]() {
          const float* g = ys->g.data();
          const float* pq = qs->v.data();
          const float* pk = ks->v.data();
          const float* pv = vs->v.data();
          const float* pw = ws->v.data();
          const bool want_q = detail::wants_grad(qs);
          const bool want_k = detail::wants_grad(ks);
          const bool want_v = detail::wants_grad(vs);
          const bool want_a = as && detail::wants_grad(as);
          if (want_q) ensure_grad(*qs);
          if (want_k) ensure_grad(*ks);
          if (want_v) ensure_grad(*vs);
          if (want_a) ensure_grad(*as);
          // q/k/v gradients at (n,h) touch only that slice, so the collapse
          // over (n,h) is race-free. Alpha contributions land in per-(n,h)
          // slots and are summed serially afterwards in index order, keeping
          // the reduction order independent of the thread count.
          std::vector<double> galpha_nh(
              want_a ? static_cast<size_t>(N) * heads : 0, 0.0);
#pragma omp parallel for num_threads(max_threads()) schedule(static) collapse(2)
            for (int n = 0; n < N; ++n) {
              for (int h = 0; h < heads; ++h) {
                const size_t base =
                    static_cast<size_t>(n) * L * D + static_cast<size_t>(h) * d;
                const size_t wbase = (static_cast<size_t>(n) * heads + h) * L * L;
                const double alpha = sparse ? static_cast<double>(as->v[h]) : 1.0;
                std::vector<double> gp(static_cast<size_t>(L));
                std::vector<double> gs_row(static_cast<size_t>(L));
                EntmaxResult er;
                for (int i = 0; i < L; ++i) {
                  const float* gi = g + base + static_cast<size_t>(i) * D;
                  const float* wr = pw + wbase + static_cast<size_t>(i) * L;
                  // dL/dp_j = g_i . v_j ; dL/dv_j += p_j g_i
                  for (int j = 0; j < L; ++j) {
                    const float* vj = pv + base + static_cast<size_t>(j) * D;
                    double s = 0.0;
                    for (int e = 0; e < d; ++e) s += static_cast<double>(gi[e]) * vj[e];
                    gp[static_cast<size_t>(j)] = s;
                  }
                  if (want_v) {
                    float* gv = vs->g.data() + base;
                    for (int j = 0; j < L; ++j) {
                      const float pj = wr[j];
                      if (pj == 0.0f) continue;
                      float* gvj = gv + static_cast<size_t>(j) * D;
                      for (int e = 0; e < d; ++e) gvj[e] += pj * gi[e];
                    }
                  }
                  // back through the row normalizer
                  if (sparse) {
                    er.p.assign(wr, wr + L);
                    er.support.clear();
                    for (int j = 0; j < L; ++j)
                      if (wr[j] > 0.0f) er.support.push_back(j);
                    const auto gs = entmax_input_vjp(er, alpha, gp);
                    for (int j = 0; j < L; ++j) gs_row[static_cast<size_t>(j)] = gs[static_cast<size_t>(j)];
                    if (want_a)
                      galpha_nh[static_cast<size_t>(n) * heads + h] +=
                          entmax_alpha_grad(er, alpha, gp);
                  } else {
                    double dot = 0.0;
                    for (int j = 0; j < L; ++j)
                      dot += gp[static_cast<size_t>(j)] * wr[j];
                    for (int j = 0; j < L; ++j)
                      gs_row[static_cast<size_t>(j)] =
                          wr[j] * (gp[static_cast<size_t>(j)] - dot);
                  }
                  // scores = scale * q_i . k_j
                  if (want_q) {
                    float* gq = qs->g.data() + base + static_cast<size_t>(i) * D;
                    for (int j = 0; j < L; ++j) {
                      const double gsj = gs_row[static_cast<size_t>(j)] * scale;
                      if (gsj == 0.0) continue;
                      const float* kj = pk + base + static_cast<size_t>(j) * D;
                      for (int e = 0; e < d; ++e)
                        gq[e] += static_cast<float>(gsj * kj[e]);
                    }
                  }
                  if (want_k) {
                    float* gk = ks->g.data() + base;
                    const float* qi = pq + base + static_cast<size_t>(i) * D;
                    for (int j = 0; j < L; ++j) {
                      const double gsj = gs_row[static_cast<size_t>(j)] * scale;
                      if (gsj == 0.0) continue;
                      float* gkj = gk + static_cast<size_t>(j) * D;
                      for (int e = 0; e < d; ++e)
                        gkj[e] += static_cast<float>(gsj * qi[e]);
                    }
                  }
                }
              }
            }
          if (want_a) {
            for (int h = 0; h < heads; ++h) {
              double s = 0.0;
              for (int n = 0; n < N; ++n) s += galpha_nh[static_cast<size_t>(n) * heads + h];
              as->g[static_cast<size_t>(h)] += static_cast<float>(s);
            }
          }
        });
  }
  return y;
}

}  // namespace spectr
