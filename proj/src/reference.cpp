#include "spectr/reference.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <string>

#include "spectr/error.hpp"

namespace spectr::ref {

namespace {

std::vector<double> to_double(const Tensor& t) {
  std::vector<double> v(t.size());
  for (size_t i = 0; i < v.size(); ++i) v[i] = t.data()[i];
  return v;
}

size_t idx4(int s, int y, int x, int c, int H, int W, int C) {
  return ((static_cast<size_t>(s) * H + y) * W + x) * C + c;
}

}  // namespace

std::vector<double> matmul(const std::vector<double>& a, int m, int k,
                           const std::vector<double>& b, int n) {
  std::vector<double> c(static_cast<size_t>(m) * n, 0.0);
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < n; ++j) {
      double s = 0.0;
      for (int l = 0; l < k; ++l)
        s += a[static_cast<size_t>(i) * k + l] * b[static_cast<size_t>(l) * n + j];
      c[static_cast<size_t>(i) * n + j] = s;
    }
  return c;
}

std::vector<double> band_conv2d(const std::vector<double>& f, int L, int H, int W,
                                int Cin, const std::vector<double>& k, int Cout,
                                int K, const std::vector<double>& bias) {
  const int P = K / 2;
  std::vector<double> out(static_cast<size_t>(L) * H * W * Cout, 0.0);
  for (int s = 0; s < L; ++s)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        for (int o = 0; o < Cout; ++o) {
          double acc = bias.empty() ? 0.0 : bias[static_cast<size_t>(o)];
          for (int i = 0; i < Cin; ++i)
            for (int ky = 0; ky < K; ++ky)
              for (int kx = 0; kx < K; ++kx) {
                const int sy = y + ky - P, sx = x + kx - P;
                if (sy < 0 || sy >= H || sx < 0 || sx >= W) continue;
                acc += f[idx4(s, sy, sx, i, H, W, Cin)] *
                       k[((static_cast<size_t>(o) * Cin + i) * K + ky) * K + kx];
              }
          out[idx4(s, y, x, o, H, W, Cout)] = acc;
        }
  return out;
}

std::vector<double> band_conv2d_per_band(const std::vector<double>& f, int L, int H,
                                         int W, int Cin, const std::vector<double>& k,
                                         int Cout, int K, const std::vector<double>& bias) {
  const int P = K / 2;
  const size_t per_band = static_cast<size_t>(Cout) * Cin * K * K;
  std::vector<double> out(static_cast<size_t>(L) * H * W * Cout, 0.0);
  for (int s = 0; s < L; ++s)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        for (int o = 0; o < Cout; ++o) {
          double acc = bias.empty() ? 0.0 : bias[static_cast<size_t>(o)];
          for (int i = 0; i < Cin; ++i)
            for (int ky = 0; ky < K; ++ky)
              for (int kx = 0; kx < K; ++kx) {
                const int sy = y + ky - P, sx = x + kx - P;
                if (sy < 0 || sy >= H || sx < 0 || sx >= W) continue;
                acc += f[idx4(s, sy, sx, i, H, W, Cin)] *
                       k[static_cast<size_t>(s) * per_band +
                         ((static_cast<size_t>(o) * Cin + i) * K + ky) * K + kx];
              }
          out[idx4(s, y, x, o, H, W, Cout)] = acc;
        }
  return out;
}

std::vector<double> conv3d(const std::vector<double>& f, int L, int H, int W, int Cin,
                           const std::vector<double>& k, int Cout, int K,
                           const std::vector<double>& bias) {
  const int P = K / 2;
  std::vector<double> out(static_cast<size_t>(L) * H * W * Cout, 0.0);
  for (int s = 0; s < L; ++s)
    for (int y = 0; y < H; ++y)
      for (int x = 0; x < W; ++x)
        for (int o = 0; o < Cout; ++o) {
          double acc = bias.empty() ? 0.0 : bias[static_cast<size_t>(o)];
          for (int i = 0; i < Cin; ++i)
            for (int ks = 0; ks < K; ++ks)
              for (int ky = 0; ky < K; ++ky)
                for (int kx = 0; kx < K; ++kx) {
                  const int ss = s + ks - P, sy = y + ky - P, sx = x + kx - P;
                  if (ss < 0 || ss >= L || sy < 0 || sy >= H || sx < 0 || sx >= W)
                    continue;
                  acc += f[idx4(ss, sy, sx, i, H, W, Cin)] *
                         k[(((static_cast<size_t>(o) * Cin + i) * K + ks) * K + ky) * K + kx];
                }
          out[idx4(s, y, x, o, H, W, Cout)] = acc;
        }
  return out;
}

std::vector<double> maxpool3(const std::vector<double>& f, int L, int H, int W, int C) {
  const int Lo = (L + 1) / 2, Ho = (H + 1) / 2, Wo = (W + 1) / 2;
  std::vector<double> out(static_cast<size_t>(Lo) * Ho * Wo * C);
  for (int so = 0; so < Lo; ++so)
    for (int yo = 0; yo < Ho; ++yo)
      for (int xo = 0; xo < Wo; ++xo)
        for (int c = 0; c < C; ++c) {
          double best = -std::numeric_limits<double>::infinity();
          for (int ds = 0; ds < 2; ++ds)
            for (int dy = 0; dy < 2; ++dy)
              for (int dx = 0; dx < 2; ++dx) {
                const int s = std::min(2 * so + ds, L - 1);
                const int y = std::min(2 * yo + dy, H - 1);
                const int x = std::min(2 * xo + dx, W - 1);
                best = std::max(best, f[idx4(s, y, x, c, H, W, C)]);
              }
          out[idx4(so, yo, xo, c, Ho, Wo, C)] = best;
        }
  return out;
}

std::vector<double> upsample3(const std::vector<double>& f, int L, int H, int W, int C) {
  const int Lo = 2 * L, Ho = 2 * H, Wo = 2 * W;
  std::vector<double> out(static_cast<size_t>(Lo) * Ho * Wo * C);
  for (int so = 0; so < Lo; ++so)
    for (int yo = 0; yo < Ho; ++yo)
      for (int xo = 0; xo < Wo; ++xo)
        for (int c = 0; c < C; ++c)
          out[idx4(so, yo, xo, c, Ho, Wo, C)] =
              f[idx4(so / 2, yo / 2, xo / 2, c, H, W, C)];
  return out;
}

std::vector<double> entmax(const std::vector<double>& x, double alpha) {
  // independent bisection on the transformed threshold
  const double beta = alpha - 1.0;
  const size_t n = x.size();
  std::vector<double> xt(n);
  double m = -1e300;
  for (size_t i = 0; i < n; ++i) {
    xt[i] = beta * x[i];
    m = std::max(m, xt[i]);
  }
  double lo = m - 1.0, hi = m, t = m - 0.5;
  for (int it = 0; it < 60; ++it) {
    t = 0.5 * (lo + hi);
    double sum = 0.0;
    for (size_t i = 0; i < n; ++i) {
      const double d = xt[i] - t;
      if (d > 0.0) sum += std::pow(d, 1.0 / beta);
    }
    if (std::abs(sum - 1.0) < 1e-9) break;
    (sum > 1.0 ? lo : hi) = t;
  }
  std::vector<double> p(n, 0.0);
  for (size_t i = 0; i < n; ++i) {
    const double d = xt[i] - t;
    if (d > 0.0) p[i] = std::pow(d, 1.0 / beta);
  }
  return p;
}

std::vector<double> softmax(const std::vector<double>& x) {
  double m = *std::max_element(x.begin(), x.end());
  std::vector<double> p(x.size());
  double z = 0.0;
  for (size_t i = 0; i < x.size(); ++i) {
    p[i] = std::exp(x[i] - m);
    z += p[i];
  }
  for (double& v : p) v /= z;
  return p;
}

namespace {

struct Map {
  int L = 0, H = 0, W = 0, C = 0;
  std::vector<double> v;
};

void spectral_group_norm_inplace(Map& f, int bands, const std::vector<double>& gamma,
                                 const std::vector<double>& beta, int groups,
                                 double eps) {
  const int C = f.C;
  const int gc = C / groups;
  const size_t spatial = f.v.size() / (static_cast<size_t>(bands) * C);
  for (int s = 0; s < bands; ++s)
    for (int grp = 0; grp < groups; ++grp) {
      const size_t off = static_cast<size_t>(s) * spatial * C;
      const int c0 = grp * gc;
      double sum = 0.0, sq = 0.0;
      for (size_t n = 0; n < spatial; ++n)
        for (int c = 0; c < gc; ++c) {
          const double v = f.v[off + n * C + c0 + c];
          sum += v;
          sq += v * v;
        }
      const double cnt = static_cast<double>(spatial) * gc;
      const double mu = sum / cnt;
      const double var = std::max(0.0, sq / cnt - mu * mu);
      const double is = 1.0 / std::sqrt(var + eps);
      for (size_t n = 0; n < spatial; ++n)
        for (int c = 0; c < gc; ++c) {
          const size_t i = off + n * C + c0 + c;
          f.v[i] = gamma[static_cast<size_t>(s) * C + c0 + c] * (f.v[i] - mu) * is +
                   beta[static_cast<size_t>(s) * C + c0 + c];
        }
    }
}

void relu_inplace(Map& f) {
  for (double& v : f.v) v = v > 0.0 ? v : 0.0;
}

void layer_norm_rows(std::vector<double>& x, int D, const std::vector<double>& gamma,
                     const std::vector<double>& beta, double eps) {
  const size_t rows = x.size() / static_cast<size_t>(D);
  for (size_t r = 0; r < rows; ++r) {
    double* xr = x.data() + r * D;
    double s = 0.0;
    for (int i = 0; i < D; ++i) s += xr[i];
    const double m = s / D;
    double var = 0.0;
    for (int i = 0; i < D; ++i) var += (xr[i] - m) * (xr[i] - m);
    var /= D;
    const double is = 1.0 / std::sqrt(var + eps);
    for (int i = 0; i < D; ++i) xr[i] = gamma[static_cast<size_t>(i)] * (xr[i] - m) * is + beta[static_cast<size_t>(i)];
  }
}

// rows: [R, din] x [din, dout] + b
std::vector<double> linear_rows(const std::vector<double>& x, int din,
                                const std::vector<double>& w, int dout,
                                const std::vector<double>& b) {
  const size_t rows = x.size() / static_cast<size_t>(din);
  std::vector<double> y(rows * dout, 0.0);
  for (size_t r = 0; r < rows; ++r)
    for (int o = 0; o < dout; ++o) {
      double s = b.empty() ? 0.0 : b[static_cast<size_t>(o)];
      for (int i = 0; i < din; ++i)
        s += x[r * din + i] * w[static_cast<size_t>(i) * dout + o];
      y[r * dout + o] = s;
    }
  return y;
}

struct ParamReader {
  const SpectrModel& model;
  std::vector<double> operator()(const std::string& name) const {
    return to_double(model.param(name));
  }
};

void stage_transformer_inplace(const SpectrModel& model, int level, Map& f) {
  ParamReader P{model};
  const std::string tr = "enc" + std::to_string(level) + ".tr.";
  const ModelConfig& cfg = model.config();
  const int C = f.C, L = f.L, N = f.H * f.W;
  const int D = C;
  const int heads = cfg.heads;
  const int d = D / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(d));

  // gather [N, L, C]
  std::vector<double> seq(static_cast<size_t>(N) * L * C);
  for (int n = 0; n < N; ++n)
    for (int s = 0; s < L; ++s)
      for (int c = 0; c < C; ++c)
        seq[(static_cast<size_t>(n) * L + s) * C + c] =
            f.v[(static_cast<size_t>(s) * N + n) * C + c];

  std::vector<double> z0 = linear_rows(seq, C, P(tr + "embed.w"), D, {});
  const std::vector<double> pos = P(tr + "pos");
  for (int n = 0; n < N; ++n)
    for (int s = 0; s < L; ++s)
      for (int e = 0; e < D; ++e)
        z0[(static_cast<size_t>(n) * L + s) * D + e] += pos[static_cast<size_t>(s) * D + e];

  std::vector<double> h = z0;
  layer_norm_rows(h, D, P(tr + "ln1.gamma"), P(tr + "ln1.beta"), 1e-5);
  const std::vector<double> q = linear_rows(h, D, P(tr + "wq.w"), D, P(tr + "wq.b"));
  const std::vector<double> kk = linear_rows(h, D, P(tr + "wk.w"), D, P(tr + "wk.b"));
  const std::vector<double> vv = linear_rows(h, D, P(tr + "wv.w"), D, P(tr + "wv.b"));

  std::vector<double> alphas(static_cast<size_t>(heads), 1.0);
  const bool sparse = cfg.sparsity;
  if (sparse) {
    const std::vector<double> raw = P(tr + "alpha_raw");
    for (int i = 0; i < heads; ++i)
      alphas[static_cast<size_t>(i)] = 1.0 + 1.0 / (1.0 + std::exp(-raw[static_cast<size_t>(i)]));
  }

  std::vector<double> att(static_cast<size_t>(N) * L * D, 0.0);
  std::vector<double> row(static_cast<size_t>(L));
  for (int n = 0; n < N; ++n)
    for (int hd = 0; hd < heads; ++hd) {
      const size_t base = static_cast<size_t>(n) * L * D + static_cast<size_t>(hd) * d;
      for (int i = 0; i < L; ++i) {
        for (int j = 0; j < L; ++j) {
          double s = 0.0;
          for (int e = 0; e < d; ++e)
            s += q[base + static_cast<size_t>(i) * D + e] * kk[base + static_cast<size_t>(j) * D + e];
          row[static_cast<size_t>(j)] = s * scale;
        }
        const std::vector<double> p =
            sparse ? entmax(row, alphas[static_cast<size_t>(hd)]) : softmax(row);
        for (int j = 0; j < L; ++j) {
          if (p[static_cast<size_t>(j)] == 0.0) continue;
          for (int e = 0; e < d; ++e)
            att[base + static_cast<size_t>(i) * D + e] +=
                p[static_cast<size_t>(j)] * vv[base + static_cast<size_t>(j) * D + e];
        }
      }
    }

  std::vector<double> z1p = linear_rows(att, D, P(tr + "wo.w"), D, P(tr + "wo.b"));
  for (size_t i = 0; i < z1p.size(); ++i) z1p[i] += z0[i];
  std::vector<double> m = z1p;
  layer_norm_rows(m, D, P(tr + "ln2.gamma"), P(tr + "ln2.beta"), 1e-5);
  std::vector<double> hid = linear_rows(m, D, P(tr + "mlp1.w"), 4 * D, P(tr + "mlp1.b"));
  for (double& v : hid) v = v > 0.0 ? v : 0.0;
  std::vector<double> z1 = linear_rows(hid, 4 * D, P(tr + "mlp2.w"), D, P(tr + "mlp2.b"));
  for (size_t i = 0; i < z1.size(); ++i) z1[i] += z1p[i];
  std::vector<double> back = linear_rows(z1, D, P(tr + "back.w"), C, P(tr + "back.b"));

  // scatter + residual add
  for (int n = 0; n < N; ++n)
    for (int s = 0; s < L; ++s)
      for (int c = 0; c < C; ++c)
        f.v[(static_cast<size_t>(s) * N + n) * C + c] +=
            back[(static_cast<size_t>(n) * L + s) * C + c];
}

Map conv_norm_relu_ref(const SpectrModel& model, const std::string& prefix,
                       int norm_bands, const Map& x, bool depthwise) {
  ParamReader P{model};
  const Tensor& wt = model.param(prefix + ".w");
  const std::vector<double> w = to_double(wt);
  const std::vector<double> b = to_double(model.param(prefix + ".b"));
  Map out;
  out.L = x.L;
  out.H = x.H;
  out.W = x.W;
  if (depthwise) {
    if (wt.ndim() == 5) {
      out.C = wt.dim(1);
      out.v = band_conv2d_per_band(x.v, x.L, x.H, x.W, x.C, w, out.C, wt.dim(3), b);
    } else {
      out.C = wt.dim(0);
      out.v = band_conv2d(x.v, x.L, x.H, x.W, x.C, w, out.C, wt.dim(2), b);
    }
  } else {
    out.C = wt.dim(0);
    out.v = conv3d(x.v, x.L, x.H, x.W, x.C, w, out.C, wt.dim(2), b);
  }
  std::string norm = prefix;
  norm.replace(norm.find("conv"), 4, "norm");
  spectral_group_norm_inplace(out, norm_bands, P(norm + ".gamma"), P(norm + ".beta"),
                              model.config().groups, 1e-5);
  relu_inplace(out);
  return out;
}

}  // namespace

std::vector<double> forward_prob_map(const SpectrModel& model, const HsiCube& cube) {
  const ModelConfig& cfg = model.config();
  ParamReader P{model};
  Map x;
  x.L = cube.bands;
  x.H = cube.height;
  x.W = cube.width;
  x.C = 1;
  x.v.assign(cube.values.begin(), cube.values.end());

  std::vector<Map> skips(5);
  const auto& extents = model.stage_spectral_extents();
  for (int level = 1; level <= 4; ++level) {
    const std::string pre = "enc" + std::to_string(level) + ".";
    const int nb = cfg.spectral_norm ? extents[static_cast<size_t>(level - 1)] : 1;
    x = conv_norm_relu_ref(model, pre + "conv1", nb, x, cfg.depthwise_encoder);
    x = conv_norm_relu_ref(model, pre + "conv2", nb, x, cfg.depthwise_encoder);
    if (cfg.transformer_at(level)) stage_transformer_inplace(model, level, x);
    skips[static_cast<size_t>(level)] = x;
    if (level < 4) {
      Map pooled;
      pooled.L = (x.L + 1) / 2;
      pooled.H = (x.H + 1) / 2;
      pooled.W = (x.W + 1) / 2;
      pooled.C = x.C;
      pooled.v = maxpool3(x.v, x.L, x.H, x.W, x.C);
      x = std::move(pooled);
    }
  }

  for (int level = 3; level >= 1; --level) {
    const std::string pre = "dec" + std::to_string(level) + ".";
    const Map& skip = skips[static_cast<size_t>(level)];
    Map up;
    up.L = 2 * x.L;
    up.H = 2 * x.H;
    up.W = 2 * x.W;
    up.C = x.C;
    up.v = upsample3(x.v, x.L, x.H, x.W, x.C);
    // crop to the skip extents
    Map cropped;
    cropped.L = skip.L;
    cropped.H = skip.H;
    cropped.W = skip.W;
    cropped.C = up.C;
    cropped.v.resize(static_cast<size_t>(skip.L) * skip.H * skip.W * up.C);
    for (int s = 0; s < skip.L; ++s)
      for (int y = 0; y < skip.H; ++y)
        for (int xx = 0; xx < skip.W; ++xx)
          for (int c = 0; c < up.C; ++c)
            cropped.v[idx4(s, y, xx, c, skip.H, skip.W, up.C)] =
                up.v[idx4(s, y, xx, c, up.H, up.W, up.C)];
    Map cat;
    cat.L = skip.L;
    cat.H = skip.H;
    cat.W = skip.W;
    cat.C = cropped.C + skip.C;
    cat.v.resize(cropped.v.size() + skip.v.size());
    const size_t vox = static_cast<size_t>(cat.L) * cat.H * cat.W;
    for (size_t i = 0; i < vox; ++i) {
      for (int c = 0; c < cropped.C; ++c)
        cat.v[i * cat.C + c] = cropped.v[i * cropped.C + c];
      for (int c = 0; c < skip.C; ++c)
        cat.v[i * cat.C + cropped.C + c] = skip.v[i * skip.C + c];
    }
    x = conv_norm_relu_ref(model, pre + "conv1", 1, cat, false);
    x = conv_norm_relu_ref(model, pre + "conv2", 1, x, false);
  }

  const std::vector<double> logits = linear_rows(x.v, x.C, P("head.w"), 1, P("head.b"));
  const int L = x.L, H = x.H, W = x.W;
  std::vector<double> prob(static_cast<size_t>(H) * W, 0.0);
  for (int s = 0; s < L; ++s)
    for (size_t i = 0; i < prob.size(); ++i)
      prob[i] += 1.0 / (1.0 + std::exp(-logits[static_cast<size_t>(s) * prob.size() + i]));
  for (double& v : prob) v /= L;
  return prob;
}

double loss(const SpectrModel& model, const HsiCube& cube, const Mask& mask) {
  const std::vector<double> prob = forward_prob_map(model, cube);
  double inter = 0.0, psum = 0.0, ysum = 0.0, bce = 0.0;
  for (size_t i = 0; i < prob.size(); ++i) {
    const double p = std::min(1.0 - 1e-6, std::max(1e-6, prob[i]));
    const double y = mask.values[i];
    inter += p * y;
    psum += p;
    ysum += y;
    bce -= y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
  }
  bce /= static_cast<double>(prob.size());
  const double dice = 1.0 - (2.0 * inter + 1.0) / (psum + ysum + 1.0);
  return 0.5 * dice + 0.5 * bce;
}

}  // namespace spectr::ref
