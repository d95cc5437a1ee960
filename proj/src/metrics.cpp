#include "spectr/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

#include "spectr/error.hpp"

namespace spectr {

namespace {

void check_shapes(const Mask& a, const Mask& b) {
  if (a.width != b.width || a.height != b.height)
    throw ShapeError("metrics: mask shapes differ");
}

size_t intersection(const Mask& a, const Mask& b) {
  size_t n = 0;
  for (size_t i = 0; i < a.values.size(); ++i) n += a.values[i] & b.values[i];
  return n;
}

std::vector<uint8_t> boundary(const Mask& m) {
  std::vector<uint8_t> out(m.values.size(), 0);
  for (int y = 0; y < m.height; ++y)
    for (int x = 0; x < m.width; ++x) {
      if (!m.at(x, y)) continue;
      const bool edge = x == 0 || y == 0 || x == m.width - 1 || y == m.height - 1;
      if (edge || !m.at(x - 1, y) || !m.at(x + 1, y) || !m.at(x, y - 1) ||
          !m.at(x, y + 1))
        out[static_cast<size_t>(y) * m.width + x] = 1;
    }
  return out;
}

constexpr double kInf = 1e18;

// 1-D squared-distance lower envelope (Felzenszwalb & Huttenlocher). With
// integer site values the envelope evaluates to exact integers at grid points.
void dt1d(std::vector<double>& f, std::vector<double>& d, std::vector<int>& v,
          std::vector<double>& z, int n) {
  int k = 0;
  v[0] = 0;
  z[0] = -kInf;
  z[1] = kInf;
  for (int q = 1; q < n; ++q) {
    double s = ((f[q] + static_cast<double>(q) * q) -
                (f[v[k]] + static_cast<double>(v[k]) * v[k])) /
               (2.0 * q - 2.0 * v[k]);
    while (s <= z[k]) {
      --k;
      s = ((f[q] + static_cast<double>(q) * q) -
           (f[v[k]] + static_cast<double>(v[k]) * v[k])) /
          (2.0 * q - 2.0 * v[k]);
    }
    ++k;
    v[k] = q;
    z[k] = s;
    z[k + 1] = kInf;
  }
  k = 0;
  for (int q = 0; q < n; ++q) {
    while (z[k + 1] < q) ++k;
    const double dq = q - v[k];
    d[q] = dq * dq + f[v[k]];
  }
}

// squared Euclidean distance to the nearest set pixel, for every pixel
std::vector<double> edt_squared(const std::vector<uint8_t>& set, int W, int H) {
  std::vector<double> dist(static_cast<size_t>(W) * H);
  for (size_t i = 0; i < dist.size(); ++i) dist[i] = set[i] ? 0.0 : kInf;
  const int n = std::max(W, H);
  std::vector<double> f(static_cast<size_t>(n)), d(static_cast<size_t>(n)),
      z(static_cast<size_t>(n) + 1);
  std::vector<int> v(static_cast<size_t>(n));
  for (int x = 0; x < W; ++x) {
    for (int y = 0; y < H; ++y) f[static_cast<size_t>(y)] = dist[static_cast<size_t>(y) * W + x];
    dt1d(f, d, v, z, H);
    for (int y = 0; y < H; ++y) dist[static_cast<size_t>(y) * W + x] = d[static_cast<size_t>(y)];
  }
  for (int y = 0; y < H; ++y) {
    for (int x = 0; x < W; ++x) f[static_cast<size_t>(x)] = dist[static_cast<size_t>(y) * W + x];
    dt1d(f, d, v, z, W);
    for (int x = 0; x < W; ++x) dist[static_cast<size_t>(y) * W + x] = d[static_cast<size_t>(x)];
  }
  return dist;
}

}  // namespace

double dsc(const Mask& a, const Mask& b) {
  check_shapes(a, b);
  const size_t na = a.count(), nb = b.count();
  if (na == 0 && nb == 0) return 1.0;
  if (na == 0 || nb == 0) return 0.0;
  return 2.0 * static_cast<double>(intersection(a, b)) / static_cast<double>(na + nb);
}

double iou(const Mask& a, const Mask& b) {
  check_shapes(a, b);
  const size_t na = a.count(), nb = b.count();
  if (na == 0 && nb == 0) return 1.0;
  if (na == 0 || nb == 0) return 0.0;
  const size_t inter = intersection(a, b);
  return static_cast<double>(inter) / static_cast<double>(na + nb - inter);
}

double hausdorff(const Mask& a, const Mask& b) {
  check_shapes(a, b);
  const size_t na = a.count(), nb = b.count();
  if (na == 0 && nb == 0) return 0.0;
  if (na == 0 || nb == 0) {
    const double dw = a.width - 1, dh = a.height - 1;
    return std::sqrt(dw * dw + dh * dh);
  }
  const auto ba = boundary(a);
  const auto bb = boundary(b);
  const auto dist_to_b = edt_squared(bb, a.width, a.height);
  const auto dist_to_a = edt_squared(ba, a.width, a.height);
  double worst = 0.0;
  for (size_t i = 0; i < ba.size(); ++i) {
    if (ba[i]) worst = std::max(worst, dist_to_b[i]);
    if (bb[i]) worst = std::max(worst, dist_to_a[i]);
  }
  return std::sqrt(worst);
}

double MetricReport::mean_dsc() const {
  double s = 0.0;
  for (const auto& r : rows) s += r.dsc;
  return rows.empty() ? 0.0 : s / static_cast<double>(rows.size());
}

double MetricReport::median_dsc() const {
  if (rows.empty()) return 0.0;
  std::vector<double> v;
  for (const auto& r : rows) v.push_back(r.dsc);
  std::sort(v.begin(), v.end());
  const size_t n = v.size();
  return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

double MetricReport::max_dsc() const {
  double m = 0.0;
  for (const auto& r : rows) m = std::max(m, r.dsc);
  return m;
}

double MetricReport::min_dsc() const {
  if (rows.empty()) return 0.0;
  double m = 1.0;
  for (const auto& r : rows) m = std::min(m, r.dsc);
  return m;
}

double MetricReport::mean_iou() const {
  double s = 0.0;
  for (const auto& r : rows) s += r.iou;
  return rows.empty() ? 0.0 : s / static_cast<double>(rows.size());
}

double MetricReport::mean_hd() const {
  double s = 0.0;
  for (const auto& r : rows) s += r.hd;
  return rows.empty() ? 0.0 : s / static_cast<double>(rows.size());
}

std::string MetricReport::to_csv() const {
  std::string out = "id,dsc,iou,hd\n";
  char buf[160];
  auto stat_row = [&](const char* name, auto fn) {
    std::vector<double> d, i, h;
    for (const auto& r : rows) {
      d.push_back(r.dsc);
      i.push_back(r.iou);
      h.push_back(r.hd);
    }
    std::snprintf(buf, sizeof(buf), "%s,%.6f,%.6f,%.6f\n", name, fn(d), fn(i), fn(h));
    out += buf;
  };
  for (const auto& r : rows) {
    std::snprintf(buf, sizeof(buf), "%d,%.6f,%.6f,%.6f\n", r.id, r.dsc, r.iou, r.hd);
    out += buf;
  }
  auto mean = [](std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return v.empty() ? 0.0 : s / static_cast<double>(v.size());
  };
  auto median = [](std::vector<double>& v) {
    if (v.empty()) return 0.0;
    std::sort(v.begin(), v.end());
    const size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
  };
  auto vmax = [](std::vector<double>& v) {
    return v.empty() ? 0.0 : *std::max_element(v.begin(), v.end());
  };
  auto vmin = [](std::vector<double>& v) {
    return v.empty() ? 0.0 : *std::min_element(v.begin(), v.end());
  };
  stat_row("mean", mean);
  stat_row("median", median);
  stat_row("max", vmax);
  stat_row("min", vmin);
  return out;
}

}  // namespace spectr
