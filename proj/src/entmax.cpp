#include "spectr/entmax.hpp"

#include <algorithm>
#include <cmath>
#include <string>

#include "spectr/error.hpp"

namespace spectr {

namespace {

constexpr int kMaxBisect = 60;
constexpr double kSumTol = 1e-9;

}  // namespace

EntmaxResult entmax_forward(std::span<const double> x, double alpha) {
  if (x.empty()) throw DomainError("entmax: empty input");
  if (!(alpha > 1.0 && alpha <= 2.0))
    throw DomainError("entmax: alpha must lie in (1, 2], got " + std::to_string(alpha));

  const double beta = alpha - 1.0;
  const double inv_beta = 1.0 / beta;
  const size_t n = x.size();

  // Work in the transformed domain xt = beta * x, where
  // p_i = [xt_i - t]_+^(1/beta). sum(p) is monotone decreasing in t, crosses
  // 1 inside [max(xt) - 1, max(xt)].
  std::vector<double> xt(n);
  double xt_max = -1e300;
  for (size_t i = 0; i < n; ++i) {
    xt[i] = beta * x[i];
    xt_max = std::max(xt_max, xt[i]);
  }

  auto sum_at = [&](double t) {
    double s = 0.0;
    for (size_t i = 0; i < n; ++i) {
      double d = xt[i] - t;
      if (d > 0.0) s += std::pow(d, inv_beta);
    }
    return s;
  };

  double lo = xt_max - 1.0, hi = xt_max;
  double t = 0.5 * (lo + hi);
  for (int it = 0; it < kMaxBisect; ++it) {
    t = 0.5 * (lo + hi);
    double s = sum_at(t);
    if (std::abs(s - 1.0) < kSumTol) break;
    if (s > 1.0)
      lo = t;
    else
      hi = t;
  }

  EntmaxResult r;
  r.tau = t / beta;
  r.p.assign(n, 0.0);
  for (size_t i = 0; i < n; ++i) {
    double d = xt[i] - t;
    if (d > 0.0) {
      r.p[i] = std::pow(d, inv_beta);
      r.support.push_back(static_cast<int>(i));
    }
  }
  return r;
}

std::vector<double> softmax_forward(std::span<const double> x) {
  if (x.empty()) throw DomainError("softmax: empty input");
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

std::vector<double> entmax_input_vjp(const EntmaxResult& r, double alpha,
                                     std::span<const double> g) {
  const size_t n = r.p.size();
  std::vector<double> out(n, 0.0);
  double s_sum = 0.0, sg_sum = 0.0;
  std::vector<double> s(n, 0.0);
  for (int i : r.support) {
    s[static_cast<size_t>(i)] = std::pow(r.p[static_cast<size_t>(i)], 2.0 - alpha);
    s_sum += s[static_cast<size_t>(i)];
    sg_sum += s[static_cast<size_t>(i)] * g[static_cast<size_t>(i)];
  }
  if (s_sum <= 0.0) return out;
  const double ratio = sg_sum / s_sum;
  for (int i : r.support) {
    size_t k = static_cast<size_t>(i);
    out[k] = s[k] * (g[k] - ratio);
  }
  return out;
}

double entmax_alpha_grad(const EntmaxResult& r, double alpha,
                         std::span<const double> g) {
  // On the support p_i = u_i^(1/beta) with u_i = beta (x_i - tau). Implicit
  // differentiation against alpha gives dp_i = a_i - s_i * (sum a / sum s),
  // a_i = p_i (1 - beta ln p_i) / beta^2, s_i = p_i^(2-alpha).
  const double beta = alpha - 1.0;
  double a_sum = 0.0, s_sum = 0.0;
  const size_t n = r.p.size();
  std::vector<double> a(n, 0.0), s(n, 0.0);
  for (int idx : r.support) {
    size_t i = static_cast<size_t>(idx);
    double p = r.p[i];
    a[i] = p * (1.0 - beta * std::log(p)) / (beta * beta);
    s[i] = std::pow(p, 2.0 - alpha);
    a_sum += a[i];
    s_sum += s[i];
  }
  if (s_sum <= 0.0) return 0.0;
  const double ratio = a_sum / s_sum;
  double acc = 0.0;
  for (int idx : r.support) {
    size_t i = static_cast<size_t>(idx);
    acc += g[i] * (a[i] - s[i] * ratio);
  }
  return acc;
}

double entmax_alpha_grad(std::span<const double> x, double alpha,
                         std::span<const double> g) {
  EntmaxResult r = entmax_forward(x, alpha);
  return entmax_alpha_grad(r, alpha, g);
}

}  // namespace spectr
