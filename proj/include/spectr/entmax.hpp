#pragma once

#include <span>
#include <vector>

namespace spectr {

// alpha-entmax maps a score vector onto the probability simplex:
//   p_i = [(alpha-1)(x_i - tau)]_+^(1/(alpha-1)),  tau chosen so sum(p) = 1.
// alpha=1 recovers softmax (separate routine, no threshold search), alpha=2
// is the Euclidean projection onto the simplex (sparsemax). For alpha > 1
// entries can be exactly zero. All math in double; the attention kernels
// convert at their float32 boundary.

struct EntmaxResult {
  std::vector<double> p;
  double tau = 0.0;
  std::vector<int> support;  // indices with p > 0
};

// alpha in (1, 2]; throws DomainError otherwise or on an empty input.
EntmaxResult entmax_forward(std::span<const double> x, double alpha);

std::vector<double> softmax_forward(std::span<const double> x);

// J^T g for the input Jacobian J = diag(s) - s s^T / sum(s) restricted to the
// support, with s_i = p_i^(2-alpha).
std::vector<double> entmax_input_vjp(const EntmaxResult& r, double alpha,
                                     std::span<const double> g);

// g^T dp/dalpha via implicit differentiation of both the componentwise map
// and the threshold condition. One-sided (interior) value near support
// boundaries.
double entmax_alpha_grad(const EntmaxResult& r, double alpha,
                         std::span<const double> g);
double entmax_alpha_grad(std::span<const double> x, double alpha,
                         std::span<const double> g);

}  // namespace spectr
