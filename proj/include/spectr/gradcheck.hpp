#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace spectr {

struct GradCheckResult {
  std::string name;
  double max_rel_err = 0.0;
  double tolerance = 0.0;
  bool pass = false;
};

// Central finite-difference checks of every tape primitive's backward pass
// against a 64-bit-accumulated evaluation of the same forward. Kinked
// primitives (relu, maxpool, clamp) are probed away from their kinks.
std::vector<GradCheckResult> primitive_gradcheck(uint64_t seed);

// entmax input-vjp and alpha-derivative against central differences of the
// double-precision forward, at points away from support boundaries.
GradCheckResult entmax_vjp_gradcheck(uint64_t seed, int points = 50);
GradCheckResult entmax_alpha_gradcheck(uint64_t seed, int points = 50);

// Whole-network loss gradient on a small cube against central differences of
// the serial double-precision reference forward. Sampled parameters whose
// difference quotient is inconsistent across step sizes (a kink crossed the
// stencil) are replaced by the next candidate.
GradCheckResult model_gradcheck(uint64_t seed, int samples = 100);

std::vector<GradCheckResult> run_gradcheck(uint64_t seed);

}  // namespace spectr
