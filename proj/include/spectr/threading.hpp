#pragma once

namespace spectr {

// Worker cap for OpenMP kernels. Resolution order: explicit set_max_threads()
// call, then the SPECTR_THREADS environment variable (0 means single-threaded),
// then the OpenMP default. Always >= 1.
int max_threads();
void set_max_threads(int n);

// Deterministic mode fixes the reduction order of every kernel so results are
// bit-identical for any thread count. Kernels that parallelize over
// independent output elements are deterministic either way; global reductions
// (sums, normalization statistics) switch to a fixed-chunk order when this is
// on. Default on.
bool deterministic();
void set_deterministic(bool on);

}  // namespace spectr
