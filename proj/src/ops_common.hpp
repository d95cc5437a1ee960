#pragma once

#include <cstddef>

#include "spectr/tensor.hpp"
#include "spectr/threading.hpp"

namespace spectr::detail {

inline bool track(std::initializer_list<const Tensor*> inputs) {
  if (!Tape::active().recording()) return false;
  for (const Tensor* t : inputs)
    if (t->defined() && t->requires_grad()) return true;
  return false;
}

inline Tensor make_output(std::vector<int> shape, bool requires_grad) {
  Tensor t(std::move(shape));
  if (requires_grad) t.storage()->requires_grad = true;  // non-leaf
  return t;
}

inline void ensure_grad(Tensor::Storage& st) {
  if (st.g.size() != st.v.size()) st.g.assign(st.v.size(), 0.0f);
}

inline bool wants_grad(const std::shared_ptr<Tensor::Storage>& st) {
  return st && st->requires_grad;
}

// Deterministic whole-array sum: fixed-chunk partials merged in chunk order,
// so the result is independent of the thread count.
double reduce_sum(const float* x, size_t n);

constexpr int kReduceChunks = 8;

}  // namespace spectr::detail
