#pragma once

#include <cstddef>
#include <functional>
#include <initializer_list>
#include <memory>
#include <vector>

#include "spectr/error.hpp"

namespace spectr {

// Dense float32 tensor with reverse-mode gradients. A Tensor is a cheap
// value-semantic handle onto shared storage; reshape() returns a new handle
// over the same buffer. Values are row-major in shape order. Gradients live
// next to the values and are allocated lazily.
class Tensor {
 public:
  struct Storage {
    std::vector<float> v;
    std::vector<float> g;
    bool requires_grad = false;
    bool leaf = false;  // set by set_requires_grad(); leaves keep accumulated grads across backward passes
  };

  Tensor() = default;
  explicit Tensor(std::vector<int> shape, float fill = 0.0f);
  static Tensor from(std::vector<int> shape, std::vector<float> values);
  static Tensor scalar(float v);

  bool defined() const { return st_ != nullptr; }
  const std::vector<int>& shape() const { return shape_; }
  int dim(int i) const { return shape_[static_cast<size_t>(i)]; }
  int ndim() const { return static_cast<int>(shape_.size()); }
  size_t size() const { return st_ ? st_->v.size() : 0; }

  float* data() { return st_->v.data(); }
  const float* data() const { return st_->v.data(); }
  const std::vector<float>& values() const { return st_->v; }

  // Allocates a zeroed gradient buffer on first use.
  float* grad();
  const std::vector<float>& grad_vec() const { return st_->g; }
  bool grad_allocated() const { return st_ && !st_->g.empty(); }
  void zero_grad();

  bool requires_grad() const { return st_ && st_->requires_grad; }
  Tensor& set_requires_grad(bool b);

  float item() const;
  Tensor reshape(std::vector<int> shape) const;
  Tensor clone() const;

  const std::shared_ptr<Storage>& storage() const { return st_; }
  void check_finite(const char* what) const;

 private:
  std::shared_ptr<Storage> st_;
  std::vector<int> shape_;
};

size_t shape_numel(const std::vector<int>& shape);

struct TapeNode {
  std::function<void()> backward;
  std::vector<std::shared_ptr<Tensor::Storage>> outputs;
};

// Record of executed primitives. backward() replays every node exactly once
// in reverse execution order. Non-leaf gradients are scratch state zeroed at
// the start of each pass; leaf (parameter) gradients accumulate additively,
// so backward on a sum of losses equals the sum of individual passes.
class Tape {
 public:
  static Tape& active();

  bool recording() const { return recording_; }
  void set_recording(bool b) { recording_ = b; }
  void record(std::vector<std::shared_ptr<Tensor::Storage>> outputs,
              std::function<void()> fn);
  size_t size() const { return nodes_.size(); }

  void backward(const Tensor& loss);
  void clear();

 private:
  std::vector<TapeNode> nodes_;
  bool recording_ = true;
};

struct NoGradGuard {
  NoGradGuard() : prev_(Tape::active().recording()) {
    Tape::active().set_recording(false);
  }
  ~NoGradGuard() { Tape::active().set_recording(prev_); }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

void backward(const Tensor& loss);

}  // namespace spectr
