#include "spectr/tensor.hpp"

#include <cmath>
#include <cstring>
#include <string>

namespace spectr {

size_t shape_numel(const std::vector<int>& shape) {
  size_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw ShapeError("tensor dimension must be positive, got " + std::to_string(d));
    n *= static_cast<size_t>(d);
  }
  return n;
}

Tensor::Tensor(std::vector<int> shape, float fill) {
  size_t n = shape_numel(shape);
  st_ = std::make_shared<Storage>();
  st_->v.assign(n, fill);
  shape_ = std::move(shape);
}

Tensor Tensor::from(std::vector<int> shape, std::vector<float> values) {
  size_t n = shape_numel(shape);
  if (n != values.size())
    throw ShapeError("value count " + std::to_string(values.size()) +
                     " does not match shape product " + std::to_string(n));
  Tensor t;
  t.st_ = std::make_shared<Storage>();
  t.st_->v = std::move(values);
  t.shape_ = std::move(shape);
  return t;
}

Tensor Tensor::scalar(float v) { return from({1}, {v}); }

float* Tensor::grad() {
  if (st_->g.size() != st_->v.size()) st_->g.assign(st_->v.size(), 0.0f);
  return st_->g.data();
}

void Tensor::zero_grad() {
  if (st_ && !st_->g.empty()) std::memset(st_->g.data(), 0, st_->g.size() * sizeof(float));
}

Tensor& Tensor::set_requires_grad(bool b) {
  st_->requires_grad = b;
  st_->leaf = b;
  return *this;
}

float Tensor::item() const {
  if (size() != 1) throw ContractError("item() requires a scalar tensor");
  return st_->v[0];
}

Tensor Tensor::reshape(std::vector<int> shape) const {
  if (shape_numel(shape) != size())
    throw ShapeError("reshape changes element count");
  Tensor t;
  t.st_ = st_;
  t.shape_ = std::move(shape);
  return t;
}

Tensor Tensor::clone() const {
  Tensor t;
  t.st_ = std::make_shared<Storage>();
  t.st_->v = st_->v;
  t.shape_ = shape_;
  return t;
}

void Tensor::check_finite(const char* what) const {
  for (float x : st_->v) {
    if (!std::isfinite(x))
      throw NumericError(std::string(what) + ": non-finite value encountered");
  }
}

Tape& Tape::active() {
  static Tape tape;
  return tape;
}

void Tape::record(std::vector<std::shared_ptr<Tensor::Storage>> outputs,
                  std::function<void()> fn) {
  nodes_.push_back(TapeNode{std::move(fn), std::move(outputs)});
}

void Tape::backward(const Tensor& loss) {
  if (loss.size() != 1) throw ContractError("backward requires a scalar loss");
  // Scratch gradients of intermediates are reset so repeated passes over the
  // same tape stay additive in the leaves only.
  for (auto& node : nodes_) {
    for (auto& st : node.outputs) {
      if (!st->leaf) st->g.assign(st->v.size(), 0.0f);
    }
  }
  if (loss.requires_grad()) {
    auto st = loss.storage();
    if (st->g.size() != st->v.size()) st->g.assign(st->v.size(), 0.0f);
    st->g[0] += 1.0f;
  }
  for (size_t i = nodes_.size(); i-- > 0;) nodes_[i].backward();
  for (auto& node : nodes_) {
    for (auto& st : node.outputs) {
      for (float g : st->g) {
        if (!std::isfinite(g)) throw NumericError("backward produced a non-finite gradient");
      }
    }
  }
}

void Tape::clear() { nodes_.clear(); }

void backward(const Tensor& loss) { Tape::active().backward(loss); }

}  // namespace spectr
