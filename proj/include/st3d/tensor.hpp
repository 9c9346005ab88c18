#pragma once

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <functional>
#include <memory>
#include <utility>
#include <vector>

#include "st3d/common.hpp"

namespace st3d {

// Dense 5-D shape in (batch, channel, time, height, width) order.
struct Shape5 {
  i64 n = 0, c = 0, t = 0, h = 0, w = 0;

  i64 numel() const { return n * c * t * h * w; }
  bool operator==(const Shape5&) const = default;

  std::string str() const {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "(%lld,%lld,%lld,%lld,%lld)",
                  static_cast<long long>(n), static_cast<long long>(c),
                  static_cast<long long>(t), static_cast<long long>(h),
                  static_cast<long long>(w));
    return buf;
  }
};

// Dense float32 tensor, row-major (n,c,t,h,w). Copies are cheap handles that
// share the underlying value and gradient buffers, so a parameter registry, a
// layer and a tape closure all observe the same state; clone() deep-copies.
// The gradient buffer exists iff requires_grad has been enabled.
class Tensor {
 public:
  Tensor() = default;

  explicit Tensor(Shape5 shape, bool requires_grad = false) : shape_(shape) {
    data_ = std::make_shared<std::vector<float>>(
        static_cast<size_t>(shape.numel()), 0.0f);
    grad_ = std::make_shared<GradState>();
    if (requires_grad) set_requires_grad(true);
  }

  static Tensor full(Shape5 shape, float value) {
    Tensor t(shape);
    std::fill(t.data_->begin(), t.data_->end(), value);
    return t;
  }

  static Tensor from_vector(Shape5 shape, std::vector<float> values) {
    check(static_cast<i64>(values.size()) == shape.numel(),
          "Tensor::from_vector: value count " + std::to_string(values.size()) +
              " does not match shape " + shape.str());
    Tensor t;
    t.shape_ = shape;
    t.data_ = std::make_shared<std::vector<float>>(std::move(values));
    t.grad_ = std::make_shared<GradState>();
    return t;
  }

  const Shape5& shape() const { return shape_; }
  i64 numel() const { return shape_.numel(); }
  bool defined() const { return data_ != nullptr; }

  float* data() const {
    check(data_ != nullptr, "Tensor: storage not materialized");
    return data_->data();
  }

  float& at(i64 n, i64 c, i64 t, i64 h, i64 w) const {
    return data()[index(n, c, t, h, w)];
  }

  i64 index(i64 n, i64 c, i64 t, i64 h, i64 w) const {
    return (((n * shape_.c + c) * shape_.t + t) * shape_.h + h) * shape_.w + w;
  }

  bool requires_grad() const { return grad_ && grad_->tracked; }

  void set_requires_grad(bool on) const {
    check(grad_ != nullptr, "Tensor: undefined tensor cannot track gradients");
    grad_->tracked = on;
    if (on && grad_->buffer.empty()) {
      grad_->buffer.assign(static_cast<size_t>(shape_.numel()), 0.0f);
    }
  }

  bool has_grad() const { return grad_ && !grad_->buffer.empty(); }

  float* grad() const {
    check(has_grad(), "Tensor: gradient buffer not allocated");
    return grad_->buffer.data();
  }

  void zero_grad() const {
    if (grad_) std::fill(grad_->buffer.begin(), grad_->buffer.end(), 0.0f);
  }

  Tensor clone() const {
    Tensor t;
    t.shape_ = shape_;
    if (data_) t.data_ = std::make_shared<std::vector<float>>(*data_);
    t.grad_ = std::make_shared<GradState>();
    if (requires_grad()) t.set_requires_grad(true);
    return t;
  }

  // true when both handles share one data buffer
  bool shares_data(const Tensor& other) const { return data_ == other.data_; }

 private:
  struct GradState {
    std::vector<float> buffer;
    bool tracked = false;
  };

  Shape5 shape_;
  std::shared_ptr<std::vector<float>> data_;
  std::shared_ptr<GradState> grad_;
};

// Reverse-mode tape. Operations append their backward rule in execution
// order; backward() replays them in exact reverse order, so every rule sees
// the fully accumulated gradient of its output.
class Tape {
 public:
  void record(std::function<void()> backward_rule) {
    ops_.push_back(std::move(backward_rule));
  }

  i64 size() const { return static_cast<i64>(ops_.size()); }
  void clear() { ops_.clear(); }

  void replay_reverse() const {
    for (auto it = ops_.rbegin(); it != ops_.rend(); ++it) (*it)();
  }

 private:
  std::vector<std::function<void()>> ops_;
};

// Seeds d(loss)/d(loss) = 1 and propagates through the tape. Gradients
// accumulate additively into every tracked tensor reachable from the loss;
// callers zero gradients between steps. One backward per recorded forward.
inline void backward(Tape& tape, const Tensor& loss) {
  check(loss.numel() == 1,
        "backward: loss must be a scalar, got shape " + loss.shape().str());
  check(loss.requires_grad() && loss.has_grad(),
        "backward: loss does not track gradients");
  loss.grad()[0] = 1.0f;
  tape.replay_reverse();
}

inline void zero_grads(const std::vector<Tensor>& tensors) {
  for (const Tensor& t : tensors) t.zero_grad();
}

}  // namespace st3d
