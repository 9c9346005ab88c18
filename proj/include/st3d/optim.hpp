#pragma once

#include <cmath>
#include <limits>
#include <map>
#include <string>
#include <utility>
#include <vector>

#include "st3d/tensor.hpp"

namespace st3d {

// SGD with momentum and coupled weight decay, applied uniformly to every
// trainable parameter (batch-norm affine included):
//   g' = g + wd * w;  v = momentum * v + g';  w = w - lr * v
struct OptimizerState {
  float lr = 0.1f;
  float momentum = 0.9f;
  float weight_decay = 0.0f;
  std::map<std::string, std::vector<float>> velocity;
};

inline void sgd_step(const std::vector<std::pair<std::string, Tensor>>& params,
                     OptimizerState& opt) {
  for (const auto& [name, t] : params) {
    if (!t.requires_grad()) continue;
    check(t.has_grad(), "sgd_step: trainable parameter '" + name +
                            "' has no gradient");
    auto& v = opt.velocity[name];
    if (v.empty()) v.assign(static_cast<size_t>(t.numel()), 0.0f);
    check(static_cast<i64>(v.size()) == t.numel(),
          "sgd_step: velocity shape mismatch for '" + name + "'");
    float* w = t.data();
    const float* g = t.grad();
    for (i64 i = 0; i < t.numel(); ++i) {
      const float gp = g[i] + opt.weight_decay * w[i];
      v[static_cast<size_t>(i)] = opt.momentum * v[static_cast<size_t>(i)] + gp;
      w[i] -= opt.lr * v[static_cast<size_t>(i)];
    }
  }
}

// Divides the rate by `factor` once the monitored loss has gone `patience`
// epochs without improving by more than min_delta.
struct PlateauSchedule {
  float lr = 0.1f;
  float factor = 0.1f;
  i64 patience = 10;
  float min_delta = 1e-3f;
  float best_loss = std::numeric_limits<float>::infinity();
  i64 epochs_since_improve = 0;

  float step(float val_loss) {
    check(!std::isnan(val_loss), "plateau: loss is NaN, training diverged");
    if (val_loss < best_loss - min_delta) {
      best_loss = val_loss;
      epochs_since_improve = 0;
    } else {
      ++epochs_since_improve;
      if (epochs_since_improve >= patience) {
        lr *= factor;
        epochs_since_improve = 0;
      }
    }
    return lr;
  }
};

}  // namespace st3d
