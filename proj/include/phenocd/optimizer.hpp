#pragma once

// SGD with classical momentum and decoupled-from-nothing weight decay folded
// into the gradient (the common torch.optim.SGD formulation):
//   g' = g + wd * w;  v = mu * v + g';  w = w - lr * v

#include <string>
#include <vector>

#include "phenocd/layers.hpp"

namespace phenocd::nn {

template <typename T>
class SgdMomentum {
  public:
    SgdMomentum(ParamRegistry<T>& reg, T lr, T momentum, T weight_decay)
        : reg_(&reg), lr_(lr), momentum_(momentum), weight_decay_(weight_decay) {
        for (const auto& p : reg.params())
            velocity_.push_back(p.trainable ? Tensor<T>::zeros(p.node->value.shape) : Tensor<T>{});
    }

    T lr() const { return lr_; }
    void set_lr(T lr) { lr_ = lr; }

    // Applies one update. Every trainable parameter must carry a gradient
    // produced (or explicitly zero-marked) since the last zero_grads();
    // anything else indicates a wiring bug, so it is an error, not a skip.
    void step() {
        const auto& params = reg_->params();
        for (size_t i = 0; i < params.size(); ++i) {
            const auto& p = params[i];
            if (!p.trainable) continue;
            auto& node = *p.node;
            if (!node.grad_ready)
                throw NumericError("sgd step: no gradient for parameter '" + p.name +
                                   "'; the parameter did not participate in the loss");
            auto& v = velocity_[i];
            for (int64_t j = 0; j < node.value.numel(); ++j) {
                T g = node.grad.data[j] + weight_decay_ * node.value.data[j];
                v.data[j] = momentum_ * v.data[j] + g;
                node.value.data[j] -= lr_ * v.data[j];
            }
        }
        reg_->zero_grads();
    }

  private:
    ParamRegistry<T>* reg_;
    T lr_, momentum_, weight_decay_;
    std::vector<Tensor<T>> velocity_;
};

}  // namespace phenocd::nn
