#pragma once

// Named parameter registry and the two stateful layer wrappers (convolution,
// batch norm). Layers register their tensors under hierarchical dotted names;
// the optimizer and checkpoint code iterate the registry, so construction
// order fixes both the update order and the weight file layout.

#include <cstdint>
#include <string>
#include <unordered_map>
#include <vector>

#include "phenocd/common.hpp"
#include "phenocd/nn_ops.hpp"

namespace phenocd::nn {

template <typename T>
struct Param {
    std::string name;
    NodePtr<T> node;
    bool trainable = true;  // running stats are registered non-trainable
};

template <typename T>
class ParamRegistry {
  public:
    NodePtr<T> add(const std::string& name, Tensor<T> init, bool trainable = true) {
        if (index_.count(name)) throw ConfigError("duplicate parameter name: " + name);
        auto node = make_leaf(std::move(init), trainable);
        index_[name] = params_.size();
        params_.push_back({name, node, trainable});
        return node;
    }

    const std::vector<Param<T>>& params() const { return params_; }

    NodePtr<T> find(const std::string& name) const {
        auto it = index_.find(name);
        return it == index_.end() ? nullptr : params_[it->second].node;
    }

    int64_t trainable_count() const {
        int64_t n = 0;
        for (const auto& p : params_)
            if (p.trainable) n += p.node->value.numel();
        return n;
    }

    void zero_grads() {
        for (auto& p : params_)
            if (p.trainable) p.node->zero_grad();
    }

    // Marks parameters under a name prefix as having a (zero) gradient for
    // this step. Used when a loss component is legitimately inactive, e.g. an
    // empty contrastive batch, so the optimizer's missing-gradient check
    // stays meaningful everywhere else.
    void mark_ready_zero(const std::string& prefix) {
        for (auto& p : params_) {
            if (!p.trainable) continue;
            if (p.name.rfind(prefix, 0) == 0) {
                p.node->ensure_grad();
                p.node->grad_ready = true;
            }
        }
    }

  private:
    std::vector<Param<T>> params_;
    std::unordered_map<std::string, size_t> index_;
};

// He-normal initialization for layers followed by ReLU.
template <typename T>
Tensor<T> he_normal(Rng& rng, const std::vector<int>& shape, int64_t fan_in) {
    Tensor<T> t = Tensor<T>::zeros(shape);
    double std = std::sqrt(2.0 / static_cast<double>(fan_in));
    for (auto& v : t.data) v = static_cast<T>(rng.normal() * std);
    return t;
}

template <typename T>
struct Conv2d {
    NodePtr<T> weight;
    NodePtr<T> bias;  // null when the layer feeds a batch norm
    int stride = 1;
    int pad = 0;

    Conv2d() = default;
    Conv2d(ParamRegistry<T>& reg, Rng& rng, const std::string& name, int cin, int cout, int k,
           int stride_, int pad_, bool with_bias = true)
        : stride(stride_), pad(pad_) {
        int64_t fan_in = static_cast<int64_t>(cin) * k * k;
        weight = reg.add(name + ".weight", he_normal<T>(rng, {cout, cin, k, k}, fan_in));
        if (with_bias) bias = reg.add(name + ".bias", Tensor<T>::zeros({cout}));
    }

    NodePtr<T> operator()(const NodePtr<T>& x) const { return conv2d(x, weight, bias, stride, pad); }
};

template <typename T>
struct BatchNorm2d {
    NodePtr<T> gamma, beta, run_mean, run_var;
    T momentum = T(0.1);
    T eps = T(1e-5);

    BatchNorm2d() = default;
    BatchNorm2d(ParamRegistry<T>& reg, const std::string& name, int c) {
        gamma = reg.add(name + ".gamma", Tensor<T>::full({c}, T(1)));
        beta = reg.add(name + ".beta", Tensor<T>::zeros({c}));
        run_mean = reg.add(name + ".running_mean", Tensor<T>::zeros({c}), false);
        run_var = reg.add(name + ".running_var", Tensor<T>::full({c}, T(1)), false);
    }

    NodePtr<T> operator()(const NodePtr<T>& x, bool training) const {
        return batch_norm2d(x, gamma, beta, run_mean, run_var, training, momentum, eps);
    }
};

}  // namespace phenocd::nn
