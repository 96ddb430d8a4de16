#include "dverge/optim.hpp"

#include <stdexcept>

DVERGE_NAMESPACE_BEGIN

void sgd_step(ParamMap& params, const ParamMap& grads, const SgdConfig& config, ParamMap& velocity) {
    for (const auto& [name, param] : params) {
        auto g = grads.find(name);
        if (g == grads.end()) throw std::invalid_argument("sgd_step: no gradient for parameter '" + name + "'");
        if (g->second.shape() != param.shape()) {
            throw std::invalid_argument("sgd_step: gradient shape mismatch for '" + name + "'");
        }
    }
    for (auto& [name, param] : params) {
        const Tensor& grad = grads.at(name);
        auto [it, inserted] = velocity.try_emplace(name, param.shape());
        Tensor& v = it->second;
        for (std::size_t i = 0; i < param.size(); ++i) {
            v[i] = config.momentum * v[i] + grad[i] + config.weight_decay * param[i];
            param[i] -= config.lr * v[i];
        }
    }
}

DVERGE_NAMESPACE_END
