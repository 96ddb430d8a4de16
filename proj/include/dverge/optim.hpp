#pragma once

#include <map>
#include <string>

#include "dverge/tensor.hpp"

DVERGE_NAMESPACE_BEGIN

using ParamMap = std::map<std::string, Tensor>;

struct SgdConfig {
    Scalar lr = Scalar(0.05);
    Scalar momentum = Scalar(0.9);
    Scalar weight_decay = Scalar(1e-4);
};

/// One SGD step with heavy-ball momentum and L2 weight decay:
///   v <- momentum * v + grad + weight_decay * param
///   param <- param - lr * v
/// Velocity entries are created on first use. Every parameter needs a
/// gradient; a missing key throws std::invalid_argument.
void sgd_step(ParamMap& params, const ParamMap& grads, const SgdConfig& config, ParamMap& velocity);

DVERGE_NAMESPACE_END
