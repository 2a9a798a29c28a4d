#pragma once

#include <cstdint>
#include <span>
#include <vector>

#include "uqseg/tensor.hpp"

namespace uqseg {

struct AdamConfig {
    double lr = 0.001;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
};

struct AdamState {
    AdamConfig config;
    std::int64_t step_count = 0;
    std::vector<Tensor> first_moment;
    std::vector<Tensor> second_moment;
};

AdamState make_adam_state(const std::vector<const Tensor*>& params, AdamConfig config = {});

// One bias-corrected Adam update of every parameter in place.
void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state);

} // namespace uqseg
