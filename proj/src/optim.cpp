#include "uqseg/optim.hpp"

#include <cmath>
#include <stdexcept>

namespace uqseg {

AdamState make_adam_state(const std::vector<const Tensor*>& params, AdamConfig config)
{
    AdamState s;
    s.config = config;
    for (const Tensor* p : params) {
        s.first_moment.emplace_back(p->shape());
        s.second_moment.emplace_back(p->shape());
    }
    return s;
}

void adam_step(std::span<Tensor* const> params, std::span<const Tensor> grads, AdamState& state)
{
    if (params.size() != grads.size() || params.size() != state.first_moment.size())
        throw std::invalid_argument("adam_step: parameter, gradient and moment counts differ");
    const AdamConfig& c = state.config;
    ++state.step_count;
    const double t = static_cast<double>(state.step_count);
    const double correction1 = 1.0 - std::pow(c.beta1, t);
    const double correction2 = 1.0 - std::pow(c.beta2, t);
    for (std::size_t k = 0; k < params.size(); ++k) {
        Tensor& p = *params[k];
        const Tensor& g = grads[k];
        Tensor& m = state.first_moment[k];
        Tensor& v = state.second_moment[k];
        require_same_shape(p, g, "adam_step");
        require_same_shape(p, m, "adam_step moments");
        for (std::size_t i = 0; i < p.size(); ++i) {
            m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
            v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
            const double m_hat = m[i] / correction1;
            const double v_hat = v[i] / correction2;
            p[i] -= c.lr * m_hat / (std::sqrt(v_hat) + c.eps);
        }
    }
}

} // namespace uqseg
