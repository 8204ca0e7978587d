#include "kepil/numerics/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "kepil/errors.hpp"

namespace kepil::num {

double relative_error(double analytic, double numeric) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), 1e-8});
    return std::abs(analytic - numeric) / denom;
}

static double eval_loss(const LossBuilder& build) {
    Graph g(GradMode::Off);
    Var loss = build(g);
    if (loss.value().size() != 1) throw ShapeError("grad_check: loss must be a scalar");
    return loss.value().item();
}

GradReport numeric_gradients(const LossBuilder& build, ParamStore& params, double eps) {
    if (!(eps > 0.0)) throw DomainError("grad_check: eps must be positive");
    GradReport report;
    for (auto& p : params) {
        if (!p->trainable) continue;
        Tensor grad(p->value.shape());
        for (std::size_t i = 0; i < p->value.size(); ++i) {
            const double saved = p->value[i];
            auto at = [&](double offset) {
                p->value[i] = saved + offset;
                return eval_loss(build);
            };
            // five-point stencil: O(eps^4) truncation, so eps can stay large
            // enough that rounding does not swamp small gradients
            const double up1 = at(eps), down1 = at(-eps), up2 = at(2 * eps), down2 = at(-2 * eps);
            p->value[i] = saved;
            grad[i] = (8.0 * (up1 - down1) - (up2 - down2)) / (12.0 * eps);
        }
        report.grads.emplace(p->name, std::move(grad));
    }
    return report;
}

GradReport grad_check(const LossBuilder& build, ParamStore& params, double eps) {
    GradReport analytic;
    {
        Graph g;
        Var loss = build(g);
        analytic = g.backward(loss);
    }
    GradReport numeric = numeric_gradients(build, params, eps);
    double worst = 0.0;
    for (const auto& [name, num_grad] : numeric.grads) {
        const Tensor* a = analytic.find(name);
        for (std::size_t i = 0; i < num_grad.size(); ++i) {
            const double av = a ? (*a)[i] : 0.0;  // unreachable parameter: analytic zero
            worst = std::max(worst, relative_error(av, num_grad[i]));
        }
    }
    analytic.max_rel_error = worst;
    return analytic;
}

} // namespace kepil::num
