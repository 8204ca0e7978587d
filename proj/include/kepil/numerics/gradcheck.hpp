#pragma once

#include <functional>

#include "kepil/numerics/graph.hpp"

namespace kepil::num {

// Builds a scalar loss over the parameters bound into the given graph. Must be
// deterministic (any dropout seeds fixed by the caller).
using LossBuilder = std::function<Var(Graph&)>;

// Relative error used throughout: |a - n| / max(|a|, |n|, 1e-8).
double relative_error(double analytic, double numeric);

// Five-point central differences for every entry of every trainable parameter.
GradReport numeric_gradients(const LossBuilder& build, ParamStore& params, double eps = 1e-4);

// Compares backward() against central differences. The returned report holds
// the analytic gradients and the max relative error over all entries.
GradReport grad_check(const LossBuilder& build, ParamStore& params, double eps = 1e-4);

} // namespace kepil::num
