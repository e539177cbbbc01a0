#pragma once

#include <functional>
#include <vector>

#include "spottunet/core/ops.hpp"
#include "spottunet/core/rng.hpp"

namespace testutil {

using spottunet::Rng;
using spottunet::Tensor;

inline Tensor<double> random_tensor(std::vector<int> shape, Rng& rng, double lo = -1.0,
                                    double hi = 1.0) {
    Tensor<double> t(std::move(shape));
    for (std::int64_t i = 0; i < t.numel(); ++i) t[i] = rng.uniform(lo, hi);
    return t;
}

template <typename T>
Tensor<T> cast_tensor(const Tensor<double>& x) {
    Tensor<T> y(x.shape());
    for (std::int64_t i = 0; i < x.numel(); ++i) y[i] = static_cast<T>(x[i]);
    return y;
}

/// Central finite-difference check of a scalar-valued graph against the
/// tape's analytic gradients, element by element, in double precision.
///
/// `build` receives the tape plus one leaf var per input tensor (all marked
/// trainable) and must return the scalar loss var.
struct GradCheckResult {
    double max_rel_err = 0.0;
    int checked = 0;
};

inline GradCheckResult grad_check(
    const std::function<spottunet::ad::Var<double>(spottunet::ad::Tape<double>&,
                                                   std::vector<spottunet::ad::Var<double>>&)>& build,
    std::vector<Tensor<double>> inputs, double step = 1e-5, double floor = 1e-6) {
    using spottunet::ad::Tape;
    using spottunet::ad::Var;

    auto eval = [&](const std::vector<Tensor<double>>& xs) {
        Tape<double> tape;
        std::vector<Var<double>> vars;
        for (const auto& x : xs) vars.push_back(tape.leaf(x, false));
        return build(tape, vars).value()[0];
    };

    Tape<double> tape;
    std::vector<Var<double>> vars;
    for (const auto& x : inputs) vars.push_back(tape.leaf(x, true));
    Var<double> loss = build(tape, vars);
    tape.backward(loss, /*free_memory=*/false);

    GradCheckResult res;
    for (std::size_t vi = 0; vi < inputs.size(); ++vi) {
        const Tensor<double>& analytic = tape.grad_of(vars[vi]).empty()
                                             ? Tensor<double>(inputs[vi].shape())
                                             : tape.grad_of(vars[vi]);
        for (std::int64_t i = 0; i < inputs[vi].numel(); ++i) {
            std::vector<Tensor<double>> xs = inputs;
            double orig = xs[vi][i];
            xs[vi][i] = orig + step;
            double up = eval(xs);
            xs[vi][i] = orig - step;
            double dn = eval(xs);
            double fd = (up - dn) / (2.0 * step);
            double a = analytic[i];
            double rel = std::abs(a - fd) / std::max({std::abs(a), std::abs(fd), floor});
            res.max_rel_err = std::max(res.max_rel_err, rel);
            ++res.checked;
        }
    }
    return res;
}

}  // namespace testutil
