#pragma once

#include <functional>
#include <vector>

#include "phenokit/ops.hpp"

namespace phenokit {

// Max over coordinates of |analytic - central difference| / max(1, |analytic|).
// Multi-input form: f builds a scalar from leaves created for each input.
template <typename T>
double grad_check_multi(
    const std::function<Var<T>(Tape<T>&, const std::vector<Var<T>>&)>& f,
    const std::vector<Tensor<T>>& inputs, T h,
    const std::vector<std::pair<int, std::int64_t>>* coords = nullptr) {
    std::vector<Tensor<T>> analytic;
    {
        Tape<T> tape;
        std::vector<Var<T>> vars;
        vars.reserve(inputs.size());
        for (const auto& in : inputs) vars.push_back(make_leaf(tape, in, true, "gc_input"));
        Var<T> y = f(tape, vars);
        if (y.numel() != 1) throw InvariantError("grad_check: f must be scalar-valued");
        tape.backward(y.id);
        for (const auto& v : vars) analytic.push_back(tape.grad(v.id));
    }

    auto eval = [&](const std::vector<Tensor<T>>& xs) -> T {
        Tape<T> tape;
        std::vector<Var<T>> vars;
        vars.reserve(xs.size());
        for (const auto& in : xs) vars.push_back(make_leaf(tape, in, false, "gc_input"));
        Var<T> y = f(tape, vars);
        if (y.numel() != 1) throw InvariantError("grad_check: f must be scalar-valued");
        return y.val()[0];
    };

    double max_err = 0.0;
    auto probe = [&](int which, std::int64_t i) {
        std::vector<Tensor<T>> xs = inputs;
        const T x0 = xs[static_cast<std::size_t>(which)][i];
        xs[static_cast<std::size_t>(which)][i] = x0 + h;
        const T fp = eval(xs);
        xs[static_cast<std::size_t>(which)][i] = x0 - h;
        const T fm = eval(xs);
        const double numeric = (static_cast<double>(fp) - static_cast<double>(fm)) / (2.0 * h);
        const double a = static_cast<double>(analytic[static_cast<std::size_t>(which)][i]);
        const double err = std::abs(a - numeric) / std::max(1.0, std::abs(a));
        max_err = std::max(max_err, err);
    };

    if (coords) {
        for (const auto& [which, i] : *coords) probe(which, i);
    } else {
        for (std::size_t which = 0; which < inputs.size(); ++which)
            for (std::int64_t i = 0; i < inputs[which].numel(); ++i)
                probe(static_cast<int>(which), i);
    }
    return max_err;
}

// Single-input convenience form.
template <typename T>
double grad_check(const std::function<Var<T>(Tape<T>&, Var<T>)>& f, const Tensor<T>& x, T h) {
    return grad_check_multi<T>(
        [&f](Tape<T>& tape, const std::vector<Var<T>>& vars) { return f(tape, vars[0]); },
        {x}, h);
}

// Spot check on a random subset of coordinates across all inputs. Used where
// the full sweep would be quadratic in model size.
template <typename T>
double grad_check_sampled(
    const std::function<Var<T>(Tape<T>&, const std::vector<Var<T>>&)>& f,
    const std::vector<Tensor<T>>& inputs, T h, int n_coords, Rng& rng) {
    std::int64_t total = 0;
    for (const auto& in : inputs) total += in.numel();
    std::vector<std::pair<int, std::int64_t>> coords;
    coords.reserve(static_cast<std::size_t>(n_coords));
    for (int k = 0; k < n_coords; ++k) {
        std::int64_t flat = rng.uniform_int(total);
        int which = 0;
        while (flat >= inputs[static_cast<std::size_t>(which)].numel()) {
            flat -= inputs[static_cast<std::size_t>(which)].numel();
            ++which;
        }
        coords.emplace_back(which, flat);
    }
    return grad_check_multi<T>(f, inputs, h, &coords);
}

}  // namespace phenokit
