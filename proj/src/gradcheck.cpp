#include "ptse/gradcheck.hpp"

#include <algorithm>
#include <cmath>

#include "ptse/errors.hpp"
#include "ptse/ops.hpp"
#include "ptse/rng.hpp"

namespace ptse {

double relative_error(double analytic, double numeric, double floor) {
    const double denom = std::max({std::abs(analytic), std::abs(numeric), floor});
    return std::abs(analytic - numeric) / denom;
}

Tensor random_tensor(Shape shape, std::uint64_t seed, bool requires_grad) {
    Rng rng(seed);
    Buffer data(shape_numel(shape));
    for (auto& v : data) v = rng.uniform(-1.0, 1.0);
    return Tensor(std::move(shape), std::move(data), requires_grad);
}

Tensor random_projection(Tape& tape, const Tensor& out, std::uint64_t seed) {
    Rng rng(seed ^ 0x9E3779B97F4A7C15ull);
    Buffer w(out.numel());
    for (auto& v : w) v = rng.uniform(-1.0, 1.0);
    return weighted_sum(tape, out, w);
}

GradCheckResult gradient_check(const std::string& name, const ScalarFunction& fn,
                               std::vector<Tensor> inputs, std::uint64_t seed,
                               const GradCheckOptions& options) {
    std::vector<std::size_t> candidates;
    std::size_t total = 0;
    for (std::size_t i = 0; i < inputs.size(); ++i) {
        if (inputs[i].requires_grad()) {
            candidates.push_back(i);
            total += inputs[i].numel();
        }
    }
    if (total == 0) throw ContractError("gradient_check '" + name + "': no input requires a gradient");

    for (auto& t : inputs) t.zero_grad();
    {
        Tape tape;
        auto loss = fn(tape, inputs);
        tape.backward(loss);
    }

    auto evaluate = [&] {
        Tape tape;
        return fn(tape, inputs).item();
    };

    GradCheckResult result{name, 0.0, options.probes, true};
    Rng rng(seed);
    for (std::size_t p = 0; p < options.probes; ++p) {
        // Uniform over all coordinates of all differentiable inputs.
        auto pick = static_cast<std::size_t>(rng.uniform_int(0, static_cast<std::int64_t>(total) - 1));
        std::size_t which = 0;
        for (auto c : candidates) {
            if (pick < inputs[c].numel()) {
                which = c;
                break;
            }
            pick -= inputs[c].numel();
        }
        Tensor& t = inputs[which];
        const double analytic = t.has_grad() ? t.grad()[pick] : 0.0;
        auto data = t.mutable_data();
        const double saved = data[pick];
        data[pick] = saved + options.step;
        const double up = evaluate();
        data[pick] = saved - options.step;
        const double down = evaluate();
        data[pick] = saved;
        const double numeric = (up - down) / (2.0 * options.step);
        result.worst_relative_error =
            std::max(result.worst_relative_error, relative_error(analytic, numeric, options.floor));
    }
    result.passed = result.worst_relative_error < options.tolerance;
    return result;
}

}  // namespace ptse
