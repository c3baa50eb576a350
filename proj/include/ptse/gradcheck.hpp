#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "ptse/tensor.hpp"

namespace ptse {

struct GradCheckOptions {
    std::size_t probes = 10;
    double step = 1e-5;
    double tolerance = 1e-4;
    /// Denominator floor for the relative error, so that entries whose true
    /// gradient is ~0 are compared on an absolute scale.
    double floor = 1e-6;
};

struct GradCheckResult {
    std::string name;
    double worst_relative_error = 0.0;
    std::size_t probes = 0;
    bool passed = false;
};

using ScalarFunction = std::function<Tensor(Tape&, std::span<const Tensor>)>;

/// |analytic - numeric| / max(|analytic|, |numeric|, floor).
double relative_error(double analytic, double numeric, double floor);

/// Compares the tape gradient of fn against central differences at randomly
/// chosen coordinates of the inputs that require gradients.
GradCheckResult gradient_check(const std::string& name, const ScalarFunction& fn,
                               std::vector<Tensor> inputs, std::uint64_t seed,
                               const GradCheckOptions& options = {});

/// Random [rows x cols] tensor with entries in [-1, 1).
Tensor random_tensor(Shape shape, std::uint64_t seed, bool requires_grad = true);

/// Scalar reduction sum(out .* R) for a fixed pseudo-random R, giving every
/// output element a distinct weight in the probed loss.
Tensor random_projection(Tape& tape, const Tensor& out, std::uint64_t seed);

}  // namespace ptse
