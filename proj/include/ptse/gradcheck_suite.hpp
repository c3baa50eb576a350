#pragma once

#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "ptse/gradcheck.hpp"

namespace ptse {

struct GradCheckCase {
    std::string module;
    std::string name;
    std::function<GradCheckResult(std::uint64_t seed, const GradCheckOptions&)> run;
};

/// One entry per differentiable operation, each on small random inputs.
std::vector<GradCheckCase> gradcheck_cases();

struct GradCheckReport {
    std::vector<std::pair<std::string, GradCheckResult>> results;  ///< (module, result)
    double seconds = 0.0;

    bool passed() const;
    /// One line per op: module, name, worst relative error, PASS/FAIL.
    std::string table() const;
};

GradCheckReport run_gradcheck_suite(std::uint64_t seed, const GradCheckOptions& options = {});

}  // namespace ptse
