#pragma once

#include <cmath>
#include <functional>
#include <string>

#include "semi/autodiff.hpp"
#include "semi/errors.hpp"
#include "semi/matrix.hpp"

namespace semi {

struct FiniteDiffReport {
    double max_rel_error = 0.0;
    std::string worst_slot;
    int worst_index = -1;
};

// Central-difference gradient check. `loss_fn` evaluates the scalar loss for a
// parameter assignment; `analytic` holds the gradient under test. Relative
// error per coordinate is |g_fd - g| / max(1, |g_fd|, |g|).
inline FiniteDiffReport finite_diff_check(const std::function<double(const ParamMap&)>& loss_fn,
                                          const ParamMap& params,
                                          const ParamMap& analytic,
                                          double epsilon) {
    if (!(epsilon >= 1e-7 && epsilon <= 1e-3))
        throw InputError("finite_diff_check: epsilon must lie in [1e-7, 1e-3]");
    FiniteDiffReport report;
    ParamMap probe = params;
    for (const auto& [name, p] : params) {
        auto it = analytic.find(name);
        if (it == analytic.end() || !it->second.same_shape(p))
            throw InputError("finite_diff_check: analytic gradient missing or misshaped for " + name);
        DenseMatrix& slot = probe[name];
        for (std::size_t i = 0; i < p.size(); ++i) {
            const double saved = slot.data[i];
            slot.data[i] = saved + epsilon;
            const double up = loss_fn(probe);
            slot.data[i] = saved - epsilon;
            const double down = loss_fn(probe);
            slot.data[i] = saved;
            if (!std::isfinite(up) || !std::isfinite(down))
                throw NumericError("finite_diff_check: non-finite loss at slot " + name);
            const double g_fd = (up - down) / (2.0 * epsilon);
            const double g = it->second.data[i];
            const double rel = std::abs(g_fd - g) /
                               std::max({1.0, std::abs(g_fd), std::abs(g)});
            if (rel > report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst_slot = name;
                report.worst_index = static_cast<int>(i);
            }
        }
    }
    return report;
}

} // namespace semi
