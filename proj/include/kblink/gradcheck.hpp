#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "kblink/params.hpp"
#include "kblink/rng.hpp"
#include "kblink/tensor.hpp"

namespace kblink {

struct GradCheckReport {
    double max_rel_error = 0.0;
    std::string worst_param;
    std::size_t worst_coord = 0;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    std::size_t coords_checked = 0;
};

// Verifies analytic gradients against central finite differences.
//
// `loss_fn(want_grad)` must evaluate the loss from the current parameter
// values; when `want_grad` is true it must also run the backward pass so that
// parameter grads are populated. The function perturbs sampled coordinates
// one at a time by +/- step and compares (f+ - f-)/(2*step) against the
// analytic gradient, with relative error measured against
// max(|analytic|, |numeric|, floor).
//
// The floor turns the threshold into a mixed tolerance: coordinates whose
// gradient magnitude sits below the floor are held to an absolute error of
// threshold*floor instead of a pure ratio, which is what central differences
// in 64-bit floats can actually resolve once truncation noise (~step^2 times
// curvature) is taken into account.
inline GradCheckReport finite_diff_check(const std::function<double(bool)>& loss_fn,
                                         ParameterStore& store,
                                         std::uint64_t seed,
                                         std::size_t coords_per_param = 64,
                                         double step = 1e-5,
                                         double floor = 1e-4) {
    store.zero_grads();
    loss_fn(true);

    // Snapshot analytic grads before the perturbation loop touches anything.
    std::map<std::string, std::vector<double>> analytic;
    for (auto& [name, t] : store) analytic[name] = t.grad();

    GradCheckReport report;
    Rng rng(seed);
    for (auto& [name, t] : store) {
        const std::size_t n = t.numel();
        std::vector<std::size_t> coords;
        if (n <= coords_per_param) {
            coords.resize(n);
            for (std::size_t i = 0; i < n; ++i) coords[i] = i;
        } else {
            coords = rng.sample_indices(n, coords_per_param);
        }
        for (auto c : coords) {
            auto& vals = t.mutable_values();
            const double orig = vals[c];
            vals[c] = orig + step;
            const double f_plus = loss_fn(false);
            vals[c] = orig - step;
            const double f_minus = loss_fn(false);
            vals[c] = orig;
            const double numeric = (f_plus - f_minus) / (2.0 * step);
            const double a = analytic[name][c];
            const double denom = std::max({std::abs(a), std::abs(numeric), floor});
            const double rel = std::abs(a - numeric) / denom;
            ++report.coords_checked;
            if (rel > report.max_rel_error) {
                report.max_rel_error = rel;
                report.worst_param = name;
                report.worst_coord = c;
                report.worst_analytic = a;
                report.worst_numeric = numeric;
            }
        }
    }
    return report;
}

}  // namespace kblink
