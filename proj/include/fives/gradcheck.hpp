#pragma once

#include <algorithm>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "fives/autodiff.hpp"
#include "fives/rng.hpp"

namespace fives::ad {

struct FiniteDiffGroup {
    std::string name;
    std::size_t checked = 0;
    std::size_t worst_index = 0;
    double worst_rel_err = 0.0;
    double g_ad = 0.0;
    double g_fd = 0.0;
};

struct FiniteDiffReport {
    double max_rel_err = 0.0;
    std::size_t n_checked = 0;
    std::vector<FiniteDiffGroup> groups;
};

// Central-difference check of reverse-mode gradients.
//
// `grad_fn` must zero and then populate params' gradients (one backward
// pass); `loss_fn` must evaluate the same deterministic loss without
// touching gradients. All coordinates are checked when the store holds
// at most `min_coords`; otherwise a seeded subsample of at least
// `min_coords`, spread across parameter groups, is used.
inline FiniteDiffReport finite_diff_check(const std::function<double(ParamStore&)>& loss_fn,
                                          const std::function<void(ParamStore&)>& grad_fn,
                                          ParamStore& params, double h,
                                          std::size_t min_coords = 200,
                                          std::uint64_t seed = 0) {
    if (h < 1e-7 || h > 1e-3) throw DomainError("finite_diff_check: h out of [1e-7, 1e-3]");

    grad_fn(params);

    FiniteDiffReport report;
    Rng rng(seed);
    const std::size_t total = params.coordinate_count();
    const bool check_all = total <= min_coords;

    for (std::size_t gi = 0; gi < params.size(); ++gi) {
        auto& e = params.entry(gi);
        FiniteDiffGroup group;
        group.name = e.name;

        std::vector<std::size_t> coords;
        if (check_all || e.value.size() <= 4) {
            coords.resize(e.value.size());
            for (std::size_t k = 0; k < coords.size(); ++k) coords[k] = k;
        } else {
            // proportional share, at least a handful per group
            std::size_t want = std::max<std::size_t>(
                4, (min_coords * e.value.size() + total - 1) / total);
            want = std::min(want, e.value.size());
            std::vector<std::size_t> all(e.value.size());
            for (std::size_t k = 0; k < all.size(); ++k) all[k] = k;
            rng.shuffle(all);
            coords.assign(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(want));
            std::sort(coords.begin(), coords.end());
        }

        for (std::size_t k : coords) {
            const double saved = e.value[k];
            e.value[k] = saved + h;
            const double up = loss_fn(params);
            e.value[k] = saved - h;
            const double down = loss_fn(params);
            e.value[k] = saved;
            const double fd = (up - down) / (2.0 * h);
            const double adg = e.grad[k];
            const double rel =
                std::abs(adg - fd) / std::max({std::abs(adg), std::abs(fd), 1e-8});
            ++group.checked;
            ++report.n_checked;
            if (rel >= group.worst_rel_err) {
                group.worst_rel_err = rel;
                group.worst_index = k;
                group.g_ad = adg;
                group.g_fd = fd;
            }
            report.max_rel_err = std::max(report.max_rel_err, rel);
        }
        report.groups.push_back(std::move(group));
    }
    return report;
}

}  // namespace fives::ad
