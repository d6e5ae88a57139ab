#pragma once

#include <cmath>
#include <cstdint>
#include <optional>
#include <set>
#include <string>
#include <unordered_map>

#include "fives/autodiff.hpp"
#include "fives/errors.hpp"

namespace fives::ad {

enum class OptimRule { Sgd, Adam };

// In-place descent over a ParamStore. `subset`, when given, restricts
// the update to the named parameters; gradients of the whole store are
// zeroed after a successful step so stale gradients never leak into the
// next accumulation.
class Optimizer {
public:
    Optimizer(OptimRule rule, double lr, double weight_decay = 0.0)
        : rule_(rule), lr_(lr), weight_decay_(weight_decay) {}

    double learning_rate() const { return lr_; }

    void step(ParamStore& params, const std::optional<std::set<std::string>>& subset = {}) {
        // Validate before mutating anything.
        for (std::size_t i = 0; i < params.size(); ++i) {
            const auto& e = params.entry(i);
            if (subset && !subset->count(e.name)) continue;
            for (std::size_t k = 0; k < e.grad.size(); ++k)
                if (std::isnan(e.grad[k]))
                    throw NumericError("optimizer: NaN gradient in '" + e.name + "'");
        }
        for (std::size_t i = 0; i < params.size(); ++i) {
            auto& e = params.entry(i);
            if (subset && !subset->count(e.name)) continue;
            if (rule_ == OptimRule::Sgd)
                sgd_step(e);
            else
                adam_step(e);
        }
        params.zero_grads();
    }

private:
    struct AdamState {
        Tensor m, v;
        std::int64_t t = 0;
    };

    void sgd_step(ParamStore::Entry& e) {
        for (std::size_t k = 0; k < e.value.size(); ++k) {
            const double g = e.grad[k] + weight_decay_ * e.value[k];
            e.value[k] -= lr_ * g;
        }
    }

    void adam_step(ParamStore::Entry& e) {
        static constexpr double kBeta1 = 0.9, kBeta2 = 0.999, kEps = 1e-8;
        AdamState& s = state_[e.name];
        if (s.t == 0) {
            s.m = Tensor(e.value.shape());
            s.v = Tensor(e.value.shape());
        }
        ++s.t;
        const double c1 = 1.0 - std::pow(kBeta1, static_cast<double>(s.t));
        const double c2 = 1.0 - std::pow(kBeta2, static_cast<double>(s.t));
        for (std::size_t k = 0; k < e.value.size(); ++k) {
            const double g = e.grad[k] + weight_decay_ * e.value[k];
            s.m[k] = kBeta1 * s.m[k] + (1.0 - kBeta1) * g;
            s.v[k] = kBeta2 * s.v[k] + (1.0 - kBeta2) * g * g;
            const double mhat = s.m[k] / c1;
            const double vhat = s.v[k] / c2;
            e.value[k] -= lr_ * mhat / (std::sqrt(vhat) + kEps);
        }
    }

    OptimRule rule_;
    double lr_;
    double weight_decay_;
    std::unordered_map<std::string, AdamState> state_;
};

}  // namespace fives::ad
