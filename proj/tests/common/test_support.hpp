#pragma once

// Shared fixtures for the unit tests.

#include <cmath>
#include <functional>
#include <vector>

#include "ttrx/autodiff.hpp"
#include "ttrx/rng.hpp"
#include "ttrx/synthdata.hpp"
#include "ttrx/tensor.hpp"

namespace ttrx::testing {

inline Tensor random_tensor(Shape shape, RngState& rng, double lo = -2.0, double hi = 2.0) {
    Tensor t(std::move(shape));
    for (auto& v : t.data()) v = rng.uniform(lo, hi);
    return t;
}

/// A cohort small enough for fast tests.
inline CohortConfig small_cohort(std::uint64_t seed = 11) {
    CohortConfig c;
    c.height = 32;
    c.width = 32;
    c.existing_tracts = 6;
    c.novel_tracts = 2;
    c.existing_train = 4;
    c.existing_val = 2;
    c.fewshot_train = 3;
    c.fewshot_val = 2;
    c.test = 2;
    c.seed = seed;
    return c;
}

struct GradCheck {
    double max_rel_error = 0.0;
    std::size_t checked = 0;
};

/// Compares backward gradients of scalar `loss_of` with respect to each
/// tensor in `params` against central differences. Coordinates whose
/// perturbation changes the loss non-smoothly can be skipped via `skip`.
inline GradCheck check_gradients(const std::function<ad::Var(ad::Graph&)>& build, std::vector<Tensor*> params,
                                 double step = 1e-5, double floor = 1e-6,
                                 const std::function<bool(std::size_t param, std::size_t i)>& skip = nullptr) {
    for (auto* p : params) {
        p->set_requires_grad(true);
        p->zero_grad();
    }
    {
        ad::Graph g;
        g.backward(build(g));
    }
    auto value = [&] {
        ad::Graph g;
        return build(g).value()[0];
    };
    GradCheck out;
    for (std::size_t k = 0; k < params.size(); ++k) {
        Tensor& p = *params[k];
        const std::vector<double> analytic(p.grad().begin(), p.grad().end());
        for (std::size_t i = 0; i < p.size(); ++i) {
            if (skip && skip(k, i)) continue;
            const double orig = p[i];
            p[i] = orig + step;
            const double up = value();
            p[i] = orig - step;
            const double down = value();
            p[i] = orig;
            const double numeric = (up - down) / (2.0 * step);
            const double scale = std::max({std::abs(numeric), std::abs(analytic[i]), floor});
            out.max_rel_error = std::max(out.max_rel_error, std::abs(numeric - analytic[i]) / scale);
            ++out.checked;
        }
    }
    return out;
}

}  // namespace ttrx::testing
