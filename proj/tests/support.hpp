#pragma once

// Shared helpers for the test binaries: finite-difference gradient checking and
// small random fixtures.

#include <algorithm>
#include <cmath>
#include <functional>
#include <random>
#include <string>
#include <vector>

#include "castckt/tensor.hpp"

namespace castckt::testing {

struct GradCheck {
    std::size_t checked = 0;
    std::size_t failed = 0;
    double worst = 0.0;
    std::string worst_at;

    bool ok() const { return failed == 0 && checked > 0; }
};

/// |a - n| / max(|a|, |n|, floor): relative error that stays meaningful when
/// both derivatives are tiny.
inline double relative_error(double analytic, double numeric, double floor = 1e-5) {
    return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

/// Compares backward() against central differences for every coordinate of
/// every leaf. `f` must rebuild the graph from the leaves on each call.
inline GradCheck grad_check(std::vector<Tensor> leaves, const std::function<Tensor()>& f, double h = 1e-4,
                            double tol = 1e-3) {
    for (auto& l : leaves) {
        l.set_requires_grad(true);
        l.zero_grad();
    }
    backward(f());
    std::vector<std::vector<double>> analytic;
    for (auto& l : leaves) {
        analytic.emplace_back(l.numel(), 0.0);
        if (l.has_grad()) std::copy(l.grad().begin(), l.grad().end(), analytic.back().begin());
    }
    GradCheck r;
    for (std::size_t li = 0; li < leaves.size(); ++li) {
        auto x = leaves[li].mutable_data();
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double keep = x[i];
            x[i] = keep + h;
            const double up = f().item();
            x[i] = keep - h;
            const double down = f().item();
            x[i] = keep;
            const double numeric = (up - down) / (2.0 * h);
            const double err = relative_error(analytic[li][i], numeric);
            ++r.checked;
            if (err > tol) ++r.failed;
            if (err > r.worst) {
                r.worst = err;
                r.worst_at = "leaf " + std::to_string(li) + "[" + std::to_string(i) + "] analytic " +
                             std::to_string(analytic[li][i]) + " numeric " + std::to_string(numeric);
            }
        }
    }
    return r;
}

inline Tensor random_tensor(Shape shape, std::mt19937_64& rng, double lo = -1.0, double hi = 1.0) {
    std::uniform_real_distribution<double> u(lo, hi);
    std::vector<double> v(numel(shape));
    for (double& x : v) x = u(rng);
    return Tensor::from(std::move(shape), std::move(v));
}

/// sum(t * R) for a fixed random R: a scalar whose gradient exercises every
/// output coordinate with a distinct weight.
inline Tensor random_projection(const Tensor& t, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    return sum(t * random_tensor(t.shape(), rng));
}

}  // namespace castckt::testing
