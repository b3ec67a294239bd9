#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <stdexcept>
#include <vector>

#include "eegdg/common.hpp"
#include "eegdg/tensor.hpp"

namespace eegdg {

// Compares reverse-mode gradients against central finite differences
// (f(x+eps) - f(x-eps)) / (2 eps), elementwise over x. Meant for the
// 64-bit instantiation; float gradients can be checked at looser
// tolerances by the caller.
//
// f is evaluated many times and must be deterministic: it receives a tape
// (null for the pure numeric evaluations) and returns a scalar tensor.

struct GradCheckResult {
    double max_rel_err = 0.0;
    double max_abs_err = 0.0;
    long coords_checked = 0;
    bool pass(double tol) const { return max_rel_err < tol; }
};

template <typename T>
using ScalarFn =
    std::function<Tensor<T>(Tensor<T>& x, Tape<T>* tape)>;

// max_coords < 0 checks every coordinate; otherwise a deterministic random
// subsample of that many coordinates (seeded by `seed`).
template <typename T>
GradCheckResult grad_check(const ScalarFn<T>& f, const Tensor<T>& x0,
                           double eps, long max_coords = -1,
                           std::uint64_t seed = 0) {
    if (!(eps > 0.0)) {
        throw std::invalid_argument("grad_check: eps must be > 0, got " +
                                    std::to_string(eps));
    }

    // Analytic pass.
    Tensor<T> x = x0.clone();
    Tape<T> tape;
    tape.watch(x);
    Tensor<T> loss = f(x, &tape);
    if (loss.size() != 1) {
        throw std::invalid_argument("grad_check: f must be scalar-valued");
    }
    tape.backward(loss);
    std::vector<T> analytic = x.has_grad()
                                  ? x.grad()
                                  : std::vector<T>(static_cast<std::size_t>(x.size()), T(0));

    // Coordinate set.
    std::vector<long> coords;
    const long n = x.size();
    if (max_coords < 0 || max_coords >= n) {
        coords.resize(static_cast<std::size_t>(n));
        for (long i = 0; i < n; ++i) coords[static_cast<std::size_t>(i)] = i;
    } else {
        Rng rng(derive_seed(seed, "grad_check_coords"));
        std::vector<long> all(static_cast<std::size_t>(n));
        for (long i = 0; i < n; ++i) all[static_cast<std::size_t>(i)] = i;
        shuffle_in_place(all, rng);
        coords.assign(all.begin(), all.begin() + max_coords);
        std::sort(coords.begin(), coords.end());
    }

    GradCheckResult res;
    Tensor<T> xp = x0.clone();
    for (long c : coords) {
        const T orig = xp.data()[c];
        xp.data()[c] = orig + static_cast<T>(eps);
        const double fp = static_cast<double>(f(xp, nullptr).item());
        xp.data()[c] = orig - static_cast<T>(eps);
        const double fm = static_cast<double>(f(xp, nullptr).item());
        xp.data()[c] = orig;

        const double numeric = (fp - fm) / (2.0 * eps);
        const double a = static_cast<double>(analytic[static_cast<std::size_t>(c)]);
        const double abs_err = std::abs(a - numeric);
        const double denom = std::max({std::abs(a), std::abs(numeric), 1e-4});
        res.max_abs_err = std::max(res.max_abs_err, abs_err);
        res.max_rel_err = std::max(res.max_rel_err, abs_err / denom);
        ++res.coords_checked;
    }
    return res;
}

}  // namespace eegdg
