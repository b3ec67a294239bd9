#pragma once

#include <cmath>
#include <stdexcept>
#include <string>
#include <vector>

#include "eegdg/tensor.hpp"

namespace eegdg {

template <typename T>
struct NamedParam {
    std::string name;
    Tensor<T>* tensor = nullptr;
};

// Bias-corrected Adam. Slot order is fixed at init and must match the
// parameter list passed to every step.
template <typename T>
class AdamState {
public:
    AdamState() = default;

    explicit AdamState(const std::vector<NamedParam<T>>& params, double beta1 = 0.9,
                       double beta2 = 0.999, double eps = 1e-8)
        : beta1_(beta1), beta2_(beta2), eps_(eps) {
        slots_.reserve(params.size());
        for (const auto& p : params) {
            slots_.push_back(Slot{
                std::vector<T>(static_cast<std::size_t>(p.tensor->size()), T(0)),
                std::vector<T>(static_cast<std::size_t>(p.tensor->size()), T(0))});
        }
    }

    long step_count() const { return step_; }
    double beta1() const { return beta1_; }
    double beta2() const { return beta2_; }
    double eps() const { return eps_; }

    // One update over all parameters; missing gradients count as zero.
    void step(const std::vector<NamedParam<T>>& params, double lr) {
        if (params.size() != slots_.size()) {
            throw std::invalid_argument(
                "adam_step: got " + std::to_string(params.size()) +
                " parameters, state holds " + std::to_string(slots_.size()));
        }
        ++step_;
        const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(step_));
        const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(step_));
        for (std::size_t pi = 0; pi < params.size(); ++pi) {
            Tensor<T>& t = *params[pi].tensor;
            auto& slot = slots_[pi];
            if (slot.m.size() != static_cast<std::size_t>(t.size())) {
                throw std::invalid_argument("adam_step: state shape mismatch for " +
                                            params[pi].name);
            }
            if (!t.has_grad()) continue;
            const auto& g = t.grad();
            T* v = t.data();
            for (std::size_t i = 0; i < g.size(); ++i) {
                const double gi = static_cast<double>(g[i]);
                if (!std::isfinite(gi)) {
                    throw std::runtime_error(
                        "adam_step: non-finite gradient in parameter '" +
                        params[pi].name + "' at index " + std::to_string(i));
                }
                const double m = beta1_ * static_cast<double>(slot.m[i]) +
                                 (1.0 - beta1_) * gi;
                const double vv = beta2_ * static_cast<double>(slot.v[i]) +
                                  (1.0 - beta2_) * gi * gi;
                slot.m[i] = static_cast<T>(m);
                slot.v[i] = static_cast<T>(vv);
                const double mhat = m / bc1;
                const double vhat = vv / bc2;
                v[i] = static_cast<T>(static_cast<double>(v[i]) -
                                      lr * mhat / (std::sqrt(vhat) + eps_));
            }
        }
    }

private:
    struct Slot {
        std::vector<T> m, v;
    };

    double beta1_ = 0.9;
    double beta2_ = 0.999;
    double eps_ = 1e-8;
    long step_ = 0;
    std::vector<Slot> slots_;
};

}  // namespace eegdg
