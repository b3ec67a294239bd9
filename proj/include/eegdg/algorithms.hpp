#pragma once

#include <string>
#include <utility>
#include <vector>

#include "eegdg/adam.hpp"
#include "eegdg/common.hpp"
#include "eegdg/data.hpp"
#include "eegdg/nn.hpp"
#include "eegdg/ops.hpp"

namespace eegdg {
namespace algo {

enum class AlgoName { ERM, DANN, GroupDRO, Mixup };

inline const char* algo_name_str(AlgoName a) {
    switch (a) {
        case AlgoName::ERM: return "ERM";
        case AlgoName::DANN: return "DANN";
        case AlgoName::GroupDRO: return "GroupDRO";
        case AlgoName::Mixup: return "Mixup";
    }
    return "?";
}

inline AlgoName parse_algo_name(const std::string& s) {
    if (s == "ERM" || s == "erm") return AlgoName::ERM;
    if (s == "DANN" || s == "dann") return AlgoName::DANN;
    if (s == "GroupDRO" || s == "groupdro") return AlgoName::GroupDRO;
    if (s == "Mixup" || s == "mixup") return AlgoName::Mixup;
    throw std::invalid_argument("unknown algorithm '" + s +
                                "' (expected ERM, DANN, GroupDRO or Mixup)");
}

struct AlgoHyperParams {
    double lr = 0.0005;
    double lambda_dann = 1.0;
    double eta_dro = 0.01;
    double alpha_mixup = 0.2;

    void validate() const {
        if (!(lr > 0) || !(lambda_dann > 0) || !(eta_dro > 0) ||
            !(alpha_mixup > 0)) {
            throw std::invalid_argument(
                "AlgoHyperParams: lr, lambda, eta and alpha must be > 0");
        }
    }
};

struct StepStats {
    double loss = 0;       // optimized objective
    double task_loss = 0;  // classification part (equals loss except DANN)
    double domain_loss = 0;
    double domain_accuracy = 0;
    std::vector<std::pair<data::DomainKey, double>> domain_losses;
};

// ---------------------------------------------------------------------------
// Pooling: every step runs one forward over the concatenated per-domain
// batches (batch-norm statistics over the pooled batch), and per-domain
// losses are recovered by grouping per-sample losses.
// ---------------------------------------------------------------------------

template <typename T>
struct Pooled {
    Tensor<T> inputs;  // [N, C, S]
    std::vector<int> labels;
    std::vector<std::pair<data::DomainKey, int>> spans;  // (domain, count)
    int total = 0;
};

template <typename T>
Pooled<T> pool_batches(const std::vector<data::DomainBatch<T>>& batches) {
    if (batches.empty()) {
        throw std::invalid_argument("algorithm step: empty batch list");
    }
    int total = 0;
    for (const auto& b : batches) {
        if (b.role != data::BatchRole::Train) {
            throw std::invalid_argument(
                "algorithm step: batch for " + b.domain.str() +
                " is not a source training batch");
        }
        if (b.inputs.shape().size() != 3 ||
            b.inputs.dim(1) != batches.front().inputs.dim(1) ||
            b.inputs.dim(2) != batches.front().inputs.dim(2)) {
            throw std::invalid_argument("algorithm step: batch shape mismatch");
        }
        total += b.inputs.dim(0);
    }
    Pooled<T> p;
    p.total = total;
    const int C = batches.front().inputs.dim(1);
    const int S = batches.front().inputs.dim(2);
    p.inputs = Tensor<T>({total, C, S});
    p.labels.reserve(static_cast<std::size_t>(total));
    T* dst = p.inputs.data();
    for (const auto& b : batches) {
        const long n = b.inputs.size();
        std::copy(b.inputs.data(), b.inputs.data() + n, dst);
        dst += n;
        p.labels.insert(p.labels.end(), b.labels.begin(), b.labels.end());
        p.spans.emplace_back(b.domain, b.inputs.dim(0));
    }
    return p;
}

template <typename T>
std::vector<std::pair<data::DomainKey, double>> group_losses(
    const Pooled<T>& p, const std::vector<T>& per_sample) {
    std::vector<std::pair<data::DomainKey, double>> out;
    std::size_t off = 0;
    for (const auto& [domain, count] : p.spans) {
        double acc = 0;
        for (int i = 0; i < count; ++i)
            acc += static_cast<double>(per_sample[off + static_cast<std::size_t>(i)]);
        out.emplace_back(domain, acc / count);
        off += static_cast<std::size_t>(count);
    }
    return out;
}

// ---------------------------------------------------------------------------
// ERM: pooled cross-entropy over all source batches.
// ---------------------------------------------------------------------------

template <typename T>
StepStats erm_step(nn::Network<T>& net,
                   const std::vector<data::DomainBatch<T>>& batches,
                   AdamState<T>& opt, double lr, Rng& rng) {
    auto pooled = pool_batches(batches);
    net.zero_grad();
    Tape<T> tape;
    net.watch_all(tape);
    nn::Ctx<T> ctx{&tape, true, &rng};
    auto logits = net.forward(pooled.inputs, ctx);
    auto ce = ops::softmax_cross_entropy(&tape, logits, pooled.labels);
    tape.backward(ce.loss);
    auto params = net.parameters();
    opt.step(params, lr);

    StepStats st;
    st.loss = static_cast<double>(ce.loss.item());
    st.task_loss = st.loss;
    st.domain_losses = group_losses(pooled, ce.per_sample);
    return st;
}

// ---------------------------------------------------------------------------
// DANN: 2-layer MLP domain discriminator over the feature vector, trained
// jointly through a gradient-reversal connection.
// ---------------------------------------------------------------------------

template <typename T>
class Discriminator {
public:
    Discriminator(int feature_dim, std::vector<data::DomainKey> domains,
                  std::uint64_t seed, int hidden = 256)
        : domains_(std::move(domains)) {
        Rng rng(derive_seed(seed, "disc_init"));
        const int G = static_cast<int>(domains_.size());
        w1_ = init({hidden, feature_dim}, feature_dim, rng);
        b1_ = Tensor<T>({hidden});
        w2_ = init({G, hidden}, hidden, rng);
        b2_ = Tensor<T>({G});
    }

    int num_domains() const { return static_cast<int>(domains_.size()); }

    int domain_index(const data::DomainKey& key) const {
        for (std::size_t i = 0; i < domains_.size(); ++i) {
            if (domains_[i] == key) return static_cast<int>(i);
        }
        throw std::invalid_argument("discriminator: unknown domain " + key.str());
    }

    Tensor<T> forward(Tape<T>* tape, const Tensor<T>& feats) {
        auto h = ops::linear(tape, feats, w1_, b1_);
        h = ops::elu(tape, h);
        return ops::linear(tape, h, w2_, b2_);
    }

    std::vector<NamedParam<T>> parameters() {
        return {{"disc.fc1.w", &w1_},
                {"disc.fc1.b", &b1_},
                {"disc.fc2.w", &w2_},
                {"disc.fc2.b", &b2_}};
    }

    void watch_all(Tape<T>& tape) {
        for (auto& p : parameters()) tape.watch(*p.tensor);
    }

    void zero_grad() {
        for (auto& p : parameters()) p.tensor->zero_grad();
    }

private:
    static Tensor<T> init(Shape shape, int fan, Rng& rng) {
        Tensor<T> t(std::move(shape));
        const double bound = 1.0 / std::sqrt(static_cast<double>(fan));
        for (long i = 0; i < t.size(); ++i)
            t.data()[i] = static_cast<T>(uniform_in(rng, -bound, bound));
        return t;
    }

    std::vector<data::DomainKey> domains_;
    Tensor<T> w1_, b1_, w2_, b2_;
};

// The discriminator minimizes domain CE on features; the feature extractor
// sees the task gradient plus the lambda-scaled reversed domain gradient;
// the classifier sees the task gradient only. One optimizer covers both
// networks (its slots follow net parameters then discriminator parameters).
template <typename T>
StepStats dann_step(nn::Network<T>& net, Discriminator<T>& disc,
                    const std::vector<data::DomainBatch<T>>& batches,
                    AdamState<T>& opt, double lr, double lambda, Rng& rng) {
    if (lambda < 0) {
        throw std::invalid_argument("dann_step: lambda must be >= 0, got " +
                                    std::to_string(lambda));
    }
    auto pooled = pool_batches(batches);
    if (disc.num_domains() != static_cast<int>(batches.size())) {
        throw std::invalid_argument(
            "dann_step: discriminator covers " +
            std::to_string(disc.num_domains()) + " domains, step has " +
            std::to_string(batches.size()));
    }
    std::vector<int> domain_labels;
    domain_labels.reserve(static_cast<std::size_t>(pooled.total));
    for (const auto& [domain, count] : pooled.spans) {
        const int gi = disc.domain_index(domain);
        for (int i = 0; i < count; ++i) domain_labels.push_back(gi);
    }

    net.zero_grad();
    disc.zero_grad();
    Tape<T> tape;
    net.watch_all(tape);
    disc.watch_all(tape);
    nn::Ctx<T> ctx{&tape, true, &rng};

    auto feats = net.features(pooled.inputs, ctx);
    auto logits = net.classify(feats, ctx);
    auto task = ops::softmax_cross_entropy(&tape, logits, pooled.labels);

    auto reversed = ops::gradient_reverse(&tape, feats, lambda);
    auto dlogits = disc.forward(&tape, reversed);
    auto dom = ops::softmax_cross_entropy(&tape, dlogits, domain_labels);

    auto total = ops::add(&tape, task.loss, dom.loss);
    tape.backward(total);

    auto params = net.parameters();
    for (auto& p : disc.parameters()) params.push_back(p);
    opt.step(params, lr);

    StepStats st;
    st.loss = static_cast<double>(total.item());
    st.task_loss = static_cast<double>(task.loss.item());
    st.domain_loss = static_cast<double>(dom.loss.item());
    int hits = 0;
    const int G = disc.num_domains();
    for (int i = 0; i < pooled.total; ++i) {
        int arg = 0;
        for (int c = 1; c < G; ++c) {
            if (dom.probs[static_cast<std::size_t>(i) * G + c] >
                dom.probs[static_cast<std::size_t>(i) * G + arg])
                arg = c;
        }
        hits += (arg == domain_labels[static_cast<std::size_t>(i)]) ? 1 : 0;
    }
    st.domain_accuracy = 100.0 * hits / pooled.total;
    st.domain_losses = group_losses(pooled, task.per_sample);
    return st;
}

// ---------------------------------------------------------------------------
// GroupDRO: exponentiated reweighting of per-domain losses.
// ---------------------------------------------------------------------------

struct GroupWeights {
    std::vector<data::DomainKey> domains;
    std::vector<double> q;

    static GroupWeights uniform(const std::vector<data::DomainKey>& domains) {
        GroupWeights w;
        w.domains = domains;
        w.q.assign(domains.size(), 1.0 / static_cast<double>(domains.size()));
        return w;
    }

    void validate() const {
        if (domains.size() != q.size() || q.empty()) {
            throw std::invalid_argument("GroupWeights: malformed");
        }
        double s = 0;
        for (double v : q) {
            if (!(v > 0)) {
                throw std::invalid_argument("GroupWeights: weights must be > 0");
            }
            s += v;
        }
        if (std::abs(s - 1.0) > 1e-6) {
            throw std::invalid_argument("GroupWeights: sum " + std::to_string(s) +
                                        " != 1");
        }
    }

    // q_g <- q_g * exp(eta * loss_g), renormalized.
    void update(const std::vector<double>& losses, double eta) {
        if (losses.size() != q.size()) {
            throw std::invalid_argument("GroupWeights::update: size mismatch");
        }
        double z = 0;
        for (std::size_t g = 0; g < q.size(); ++g) {
            q[g] *= std::exp(eta * losses[g]);
            z += q[g];
        }
        for (auto& v : q) v /= z;
    }
};

template <typename T>
StepStats groupdro_step(nn::Network<T>& net,
                        const std::vector<data::DomainBatch<T>>& batches,
                        AdamState<T>& opt, double lr, GroupWeights& weights,
                        double eta, Rng& rng) {
    auto pooled = pool_batches(batches);
    weights.validate();
    if (weights.q.size() != batches.size()) {
        throw std::invalid_argument(
            "groupdro_step: " + std::to_string(weights.q.size()) +
            " group weights for " + std::to_string(batches.size()) + " batches");
    }
    // Match weights to batches by domain key.
    std::vector<int> widx;
    widx.reserve(batches.size());
    for (const auto& [domain, count] : pooled.spans) {
        int found = -1;
        for (std::size_t g = 0; g < weights.domains.size(); ++g) {
            if (weights.domains[g] == domain) {
                found = static_cast<int>(g);
                break;
            }
        }
        if (found < 0) {
            throw std::invalid_argument("groupdro_step: no group weight for " +
                                        domain.str());
        }
        widx.push_back(found);
    }

    net.zero_grad();
    Tape<T> tape;
    net.watch_all(tape);
    nn::Ctx<T> ctx{&tape, true, &rng};
    auto logits = net.forward(pooled.inputs, ctx);

    // Detached per-sample losses drive the q update; the taped loss then
    // carries the fresh weights.
    auto probe = ops::softmax_cross_entropy<T>(nullptr, logits, pooled.labels);
    auto grouped = group_losses(pooled, probe.per_sample);
    std::vector<double> losses_by_g(weights.q.size(), 0.0);
    for (std::size_t b = 0; b < grouped.size(); ++b) {
        losses_by_g[static_cast<std::size_t>(widx[b])] = grouped[b].second;
    }
    weights.update(losses_by_g, eta);

    std::vector<T> sample_w;
    sample_w.reserve(static_cast<std::size_t>(pooled.total));
    for (std::size_t b = 0; b < pooled.spans.size(); ++b) {
        const int count = pooled.spans[b].second;
        const double w =
            weights.q[static_cast<std::size_t>(widx[b])] / static_cast<double>(count);
        for (int i = 0; i < count; ++i) sample_w.push_back(static_cast<T>(w));
    }
    auto ce = ops::softmax_cross_entropy(&tape, logits, pooled.labels, sample_w);
    tape.backward(ce.loss);
    auto params = net.parameters();
    opt.step(params, lr);

    StepStats st;
    st.loss = static_cast<double>(ce.loss.item());
    st.task_loss = st.loss;
    st.domain_losses = grouped;
    return st;
}

// ---------------------------------------------------------------------------
// Inter-domain Mixup
// ---------------------------------------------------------------------------

template <typename T>
struct MixedBatch {
    Tensor<T> inputs;
    std::vector<T> soft_targets;  // n x num_classes rows
    std::vector<double> lambdas;
    data::DomainKey domain_i, domain_j;
};

template <typename T>
MixedBatch<T> mixup_batch_with_lambdas(const data::DomainBatch<T>& bi,
                                       const data::DomainBatch<T>& bj,
                                       const std::vector<double>& lambdas,
                                       int num_classes = 3) {
    if (bi.inputs.dim(0) != bj.inputs.dim(0)) {
        throw std::invalid_argument("mixup_batch: batch sizes differ");
    }
    if (bi.inputs.shape() != bj.inputs.shape()) {
        throw std::invalid_argument("mixup_batch: input shapes differ");
    }
    const int n = bi.inputs.dim(0);
    if (static_cast<int>(lambdas.size()) != n) {
        throw std::invalid_argument("mixup_batch: need one lambda per sample");
    }
    MixedBatch<T> m;
    m.domain_i = bi.domain;
    m.domain_j = bj.domain;
    m.lambdas = lambdas;
    m.inputs = Tensor<T>(bi.inputs.shape());
    m.soft_targets.assign(static_cast<std::size_t>(n) * num_classes, T(0));
    const long row = bi.inputs.size() / n;
    for (int i = 0; i < n; ++i) {
        const double lam = lambdas[static_cast<std::size_t>(i)];
        if (lam < 0.0 || lam > 1.0) {
            throw std::invalid_argument("mixup_batch: lambda out of [0,1]");
        }
        const T l = static_cast<T>(lam);
        const T r = static_cast<T>(1.0 - lam);
        const T* xi = bi.inputs.data() + static_cast<long>(i) * row;
        const T* xj = bj.inputs.data() + static_cast<long>(i) * row;
        T* xo = m.inputs.data() + static_cast<long>(i) * row;
        for (long k = 0; k < row; ++k) xo[k] = l * xi[k] + r * xj[k];
        m.soft_targets[static_cast<std::size_t>(i) * num_classes +
                       bi.labels[static_cast<std::size_t>(i)]] += l;
        m.soft_targets[static_cast<std::size_t>(i) * num_classes +
                       bj.labels[static_cast<std::size_t>(i)]] += r;
    }
    return m;
}

// x' = lambda x_i + (1-lambda) x_j with per-sample lambda ~ Beta(alpha, alpha).
template <typename T>
MixedBatch<T> mixup_batch(const data::DomainBatch<T>& bi,
                          const data::DomainBatch<T>& bj, double alpha,
                          Rng& rng, int num_classes = 3) {
    if (!(alpha > 0)) {
        throw std::invalid_argument("mixup_batch: alpha must be > 0, got " +
                                    std::to_string(alpha));
    }
    if (bi.domain == bj.domain) {
        throw std::invalid_argument("mixup_batch: domains must differ, both " +
                                    bi.domain.str());
    }
    std::vector<double> lambdas;
    lambdas.reserve(static_cast<std::size_t>(bi.inputs.dim(0)));
    for (int i = 0; i < bi.inputs.dim(0); ++i) {
        lambdas.push_back(sample_beta(rng, alpha, alpha));
    }
    return mixup_batch_with_lambdas(bi, bj, lambdas, num_classes);
}

// ERM over already-mixed batches (soft-target cross entropy).
template <typename T>
StepStats mixed_step(nn::Network<T>& net,
                     const std::vector<MixedBatch<T>>& mixed, AdamState<T>& opt,
                     double lr, Rng& rng) {
    if (mixed.empty()) {
        throw std::invalid_argument("mixed_step: empty batch list");
    }
    int total = 0;
    for (const auto& m : mixed) total += m.inputs.dim(0);
    const int C = mixed.front().inputs.dim(1);
    const int S = mixed.front().inputs.dim(2);
    const int num_classes =
        static_cast<int>(mixed.front().soft_targets.size() / mixed.front().inputs.dim(0));

    Tensor<T> inputs({total, C, S});
    std::vector<T> soft;
    soft.reserve(static_cast<std::size_t>(total) * num_classes);
    T* dst = inputs.data();
    for (const auto& m : mixed) {
        std::copy(m.inputs.data(), m.inputs.data() + m.inputs.size(), dst);
        dst += m.inputs.size();
        soft.insert(soft.end(), m.soft_targets.begin(), m.soft_targets.end());
    }

    net.zero_grad();
    Tape<T> tape;
    net.watch_all(tape);
    nn::Ctx<T> ctx{&tape, true, &rng};
    auto logits = net.forward(inputs, ctx);
    auto ce = ops::softmax_cross_entropy_soft(&tape, logits, soft);
    tape.backward(ce.loss);
    auto params = net.parameters();
    opt.step(params, lr);

    StepStats st;
    st.loss = static_cast<double>(ce.loss.item());
    st.task_loss = st.loss;
    return st;
}

// Random derangement: every domain is paired with a different one.
inline std::vector<int> derangement(int n, Rng& rng) {
    std::vector<int> perm(static_cast<std::size_t>(n));
    for (;;) {
        for (int i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
        shuffle_in_place(perm, rng);
        bool ok = true;
        for (int i = 0; i < n; ++i) {
            if (perm[static_cast<std::size_t>(i)] == i) {
                ok = false;
                break;
            }
        }
        if (ok) return perm;
    }
}

template <typename T>
StepStats mixup_step(nn::Network<T>& net,
                     const std::vector<data::DomainBatch<T>>& batches,
                     AdamState<T>& opt, double lr, double alpha, Rng& rng) {
    if (batches.size() < 2) {
        throw std::invalid_argument(
            "mixup_step: need at least two domains, got " +
            std::to_string(batches.size()));
    }
    for (const auto& b : batches) {
        if (b.role != data::BatchRole::Train) {
            throw std::invalid_argument(
                "mixup_step: batch for " + b.domain.str() +
                " is not a source training batch");
        }
    }
    auto perm = derangement(static_cast<int>(batches.size()), rng);
    std::vector<MixedBatch<T>> mixed;
    mixed.reserve(batches.size());
    for (std::size_t i = 0; i < batches.size(); ++i) {
        mixed.push_back(mixup_batch(batches[i],
                                    batches[static_cast<std::size_t>(perm[i])],
                                    alpha, rng));
    }
    return mixed_step(net, mixed, opt, lr, rng);
}

}  // namespace algo
}  // namespace eegdg
