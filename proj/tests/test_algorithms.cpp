#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "eegdg/algorithms.hpp"
#include "eegdg/models.hpp"

using namespace eegdg;
using namespace eegdg::algo;
using namespace eegdg::nn;
using data::BatchRole;
using data::DomainBatch;
using data::DomainKey;
namespace o = eegdg::ops;

namespace {

// Small single-conv network over the default (60 x 1000) input, cheap
// enough to step hundreds of times in unit tests.
ModelConfig tiny_model() {
    ModelConfig cfg;
    cfg.name = ModelName::EEGNet;
    cfg.layout = InputLayout::Channels1d;
    cfg.in_channels = 60;
    cfg.in_samples = 1000;
    cfg.num_classes = 3;
    cfg.feature_layers = {
        LayerSpec::conv1d(60, 8, 7, 3, 4),  // -> (8, 250)
        LayerSpec::batch_norm(8),
        LayerSpec::elu(),
        LayerSpec::maxpool1(4),  // -> (8, 62)
        LayerSpec::flatten(),
    };
    cfg.feature_dim = 8 * 62;
    cfg.classifier = LayerSpec::linear(cfg.feature_dim, 3);
    return cfg;
}

template <typename T>
DomainBatch<T> make_batch(DomainKey key, std::uint64_t seed, int n = 8,
                          BatchRole role = BatchRole::Train) {
    DomainBatch<T> b;
    b.domain = key;
    b.role = role;
    b.inputs = Tensor<T>({n, 60, 1000});
    Rng rng(derive_seed(seed, "batch", static_cast<std::uint64_t>(key.subject) * 100 +
                                           static_cast<std::uint64_t>(key.session)));
    Gaussian g;
    for (long i = 0; i < b.inputs.size(); ++i)
        b.inputs.data()[i] = static_cast<T>(g(rng));
    for (int i = 0; i < n; ++i) {
        b.labels.push_back(i % 3);
        b.trial_indices.push_back(i);
    }
    return b;
}

template <typename T>
std::vector<DomainBatch<T>> make_batches(int domains, std::uint64_t seed,
                                         int n = 8) {
    std::vector<DomainBatch<T>> out;
    for (int d = 0; d < domains; ++d) {
        out.push_back(make_batch<T>({d / 2 + 1, d % 2 + 1}, seed, n));
    }
    return out;
}

template <typename T>
double max_param_diff(Network<T>& a, Network<T>& b, bool classifier_only = false) {
    auto pa = classifier_only ? a.classifier_parameters() : a.parameters();
    auto pb = classifier_only ? b.classifier_parameters() : b.parameters();
    REQUIRE(pa.size() == pb.size());
    double worst = 0;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        const auto& va = pa[i].tensor->vec();
        const auto& vb = pb[i].tensor->vec();
        REQUIRE(va.size() == vb.size());
        for (std::size_t j = 0; j < va.size(); ++j) {
            worst = std::max(worst, std::abs(static_cast<double>(va[j]) -
                                             static_cast<double>(vb[j])));
        }
    }
    return worst;
}

std::vector<DomainKey> domains_of(const std::vector<DomainBatch<float>>& bs) {
    std::vector<DomainKey> d;
    for (const auto& b : bs) d.push_back(b.domain);
    return d;
}

}  // namespace

TEST_CASE("erm: lr=0 leaves parameters unchanged, init loss near ln 3") {
    Network<float> net(tiny_model(), 100);
    std::vector<std::vector<float>> before;
    for (auto& p : net.parameters()) before.push_back(p.tensor->vec());
    auto batches = make_batches<float>(1, 5);
    AdamState<float> opt(net.parameters());
    Rng rng(1);
    auto st = erm_step(net, batches, opt, 0.0, rng);
    CHECK(std::abs(st.loss - std::log(3.0)) < 0.35);
    std::size_t i = 0;
    for (auto& p : net.parameters()) CHECK(p.tensor->vec() == before[i++]);
    CHECK(st.domain_losses.size() == 1);
}

TEST_CASE("erm: duplicated batch produces the same update as a single copy") {
    auto batches1 = make_batches<float>(1, 9);
    auto batches2 = batches1;
    batches2.push_back(batches1.front());

    Network<float> net1(tiny_model(), 200);
    Network<float> net2(tiny_model(), 200);
    AdamState<float> o1(net1.parameters()), o2(net2.parameters());
    Rng r1(3), r2(3);
    erm_step(net1, batches1, o1, 0.001, r1);
    erm_step(net2, batches2, o2, 0.001, r2);
    CHECK(max_param_diff(net1, net2) < 1e-5);
}

TEST_CASE("erm: empty batch list and non-source batches are rejected") {
    Network<float> net(tiny_model(), 300);
    AdamState<float> opt(net.parameters());
    Rng rng(1);
    std::vector<DomainBatch<float>> none;
    CHECK_THROWS_AS(erm_step(net, none, opt, 1e-3, rng), std::invalid_argument);

    auto bad = make_batches<float>(2, 7);
    bad[1].role = BatchRole::Val;
    CHECK_THROWS_AS(erm_step(net, bad, opt, 1e-3, rng), std::invalid_argument);
}

TEST_CASE("pooling 29 domains of 8 gives a 232-sample step batch") {
    auto batches = make_batches<float>(29, 11);
    auto pooled = pool_batches(batches);
    CHECK(pooled.total == 232);
    CHECK(pooled.inputs.shape() == Shape{232, 60, 1000});
    CHECK(pooled.spans.size() == 29);
}

TEST_CASE("dann with lambda=0 matches erm exactly on the shared parameters") {
    auto batches = make_batches<float>(4, 13);
    Network<float> net_erm(tiny_model(), 400);
    Network<float> net_dann(tiny_model(), 400);
    Discriminator<float> disc(tiny_model().feature_dim, domains_of(batches), 77);

    AdamState<float> o1(net_erm.parameters());
    auto dann_params = net_dann.parameters();
    for (auto& p : disc.parameters()) dann_params.push_back(p);
    AdamState<float> o2(dann_params);

    Rng r1(5), r2(5);
    erm_step(net_erm, batches, o1, 5e-4, r1);
    dann_step(net_dann, disc, batches, o2, 5e-4, 0.0, r2);
    CHECK(max_param_diff(net_erm, net_dann) == 0.0);
}

TEST_CASE("dann: untrained discriminator over 29 domains sits at ln 29") {
    auto batches = make_batches<float>(29, 17, 4);
    Network<float> net(tiny_model(), 500);
    Discriminator<float> disc(tiny_model().feature_dim, domains_of(batches), 19);
    auto params = net.parameters();
    for (auto& p : disc.parameters()) params.push_back(p);
    AdamState<float> opt(params);
    Rng rng(7);
    auto st = dann_step(net, disc, batches, opt, 5e-4, 1.0, rng);
    CHECK(std::abs(st.domain_loss - std::log(29.0)) < 0.2);
    CHECK(st.domain_accuracy >= 0.0);
    CHECK(st.domain_accuracy <= 100.0);
}

TEST_CASE("dann rejects negative lambda and a mis-sized discriminator") {
    auto batches = make_batches<float>(3, 23);
    Network<float> net(tiny_model(), 600);
    Discriminator<float> disc(tiny_model().feature_dim, domains_of(batches), 3);
    auto params = net.parameters();
    for (auto& p : disc.parameters()) params.push_back(p);
    AdamState<float> opt(params);
    Rng rng(9);
    CHECK_THROWS_AS(dann_step(net, disc, batches, opt, 5e-4, -0.1, rng),
                    std::invalid_argument);
    auto fewer = make_batches<float>(2, 23);
    CHECK_THROWS_AS(dann_step(net, disc, fewer, opt, 5e-4, 1.0, rng),
                    std::invalid_argument);
}

TEST_CASE("dann feature gradient equals task gradient minus lambda times the "
          "plain domain gradient") {
    const double lambda = 0.7;
    auto batches = make_batches<double>(4, 29, 4);
    auto pooled = pool_batches(batches);
    Network<double> net(tiny_model(), 700);
    Discriminator<double> disc(tiny_model().feature_dim, {batches[0].domain,
                                                          batches[1].domain,
                                                          batches[2].domain,
                                                          batches[3].domain},
                               31);
    std::vector<int> dlabels;
    for (int d = 0; d < 4; ++d)
        for (int i = 0; i < 4; ++i) dlabels.push_back(d);

    auto feat_grad = [&](int mode) {
        Tape<double> tape;
        nn::Ctx<double> ctx{&tape, true, nullptr};
        auto feats = net.features(pooled.inputs, ctx);
        tape.watch(feats);
        Tensor<double> loss;
        if (mode == 0) {  // full DANN objective
            auto task = o::softmax_cross_entropy(&tape, net.classify(feats, ctx),
                                                 pooled.labels);
            auto rev = o::gradient_reverse(&tape, feats, lambda);
            auto dom = o::softmax_cross_entropy(&tape, disc.forward(&tape, rev),
                                                dlabels);
            loss = o::add(&tape, task.loss, dom.loss);
        } else if (mode == 1) {  // task only
            loss = o::softmax_cross_entropy(&tape, net.classify(feats, ctx),
                                            pooled.labels)
                       .loss;
        } else {  // domain loss without reversal
            loss = o::softmax_cross_entropy(&tape, disc.forward(&tape, feats),
                                            dlabels)
                       .loss;
        }
        tape.backward(loss);
        return feats.grad();
    };

    auto g_full = feat_grad(0);
    auto g_task = feat_grad(1);
    auto g_dom = feat_grad(2);
    for (std::size_t i = 0; i < g_full.size(); ++i) {
        CHECK(g_full[i] ==
              doctest::Approx(g_task[i] - lambda * g_dom[i]).epsilon(1e-9));
    }
}

TEST_CASE("groupdro weight update oracle") {
    GroupWeights w;
    w.domains = {{1, 1}, {1, 2}};
    w.q = {0.5, 0.5};
    w.update({1.0, 0.0}, 0.01);
    // Direct evaluation: 0.5 e^{0.01} / (0.5 e^{0.01} + 0.5).
    CHECK(w.q[0] == doctest::Approx(0.5025).epsilon(5e-5));
    CHECK(w.q[1] == doctest::Approx(0.4975).epsilon(5e-5));

    GroupWeights eq = GroupWeights::uniform({{1, 1}, {1, 2}, {2, 1}});
    auto before = eq.q;
    eq.update({0.7, 0.7, 0.7}, 0.05);
    for (std::size_t i = 0; i < eq.q.size(); ++i)
        CHECK(eq.q[i] == doctest::Approx(before[i]).epsilon(1e-12));
}

TEST_CASE("groupdro: the worst group strictly gains weight") {
    Rng rng(41);
    for (int rep = 0; rep < 20; ++rep) {
        const int G = 2 + static_cast<int>(rand_index(rng, 6));
        GroupWeights w;
        std::vector<double> losses;
        double z = 0;
        for (int g = 0; g < G; ++g) {
            w.domains.push_back({g + 1, 1});
            w.q.push_back(0.05 + uniform01(rng));
            z += w.q.back();
            losses.push_back(uniform01(rng) * 3.0);
        }
        for (auto& v : w.q) v /= z;
        int worst = 0;
        for (int g = 1; g < G; ++g)
            if (losses[g] > losses[worst]) worst = g;
        const double before = w.q[static_cast<std::size_t>(worst)];
        w.update(losses, 0.01 + uniform01(rng) * 0.1);
        CHECK(w.q[static_cast<std::size_t>(worst)] > before);
    }
}

TEST_CASE("groupdro with eta=0 and uniform weights reproduces erm bit-exactly") {
    auto batches = make_batches<float>(3, 43);
    Network<float> a(tiny_model(), 800);
    Network<float> b(tiny_model(), 800);
    AdamState<float> oa(a.parameters()), ob(b.parameters());
    Rng ra(11), rb(11);
    erm_step(a, batches, oa, 5e-4, ra);
    auto w = GroupWeights::uniform(domains_of(batches));
    groupdro_step(b, batches, ob, 5e-4, w, 0.0, rb);
    CHECK(max_param_diff(a, b) == 0.0);
    for (double q : w.q) CHECK(q == doctest::Approx(1.0 / 3).epsilon(1e-12));
}

TEST_CASE("groupdro rejects a weight domain missing from the batches") {
    auto batches = make_batches<float>(3, 47);
    Network<float> net(tiny_model(), 900);
    AdamState<float> opt(net.parameters());
    auto w = GroupWeights::uniform({{9, 1}, {9, 2}, {8, 1}});
    Rng rng(13);
    CHECK_THROWS_AS(groupdro_step(net, batches, opt, 5e-4, w, 0.01, rng),
                    std::invalid_argument);
}

TEST_CASE("groupdro weights stay a distribution across steps") {
    auto batches = make_batches<float>(4, 53);
    Network<float> net(tiny_model(), 1000);
    AdamState<float> opt(net.parameters());
    auto w = GroupWeights::uniform(domains_of(batches));
    Rng rng(17);
    for (int s = 0; s < 5; ++s) {
        groupdro_step(net, batches, opt, 1e-3, w, 0.05, rng);
        double sum = 0;
        for (double q : w.q) {
            CHECK(q > 0.0);
            sum += q;
        }
        CHECK(std::abs(sum - 1.0) < 1e-6);
    }
}

TEST_CASE("mixup_batch at forced lambda=1 returns the first batch") {
    auto bi = make_batch<float>({1, 1}, 59, 4);
    auto bj = make_batch<float>({2, 1}, 61, 4);
    auto m = mixup_batch_with_lambdas(bi, bj, {1.0, 1.0, 1.0, 1.0});
    CHECK(m.inputs.vec() == bi.inputs.vec());
    for (int i = 0; i < 4; ++i) {
        for (int c = 0; c < 3; ++c) {
            const float want = (c == bi.labels[static_cast<std::size_t>(i)]) ? 1.f : 0.f;
            CHECK(m.soft_targets[static_cast<std::size_t>(i) * 3 + c] == want);
        }
    }
}

TEST_CASE("mixup_batch hand arithmetic at lambda one half") {
    DomainBatch<float> bi, bj;
    bi.domain = {1, 1};
    bj.domain = {2, 2};
    bi.role = bj.role = BatchRole::Train;
    bi.inputs = Tensor<float>({1, 1, 2}, {0.f, 2.f});
    bj.inputs = Tensor<float>({1, 1, 2}, {2.f, 0.f});
    bi.labels = {0};
    bj.labels = {2};
    auto m = mixup_batch_with_lambdas(bi, bj, {0.5});
    CHECK(m.inputs.data()[0] == 1.0f);
    CHECK(m.inputs.data()[1] == 1.0f);
    CHECK(m.soft_targets[0] == 0.5f);
    CHECK(m.soft_targets[1] == 0.0f);
    CHECK(m.soft_targets[2] == 0.5f);
}

TEST_CASE("mixup_batch validates alpha and distinct domains") {
    auto bi = make_batch<float>({1, 1}, 67, 4);
    auto bj = make_batch<float>({2, 1}, 71, 4);
    Rng rng(19);
    CHECK_THROWS_AS(mixup_batch(bi, bj, 0.0, rng), std::invalid_argument);
    CHECK_THROWS_AS(mixup_batch(bi, bi, 0.2, rng), std::invalid_argument);
}

TEST_CASE("beta(0.2, 0.2) lambdas are strongly bimodal") {
    Rng rng(73);
    const int n = 10000;
    int outside = 0;
    for (int i = 0; i < n; ++i) {
        const double lam = sample_beta(rng, 0.2, 0.2);
        CHECK(lam >= 0.0);
        CHECK(lam <= 1.0);
        if (lam < 0.1 || lam > 0.9) ++outside;
    }
    const double frac = static_cast<double>(outside) / n;
    CHECK(frac >= 0.5);

    // Quadrature oracle for the Beta(0.2,0.2) CDF: I(x) via the
    // substitution t = u^{1/a}, which removes the left endpoint
    // singularity.
    auto beta_cdf = [](double x, double a, double b) {
        const double ua = std::pow(x, a);
        const int n_steps = 20000;
        const double h = ua / n_steps;
        double acc = 0;
        for (int i = 0; i < n_steps; ++i) {
            const double u0 = i * h, u1 = u0 + h, um = 0.5 * (u0 + u1);
            auto f = [&](double u) {
                const double t = std::pow(u, 1.0 / a);
                return std::pow(1.0 - t, b - 1.0) / a;
            };
            acc += h / 6.0 * (f(u0 + 1e-300) + 4.0 * f(um) + f(u1));
        }
        const double lb = std::lgamma(a) + std::lgamma(b) - std::lgamma(a + b);
        return acc / std::exp(lb);
    };
    const double expect =
        beta_cdf(0.1, 0.2, 0.2) + (1.0 - beta_cdf(0.9, 0.2, 0.2));
    CHECK(expect >= 0.5);                    // the oracle itself agrees
    CHECK(std::abs(frac - expect) < 0.03);   // Monte-Carlo matches it
}

TEST_CASE("mixup self-pairing with lambda=1 reduces to erm bit-exactly") {
    auto batches = make_batches<float>(3, 79);
    Network<float> a(tiny_model(), 1100);
    Network<float> b(tiny_model(), 1100);
    AdamState<float> oa(a.parameters()), ob(b.parameters());
    Rng ra(23), rb(23);
    erm_step(a, batches, oa, 5e-4, ra);
    std::vector<MixedBatch<float>> mixed;
    for (const auto& bb : batches) {
        mixed.push_back(mixup_batch_with_lambdas(
            bb, bb, std::vector<double>(static_cast<std::size_t>(bb.inputs.dim(0)), 1.0)));
    }
    mixed_step(b, mixed, ob, 5e-4, rb);
    CHECK(max_param_diff(a, b) == 0.0);
}

TEST_CASE("mixing a batch with itself reduces to erm at any lambda") {
    auto batches = make_batches<float>(2, 83);
    Network<float> a(tiny_model(), 1200);
    Network<float> b(tiny_model(), 1200);
    AdamState<float> oa(a.parameters()), ob(b.parameters());
    Rng ra(29), rb(29);
    erm_step(a, batches, oa, 5e-4, ra);
    std::vector<MixedBatch<float>> mixed;
    Rng lam_rng(31);
    for (const auto& bb : batches) {
        std::vector<double> lams;
        for (int i = 0; i < bb.inputs.dim(0); ++i)
            lams.push_back(uniform01(lam_rng));
        mixed.push_back(mixup_batch_with_lambdas(bb, bb, lams));
    }
    mixed_step(b, mixed, ob, 5e-4, rb);
    CHECK(max_param_diff(a, b) < 1e-6);
}

TEST_CASE("mixup_step rejects a single domain and lr=0 changes nothing") {
    Network<float> net(tiny_model(), 1300);
    AdamState<float> opt(net.parameters());
    Rng rng(37);
    auto one = make_batches<float>(1, 89);
    CHECK_THROWS_AS(mixup_step(net, one, opt, 5e-4, 0.2, rng),
                    std::invalid_argument);

    std::vector<std::vector<float>> before;
    for (auto& p : net.parameters()) before.push_back(p.tensor->vec());
    auto four = make_batches<float>(4, 97);
    mixup_step(net, four, opt, 0.0, 0.2, rng);
    std::size_t i = 0;
    for (auto& p : net.parameters()) CHECK(p.tensor->vec() == before[i++]);
}

TEST_CASE("derangement never self-pairs") {
    Rng rng(41);
    for (int rep = 0; rep < 50; ++rep) {
        const int n = 2 + static_cast<int>(rand_index(rng, 28));
        auto perm = derangement(n, rng);
        std::vector<bool> seen(static_cast<std::size_t>(n), false);
        for (int i = 0; i < n; ++i) {
            CHECK(perm[static_cast<std::size_t>(i)] != i);
            seen[static_cast<std::size_t>(perm[static_cast<std::size_t>(i)])] = true;
        }
        for (bool s : seen) CHECK(s);
    }
}

TEST_CASE("all four steps are deterministic given seeds and batches") {
    auto batches = make_batches<float>(4, 101);
    auto run = [&](int which) {
        Network<float> net(tiny_model(), 1400);
        Discriminator<float> disc(tiny_model().feature_dim, domains_of(batches),
                                  55);
        auto params = net.parameters();
        if (which == 1) {
            for (auto& p : disc.parameters()) params.push_back(p);
        }
        AdamState<float> opt(params);
        Rng rng(43);
        auto w = GroupWeights::uniform(domains_of(batches));
        for (int s = 0; s < 3; ++s) {
            switch (which) {
                case 0: erm_step(net, batches, opt, 1e-3, rng); break;
                case 1: dann_step(net, disc, batches, opt, 1e-3, 1.0, rng); break;
                case 2: groupdro_step(net, batches, opt, 1e-3, w, 0.01, rng); break;
                case 3: mixup_step(net, batches, opt, 1e-3, 0.2, rng); break;
            }
        }
        std::vector<float> flat;
        for (auto& p : net.parameters())
            flat.insert(flat.end(), p.tensor->vec().begin(), p.tensor->vec().end());
        return flat;
    };
    for (int which = 0; which < 4; ++which) {
        INFO("algorithm ", which);
        CHECK(run(which) == run(which));
    }
}

TEST_CASE("hyperparameter defaults validate; non-positive values rejected") {
    AlgoHyperParams hp;
    CHECK(hp.lr == 0.0005);
    CHECK(hp.lambda_dann == 1.0);
    CHECK(hp.eta_dro == 0.01);
    CHECK(hp.alpha_mixup == 0.2);
    hp.validate();
    hp.eta_dro = 0.0;
    CHECK_THROWS_AS(hp.validate(), std::invalid_argument);
}
