#include "eegdg/verify.hpp"

#include <unistd.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>

#include "eegdg/algorithms.hpp"
#include "eegdg/gradcheck.hpp"
#include "eegdg/models.hpp"

namespace eegdg {
namespace verify {

namespace fs = std::filesystem;
namespace o = eegdg::ops;

namespace {

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.3g", v);
    return buf;
}

Tensor<double> randn(Shape shape, Rng& rng, double scale = 1.0) {
    Tensor<double> t(std::move(shape));
    Gaussian g;
    for (long i = 0; i < t.size(); ++i) t.data()[i] = scale * g(rng);
    return t;
}

void add_grad_item(Report& rep, const std::string& name, double err,
                   double tol = 1e-4) {
    rep.items.push_back({"grad/" + name, err < tol,
                         "max rel err " + fmt(err) + " (tol " + fmt(tol) + ")"});
}

// One grad_check over a few seeds, keeping the worst error.
double worst_err(const std::function<double(std::uint64_t)>& one) {
    double worst = 0;
    for (std::uint64_t seed = 0; seed < 3; ++seed) {
        worst = std::max(worst, one(seed));
    }
    return worst;
}

void primitive_checks(Report& rep) {
    auto fd = [](const ScalarFn<double>& f, const Tensor<double>& x) {
        return grad_check<double>(f, x, 1e-5).max_rel_err;
    };

    add_grad_item(rep, "conv2d/input", worst_err([&](std::uint64_t s) {
        Rng rng(derive_seed(s, "v_conv2d"));
        auto x = randn({2, 2, 5, 6}, rng);
        auto w = randn({3, 2, 2, 3}, rng);
        return fd([&](Tensor<double>& t, Tape<double>* tp) {
            return o::sum(tp, o::conv2d(tp, t, w, 1, 1, 1, 1));
        }, x);
    }));
    add_grad_item(rep, "conv2d/weight", worst_err([&](std::uint64_t s) {
        Rng rng(derive_seed(s, "v_conv2dw"));
        auto x = randn({2, 2, 5, 6}, rng);
        auto w = randn({3, 2, 2, 3}, rng);
        return fd([&](Tensor<double>& t, Tape<double>* tp) {
            return o::sum(tp, o::conv2d(tp, x, t, 2, 2, 1, 1));
        }, w);
    }));
    add_grad_item(rep, "conv1d", worst_err([&](std::uint64_t s) {
        Rng rng(derive_seed(s, "v_conv1d"));
        auto x = randn({2, 3, 9}, rng);
        auto w = randn({2, 3, 3}, rng);
        return std::max(
            fd([&](Tensor<double>& t, Tape<double>* tp) {
                return o::sum(tp, o::conv1d(tp, t, w, 1, 1));
            }, x),
            fd([&](Tensor<double>& t, Tape<double>* tp) {
                return o::sum(tp, o::conv1d(tp, x, t, 2, 1));
            }, w));
    }));
    add_grad_item(rep, "depthwise_conv2d", worst_err([&](std::uint64_t s) {
        Rng rng(derive_seed(s, "v_dw"));
        auto x = randn({2, 3, 5, 6}, rng);
        auto w = randn({6, 1, 2, 3}, rng);
        return std::max(
            fd([&](Tensor<double>& t, Tape<double>* tp) {
                return o::sum(tp, o::depthwise_conv2d(tp, t, w, 2, 1, 1, 1, 1));
            }, x),
            fd([&](Tensor<double>& t, Tape<double>* tp) {
                return o::sum(tp, o::depthwise_conv2d(tp, x, t, 2, 1, 1, 1, 1));
            }, w));
    }));
    add_grad_item(rep, "separable_conv2d", worst_err([&](std::uint64_t s) {
        Rng rng(derive_seed(s, "v_sep"));
        auto x = randn({1, 2, 4, 7}, rng);
        auto wd = randn({4, 1, 1, 3}, rng);
        auto wp = randn({3, 4, 1, 1}, rng);
        return std::max(
            fd([&](Tensor<double>& t, Tape<double>* tp) {
                return o::sum(tp, o::separable_conv2d(tp, x, t, wp, 2, 0, 1));
            }, wd),
            fd([&](Tensor<double>& t, Tape<double>* tp) {
                return o::sum(tp, o::separable_conv2d(tp, x, wd, t, 2, 0, 1));
            }, wp));
    }));
    add_grad_item(rep, "maxpool2d", worst_err([&](std::uint64_t s) {
        Rng rng(derive_seed(s, "v_mp2"));
        auto x = randn({2, 2, 6, 8}, rng);
        return fd([&](Tensor<double>& t, Tape<double>* tp) {
            return o::sum(tp, o::elu(tp, o::maxpool2d(tp, t, 2, 2)));
        }, x);
    }));
    add_grad_item(rep, "avgpool2d", worst_err([&](std::uint64_t s) {
        Rng rng(derive_seed(s, "v_ap2"));
        auto x = randn({2, 2, 6, 8}, rng);
        return fd([&](Tensor<double>& t, Tape<double>* tp) {
            return o::sum(tp, o::elu(tp, o::avgpool2d(tp, t, 3, 2)));
        }, x);
    }));
    add_grad_item(rep, "maxpool1d", worst_err([&](std::uint64_t s) {
        Rng rng(derive_seed(s, "v_mp1"));
        auto x = randn({2, 3, 9}, rng);
        return fd([&](Tensor<double>& t, Tape<double>* tp) {
            return o::sum(tp, o::elu(tp, o::maxpool1d(tp, t, 2)));
        }, x);
    }));
    add_grad_item(rep, "avgpool1d", worst_err([&](std::uint64_t s) {
        Rng rng(derive_seed(s, "v_ap1"));
        auto x = randn({2, 3, 9}, rng);
        return fd([&](Tensor<double>& t, Tape<double>* tp) {
            return o::sum(tp, o::elu(tp, o::avgpool1d(tp, t, 3)));
        }, x);
    }));
    add_grad_item(rep, "elu", worst_err([&](std::uint64_t s) {
        Rng rng(derive_seed(s, "v_elu"));
        auto x = randn({3, 7}, rng, 2.0);
        return fd([&](Tensor<double>& t, Tape<double>* tp) {
            return o::sum(tp, o::elu(tp, t));
        }, x);
    }));
    add_grad_item(rep, "linear", worst_err([&](std::uint64_t s) {
        Rng rng(derive_seed(s, "v_lin"));
        auto x = randn({3, 5}, rng);
        auto w = randn({4, 5}, rng);
        auto b = randn({4}, rng);
        double e = fd([&](Tensor<double>& t, Tape<double>* tp) {
            return o::sum(tp, o::linear(tp, t, w, b));
        }, x);
        e = std::max(e, fd([&](Tensor<double>& t, Tape<double>* tp) {
            return o::sum(tp, o::linear(tp, x, t, b));
        }, w));
        return std::max(e, fd([&](Tensor<double>& t, Tape<double>* tp) {
            return o::sum(tp, o::linear(tp, x, w, t));
        }, b));
    }));
    add_grad_item(rep, "batch_norm/train", worst_err([&](std::uint64_t s) {
        Rng rng(derive_seed(s, "v_bn"));
        auto x = randn({3, 2, 7}, rng);
        auto g = randn({2}, rng, 0.3);
        for (long i = 0; i < g.size(); ++i) g.data()[i] += 1.0;
        auto b = randn({2}, rng, 0.3);
        double e = fd([&](Tensor<double>& t, Tape<double>* tp) {
            Tensor<double> rm({2}), rv = Tensor<double>::full({2}, 1.0);
            return o::sum(tp, o::elu(tp, o::batch_norm(tp, t, g, b, rm, rv, true)));
        }, x);
        return std::max(e, fd([&](Tensor<double>& t, Tape<double>* tp) {
            Tensor<double> rm({2}), rv = Tensor<double>::full({2}, 1.0);
            return o::sum(tp, o::elu(tp, o::batch_norm(tp, x, t, b, rm, rv, true)));
        }, g));
    }));
    add_grad_item(rep, "batch_norm/eval", worst_err([&](std::uint64_t s) {
        Rng rng(derive_seed(s, "v_bne"));
        auto x = randn({3, 2, 7}, rng);
        auto g = Tensor<double>::full({2}, 1.25);
        auto b = Tensor<double>::full({2}, -0.1);
        return fd([&](Tensor<double>& t, Tape<double>* tp) {
            Tensor<double> rm = Tensor<double>::full({2}, 0.5);
            Tensor<double> rv = Tensor<double>::full({2}, 2.0);
            return o::sum(tp, o::elu(tp, o::batch_norm(tp, t, g, b, rm, rv, false)));
        }, x);
    }));
    add_grad_item(rep, "dropout", worst_err([&](std::uint64_t s) {
        Rng rng(derive_seed(s, "v_drop"));
        auto x = randn({4, 6}, rng);
        return fd([&, s](Tensor<double>& t, Tape<double>* tp) {
            Rng mask(derive_seed(s, "v_mask"));
            return o::sum(tp, o::dropout(tp, t, 0.4, true, &mask));
        }, x);
    }));
    add_grad_item(rep, "softmax_cross_entropy", worst_err([&](std::uint64_t s) {
        Rng rng(derive_seed(s, "v_ce"));
        auto z = randn({4, 3}, rng, 2.0);
        std::vector<int> labels = {0, 1, 2, 1};
        return fd([&](Tensor<double>& t, Tape<double>* tp) {
            return o::softmax_cross_entropy(tp, t, labels).loss;
        }, z);
    }));
    add_grad_item(rep, "softmax_cross_entropy/soft", worst_err([&](std::uint64_t s) {
        Rng rng(derive_seed(s, "v_ces"));
        auto z = randn({3, 3}, rng, 2.0);
        std::vector<double> soft = {0.2, 0.8, 0.0, 1.0, 0.0, 0.0, 0.3, 0.3, 0.4};
        return fd([&](Tensor<double>& t, Tape<double>* tp) {
            return o::softmax_cross_entropy_soft(tp, t, soft).loss;
        }, z);
    }));
    add_grad_item(rep, "add_mul_scale", worst_err([&](std::uint64_t s) {
        Rng rng(derive_seed(s, "v_ams"));
        auto x = randn({5, 4}, rng);
        auto y = randn({5, 4}, rng);
        return fd([&](Tensor<double>& t, Tape<double>* tp) {
            return o::sum(tp, o::scale(tp, o::mul(tp, o::add(tp, t, y), t), -1.3));
        }, x);
    }));
}

void model_checks(Report& rep) {
    Rng rng(424242);
    auto x = randn({2, 60, 1000}, rng);
    std::vector<int> labels = {0, 2};
    for (auto name : {nn::ModelName::DeepConvNet, nn::ModelName::EEGNet,
                      nn::ModelName::ResNet1D8, nn::ModelName::ResNet1D18}) {
        auto cfg = nn::build_model(name);
        nn::Network<double> net(cfg, 7);
        auto params = net.parameters();
        double worst = 0;

        auto f_in = [&](Tensor<double>& t, Tape<double>* tape) {
            Rng drop(4242);
            nn::Ctx<double> ctx{tape, true, &drop};
            auto logits = net.forward(t, ctx);
            return o::softmax_cross_entropy(tape, logits, labels).loss;
        };
        worst = std::max(worst,
                         grad_check<double>(f_in, x, 1e-6, 6, 11).max_rel_err);

        for (std::size_t pi : {std::size_t(0), params.size() / 2, params.size() - 1}) {
            auto x0 = params[pi].tensor->clone();
            auto f_par = [&, pi](Tensor<double>& t, Tape<double>* tape) {
                auto ps = net.parameters();
                *ps[pi].tensor = t;
                Rng drop(4242);
                nn::Ctx<double> ctx{tape, true, &drop};
                auto logits = net.forward(x, ctx);
                return o::softmax_cross_entropy(tape, logits, labels).loss;
            };
            worst = std::max(
                worst, grad_check<double>(f_par, x0, 1e-6, 5, 13 + pi).max_rel_err);
            auto ps = net.parameters();
            *ps[pi].tensor = x0;
        }
        add_grad_item(rep, std::string("model/") + nn::model_name_str(name), worst);
    }
}

void data_checks(Report& rep) {
    auto dir = fs::temp_directory_path() /
               ("eegdg_verify_" + std::to_string(::getpid()));
    fs::remove_all(dir);
    data::GenConfig cfg;
    cfg.subjects = 3;
    cfg.sessions = 2;
    cfg.trials_per_class = 4;
    cfg.seed = 99;
    data::generate_synthetic(cfg, dir);
    auto dir2 = dir;
    dir2 += "_b";
    data::generate_synthetic(cfg, dir2);

    // Bit-exact regeneration.
    bool same = true;
    for (const auto& e : fs::directory_iterator(dir)) {
        std::ifstream a(e.path(), std::ios::binary);
        std::ifstream b(dir2 / e.path().filename(), std::ios::binary);
        std::string sa((std::istreambuf_iterator<char>(a)), {});
        std::string sb((std::istreambuf_iterator<char>(b)), {});
        same = same && sa == sb;
    }
    rep.items.push_back({"data/regenerate-bit-exact", same,
                         same ? "identical bytes" : "files differ"});

    auto ds = data::load_dataset(dir);
    auto plan = data::loso_split(ds, 1, 0.1, 5);
    const bool counts = plan.source.size() == 5 && plan.target == data::DomainKey{1, 2};
    rep.items.push_back({"data/loso-structure", counts,
                         "source domains " + std::to_string(plan.source.size())});

    bool disjoint = true;
    for (std::size_t d = 0; d < plan.source.size(); ++d) {
        std::set<int> tr(plan.train_idx[d].begin(), plan.train_idx[d].end());
        for (int v : plan.val_idx[d]) disjoint = disjoint && !tr.count(v);
    }
    rep.items.push_back({"data/train-val-disjoint", disjoint, ""});

    data::SplitDataset split(ds, plan);
    data::MinibatchSampler sampler(split, 8, 1);
    std::vector<int> seen;
    const int per_domain = static_cast<int>(plan.train_idx[0].size());
    while (static_cast<int>(seen.size()) < per_domain) {
        auto batches = sampler.next<float>();
        for (int idx : batches[0].trial_indices) seen.push_back(idx);
    }
    std::set<int> first_epoch(seen.begin(), seen.begin() + per_domain);
    rep.items.push_back({"data/sampler-epoch-cycle",
                         static_cast<int>(first_epoch.size()) == per_domain,
                         "distinct draws " + std::to_string(first_epoch.size()) +
                             "/" + std::to_string(per_domain)});

    (void)split.test_batch<float>();
    rep.items.push_back({"data/access-log", split.log().leakage_free(),
                         "single test read after sources"});

    fs::remove_all(dir);
    fs::remove_all(dir2);
}

void algo_checks(Report& rep) {
    // Degeneracy equivalences on a reduced-length EEGNet.
    auto cfg = nn::build_eegnet(60, 250);
    auto make_batches = [&](int domains) {
        std::vector<data::DomainBatch<float>> out;
        for (int d = 0; d < domains; ++d) {
            data::DomainBatch<float> b;
            b.domain = {d + 1, 1};
            b.role = data::BatchRole::Train;
            b.inputs = Tensor<float>({8, 60, 250});
            Rng rng(derive_seed(31337, "v_batch", static_cast<std::uint64_t>(d)));
            Gaussian g;
            for (long i = 0; i < b.inputs.size(); ++i)
                b.inputs.data()[i] = static_cast<float>(g(rng));
            for (int i = 0; i < 8; ++i) b.labels.push_back(i % 3);
            out.push_back(std::move(b));
        }
        return out;
    };
    auto batches = make_batches(3);
    auto domains = std::vector<data::DomainKey>{{1, 1}, {2, 1}, {3, 1}};

    auto max_diff = [](nn::Network<float>& a, nn::Network<float>& b) {
        double worst = 0;
        auto pa = a.parameters();
        auto pb = b.parameters();
        for (std::size_t i = 0; i < pa.size(); ++i) {
            for (long j = 0; j < pa[i].tensor->size(); ++j) {
                worst = std::max(worst,
                                 std::abs(static_cast<double>(pa[i].tensor->data()[j]) -
                                          static_cast<double>(pb[i].tensor->data()[j])));
            }
        }
        return worst;
    };

    {
        nn::Network<float> a(cfg, 1), b(cfg, 1);
        AdamState<float> oa(a.parameters());
        algo::Discriminator<float> disc(cfg.feature_dim, domains, 2);
        auto pb = b.parameters();
        for (auto& p : disc.parameters()) pb.push_back(p);
        AdamState<float> ob(pb);
        Rng ra(3), rb(3);
        algo::erm_step(a, batches, oa, 5e-4, ra);
        algo::dann_step(b, disc, batches, ob, 5e-4, 0.0, rb);
        const double d = max_diff(a, b);
        rep.items.push_back({"algo/dann-lambda0-equals-erm", d <= 1e-6,
                             "max param diff " + fmt(d)});
    }
    {
        nn::Network<float> a(cfg, 1), b(cfg, 1);
        AdamState<float> oa(a.parameters()), ob(b.parameters());
        Rng ra(3), rb(3);
        algo::erm_step(a, batches, oa, 5e-4, ra);
        auto w = algo::GroupWeights::uniform(domains);
        algo::groupdro_step(b, batches, ob, 5e-4, w, 0.0, rb);
        const double d = max_diff(a, b);
        rep.items.push_back({"algo/groupdro-eta0-equals-erm", d <= 1e-6,
                             "max param diff " + fmt(d)});
    }
    {
        nn::Network<float> a(cfg, 1), b(cfg, 1);
        AdamState<float> oa(a.parameters()), ob(b.parameters());
        Rng ra(3), rb(3);
        algo::erm_step(a, batches, oa, 5e-4, ra);
        std::vector<algo::MixedBatch<float>> mixed;
        for (const auto& bb : batches) {
            mixed.push_back(algo::mixup_batch_with_lambdas(
                bb, bb, std::vector<double>(8, 1.0)));
        }
        algo::mixed_step(b, mixed, ob, 5e-4, rb);
        const double d = max_diff(a, b);
        rep.items.push_back({"algo/mixup-lambda1-equals-erm", d <= 1e-6,
                             "max param diff " + fmt(d)});
    }
    {
        algo::GroupWeights w;
        w.domains = domains;
        w.domains.resize(2);
        w.q = {0.5, 0.5};
        w.update({1.0, 0.0}, 0.01);
        const bool ok = std::abs(w.q[0] - 0.5025) < 5e-5 &&
                        std::abs(w.q[1] - 0.4975) < 5e-5;
        rep.items.push_back({"algo/groupdro-update-oracle", ok,
                             "q' = [" + fmt(w.q[0]) + ", " + fmt(w.q[1]) + "]"});
    }
    {
        Rng rng(4096);
        int outside = 0;
        for (int i = 0; i < 10000; ++i) {
            const double lam = sample_beta(rng, 0.2, 0.2);
            if (lam < 0.1 || lam > 0.9) ++outside;
        }
        rep.items.push_back({"algo/beta-bimodality", outside >= 5000,
                             std::to_string(outside) + "/10000 outside [0.1,0.9]"});
    }
    {
        Tensor<float> w({2}, {1.f, 1.f});
        NamedParam<float> p{"w", &w};
        AdamState<float> st({p});
        w.grad_storage()[0] = 0.5f;
        w.grad_storage()[1] = -2.f;
        st.step({p}, 0.01);
        const bool ok = std::abs(w.data()[0] - 0.99f) < 1e-5 &&
                        std::abs(w.data()[1] - 1.01f) < 1e-5;
        rep.items.push_back({"opt/adam-first-step", ok,
                             "w = [" + fmt(w.data()[0]) + ", " + fmt(w.data()[1]) + "]"});
    }
}

}  // namespace

Report run_verification() {
    Report rep;
    primitive_checks(rep);
    model_checks(rep);
    data_checks(rep);
    algo_checks(rep);
    return rep;
}

std::string format_report(const Report& rep) {
    std::ostringstream os;
    std::size_t passed = 0;
    for (const auto& i : rep.items) {
        os << (i.pass ? "[PASS] " : "[FAIL] ") << i.name;
        if (!i.detail.empty()) os << "  (" << i.detail << ")";
        os << "\n";
        if (i.pass) ++passed;
    }
    os << passed << "/" << rep.items.size() << " checks passed\n";
    return os.str();
}

}  // namespace verify
}  // namespace eegdg
