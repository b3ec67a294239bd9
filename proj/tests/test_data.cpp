#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>
#include <fstream>
#include <set>

#include "eegdg/adam.hpp"
#include "eegdg/data.hpp"
#include "eegdg/ops.hpp"

using namespace eegdg;
using namespace eegdg::data;
namespace fs = std::filesystem;
namespace o = eegdg::ops;

namespace {

fs::path temp_dir(const std::string& tag) {
    auto p = fs::temp_directory_path() / ("eegdg_test_" + tag);
    fs::remove_all(p);
    return p;
}

std::vector<char> slurp(const fs::path& p) {
    std::ifstream f(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(f), std::istreambuf_iterator<char>()};
}

}  // namespace

TEST_CASE("degenerate generator: same class identical across domains") {
    GenConfig cfg;
    cfg.subjects = 3;
    cfg.sessions = 2;
    cfg.trials_per_class = 2;
    cfg.shift_strength = 0.0;
    cfg.noise_level = 0.0;
    cfg.seed = 5;
    auto dir = temp_dir("degenerate");
    generate_synthetic(cfg, dir);
    auto ds = load_dataset(dir);

    const auto& ref = ds.records.front();
    for (const auto& rec : ds.records) {
        for (std::size_t i = 0; i < rec.trials.size(); ++i) {
            for (std::size_t j = 0; j < ref.trials.size(); ++j) {
                if (rec.trials[i].label != ref.trials[j].label) continue;
                CHECK(rec.trials[i].signal == ref.trials[j].signal);
            }
        }
    }
    fs::remove_all(dir);
}

TEST_CASE("same seed regenerates bit-identical files") {
    GenConfig cfg;
    cfg.subjects = 2;
    cfg.sessions = 2;
    cfg.trials_per_class = 3;
    cfg.seed = 77;
    auto a = temp_dir("gen_a");
    auto b = temp_dir("gen_b");
    generate_synthetic(cfg, a);
    generate_synthetic(cfg, b);
    for (const auto& e : fs::directory_iterator(a)) {
        auto fname = e.path().filename();
        CHECK(slurp(e.path()) == slurp(b / fname));
    }
    fs::remove_all(a);
    fs::remove_all(b);
}

TEST_CASE("loaded trials match the raw file bytes exactly") {
    GenConfig cfg;
    cfg.subjects = 1;
    cfg.sessions = 2;
    cfg.trials_per_class = 2;
    cfg.seed = 9;
    auto dir = temp_dir("roundtrip");
    generate_synthetic(cfg, dir);
    auto ds = load_dataset(dir);

    auto raw = slurp(dir / "s01_sess1.f32");
    const float* rf = reinterpret_cast<const float*>(raw.data());
    const auto& rec = ds.record({1, 1});
    std::size_t off = 0;
    for (const auto& t : rec.trials) {
        for (float v : t.signal) {
            CHECK(v == rf[off]);
            ++off;
        }
    }
    CHECK(off * sizeof(float) == raw.size());
    fs::remove_all(dir);
}

TEST_CASE("truncated binary fails with a size diagnostic") {
    GenConfig cfg;
    cfg.subjects = 1;
    cfg.sessions = 2;
    cfg.trials_per_class = 2;
    auto dir = temp_dir("truncated");
    generate_synthetic(cfg, dir);
    fs::resize_file(dir / "s01_sess2.f32", 100);
    try {
        load_dataset(dir);
        FAIL("expected load_dataset to throw");
    } catch (const std::runtime_error& e) {
        std::string msg = e.what();
        CHECK(msg.find("s01_sess2.f32") != std::string::npos);
        CHECK(msg.find("100") != std::string::npos);      // actual
        CHECK(msg.find("expected") != std::string::npos);  // wanted
    }
    fs::remove_all(dir);
}

TEST_CASE("15x2 manifest loads 30 records sorted by subject and session") {
    GenConfig cfg;
    cfg.subjects = 15;
    cfg.sessions = 2;
    cfg.trials_per_class = 2;
    cfg.seed = 123;
    auto dir = temp_dir("thirty");
    generate_synthetic(cfg, dir);
    auto ds = load_dataset(dir);
    REQUIRE(ds.records.size() == 30);
    for (std::size_t i = 1; i < ds.records.size(); ++i) {
        CHECK(ds.records[i - 1].domain < ds.records[i].domain);
    }
    fs::remove_all(dir);
}

namespace {

// Shared small dataset for the split/sampler cases.
struct SplitFixture {
    fs::path dir;
    Dataset ds;
    SplitFixture() {
        GenConfig cfg;
        cfg.subjects = 15;
        cfg.sessions = 2;
        cfg.trials_per_class = 5;
        cfg.seed = 31;
        cfg.shift_strength = 0.1;
        cfg.noise_level = 0.3;
        dir = temp_dir("split_fixture");
        generate_synthetic(cfg, dir);
        ds = load_dataset(dir);
    }
    ~SplitFixture() { fs::remove_all(dir); }
};

}  // namespace

TEST_CASE_FIXTURE(SplitFixture, "loso keeps the target's first session as source") {
    auto plan = loso_split(ds, 1, 0.1, 7);
    CHECK(plan.target == DomainKey{1, 2});
    CHECK(plan.source.size() == 29);
    bool has_s1 = false;
    for (const auto& d : plan.source) {
        CHECK(d != plan.target);
        if (d == DomainKey{1, 1}) has_s1 = true;
    }
    CHECK(has_s1);
}

TEST_CASE_FIXTURE(SplitFixture, "loso split is stratified and disjoint") {
    auto plan = loso_split(ds, 3, 0.1, 11);
    // 15 trials/session, 5 per class: expect 1 validation trial per class.
    CHECK(plan.train_total() == 29 * 12);
    CHECK(plan.val_total() == 29 * 3);
    for (std::size_t d = 0; d < plan.source.size(); ++d) {
        std::set<int> train(plan.train_idx[d].begin(), plan.train_idx[d].end());
        for (int v : plan.val_idx[d]) CHECK(train.count(v) == 0);

        const auto& rec = ds.record(plan.source[d]);
        int counts[3] = {0, 0, 0};
        for (int idx : plan.train_idx[d]) ++counts[rec.trials[static_cast<std::size_t>(idx)].label];
        for (int k = 0; k < 3; ++k) CHECK(counts[k] == 4);
    }
}

TEST_CASE_FIXTURE(SplitFixture, "loso errors on a missing session") {
    CHECK_THROWS_AS(loso_split(ds, 99, 0.1, 1), std::invalid_argument);
}

TEST_CASE_FIXTURE(SplitFixture, "generalized split drops the subject entirely") {
    auto plan = generalized_split(ds, 4, 0.1, 3);
    CHECK(plan.source.size() == 28);
    for (const auto& d : plan.source) CHECK(d.subject != 4);
    CHECK(plan.target == DomainKey{4, 2});
}

TEST_CASE_FIXTURE(SplitFixture, "finetune split separates the two sessions") {
    auto ftv = finetune_split(ds, 4);
    CHECK(ftv.train_domain == DomainKey{4, 1});
    CHECK(ftv.test_domain == DomainKey{4, 2});
    CHECK(ds.record(ftv.train_domain).trials.size() == 15);
    CHECK(ds.record(ftv.test_domain).trials.size() == 15);
    CHECK_THROWS_AS(finetune_split(ds, 42), std::invalid_argument);
}

TEST_CASE_FIXTURE(SplitFixture, "sampler yields one batch per source domain") {
    auto plan = loso_split(ds, 1, 0.1, 13);
    SplitDataset split(ds, plan);
    MinibatchSampler sampler(split, 8, 99);
    auto batches = sampler.next<float>();
    REQUIRE(batches.size() == 29);
    long total = 0;
    for (std::size_t d = 0; d < batches.size(); ++d) {
        const auto& b = batches[d];
        CHECK(b.domain == plan.source[d]);
        CHECK(b.role == BatchRole::Train);
        CHECK(b.inputs.shape() == Shape{8, 60, 1000});
        CHECK(b.labels.size() == 8);
        // Every sample belongs to this domain's train indices.
        std::set<int> train(plan.train_idx[d].begin(), plan.train_idx[d].end());
        for (int idx : b.trial_indices) CHECK(train.count(idx) == 1);
        total += 8;
    }
    CHECK(total == 232);
}

TEST_CASE_FIXTURE(SplitFixture, "sampler cycles each domain without replacement") {
    auto plan = loso_split(ds, 1, 0.1, 17);
    SplitDataset split(ds, plan);
    MinibatchSampler sampler(split, 8, 5);
    // 12 train trials per domain: the first 12 draws must be distinct.
    std::vector<int> seen;
    for (int step = 0; step < 2; ++step) {
        auto batches = sampler.next<float>();
        for (int idx : batches[0].trial_indices) seen.push_back(idx);
    }
    std::set<int> first_epoch(seen.begin(), seen.begin() + 12);
    CHECK(first_epoch.size() == 12);
}

TEST_CASE_FIXTURE(SplitFixture, "sampler rejects undersized domains") {
    GenConfig cfg;
    cfg.subjects = 2;
    cfg.sessions = 2;
    cfg.trials_per_class = 2;  // 6 trials, fewer than one batch
    cfg.seed = 8;
    auto dir2 = temp_dir("undersized");
    generate_synthetic(cfg, dir2);
    auto small = load_dataset(dir2);
    auto plan = loso_split(small, 1, 0.1, 1);
    SplitDataset split(small, plan);
    CHECK_THROWS_AS(MinibatchSampler(split, 8, 1), std::invalid_argument);
    fs::remove_all(dir2);
}

TEST_CASE_FIXTURE(SplitFixture, "access log separates roles and flags leakage") {
    auto plan = loso_split(ds, 1, 0.1, 19);
    SplitDataset split(ds, plan);
    MinibatchSampler sampler(split, 8, 7);
    (void)sampler.next<float>();
    (void)split.val_batch<float>(0);
    CHECK(split.log().train_trials() == 232);
    CHECK(split.log().val_trials() == 3);
    CHECK(split.log().test_events() == 0);
    CHECK_FALSE(split.log().leakage_free());  // test never read yet

    auto test = split.test_batch<float>();
    CHECK(test.role == BatchRole::Test);
    CHECK(test.inputs.dim(0) == 15);
    CHECK(split.log().leakage_free());

    // A second test read or a source read after test both break the audit.
    (void)split.val_batch<float>(0);
    CHECK_FALSE(split.log().leakage_free());
}

TEST_CASE("zero trials_per_class is rejected") {
    GenConfig cfg;
    cfg.trials_per_class = 0;
    CHECK_THROWS_AS(generate_synthetic(cfg, temp_dir("reject")),
                    std::invalid_argument);
}

TEST_CASE("shift-free data keeps domains indistinguishable") {
    // With shift_strength = 0, domains differ only by noise realization, so
    // a domain classifier should sit near chance (1/29) on held-out trials.
    GenConfig cfg;
    cfg.subjects = 15;
    cfg.sessions = 2;
    cfg.trials_per_class = 4;
    cfg.shift_strength = 0.0;
    cfg.noise_level = 0.5;
    cfg.seed = 555;
    auto dir = temp_dir("iid");
    generate_synthetic(cfg, dir);
    auto ds = load_dataset(dir);
    auto plan = loso_split(ds, 1, 0.25, 3);  // 3 val trials per domain
    const int G = static_cast<int>(plan.source.size());

    // Per-trial features: channel means and channel RMS (120 dims).
    auto featurize = [&](const Trial& t) {
        std::vector<float> f;
        f.reserve(120);
        for (int c = 0; c < 60; ++c) {
            double m = 0, s = 0;
            for (int i = 0; i < 1000; ++i) {
                double v = t.signal[static_cast<std::size_t>(c) * 1000 + i];
                m += v;
                s += v * v;
            }
            f.push_back(static_cast<float>(m / 1000.0));
            f.push_back(static_cast<float>(std::sqrt(s / 1000.0)));
        }
        return f;
    };

    std::vector<float> xtr, xva;
    std::vector<int> ytr, yva;
    for (int d = 0; d < G; ++d) {
        const auto& rec = ds.record(plan.source[static_cast<std::size_t>(d)]);
        for (int idx : plan.train_idx[static_cast<std::size_t>(d)]) {
            auto f = featurize(rec.trials[static_cast<std::size_t>(idx)]);
            xtr.insert(xtr.end(), f.begin(), f.end());
            ytr.push_back(d);
        }
        for (int idx : plan.val_idx[static_cast<std::size_t>(d)]) {
            auto f = featurize(rec.trials[static_cast<std::size_t>(idx)]);
            xva.insert(xva.end(), f.begin(), f.end());
            yva.push_back(d);
        }
    }
    const int ntr = static_cast<int>(ytr.size());
    const int nva = static_cast<int>(yva.size());
    Tensor<float> Xtr({ntr, 120}, std::move(xtr));
    Tensor<float> Xva({nva, 120}, std::move(xva));

    Rng rng(1);
    Tensor<float> W({G, 120});
    for (long i = 0; i < W.size(); ++i)
        W.data()[i] = static_cast<float>(uniform_in(rng, -0.05, 0.05));
    Tensor<float> B({G});
    NamedParam<float> pw{"w", &W}, pb{"b", &B};
    AdamState<float> opt({pw, pb});
    for (int step = 0; step < 150; ++step) {
        W.zero_grad();
        B.zero_grad();
        Tape<float> tape;
        tape.watch(W);
        tape.watch(B);
        auto logits = o::linear(&tape, Xtr, W, B);
        auto ce = o::softmax_cross_entropy(&tape, logits, ytr);
        tape.backward(ce.loss);
        opt.step({pw, pb}, 0.01);
    }
    auto logits = o::linear<float>(nullptr, Xva, W, B);
    int hits = 0;
    for (int i = 0; i < nva; ++i) {
        int arg = 0;
        for (int c = 1; c < G; ++c) {
            if (logits.data()[static_cast<long>(i) * G + c] >
                logits.data()[static_cast<long>(i) * G + arg])
                arg = c;
        }
        hits += (arg == yva[static_cast<std::size_t>(i)]) ? 1 : 0;
    }
    const double acc = 100.0 * hits / nva;
    const double chance = 100.0 / G;
    MESSAGE("domain classifier accuracy ", acc, "% vs chance ", chance, "%");
    CHECK(acc <= chance + 5.0);
    fs::remove_all(dir);
}
