#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <filesystem>

#include "eegdg/harness.hpp"

using namespace eegdg;
using namespace eegdg::harness;
namespace fs = std::filesystem;

namespace {

// Shared small dataset: 2 subjects x 2 sessions x 50 trials/class, enough
// for a 150-trial target session.
struct Env {
    fs::path dir;
    data::Dataset ds;
    Env() {
        dir = fs::temp_directory_path() / "eegdg_harness_fixture";
        fs::remove_all(dir);
        data::GenConfig cfg;
        cfg.subjects = 2;
        cfg.sessions = 2;
        cfg.trials_per_class = 50;
        cfg.shift_strength = 0.1;
        cfg.noise_level = 0.5;
        cfg.seed = 7;
        data::generate_synthetic(cfg, dir);
        ds = data::load_dataset(dir);
    }
    ~Env() { fs::remove_all(dir); }
};

Env& env() {
    static Env e;
    return e;
}

RunConfig quick_config(int steps) {
    RunConfig cfg;
    cfg.model = nn::ModelName::EEGNet;
    cfg.algorithm = algo::AlgoName::ERM;
    cfg.target_subject = 1;
    cfg.max_steps = steps;
    cfg.eval_interval = 1;
    cfg.base_seed = 11;
    return cfg;
}

}  // namespace

TEST_CASE("search space: trial one is the defaults, later trials sample ranges") {
    SearchSpace space;
    for (auto a : {algo::AlgoName::ERM, algo::AlgoName::DANN,
                   algo::AlgoName::GroupDRO, algo::AlgoName::Mixup}) {
        auto hp1 = space.draw(a, 1, 5);
        CHECK(hp1.lr == 0.0005);
        CHECK(hp1.lambda_dann == 1.0);
        CHECK(hp1.eta_dro == 0.01);
        CHECK(hp1.alpha_mixup == 0.2);
    }
    for (int trial : {2, 3}) {
        auto hp = space.draw(algo::AlgoName::DANN, trial, 5);
        CHECK(hp.lr >= 1e-5);
        CHECK(hp.lr <= std::pow(10.0, -3.5));
        CHECK(hp.lambda_dann >= 1e-2);
        CHECK(hp.lambda_dann <= 1e2);
        CHECK(hp.eta_dro == 0.01);     // untouched for DANN
        CHECK(hp.alpha_mixup == 0.2);  // untouched for DANN
    }
    auto a = space.draw(algo::AlgoName::Mixup, 2, 5);
    CHECK(a.alpha_mixup >= std::pow(10.0, -1.5));
    CHECK(a.alpha_mixup <= 1e-1);
    // Deterministic redraw.
    auto b = space.draw(algo::AlgoName::Mixup, 2, 5);
    CHECK(a.lr == b.lr);
    CHECK(a.alpha_mixup == b.alpha_mixup);
}

TEST_CASE("full-protocol enumeration counts") {
    SweepOptions opts;
    std::vector<int> subjects;
    for (int s = 1; s <= 15; ++s) subjects.push_back(s);

    auto one_pair = enumerate_runs(nn::ModelName::ResNet1D18,
                                   algo::AlgoName::ERM, subjects, opts);
    CHECK(one_pair.size() == 135);  // 15 x 3 x 3

    auto all = enumerate_full_protocol(nn::ModelName::ResNet1D18, subjects, opts);
    CHECK(all.size() == 945);  // (4 ERM + 3 DG) x 15 x 9

    // Sweep bookkeeping invariant: configs x subjects x 3 x 3 exactly.
    CHECK(all.size() == 7u * subjects.size() * 3u * 3u);
}

TEST_CASE("train_one with zero steps selects the initial checkpoint") {
    auto plan = data::loso_split(env().ds, 1, 0.1, 3);
    auto rec = train_one(env().ds, quick_config(0), plan);
    CHECK(rec.result.completed);
    CHECK(rec.result.selected_step == 0);
    CHECK(rec.result.steps_run == 0);
    CHECK(rec.result.test_total == 150);

    // Chance level on the 150 balanced trials. One untrained network maps
    // the three near-identical class templates to essentially three argmax
    // decisions, so a single init is a coarse lottery; the mean over init
    // seeds settles at chance.
    data::SplitDataset split(env().ds, plan);
    auto test = split.test_batch<float>();
    auto cfg = nn::build_eegnet(env().ds.manifest.config.channels,
                                env().ds.manifest.config.samples);
    double mean_acc = 0.0;
    const int inits = 12;
    for (int s = 0; s < inits; ++s) {
        nn::Network<float> net(cfg, derive_seed(900, "init_probe",
                                                static_cast<std::uint64_t>(s)));
        mean_acc += evaluate_batch(net, test);
    }
    mean_acc /= inits;
    MESSAGE("mean init accuracy over ", inits, " seeds: ", mean_acc, "%");
    CHECK(mean_acc > 23.3);
    CHECK(mean_acc < 43.3);
}

TEST_CASE("train_one is deterministic and leakage-audited") {
    auto plan = data::loso_split(env().ds, 1, 0.1, 3);
    data::AccessLog log1, log2;
    TrainOneOptions o1, o2;
    o1.log_out = &log1;
    o2.log_out = &log2;
    auto a = train_one(env().ds, quick_config(2), plan, o1);
    auto b = train_one(env().ds, quick_config(2), plan, o2);
    CHECK(a.result.completed);
    CHECK(a.deterministic_json() == b.deterministic_json());

    CHECK(log1.leakage_free());
    CHECK(log1.test_trials() == 150);
    CHECK(log1.test_events() == 1);
    CHECK(log1.train_trials() == 2 * 3 * 8);  // 2 steps x 3 domains x 8
}

TEST_CASE("train_one rejects a mismatched plan") {
    auto plan = data::loso_split(env().ds, 2, 0.1, 3);
    CHECK_THROWS_AS(train_one(env().ds, quick_config(1), plan),
                    std::invalid_argument);
}

TEST_CASE("run records survive a json round trip") {
    auto plan = data::loso_split(env().ds, 1, 0.1, 3);
    auto rec = train_one(env().ds, quick_config(1), plan);
    auto back = RunRecord::from_json(rec.to_json());
    CHECK(back.deterministic_json() == rec.deterministic_json());
    CHECK(back.result.wall_ms == rec.result.wall_ms);
}

TEST_CASE("checkpoints round-trip bit-exactly and validate their header") {
    auto cfg = nn::build_eegnet();
    nn::Network<float> net(cfg, 99);
    // Perturb running stats so buffers are non-trivial.
    for (auto& b : net.buffers()) b.tensor->data()[0] = 0.25f;

    ckpt::CheckpointMeta meta;
    meta.model = "EEGNet";
    meta.excluded_subject = 4;
    auto path = fs::temp_directory_path() / "eegdg_ckpt_test.eegdg";
    ckpt::save_checkpoint(net, meta, path);

    auto m2 = ckpt::read_checkpoint_meta(path);
    CHECK(m2.model == "EEGNet");
    CHECK(m2.excluded_subject == 4);

    ckpt::CheckpointMeta m3;
    auto loaded = ckpt::load_checkpoint(path, &m3);
    auto pa = net.parameters();
    auto pb = loaded.parameters();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) {
        CHECK(pa[i].tensor->vec() == pb[i].tensor->vec());
    }
    auto ba = net.buffers();
    auto bb = loaded.buffers();
    for (std::size_t i = 0; i < ba.size(); ++i) {
        CHECK(ba[i].tensor->vec() == bb[i].tensor->vec());
    }

    // Corrupt the magic: load must fail.
    {
        std::fstream f(path, std::ios::in | std::ios::out | std::ios::binary);
        f.write("XXXXXX", 6);
    }
    CHECK_THROWS_AS(ckpt::load_checkpoint(path), std::runtime_error);
    fs::remove(path);
}

namespace {

RunRecord fake_record(nn::ModelName model, algo::AlgoName alg, int subject,
                      int trial, int seed_idx, double val, double test,
                      bool completed = true) {
    RunRecord r;
    r.config.model = model;
    r.config.algorithm = alg;
    r.config.target_subject = subject;
    r.config.hp_trial = trial;
    r.config.seed_idx = seed_idx;
    r.result.best_val_accuracy = val;
    r.result.test_accuracy = test;
    r.result.completed = completed;
    return r;
}

}  // namespace

TEST_CASE("aggregation picks the best-validation trial and averages seeds") {
    std::vector<RunRecord> records;
    // Subject 1: trial 1 validates better; reported = mean(70, 74) = 72.
    records.push_back(fake_record(nn::ModelName::EEGNet, algo::AlgoName::ERM, 1,
                                  1, 1, 60.0, 70.0));
    records.push_back(fake_record(nn::ModelName::EEGNet, algo::AlgoName::ERM, 1,
                                  1, 2, 62.0, 74.0));
    records.push_back(fake_record(nn::ModelName::EEGNet, algo::AlgoName::ERM, 1,
                                  2, 1, 50.0, 90.0));
    records.push_back(fake_record(nn::ModelName::EEGNet, algo::AlgoName::ERM, 1,
                                  2, 2, 51.0, 91.0));
    // Subject 2: one failed run marks the cell incomplete.
    records.push_back(fake_record(nn::ModelName::EEGNet, algo::AlgoName::ERM, 2,
                                  1, 1, 55.0, 66.0));
    records.push_back(fake_record(nn::ModelName::EEGNet, algo::AlgoName::ERM, 2,
                                  1, 2, 55.0, 66.0, false));

    auto table = aggregate_report(records, LabelBy::Model);
    REQUIRE(table.rows.size() == 1);
    REQUIRE(table.rows[0].cells.count(1) == 1);
    CHECK(table.rows[0].cells.at(1) == doctest::Approx(72.0));
    CHECK(table.rows[0].cells.count(2) == 0);  // incomplete
}

TEST_CASE("reference-row fixture renders and re-averages correctly") {
    report::ReportTable table;
    table.row_header = "Model";
    for (int s = 1; s <= 15; ++s) table.subjects.push_back(s);
    report::ReportRow row;
    row.label = "ResNet1D-18";
    const double cells[15] = {73.33, 97.33, 76.44, 93.33, 46.00,
                              37.78, 40.89, 56.89, 38.00, 56.22,
                              41.78, 68.89, 64.00, 70.44, 77.33};
    for (int s = 1; s <= 15; ++s) row.cells[s] = cells[s - 1];
    table.rows.push_back(row);

    CHECK(std::abs(report::row_average(table.rows[0]) - 62.58) < 0.005);

    auto csv = report::render_csv(table);
    CHECK(csv.find("ResNet1D-18,73.33,97.33,76.44,93.33,46.00,37.78,40.89,"
                   "56.89,38.00,56.22,41.78,68.89,64.00,70.44,77.33,62.58") !=
          std::string::npos);
    auto md = report::render_markdown(table);
    CHECK(md.find("62.58") != std::string::npos);

    // Second fixture row: the fine-tuning style row re-averages to 55.33.
    report::ReportRow ft;
    ft.label = "ERM (Fine-tuning)";
    const double cells2[15] = {49.33, 54.00, 55.33, 95.33, 38.67,
                               42.00, 42.67, 44.67, 38.00, 49.33,
                               46.00, 68.00, 64.67, 62.67, 79.33};
    for (int s = 1; s <= 15; ++s) ft.cells[s] = cells2[s - 1];
    CHECK(std::abs(report::row_average(ft) - 55.33) < 0.005);
}

TEST_CASE("render handles single-subject and missing cells") {
    report::ReportTable table;
    table.subjects = {1, 2};
    report::ReportRow row;
    row.label = "EEGNet";
    row.cells[1] = 50.0;
    table.rows.push_back(row);
    auto csv = report::render_csv(table);
    CHECK(csv.find("EEGNet,50.00,,50.00") != std::string::npos);
}

TEST_CASE("fine-tuning freezes features, runs 1900 steps, lr=0 is a no-op") {
    auto& e = env();
    auto cfg = nn::build_model(nn::ModelName::EEGNet,
                               e.ds.manifest.config.channels,
                               e.ds.manifest.config.samples);
    nn::Network<float> net(cfg, 123);
    ckpt::CheckpointMeta meta;
    meta.model = "EEGNet";
    meta.excluded_subject = 1;

    // Leakage guard: a checkpoint that saw the subject is rejected.
    ckpt::CheckpointMeta bad = meta;
    bad.excluded_subject = -1;
    CHECK_THROWS_AS(fine_tune(e.ds, net, bad, 1), std::invalid_argument);

    FineTuneOptions zero;
    zero.lr = 0.0;
    auto rz = fine_tune(e.ds, net, meta, 1, zero);
    CHECK(rz.post_accuracy == rz.pre_accuracy);
    CHECK(rz.feature_hash_before == rz.feature_hash_after);

    FineTuneOptions opts;  // 100 epochs at 1e-6
    auto r = fine_tune(e.ds, net, meta, 1, opts);
    CHECK(r.epochs == 100);
    CHECK(r.optimizer_steps == 1900);  // ceil(150/8) = 19 batches x 100
    CHECK(r.feature_hash_before == r.feature_hash_after);
    CHECK(r.pre_accuracy >= 0.0);
    CHECK(r.post_accuracy >= 0.0);
}

TEST_CASE("execute_runs writes runs.jsonl and checkpoints") {
    auto& e = env();
    SweepOptions opts;
    opts.subjects = {1};
    opts.hp_trials = 1;
    opts.seeds = 1;
    opts.max_steps = 1;
    opts.eval_interval = 1;
    opts.base_seed = 21;
    opts.out_dir = fs::temp_directory_path() / "eegdg_sweep_out";
    fs::remove_all(opts.out_dir);

    auto configs = enumerate_runs(nn::ModelName::EEGNet, algo::AlgoName::ERM,
                                  opts.subjects, opts);
    REQUIRE(configs.size() == 1);
    auto records = execute_runs(e.ds, configs, opts);
    REQUIRE(records.size() == 1);
    CHECK(records[0].result.completed);

    std::ifstream f(opts.out_dir / "runs.jsonl");
    REQUIRE(f.good());
    std::string line;
    std::getline(f, line);
    auto back = RunRecord::from_json(line);
    CHECK(back.deterministic_json() == records[0].deterministic_json());
    CHECK(fs::exists(back.checkpoint_path));

    // The stored checkpoint reproduces the recorded test accuracy.
    auto net = ckpt::load_checkpoint(back.checkpoint_path);
    auto plan = data::loso_split(e.ds, 1, 0.1,
                                 derive_seed(opts.base_seed, "plan", 1));
    data::SplitDataset split(e.ds, plan);
    auto test = split.test_batch<float>();
    CHECK(evaluate_batch(net, test) ==
          doctest::Approx(records[0].result.test_accuracy));
    fs::remove_all(opts.out_dir);
}
