#include "eegdg/harness.hpp"

#include <atomic>
#include <chrono>
#include <cstdio>
#include <fstream>
#include <map>
#include <mutex>
#include <set>
#include <thread>

#include <json.hpp>

namespace eegdg {
namespace harness {

using nlohmann::json;

// ---------------------------------------------------------------------------
// SearchSpace / RunConfig
// ---------------------------------------------------------------------------

algo::AlgoHyperParams SearchSpace::draw(algo::AlgoName algorithm, int hp_trial,
                                        std::uint64_t base_seed) const {
    algo::AlgoHyperParams hp;  // defaults
    if (hp_trial <= 1) return hp;
    Rng rng(derive_seed(base_seed, "hp_draw",
                        static_cast<std::uint64_t>(algorithm) * 100 +
                            static_cast<std::uint64_t>(hp_trial)));
    hp.lr = log_uniform_in(rng, lr_range.first, lr_range.second);
    switch (algorithm) {
        case algo::AlgoName::DANN:
            hp.lambda_dann = log_uniform_in(rng, lambda_range.first, lambda_range.second);
            break;
        case algo::AlgoName::GroupDRO:
            hp.eta_dro = log_uniform_in(rng, eta_range.first, eta_range.second);
            break;
        case algo::AlgoName::Mixup:
            hp.alpha_mixup = log_uniform_in(rng, alpha_range.first, alpha_range.second);
            break;
        case algo::AlgoName::ERM:
            break;
    }
    return hp;
}

std::string RunConfig::run_id() const {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%s_%s_s%02d_hp%d_seed%d",
                  nn::model_name_str(model), algo::algo_name_str(algorithm),
                  target_subject, hp_trial, seed_idx);
    return buf;
}

std::uint64_t RunConfig::run_seed() const {
    return derive_seed(base_seed, run_id());
}

// ---------------------------------------------------------------------------
// JSON records
// ---------------------------------------------------------------------------

namespace {

json config_json(const RunConfig& c) {
    json j;
    j["model"] = nn::model_name_str(c.model);
    j["algorithm"] = algo::algo_name_str(c.algorithm);
    j["target_subject"] = c.target_subject;
    j["hp_trial"] = c.hp_trial;
    j["seed_idx"] = c.seed_idx;
    j["hps"] = {{"lr", c.hps.lr},
                {"lambda_dann", c.hps.lambda_dann},
                {"eta_dro", c.hps.eta_dro},
                {"alpha_mixup", c.hps.alpha_mixup}};
    j["max_steps"] = c.max_steps;
    j["eval_interval"] = c.eval_interval;
    j["batch_size"] = c.batch_size;
    j["base_seed"] = c.base_seed;
    return j;
}

RunConfig config_from_json(const json& j) {
    RunConfig c;
    c.model = nn::parse_model_name(j.at("model").get<std::string>());
    c.algorithm = algo::parse_algo_name(j.at("algorithm").get<std::string>());
    c.target_subject = j.at("target_subject").get<int>();
    c.hp_trial = j.at("hp_trial").get<int>();
    c.seed_idx = j.at("seed_idx").get<int>();
    const auto& h = j.at("hps");
    c.hps.lr = h.at("lr").get<double>();
    c.hps.lambda_dann = h.at("lambda_dann").get<double>();
    c.hps.eta_dro = h.at("eta_dro").get<double>();
    c.hps.alpha_mixup = h.at("alpha_mixup").get<double>();
    c.max_steps = j.at("max_steps").get<int>();
    c.eval_interval = j.at("eval_interval").get<int>();
    c.batch_size = j.at("batch_size").get<int>();
    c.base_seed = j.at("base_seed").get<std::uint64_t>();
    return c;
}

json result_json(const ExperimentResult& r) {
    json j;
    j["test_accuracy"] = r.test_accuracy;
    j["test_correct"] = r.test_correct;
    j["test_total"] = r.test_total;
    j["best_val_accuracy"] = r.best_val_accuracy;
    j["selected_step"] = r.selected_step;
    j["steps_run"] = r.steps_run;
    j["final_loss"] = r.final_loss;
    j["completed"] = r.completed;
    j["error"] = r.error;
    return j;
}

ExperimentResult result_from_json(const json& j) {
    ExperimentResult r;
    r.test_accuracy = j.at("test_accuracy").get<double>();
    r.test_correct = j.at("test_correct").get<long>();
    r.test_total = j.at("test_total").get<long>();
    r.best_val_accuracy = j.at("best_val_accuracy").get<double>();
    r.selected_step = j.at("selected_step").get<int>();
    r.steps_run = j.at("steps_run").get<int>();
    r.final_loss = j.at("final_loss").get<double>();
    r.completed = j.at("completed").get<bool>();
    r.error = j.at("error").get<std::string>();
    return r;
}

}  // namespace

std::string RunRecord::deterministic_json() const {
    json j;
    j["config"] = config_json(config);
    j["result"] = result_json(result);
    return j.dump();
}

std::string RunRecord::to_json() const {
    json j;
    j["config"] = config_json(config);
    j["result"] = result_json(result);
    j["timing"] = {{"wall_ms", result.wall_ms}};
    j["checkpoint"] = checkpoint_path;
    return j.dump();
}

RunRecord RunRecord::from_json(const std::string& line) {
    const json j = json::parse(line);
    RunRecord r;
    r.config = config_from_json(j.at("config"));
    r.result = result_from_json(j.at("result"));
    r.result.wall_ms = j.at("timing").at("wall_ms").get<long>();
    r.checkpoint_path = j.at("checkpoint").get<std::string>();
    return r;
}

// ---------------------------------------------------------------------------
// Evaluation helpers
// ---------------------------------------------------------------------------

namespace {

constexpr int kEvalChunk = 16;

// Argmax-accuracy of eval-mode forward, chunked to bound activation memory.
std::pair<long, long> count_correct(nn::Network<float>& net,
                                    const data::DomainBatch<float>& batch) {
    const int n = batch.inputs.dim(0);
    const int C = batch.inputs.dim(1);
    const int S = batch.inputs.dim(2);
    long hits = 0;
    nn::Ctx<float> ctx;  // eval
    for (int at = 0; at < n; at += kEvalChunk) {
        const int m = std::min(kEvalChunk, n - at);
        Tensor<float> chunk({m, C, S});
        std::copy(batch.inputs.data() + static_cast<long>(at) * C * S,
                  batch.inputs.data() + static_cast<long>(at + m) * C * S,
                  chunk.data());
        auto logits = net.forward(chunk, ctx);
        const int K = logits.dim(1);
        for (int i = 0; i < m; ++i) {
            int arg = 0;
            for (int c = 1; c < K; ++c) {
                if (logits.data()[static_cast<long>(i) * K + c] >
                    logits.data()[static_cast<long>(i) * K + arg])
                    arg = c;
            }
            hits += (arg == batch.labels[static_cast<std::size_t>(at + i)]) ? 1 : 0;
        }
    }
    return {hits, n};
}

double validation_accuracy(nn::Network<float>& net, data::SplitDataset& split) {
    long hits = 0, total = 0;
    for (int d = 0; d < split.num_source(); ++d) {
        auto batch = split.val_batch<float>(d);
        auto [h, n] = count_correct(net, batch);
        hits += h;
        total += n;
    }
    return total ? 100.0 * static_cast<double>(hits) / static_cast<double>(total)
                 : 0.0;
}

}  // namespace

double evaluate_batch(nn::Network<float>& net,
                      const data::DomainBatch<float>& batch) {
    auto [h, n] = count_correct(net, batch);
    return n ? 100.0 * static_cast<double>(h) / static_cast<double>(n) : 0.0;
}

// ---------------------------------------------------------------------------
// train_one
// ---------------------------------------------------------------------------

RunRecord train_one(const data::Dataset& ds, const RunConfig& cfg,
                    const data::SplitPlan& plan, const TrainOneOptions& opts) {
    const auto t0 = std::chrono::steady_clock::now();
    if (plan.target.subject != cfg.target_subject) {
        throw std::invalid_argument(
            "train_one: config targets subject " +
            std::to_string(cfg.target_subject) + " but plan holds " +
            std::to_string(plan.target.subject));
    }

    RunRecord rec;
    rec.config = cfg;

    const auto& m = ds.manifest.config;
    data::SplitDataset split(ds, plan);
    const std::uint64_t seed = cfg.run_seed();

    auto model_cfg = nn::build_model(cfg.model, m.channels, m.samples,
                                     ds.manifest.num_classes);
    nn::Network<float> net(model_cfg, derive_seed(seed, "model"));

    std::optional<algo::Discriminator<float>> disc;
    auto params = net.parameters();
    if (cfg.algorithm == algo::AlgoName::DANN) {
        disc.emplace(model_cfg.feature_dim, plan.source, derive_seed(seed, "disc"));
        for (auto& p : disc->parameters()) params.push_back(p);
    }
    AdamState<float> opt(params);
    auto weights = algo::GroupWeights::uniform(plan.source);

    data::MinibatchSampler sampler(split, cfg.batch_size, derive_seed(seed, "sampler"));
    Rng step_rng(derive_seed(seed, "steps"));

    // Step-0 baseline so max_steps = 0 selects the initial parameters.
    double best_val = validation_accuracy(net, split);
    int best_step = 0;
    auto best_state = nn::StateSnapshot<float>::take(net);
    double last_loss = 0.0;

    try {
        for (int step = 1; step <= cfg.max_steps; ++step) {
            auto batches = sampler.next<float>();
            algo::StepStats st;
            switch (cfg.algorithm) {
                case algo::AlgoName::ERM:
                    st = algo::erm_step(net, batches, opt, cfg.hps.lr, step_rng);
                    break;
                case algo::AlgoName::DANN:
                    st = algo::dann_step(net, *disc, batches, opt, cfg.hps.lr,
                                         cfg.hps.lambda_dann, step_rng);
                    break;
                case algo::AlgoName::GroupDRO:
                    st = algo::groupdro_step(net, batches, opt, cfg.hps.lr,
                                             weights, cfg.hps.eta_dro, step_rng);
                    break;
                case algo::AlgoName::Mixup:
                    st = algo::mixup_step(net, batches, opt, cfg.hps.lr,
                                          cfg.hps.alpha_mixup, step_rng);
                    break;
            }
            last_loss = st.loss;
            if (!std::isfinite(st.loss)) {
                throw std::runtime_error("non-finite loss " +
                                         std::to_string(st.loss) + " at step " +
                                         std::to_string(step));
            }
            rec.result.steps_run = step;
            if (step % cfg.eval_interval == 0 || step == cfg.max_steps) {
                const double val = validation_accuracy(net, split);
                if (val > best_val) {
                    best_val = val;
                    best_step = step;
                    best_state = nn::StateSnapshot<float>::take(net);
                }
            }
        }
    } catch (const std::exception& e) {
        rec.result.completed = false;
        rec.result.error = std::string("run ") + cfg.run_id() + ": " + e.what();
        rec.result.final_loss = last_loss;
        rec.result.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                                 std::chrono::steady_clock::now() - t0)
                                 .count();
        if (opts.log_out) *opts.log_out = split.log();
        return rec;
    }

    // Selected checkpoint: single final read of the held-out session.
    best_state.restore(net);
    auto test = split.test_batch<float>();
    auto [hits, total] = count_correct(net, test);

    rec.result.test_correct = hits;
    rec.result.test_total = total;
    rec.result.test_accuracy =
        total ? 100.0 * static_cast<double>(hits) / static_cast<double>(total) : 0.0;
    rec.result.best_val_accuracy = best_val;
    rec.result.selected_step = best_step;
    rec.result.final_loss = last_loss;
    rec.result.completed = true;

    if (opts.checkpoint_out) {
        ckpt::CheckpointMeta meta;
        meta.model = nn::model_name_str(cfg.model);
        meta.channels = m.channels;
        meta.samples = m.samples;
        meta.num_classes = ds.manifest.num_classes;
        meta.excluded_subject = opts.excluded_subject;
        std::filesystem::create_directories(opts.checkpoint_out->parent_path());
        ckpt::save_checkpoint(net, meta, *opts.checkpoint_out);
        rec.checkpoint_path = opts.checkpoint_out->string();
    }
    if (opts.log_out) *opts.log_out = split.log();

    rec.result.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                             std::chrono::steady_clock::now() - t0)
                             .count();
    return rec;
}

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

std::vector<int> all_subjects(const data::Dataset& ds) {
    std::vector<int> subjects;
    for (const auto& rec : ds.records) {
        if (subjects.empty() || subjects.back() != rec.domain.subject) {
            subjects.push_back(rec.domain.subject);
        }
    }
    return subjects;
}

std::vector<RunConfig> enumerate_runs(nn::ModelName model,
                                      algo::AlgoName algorithm,
                                      const std::vector<int>& subjects,
                                      const SweepOptions& opts) {
    std::vector<RunConfig> out;
    for (int subject : subjects) {
        for (int trial = 1; trial <= opts.hp_trials; ++trial) {
            for (int seed_idx = 1; seed_idx <= opts.seeds; ++seed_idx) {
                RunConfig c;
                c.model = model;
                c.algorithm = algorithm;
                c.target_subject = subject;
                c.hp_trial = trial;
                c.seed_idx = seed_idx;
                c.hps = opts.space.draw(algorithm, trial, opts.base_seed);
                c.max_steps = opts.max_steps;
                c.eval_interval = opts.eval_interval;
                c.batch_size = opts.batch_size;
                c.base_seed = opts.base_seed;
                out.push_back(c);
            }
        }
    }
    return out;
}

std::vector<RunConfig> enumerate_full_protocol(nn::ModelName best_model,
                                             const std::vector<int>& subjects,
                                             const SweepOptions& opts) {
    std::vector<RunConfig> out;
    for (auto model : {nn::ModelName::DeepConvNet, nn::ModelName::EEGNet,
                       nn::ModelName::ResNet1D8, nn::ModelName::ResNet1D18}) {
        auto runs = enumerate_runs(model, algo::AlgoName::ERM, subjects, opts);
        out.insert(out.end(), runs.begin(), runs.end());
    }
    for (auto algorithm : {algo::AlgoName::DANN, algo::AlgoName::GroupDRO,
                           algo::AlgoName::Mixup}) {
        auto runs = enumerate_runs(best_model, algorithm, subjects, opts);
        out.insert(out.end(), runs.begin(), runs.end());
    }
    return out;
}

std::vector<RunRecord> execute_runs(const data::Dataset& ds,
                                    const std::vector<RunConfig>& configs,
                                    const SweepOptions& opts) {
    // Split plans are shared per subject across hp trials and seeds.
    std::map<int, data::SplitPlan> plans;
    for (const auto& c : configs) {
        if (!plans.count(c.target_subject)) {
            plans.emplace(c.target_subject,
                          data::loso_split(ds, c.target_subject, opts.val_fraction,
                                           derive_seed(opts.base_seed, "plan",
                                                       static_cast<std::uint64_t>(
                                                           c.target_subject))));
        }
    }

    std::vector<RunRecord> records(configs.size());
    std::atomic<std::size_t> next{0};
    auto worker = [&] {
        for (;;) {
            const std::size_t i = next.fetch_add(1);
            if (i >= configs.size()) return;
            const auto& cfg = configs[i];
            TrainOneOptions topts;
            if (!opts.out_dir.empty()) {
                topts.checkpoint_out =
                    opts.out_dir / "checkpoints" / (cfg.run_id() + ".eegdg");
            }
            RunRecord rec = train_one(ds, cfg, plans.at(cfg.target_subject), topts);
            if (!rec.result.completed) {
                // One retry with the identical configuration, then record
                // the failure.
                rec = train_one(ds, cfg, plans.at(cfg.target_subject), topts);
            }
            records[i] = std::move(rec);
        }
    };

    const int nthreads =
        std::max(1, std::min<int>(opts.workers, static_cast<int>(configs.size())));
    if (nthreads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        pool.reserve(static_cast<std::size_t>(nthreads));
        for (int t = 0; t < nthreads; ++t) pool.emplace_back(worker);
        for (auto& t : pool) t.join();
    }

    if (!opts.out_dir.empty()) {
        std::filesystem::create_directories(opts.out_dir);
        std::ofstream f(opts.out_dir / "runs.jsonl", std::ios::app);
        for (const auto& r : records) f << r.to_json() << "\n";
    }
    return records;
}

namespace {

// Per (label, subject): mean validation accuracy per hp trial over seeds,
// best trial's mean test accuracy as the reported value.
struct CellAccum {
    std::map<int, std::vector<const RunRecord*>> by_trial;
    bool any_failed = false;
};

double aggregate_cell(const CellAccum& cell, int expected_seeds, bool* ok) {
    int best_trial = -1;
    double best_val = -1.0;
    for (const auto& [trial, runs] : cell.by_trial) {
        if (static_cast<int>(runs.size()) < expected_seeds) continue;
        double val = 0;
        for (const auto* r : runs) val += r->result.best_val_accuracy;
        val /= static_cast<double>(runs.size());
        if (val > best_val) {
            best_val = val;
            best_trial = trial;
        }
    }
    if (best_trial < 0) {
        *ok = false;
        return 0.0;
    }
    const auto& runs = cell.by_trial.at(best_trial);
    double acc = 0;
    for (const auto* r : runs) acc += r->result.test_accuracy;
    *ok = true;
    return acc / static_cast<double>(runs.size());
}

}  // namespace

SweepResult run_search(const data::Dataset& ds, nn::ModelName model,
                       algo::AlgoName algorithm, const SweepOptions& opts) {
    SweepOptions o = opts;
    if (o.subjects.empty()) o.subjects = all_subjects(ds);
    auto configs = enumerate_runs(model, algorithm, o.subjects, o);
    SweepResult res;
    res.records = execute_runs(ds, configs, o);

    std::map<int, CellAccum> cells;
    std::map<int, int> expected;
    for (const auto& r : res.records) {
        expected[r.config.target_subject] += 1;
        if (r.result.completed) {
            cells[r.config.target_subject].by_trial[r.config.hp_trial].push_back(&r);
        } else {
            cells[r.config.target_subject].any_failed = true;
        }
    }
    for (int subject : o.subjects) {
        auto it = cells.find(subject);
        bool ok = false;
        double acc = 0.0;
        if (it != cells.end() && !it->second.any_failed) {
            acc = aggregate_cell(it->second, o.seeds, &ok);
        }
        if (ok) {
            res.per_subject.emplace_back(subject, acc);
        } else {
            res.incomplete_subjects.push_back(subject);
        }
    }
    return res;
}

report::ReportTable aggregate_report(const std::vector<RunRecord>& all_records,
                                     LabelBy label_by) {
    report::ReportTable table;
    table.row_header = label_by == LabelBy::Model ? "Model" : "Algorithm";

    // A mixed sweep holds two families of runs: every model under ERM, and
    // the DG algorithms on one designated model. The model table compares
    // models under ERM; the algorithm table compares algorithms on the
    // model(s) that carried them.
    std::vector<RunRecord> records;
    if (label_by == LabelBy::Model) {
        bool any_erm = false;
        for (const auto& r : all_records) {
            any_erm = any_erm || r.config.algorithm == algo::AlgoName::ERM;
        }
        for (const auto& r : all_records) {
            if (!any_erm || r.config.algorithm == algo::AlgoName::ERM) {
                records.push_back(r);
            }
        }
    } else {
        std::set<nn::ModelName> dg_models;
        for (const auto& r : all_records) {
            if (r.config.algorithm != algo::AlgoName::ERM) {
                dg_models.insert(r.config.model);
            }
        }
        for (const auto& r : all_records) {
            if (dg_models.empty() || dg_models.count(r.config.model)) {
                records.push_back(r);
            }
        }
    }

    std::map<std::string, std::map<int, CellAccum>> groups;
    std::map<std::string, std::map<int, int>> seeds_seen;
    std::vector<std::string> label_order;
    std::vector<int> subject_order;
    for (const auto& r : records) {
        const std::string label = label_by == LabelBy::Model
                                      ? nn::model_name_str(r.config.model)
                                      : algo::algo_name_str(r.config.algorithm);
        if (std::find(label_order.begin(), label_order.end(), label) ==
            label_order.end()) {
            label_order.push_back(label);
        }
        if (std::find(subject_order.begin(), subject_order.end(),
                      r.config.target_subject) == subject_order.end()) {
            subject_order.push_back(r.config.target_subject);
        }
        auto& cell = groups[label][r.config.target_subject];
        if (r.result.completed) {
            cell.by_trial[r.config.hp_trial].push_back(&r);
        } else {
            cell.any_failed = true;
        }
        seeds_seen[label][r.config.target_subject] =
            std::max(seeds_seen[label][r.config.target_subject], r.config.seed_idx);
    }
    std::sort(subject_order.begin(), subject_order.end());
    table.subjects = subject_order;

    for (const auto& label : label_order) {
        report::ReportRow row;
        row.label = label;
        for (int subject : subject_order) {
            auto it = groups[label].find(subject);
            if (it == groups[label].end() || it->second.any_failed) continue;
            bool ok = false;
            const double acc =
                aggregate_cell(it->second, seeds_seen[label][subject], &ok);
            if (ok) row.cells[subject] = acc;
        }
        table.rows.push_back(std::move(row));
    }
    return table;
}

// ---------------------------------------------------------------------------
// Fine-tuning
// ---------------------------------------------------------------------------

std::uint64_t hash_params(const std::vector<NamedParam<float>>& params) {
    std::uint64_t h = 0xcbf29ce484222325ull;
    for (const auto& p : params) {
        const auto* bytes = reinterpret_cast<const unsigned char*>(p.tensor->data());
        const std::size_t n = static_cast<std::size_t>(p.tensor->size()) * sizeof(float);
        for (std::size_t i = 0; i < n; ++i) {
            h ^= bytes[i];
            h *= 0x100000001b3ull;
        }
    }
    return h;
}

FineTuneResult fine_tune(const data::Dataset& ds, nn::Network<float>& net,
                         const ckpt::CheckpointMeta& meta, int subject,
                         const FineTuneOptions& opts) {
    if (meta.excluded_subject != subject) {
        throw std::invalid_argument(
            "fine_tune: checkpoint was trained with subject " +
            std::to_string(subject) +
            " in its source pool (excluded_subject=" +
            std::to_string(meta.excluded_subject) + ")");
    }
    const auto splits = data::finetune_split(ds, subject);
    const auto& train_rec = ds.record(splits.train_domain);
    const auto& test_rec = ds.record(splits.test_domain);

    FineTuneResult res;
    res.feature_hash_before = hash_params(net.feature_parameters());

    // Frozen feature extractor in eval mode: features are constant per
    // trial, so they are computed once and cached.
    nn::Ctx<float> eval_ctx;
    auto featurize = [&](const data::SessionRecord& rec) {
        const int n = static_cast<int>(rec.trials.size());
        const int C = ds.manifest.config.channels;
        const int S = ds.manifest.config.samples;
        Tensor<float> feats({n, net.config().feature_dim});
        std::vector<int> labels(static_cast<std::size_t>(n));
        constexpr int chunk = 16;
        for (int at = 0; at < n; at += chunk) {
            const int m = std::min(chunk, n - at);
            Tensor<float> x({m, C, S});
            for (int i = 0; i < m; ++i) {
                const auto& t = rec.trials[static_cast<std::size_t>(at + i)];
                std::copy(t.signal.begin(), t.signal.end(),
                          x.data() + static_cast<long>(i) * C * S);
                labels[static_cast<std::size_t>(at + i)] = t.label;
            }
            auto f = net.features(x, eval_ctx);
            std::copy(f.data(), f.data() + f.size(),
                      feats.data() + static_cast<long>(at) * net.config().feature_dim);
        }
        return std::make_pair(feats, labels);
    };

    auto [train_feats, train_labels] = featurize(train_rec);
    auto [test_feats, test_labels] = featurize(test_rec);
    const int D = net.config().feature_dim;

    auto test_accuracy = [&] {
        nn::Ctx<float> ctx;
        auto logits = net.classify(test_feats, ctx);
        const int K = logits.dim(1);
        long hits = 0;
        for (int i = 0; i < test_feats.dim(0); ++i) {
            int arg = 0;
            for (int c = 1; c < K; ++c) {
                if (logits.data()[static_cast<long>(i) * K + c] >
                    logits.data()[static_cast<long>(i) * K + arg])
                    arg = c;
            }
            hits += (arg == test_labels[static_cast<std::size_t>(i)]) ? 1 : 0;
        }
        return 100.0 * static_cast<double>(hits) / test_feats.dim(0);
    };

    res.pre_accuracy = test_accuracy();

    auto clf = net.classifier_parameters();
    AdamState<float> opt(clf);
    Rng rng(derive_seed(opts.seed, "finetune", static_cast<std::uint64_t>(subject)));
    const int n = train_feats.dim(0);
    std::vector<int> order(static_cast<std::size_t>(n));
    for (int i = 0; i < n; ++i) order[static_cast<std::size_t>(i)] = i;

    for (int epoch = 0; epoch < opts.epochs; ++epoch) {
        shuffle_in_place(order, rng);
        for (int at = 0; at < n; at += opts.batch_size) {
            const int m = std::min(opts.batch_size, n - at);
            Tensor<float> fb({m, D});
            std::vector<int> lb(static_cast<std::size_t>(m));
            for (int i = 0; i < m; ++i) {
                const int src = order[static_cast<std::size_t>(at + i)];
                std::copy(train_feats.data() + static_cast<long>(src) * D,
                          train_feats.data() + static_cast<long>(src + 1) * D,
                          fb.data() + static_cast<long>(i) * D);
                lb[static_cast<std::size_t>(i)] = train_labels[static_cast<std::size_t>(src)];
            }
            for (auto& p : clf) p.tensor->zero_grad();
            Tape<float> tape;
            for (auto& p : clf) tape.watch(*p.tensor);
            nn::Ctx<float> ctx{&tape, true, &rng};
            auto logits = net.classify(fb, ctx);
            auto ce = ops::softmax_cross_entropy(&tape, logits, lb);
            tape.backward(ce.loss);
            opt.step(clf, opts.lr);
            ++res.optimizer_steps;
        }
    }

    res.epochs = opts.epochs;
    res.post_accuracy = test_accuracy();
    res.feature_hash_after = hash_params(net.feature_parameters());
    return res;
}

}  // namespace harness
}  // namespace eegdg
