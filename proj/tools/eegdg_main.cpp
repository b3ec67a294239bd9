// Command-line entry point: synthetic data generation, single runs, sweeps,
// fine-tuning, report rendering and the verification battery. Human-readable
// output goes to stdout; failures produce a JSON object on stderr and a
// non-zero exit code.

#include <fcntl.h>
#include <unistd.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>

#include <CLI11.hpp>
#include <json.hpp>

#include "eegdg/harness.hpp"
#include "eegdg/verify.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace eegdg;

namespace {

// One command per output directory at a time.
class DirLock {
public:
    explicit DirLock(const fs::path& dir) {
        if (dir.empty()) return;
        fs::create_directories(dir);
        path_ = dir / ".eegdg.lock";
        fd_ = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
        if (fd_ < 0) {
            throw std::runtime_error(
                "output directory " + dir.string() +
                " is locked by another command (" + path_.string() +
                " exists); remove the lockfile if that command is gone");
        }
    }
    ~DirLock() {
        if (fd_ >= 0) {
            ::close(fd_);
            ::unlink(path_.c_str());
        }
    }
    DirLock(const DirLock&) = delete;
    DirLock& operator=(const DirLock&) = delete;

private:
    fs::path path_;
    int fd_ = -1;
};

int env_workers() {
    if (const char* e = std::getenv("EEGDG_WORKERS")) {
        const int v = std::atoi(e);
        if (v >= 1) return v;
    }
    return 1;
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == ',') {
            if (!cur.empty()) out.push_back(cur);
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (!cur.empty()) out.push_back(cur);
    return out;
}

// Shared sweep/train settings, fillable from a JSON config file with flags
// taking precedence. Unknown config keys are rejected.
struct CliConfig {
    std::string data_dir;
    std::string out_dir;
    std::vector<std::string> models = {"DeepConvNet", "EEGNet", "ResNet1D-8",
                                       "ResNet1D-18"};
    std::vector<std::string> algos = {"DANN", "GroupDRO", "Mixup"};
    std::string best_model = "ResNet1D-18";
    std::vector<int> subjects;
    int hp_trials = 3;
    int seeds = 3;
    int steps = 3000;
    int eval_interval = 100;
    int batch_size = 8;
    std::uint64_t base_seed = 0;
    int workers = env_workers();
    bool desk = false;
};

void load_config_file(const std::string& path, CliConfig& cfg) {
    std::ifstream f(path);
    if (!f) {
        throw std::runtime_error("config file not found: " + path);
    }
    json j;
    f >> j;
    const std::set<std::string> known = {
        "data",       "out",        "models",     "algos",
        "best_model", "subjects",   "hp_trials",  "seeds",
        "steps",      "eval_interval", "batch_size", "base_seed",
        "workers",    "desk"};
    for (auto it = j.begin(); it != j.end(); ++it) {
        if (!known.count(it.key())) {
            throw std::runtime_error("config file: unknown key '" + it.key() + "'");
        }
    }
    if (j.count("data")) cfg.data_dir = j["data"].get<std::string>();
    if (j.count("out")) cfg.out_dir = j["out"].get<std::string>();
    if (j.count("models")) cfg.models = j["models"].get<std::vector<std::string>>();
    if (j.count("algos")) cfg.algos = j["algos"].get<std::vector<std::string>>();
    if (j.count("best_model")) cfg.best_model = j["best_model"].get<std::string>();
    if (j.count("subjects")) cfg.subjects = j["subjects"].get<std::vector<int>>();
    if (j.count("hp_trials")) cfg.hp_trials = j["hp_trials"].get<int>();
    if (j.count("seeds")) cfg.seeds = j["seeds"].get<int>();
    if (j.count("steps")) cfg.steps = j["steps"].get<int>();
    if (j.count("eval_interval")) cfg.eval_interval = j["eval_interval"].get<int>();
    if (j.count("batch_size")) cfg.batch_size = j["batch_size"].get<int>();
    if (j.count("base_seed")) cfg.base_seed = j["base_seed"].get<std::uint64_t>();
    if (j.count("workers")) cfg.workers = j["workers"].get<int>();
    if (j.count("desk")) cfg.desk = j["desk"].get<bool>();
}

harness::SweepOptions sweep_options(const CliConfig& cfg) {
    harness::SweepOptions o;
    o.subjects = cfg.subjects;
    o.hp_trials = cfg.hp_trials;
    o.seeds = cfg.seeds;
    o.max_steps = cfg.steps;
    o.eval_interval = cfg.eval_interval;
    o.batch_size = cfg.batch_size;
    o.base_seed = cfg.base_seed;
    o.workers = cfg.workers;
    if (!cfg.out_dir.empty()) o.out_dir = cfg.out_dir;
    return o;
}

void apply_desk_scale(CliConfig& cfg) {
    // Reduced protocol: 3 subjects, 1 hyperparameter trial, 1 seed, 300 steps.
    if (cfg.subjects.empty()) cfg.subjects = {1, 2, 3};
    cfg.hp_trials = 1;
    cfg.seeds = 1;
    cfg.steps = 300;
}

// ---------------------------------------------------------------------------
// Commands
// ---------------------------------------------------------------------------

int cmd_gen_data(const data::GenConfig& gen, const std::string& out, bool force) {
    const fs::path dir(out);
    if (fs::exists(dir) && !fs::is_empty(dir) && !force) {
        throw std::runtime_error("output directory " + out +
                                 " is not empty (use --force to overwrite)");
    }
    auto summary = data::generate_synthetic(gen, dir);
    std::cout << summary.total_trials << " trials, " << summary.sessions_written
              << " sessions -> " << dir.string() << "\n";
    return 0;
}

int cmd_train(const CliConfig& cli, const std::string& model,
              const std::string& algorithm, int subject, int hp_trial,
              int seed_idx) {
    auto ds = data::load_dataset(cli.data_dir);
    harness::SweepOptions opts = sweep_options(cli);

    harness::RunConfig rc;
    rc.model = nn::parse_model_name(model);
    rc.algorithm = algo::parse_algo_name(algorithm);
    rc.target_subject = subject;
    rc.hp_trial = hp_trial;
    rc.seed_idx = seed_idx;
    rc.hps = opts.space.draw(rc.algorithm, hp_trial, opts.base_seed);
    rc.max_steps = opts.max_steps;
    rc.eval_interval = opts.eval_interval;
    rc.batch_size = opts.batch_size;
    rc.base_seed = opts.base_seed;

    auto plan = data::loso_split(ds, subject, 0.1,
                                 derive_seed(opts.base_seed, "plan",
                                             static_cast<std::uint64_t>(subject)));

    harness::TrainOneOptions topts;
    std::optional<DirLock> lock;
    if (!cli.out_dir.empty()) {
        lock.emplace(cli.out_dir);
        topts.checkpoint_out = fs::path(cli.out_dir) / (rc.run_id() + ".eegdg");
    }
    auto rec = harness::train_one(ds, rc, plan, topts);

    if (!cli.out_dir.empty()) {
        std::ofstream f(fs::path(cli.out_dir) / (rc.run_id() + ".json"));
        f << rec.to_json() << "\n";
        std::ofstream s(fs::path(cli.out_dir) / (rc.run_id() + "_summary.txt"));
        s << nn::model_summary(nn::build_model(rc.model,
                                               ds.manifest.config.channels,
                                               ds.manifest.config.samples));
    }
    std::cout << rec.config.run_id() << ": ";
    if (rec.result.completed) {
        std::cout << "test accuracy " << rec.result.test_accuracy << "% ("
                  << rec.result.test_correct << "/" << rec.result.test_total
                  << "), best val " << rec.result.best_val_accuracy
                  << "% at step " << rec.result.selected_step << "\n";
        return 0;
    }
    std::cout << "FAILED: " << rec.result.error << "\n";
    return 1;
}

int cmd_sweep(CliConfig cli, bool dry_run) {
    if (cli.desk) apply_desk_scale(cli);
    auto ds = data::load_dataset(cli.data_dir);
    harness::SweepOptions opts = sweep_options(cli);
    if (opts.subjects.empty()) opts.subjects = harness::all_subjects(ds);

    // Enumerate: listed models under ERM, listed algorithms on the best model.
    std::vector<std::pair<nn::ModelName, algo::AlgoName>> pairs;
    for (const auto& m : cli.models) {
        pairs.emplace_back(nn::parse_model_name(m), algo::AlgoName::ERM);
    }
    for (const auto& a : cli.algos) {
        pairs.emplace_back(nn::parse_model_name(cli.best_model),
                           algo::parse_algo_name(a));
    }

    std::vector<harness::RunConfig> all;
    for (auto [model, algorithm] : pairs) {
        auto runs = harness::enumerate_runs(model, algorithm, opts.subjects, opts);
        all.insert(all.end(), runs.begin(), runs.end());
    }
    std::cout << "sweep: " << pairs.size() << " configurations x "
              << opts.subjects.size() << " subjects x " << opts.hp_trials
              << " hp trials x " << opts.seeds << " seeds = " << all.size()
              << " runs\n";
    if (dry_run) {
        return 0;
    }

    std::optional<DirLock> lock;
    if (!opts.out_dir.empty()) lock.emplace(opts.out_dir);

    auto records = harness::execute_runs(ds, all, opts);
    int failed = 0;
    for (const auto& r : records) {
        if (!r.result.completed) {
            ++failed;
            std::cout << "failed: " << r.config.run_id() << " (" << r.result.error
                      << ")\n";
        }
    }

    auto by_model = harness::aggregate_report(records, harness::LabelBy::Model);
    auto by_algo = harness::aggregate_report(records, harness::LabelBy::Algorithm);
    std::cout << "\n" << report::render_markdown(by_model) << "\n"
              << report::render_markdown(by_algo);
    if (!opts.out_dir.empty()) {
        std::ofstream(opts.out_dir / "report_models.csv")
            << report::render_csv(by_model);
        std::ofstream(opts.out_dir / "report_algorithms.csv")
            << report::render_csv(by_algo);
        std::ofstream(opts.out_dir / "report_models.md")
            << report::render_markdown(by_model);
        std::ofstream(opts.out_dir / "report_algorithms.md")
            << report::render_markdown(by_algo);
    }
    if (failed) {
        std::cout << failed << " runs failed\n";
        return 1;
    }
    return 0;
}

int cmd_finetune(const CliConfig& cli, int subject, const std::string& model,
                 const std::string& checkpoint, int epochs, double lr) {
    auto ds = data::load_dataset(cli.data_dir);

    std::optional<DirLock> lock;
    if (!cli.out_dir.empty()) lock.emplace(cli.out_dir);

    nn::Network<float> net = [&] {
        if (!checkpoint.empty()) {
            return ckpt::load_checkpoint(checkpoint);
        }
        // Train the generalized model on the subject-excluded pool first.
        harness::RunConfig rc;
        rc.model = nn::parse_model_name(model);
        rc.algorithm = algo::AlgoName::ERM;
        rc.target_subject = subject;
        rc.max_steps = cli.steps;
        rc.eval_interval = cli.eval_interval;
        rc.batch_size = cli.batch_size;
        rc.base_seed = cli.base_seed;

        auto plan = data::generalized_split(
            ds, subject, 0.1,
            derive_seed(cli.base_seed, "ft_plan", static_cast<std::uint64_t>(subject)));
        harness::TrainOneOptions topts;
        topts.excluded_subject = subject;
        fs::path cpath = cli.out_dir.empty()
                             ? fs::temp_directory_path() /
                                   ("eegdg_ft_" + std::to_string(::getpid()) + ".eegdg")
                             : fs::path(cli.out_dir) / (rc.run_id() + "_generalized.eegdg");
        topts.checkpoint_out = cpath;
        auto rec = harness::train_one(ds, rc, plan, topts);
        if (!rec.result.completed) {
            throw std::runtime_error("generalized-model training failed: " +
                                     rec.result.error);
        }
        std::cout << "generalized model: test accuracy " << rec.result.test_accuracy
                  << "% before fine-tuning\n";
        return ckpt::load_checkpoint(cpath);
    }();

    ckpt::CheckpointMeta meta;
    if (!checkpoint.empty()) {
        meta = ckpt::read_checkpoint_meta(checkpoint);
    } else {
        meta.model = model;
        meta.channels = ds.manifest.config.channels;
        meta.samples = ds.manifest.config.samples;
        meta.excluded_subject = subject;
    }

    harness::FineTuneOptions fopts;
    fopts.epochs = epochs;
    fopts.lr = lr;
    fopts.seed = cli.base_seed;
    auto res = harness::fine_tune(ds, net, meta, subject, fopts);

    std::cout << "fine-tune subject " << subject << ": " << res.pre_accuracy
              << "% -> " << res.post_accuracy << "% over " << res.epochs
              << " epochs (" << res.optimizer_steps << " steps)\n";
    std::cout << "feature extractor hash "
              << (res.feature_hash_before == res.feature_hash_after
                      ? "unchanged"
                      : "CHANGED (bug)")
              << "\n";
    if (!cli.out_dir.empty()) {
        json j;
        j["subject"] = subject;
        j["pre_accuracy"] = res.pre_accuracy;
        j["post_accuracy"] = res.post_accuracy;
        j["epochs"] = res.epochs;
        j["optimizer_steps"] = res.optimizer_steps;
        j["feature_hash_before"] = res.feature_hash_before;
        j["feature_hash_after"] = res.feature_hash_after;
        std::ofstream f(fs::path(cli.out_dir) /
                        ("finetune_s" + std::to_string(subject) + ".json"));
        f << j.dump(2) << "\n";
    }
    return res.feature_hash_before == res.feature_hash_after ? 0 : 1;
}

int cmd_report(const std::string& runs_dir, const std::string& format,
               const std::string& by, const std::string& out_file) {
    const fs::path runs_path = fs::path(runs_dir) / "runs.jsonl";
    std::ifstream f(runs_path);
    if (!f) {
        throw std::runtime_error("no runs.jsonl under " + runs_dir);
    }
    std::vector<harness::RunRecord> records;
    std::string line;
    while (std::getline(f, line)) {
        if (!line.empty()) records.push_back(harness::RunRecord::from_json(line));
    }
    auto table = harness::aggregate_report(
        records, by == "algorithm" ? harness::LabelBy::Algorithm
                                   : harness::LabelBy::Model);
    const std::string rendered = format == "csv" ? report::render_csv(table)
                                                 : report::render_markdown(table);
    if (out_file.empty()) {
        std::cout << rendered;
    } else {
        std::ofstream o(out_file);
        o << rendered;
    }
    return 0;
}

int cmd_verify() {
    auto rep = verify::run_verification();
    std::cout << verify::format_report(rep);
    return rep.all_pass() ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Session-independent EEG classification benchmark engine"};
    app.require_subcommand(1);

    CliConfig cli;
    std::string config_file;

    // gen-data
    auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset");
    data::GenConfig gcfg;
    std::string gen_out = "dataset";
    bool gen_force = false;
    gen->add_option("--subjects", gcfg.subjects, "Subjects")->capture_default_str();
    gen->add_option("--sessions", gcfg.sessions, "Sessions per subject")
        ->capture_default_str();
    gen->add_option("--trials-per-class", gcfg.trials_per_class,
                    "Trials per class per session")
        ->capture_default_str();
    gen->add_option("--shift", gcfg.shift_strength, "Domain shift strength")
        ->capture_default_str();
    gen->add_option("--noise", gcfg.noise_level, "Additive noise level")
        ->capture_default_str();
    gen->add_option("--seed", gcfg.seed, "Generator seed")->capture_default_str();
    gen->add_option("--out", gen_out, "Output directory")->capture_default_str();
    gen->add_flag("--force", gen_force, "Overwrite a non-empty directory");

    auto add_common = [&](CLI::App* cmd, bool with_out = true) {
        cmd->add_option("--config", config_file, "JSON config file");
        cmd->add_option("--data", cli.data_dir, "Dataset directory");
        if (with_out) cmd->add_option("--out", cli.out_dir, "Output directory");
        cmd->add_option("--steps", cli.steps, "Training steps per run");
        cmd->add_option("--eval-interval", cli.eval_interval,
                        "Steps between validation evaluations");
        cmd->add_option("--batch-size", cli.batch_size, "Per-domain batch size");
        cmd->add_option("--base-seed", cli.base_seed, "Base seed");
        cmd->add_option("--workers", cli.workers, "Parallel workers");
    };

    // train
    auto* train = app.add_subcommand("train", "Train a single run");
    std::string train_model = "ResNet1D-18", train_algo = "ERM";
    int train_subject = 1, train_hp = 1, train_seed_idx = 1;
    add_common(train);
    train->add_option("--model", train_model, "Model name")->capture_default_str();
    train->add_option("--algo", train_algo, "Algorithm")->capture_default_str();
    train->add_option("--subject", train_subject, "Target subject")
        ->capture_default_str();
    train->add_option("--hp-trial", train_hp, "Hyperparameter trial (1 = defaults)")
        ->capture_default_str();
    train->add_option("--seed-idx", train_seed_idx, "Seed replicate index")
        ->capture_default_str();

    // sweep
    auto* sweep = app.add_subcommand("sweep", "Run the full search protocol");
    std::string sweep_models, sweep_algos;
    bool dry_run = false;
    add_common(sweep);
    sweep->add_option("--models", sweep_models,
                      "Comma-separated models trained under ERM");
    sweep->add_option("--algos", sweep_algos,
                      "Comma-separated DG algorithms for the best model");
    sweep->add_option("--best-model", cli.best_model,
                      "Model carrying the DG algorithms")
        ->capture_default_str();
    sweep->add_option("--subjects", cli.subjects, "Target subjects (default all)");
    sweep->add_option("--hp-trials", cli.hp_trials, "Random-search trials")
        ->capture_default_str();
    sweep->add_option("--seeds", cli.seeds, "Seed replicates")->capture_default_str();
    sweep->add_flag("--dry-run", dry_run, "Enumerate runs without training");
    sweep->add_flag("--desk", cli.desk,
                    "Desk scale: 3 subjects, 1 trial, 1 seed, 300 steps");

    // finetune
    auto* ft = app.add_subcommand("finetune",
                                  "Fine-tune the linear classifier on session 1");
    int ft_subject = 1, ft_epochs = 100;
    double ft_lr = 1e-6;
    std::string ft_model = "ResNet1D-18", ft_checkpoint;
    add_common(ft);
    ft->add_option("--subject", ft_subject, "Subject")->capture_default_str();
    ft->add_option("--model", ft_model, "Model for the generalized stage")
        ->capture_default_str();
    ft->add_option("--checkpoint", ft_checkpoint,
                   "Existing generalized checkpoint (skips pre-training)");
    ft->add_option("--epochs", ft_epochs, "Fine-tuning epochs")->capture_default_str();
    ft->add_option("--lr", ft_lr, "Fine-tuning learning rate")->capture_default_str();

    // report
    auto* rep = app.add_subcommand("report", "Render tables from run records");
    std::string rep_runs, rep_format = "md", rep_by = "model", rep_out;
    rep->add_option("--runs", rep_runs, "Directory holding runs.jsonl")->required();
    rep->add_option("--format", rep_format, "csv or md")
        ->capture_default_str()
        ->check(CLI::IsMember({"csv", "md"}));
    rep->add_option("--by", rep_by, "Group rows by model or algorithm")
        ->capture_default_str()
        ->check(CLI::IsMember({"model", "algorithm"}));
    rep->add_option("--out", rep_out, "Write to file instead of stdout");

    // verify
    app.add_subcommand("verify", "Run the verification battery");

    try {
        // Config file defaults load before flags override them: parse once to
        // find --config, then re-parse with the file applied.
        for (int i = 1; i + 1 < argc; ++i) {
            if (std::string(argv[i]) == "--config") {
                load_config_file(argv[i + 1], cli);
                break;
            }
        }
        app.parse(argc, argv);

        if (gen->parsed()) return cmd_gen_data(gcfg, gen_out, gen_force);
        if (train->parsed()) {
            return cmd_train(cli, train_model, train_algo, train_subject,
                             train_hp, train_seed_idx);
        }
        if (sweep->parsed()) {
            if (!sweep_models.empty()) cli.models = split_list(sweep_models);
            if (!sweep_algos.empty()) cli.algos = split_list(sweep_algos);
            return cmd_sweep(cli, dry_run);
        }
        if (ft->parsed()) {
            return cmd_finetune(cli, ft_subject, ft_model, ft_checkpoint,
                                ft_epochs, ft_lr);
        }
        if (rep->parsed()) return cmd_report(rep_runs, rep_format, rep_by, rep_out);
        return cmd_verify();
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        json err;
        err["error"] = e.what();
        err["code"] = "cli";
        std::cerr << err.dump() << "\n";
        return 1;
    } catch (const std::exception& e) {
        json err;
        err["error"] = e.what();
        err["code"] = "runtime";
        std::cerr << err.dump() << "\n";
        return 1;
    }
}
