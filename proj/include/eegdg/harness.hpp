#pragma once

#include <cmath>
#include <filesystem>
#include <optional>
#include <string>
#include <vector>

#include "eegdg/algorithms.hpp"
#include "eegdg/checkpoint.hpp"
#include "eegdg/data.hpp"
#include "eegdg/models.hpp"
#include "eegdg/report.hpp"

namespace eegdg {
namespace harness {

// Random-search ranges (log-uniform). Trial 1 of every search uses the
// defaults; trials 2..n draw from the ranges.
struct SearchSpace {
    std::pair<double, double> lr_range{1e-5, std::pow(10.0, -3.5)};
    std::pair<double, double> lambda_range{1e-2, 1e2};
    std::pair<double, double> eta_range{1e-3, 1e-1};
    std::pair<double, double> alpha_range{std::pow(10.0, -1.5), 1e-1};

    algo::AlgoHyperParams draw(algo::AlgoName algorithm, int hp_trial,
                               std::uint64_t base_seed) const;
};

struct RunConfig {
    nn::ModelName model = nn::ModelName::ResNet1D18;
    algo::AlgoName algorithm = algo::AlgoName::ERM;
    int target_subject = 1;
    int hp_trial = 1;  // 1-based; trial 1 = defaults
    int seed_idx = 1;  // 1-based replicate index
    algo::AlgoHyperParams hps;
    int max_steps = 3000;
    int eval_interval = 100;
    int batch_size = 8;
    std::uint64_t base_seed = 0;

    std::string run_id() const;
    std::uint64_t run_seed() const;
};

struct ExperimentResult {
    double test_accuracy = 0.0;  // percent on the held-out session
    long test_correct = 0;
    long test_total = 0;
    double best_val_accuracy = 0.0;
    int selected_step = -1;  // checkpoint chosen by source validation
    int steps_run = 0;
    double final_loss = 0.0;
    bool completed = false;
    std::string error;
    long wall_ms = 0;  // timing only; not part of the deterministic record
};

struct RunRecord {
    RunConfig config;
    ExperimentResult result;
    std::string checkpoint_path;

    // Deterministic portion (config + result), used for record comparison;
    // wall-clock lives in a separate timing section.
    std::string to_json() const;
    static RunRecord from_json(const std::string& line);
    std::string deterministic_json() const;
};

// Trains one run on the plan's source domains with source-validation
// checkpoint selection, then evaluates the selected checkpoint exactly once
// on the held-out target session.
struct TrainOneOptions {
    std::optional<std::filesystem::path> checkpoint_out;
    int excluded_subject = -1;         // provenance for the checkpoint header
    data::AccessLog* log_out = nullptr;  // copy of the final access log
};

RunRecord train_one(const data::Dataset& ds, const RunConfig& cfg,
                    const data::SplitPlan& plan, const TrainOneOptions& opts = {});

// Accuracy (percent) of the eval-mode network on one batch.
double evaluate_batch(nn::Network<float>& net,
                      const data::DomainBatch<float>& batch);

// ---------------------------------------------------------------------------
// Sweeps
// ---------------------------------------------------------------------------

struct SweepOptions {
    std::vector<int> subjects;  // empty = every subject in the dataset
    int hp_trials = 3;
    int seeds = 3;
    int max_steps = 3000;
    int eval_interval = 100;
    int batch_size = 8;
    std::uint64_t base_seed = 0;
    double val_fraction = 0.1;
    int workers = 1;
    std::filesystem::path out_dir;  // empty = keep everything in memory
    SearchSpace space;
};

std::vector<int> all_subjects(const data::Dataset& ds);

// Full-protocol enumeration: every model under ERM plus the three DG
// algorithms on the designated best model; 945 runs at full scale.
std::vector<RunConfig> enumerate_full_protocol(nn::ModelName best_model,
                                             const std::vector<int>& subjects,
                                             const SweepOptions& opts);

std::vector<RunConfig> enumerate_runs(nn::ModelName model,
                                      algo::AlgoName algorithm,
                                      const std::vector<int>& subjects,
                                      const SweepOptions& opts);

struct SweepResult {
    std::vector<RunRecord> records;
    // Per-subject reported accuracy: mean over seeds of the hp trial with
    // the best mean validation accuracy. Subjects with failed runs are
    // omitted (flagged incomplete).
    std::vector<std::pair<int, double>> per_subject;
    std::vector<int> incomplete_subjects;
};

SweepResult run_search(const data::Dataset& ds, nn::ModelName model,
                       algo::AlgoName algorithm, const SweepOptions& opts);

// Executes an arbitrary run list (used by the CLI sweep command).
std::vector<RunRecord> execute_runs(const data::Dataset& ds,
                                    const std::vector<RunConfig>& configs,
                                    const SweepOptions& opts);

// Re-aggregation from raw records (reproducible bookkeeping).
enum class LabelBy { Model, Algorithm };
report::ReportTable aggregate_report(const std::vector<RunRecord>& records,
                                     LabelBy label_by);

// ---------------------------------------------------------------------------
// Fine-tuning: freeze the feature extractor, train the linear classifier on
// the subject's first session, evaluate on the second.
// ---------------------------------------------------------------------------

struct FineTuneOptions {
    int epochs = 100;
    double lr = 1e-6;
    int batch_size = 8;
    std::uint64_t seed = 0;
};

struct FineTuneResult {
    double pre_accuracy = 0.0;   // session 2, before fine-tuning
    double post_accuracy = 0.0;  // session 2, after
    int epochs = 0;
    long optimizer_steps = 0;
    std::uint64_t feature_hash_before = 0;
    std::uint64_t feature_hash_after = 0;
};

std::uint64_t hash_params(const std::vector<NamedParam<float>>& params);

FineTuneResult fine_tune(const data::Dataset& ds, nn::Network<float>& net,
                         const ckpt::CheckpointMeta& meta, int subject,
                         const FineTuneOptions& opts = {});

}  // namespace harness
}  // namespace eegdg
