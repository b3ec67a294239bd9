#pragma once

#include <bit>
#include <compare>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "eegdg/common.hpp"
#include "eegdg/tensor.hpp"

namespace eegdg {
namespace data {

static_assert(std::endian::native == std::endian::little,
              "dataset files are little-endian; big-endian hosts unsupported");

struct DomainKey {
    int subject = 0;
    int session = 0;
    auto operator<=>(const DomainKey&) const = default;
    std::string str() const {
        return "s" + std::to_string(subject) + "_sess" + std::to_string(session);
    }
};

// One labeled 60x1000 sample, row-major [channel][sample].
struct Trial {
    std::vector<float> signal;
    int label = 0;
};

struct SessionRecord {
    DomainKey domain;
    std::vector<Trial> trials;
};

struct GenConfig {
    int subjects = 15;
    int sessions = 2;
    int trials_per_class = 50;
    int channels = 60;
    int samples = 1000;
    double shift_strength = 0.1;
    double noise_level = 0.5;
    std::uint64_t seed = 0;
};

struct Manifest {
    GenConfig config;
    int num_classes = 3;
    std::vector<std::string> class_names = {"grasp_cylindrical",
                                            "grasp_spherical",
                                            "grasp_lumbrical"};
    int trials_per_session() const {
        return config.trials_per_class * num_classes;
    }
};

struct Dataset {
    Manifest manifest;
    std::vector<SessionRecord> records;  // sorted by (subject, session)

    const SessionRecord& record(const DomainKey& key) const;
    bool has(const DomainKey& key) const;
};

struct GenSummary {
    long total_trials = 0;
    int sessions_written = 0;
    std::filesystem::path dir;
};

// Writes manifest.json plus per-session s{SS}_sess{K}.f32 / .lbl files.
// Deterministic per seed, bit-exact on re-generation.
GenSummary generate_synthetic(const GenConfig& cfg,
                              const std::filesystem::path& dir);

Dataset load_dataset(const std::filesystem::path& dir);

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

struct SplitPlan {
    DomainKey target;                       // always session 2 of one subject
    std::vector<DomainKey> source;          // sorted
    std::vector<std::vector<int>> train_idx;  // parallel to source
    std::vector<std::vector<int>> val_idx;
    std::uint64_t seed = 0;

    long train_total() const;
    long val_total() const;
};

// Leave-one-session-out: target subject's second session held out, its
// first session stays in the source pool (29 source domains at full scale).
SplitPlan loso_split(const Dataset& ds, int target_subject,
                     double val_fraction = 0.1, std::uint64_t seed = 0);

// Pre-fine-tuning pool: the target subject is excluded entirely
// (28 source domains at full scale); evaluation still targets session 2.
SplitPlan generalized_split(const Dataset& ds, int excluded_subject,
                            double val_fraction = 0.1, std::uint64_t seed = 0);

struct FinetuneSplit {
    DomainKey train_domain;  // (subject, 1)
    DomainKey test_domain;   // (subject, 2)
};

FinetuneSplit finetune_split(const Dataset& ds, int subject);

// ---------------------------------------------------------------------------
// Typed access with an instrumented log (leakage audit)
// ---------------------------------------------------------------------------

enum class BatchRole { Train, Val, Test };

template <typename T>
struct DomainBatch {
    DomainKey domain;
    BatchRole role = BatchRole::Train;
    Tensor<T> inputs;  // [n, channels, samples]
    std::vector<int> labels;
    std::vector<int> trial_indices;
};

class AccessLog {
public:
    void record(BatchRole role, int trial_count) {
        ++seq_;
        switch (role) {
            case BatchRole::Train:
                train_trials_ += trial_count;
                last_source_seq_ = seq_;
                break;
            case BatchRole::Val:
                val_trials_ += trial_count;
                last_source_seq_ = seq_;
                break;
            case BatchRole::Test:
                test_trials_ += trial_count;
                ++test_events_;
                if (first_test_seq_ < 0) first_test_seq_ = seq_;
                break;
        }
    }

    long train_trials() const { return train_trials_; }
    long val_trials() const { return val_trials_; }
    long test_trials() const { return test_trials_; }
    int test_events() const { return test_events_; }

    // True when target-session data was read exactly once, strictly after
    // every train/validation access.
    bool leakage_free() const {
        if (test_events_ != 1) return false;
        return first_test_seq_ > last_source_seq_;
    }

private:
    long seq_ = 0;
    long train_trials_ = 0;
    long val_trials_ = 0;
    long test_trials_ = 0;
    int test_events_ = 0;
    long first_test_seq_ = -1;
    long last_source_seq_ = -1;
};

namespace detail {

template <typename T>
DomainBatch<T> assemble(const Dataset& ds, const DomainKey& key,
                        std::span<const int> ids, BatchRole role) {
    const auto& rec = ds.record(key);
    const int C = ds.manifest.config.channels;
    const int S = ds.manifest.config.samples;
    DomainBatch<T> b;
    b.domain = key;
    b.role = role;
    b.inputs = Tensor<T>({static_cast<int>(ids.size()), C, S});
    b.labels.reserve(ids.size());
    b.trial_indices.assign(ids.begin(), ids.end());
    T* dst = b.inputs.data();
    for (std::size_t i = 0; i < ids.size(); ++i) {
        const auto& tr = rec.trials.at(static_cast<std::size_t>(ids[i]));
        for (std::size_t j = 0; j < tr.signal.size(); ++j) {
            dst[i * tr.signal.size() + j] = static_cast<T>(tr.signal[j]);
        }
        b.labels.push_back(tr.label);
    }
    return b;
}

}  // namespace detail

// Gateway between a loaded dataset and a split: every read is tagged with
// its role and recorded, and training code only ever sees source-tagged
// batches.
class SplitDataset {
public:
    SplitDataset(const Dataset& ds, SplitPlan plan)
        : ds_(&ds), plan_(std::move(plan)) {}

    const Dataset& dataset() const { return *ds_; }
    const SplitPlan& plan() const { return plan_; }
    int num_source() const { return static_cast<int>(plan_.source.size()); }
    AccessLog& log() { return log_; }
    const AccessLog& log() const { return log_; }

    template <typename T>
    DomainBatch<T> train_batch(int src_idx, std::span<const int> ids) {
        log_.record(BatchRole::Train, static_cast<int>(ids.size()));
        return detail::assemble<T>(*ds_, plan_.source.at(static_cast<std::size_t>(src_idx)),
                                   ids, BatchRole::Train);
    }

    template <typename T>
    DomainBatch<T> val_batch(int src_idx) {
        const auto& ids = plan_.val_idx.at(static_cast<std::size_t>(src_idx));
        log_.record(BatchRole::Val, static_cast<int>(ids.size()));
        return detail::assemble<T>(*ds_, plan_.source.at(static_cast<std::size_t>(src_idx)),
                                   ids, BatchRole::Val);
    }

    // The single final read of the held-out session.
    template <typename T>
    DomainBatch<T> test_batch() {
        const auto& rec = ds_->record(plan_.target);
        std::vector<int> ids(rec.trials.size());
        for (std::size_t i = 0; i < ids.size(); ++i) ids[i] = static_cast<int>(i);
        log_.record(BatchRole::Test, static_cast<int>(ids.size()));
        return detail::assemble<T>(*ds_, plan_.target, ids, BatchRole::Test);
    }

private:
    const Dataset* ds_;
    SplitPlan plan_;
    AccessLog log_;
};

// One batch of `batch_size` trials per source domain per step, shuffled
// without replacement within each domain's epoch cycle.
class MinibatchSampler {
public:
    MinibatchSampler(SplitDataset& split, int batch_size, std::uint64_t seed)
        : split_(&split), batch_size_(batch_size), rng_(derive_seed(seed, "sampler")) {
        const auto& plan = split.plan();
        for (std::size_t i = 0; i < plan.source.size(); ++i) {
            if (static_cast<int>(plan.train_idx[i].size()) < batch_size) {
                throw std::invalid_argument(
                    "sample_minibatches: domain " + plan.source[i].str() +
                    " has " + std::to_string(plan.train_idx[i].size()) +
                    " train trials, need >= " + std::to_string(batch_size));
            }
            queues_.emplace_back();
        }
    }

    template <typename T>
    std::vector<DomainBatch<T>> next() {
        std::vector<DomainBatch<T>> out;
        out.reserve(queues_.size());
        for (std::size_t d = 0; d < queues_.size(); ++d) {
            std::vector<int> ids;
            ids.reserve(static_cast<std::size_t>(batch_size_));
            auto& q = queues_[d];
            while (static_cast<int>(ids.size()) < batch_size_) {
                if (q.empty()) refill(d);
                ids.push_back(q.back());
                q.pop_back();
            }
            out.push_back(split_->train_batch<T>(static_cast<int>(d), ids));
        }
        return out;
    }

private:
    void refill(std::size_t d) {
        auto fresh = split_->plan().train_idx[d];
        shuffle_in_place(fresh, rng_);
        queues_[d].assign(fresh.begin(), fresh.end());
    }

    SplitDataset* split_;
    int batch_size_;
    Rng rng_;
    std::vector<std::vector<int>> queues_;
};

}  // namespace data
}  // namespace eegdg
