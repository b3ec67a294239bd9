#include "eegdg/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>

#include <json.hpp>

namespace eegdg {
namespace data {

using nlohmann::json;

namespace {

std::string session_stem(int subject, int session) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "s%02d_sess%d", subject, session);
    return buf;
}

}  // namespace

const SessionRecord& Dataset::record(const DomainKey& key) const {
    for (const auto& r : records) {
        if (r.domain == key) return r;
    }
    throw std::invalid_argument("dataset: no session " + key.str());
}

bool Dataset::has(const DomainKey& key) const {
    for (const auto& r : records) {
        if (r.domain == key) return true;
    }
    return false;
}

long SplitPlan::train_total() const {
    long n = 0;
    for (const auto& v : train_idx) n += static_cast<long>(v.size());
    return n;
}

long SplitPlan::val_total() const {
    long n = 0;
    for (const auto& v : val_idx) n += static_cast<long>(v.size());
    return n;
}

// ---------------------------------------------------------------------------
// Synthetic generator
//
// Three latent band-limited sources (8/10/12 Hz at a nominal 250 samples/s),
// one per class. Each (subject, session) domain owns a perturbed copy of a
// shared 60x3 mixing matrix plus an amplitude factor; trials add white
// noise on top. With shift_strength = 0 and noise_level = 0 every domain
// emits identical class templates.
// ---------------------------------------------------------------------------

GenSummary generate_synthetic(const GenConfig& cfg,
                              const std::filesystem::path& dir) {
    if (cfg.trials_per_class < 1) {
        throw std::invalid_argument("generate_synthetic: trials_per_class must be >= 1");
    }
    if (cfg.subjects < 1 || cfg.sessions < 1 || cfg.channels < 1 ||
        cfg.samples < 1) {
        throw std::invalid_argument("generate_synthetic: counts must be >= 1");
    }
    if (cfg.shift_strength < 0 || cfg.noise_level < 0) {
        throw std::invalid_argument(
            "generate_synthetic: shift_strength and noise_level must be >= 0");
    }

    Manifest man;
    man.config = cfg;
    const int num_classes = man.num_classes;
    const int trials = man.trials_per_session();

    // Class sources, fixed per dataset seed.
    const double fs = 250.0;
    const double freqs[3] = {8.0, 10.0, 12.0};
    const double phases[3] = {0.0, 2.1, 4.2};
    std::vector<std::vector<double>> source(static_cast<std::size_t>(num_classes));
    for (int k = 0; k < num_classes; ++k) {
        auto& s = source[static_cast<std::size_t>(k)];
        s.resize(static_cast<std::size_t>(cfg.samples));
        for (int t = 0; t < cfg.samples; ++t) {
            s[static_cast<std::size_t>(t)] =
                std::sin(2.0 * 3.14159265358979323846 * freqs[k] * t / fs +
                         phases[k]);
        }
    }

    // Shared base mixing matrix [channel][class].
    std::vector<double> base(static_cast<std::size_t>(cfg.channels) * num_classes);
    {
        Rng rng(derive_seed(cfg.seed, "base_mixing"));
        Gaussian g;
        for (auto& v : base) v = g(rng);
    }

    std::filesystem::create_directories(dir);

    GenSummary summary;
    summary.dir = dir;
    std::vector<float> buf;
    std::vector<unsigned char> lbl;
    for (int subj = 1; subj <= cfg.subjects; ++subj) {
        for (int sess = 1; sess <= cfg.sessions; ++sess) {
            Rng drng(derive_seed(cfg.seed, "domain",
                                 static_cast<std::uint64_t>(subj) * 100 + sess));
            Gaussian dg;
            const double amp = std::exp(cfg.shift_strength * dg(drng));
            std::vector<double> mix(base.size());
            for (std::size_t i = 0; i < mix.size(); ++i) {
                mix[i] = base[i] + cfg.shift_strength * dg(drng);
            }

            buf.assign(static_cast<std::size_t>(trials) * cfg.channels * cfg.samples,
                       0.f);
            lbl.assign(static_cast<std::size_t>(trials), 0);
            for (int tr = 0; tr < trials; ++tr) {
                const int k = tr % num_classes;
                lbl[static_cast<std::size_t>(tr)] = static_cast<unsigned char>(k);
                Rng trng(derive_seed(cfg.seed, "trial",
                                     static_cast<std::uint64_t>(subj) * 100 + sess,
                                     static_cast<std::uint64_t>(tr)));
                Gaussian tg;
                float* out = buf.data() +
                             static_cast<std::size_t>(tr) * cfg.channels * cfg.samples;
                const auto& s = source[static_cast<std::size_t>(k)];
                for (int c = 0; c < cfg.channels; ++c) {
                    const double gain =
                        amp * mix[static_cast<std::size_t>(c) * num_classes + k];
                    float* row = out + static_cast<std::size_t>(c) * cfg.samples;
                    if (cfg.noise_level > 0) {
                        for (int t = 0; t < cfg.samples; ++t) {
                            row[t] = static_cast<float>(
                                gain * s[static_cast<std::size_t>(t)] +
                                cfg.noise_level * tg(trng));
                        }
                    } else {
                        for (int t = 0; t < cfg.samples; ++t) {
                            row[t] = static_cast<float>(gain * s[static_cast<std::size_t>(t)]);
                        }
                    }
                }
            }

            const auto stem = session_stem(subj, sess);
            {
                std::ofstream f(dir / (stem + ".f32"), std::ios::binary);
                if (!f) {
                    throw std::runtime_error("generate_synthetic: cannot write " +
                                             (dir / (stem + ".f32")).string());
                }
                f.write(reinterpret_cast<const char*>(buf.data()),
                        static_cast<std::streamsize>(buf.size() * sizeof(float)));
            }
            {
                std::ofstream f(dir / (stem + ".lbl"), std::ios::binary);
                f.write(reinterpret_cast<const char*>(lbl.data()),
                        static_cast<std::streamsize>(lbl.size()));
            }
            summary.total_trials += trials;
            ++summary.sessions_written;
        }
    }

    json j;
    j["format"] = "eegdg-dataset";
    j["version"] = 1;
    j["subjects"] = cfg.subjects;
    j["sessions"] = cfg.sessions;
    j["trials_per_class"] = cfg.trials_per_class;
    j["trials_per_session"] = trials;
    j["channels"] = cfg.channels;
    j["samples"] = cfg.samples;
    j["num_classes"] = num_classes;
    j["class_names"] = man.class_names;
    j["seed"] = cfg.seed;
    j["shift_strength"] = cfg.shift_strength;
    j["noise_level"] = cfg.noise_level;
    std::ofstream mf(dir / "manifest.json");
    mf << j.dump(2) << "\n";

    return summary;
}

// ---------------------------------------------------------------------------
// Loader
// ---------------------------------------------------------------------------

Dataset load_dataset(const std::filesystem::path& dir) {
    const auto manifest_path = dir / "manifest.json";
    std::ifstream mf(manifest_path);
    if (!mf) {
        throw std::runtime_error("load_dataset: missing manifest " +
                                 manifest_path.string());
    }
    json j;
    try {
        mf >> j;
    } catch (const json::exception& e) {
        throw std::runtime_error("load_dataset: bad manifest " +
                                 manifest_path.string() + ": " + e.what());
    }

    Dataset ds;
    auto& cfg = ds.manifest.config;
    cfg.subjects = j.at("subjects").get<int>();
    cfg.sessions = j.at("sessions").get<int>();
    cfg.trials_per_class = j.at("trials_per_class").get<int>();
    cfg.channels = j.at("channels").get<int>();
    cfg.samples = j.at("samples").get<int>();
    cfg.seed = j.at("seed").get<std::uint64_t>();
    cfg.shift_strength = j.at("shift_strength").get<double>();
    cfg.noise_level = j.at("noise_level").get<double>();
    ds.manifest.num_classes = j.at("num_classes").get<int>();
    ds.manifest.class_names =
        j.at("class_names").get<std::vector<std::string>>();

    const int trials = j.at("trials_per_session").get<int>();
    if (trials != ds.manifest.trials_per_session()) {
        throw std::runtime_error(
            "load_dataset: manifest trials_per_session " +
            std::to_string(trials) + " != trials_per_class * classes");
    }

    const long want_floats =
        static_cast<long>(trials) * cfg.channels * cfg.samples;
    for (int subj = 1; subj <= cfg.subjects; ++subj) {
        for (int sess = 1; sess <= cfg.sessions; ++sess) {
            const auto stem = session_stem(subj, sess);
            const auto fpath = dir / (stem + ".f32");
            const auto lpath = dir / (stem + ".lbl");

            std::error_code ec;
            const auto fsize = std::filesystem::file_size(fpath, ec);
            if (ec) {
                throw std::runtime_error("load_dataset: missing " + fpath.string());
            }
            if (fsize != static_cast<std::uintmax_t>(want_floats) * sizeof(float)) {
                throw std::runtime_error(
                    "load_dataset: " + fpath.string() + " holds " +
                    std::to_string(fsize) + " bytes, expected " +
                    std::to_string(want_floats * sizeof(float)) + " (" +
                    std::to_string(trials) + " trials x " +
                    std::to_string(cfg.channels) + " x " +
                    std::to_string(cfg.samples) + " x 4)");
            }
            const auto lsize = std::filesystem::file_size(lpath, ec);
            if (ec || lsize != static_cast<std::uintmax_t>(trials)) {
                throw std::runtime_error(
                    "load_dataset: " + lpath.string() + " holds " +
                    std::to_string(ec ? 0 : lsize) + " labels, expected " +
                    std::to_string(trials));
            }

            SessionRecord rec;
            rec.domain = {subj, sess};
            rec.trials.resize(static_cast<std::size_t>(trials));

            std::ifstream f(fpath, std::ios::binary);
            std::ifstream l(lpath, std::ios::binary);
            std::vector<unsigned char> labels(static_cast<std::size_t>(trials));
            l.read(reinterpret_cast<char*>(labels.data()), trials);

            std::vector<int> class_counts(
                static_cast<std::size_t>(ds.manifest.num_classes), 0);
            const std::size_t per_trial =
                static_cast<std::size_t>(cfg.channels) * cfg.samples;
            for (int tr = 0; tr < trials; ++tr) {
                auto& t = rec.trials[static_cast<std::size_t>(tr)];
                t.signal.resize(per_trial);
                f.read(reinterpret_cast<char*>(t.signal.data()),
                       static_cast<std::streamsize>(per_trial * sizeof(float)));
                if (!f) {
                    throw std::runtime_error("load_dataset: short read in " +
                                             fpath.string());
                }
                const int lab = labels[static_cast<std::size_t>(tr)];
                if (lab >= ds.manifest.num_classes) {
                    throw std::runtime_error(
                        "load_dataset: label " + std::to_string(lab) +
                        " out of range in " + lpath.string());
                }
                t.label = lab;
                ++class_counts[static_cast<std::size_t>(lab)];
            }
            for (int k = 0; k < ds.manifest.num_classes; ++k) {
                if (class_counts[static_cast<std::size_t>(k)] !=
                    cfg.trials_per_class) {
                    throw std::runtime_error(
                        "load_dataset: " + lpath.string() + " class " +
                        std::to_string(k) + " has " +
                        std::to_string(class_counts[static_cast<std::size_t>(k)]) +
                        " trials, manifest says " +
                        std::to_string(cfg.trials_per_class));
                }
            }
            ds.records.push_back(std::move(rec));
        }
    }

    std::sort(ds.records.begin(), ds.records.end(),
              [](const SessionRecord& a, const SessionRecord& b) {
                  return a.domain < b.domain;
              });
    return ds;
}

// ---------------------------------------------------------------------------
// Splits
// ---------------------------------------------------------------------------

namespace {

// Stratified-by-class split of one session's trials, seeded per domain.
void split_session(const SessionRecord& rec, int num_classes,
                   double val_fraction, std::uint64_t seed,
                   std::vector<int>& train, std::vector<int>& val) {
    std::vector<std::vector<int>> buckets(static_cast<std::size_t>(num_classes));
    for (std::size_t i = 0; i < rec.trials.size(); ++i) {
        buckets[static_cast<std::size_t>(rec.trials[i].label)].push_back(
            static_cast<int>(i));
    }
    Rng rng(derive_seed(seed, "split",
                        static_cast<std::uint64_t>(rec.domain.subject) * 100 +
                            rec.domain.session));
    for (auto& bucket : buckets) {
        shuffle_in_place(bucket, rng);
        int nval = 0;
        if (bucket.size() >= 2) {
            nval = static_cast<int>(
                std::lround(val_fraction * static_cast<double>(bucket.size())));
            nval = std::max(1, std::min<int>(nval, static_cast<int>(bucket.size()) - 1));
        }
        for (std::size_t i = 0; i < bucket.size(); ++i) {
            (i < static_cast<std::size_t>(nval) ? val : train).push_back(bucket[i]);
        }
    }
    std::sort(train.begin(), train.end());
    std::sort(val.begin(), val.end());
}

SplitPlan make_plan(const Dataset& ds, int target_subject,
                    bool keep_target_session1, double val_fraction,
                    std::uint64_t seed) {
    const DomainKey target{target_subject, 2};
    if (!ds.has(target)) {
        throw std::invalid_argument("split: missing session " + target.str());
    }
    if (!ds.has({target_subject, 1})) {
        throw std::invalid_argument("split: missing session " +
                                    DomainKey{target_subject, 1}.str());
    }

    SplitPlan plan;
    plan.target = target;
    plan.seed = seed;
    for (const auto& rec : ds.records) {
        if (rec.domain == target) continue;
        if (!keep_target_session1 && rec.domain.subject == target_subject)
            continue;
        plan.source.push_back(rec.domain);
    }
    std::sort(plan.source.begin(), plan.source.end());

    plan.train_idx.resize(plan.source.size());
    plan.val_idx.resize(plan.source.size());
    for (std::size_t i = 0; i < plan.source.size(); ++i) {
        split_session(ds.record(plan.source[i]), ds.manifest.num_classes,
                      val_fraction, seed, plan.train_idx[i], plan.val_idx[i]);
    }
    return plan;
}

}  // namespace

SplitPlan loso_split(const Dataset& ds, int target_subject,
                     double val_fraction, std::uint64_t seed) {
    return make_plan(ds, target_subject, true, val_fraction, seed);
}

SplitPlan generalized_split(const Dataset& ds, int excluded_subject,
                            double val_fraction, std::uint64_t seed) {
    return make_plan(ds, excluded_subject, false, val_fraction, seed);
}

FinetuneSplit finetune_split(const Dataset& ds, int subject) {
    const DomainKey train{subject, 1};
    const DomainKey test{subject, 2};
    if (!ds.has(train)) {
        throw std::invalid_argument("finetune_split: missing session " +
                                    train.str());
    }
    if (!ds.has(test)) {
        throw std::invalid_argument("finetune_split: missing session " +
                                    test.str());
    }
    return {train, test};
}

}  // namespace data
}  // namespace eegdg
