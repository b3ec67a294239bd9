#pragma once

#include <string>
#include <vector>

namespace eegdg {
namespace verify {

struct Item {
    std::string name;
    bool pass = false;
    std::string detail;
};

struct Report {
    std::vector<Item> items;
    bool all_pass() const {
        for (const auto& i : items) {
            if (!i.pass) return false;
        }
        return true;
    }
};

// Gradient checks on every primitive and all four models (64-bit),
// dataset split invariants on a throwaway synthetic set, algorithm
// degeneracy equivalences, optimizer and sampler checks. Deterministic
// output: running it twice prints identical lines.
Report run_verification();

std::string format_report(const Report& report);

}  // namespace verify
}  // namespace eegdg
