#pragma once

#include <map>
#include <string>
#include <vector>

namespace eegdg {
namespace report {

// Tables keyed one row per model/algorithm with one column per subject
// plus an unweighted average, rendered to CSV or aligned markdown with
// two-decimal cells. Missing cells stay empty.
struct ReportRow {
    std::string label;
    std::map<int, double> cells;  // subject -> accuracy %
};

struct ReportTable {
    std::string row_header = "Model";
    std::vector<int> subjects;  // column order
    std::vector<ReportRow> rows;
};

double row_average(const ReportRow& row);

std::string render_csv(const ReportTable& table);
std::string render_markdown(const ReportTable& table);

}  // namespace report
}  // namespace eegdg
