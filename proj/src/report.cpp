#include "eegdg/report.hpp"

#include <cstdio>
#include <sstream>

namespace eegdg {
namespace report {

namespace {

std::string fmt2(double v) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "%.2f", v);
    return buf;
}

}  // namespace

double row_average(const ReportRow& row) {
    double acc = 0;
    for (const auto& [subj, v] : row.cells) acc += v;
    return row.cells.empty() ? 0.0 : acc / static_cast<double>(row.cells.size());
}

std::string render_csv(const ReportTable& table) {
    std::ostringstream os;
    os << table.row_header;
    for (int s : table.subjects) os << "," << s;
    os << ",Avg.\n";
    for (const auto& row : table.rows) {
        os << row.label;
        for (int s : table.subjects) {
            os << ",";
            auto it = row.cells.find(s);
            if (it != row.cells.end()) os << fmt2(it->second);
        }
        os << "," << (row.cells.empty() ? "" : fmt2(row_average(row))) << "\n";
    }
    return os.str();
}

std::string render_markdown(const ReportTable& table) {
    // Column widths: header vs the widest cell.
    std::size_t label_w = table.row_header.size();
    for (const auto& row : table.rows) label_w = std::max(label_w, row.label.size());

    std::ostringstream os;
    auto pad = [&os](const std::string& s, std::size_t w) {
        os << s;
        for (std::size_t i = s.size(); i < w; ++i) os << ' ';
    };

    os << "| ";
    pad(table.row_header, label_w);
    for (int s : table.subjects) {
        os << " | ";
        pad(std::to_string(s), 6);
    }
    os << " | ";
    pad("Avg.", 6);
    os << " |\n";

    os << "|-";
    for (std::size_t i = 0; i < label_w; ++i) os << '-';
    for (std::size_t c = 0; c < table.subjects.size() + 1; ++c) os << "-|--------";
    os << "-|\n";

    for (const auto& row : table.rows) {
        os << "| ";
        pad(row.label, label_w);
        for (int s : table.subjects) {
            os << " | ";
            auto it = row.cells.find(s);
            pad(it != row.cells.end() ? fmt2(it->second) : "", 6);
        }
        os << " | ";
        pad(row.cells.empty() ? "" : fmt2(row_average(row)), 6);
        os << " |\n";
    }
    return os.str();
}

}  // namespace report
}  // namespace eegdg
