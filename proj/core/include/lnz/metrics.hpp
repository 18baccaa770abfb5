#pragma once

#include <optional>
#include <ostream>
#include <string>
#include <vector>

namespace lnz::metrics {

// One experiment-log row. Loss fields a stage does not compute stay empty
// in the CSV.
struct MetricRecord {
    double wall_ms = 0;
    int64_t tokens_seen = 0;
    int stage = 0;
    std::optional<double> loss_ao;
    std::optional<double> loss_h2h;
    std::optional<double> loss_ce;
    std::optional<double> loss_kl;
    std::optional<double> ppl;
};

inline constexpr const char* kCsvHeader =
    "wall_ms,tokens_seen,stage,loss_ao,loss_h2h,loss_ce,loss_kl,ppl";

void write_csv_header(std::ostream& os);
void write_csv_row(std::ostream& os, const MetricRecord& r);
std::vector<MetricRecord> read_csv(const std::string& path);

// (x, y, series) triples for external plotting.
struct PlotPoint {
    double x, y;
    std::string series;
};
void write_plot_csv(const std::string& path, const std::vector<PlotPoint>& pts);

}  // namespace lnz::metrics
