#include "lnz/metrics.hpp"

#include <fstream>
#include <sstream>

#include "lnz/common.hpp"

namespace lnz::metrics {

void write_csv_header(std::ostream& os) {
    os << kCsvHeader << "\n";
}

namespace {
void put_opt(std::ostream& os, const std::optional<double>& v) {
    os << ",";
    if (v) os << *v;
}
}  // namespace

void write_csv_row(std::ostream& os, const MetricRecord& r) {
    os << r.wall_ms << "," << r.tokens_seen << "," << r.stage;
    put_opt(os, r.loss_ao);
    put_opt(os, r.loss_h2h);
    put_opt(os, r.loss_ce);
    put_opt(os, r.loss_kl);
    put_opt(os, r.ppl);
    os << "\n";
}

std::vector<MetricRecord> read_csv(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw AssetError("cannot open metrics file " + path);
    std::string line;
    if (!std::getline(is, line)) throw FormatError("empty metrics file " + path);
    if (line != kCsvHeader) throw FormatError("unexpected metrics header in " + path);
    std::vector<MetricRecord> out;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::vector<std::string> cells;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) cells.push_back(cell);
        cells.resize(8);
        MetricRecord r;
        r.wall_ms = std::stod(cells[0]);
        r.tokens_seen = std::stoll(cells[1]);
        r.stage = std::stoi(cells[2]);
        auto opt = [](const std::string& s) -> std::optional<double> {
            if (s.empty()) return std::nullopt;
            return std::stod(s);
        };
        r.loss_ao = opt(cells[3]);
        r.loss_h2h = opt(cells[4]);
        r.loss_ce = opt(cells[5]);
        r.loss_kl = opt(cells[6]);
        r.ppl = opt(cells[7]);
        out.push_back(r);
    }
    return out;
}

void write_plot_csv(const std::string& path, const std::vector<PlotPoint>& pts) {
    std::ofstream os(path, std::ios::trunc);
    if (!os) throw AssetError("cannot open " + path + " for writing");
    os << "x,y,series\n";
    for (const PlotPoint& p : pts) os << p.x << "," << p.y << "," << p.series << "\n";
}

}  // namespace lnz::metrics
