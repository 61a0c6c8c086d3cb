#pragma once

#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>

#include "smunet/volume.hpp"

namespace smunet {

/// Hard-overlap Dice: 2|P&T| / (|P|+|T|), defined as 1.0 when both masks are
/// empty (a subset may legitimately contain no enhancing tumor).
inline double dice_score(const Tensor<std::uint8_t>& pred, const Tensor<std::uint8_t>& truth) {
    if (!(pred.shape() == truth.shape()))
        throw std::invalid_argument("dice_score: shape mismatch " + pred.shape_str() + " vs " +
                                    truth.shape_str());
    std::int64_t inter = 0, p = 0, t = 0;
    for (std::int64_t i = 0; i < pred.size(); ++i) {
        const bool a = pred[i] != 0, b = truth[i] != 0;
        inter += a && b;
        p += a;
        t += b;
    }
    if (p + t == 0) return 1.0;
    return 2.0 * static_cast<double>(inter) / static_cast<double>(p + t);
}

/// Table-shaped evaluation result: one row per modality subset in canonical
/// order, Dice per nested region, plus column means.
struct SubsetReport {
    struct Row {
        ModalityMask mask = ModalityMask::all();
        double dice_wt = 0, dice_ct = 0, dice_et = 0;
    };
    std::vector<Row> rows;
    double mean_wt = 0, mean_ct = 0, mean_et = 0;

    void recompute_means() {
        mean_wt = mean_ct = mean_et = 0;
        for (const auto& r : rows) {
            mean_wt += r.dice_wt;
            mean_ct += r.dice_ct;
            mean_et += r.dice_et;
        }
        const double n = rows.empty() ? 1.0 : static_cast<double>(rows.size());
        mean_wt /= n;
        mean_ct /= n;
        mean_et /= n;
    }
};

/// Anything that can label a volume under a modality mask. The engine wraps
/// its missing-path inference as one of these; tests inject oracles.
using Predictor =
    std::function<Tensor<std::uint8_t>(const LabeledVolume&, const ModalityMask&)>;

/// Runs the full 15-subset protocol: for every mask, infer each volume,
/// derive the nested regions of prediction and truth, and average per-region
/// Dice over the dataset.
inline SubsetReport evaluate_subsets(const Predictor& predict,
                                     const std::vector<LabeledVolume>& dataset) {
    if (dataset.empty()) throw std::invalid_argument("evaluate_subsets: empty dataset");
    SubsetReport report;
    for (const auto& mask : enumerate_subsets()) {
        SubsetReport::Row row;
        row.mask = mask;
        for (const auto& vol : dataset) {
            auto pred_regions = derive_regions(predict(vol, mask));
            auto true_regions = derive_regions(vol.labels);
            row.dice_wt += dice_score(pred_regions.wt, true_regions.wt);
            row.dice_ct += dice_score(pred_regions.ct, true_regions.ct);
            row.dice_et += dice_score(pred_regions.et, true_regions.et);
        }
        const double n = static_cast<double>(dataset.size());
        row.dice_wt /= n;
        row.dice_ct /= n;
        row.dice_et /= n;
        report.rows.push_back(row);
    }
    report.recompute_means();
    return report;
}

namespace detail {

inline std::string csv_num(double v) {
    char b[40];
    std::snprintf(b, sizeof(b), "%.17g", v);
    return b;
}

} // namespace detail

/// Writes the table as CSV: header, 15 mask rows (0/1 per modality), final
/// mean row. An optional row filter restricts to matching masks; the mean row
/// then covers the emitted rows only.
inline void emit_table(const SubsetReport& report, const std::filesystem::path& path,
                       const std::optional<ModalityMask>& only = std::nullopt) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw std::runtime_error("emit_table: cannot write " + path.string());
    f << "flair,t1,t1c,t2,dice_wt,dice_ct,dice_et\n";
    double sw = 0, sc = 0, se = 0;
    std::int64_t n = 0;
    for (const auto& r : report.rows) {
        if (only && !(r.mask == *only)) continue;
        const auto& p = r.mask.present();
        f << p[0] << "," << p[1] << "," << p[2] << "," << p[3] << ","
          << detail::csv_num(r.dice_wt) << "," << detail::csv_num(r.dice_ct) << ","
          << detail::csv_num(r.dice_et) << "\n";
        sw += r.dice_wt;
        sc += r.dice_ct;
        se += r.dice_et;
        ++n;
    }
    if (n == 0) throw std::runtime_error("emit_table: row filter matched nothing");
    f << "mean,,,," << detail::csv_num(sw / n) << "," << detail::csv_num(sc / n) << ","
      << detail::csv_num(se / n) << "\n";
    if (!f) throw std::runtime_error("emit_table: short write to " + path.string());
}

/// Parses a CSV produced by emit_table (full-table form).
inline SubsetReport parse_table(const std::filesystem::path& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("parse_table: cannot read " + path.string());
    std::string line;
    if (!std::getline(f, line) || line != "flair,t1,t1c,t2,dice_wt,dice_ct,dice_et")
        throw std::runtime_error("parse_table: unexpected header in " + path.string());
    SubsetReport report;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::array<std::string, 7> cells;
        std::size_t start = 0;
        for (int i = 0; i < 7; ++i) {
            const std::size_t comma = line.find(',', start);
            cells[i] = line.substr(start, comma == std::string::npos ? std::string::npos
                                                                     : comma - start);
            start = comma == std::string::npos ? line.size() : comma + 1;
        }
        if (cells[0] == "mean") {
            report.mean_wt = std::stod(cells[4]);
            report.mean_ct = std::stod(cells[5]);
            report.mean_et = std::stod(cells[6]);
            continue;
        }
        SubsetReport::Row row;
        row.mask = ModalityMask::parse(cells[0] + cells[1] + cells[2] + cells[3]);
        row.dice_wt = std::stod(cells[4]);
        row.dice_ct = std::stod(cells[5]);
        row.dice_et = std::stod(cells[6]);
        report.rows.push_back(row);
    }
    return report;
}

} // namespace smunet
