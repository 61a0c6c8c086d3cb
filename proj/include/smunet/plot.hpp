#pragma once

#include "smunet/evaluate.hpp"

namespace smunet {

// Grouped bar chart of per-subset Dice scores, one group per modality subset,
// three bars (WT/CT/ET) per method, rendered into a 24-bit BMP. The geometry
// is computed by a pure layout function so tests can assert the chart
// structure without decoding pixels.

struct PlotBar {
    std::size_t group;   // subset index, 0..14
    std::size_t method;  // report index
    int region;          // 0 wt, 1 ct, 2 et
    double value;        // dice in [0,1]
    int x, y, w, h;      // pixel rectangle
};

struct PlotLayout {
    int width = 0, height = 0;
    std::size_t groups = 0;
    std::vector<PlotBar> bars;
};

struct NamedReport {
    std::string name;
    SubsetReport report;
};

inline PlotLayout plot_layout(const std::vector<NamedReport>& reports) {
    if (reports.empty()) throw std::invalid_argument("plot_layout: need at least one report");
    const std::size_t n_groups = reports.front().report.rows.size();
    for (const auto& r : reports)
        if (r.report.rows.size() != n_groups)
            throw std::invalid_argument("plot_layout: reports have differing row counts");

    PlotLayout out;
    out.groups = n_groups;
    const int margin_l = 40, margin_r = 10, margin_t = 16, margin_b = 26;
    const int bar_w = 4;
    const int bars_per_group = static_cast<int>(reports.size()) * 3;
    const int group_w = bars_per_group * bar_w + 10;
    const int plot_h = 180;
    out.width = margin_l + group_w * static_cast<int>(n_groups) + margin_r;
    out.height = margin_t + plot_h + margin_b;

    for (std::size_t g = 0; g < n_groups; ++g) {
        for (std::size_t m = 0; m < reports.size(); ++m) {
            const auto& row = reports[m].report.rows[g];
            const double vals[3] = {row.dice_wt, row.dice_ct, row.dice_et};
            for (int region = 0; region < 3; ++region) {
                PlotBar b;
                b.group = g;
                b.method = m;
                b.region = region;
                b.value = std::clamp(vals[region], 0.0, 1.0);
                b.x = margin_l + static_cast<int>(g) * group_w + 5 +
                      (static_cast<int>(m) * 3 + region) * bar_w;
                b.w = bar_w - 1;
                b.h = std::max(1, static_cast<int>(b.value * plot_h));
                b.y = margin_t + plot_h - b.h;
                out.bars.push_back(b);
            }
        }
    }
    return out;
}

namespace detail {

struct Rgb {
    std::uint8_t r, g, b;
};

/// Method hue with region shading: WT brightest, ET darkest.
inline Rgb bar_color(std::size_t method, int region) {
    static const Rgb base[] = {{31, 119, 180}, {255, 127, 14}, {44, 160, 44},
                               {214, 39, 40},  {148, 103, 189}, {140, 86, 75}};
    Rgb c = base[method % 6];
    const double f = region == 0 ? 1.0 : (region == 1 ? 0.72 : 0.45);
    c.r = static_cast<std::uint8_t>(c.r * f);
    c.g = static_cast<std::uint8_t>(c.g * f);
    c.b = static_cast<std::uint8_t>(c.b * f);
    return c;
}

/// Minimal uncompressed 24-bit BMP writer (BI_RGB, bottom-up rows).
inline void write_bmp(const std::filesystem::path& path, int width, int height,
                      const std::vector<Rgb>& pixels) {
    const int row_bytes = (width * 3 + 3) / 4 * 4;
    const std::uint32_t data_size = static_cast<std::uint32_t>(row_bytes) * height;
    const std::uint32_t file_size = 54 + data_size;
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw std::runtime_error("write_bmp: cannot write " + path.string());
    auto u16 = [&](std::uint16_t v) { f.write(reinterpret_cast<const char*>(&v), 2); };
    auto u32 = [&](std::uint32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); };
    auto i32 = [&](std::int32_t v) { f.write(reinterpret_cast<const char*>(&v), 4); };
    f.write("BM", 2);
    u32(file_size);
    u32(0);
    u32(54);
    u32(40); // BITMAPINFOHEADER
    i32(width);
    i32(height);
    u16(1);
    u16(24);
    u32(0); // BI_RGB
    u32(data_size);
    i32(2835);
    i32(2835);
    u32(0);
    u32(0);
    std::vector<std::uint8_t> row(static_cast<std::size_t>(row_bytes), 0);
    for (int y = height - 1; y >= 0; --y) {
        for (int x = 0; x < width; ++x) {
            const Rgb& p = pixels[static_cast<std::size_t>(y) * width + x];
            row[x * 3 + 0] = p.b;
            row[x * 3 + 1] = p.g;
            row[x * 3 + 2] = p.r;
        }
        f.write(reinterpret_cast<const char*>(row.data()), row_bytes);
    }
    if (!f) throw std::runtime_error("write_bmp: short write to " + path.string());
}

} // namespace detail

/// Renders the grouped comparison chart and writes it as a BMP raster image.
inline PlotLayout emit_plot(const std::vector<NamedReport>& reports,
                            const std::filesystem::path& path) {
    PlotLayout layout = plot_layout(reports);
    std::vector<detail::Rgb> px(static_cast<std::size_t>(layout.width) * layout.height,
                                {255, 255, 255});
    auto put = [&](int x, int y, detail::Rgb c) {
        if (x >= 0 && x < layout.width && y >= 0 && y < layout.height)
            px[static_cast<std::size_t>(y) * layout.width + x] = c;
    };
    // Axes and gridlines at 0, 0.5, 1.0.
    const int margin_t = 16, plot_h = 180, margin_l = 40;
    for (double tick : {0.0, 0.5, 1.0}) {
        const int y = margin_t + plot_h - static_cast<int>(tick * plot_h);
        for (int x = margin_l - 4; x < layout.width - 8; ++x)
            put(x, y, tick == 0.0 ? detail::Rgb{0, 0, 0} : detail::Rgb{220, 220, 220});
    }
    for (int y = margin_t; y <= margin_t + plot_h; ++y) put(margin_l - 4, y, {0, 0, 0});
    for (const auto& b : layout.bars) {
        const auto c = detail::bar_color(b.method, b.region);
        for (int dy = 0; dy < b.h; ++dy)
            for (int dx = 0; dx < b.w; ++dx) put(b.x + dx, b.y + dy, c);
    }
    // Group ticks under the axis.
    const auto& first = layout.bars;
    for (std::size_t g = 0; g < layout.groups; ++g) {
        int min_x = layout.width, max_x = 0;
        for (const auto& b : first)
            if (b.group == g) {
                min_x = std::min(min_x, b.x);
                max_x = std::max(max_x, b.x + b.w);
            }
        const int y0 = margin_t + plot_h + 3;
        for (int x = min_x; x <= max_x; ++x) put(x, y0, {90, 90, 90});
    }
    detail::write_bmp(path, layout.width, layout.height, px);
    return layout;
}

} // namespace smunet
