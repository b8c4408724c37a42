#pragma once

// Line charts as standalone SVG, no plotting dependency. Fixed 800x500
// canvas, optional log-scaled x axis, one polyline per series plus a legend.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace peftlab {

struct PlotSeries {
    std::string label;
    std::vector<std::pair<double, double>> points;
};

struct PlotOptions {
    std::string title;
    std::string x_label;
    std::string y_label;
    bool log_x = false;
};

namespace detail {

inline std::string xml_escape(const std::string& s) {
    std::string out;
    out.reserve(s.size());
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out.push_back(c);
        }
    }
    return out;
}

inline std::string fmt_num(double v) {
    char buf[48];
    std::snprintf(buf, sizeof(buf), "%.6g", v);
    return buf;
}

}  // namespace detail

inline void write_line_chart(const std::string& path, const PlotOptions& opts,
                             const std::vector<PlotSeries>& series) {
    if (series.empty()) throw std::invalid_argument("plot: no series");
    constexpr double width = 800, height = 500;
    constexpr double left = 70, right = 780, top = 50, bottom = 440;

    double x_min = 0, x_max = 1, y_min = 0, y_max = 1;
    bool first = true;
    for (const auto& s : series) {
        for (const auto& [x, y] : s.points) {
            const double xv = opts.log_x ? std::log10(std::max(x, 1e-12)) : x;
            if (first) {
                x_min = x_max = xv;
                y_min = y_max = y;
                first = false;
            } else {
                x_min = std::min(x_min, xv);
                x_max = std::max(x_max, xv);
                y_min = std::min(y_min, y);
                y_max = std::max(y_max, y);
            }
        }
    }
    if (first) throw std::invalid_argument("plot: series have no points");
    if (x_max == x_min) x_max = x_min + 1;
    if (y_max == y_min) y_max = y_min + 1;
    const double y_pad = 0.05 * (y_max - y_min);
    y_min -= y_pad;
    y_max += y_pad;

    auto sx = [&](double x) {
        const double xv = opts.log_x ? std::log10(std::max(x, 1e-12)) : x;
        return left + (xv - x_min) / (x_max - x_min) * (right - left);
    };
    auto sy = [&](double y) { return bottom - (y - y_min) / (y_max - y_min) * (bottom - top); };

    static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                    "#ff7f0e", "#8c564b", "#17becf", "#7f7f7f"};

    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("plot: cannot write " + path);
    out << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    out << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
        << height << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
    out << "  <rect x=\"0\" y=\"0\" width=\"" << width << "\" height=\"" << height
        << "\" fill=\"white\"/>\n";
    out << "  <text x=\"" << (width / 2) << "\" y=\"28\" text-anchor=\"middle\" font-size=\"18\" "
        << "font-family=\"sans-serif\">" << detail::xml_escape(opts.title) << "</text>\n";

    // axes
    out << "  <line x1=\"" << left << "\" y1=\"" << bottom << "\" x2=\"" << right << "\" y2=\""
        << bottom << "\" stroke=\"black\"/>\n";
    out << "  <line x1=\"" << left << "\" y1=\"" << top << "\" x2=\"" << left << "\" y2=\""
        << bottom << "\" stroke=\"black\"/>\n";
    for (int i = 0; i <= 5; ++i) {
        const double fx = x_min + (x_max - x_min) * i / 5.0;
        const double px = left + (right - left) * i / 5.0;
        const double label = opts.log_x ? std::pow(10.0, fx) : fx;
        out << "  <line x1=\"" << px << "\" y1=\"" << bottom << "\" x2=\"" << px << "\" y2=\""
            << (bottom + 5) << "\" stroke=\"black\"/>\n";
        out << "  <text x=\"" << px << "\" y=\"" << (bottom + 22)
            << "\" text-anchor=\"middle\" font-size=\"12\" font-family=\"sans-serif\">"
            << detail::fmt_num(label) << "</text>\n";
        const double fy = y_min + (y_max - y_min) * i / 5.0;
        const double py = bottom - (bottom - top) * i / 5.0;
        out << "  <line x1=\"" << (left - 5) << "\" y1=\"" << py << "\" x2=\"" << left << "\" y2=\""
            << py << "\" stroke=\"black\"/>\n";
        out << "  <text x=\"" << (left - 9) << "\" y=\"" << (py + 4)
            << "\" text-anchor=\"end\" font-size=\"12\" font-family=\"sans-serif\">"
            << detail::fmt_num(fy) << "</text>\n";
    }
    out << "  <text x=\"" << ((left + right) / 2) << "\" y=\"" << (height - 18)
        << "\" text-anchor=\"middle\" font-size=\"14\" font-family=\"sans-serif\">"
        << detail::xml_escape(opts.x_label) << (opts.log_x ? " (log scale)" : "") << "</text>\n";
    out << "  <text x=\"20\" y=\"" << ((top + bottom) / 2)
        << "\" text-anchor=\"middle\" font-size=\"14\" font-family=\"sans-serif\" "
        << "transform=\"rotate(-90 20 " << ((top + bottom) / 2) << ")\">"
        << detail::xml_escape(opts.y_label) << "</text>\n";

    for (std::size_t i = 0; i < series.size(); ++i) {
        const char* color = palette[i % (sizeof(palette) / sizeof(palette[0]))];
        out << "  <polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"2\" points=\"";
        for (const auto& [x, y] : series[i].points) {
            out << detail::fmt_num(sx(x)) << "," << detail::fmt_num(sy(y)) << " ";
        }
        out << "\"/>\n";
        for (const auto& [x, y] : series[i].points) {
            out << "  <circle cx=\"" << detail::fmt_num(sx(x)) << "\" cy=\""
                << detail::fmt_num(sy(y)) << "\" r=\"3\" fill=\"" << color << "\"/>\n";
        }
        const double ly = top + 18.0 * static_cast<double>(i);
        out << "  <line x1=\"" << (right - 150) << "\" y1=\"" << ly << "\" x2=\"" << (right - 120)
            << "\" y2=\"" << ly << "\" stroke=\"" << color << "\" stroke-width=\"2\"/>\n";
        out << "  <text x=\"" << (right - 114) << "\" y=\"" << (ly + 4)
            << "\" font-size=\"12\" font-family=\"sans-serif\">"
            << detail::xml_escape(series[i].label) << "</text>\n";
    }
    out << "</svg>\n";
    if (!out) throw std::runtime_error("plot: write failed for " + path);
}

}  // namespace peftlab
