#include "uda/plot.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <limits>

namespace uda {
namespace {

constexpr double kW = 720, kH = 440;
constexpr double kLeft = 70, kRight = 170, kTop = 40, kBottom = 56;
const char* const kPalette[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd",
                                "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22", "#17becf"};

std::string fmt(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.4g", v);
    return buf;
}

std::string px(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

std::string escape(const std::string& s) {
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&':
                out += "&amp;";
                break;
            case '<':
                out += "&lt;";
                break;
            case '>':
                out += "&gt;";
                break;
            case '"':
                out += "&quot;";
                break;
            default:
                out += c;
        }
    }
    return out;
}

const char* colour(std::size_t i) { return kPalette[i % (sizeof kPalette / sizeof kPalette[0])]; }

std::string header(const ChartLabels& l) {
    std::string s = "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" + px(kW) + "\" height=\"" + px(kH) +
                    "\" viewBox=\"0 0 " + px(kW) + " " + px(kH) + "\" font-family=\"sans-serif\" font-size=\"12\">\n";
    s += "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    s += "<text x=\"" + px(kW / 2) + "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" + escape(l.title) +
         "</text>\n";
    s += "<text x=\"" + px(kLeft + (kW - kLeft - kRight) / 2) + "\" y=\"" + px(kH - 12) + "\" text-anchor=\"middle\">" +
         escape(l.x) + "</text>\n";
    s += "<text transform=\"translate(16," + px(kTop + (kH - kTop - kBottom) / 2) +
         ") rotate(-90)\" text-anchor=\"middle\">" + escape(l.y) + "</text>\n";
    return s;
}

std::string legend(const std::vector<std::string>& names) {
    std::string s;
    for (std::size_t i = 0; i < names.size(); ++i) {
        const double y = kTop + 10 + 18.0 * static_cast<double>(i);
        s += "<rect x=\"" + px(kW - kRight + 14) + "\" y=\"" + px(y - 9) + "\" width=\"12\" height=\"12\" fill=\"" +
             colour(i) + "\"/>\n";
        s += "<text x=\"" + px(kW - kRight + 32) + "\" y=\"" + px(y + 1) + "\">" + escape(names[i]) + "</text>\n";
    }
    return s;
}

struct Axis {
    double lo, hi;
    double map(double v, double a, double b) const { return a + (v - lo) / (hi - lo) * (b - a); }
};

Axis padded(double lo, double hi) {
    if (!(lo < hi)) {
        const double d = std::abs(lo) > 0 ? 0.05 * std::abs(lo) : 1.0;
        return {lo - d, hi + d};
    }
    return {lo, hi};
}

std::string ticks(const Axis& ax, bool vertical, bool log) {
    std::string s;
    const double x0 = kLeft, x1 = kW - kRight, y0 = kH - kBottom, y1 = kTop;
    for (int i = 0; i <= 5; ++i) {
        const double v = ax.lo + (ax.hi - ax.lo) * i / 5.0;
        const std::string label = fmt(log ? std::pow(10.0, v) : v);
        if (vertical) {
            const double y = ax.map(v, y0, y1);
            s += "<line x1=\"" + px(x0) + "\" y1=\"" + px(y) + "\" x2=\"" + px(x1) + "\" y2=\"" + px(y) +
                 "\" stroke=\"#e5e5e5\"/>\n";
            s += "<text x=\"" + px(x0 - 6) + "\" y=\"" + px(y + 4) + "\" text-anchor=\"end\">" + label + "</text>\n";
        } else {
            const double x = ax.map(v, x0, x1);
            s += "<text x=\"" + px(x) + "\" y=\"" + px(y0 + 18) + "\" text-anchor=\"middle\">" + label + "</text>\n";
        }
    }
    s += "<rect x=\"" + px(x0) + "\" y=\"" + px(y1) + "\" width=\"" + px(x1 - x0) + "\" height=\"" + px(y0 - y1) +
         "\" fill=\"none\" stroke=\"#333\"/>\n";
    return s;
}

}  // namespace

std::string line_chart_svg(const std::vector<Series>& series, const ChartLabels& labels, bool log_y) {
    auto ty = [&](double v) { return log_y ? std::log10(v) : v; };
    auto ok = [&](double x, double y) { return std::isfinite(x) && std::isfinite(ty(y)); };
    double xl = std::numeric_limits<double>::infinity(), xh = -xl, yl = xl, yh = -xl;
    for (const auto& s : series) {
        for (std::size_t i = 0; i < std::min(s.x.size(), s.y.size()); ++i) {
            if (!ok(s.x[i], s.y[i])) continue;
            xl = std::min(xl, s.x[i]);
            xh = std::max(xh, s.x[i]);
            yl = std::min(yl, ty(s.y[i]));
            yh = std::max(yh, ty(s.y[i]));
        }
    }
    if (!std::isfinite(xl)) xl = 0, xh = 1, yl = 0, yh = 1;
    const Axis ax = padded(xl, xh), ay = padded(yl, yh);

    std::string out = header(labels);
    out += ticks(ay, true, log_y);
    out += ticks(ax, false, false);
    std::vector<std::string> names;
    for (std::size_t k = 0; k < series.size(); ++k) {
        const auto& s = series[k];
        names.push_back(s.name);
        std::string pts;
        for (std::size_t i = 0; i < std::min(s.x.size(), s.y.size()); ++i) {
            if (!ok(s.x[i], s.y[i])) continue;
            pts += px(ax.map(s.x[i], kLeft, kW - kRight)) + "," + px(ay.map(ty(s.y[i]), kH - kBottom, kTop)) + " ";
        }
        out += "<polyline fill=\"none\" stroke-width=\"1.5\" stroke=\"" + std::string(colour(k)) + "\" points=\"" +
               pts + "\"/>\n";
    }
    out += legend(names);
    return out + "</svg>\n";
}

std::string bar_chart_svg(const std::vector<BarGroup>& groups, const std::vector<std::string>& legend_names,
                          const ChartLabels& labels) {
    double yh = 0;
    for (const auto& g : groups)
        for (std::size_t i = 0; i < g.values.size(); ++i) {
            const double e = i < g.errors.size() ? g.errors[i] : 0.0;
            if (std::isfinite(g.values[i])) yh = std::max(yh, g.values[i] + (std::isfinite(e) ? e : 0.0));
        }
    const Axis ay = padded(0.0, yh > 0 ? yh * 1.05 : 1.0);
    std::string out = header(labels);
    out += ticks(ay, true, false);
    const double x0 = kLeft, x1 = kW - kRight;
    const double slot = groups.empty() ? 1.0 : (x1 - x0) / static_cast<double>(groups.size());
    for (std::size_t g = 0; g < groups.size(); ++g) {
        const auto& grp = groups[g];
        const std::size_t n = std::max<std::size_t>(grp.values.size(), 1);
        const double bw = 0.8 * slot / static_cast<double>(n);
        for (std::size_t i = 0; i < grp.values.size(); ++i) {
            const double v = grp.values[i];
            if (!std::isfinite(v)) continue;
            const double x = x0 + slot * static_cast<double>(g) + 0.1 * slot + bw * static_cast<double>(i);
            const double y = ay.map(v, kH - kBottom, kTop), base = ay.map(0.0, kH - kBottom, kTop);
            out += "<rect x=\"" + px(x) + "\" y=\"" + px(y) + "\" width=\"" + px(bw * 0.92) + "\" height=\"" +
                   px(base - y) + "\" fill=\"" + colour(i) + "\"/>\n";
            if (i < grp.errors.size() && std::isfinite(grp.errors[i]) && grp.errors[i] > 0) {
                const double cx = x + bw * 0.46;
                const double ya = ay.map(v - grp.errors[i], kH - kBottom, kTop);
                const double yb = ay.map(v + grp.errors[i], kH - kBottom, kTop);
                out += "<line x1=\"" + px(cx) + "\" y1=\"" + px(ya) + "\" x2=\"" + px(cx) + "\" y2=\"" + px(yb) +
                       "\" stroke=\"#000\"/>\n";
            }
        }
        out += "<text x=\"" + px(x0 + slot * (static_cast<double>(g) + 0.5)) + "\" y=\"" + px(kH - kBottom + 18) +
               "\" text-anchor=\"middle\">" + escape(grp.name) + "</text>\n";
    }
    out += legend(legend_names);
    return out + "</svg>\n";
}

}  // namespace uda
