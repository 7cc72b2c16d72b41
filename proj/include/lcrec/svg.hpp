#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "lcrec/pool_eval.hpp"

namespace lcrec::svg {

/// One figure: a grid of metric rows (bias, CI length, coverage) by coefficient columns.
struct FigureData {
    std::string title;
    std::vector<Model> models;
    std::map<double, ScenarioSummary> by_prop;  // x axis: proportion previously at risk
};

enum class Metric { RelativeBias, CiLength, Coverage };

inline const char* metric_label(Metric m)
{
    switch (m) {
        case Metric::RelativeBias: return "Relative bias (%)";
        case Metric::CiLength: return "Mean 95% CI length";
        case Metric::Coverage: return "Coverage (%)";
    }
    return "";
}

inline double metric_value(const CoefficientSummary& c, Metric m)
{
    switch (m) {
        case Metric::RelativeBias: return c.relative_bias;
        case Metric::CiLength: return c.avg_ci_length;
        case Metric::Coverage: return c.coverage;
    }
    return std::numeric_limits<double>::quiet_NaN();
}

inline const char* series_color(Model m)
{
    switch (m) {
        case Model::ShfmiCp: return "#1b6ca8";
        case Model::ShfmiGt: return "#2e8b57";
        case Model::ChfmStrata: return "#c0392b";
    }
    return "#000000";
}

namespace detail {

inline std::string fmt(double v, int digits = 4)
{
    if (!std::isfinite(v)) return "NA";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*g", digits, v);
    return buf;
}

inline std::string escape(const std::string& s)
{
    std::string out;
    for (char c : s) {
        switch (c) {
            case '&': out += "&amp;"; break;
            case '<': out += "&lt;"; break;
            case '>': out += "&gt;"; break;
            case '"': out += "&quot;"; break;
            default: out += c;
        }
    }
    return out;
}

// "nice" tick step for a range
inline double tick_step(double span)
{
    if (!(span > 0.0)) return 1.0;
    const double raw = span / 5.0;
    const double mag = std::pow(10.0, std::floor(std::log10(raw)));
    const double r = raw / mag;
    return (r < 1.5 ? 1.0 : r < 3.5 ? 2.0 : r < 7.5 ? 5.0 : 10.0) * mag;
}

}  // namespace detail

/**
 * Self-contained SVG. The plotted numbers are repeated in a comment block
 * (prop_prior, model, coefficient, bias, ci_length, coverage) so a figure can be
 * audited without re-running the simulation.
 */
inline std::string render(const FigureData& fig)
{
    constexpr double panel_w = 260, panel_h = 180, margin_l = 70, margin_t = 60, gap_x = 40, gap_y = 60;
    constexpr std::array metrics{Metric::RelativeBias, Metric::CiLength, Metric::Coverage};
    const double width = margin_l + kNumCovariates * (panel_w + gap_x) + 20;
    const double height = margin_t + 3 * (panel_h + gap_y) + 40;
    const auto fmt = [](double v) { return detail::fmt(v); };

    std::ostringstream os;
    os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\"" << height
       << "\" viewBox=\"0 0 " << width << ' ' << height << "\" font-family=\"sans-serif\" font-size=\"11\">\n";
    os << "<!-- data\nprop_prior,model,coefficient,relative_bias,ci_length,coverage,R\n";
    for (const auto& [prop, summary] : fig.by_prop)
        for (Model m : fig.models)
            if (const auto* ms = summary.find(m))
                for (std::size_t j = 0; j < ms->coefficients.size(); ++j) {
                    const auto& c = ms->coefficients[j];
                    os << csv::num(prop) << ',' << to_string(m) << ",beta" << j + 1 << ',' << csv::num(c.relative_bias)
                       << ',' << csv::num(c.avg_ci_length) << ',' << csv::num(c.coverage) << ',' << ms->replicates << '\n';
                }
    os << "-->\n";
    os << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n";
    os << "<text x=\"" << width / 2 << "\" y=\"24\" text-anchor=\"middle\" font-size=\"15\">" << detail::escape(fig.title)
       << "</text>\n";

    // legend
    double lx = margin_l;
    for (Model m : fig.models) {
        os << "<line x1=\"" << lx << "\" y1=\"42\" x2=\"" << lx + 20 << "\" y2=\"42\" stroke=\"" << series_color(m)
           << "\" stroke-width=\"2\"/>";
        os << "<text x=\"" << lx + 25 << "\" y=\"46\">" << to_string(m) << "</text>\n";
        lx += 120;
    }

    double x_lo = 0.0, x_hi = 1.0;
    if (!fig.by_prop.empty()) {
        x_lo = std::min(0.0, fig.by_prop.begin()->first);
        x_hi = std::max(x_lo + 1e-9, fig.by_prop.rbegin()->first);
    }

    for (std::size_t row = 0; row < metrics.size(); ++row) {
        const Metric metric = metrics[row];
        for (int col = 0; col < kNumCovariates; ++col) {
            const double px = margin_l + col * (panel_w + gap_x);
            const double py = margin_t + static_cast<double>(row) * (panel_h + gap_y);

            // y range covers the data and the reference lines
            double y_lo = std::numeric_limits<double>::infinity(), y_hi = -y_lo;
            std::vector<double> refs;
            if (metric == Metric::RelativeBias) refs = {-kBiasThreshold, 0.0, kBiasThreshold};
            if (metric == Metric::Coverage) refs = {kCoverageLow, 95.0, kCoverageHigh};
            for (double r : refs) y_lo = std::min(y_lo, r), y_hi = std::max(y_hi, r);
            for (const auto& [prop, summary] : fig.by_prop)
                for (Model m : fig.models)
                    if (const auto* ms = summary.find(m); ms && ms->replicates > 0) {
                        const double v = metric_value(ms->coefficients[static_cast<std::size_t>(col)], metric);
                        if (std::isfinite(v)) y_lo = std::min(y_lo, v), y_hi = std::max(y_hi, v);
                    }
            if (!std::isfinite(y_lo)) y_lo = 0.0, y_hi = 1.0;
            if (metric == Metric::CiLength) y_lo = std::min(y_lo, 0.0);
            if (metric == Metric::Coverage) y_hi = std::min(std::max(y_hi, 100.0), 100.0);
            const double step = detail::tick_step(y_hi - y_lo);
            y_lo = std::floor(y_lo / step) * step;
            y_hi = std::ceil(y_hi / step) * step;
            if (y_hi <= y_lo) y_hi = y_lo + step;

            const auto sx = [&](double x) { return px + (x - x_lo) / (x_hi - x_lo) * panel_w; };
            const auto sy = [&](double y) { return py + panel_h - (y - y_lo) / (y_hi - y_lo) * panel_h; };

            os << "<g>\n<rect x=\"" << px << "\" y=\"" << py << "\" width=\"" << panel_w << "\" height=\"" << panel_h
               << "\" fill=\"none\" stroke=\"#444\"/>\n";
            os << "<text x=\"" << px + panel_w / 2 << "\" y=\"" << py - 8 << "\" text-anchor=\"middle\">"
               << metric_label(metric) << ", beta" << col + 1 << "</text>\n";
            for (double y = y_lo; y <= y_hi + 1e-9 * step; y += step) {
                os << "<line x1=\"" << px - 4 << "\" y1=\"" << fmt(sy(y)) << "\" x2=\"" << px << "\" y2=\"" << fmt(sy(y))
                   << "\" stroke=\"#444\"/>";
                os << "<text x=\"" << px - 6 << "\" y=\"" << fmt(sy(y) + 4) << "\" text-anchor=\"end\">" << fmt(y)
                   << "</text>\n";
            }
            for (const auto& entry : fig.by_prop) {
                const double x = entry.first;
                os << "<text x=\"" << fmt(sx(x)) << "\" y=\"" << py + panel_h + 15 << "\" text-anchor=\"middle\">"
                   << fmt(x) << "</text>";
            }
            os << "<text x=\"" << px + panel_w / 2 << "\" y=\"" << py + panel_h + 32
               << "\" text-anchor=\"middle\">Proportion previously at risk</text>\n";
            for (double r : refs) {
                const bool centre = (metric == Metric::RelativeBias && r == 0.0) || (metric == Metric::Coverage && r == 95.0);
                os << "<line class=\"reference\" data-value=\"" << fmt(r) << "\" x1=\"" << px << "\" y1=\""
                   << fmt(sy(r)) << "\" x2=\"" << px + panel_w << "\" y2=\"" << fmt(sy(r)) << "\" stroke=\"#888\""
                   << (centre ? "" : " stroke-dasharray=\"4 3\"") << "/>\n";
            }
            for (Model m : fig.models) {
                std::ostringstream pts;
                int count = 0;
                for (const auto& [prop, summary] : fig.by_prop) {
                    const auto* ms = summary.find(m);
                    if (!ms || ms->replicates == 0) continue;
                    const double v = metric_value(ms->coefficients[static_cast<std::size_t>(col)], metric);
                    if (!std::isfinite(v)) continue;
                    pts << (count++ ? " " : "") << fmt(sx(prop)) << ',' << fmt(sy(v));
                }
                if (count == 0) continue;
                os << "<polyline class=\"series\" data-model=\"" << to_string(m) << "\" points=\"" << pts.str()
                   << "\" fill=\"none\" stroke=\"" << series_color(m) << "\" stroke-width=\"1.8\"/>\n";
                std::istringstream is(pts.str());
                std::string pt;
                while (is >> pt) {
                    const auto comma = pt.find(',');
                    os << "<circle cx=\"" << pt.substr(0, comma) << "\" cy=\"" << pt.substr(comma + 1)
                       << "\" r=\"2.5\" fill=\"" << series_color(m) << "\"/>";
                }
                os << '\n';
            }
            os << "</g>\n";
        }
    }
    os << "</svg>\n";
    return os.str();
}

}  // namespace lcrec::svg
