#include "svg.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace dladiff::cli {

namespace {

const char* kColours[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b"};

std::string escape(const std::string& s) {
    std::string o;
    for (char c : s) {
        if (c == '<') o += "&lt;";
        else if (c == '>') o += "&gt;";
        else if (c == '&') o += "&amp;";
        else o += c;
    }
    return o;
}

std::string num(double v) {
    std::ostringstream os;
    os.precision(4);
    os << v;
    return os.str();
}

void save(const std::filesystem::path& path, const std::string& body) {
    std::ofstream os(path);
    if (!os) throw std::runtime_error("cannot write " + path.string());
    os << body;
}

}  // namespace

void write_line_plot(const std::filesystem::path& path, const std::string& title, const std::vector<Series>& series) {
    const double W = 640, H = 400, L = 70, R = 20, T = 40, B = 40;
    double lo = INFINITY, hi = -INFINITY;
    std::size_t n = 0;
    for (const auto& s : series) {
        n = std::max(n, s.y.size());
        for (double v : s.y)
            if (std::isfinite(v)) lo = std::min(lo, v), hi = std::max(hi, v);
    }
    if (!std::isfinite(lo)) lo = 0, hi = 1;
    if (hi == lo) hi = lo + 1;
    const auto px = [&](std::size_t i) { return L + (W - L - R) * (n > 1 ? double(i) / double(n - 1) : 0.5); };
    const auto py = [&](double v) { return T + (H - T - B) * (1.0 - (v - lo) / (hi - lo)); };
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n"
       << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
       << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << escape(title) << "</text>\n"
       << "<line x1=\"" << L << "\" y1=\"" << H - B << "\" x2=\"" << W - R << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n"
       << "<line x1=\"" << L << "\" y1=\"" << T << "\" x2=\"" << L << "\" y2=\"" << H - B << "\" stroke=\"black\"/>\n"
       << "<text x=\"" << L - 6 << "\" y=\"" << T + 4 << "\" text-anchor=\"end\" font-size=\"11\">" << num(hi) << "</text>\n"
       << "<text x=\"" << L - 6 << "\" y=\"" << H - B << "\" text-anchor=\"end\" font-size=\"11\">" << num(lo) << "</text>\n"
       << "<text x=\"" << W - R << "\" y=\"" << H - B + 16 << "\" text-anchor=\"end\" font-size=\"11\">" << (n ? n - 1 : 0)
       << "</text>\n";
    for (std::size_t k = 0; k < series.size(); ++k) {
        const char* colour = kColours[k % std::size(kColours)];
        os << "<polyline fill=\"none\" stroke=\"" << colour << "\" stroke-width=\"1.5\" points=\"";
        for (std::size_t i = 0; i < series[k].y.size(); ++i)
            if (std::isfinite(series[k].y[i])) os << px(i) << ',' << py(series[k].y[i]) << ' ';
        os << "\"/>\n<text x=\"" << L + 10 << "\" y=\"" << T + 14 * (k + 1) << "\" fill=\"" << colour
           << "\" font-size=\"12\">" << escape(series[k].label) << "</text>\n";
    }
    os << "</svg>\n";
    save(path, os.str());
}

void write_bar_chart(const std::filesystem::path& path, const std::string& title,
                     const std::vector<std::pair<std::string, double>>& bars) {
    const double W = 640, L = 240, R = 80, row = 22, T = 40;
    const double H = T + row * static_cast<double>(bars.size()) + 20;
    double hi = 0;
    for (const auto& [k, v] : bars)
        if (std::isfinite(v)) hi = std::max(hi, std::abs(v));
    if (hi == 0) hi = 1;
    std::ostringstream os;
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << W << "\" height=\"" << H << "\">\n"
       << "<rect width=\"100%\" height=\"100%\" fill=\"white\"/>\n"
       << "<text x=\"" << W / 2 << "\" y=\"22\" text-anchor=\"middle\" font-size=\"15\">" << escape(title) << "</text>\n";
    for (std::size_t i = 0; i < bars.size(); ++i) {
        const double y = T + row * static_cast<double>(i);
        const double v = bars[i].second;
        const double w = std::isfinite(v) ? (W - L - R) * std::abs(v) / hi : 0;
        os << "<text x=\"" << L - 6 << "\" y=\"" << y + 14 << "\" text-anchor=\"end\" font-size=\"11\">"
           << escape(bars[i].first) << "</text>\n"
           << "<rect x=\"" << L << "\" y=\"" << y + 3 << "\" width=\"" << w << "\" height=\"" << row - 6 << "\" fill=\""
           << (v < 0 ? "#d62728" : "#1f77b4") << "\"/>\n"
           << "<text x=\"" << L + w + 4 << "\" y=\"" << y + 14 << "\" font-size=\"11\">" << num(v) << "</text>\n";
    }
    os << "</svg>\n";
    save(path, os.str());
}

}  // namespace dladiff::cli
