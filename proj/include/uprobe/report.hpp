#pragma once

// CSV emission/parsing and static SVG plots (ROC curves, Fig-5 style bars).

#include <cmath>
#include <cstdio>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "uprobe/errors.hpp"
#include "uprobe/metrics.hpp"

namespace uprobe {

// Shortest decimal form that round-trips a double.
inline std::string fmt_double(double v) {
    if (std::isnan(v)) return "nan";
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[32];
    for (int prec = 1; prec <= 17; ++prec) {
        std::snprintf(buf, sizeof buf, "%.*g", prec, v);
        if (std::strtod(buf, nullptr) == v) break;
    }
    return buf;
}

inline std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    return out + "\"";
}

inline std::string csv_row(const std::vector<std::string>& fields) {
    std::string line;
    for (std::size_t i = 0; i < fields.size(); ++i) {
        if (i) line += ',';
        line += csv_field(fields[i]);
    }
    return line + "\n";
}

struct CsvTable {
    std::vector<std::string> header;
    std::vector<std::vector<std::string>> rows;

    std::size_t column(const std::string& name) const {
        for (std::size_t i = 0; i < header.size(); ++i) {
            if (header[i] == name) return i;
        }
        throw DataError("CSV has no column '" + name + "'");
    }
};

inline std::vector<std::string> parse_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    bool quoted = false;
    for (std::size_t i = 0; i < line.size(); ++i) {
        const char c = line[i];
        if (quoted) {
            if (c == '"' && i + 1 < line.size() && line[i + 1] == '"') {
                cur += '"';
                ++i;
            } else if (c == '"') {
                quoted = false;
            } else {
                cur += c;
            }
        } else if (c == '"') {
            quoted = true;
        } else if (c == ',') {
            out.push_back(std::move(cur));
            cur.clear();
        } else if (c != '\r') {
            cur += c;
        }
    }
    out.push_back(std::move(cur));
    return out;
}

inline CsvTable parse_csv(std::istream& in) {
    CsvTable t;
    std::string line;
    bool first = true;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        auto fields = parse_csv_line(line);
        if (first) {
            t.header = std::move(fields);
            first = false;
            continue;
        }
        if (fields.size() != t.header.size()) throw DataError("CSV row has " + std::to_string(fields.size()) +
                                                              " fields, header has " + std::to_string(t.header.size()));
        t.rows.push_back(std::move(fields));
    }
    if (first) throw DataError("CSV is empty");
    return t;
}

// ROC points as CSV: curve,fpr,tpr.
inline std::string roc_csv(const std::string& curve, const std::vector<RocPoint>& pts, bool with_header = true) {
    std::string s = with_header ? csv_row({"curve", "fpr", "tpr"}) : "";
    for (const auto& p : pts) s += csv_row({curve, fmt_double(p.fpr), fmt_double(p.tpr)});
    return s;
}

inline std::map<std::string, std::vector<RocPoint>> roc_curves_from_csv(const CsvTable& t) {
    const auto c = t.column("curve"), f = t.column("fpr"), p = t.column("tpr");
    std::map<std::string, std::vector<RocPoint>> out;
    for (const auto& r : t.rows) out[r[c]].push_back({std::stod(r[f]), std::stod(r[p])});
    return out;
}

namespace detail {

inline const char* palette(std::size_t i) {
    static const char* colors[] = {"#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf"};
    return colors[i % 7];
}

inline std::string xml_escape(const std::string& s) {
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

inline std::string num(double v) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", v);
    return buf;
}

}  // namespace detail

// One <path class="roc"> per curve, plus the chance diagonal.
inline std::string roc_svg(const std::map<std::string, std::vector<RocPoint>>& curves, const std::string& comment = {}) {
    const double size = 400, pad = 50;
    auto X = [&](double f) { return pad + f * size; };
    auto Y = [&](double t) { return pad + (1.0 - t) * size; };
    std::ostringstream s;
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << size + 2 * pad + 160 << "\" height=\"" << size + 2 * pad
      << "\">\n";
    if (!comment.empty()) s << "<!-- " << detail::xml_escape(comment) << " -->\n";
    s << "<rect x=\"" << pad << "\" y=\"" << pad << "\" width=\"" << size << "\" height=\"" << size
      << "\" fill=\"none\" stroke=\"black\"/>\n";
    s << "<line x1=\"" << X(0) << "\" y1=\"" << Y(0) << "\" x2=\"" << X(1) << "\" y2=\"" << Y(1)
      << "\" stroke=\"gray\" stroke-dasharray=\"4 4\"/>\n";
    s << "<text x=\"" << pad + size / 2 << "\" y=\"" << size + 2 * pad - 10
      << "\" text-anchor=\"middle\">false positive rate</text>\n";
    s << "<text x=\"15\" y=\"" << pad + size / 2 << "\" transform=\"rotate(-90 15 " << pad + size / 2
      << ")\" text-anchor=\"middle\">true positive rate</text>\n";
    std::size_t i = 0;
    for (const auto& [name, pts] : curves) {
        s << "<path class=\"roc\" data-curve=\"" << detail::xml_escape(name) << "\" fill=\"none\" stroke=\""
          << detail::palette(i) << "\" stroke-width=\"2\" d=\"";
        for (std::size_t k = 0; k < pts.size(); ++k) {
            s << (k ? " L" : "M") << detail::num(X(pts[k].fpr)) << " " << detail::num(Y(pts[k].tpr));
        }
        s << "\"/>\n";
        s << "<text x=\"" << pad + size + 10 << "\" y=\"" << pad + 20 + 20 * i << "\" fill=\"" << detail::palette(i)
          << "\">" << detail::xml_escape(name) << "</text>\n";
        ++i;
    }
    s << "</svg>\n";
    return s.str();
}

struct BarGroup {
    std::string label;
    std::vector<std::pair<std::string, double>> bars;  // (series, value in [0, 1])
};

// Grouped bar chart on a [0, 1] axis.
inline std::string bar_svg(const std::vector<BarGroup>& groups, const std::string& y_label,
                           const std::string& comment = {}) {
    const double height = 300, pad = 50, bar_w = 28, gap = 30;
    std::size_t total_bars = 0;
    for (const auto& g : groups) total_bars += g.bars.size();
    const double width = static_cast<double>(total_bars) * bar_w + static_cast<double>(groups.size() + 1) * gap;
    std::map<std::string, std::size_t> series;
    for (const auto& g : groups) {
        for (const auto& b : g.bars) series.emplace(b.first, series.size());
    }
    std::ostringstream s;
    s << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width + 2 * pad + 160 << "\" height=\""
      << height + 2 * pad + 20 << "\">\n";
    if (!comment.empty()) s << "<!-- " << detail::xml_escape(comment) << " -->\n";
    s << "<line x1=\"" << pad << "\" y1=\"" << pad + height << "\" x2=\"" << pad + width << "\" y2=\"" << pad + height
      << "\" stroke=\"black\"/>\n";
    s << "<line x1=\"" << pad << "\" y1=\"" << pad << "\" x2=\"" << pad << "\" y2=\"" << pad + height
      << "\" stroke=\"black\"/>\n";
    s << "<text x=\"15\" y=\"" << pad + height / 2 << "\" transform=\"rotate(-90 15 " << pad + height / 2
      << ")\" text-anchor=\"middle\">" << detail::xml_escape(y_label) << "</text>\n";
    double x = pad + gap;
    for (const auto& g : groups) {
        const double start = x;
        for (const auto& [name, v] : g.bars) {
            const double h = std::clamp(v, 0.0, 1.0) * height;
            s << "<rect class=\"bar\" data-series=\"" << detail::xml_escape(name) << "\" x=\"" << detail::num(x)
              << "\" y=\"" << detail::num(pad + height - h) << "\" width=\"" << bar_w << "\" height=\""
              << detail::num(h) << "\" fill=\"" << detail::palette(series.at(name)) << "\"/>\n";
            x += bar_w;
        }
        s << "<text x=\"" << detail::num((start + x) / 2) << "\" y=\"" << pad + height + 20
          << "\" text-anchor=\"middle\">" << detail::xml_escape(g.label) << "</text>\n";
        x += gap;
    }
    for (const auto& [name, idx] : series) {
        s << "<text x=\"" << pad + width + 10 << "\" y=\"" << pad + 20 + 20 * idx << "\" fill=\""
          << detail::palette(idx) << "\">" << detail::xml_escape(name) << "</text>\n";
    }
    s << "</svg>\n";
    return s.str();
}

}  // namespace uprobe
