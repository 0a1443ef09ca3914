#pragma once

#include "unrec/common.hpp"

#include <json.hpp>

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace unrec {

// Cosine on raw input features, bias excluded, no centering. Near-zero norms
// yield 0 with the degenerate flag set.
inline double cosine_similarity(const Vector& a, const Vector& b, bool* degenerate = nullptr) {
    if (a.size() != b.size()) throw Error("cosine_similarity: length mismatch");
    const double na = a.norm(), nb = b.norm();
    if (degenerate) *degenerate = false;
    if (na < 1e-15 || nb < 1e-15) {
        if (degenerate) *degenerate = true;
        return 0.0;
    }
    return a.dot(b) / (na * nb);
}

struct SimilarityRecord {
    Eigen::Index index = 0;
    std::string method;
    double cosine = 0.0;
    std::optional<int> y_hat;
    double y_true = 0.0;
    std::optional<bool> label_correct;
    std::optional<double> scale;
    std::optional<double> inversion_residual;
    std::vector<std::string> flags;
};

struct CdfCurve {
    std::string method;
    std::vector<double> values;     // nondecreasing, ties merged
    std::vector<double> fractions;  // cumulative, ends at 1
    std::size_t count = 0;          // N before tie-merge

    // Right-continuous empirical CDF: fraction of samples <= t.
    double at(double t) const {
        auto it = std::upper_bound(values.begin(), values.end(), t);
        if (it == values.begin()) return 0.0;
        return fractions[static_cast<std::size_t>(it - values.begin()) - 1];
    }
};

inline CdfCurve build_cdf(std::vector<double> values, const std::string& method = "") {
    if (values.empty()) throw Error("build_cdf: empty input");
    std::sort(values.begin(), values.end());
    CdfCurve curve;
    curve.method = method;
    curve.count = values.size();
    const double n = static_cast<double>(values.size());
    for (std::size_t i = 0; i < values.size(); ++i) {
        // ties share the higher fraction
        if (i + 1 < values.size() && values[i + 1] == values[i]) continue;
        curve.values.push_back(values[i]);
        curve.fractions.push_back(static_cast<double>(i + 1) / n);
    }
    return curve;
}

// True when curve A is at-or-below curve B at threshold tau, i.e. A leaves
// fewer reconstructions below that similarity (the more effective attack).
inline bool dominance_check(const CdfCurve& a, const CdfCurve& b, double tau) {
    if (a.count != b.count) throw Error("dominance_check: curves have different sample counts");
    return a.at(tau) <= b.at(tau);
}

// ---------------------------------------------------------------------------
// Record file: one JSON object per line, key order fixed.

namespace detail {

inline nlohmann::ordered_json record_to_json(const SimilarityRecord& r) {
    nlohmann::ordered_json j;
    j["index"] = static_cast<std::int64_t>(r.index);
    j["method"] = r.method;
    j["cosine"] = r.cosine;
    if (r.y_hat) j["y_hat"] = *r.y_hat; else j["y_hat"] = nullptr;
    j["y_true"] = r.y_true;
    if (r.label_correct) j["label_correct"] = *r.label_correct; else j["label_correct"] = nullptr;
    if (r.scale) j["scale"] = *r.scale; else j["scale"] = nullptr;
    if (r.inversion_residual) j["inversion_residual"] = *r.inversion_residual;
    else j["inversion_residual"] = nullptr;
    j["flags"] = r.flags;
    return j;
}

inline SimilarityRecord record_from_json(const nlohmann::json& j) {
    SimilarityRecord r;
    r.index = j.at("index").get<std::int64_t>();
    r.method = j.at("method").get<std::string>();
    r.cosine = j.at("cosine").get<double>();
    if (!j.at("y_hat").is_null()) r.y_hat = j.at("y_hat").get<int>();
    r.y_true = j.at("y_true").get<double>();
    if (!j.at("label_correct").is_null()) r.label_correct = j.at("label_correct").get<bool>();
    if (!j.at("scale").is_null()) r.scale = j.at("scale").get<double>();
    if (!j.at("inversion_residual").is_null())
        r.inversion_residual = j.at("inversion_residual").get<double>();
    for (const auto& f : j.at("flags")) r.flags.push_back(f.get<std::string>());
    return r;
}

}  // namespace detail

inline void write_records(const std::vector<SimilarityRecord>& records, const std::string& path,
                          const std::string& config_digest) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot write record file '" + path + "'");
    nlohmann::ordered_json meta;
    meta["meta"] = true;
    meta["config_digest"] = config_digest;
    os << meta.dump() << "\n";
    for (const auto& r : records) os << detail::record_to_json(r).dump() << "\n";
}

struct RecordFile {
    std::string config_digest;
    std::vector<SimilarityRecord> records;
};

inline RecordFile read_records(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw Error("cannot open record file '" + path + "'");
    RecordFile out;
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        if (j.contains("meta")) {
            out.config_digest = j.value("config_digest", "");
            continue;
        }
        out.records.push_back(detail::record_from_json(j));
    }
    return out;
}

// ---------------------------------------------------------------------------
// CDF CSV: `similarity,fraction`, 17 significant digits.

inline void write_cdf_csv(const CdfCurve& curve, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot write CDF file '" + path + "'");
    os << "similarity,fraction\n";
    for (std::size_t i = 0; i < curve.values.size(); ++i)
        os << format_double(curve.values[i]) << "," << format_double(curve.fractions[i]) << "\n";
}

inline CdfCurve read_cdf_csv(const std::string& path, const std::string& method = "") {
    std::ifstream is(path);
    if (!is) throw Error("cannot open CDF file '" + path + "'");
    std::string line;
    if (!std::getline(is, line) || line != "similarity,fraction")
        throw Error("bad CDF header in '" + path + "'");
    CdfCurve curve;
    curve.method = method;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        const auto comma = line.find(',');
        if (comma == std::string::npos) throw Error("bad CDF row in '" + path + "'");
        curve.values.push_back(std::stod(line.substr(0, comma)));
        curve.fractions.push_back(std::stod(line.substr(comma + 1)));
    }
    curve.count = curve.values.size();
    return curve;
}

// ---------------------------------------------------------------------------
// Static SVG with one CDF polyline per method, axes [-1,1] x [0,1].

namespace detail {

inline std::string svg_coord(double v) {
    char buf[32];
    auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::fixed, 2);
    return std::string(buf, res.ptr);
}

}  // namespace detail

inline void write_cdf_svg(const std::vector<CdfCurve>& curves, const std::string& path,
                          const std::string& config_digest) {
    if (curves.empty()) throw Error("write_cdf_svg: no curves");
    static const char* palette[] = {"#1f77b4", "#d62728", "#2ca02c", "#9467bd",
                                    "#ff7f0e", "#8c564b", "#17becf"};
    const double width = 640, height = 480;
    const double ml = 60, mr = 20, mt = 20, mb = 45;
    const double pw = width - ml - mr, ph = height - mt - mb;
    auto px = [&](double sim) { return ml + (sim + 1.0) / 2.0 * pw; };
    auto py = [&](double frac) { return mt + (1.0 - frac) * ph; };

    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot write SVG file '" + path + "'");
    os << "<?xml version=\"1.0\" encoding=\"UTF-8\"?>\n";
    os << "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"" << width << "\" height=\""
       << height << "\" viewBox=\"0 0 " << width << " " << height << "\">\n";
    os << "  <metadata>config_digest=" << config_digest << "</metadata>\n";
    os << "  <rect x=\"" << detail::svg_coord(ml) << "\" y=\"" << detail::svg_coord(mt)
       << "\" width=\"" << detail::svg_coord(pw) << "\" height=\"" << detail::svg_coord(ph)
       << "\" fill=\"none\" stroke=\"#000\"/>\n";
    // x ticks at -1..1, y ticks at 0..1
    for (int i = 0; i <= 4; ++i) {
        const double sim = -1.0 + 0.5 * i;
        os << "  <line x1=\"" << detail::svg_coord(px(sim)) << "\" y1=\""
           << detail::svg_coord(mt + ph) << "\" x2=\"" << detail::svg_coord(px(sim))
           << "\" y2=\"" << detail::svg_coord(mt + ph + 5) << "\" stroke=\"#000\"/>\n";
        os << "  <text x=\"" << detail::svg_coord(px(sim)) << "\" y=\""
           << detail::svg_coord(mt + ph + 18) << "\" font-size=\"11\" text-anchor=\"middle\">"
           << detail::svg_coord(sim) << "</text>\n";
    }
    for (int i = 0; i <= 4; ++i) {
        const double frac = 0.25 * i;
        os << "  <line x1=\"" << detail::svg_coord(ml - 5) << "\" y1=\""
           << detail::svg_coord(py(frac)) << "\" x2=\"" << detail::svg_coord(ml) << "\" y2=\""
           << detail::svg_coord(py(frac)) << "\" stroke=\"#000\"/>\n";
        os << "  <text x=\"" << detail::svg_coord(ml - 8) << "\" y=\""
           << detail::svg_coord(py(frac) + 4) << "\" font-size=\"11\" text-anchor=\"end\">"
           << detail::svg_coord(frac) << "</text>\n";
    }
    os << "  <text x=\"" << detail::svg_coord(ml + pw / 2) << "\" y=\""
       << detail::svg_coord(height - 8)
       << "\" font-size=\"12\" text-anchor=\"middle\">cosine similarity</text>\n";

    for (std::size_t c = 0; c < curves.size(); ++c) {
        const auto& curve = curves[c];
        const char* color = palette[c % (sizeof(palette) / sizeof(palette[0]))];
        os << "  <polyline fill=\"none\" stroke=\"" << color << "\" stroke-width=\"1.5\" points=\"";
        // step function: start at fraction 0 on the left edge of the first value
        double prev_frac = 0.0;
        for (std::size_t i = 0; i < curve.values.size(); ++i) {
            const double x = px(std::clamp(curve.values[i], -1.0, 1.0));
            os << detail::svg_coord(x) << "," << detail::svg_coord(py(prev_frac)) << " ";
            os << detail::svg_coord(x) << "," << detail::svg_coord(py(curve.fractions[i])) << " ";
            prev_frac = curve.fractions[i];
        }
        os << detail::svg_coord(px(1.0)) << "," << detail::svg_coord(py(prev_frac));
        os << "\"/>\n";
        const double ly = mt + 16 + 16 * static_cast<double>(c);
        os << "  <line x1=\"" << detail::svg_coord(ml + 10) << "\" y1=\"" << detail::svg_coord(ly)
           << "\" x2=\"" << detail::svg_coord(ml + 34) << "\" y2=\"" << detail::svg_coord(ly)
           << "\" stroke=\"" << color << "\" stroke-width=\"1.5\"/>\n";
        os << "  <text x=\"" << detail::svg_coord(ml + 40) << "\" y=\""
           << detail::svg_coord(ly + 4) << "\" font-size=\"12\">" << curve.method << "</text>\n";
    }
    os << "</svg>\n";
}

// ---------------------------------------------------------------------------
// Full report: record file + per-method CDF CSVs + SVG. Validates inputs
// before touching the filesystem so failures leave no partial output.

struct ReportPaths {
    std::string records;
    std::vector<std::string> cdf_csvs;
    std::string svg;
};

inline ReportPaths emit_report(const std::vector<SimilarityRecord>& records,
                               const std::string& out_dir, const std::string& config_digest) {
    std::map<std::string, std::vector<double>> by_method;
    std::set<std::pair<std::string, Eigen::Index>> seen;
    for (const auto& r : records) {
        by_method[r.method].push_back(r.cosine);
        if (!seen.insert({r.method, r.index}).second)
            throw Error("duplicate record for method '" + r.method + "' at deletion " +
                        std::to_string(r.index));
    }
    if (by_method.empty()) throw Error("emit_report: no methods to report");

    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw Error("cannot create output directory '" + out_dir + "'");

    std::vector<CdfCurve> curves;
    for (const auto& [method, values] : by_method) curves.push_back(build_cdf(values, method));

    ReportPaths paths;
    paths.records = out_dir + "/records.jsonl";
    write_records(records, paths.records, config_digest);
    for (const auto& curve : curves) {
        const std::string p = out_dir + "/cdf_" + curve.method + ".csv";
        write_cdf_csv(curve, p);
        paths.cdf_csvs.push_back(p);
    }
    paths.svg = out_dir + "/cdf.svg";
    write_cdf_svg(curves, paths.svg, config_digest);
    return paths;
}

// ---------------------------------------------------------------------------
// Image strips (binary PGM P5 / PPM P6).

inline void write_pnm(const std::string& path, const std::vector<unsigned char>& pixels,
                      int height, int width, int channels) {
    if (channels != 1 && channels != 3) throw Error("write_pnm: channels must be 1 or 3");
    if (static_cast<int>(pixels.size()) != height * width * channels)
        throw Error("write_pnm: pixel buffer size mismatch");
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot write image file '" + path + "'");
    os << (channels == 1 ? "P5" : "P6") << "\n" << width << " " << height << "\n255\n";
    os.write(reinterpret_cast<const char*>(pixels.data()),
             static_cast<std::streamsize>(pixels.size()));
}

}  // namespace unrec
