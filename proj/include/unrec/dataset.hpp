#pragma once

#include "unrec/common.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <limits>
#include <optional>
#include <sstream>
#include <string>
#include <utility>
#include <vector>

namespace unrec {

enum class Task { regression, binary, multiclass };

inline const char* task_name(Task t) {
    switch (t) {
        case Task::regression: return "regression";
        case Task::binary: return "binary";
        case Task::multiclass: return "multiclass";
    }
    return "?";
}

inline Task task_from_name(const std::string& s) {
    if (s == "regression") return Task::regression;
    if (s == "binary") return Task::binary;
    if (s == "multiclass") return Task::multiclass;
    throw Error("unknown task kind '" + s + "'");
}

// Per-feature min-max map applied by normalize_to_range, kept so reports can
// display reconstructions in the original units. lo == hi marks a constant
// column: forward maps to 0, inverse restores the constant. The forward form
// 2(raw-lo)/(hi-lo) - 1 lands on the endpoints exactly and never leaves
// [-1,1] in floating point.
struct NormalizationMap {
    Vector lo;  // length d
    Vector hi;  // length d

    double forward(double raw, Eigen::Index j) const {
        return hi[j] > lo[j] ? 2.0 * ((raw - lo[j]) / (hi[j] - lo[j])) - 1.0 : 0.0;
    }
    double inverse(double norm, Eigen::Index j) const {
        return hi[j] > lo[j] ? lo[j] + (norm + 1.0) / 2.0 * (hi[j] - lo[j]) : lo[j];
    }
    Vector inverse_row(const Vector& norm) const {
        Vector raw(norm.size());
        for (Eigen::Index j = 0; j < norm.size(); ++j) raw[j] = inverse(norm[j], j);
        return raw;
    }
};

struct ImageShape {
    int rows = 0, cols = 0, channels = 0;
    bool present() const { return rows > 0 && cols > 0 && channels > 0; }
};

struct Dataset {
    Matrix features;  // n x d
    Vector targets;   // regression values or class indices
    Task task = Task::regression;
    std::string name;
    int classes = 0;  // 0 for regression
    std::optional<NormalizationMap> norm_map;
    ImageShape image;

    Eigen::Index n() const { return features.rows(); }
    Eigen::Index d() const { return features.cols(); }

    Dataset without_row(Eigen::Index index) const {
        if (index < 0 || index >= n()) throw Error("row index out of range");
        Dataset out = *this;
        out.features.resize(n() - 1, d());
        out.targets.resize(n() - 1);
        Eigen::Index w = 0;
        for (Eigen::Index i = 0; i < n(); ++i) {
            if (i == index) continue;
            out.features.row(w) = features.row(i);
            out.targets[w] = targets[i];
            ++w;
        }
        return out;
    }

    void validate() const {
        if (n() < 2) throw Error("dataset needs at least 2 rows");
        if (d() < 1) throw Error("dataset needs at least 1 feature");
        if (targets.size() != n()) throw Error("target count does not match row count");
        if (!features.allFinite()) throw Error("non-finite feature values");
        if (task != Task::regression) {
            for (Eigen::Index i = 0; i < n(); ++i) {
                const double y = targets[i];
                if (y != std::floor(y) || y < 0 || y >= classes)
                    throw Error("classification target out of {0.." +
                                std::to_string(classes - 1) + "} at row " + std::to_string(i));
            }
        }
    }
};

struct SplitSpec {
    double public_fraction = 0.5;  // in (0,1)
    std::uint64_t seed = 0;
};

struct SyntheticSpec {
    Eigen::Index n = 0;
    Eigen::Index d = 0;
    Task task = Task::regression;
    double noise_std = 0.0;
    std::uint64_t seed = 0;
    int classes = 3;  // multiclass only
};

// ---------------------------------------------------------------------------
// CSV

namespace detail {

inline std::vector<std::string> split_csv_line(const std::string& line) {
    std::vector<std::string> out;
    std::string cur;
    for (char ch : line) {
        if (ch == ',') {
            out.push_back(cur);
            cur.clear();
        } else if (ch != '\r') {
            cur += ch;
        }
    }
    out.push_back(cur);
    return out;
}

inline double parse_cell(const std::string& cell, std::size_t line_no, const std::string& col) {
    const char* b = cell.data();
    const char* e = b + cell.size();
    while (b < e && (*b == ' ' || *b == '\t')) ++b;
    while (e > b && (*(e - 1) == ' ' || *(e - 1) == '\t')) --e;
    double v = 0.0;
    auto res = std::from_chars(b, e, v);
    if (res.ec != std::errc() || res.ptr != e)
        throw Error("non-numeric cell '" + cell + "' at line " + std::to_string(line_no) +
                    ", column '" + col + "'");
    return v;
}

}  // namespace detail

inline Dataset load_csv(const std::string& path, const std::string& target_column, Task task) {
    std::ifstream in(path);
    if (!in) throw Error("cannot open CSV file '" + path + "'");

    std::string line;
    if (!std::getline(in, line)) throw Error("CSV file '" + path + "' is empty");
    const auto header = detail::split_csv_line(line);

    Eigen::Index target_idx = -1;
    for (std::size_t j = 0; j < header.size(); ++j)
        if (header[j] == target_column) target_idx = static_cast<Eigen::Index>(j);
    if (target_idx < 0)
        throw Error("target column '" + target_column + "' not found in '" + path + "'");

    std::vector<std::vector<double>> rows;
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.empty()) continue;
        const auto cells = detail::split_csv_line(line);
        if (cells.size() != header.size())
            throw Error("line " + std::to_string(line_no) + " has " +
                        std::to_string(cells.size()) + " cells, header has " +
                        std::to_string(header.size()));
        std::vector<double> row(cells.size());
        for (std::size_t j = 0; j < cells.size(); ++j)
            row[j] = detail::parse_cell(cells[j], line_no, header[j]);
        rows.push_back(std::move(row));
    }

    Dataset ds;
    ds.name = path;
    ds.task = task;
    const auto n = static_cast<Eigen::Index>(rows.size());
    const auto d = static_cast<Eigen::Index>(header.size()) - 1;
    ds.features.resize(n, d);
    ds.targets.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) {
        Eigen::Index w = 0;
        for (Eigen::Index j = 0; j < static_cast<Eigen::Index>(header.size()); ++j) {
            if (j == target_idx)
                ds.targets[i] = rows[i][j];
            else
                ds.features(i, w++) = rows[i][j];
        }
    }
    if (ds.task != Task::regression) {
        ds.classes = ds.task == Task::binary ? 2 : static_cast<int>(ds.targets.maxCoeff()) + 1;
    }
    ds.validate();
    return ds;
}

inline void save_csv(const Dataset& ds, const std::string& path,
                     const std::string& target_column = "y") {
    std::ofstream out(path);
    if (!out) throw Error("cannot write CSV file '" + path + "'");
    for (Eigen::Index j = 0; j < ds.d(); ++j) out << "f" << j << ",";
    out << target_column << "\n";
    for (Eigen::Index i = 0; i < ds.n(); ++i) {
        for (Eigen::Index j = 0; j < ds.d(); ++j) out << format_double(ds.features(i, j)) << ",";
        out << format_double(ds.targets[i]) << "\n";
    }
}

// ---------------------------------------------------------------------------
// IDX (big-endian magic layout; images 0x00000803, labels 0x00000801)

namespace detail {

inline std::uint32_t read_be32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (!is) throw Error("IDX file truncated");
    return (std::uint32_t(b[0]) << 24) | (std::uint32_t(b[1]) << 16) |
           (std::uint32_t(b[2]) << 8) | std::uint32_t(b[3]);
}

}  // namespace detail

inline Dataset load_idx(const std::string& images_path, const std::string& labels_path) {
    std::ifstream fi(images_path, std::ios::binary);
    if (!fi) throw Error("cannot open IDX image file '" + images_path + "'");
    std::ifstream fl(labels_path, std::ios::binary);
    if (!fl) throw Error("cannot open IDX label file '" + labels_path + "'");

    const std::uint32_t magic_i = detail::read_be32(fi);
    if (magic_i != 0x00000803u)
        throw Error("bad image magic in '" + images_path + "' (expected 0x00000803)");
    const std::uint32_t n_img = detail::read_be32(fi);
    const std::uint32_t h = detail::read_be32(fi);
    const std::uint32_t w = detail::read_be32(fi);

    const std::uint32_t magic_l = detail::read_be32(fl);
    if (magic_l != 0x00000801u)
        throw Error("bad label magic in '" + labels_path + "' (expected 0x00000801)");
    const std::uint32_t n_lab = detail::read_be32(fl);
    if (n_img != n_lab)
        throw Error("image/label count mismatch: " + std::to_string(n_img) + " vs " +
                    std::to_string(n_lab));

    const Eigen::Index n = n_img;
    const Eigen::Index d = static_cast<Eigen::Index>(h) * w;
    Dataset ds;
    ds.name = images_path;
    ds.task = Task::multiclass;
    ds.image = ImageShape{static_cast<int>(h), static_cast<int>(w), 1};
    ds.features.resize(n, d);
    ds.targets.resize(n);

    std::vector<unsigned char> buf(static_cast<std::size_t>(d));
    for (Eigen::Index i = 0; i < n; ++i) {
        fi.read(reinterpret_cast<char*>(buf.data()), d);
        if (!fi) throw Error("IDX image data truncated at image " + std::to_string(i));
        for (Eigen::Index j = 0; j < d; ++j)
            ds.features(i, j) = 2.0 * (buf[static_cast<std::size_t>(j)] / 255.0) - 1.0;
        char lb;
        fl.read(&lb, 1);
        if (!fl) throw Error("IDX label data truncated at image " + std::to_string(i));
        ds.targets[i] = static_cast<unsigned char>(lb);
    }
    ds.classes = static_cast<int>(ds.targets.maxCoeff()) + 1;

    // Pixel bytes -> [-1,1] is the fixed map 2(v/255)-1; record it so montage
    // de-normalization is a byte-exact round trip.
    NormalizationMap map;
    map.lo = Vector::Constant(d, 0.0);
    map.hi = Vector::Constant(d, 255.0);
    ds.norm_map = map;
    ds.validate();
    return ds;
}

// ---------------------------------------------------------------------------
// Normalization and splitting

inline Dataset normalize_to_range(const Dataset& input) {
    if (!input.features.allFinite()) throw Error("normalize_to_range: non-finite input");
    Dataset out = input;
    const Eigen::Index d = input.d();
    NormalizationMap map;
    map.lo.resize(d);
    map.hi.resize(d);
    for (Eigen::Index j = 0; j < d; ++j) {
        map.lo[j] = input.features.col(j).minCoeff();
        map.hi[j] = input.features.col(j).maxCoeff();
        for (Eigen::Index i = 0; i < input.n(); ++i)
            out.features(i, j) = map.forward(input.features(i, j), j);
    }
    out.norm_map = map;
    return out;
}

inline std::pair<Dataset, Dataset> split_private_public(const Dataset& ds, const SplitSpec& spec) {
    if (!(spec.public_fraction > 0.0 && spec.public_fraction < 1.0))
        throw Error("public_fraction must lie in (0,1)");
    const Eigen::Index n = ds.n();
    const auto n_pub = static_cast<Eigen::Index>(std::floor(n * spec.public_fraction));
    const Eigen::Index n_priv = n - n_pub;
    if (n_pub < 1) throw Error("split yields an empty public part");
    if (n_priv < 2) throw Error("split leaves fewer than 2 private rows");

    Rng rng(spec.seed);
    const auto perm = rng.permutation(static_cast<std::size_t>(n));
    std::vector<Eigen::Index> pub_idx(perm.begin(), perm.begin() + n_pub);
    std::vector<Eigen::Index> priv_idx(perm.begin() + n_pub, perm.end());
    std::sort(pub_idx.begin(), pub_idx.end());
    std::sort(priv_idx.begin(), priv_idx.end());

    auto take = [&ds](const std::vector<Eigen::Index>& idx, const char* suffix) {
        Dataset part = ds;
        part.name = ds.name + suffix;
        part.features.resize(static_cast<Eigen::Index>(idx.size()), ds.d());
        part.targets.resize(static_cast<Eigen::Index>(idx.size()));
        for (std::size_t i = 0; i < idx.size(); ++i) {
            part.features.row(static_cast<Eigen::Index>(i)) = ds.features.row(idx[i]);
            part.targets[static_cast<Eigen::Index>(i)] = ds.targets[idx[i]];
        }
        return part;
    };
    return {take(priv_idx, "/private"), take(pub_idx, "/public")};
}

// ---------------------------------------------------------------------------
// Synthetic data

struct SyntheticData {
    Dataset dataset;
    Matrix w_star;  // d x 1 (regression/binary) or d x k (multiclass)
};

inline SyntheticData synthesize_with_truth(const SyntheticSpec& spec) {
    if (spec.n < 2) throw Error("synthesize: n must be at least 2");
    if (spec.d < 1) throw Error("synthesize: d must be at least 1");

    Rng rng(spec.seed);
    Dataset ds;
    ds.task = spec.task;
    ds.name = "synthetic";
    ds.features.resize(spec.n, spec.d);
    for (Eigen::Index i = 0; i < spec.n; ++i)
        for (Eigen::Index j = 0; j < spec.d; ++j) ds.features(i, j) = rng.normal();
    ds.targets = Vector::Zero(spec.n);
    ds = normalize_to_range(ds);

    const int k = spec.task == Task::multiclass ? spec.classes : 1;
    if (spec.task == Task::multiclass && k < 2) throw Error("synthesize: multiclass needs k >= 2");
    Matrix w(spec.d, k);
    for (Eigen::Index j = 0; j < spec.d; ++j)
        for (int c = 0; c < k; ++c) w(j, c) = rng.normal();

    Matrix score = ds.features * w;
    for (Eigen::Index i = 0; i < spec.n; ++i)
        for (int c = 0; c < k; ++c) score(i, c) += spec.noise_std * rng.normal();

    switch (spec.task) {
        case Task::regression:
            ds.targets = score.col(0);
            break;
        case Task::binary:
            for (Eigen::Index i = 0; i < spec.n; ++i) ds.targets[i] = score(i, 0) >= 0.0 ? 1 : 0;
            ds.classes = 2;
            break;
        case Task::multiclass:
            for (Eigen::Index i = 0; i < spec.n; ++i) {
                Eigen::Index best;
                score.row(i).maxCoeff(&best);
                ds.targets[i] = static_cast<double>(best);
            }
            ds.classes = k;
            break;
    }
    ds.validate();
    return {std::move(ds), std::move(w)};
}

inline Dataset synthesize(const SyntheticSpec& spec) { return synthesize_with_truth(spec).dataset; }

// ---------------------------------------------------------------------------
// Dataset cache: flat little-endian binary, bit-exact round trip.
//
// Layout: magic "UADC" | u16 version | u8 task | u8 flags (bit0: norm map)
//         | u64 n | u64 d | u32 classes | u16 img_rows | u16 img_cols
//         | u16 img_channels | u32 name_len | name bytes
//         | n*d feature doubles (row-major) | n target doubles
//         | [d lo doubles | d hi doubles]

inline void save_cache(const Dataset& ds, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot write dataset cache '" + path + "'");
    os.write("UADC", 4);
    io::write_le<std::uint16_t>(os, 1);
    io::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(ds.task));
    io::write_le<std::uint8_t>(os, ds.norm_map ? 1 : 0);
    io::write_le<std::uint64_t>(os, static_cast<std::uint64_t>(ds.n()));
    io::write_le<std::uint64_t>(os, static_cast<std::uint64_t>(ds.d()));
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ds.classes));
    io::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(ds.image.rows));
    io::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(ds.image.cols));
    io::write_le<std::uint16_t>(os, static_cast<std::uint16_t>(ds.image.channels));
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(ds.name.size()));
    os.write(ds.name.data(), static_cast<std::streamsize>(ds.name.size()));
    io::write_matrix(os, ds.features);
    for (Eigen::Index i = 0; i < ds.n(); ++i) io::write_le<double>(os, ds.targets[i]);
    if (ds.norm_map) {
        for (Eigen::Index j = 0; j < ds.d(); ++j) io::write_le<double>(os, ds.norm_map->lo[j]);
        for (Eigen::Index j = 0; j < ds.d(); ++j) io::write_le<double>(os, ds.norm_map->hi[j]);
    }
}

inline Dataset load_cache(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open dataset cache '" + path + "'");
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "UADC") throw Error("bad dataset cache magic");
    const auto version = io::read_le<std::uint16_t>(is);
    if (version != 1) throw Error("unsupported dataset cache version");
    Dataset ds;
    ds.task = static_cast<Task>(io::read_le<std::uint8_t>(is));
    const auto flags = io::read_le<std::uint8_t>(is);
    const auto n = static_cast<Eigen::Index>(io::read_le<std::uint64_t>(is));
    const auto d = static_cast<Eigen::Index>(io::read_le<std::uint64_t>(is));
    ds.classes = static_cast<int>(io::read_le<std::uint32_t>(is));
    ds.image.rows = io::read_le<std::uint16_t>(is);
    ds.image.cols = io::read_le<std::uint16_t>(is);
    ds.image.channels = io::read_le<std::uint16_t>(is);
    const auto name_len = io::read_le<std::uint32_t>(is);
    ds.name.resize(name_len);
    is.read(ds.name.data(), name_len);
    ds.features = io::read_matrix(is, n, d);
    ds.targets.resize(n);
    for (Eigen::Index i = 0; i < n; ++i) ds.targets[i] = io::read_le<double>(is);
    if (flags & 1) {
        NormalizationMap map;
        map.lo.resize(d);
        map.hi.resize(d);
        for (Eigen::Index j = 0; j < d; ++j) map.lo[j] = io::read_le<double>(is);
        for (Eigen::Index j = 0; j < d; ++j) map.hi[j] = io::read_le<double>(is);
        ds.norm_map = map;
    }
    return ds;
}

}  // namespace unrec
