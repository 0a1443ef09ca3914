#pragma once

#include <Eigen/Dense>

#include <charconv>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <istream>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

namespace unrec {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;

struct Error : std::runtime_error {
    explicit Error(const std::string& what) : std::runtime_error(what) {}
    Error(const std::string& stage, const std::string& what)
        : std::runtime_error(stage + ": " + what) {}
};

struct NoUpdateError : Error {
    NoUpdateError() : Error("model pair is identical, nothing to reconstruct") {}
};

struct LabelUndeterminedError : Error {
    LabelUndeterminedError() : Error("all bias-row entries are numerically zero") {}
};

// Counter-based generator (splitmix64). Output is a bijective hash of an
// incrementing counter, so streams are reproducible across platforms and
// independent of call-site history.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : state_(seed) {}

    // Derive an independent stream, e.g. one per work item.
    Rng fork(std::uint64_t stream) const {
        Rng r(state_ ^ (0x9e3779b97f4a7c15ULL * (stream + 1)));
        r.next_u64();
        return r;
    }

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9e3779b97f4a7c15ULL);
        z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
        z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
        return z ^ (z >> 31);
    }

    // Uniform on [0, 1) with 53-bit resolution.
    double uniform() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    double uniform(double lo, double hi) { return lo + (hi - lo) * uniform(); }

    // size_t in [0, n)
    std::size_t index(std::size_t n) {
        return static_cast<std::size_t>(uniform() * static_cast<double>(n)) % n;
    }

    // Standard normal via Box-Muller; caches the second deviate.
    double normal() {
        if (has_spare_) {
            has_spare_ = false;
            return spare_;
        }
        double u1 = uniform();
        while (u1 <= 0.0) u1 = uniform();
        const double u2 = uniform();
        const double r = std::sqrt(-2.0 * std::log(u1));
        const double theta = 2.0 * M_PI * u2;
        spare_ = r * std::sin(theta);
        has_spare_ = true;
        return r * std::cos(theta);
    }

    // Fisher-Yates permutation of 0..n-1.
    std::vector<std::size_t> permutation(std::size_t n) {
        std::vector<std::size_t> p(n);
        for (std::size_t i = 0; i < n; ++i) p[i] = i;
        for (std::size_t i = n; i > 1; --i) {
            std::size_t j = index(i);
            std::swap(p[i - 1], p[j]);
        }
        return p;
    }

private:
    std::uint64_t state_;
    double spare_ = 0.0;
    bool has_spare_ = false;
};

// FNV-1a, used for content digests of published artifacts (not security).
class Fnv1a {
public:
    void update(const void* data, std::size_t len) {
        const auto* p = static_cast<const unsigned char*>(data);
        for (std::size_t i = 0; i < len; ++i) {
            hash_ ^= p[i];
            hash_ *= 0x100000001b3ULL;
        }
    }
    void update(const std::string& s) { update(s.data(), s.size()); }
    template <typename T>
    void update_pod(const T& v) {
        static_assert(std::is_trivially_copyable_v<T>);
        update(&v, sizeof(v));
    }
    std::uint64_t value() const { return hash_; }

    std::string hex() const {
        char buf[17];
        std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(hash_));
        return std::string(buf);
    }

private:
    std::uint64_t hash_ = 0xcbf29ce484222325ULL;
};

// Locale-independent float formatting (17 significant digits round-trips
// doubles exactly).
inline std::string format_double(double v, int precision = 17) {
    char buf[64];
    auto res = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::general, precision);
    return std::string(buf, res.ptr);
}

namespace io {

// Little-endian scalar I/O for the documented binary layouts. x86-64 is
// little-endian so plain memcpy round-trips; byte order is still pinned
// explicitly here.
template <typename T>
void write_le(std::ostream& os, T v) {
    static_assert(std::is_trivially_copyable_v<T>);
    unsigned char buf[sizeof(T)];
    std::memcpy(buf, &v, sizeof(T));
    os.write(reinterpret_cast<const char*>(buf), sizeof(T));
}

template <typename T>
T read_le(std::istream& is) {
    unsigned char buf[sizeof(T)];
    is.read(reinterpret_cast<char*>(buf), sizeof(T));
    if (!is) throw Error("binary read past end of stream");
    T v;
    std::memcpy(&v, buf, sizeof(T));
    return v;
}

inline void write_matrix(std::ostream& os, const Matrix& m) {
    for (Eigen::Index r = 0; r < m.rows(); ++r)
        for (Eigen::Index c = 0; c < m.cols(); ++c) write_le<double>(os, m(r, c));
}

inline Matrix read_matrix(std::istream& is, Eigen::Index rows, Eigen::Index cols) {
    Matrix m(rows, cols);
    for (Eigen::Index r = 0; r < rows; ++r)
        for (Eigen::Index c = 0; c < cols; ++c) m(r, c) = read_le<double>(is);
    return m;
}

}  // namespace io

}  // namespace unrec
