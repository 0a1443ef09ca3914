#pragma once

#include "unrec/common.hpp"

#include <fstream>
#include <string>
#include <vector>

namespace unrec {

// Fixed, publicly known feature map. Convention: the LAST output coordinate
// is the bias and equals 1 for every input; output_dim counts it.
//
//   identity: phi(x) = (x, 1),               output_dim = d + 1
//   rff:      phi(x)_i = sqrt(2/D) cos(W_i x + b_i) for i < D, phi_D = 1,
//             D = output_dim - 1, W ~ N(0, gamma^2) entrywise, b ~ U[0, 2pi)
struct Embedding {
    enum class Kind { identity, rff };

    Kind kind = Kind::identity;
    Eigen::Index input_dim = 0;
    Eigen::Index output_dim = 0;
    Matrix frequencies;  // (output_dim-1) x input_dim, rff only
    Vector phases;       // output_dim-1, rff only
    double bandwidth = 1.0;
    std::uint64_t seed = 0;

    Eigen::Index feature_count() const { return output_dim - 1; }  // non-bias outputs
    double rff_amplitude() const { return std::sqrt(2.0 / static_cast<double>(feature_count())); }
};

inline Embedding make_identity(Eigen::Index d) {
    if (d < 1) throw Error("identity embedding needs d >= 1");
    Embedding e;
    e.kind = Embedding::Kind::identity;
    e.input_dim = d;
    e.output_dim = d + 1;
    return e;
}

inline Embedding make_rff(Eigen::Index d, Eigen::Index output_dim, double gamma,
                          std::uint64_t seed) {
    if (output_dim < 2) throw Error("rff embedding needs output_dim >= 2");
    if (!(gamma > 0.0)) throw Error("rff bandwidth must be positive");
    Embedding e;
    e.kind = Embedding::Kind::rff;
    e.input_dim = d;
    e.output_dim = output_dim;
    e.bandwidth = gamma;
    e.seed = seed;
    const Eigen::Index D = output_dim - 1;
    Rng rng(seed);
    e.frequencies.resize(D, d);
    for (Eigen::Index i = 0; i < D; ++i)
        for (Eigen::Index j = 0; j < d; ++j) e.frequencies(i, j) = gamma * rng.normal();
    e.phases.resize(D);
    for (Eigen::Index i = 0; i < D; ++i) e.phases[i] = rng.uniform(0.0, 2.0 * M_PI);
    return e;
}

// Median heuristic over at most `cap` public rows: gamma = 1 / median
// pairwise distance. Falls back to 1 when the median distance is zero.
inline double median_heuristic_gamma(const Matrix& X_pub, Eigen::Index cap = 1000) {
    const Eigen::Index m = std::min(cap, X_pub.rows());
    if (m < 2) throw Error("median heuristic needs at least 2 public samples");
    std::vector<double> dists;
    dists.reserve(static_cast<std::size_t>(m) * (m - 1) / 2);
    for (Eigen::Index i = 0; i < m; ++i)
        for (Eigen::Index j = i + 1; j < m; ++j)
            dists.push_back((X_pub.row(i) - X_pub.row(j)).norm());
    std::nth_element(dists.begin(), dists.begin() + dists.size() / 2, dists.end());
    const double med = dists[dists.size() / 2];
    return med > 0.0 ? 1.0 / med : 1.0;
}

inline Vector embed(const Embedding& e, const Vector& x) {
    if (x.size() != e.input_dim)
        throw Error("embed: input length " + std::to_string(x.size()) + " != " +
                    std::to_string(e.input_dim));
    Vector z(e.output_dim);
    if (e.kind == Embedding::Kind::identity) {
        z.head(e.input_dim) = x;
    } else {
        const Vector angle = e.frequencies * x + e.phases;
        z.head(e.feature_count()) = e.rff_amplitude() * angle.array().cos();
    }
    z[e.output_dim - 1] = 1.0;
    return z;
}

// Row-wise batch embedding: X (n x d) -> Z (n x output_dim).
inline Matrix embed_rows(const Embedding& e, const Matrix& X) {
    if (X.cols() != e.input_dim) throw Error("embed_rows: dimension mismatch");
    Matrix Z(X.rows(), e.output_dim);
    if (e.kind == Embedding::Kind::identity) {
        Z.leftCols(e.input_dim) = X;
    } else {
        Matrix angle = X * e.frequencies.transpose();
        angle.rowwise() += e.phases.transpose();
        Z.leftCols(e.feature_count()) = e.rff_amplitude() * angle.array().cos();
    }
    Z.col(e.output_dim - 1).setOnes();
    return Z;
}

// Jacobian of phi at x, output_dim x input_dim. The bias row is zero.
inline Matrix embed_gradient(const Embedding& e, const Vector& x) {
    if (x.size() != e.input_dim) throw Error("embed_gradient: dimension mismatch");
    Matrix J = Matrix::Zero(e.output_dim, e.input_dim);
    if (e.kind == Embedding::Kind::identity) {
        J.topRows(e.input_dim).setIdentity();
    } else {
        const Vector angle = e.frequencies * x + e.phases;
        const Vector s = (-e.rff_amplitude()) * angle.array().sin();
        J.topRows(e.feature_count()) = s.asDiagonal() * e.frequencies;
    }
    return J;
}

// J(x)^T r without materializing the Jacobian; r has output_dim entries
// (the bias entry is ignored, its row is zero).
inline Vector embed_gradient_vjp(const Embedding& e, const Vector& x, const Vector& r) {
    if (x.size() != e.input_dim || r.size() != e.output_dim)
        throw Error("embed_gradient_vjp: dimension mismatch");
    if (e.kind == Embedding::Kind::identity) return r.head(e.input_dim);
    const Vector angle = e.frequencies * x + e.phases;
    const Vector s =
        (-e.rff_amplitude()) * angle.array().sin() * r.head(e.feature_count()).array();
    return e.frequencies.transpose() * s;
}

// ---------------------------------------------------------------------------
// Serialization: the threat model publishes phi alongside the parameters.
//
// Layout: magic "UAEM" | u16 version | u8 kind | u64 input_dim
//         | u64 output_dim | f64 bandwidth | u64 seed
//         | [rff: (output_dim-1) x input_dim W doubles row-major,
//                 output_dim-1 phase doubles]

inline void save_embedding(const Embedding& e, std::ostream& os) {
    os.write("UAEM", 4);
    io::write_le<std::uint16_t>(os, 1);
    io::write_le<std::uint8_t>(os, e.kind == Embedding::Kind::rff ? 1 : 0);
    io::write_le<std::uint64_t>(os, static_cast<std::uint64_t>(e.input_dim));
    io::write_le<std::uint64_t>(os, static_cast<std::uint64_t>(e.output_dim));
    io::write_le<double>(os, e.bandwidth);
    io::write_le<std::uint64_t>(os, e.seed);
    if (e.kind == Embedding::Kind::rff) {
        io::write_matrix(os, e.frequencies);
        for (Eigen::Index i = 0; i < e.phases.size(); ++i) io::write_le<double>(os, e.phases[i]);
    }
}

inline void save_embedding(const Embedding& e, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot write embedding file '" + path + "'");
    save_embedding(e, os);
}

inline Embedding load_embedding(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "UAEM") throw Error("bad embedding magic");
    if (io::read_le<std::uint16_t>(is) != 1) throw Error("unsupported embedding version");
    Embedding e;
    e.kind = io::read_le<std::uint8_t>(is) == 1 ? Embedding::Kind::rff : Embedding::Kind::identity;
    e.input_dim = static_cast<Eigen::Index>(io::read_le<std::uint64_t>(is));
    e.output_dim = static_cast<Eigen::Index>(io::read_le<std::uint64_t>(is));
    e.bandwidth = io::read_le<double>(is);
    e.seed = io::read_le<std::uint64_t>(is);
    if (e.kind == Embedding::Kind::rff) {
        e.frequencies = io::read_matrix(is, e.output_dim - 1, e.input_dim);
        e.phases.resize(e.output_dim - 1);
        for (Eigen::Index i = 0; i < e.phases.size(); ++i) e.phases[i] = io::read_le<double>(is);
    }
    return e;
}

inline Embedding load_embedding(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open embedding file '" + path + "'");
    return load_embedding(is);
}

// Content digest; equality certifies phi did not change across an experiment.
inline std::uint64_t embedding_digest(const Embedding& e) {
    std::ostringstream os(std::ios::binary);
    save_embedding(e, os);
    Fnv1a h;
    h.update(os.str());
    return h.value();
}

}  // namespace unrec
