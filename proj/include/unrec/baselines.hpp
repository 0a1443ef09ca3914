#pragma once

#include "unrec/common.hpp"
#include "unrec/embedding.hpp"

namespace unrec {

// Public-mean guess, in input space.
inline Vector avg_baseline(const Matrix& X_pub) {
    if (X_pub.rows() < 1) throw Error("avg_baseline: empty public set");
    return X_pub.colwise().mean().transpose();
}

struct MaxDiffResult {
    Vector x;
    Eigen::Index index = 0;
    double score = 0.0;
};

// Public sample maximizing the prediction discrepancy ||phi(x)^T (b+ - b-)||,
// Euclidean across classes for matrix-valued parameters. Ties break to the
// lowest row index.
inline MaxDiffResult maxdiff_baseline(const Matrix& X_pub, const Matrix& beta_plus,
                                      const Matrix& beta_minus, const Embedding& emb,
                                      const Matrix* Z_pub_pre = nullptr) {
    if (X_pub.rows() < 1) throw Error("maxdiff_baseline: empty public set");
    Matrix Z_local;
    if (Z_pub_pre == nullptr) {
        Z_local = embed_rows(emb, X_pub);
        Z_pub_pre = &Z_local;
    }
    const Vector scores = (*Z_pub_pre * (beta_plus - beta_minus)).rowwise().norm();
    MaxDiffResult out;
    out.index = 0;
    out.score = scores[0];
    for (Eigen::Index i = 1; i < scores.size(); ++i) {
        if (scores[i] > out.score) {
            out.score = scores[i];
            out.index = i;
        }
    }
    out.x = X_pub.row(out.index).transpose();
    return out;
}

}  // namespace unrec
