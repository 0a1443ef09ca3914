#pragma once

#include "unrec/common.hpp"
#include "unrec/loss.hpp"

#include <cstddef>

namespace unrec {

// Matrix-free representation of the covariance / Hessian estimates. Only
// matrix-vector products are ever needed (the attack applies the operator to
// beta+ - beta-), so the d' x d' (or d'k x d'k) matrix is never materialized
// and products stay O(m d' c).
class CurvatureOperator {
public:
    enum class Kind { ridge_covariance, logistic_weighted, svm_weighted, softmax_blockwise };

    Kind kind = Kind::ridge_covariance;
    Matrix Z;              // public embedded design, m x d'
    Vector diag_weights;   // logistic: sigma(1-sigma); svm: {0,1} margin indicator
    Matrix probs;          // softmax: per-sample class probabilities at beta+, m x k
    double scale = 1.0;    // 1 for the covariance (sum convention), 1/m for Hessians
    double lambda_shift = 0.0;  // nonzero only in the known-lambda oracle mode
    int out_cols = 1;

    Eigen::Index dim() const { return Z.cols(); }
    Eigen::Index samples() const { return Z.rows(); }

    Matrix apply(const Matrix& V) const {
        if (V.rows() != dim() || V.cols() != out_cols)
            throw Error("curvature apply: expected " + std::to_string(dim()) + "x" +
                        std::to_string(out_cols) + " block");
        Matrix out;
        switch (kind) {
            case Kind::ridge_covariance:
                out = Z.transpose() * (Z * V);
                break;
            case Kind::logistic_weighted:
            case Kind::svm_weighted:
                out = Z.transpose() * diag_weights.cwiseProduct(Z * V.col(0));
                break;
            case Kind::softmax_blockwise: {
                const Matrix A = Z * V;                        // m x k
                const Matrix PA = probs.cwiseProduct(A);
                const Vector rowdot = PA.rowwise().sum();      // f . a per sample
                out = Z.transpose() * (PA - probs.cwiseProduct(rowdot.replicate(1, out_cols)));
                break;
            }
        }
        out *= scale;
        if (lambda_shift != 0.0) out += lambda_shift * V;
        return out;
    }

    Vector apply(const Vector& v) const { return Matrix(apply(Matrix(v))).col(0); }
};

// Covariance estimate from public embeddings, sum convention (Z_pub^T Z_pub).
inline CurvatureOperator estimate_covariance(const Matrix& Z_pub) {
    if (Z_pub.rows() < 1) throw Error("estimate_covariance: empty public set");
    CurvatureOperator op;
    op.kind = CurvatureOperator::Kind::ridge_covariance;
    op.Z = Z_pub;
    op.scale = 1.0;
    return op;
}

// Oracle-mode covariance: the true regularized C = Z^T Z + lambda I, used by
// the harness to demonstrate exact recovery when lambda is known.
inline CurvatureOperator exact_covariance(const Matrix& Z_priv, double lambda) {
    CurvatureOperator op = estimate_covariance(Z_priv);
    op.lambda_shift = lambda;
    return op;
}

// Mean per-sample loss Hessian at beta+ over the public set. The attacker
// does not know lambda, so no regularization term enters here.
inline CurvatureOperator estimate_hessian(const Matrix& beta_plus, const LossSpec& spec,
                                          const Matrix& Z_pub, const Vector& y_pub) {
    if (Z_pub.rows() < 1) throw Error("estimate_hessian: empty public set");
    if (!beta_plus.allFinite()) throw Error("estimate_hessian: non-finite parameters");
    if (beta_plus.rows() != Z_pub.cols()) throw Error("estimate_hessian: dimension mismatch");
    const auto m = Z_pub.rows();

    CurvatureOperator op;
    op.Z = Z_pub;
    op.scale = 1.0 / static_cast<double>(m);
    op.out_cols = spec.output_cols();

    switch (spec.kind) {
        case LossKind::ridge:
            // per-sample Hessian of (s-y)^2 is 2 z z^T
            op.kind = CurvatureOperator::Kind::ridge_covariance;
            op.scale = 2.0 / static_cast<double>(m);
            break;
        case LossKind::logistic: {
            op.kind = CurvatureOperator::Kind::logistic_weighted;
            const Vector s = Z_pub * beta_plus.col(0);
            op.diag_weights.resize(m);
            for (Eigen::Index i = 0; i < m; ++i) {
                const double p = loss::sigmoid(s[i]);
                op.diag_weights[i] = p * (1.0 - p);
            }
            break;
        }
        case LossKind::svm_squared_hinge: {
            op.kind = CurvatureOperator::Kind::svm_weighted;
            const Vector s = Z_pub * beta_plus.col(0);
            op.diag_weights.resize(m);
            for (Eigen::Index i = 0; i < m; ++i) {
                const double yy = 2.0 * y_pub[i] - 1.0;
                op.diag_weights[i] = 1.0 - yy * s[i] >= 0.0 ? 1.0 : 0.0;
            }
            break;
        }
        case LossKind::softmax_ce: {
            op.kind = CurvatureOperator::Kind::softmax_blockwise;
            const Matrix S = Z_pub * beta_plus;  // m x k
            op.probs.resize(m, spec.classes);
            for (Eigen::Index i = 0; i < m; ++i)
                op.probs.row(i) = loss::softmax_probs(S.row(i).transpose()).transpose();
            break;
        }
    }
    return op;
}

}  // namespace unrec
