#pragma once

#include "unrec/common.hpp"
#include "unrec/curvature.hpp"
#include "unrec/embedding.hpp"
#include "unrec/loss.hpp"

#include <algorithm>
#include <limits>
#include <optional>
#include <string>
#include <vector>

namespace unrec {

// Relative threshold below which intercept normalization is considered
// unstable; reconstructions past it are returned flagged, not rejected.
inline constexpr double kDegenerateBiasTol = 1e-12;
inline constexpr double kNoUpdateTol = 1e-12;

struct Reconstruction {
    Matrix z_raw;        // recovered direction in parameter-gradient space, d' x c
    double scale = 0.0;  // bias coordinate divided out (absorbs alpha(x,y) and n)
    Vector x_tilde;      // input-space reconstruction, length d
    std::optional<int> y_hat;
    Vector z_normalized;  // embedding-space direction, bias coordinate exactly 1

    // diagnostics
    double inversion_residual = 0.0;
    double bias_magnitude = 0.0;  // |scale| / ||z_raw||
    double class_spread = 0.0;    // softmax cross-class candidate disagreement
    std::vector<std::string> flags;

    bool flagged(const std::string& f) const {
        return std::find(flags.begin(), flags.end(), f) != flags.end();
    }
};

namespace detail {

// Divide out the bias coordinate; the bias entry of the result is set to 1
// exactly rather than trusting x/x rounding.
inline Vector intercept_normalize(const Vector& z, double bias, Eigen::Index bias_idx) {
    Vector out = z / bias;
    out[bias_idx] = 1.0;
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Linear attack: z = C_hat (beta+ - beta-), then intercept normalization.

inline Reconstruction hrec_linear(const Vector& beta_plus, const Vector& beta_minus,
                                  const CurvatureOperator& cov) {
    if (beta_plus.size() != beta_minus.size()) throw Error("hrec_linear: dimension mismatch");
    const Vector delta = beta_plus - beta_minus;
    if (delta.cwiseAbs().maxCoeff() <= kNoUpdateTol) throw NoUpdateError();

    const Vector z = cov.apply(delta);
    const Eigen::Index bias_idx = z.size() - 1;
    const double bias = z[bias_idx];

    Reconstruction rec;
    rec.z_raw = z;
    rec.scale = bias;
    rec.bias_magnitude = std::abs(bias) / std::max(z.norm(), 1e-300);
    if (std::abs(bias) < kDegenerateBiasTol * z.norm() || bias == 0.0)
        rec.flags.push_back("degenerate_bias");
    const double safe_bias = bias != 0.0 ? bias : 1.0;
    rec.z_normalized = detail::intercept_normalize(z, safe_bias, bias_idx);
    rec.x_tilde = rec.z_normalized.head(bias_idx);
    return rec;
}

// ---------------------------------------------------------------------------
// Newton generalization: z = H_hat (beta+ - beta-) ~ -grad l(beta+; x, y) up
// to the positive factor n, which intercept normalization cancels downstream.

inline Matrix hrec_general(const Matrix& beta_plus, const Matrix& beta_minus,
                           const CurvatureOperator& hess) {
    if (beta_plus.rows() != beta_minus.rows() || beta_plus.cols() != beta_minus.cols())
        throw Error("hrec_general: dimension mismatch");
    const Matrix delta = beta_plus - beta_minus;
    if (delta.cwiseAbs().maxCoeff() <= kNoUpdateTol) throw NoUpdateError();
    return hess.apply(delta);
}

// ---------------------------------------------------------------------------
// Label inference for softmax models. z ~ -grad l has bias-row entries
// 1[j=y] - f_j, positive exactly at the deleted label.

inline int infer_label(const Matrix& z) {
    if (z.cols() < 2) throw Error("infer_label: needs a multiclass direction");
    const auto bias_row = z.row(z.rows() - 1);
    if (bias_row.cwiseAbs().maxCoeff() < 1e-12) throw LabelUndeterminedError();
    Eigen::Index best;
    bias_row.maxCoeff(&best);
    return static_cast<int>(best);
}

// Per-class intercept normalization. In exact arithmetic every class column
// yields the same embedding vector, because column j of -grad l is
// (1[j=y] - f_j) z and the bias entry carries the identical scalar.
struct SoftmaxRecovery {
    Vector z_normalized;  // candidate for the inferred class, bias exactly 1
    double scale = 0.0;
    double class_spread = 0.0;
    std::vector<std::string> flags;
};

inline SoftmaxRecovery reconstruct_from_softmax(const Matrix& z, int y_hat) {
    if (z.cols() < 2)
        throw Error("reconstruct_from_softmax: scalar direction, use the linear path");
    if (y_hat < 0 || y_hat >= z.cols()) throw Error("reconstruct_from_softmax: label out of range");
    const Eigen::Index bias_idx = z.rows() - 1;

    SoftmaxRecovery out;
    const double bias = z(bias_idx, y_hat);
    out.scale = bias;
    if (std::abs(bias) < kDegenerateBiasTol * z.col(y_hat).norm() || bias == 0.0)
        out.flags.push_back("degenerate_bias");
    const double safe_bias = bias != 0.0 ? bias : 1.0;
    out.z_normalized = detail::intercept_normalize(z.col(y_hat), safe_bias, bias_idx);

    double spread = 0.0;
    const double ref_norm = std::max(out.z_normalized.norm(), 1e-300);
    for (Eigen::Index j = 0; j < z.cols(); ++j) {
        if (j == y_hat) continue;
        const double bj = z(bias_idx, j);
        if (std::abs(bj) <= kDegenerateBiasTol * z.col(j).norm() || bj == 0.0) continue;
        const Vector cand = detail::intercept_normalize(z.col(j), bj, bias_idx);
        spread = std::max(spread, (cand - out.z_normalized).norm() / ref_norm);
    }
    out.class_spread = spread;
    return out;
}

// ---------------------------------------------------------------------------
// Embedding inversion: minimize ||z_norm - phi(x)||^2 over the box [-1,1]^d
// by projected gradient descent with backtracking, multi-started from the
// public samples whose embeddings are closest to z_norm (plus any caller
// supplied candidates, e.g. the MaxDiff sample).

struct InversionOptions {
    int nearest_starts = 8;
    int max_iterations = 1000;
};

struct InversionResult {
    Vector x;
    double residual = 0.0;  // ||z_norm - phi(x)|| at the returned point
};

namespace detail {

inline double inversion_objective(const Embedding& emb, const Vector& z_norm, const Vector& x) {
    return (z_norm - embed(emb, x)).squaredNorm();
}

inline Vector project_box(Vector x) {
    return x.cwiseMax(-1.0).cwiseMin(1.0);
}

inline std::pair<Vector, double> pgd_from(const Embedding& emb, const Vector& z_norm, Vector x,
                                          int max_iters) {
    x = project_box(std::move(x));
    double f = inversion_objective(emb, z_norm, x);
    double step = 1.0;
    for (int it = 0; it < max_iters; ++it) {
        const Vector r = z_norm - embed(emb, x);
        const Vector grad = -2.0 * embed_gradient_vjp(emb, x, r);
        bool accepted = false;
        for (int h = 0; h < 50; ++h) {
            const Vector cand = project_box(x - step * grad);
            const double fc = inversion_objective(emb, z_norm, cand);
            const double move = (cand - x).squaredNorm();
            if (fc <= f - 1e-4 / std::max(step, 1e-300) * move) {
                if (move <= 1e-24) {  // converged to a stationary box point
                    return {cand, fc};
                }
                x = cand;
                f = fc;
                step *= 1.5;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        if (!accepted || f <= 1e-28) break;
    }
    return {x, f};
}

}  // namespace detail

inline InversionResult invert_embedding(const Vector& z_norm, const Embedding& emb,
                                        const Matrix& X_pub,
                                        const std::vector<Vector>& extra_starts = {},
                                        const Matrix* Z_pub = nullptr,
                                        const InversionOptions& opts = {}) {
    if (z_norm.size() != emb.output_dim) throw Error("invert_embedding: dimension mismatch");
    if (emb.kind == Embedding::Kind::identity) {
        InversionResult out;
        out.x = z_norm.head(emb.input_dim);
        out.residual = 0.0;
        return out;
    }

    // rank public rows by embedding distance to the target
    Matrix Z_local;
    if (Z_pub == nullptr) {
        Z_local = embed_rows(emb, X_pub);
        Z_pub = &Z_local;
    }
    const Eigen::Index m = X_pub.rows();
    std::vector<std::pair<double, Eigen::Index>> ranked(static_cast<std::size_t>(m));
    for (Eigen::Index i = 0; i < m; ++i)
        ranked[static_cast<std::size_t>(i)] = {(Z_pub->row(i).transpose() - z_norm).norm(), i};
    std::sort(ranked.begin(), ranked.end());

    std::vector<Vector> starts;
    const auto n_near = std::min<std::size_t>(ranked.size(), opts.nearest_starts);
    for (std::size_t i = 0; i < n_near; ++i)
        starts.push_back(X_pub.row(ranked[i].second).transpose());
    for (const auto& s : extra_starts) starts.push_back(s);
    if (starts.empty()) throw Error("invert_embedding: no starting points");

    InversionResult best;
    double best_f = std::numeric_limits<double>::infinity();
    for (const auto& s : starts) {
        auto [x, f] = detail::pgd_from(emb, z_norm, s, opts.max_iterations);
        if (f < best_f) {
            best_f = f;
            best.x = std::move(x);
        }
    }
    best.residual = std::sqrt(best_f);
    return best;
}

// ---------------------------------------------------------------------------
// Full pipeline (curvature -> direction -> label -> normalize -> invert).
// Consumes only the published parameters, public data, the loss spec and phi.

struct AttackOptions {
    InversionOptions inversion;
    // Oracle mode: use this operator instead of the public estimate (the
    // harness builds it from the private design when lambda is known).
    const CurvatureOperator* curvature_override = nullptr;
};

inline Reconstruction generalized_attack(const Matrix& beta_plus, const Matrix& beta_minus,
                                         const Matrix& X_pub, const Vector& y_pub,
                                         const LossSpec& spec, const Embedding& emb,
                                         const Matrix* Z_pub_pre = nullptr,
                                         const AttackOptions& opts = {}) {
    Matrix Z_local;
    if (Z_pub_pre == nullptr) {
        Z_local = embed_rows(emb, X_pub);
        Z_pub_pre = &Z_local;
    }
    const Matrix& Z_pub = *Z_pub_pre;

    // ridge reduces to the covariance attack; other losses use the estimated
    // Hessian (mean per-sample convention).
    if (spec.kind == LossKind::ridge) {
        CurvatureOperator cov =
            opts.curvature_override ? *opts.curvature_override : estimate_covariance(Z_pub);
        Reconstruction rec = hrec_linear(beta_plus.col(0), beta_minus.col(0), cov);
        if (emb.kind == Embedding::Kind::rff && !rec.flagged("degenerate_bias")) {
            std::vector<Vector> extra;
            const Matrix delta = beta_plus - beta_minus;
            Eigen::Index md_idx;
            (Z_pub * delta).rowwise().norm().maxCoeff(&md_idx);
            extra.push_back(X_pub.row(md_idx).transpose());
            auto inv = invert_embedding(rec.z_normalized, emb, X_pub, extra, &Z_pub,
                                        opts.inversion);
            rec.x_tilde = inv.x;
            rec.inversion_residual = inv.residual;
        }
        return rec;
    }

    CurvatureOperator hess;
    try {
        hess = opts.curvature_override ? *opts.curvature_override
                                       : estimate_hessian(beta_plus, spec, Z_pub, y_pub);
    } catch (const Error& e) {
        throw Error("curvature stage", e.what());
    }

    const Matrix z = hrec_general(beta_plus, beta_minus, hess);

    Reconstruction rec;
    rec.z_raw = z;

    if (spec.kind == LossKind::softmax_ce) {
        int y_hat;
        try {
            y_hat = infer_label(z);
        } catch (const LabelUndeterminedError&) {
            throw;
        } catch (const Error& e) {
            throw Error("label stage", e.what());
        }
        rec.y_hat = y_hat;
        auto rec_sm = reconstruct_from_softmax(z, y_hat);
        rec.scale = rec_sm.scale;
        rec.class_spread = rec_sm.class_spread;
        rec.z_normalized = std::move(rec_sm.z_normalized);
        rec.flags = std::move(rec_sm.flags);
        rec.bias_magnitude = std::abs(rec.scale) / std::max(z.col(y_hat).norm(), 1e-300);
    } else {
        const Eigen::Index bias_idx = z.rows() - 1;
        const double bias = z(bias_idx, 0);
        rec.scale = bias;
        rec.bias_magnitude = std::abs(bias) / std::max(z.col(0).norm(), 1e-300);
        if (std::abs(bias) < kDegenerateBiasTol * z.col(0).norm() || bias == 0.0)
            rec.flags.push_back("degenerate_bias");
        const double safe_bias = bias != 0.0 ? bias : 1.0;
        rec.z_normalized = detail::intercept_normalize(z.col(0), safe_bias, bias_idx);
        // Binary classifiers: the bias sign of -grad l identifies the class
        // (positive for the label the gradient pushes toward). Diagnostic only.
        rec.y_hat = bias > 0.0 ? 1 : 0;
        rec.flags.push_back("label_sign_diagnostic");
    }

    if (emb.kind == Embedding::Kind::identity) {
        rec.x_tilde = rec.z_normalized.head(emb.input_dim);
        rec.inversion_residual = 0.0;
    } else {
        std::vector<Vector> extra;
        Eigen::Index md_idx;
        (Z_pub * (beta_plus - beta_minus)).rowwise().norm().maxCoeff(&md_idx);
        extra.push_back(X_pub.row(md_idx).transpose());
        try {
            auto inv =
                invert_embedding(rec.z_normalized, emb, X_pub, extra, &Z_pub, opts.inversion);
            rec.x_tilde = inv.x;
            rec.inversion_residual = inv.residual;
        } catch (const Error& e) {
            throw Error("inversion stage", e.what());
        }
    }
    return rec;
}

}  // namespace unrec
