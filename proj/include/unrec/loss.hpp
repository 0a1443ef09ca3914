#pragma once

#include "unrec/common.hpp"

#include <string>

namespace unrec {

enum class LossKind { ridge, logistic, svm_squared_hinge, softmax_ce };

inline const char* loss_name(LossKind k) {
    switch (k) {
        case LossKind::ridge: return "ridge";
        case LossKind::logistic: return "logistic";
        case LossKind::svm_squared_hinge: return "svm_squared_hinge";
        case LossKind::softmax_ce: return "softmax_ce";
    }
    return "?";
}

inline LossKind loss_from_name(const std::string& s) {
    if (s == "ridge") return LossKind::ridge;
    if (s == "logistic") return LossKind::logistic;
    if (s == "svm_squared_hinge") return LossKind::svm_squared_hinge;
    if (s == "softmax_ce") return LossKind::softmax_ce;
    throw Error("unknown loss kind '" + s + "'");
}

struct LossSpec {
    LossKind kind = LossKind::ridge;
    double lambda = 0.0;  // l2 strength on the full parameter block, bias included
    int classes = 0;      // softmax only, k >= 2

    int output_cols() const { return kind == LossKind::softmax_ce ? classes : 1; }

    void validate() const {
        if (lambda < 0.0) throw Error("lambda must be nonnegative");
        if (kind == LossKind::softmax_ce && classes < 2)
            throw Error("softmax_ce needs at least 2 classes");
    }
};

namespace loss {

inline double sigmoid(double s) {
    return s >= 0.0 ? 1.0 / (1.0 + std::exp(-s)) : std::exp(s) / (1.0 + std::exp(s));
}

// log(1 + e^s) without overflow
inline double softplus(double s) {
    return s > 0.0 ? s + std::log1p(std::exp(-s)) : std::log1p(std::exp(s));
}

// Scalar-loss primitives in score space, s = z^T beta.
// logistic: y in {0,1}, l = softplus(s) - y*s
// svm_squared_hinge: y in {0,1} mapped to +-1, l = 0.5*max(0, 1 - y*s)^2
//   (the 1/2 makes the curvature weight an exact 0/1 indicator)

inline double value(LossKind kind, double s, double y) {
    switch (kind) {
        case LossKind::ridge: {
            const double r = s - y;
            return r * r;
        }
        case LossKind::logistic:
            return softplus(s) - y * s;
        case LossKind::svm_squared_hinge: {
            const double ys = (2.0 * y - 1.0) * s;
            const double gap = 1.0 - ys;
            return gap > 0.0 ? 0.5 * gap * gap : 0.0;
        }
        default:
            throw Error("value: not a scalar loss");
    }
}

inline double dscore(LossKind kind, double s, double y) {
    switch (kind) {
        case LossKind::ridge:
            return 2.0 * (s - y);
        case LossKind::logistic:
            return sigmoid(s) - y;
        case LossKind::svm_squared_hinge: {
            const double yy = 2.0 * y - 1.0;
            const double gap = 1.0 - yy * s;
            return gap > 0.0 ? -yy * gap : 0.0;
        }
        default:
            throw Error("dscore: not a scalar loss");
    }
}

// Curvature weight d^2 l / d s^2, the diagonal of the score-space Hessian.
inline double d2score(LossKind kind, double s, double y) {
    switch (kind) {
        case LossKind::ridge:
            return 2.0;
        case LossKind::logistic: {
            const double p = sigmoid(s);
            return p * (1.0 - p);
        }
        case LossKind::svm_squared_hinge: {
            const double ys = (2.0 * y - 1.0) * s;
            return 1.0 - ys >= 0.0 ? 1.0 : 0.0;
        }
        default:
            throw Error("d2score: not a scalar loss");
    }
}

inline Vector softmax_probs(const Vector& scores) {
    const double m = scores.maxCoeff();
    Vector f = (scores.array() - m).exp();
    f /= f.sum();
    return f;
}

inline double softmax_value(const Vector& scores, int y) {
    const double m = scores.maxCoeff();
    const double lse = m + std::log((scores.array() - m).exp().sum());
    return lse - scores[y];
}

}  // namespace loss

// Gradient of the per-sample loss w.r.t. the parameter block, d' x c.
// Scalar losses: dscore * z as a single column; softmax: z (f - e_y)^T.
inline Matrix per_sample_gradient(const LossSpec& spec, const Vector& z, double y,
                                  const Matrix& params) {
    if (spec.kind == LossKind::softmax_ce) {
        Vector f = loss::softmax_probs(params.transpose() * z);
        f[static_cast<Eigen::Index>(y)] -= 1.0;
        return z * f.transpose();
    }
    const double s = params.col(0).dot(z);
    return loss::dscore(spec.kind, s, y) * z;
}

}  // namespace unrec
