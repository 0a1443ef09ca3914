#pragma once

#include "unrec/common.hpp"
#include "unrec/dataset.hpp"
#include "unrec/embedding.hpp"
#include "unrec/loss.hpp"

#include <fstream>
#include <string>
#include <utility>

namespace unrec {

// Trained parameter block. weights is d' x c with c = 1 for scalar losses and
// c = k for softmax; the bias lives in the last row via the embedding's bias
// coordinate.
struct ModelParams {
    Matrix weights;
    LossSpec loss;
    std::uint64_t embedding_hash = 0;

    Eigen::Index dim() const { return weights.rows(); }
    Eigen::Index cols() const { return weights.cols(); }
};

struct TrainReport {
    double objective = 0.0;
    double grad_max_norm = 0.0;
    int iterations = 0;
    bool converged = false;
};

struct TrainOptions {
    double tolerance = 1e-9;  // max-norm of the full objective gradient
    int max_iterations = 500;
    Eigen::Index dense_newton_limit = 1600;  // parameter count above which the
                                             // Newton system is solved matrix-free
};

// ---------------------------------------------------------------------------
// Ridge: objective ||Z b - y||^2 + lambda ||b||^2 (unaveraged), closed form.
// lambda = 0 takes the minimum-norm least-squares solution, i.e. the
// Moore-Penrose pseudoinverse applied to Z^T y.

inline Vector train_ridge(const Matrix& Z, const Vector& y, double lambda) {
    if (!Z.allFinite() || !y.allFinite()) throw Error("train_ridge: non-finite inputs");
    if (lambda < 0.0) throw Error("train_ridge: lambda must be nonnegative");
    if (Z.rows() != y.size()) throw Error("train_ridge: row count mismatch");

    Vector beta;
    const Vector zty = Z.transpose() * y;
    if (lambda > 0.0) {
        Matrix C = Z.transpose() * Z;
        C.diagonal().array() += lambda;
        Eigen::LDLT<Matrix> ldlt(C);
        beta = ldlt.solve(zty);
        beta += ldlt.solve(zty - C * beta);  // one refinement step
        const double rel = (C * beta - zty).norm() / std::max(1.0, zty.norm());
        if (!(rel <= 1e-8)) throw Error("train_ridge: normal-equation residual " +
                                        format_double(rel, 3) + " exceeds 1e-8");
    } else {
        Eigen::CompleteOrthogonalDecomposition<Matrix> cod(Z);
        beta = cod.solve(y);
        const double rel =
            (Z.transpose() * (Z * beta) - zty).norm() / std::max(1.0, zty.norm());
        if (!(rel <= 1e-8))
            throw Error("train_ridge: pseudoinverse residual " + format_double(rel, 3) +
                        " exceeds 1e-8");
    }
    return beta;
}

// ---------------------------------------------------------------------------
// Iterative losses: objective (1/n) sum_i l(beta; z_i, y_i) + lambda ||beta||^2,
// minimized by damped Newton from the zero initializer. Below
// dense_newton_limit parameters the Newton system is factored densely;
// above it, a preconditioned conjugate-gradient solve on Hessian-vector
// products is used. Both paths are deterministic.

namespace detail {

struct IterativeProblem {
    const Matrix& Z;
    const Vector& y;
    LossSpec spec;
    Eigen::Index n, dp;
    int c;

    IterativeProblem(const Matrix& Z_, const Vector& y_, const LossSpec& spec_)
        : Z(Z_), y(y_), spec(spec_), n(Z_.rows()), dp(Z_.cols()), c(spec_.output_cols()) {}

    double objective(const Matrix& B) const {
        const Matrix S = Z * B;
        double total = 0.0;
        if (spec.kind == LossKind::softmax_ce) {
            for (Eigen::Index i = 0; i < n; ++i)
                total += loss::softmax_value(S.row(i).transpose(), static_cast<int>(y[i]));
        } else {
            for (Eigen::Index i = 0; i < n; ++i)
                total += loss::value(spec.kind, S(i, 0), y[i]);
        }
        return total / static_cast<double>(n) + spec.lambda * B.squaredNorm();
    }

    // Curvature state at the current iterate, reused by all HVPs of one
    // Newton step.
    struct Curvature {
        Vector dweights;  // scalar losses
        Matrix probs;     // softmax, n x k
    };

    double objective_and_gradient(const Matrix& B, Matrix& G, Curvature& curv) const {
        const Matrix S = Z * B;
        double total = 0.0;
        Matrix dS(n, c);
        if (spec.kind == LossKind::softmax_ce) {
            curv.probs.resize(n, c);
            for (Eigen::Index i = 0; i < n; ++i) {
                const Vector f = loss::softmax_probs(S.row(i).transpose());
                const int yi = static_cast<int>(y[i]);
                total += loss::softmax_value(S.row(i).transpose(), yi);
                curv.probs.row(i) = f.transpose();
                dS.row(i) = f.transpose();
                dS(i, yi) -= 1.0;
            }
        } else {
            curv.dweights.resize(n);
            for (Eigen::Index i = 0; i < n; ++i) {
                total += loss::value(spec.kind, S(i, 0), y[i]);
                dS(i, 0) = loss::dscore(spec.kind, S(i, 0), y[i]);
                curv.dweights[i] = loss::d2score(spec.kind, S(i, 0), y[i]);
            }
        }
        G = Z.transpose() * dS / static_cast<double>(n) + 2.0 * spec.lambda * B;
        return total / static_cast<double>(n) + spec.lambda * B.squaredNorm();
    }

    Matrix hvp(const Matrix& V, const Curvature& curv, double damping) const {
        Matrix out;
        if (spec.kind == LossKind::softmax_ce) {
            const Matrix A = Z * V;                                    // n x k
            const Matrix PA = curv.probs.cwiseProduct(A);              // f .* a
            const Vector rowdot = PA.rowwise().sum();                  // f . a
            const Matrix Bm = PA - curv.probs.cwiseProduct(rowdot.replicate(1, c));
            out = Z.transpose() * Bm / static_cast<double>(n);
        } else {
            const Vector u = curv.dweights.cwiseProduct(Z * V.col(0));
            out = Z.transpose() * u / static_cast<double>(n);
        }
        out += (2.0 * spec.lambda + damping) * V;
        return out;
    }

    Matrix dense_hessian(const Curvature& curv) const {
        const auto p = dp * c;
        Matrix H(p, p);
        if (spec.kind == LossKind::softmax_ce) {
            for (int a = 0; a < c; ++a) {
                for (int b = a; b < c; ++b) {
                    Vector w(n);
                    for (Eigen::Index i = 0; i < n; ++i) {
                        const double fa = curv.probs(i, a), fb = curv.probs(i, b);
                        w[i] = a == b ? fa * (1.0 - fa) : -fa * fb;
                    }
                    const Matrix block =
                        Z.transpose() * w.asDiagonal() * Z / static_cast<double>(n);
                    H.block(a * dp, b * dp, dp, dp) = block;
                    if (a != b) H.block(b * dp, a * dp, dp, dp) = block.transpose();
                }
            }
        } else {
            H = Z.transpose() * curv.dweights.asDiagonal() * Z / static_cast<double>(n);
        }
        H.diagonal().array() += 2.0 * spec.lambda;
        return H;
    }
};

// Block-diagonal preconditioner for the softmax Newton system: the same
// ridge-like factor (Z^T Z / 4n + shift) applied to every class column.
// 1/4 bounds the per-class curvature weight from above.
struct NewtonPreconditioner {
    Eigen::LLT<Matrix> llt;

    NewtonPreconditioner(const Matrix& Z, double lambda) {
        const auto n = static_cast<double>(Z.rows());
        Matrix M = Z.transpose() * Z / (4.0 * n);
        const double shift = std::max(2.0 * lambda, 1e-10 * (1.0 + M.trace() / Z.cols()));
        M.diagonal().array() += shift;
        llt.compute(M);
    }

    Matrix apply(const Matrix& R) const {
        Matrix out(R.rows(), R.cols());
        for (Eigen::Index a = 0; a < R.cols(); ++a) out.col(a) = llt.solve(R.col(a));
        return out;
    }
};

inline Matrix solve_newton_pcg(const IterativeProblem& prob,
                               const IterativeProblem::Curvature& curv,
                               const NewtonPreconditioner& precond, const Matrix& G,
                               double damping, double grad_norm) {
    const double tol = std::max(std::min(0.5, std::sqrt(grad_norm)) * grad_norm, 1e-15);
    Matrix x = Matrix::Zero(G.rows(), G.cols());
    Matrix r = -G;
    Matrix z = precond.apply(r);
    Matrix p = z;
    double rz = (r.array() * z.array()).sum();
    const int maxit = 500;
    for (int it = 0; it < maxit; ++it) {
        const Matrix Hp = prob.hvp(p, curv, damping);
        const double pHp = (p.array() * Hp.array()).sum();
        if (!(pHp > 0.0)) break;  // indefiniteness guard; caller raises damping
        const double alpha = rz / pHp;
        x += alpha * p;
        r -= alpha * Hp;
        if (r.norm() <= tol) break;
        z = precond.apply(r);
        const double rz_new = (r.array() * z.array()).sum();
        p = z + (rz_new / rz) * p;
        rz = rz_new;
    }
    return x;
}

}  // namespace detail

inline std::pair<Matrix, TrainReport> train_iterative_raw(const Matrix& Z, const Vector& y,
                                                          const LossSpec& spec,
                                                          const TrainOptions& opts = {}) {
    spec.validate();
    if (spec.kind == LossKind::ridge) throw Error("train_iterative: use train_ridge");
    if (!Z.allFinite() || !y.allFinite()) throw Error("train_iterative: non-finite inputs");

    detail::IterativeProblem prob(Z, y, spec);
    const auto p_total = prob.dp * prob.c;
    const bool use_cg = p_total > opts.dense_newton_limit;
    std::optional<detail::NewtonPreconditioner> precond;
    if (use_cg) precond.emplace(Z, spec.lambda);

    Matrix B = Matrix::Zero(prob.dp, prob.c);
    Matrix G;
    detail::IterativeProblem::Curvature curv;
    double F = prob.objective_and_gradient(B, G, curv);

    TrainReport report;
    report.converged = false;
    int iter = 0;
    for (; iter < opts.max_iterations; ++iter) {
        const double gmax = G.cwiseAbs().maxCoeff();
        if (gmax <= opts.tolerance) {
            report.converged = true;
            break;
        }

        double damping = 0.0;
        bool stepped = false;
        for (int attempt = 0; attempt < 12 && !stepped; ++attempt) {
            Matrix P;
            if (use_cg) {
                P = detail::solve_newton_pcg(prob, curv, *precond, G, damping, G.norm());
            } else {
                Matrix H = prob.dense_hessian(curv);
                H.diagonal().array() += damping;
                Eigen::LDLT<Matrix> ldlt(H);
                const Vector gv = G.reshaped();
                P = (-ldlt.solve(gv)).reshaped(prob.dp, prob.c).eval();
            }
            const double gp = (G.array() * P.array()).sum();
            if (P.allFinite() && gp < 0.0) {
                // Armijo backtracking
                double t = 1.0;
                for (int h = 0; h < 60; ++h) {
                    const Matrix cand = B + t * P;
                    const double Fc = prob.objective(cand);
                    if (Fc <= F + 1e-4 * t * gp) {
                        B = cand;
                        F = prob.objective_and_gradient(B, G, curv);
                        stepped = true;
                        break;
                    }
                    t *= 0.5;
                }
            }
            if (!stepped) damping = damping == 0.0 ? 1e-8 : damping * 10.0;
        }
        if (!stepped) break;  // no progress possible at machine precision
    }

    report.objective = F;
    report.grad_max_norm = G.cwiseAbs().maxCoeff();
    report.iterations = iter;
    if (report.grad_max_norm <= opts.tolerance) report.converged = true;
    return {std::move(B), report};
}

// ---------------------------------------------------------------------------
// Dispatchers

inline std::pair<ModelParams, TrainReport> train(const Matrix& Z, const Vector& y,
                                                 const LossSpec& spec,
                                                 const TrainOptions& opts = {}) {
    ModelParams params;
    params.loss = spec;
    TrainReport report;
    if (spec.kind == LossKind::ridge) {
        params.weights = train_ridge(Z, y, spec.lambda);
        const Vector g =
            2.0 * (Z.transpose() * (Z * params.weights.col(0) - y) + spec.lambda * params.weights.col(0));
        report.objective = (Z * params.weights.col(0) - y).squaredNorm() +
                           spec.lambda * params.weights.squaredNorm();
        report.grad_max_norm = g.cwiseAbs().maxCoeff();
        report.iterations = 0;
        report.converged = true;
    } else {
        auto [w, r] = train_iterative_raw(Z, y, spec, opts);
        params.weights = std::move(w);
        report = r;
    }
    return {std::move(params), report};
}

inline std::pair<ModelParams, TrainReport> train_iterative(const Matrix& Z, const Vector& y,
                                                           const LossSpec& spec,
                                                           const TrainOptions& opts = {}) {
    auto [w, r] = train_iterative_raw(Z, y, spec, opts);
    ModelParams params;
    params.weights = std::move(w);
    params.loss = spec;
    return {std::move(params), r};
}

// Exact unlearning: retrain from scratch on the dataset minus one row, same
// pipeline and hyperparameters.
inline ModelParams unlearn_exact(const Dataset& priv, Eigen::Index index, const LossSpec& spec,
                                 const Embedding& emb, const TrainOptions& opts = {}) {
    if (index < 0 || index >= priv.n()) throw Error("unlearn_exact: index out of range");
    if (priv.n() - 1 < 1) throw Error("unlearn_exact: remaining set would be empty");
    const Dataset rest = priv.without_row(index);
    const Matrix Z = embed_rows(emb, rest.features);
    auto [params, report] = train(Z, rest.targets, spec, opts);
    params.embedding_hash = embedding_digest(emb);
    (void)report;
    return params;
}

// Same, on a pre-embedded design (avoids re-embedding in deletion sweeps).
inline std::pair<ModelParams, TrainReport> unlearn_exact_embedded(const Matrix& Z, const Vector& y,
                                                                  Eigen::Index index,
                                                                  const LossSpec& spec,
                                                                  const TrainOptions& opts = {}) {
    if (index < 0 || index >= Z.rows()) throw Error("unlearn_exact: index out of range");
    Matrix Zr(Z.rows() - 1, Z.cols());
    Vector yr(Z.rows() - 1);
    Eigen::Index w = 0;
    for (Eigen::Index i = 0; i < Z.rows(); ++i) {
        if (i == index) continue;
        Zr.row(w) = Z.row(i);
        yr[w] = y[i];
        ++w;
    }
    return train(Zr, yr, spec, opts);
}

// ---------------------------------------------------------------------------
// Analytic rank-one unlearner for ridge (oracle for exact retraining).
// C must be the full-design regularized covariance Z^T Z + lambda I; the
// post-deletion solution is (C - x x^T)^{-1} (Z^T y - x y), where Z^T y is
// recovered as C beta_plus.

struct DowndateResult {
    Vector beta_minus;
    bool pinv_fallback = false;
};

inline DowndateResult sherman_morrison_unlearn(const Vector& beta_plus, const Matrix& C,
                                               const Vector& x, double y) {
    if (C.rows() != C.cols() || C.rows() != beta_plus.size() || x.size() != beta_plus.size())
        throw Error("sherman_morrison_unlearn: dimension mismatch");
    const Vector rhs = C * beta_plus - x * y;
    Matrix A = C - x * x.transpose();

    DowndateResult out;
    Eigen::LDLT<Matrix> ldlt(A);
    const Vector dvec = ldlt.vectorD();
    const double dmax = dvec.cwiseAbs().maxCoeff();
    const bool rank_deficient =
        ldlt.info() != Eigen::Success || dmax <= 0.0 ||
        dvec.cwiseAbs().minCoeff() <= 1e-12 * dmax || dvec.minCoeff() < -1e-10 * dmax;
    if (!rank_deficient) {
        out.beta_minus = ldlt.solve(rhs);
        out.beta_minus += ldlt.solve(rhs - A * out.beta_minus);
    }
    const double rel = rank_deficient
                           ? std::numeric_limits<double>::infinity()
                           : (A * out.beta_minus - rhs).norm() / std::max(1.0, rhs.norm());
    if (rank_deficient || !out.beta_minus.allFinite() || rel > 1e-6) {
        // Downdated matrix is singular; fall back to the pseudoinverse.
        Eigen::SelfAdjointEigenSolver<Matrix> es(A);
        const Vector& ev = es.eigenvalues();
        const double cutoff = ev.cwiseAbs().maxCoeff() * 1e-12 * A.rows();
        Vector inv = Vector::Zero(ev.size());
        for (Eigen::Index i = 0; i < ev.size(); ++i)
            if (std::abs(ev[i]) > cutoff) inv[i] = 1.0 / ev[i];
        out.beta_minus =
            es.eigenvectors() * (inv.asDiagonal() * (es.eigenvectors().transpose() * rhs));
        out.pinv_fallback = true;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Prediction. ridge: raw score; logistic: sigmoid probability; svm: margin;
// softmax: probability vector (sums to 1 within 1e-12).

inline Vector predict(const ModelParams& params, const Embedding& emb, const Vector& x) {
    const Vector z = embed(emb, x);
    if (z.size() != params.dim()) throw Error("predict: dimension mismatch");
    const Vector s = params.weights.transpose() * z;
    switch (params.loss.kind) {
        case LossKind::ridge:
        case LossKind::svm_squared_hinge:
            return s;
        case LossKind::logistic: {
            Vector p(1);
            p[0] = loss::sigmoid(s[0]);
            return p;
        }
        case LossKind::softmax_ce:
            return loss::softmax_probs(s);
    }
    throw Error("predict: unknown loss kind");
}

inline int predict_class(const ModelParams& params, const Embedding& emb, const Vector& x) {
    const Vector out = predict(params, emb, x);
    switch (params.loss.kind) {
        case LossKind::logistic:
            return out[0] >= 0.5 ? 1 : 0;
        case LossKind::svm_squared_hinge:
            return out[0] >= 0.0 ? 1 : 0;
        case LossKind::softmax_ce: {
            Eigen::Index best;
            out.maxCoeff(&best);
            return static_cast<int>(best);
        }
        default:
            throw Error("predict_class: not a classifier");
    }
}

// ---------------------------------------------------------------------------
// Serialization: what the threat model publishes.
//
// Layout: magic "UAMP" | u16 version | u8 loss kind | f64 lambda | u32 classes
//         | u64 rows | u64 cols | u64 embedding digest
//         | rows*cols weight doubles (row-major)

inline void save_model(const ModelParams& params, std::ostream& os) {
    os.write("UAMP", 4);
    io::write_le<std::uint16_t>(os, 1);
    io::write_le<std::uint8_t>(os, static_cast<std::uint8_t>(params.loss.kind));
    io::write_le<double>(os, params.loss.lambda);
    io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(params.loss.classes));
    io::write_le<std::uint64_t>(os, static_cast<std::uint64_t>(params.weights.rows()));
    io::write_le<std::uint64_t>(os, static_cast<std::uint64_t>(params.weights.cols()));
    io::write_le<std::uint64_t>(os, params.embedding_hash);
    io::write_matrix(os, params.weights);
}

inline void save_model(const ModelParams& params, const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot write model file '" + path + "'");
    save_model(params, os);
}

inline ModelParams load_model(std::istream& is) {
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "UAMP") throw Error("bad model magic");
    if (io::read_le<std::uint16_t>(is) != 1) throw Error("unsupported model version");
    ModelParams p;
    p.loss.kind = static_cast<LossKind>(io::read_le<std::uint8_t>(is));
    p.loss.lambda = io::read_le<double>(is);
    p.loss.classes = static_cast<int>(io::read_le<std::uint32_t>(is));
    const auto rows = static_cast<Eigen::Index>(io::read_le<std::uint64_t>(is));
    const auto cols = static_cast<Eigen::Index>(io::read_le<std::uint64_t>(is));
    p.embedding_hash = io::read_le<std::uint64_t>(is);
    p.weights = io::read_matrix(is, rows, cols);
    return p;
}

inline ModelParams load_model(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open model file '" + path + "'");
    return load_model(is);
}

}  // namespace unrec
