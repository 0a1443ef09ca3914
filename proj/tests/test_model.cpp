#include "unrec/model.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <sstream>

using namespace unrec;

namespace {

Matrix random_matrix(Rng& rng, Eigen::Index rows, Eigen::Index cols) {
    Matrix m(rows, cols);
    for (Eigen::Index i = 0; i < rows; ++i)
        for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = rng.normal();
    return m;
}

// embedded design with a bias column, plus targets for the given task
struct Problem {
    Matrix Z;
    Vector y;
};

Problem seeded_problem(std::uint64_t seed, Eigen::Index n, Eigen::Index d, LossKind kind,
                       int classes = 3) {
    Rng rng(seed);
    Problem p;
    p.Z.resize(n, d + 1);
    p.Z.leftCols(d) = random_matrix(rng, n, d);
    p.Z.col(d).setOnes();
    p.y.resize(n);
    Matrix w = random_matrix(rng, d + 1, kind == LossKind::softmax_ce ? classes : 1);
    Matrix s = p.Z * w;
    for (Eigen::Index i = 0; i < n; ++i) {
        switch (kind) {
            case LossKind::ridge:
                p.y[i] = s(i, 0) + 0.1 * rng.normal();
                break;
            case LossKind::logistic:
            case LossKind::svm_squared_hinge:
                p.y[i] = s(i, 0) + 0.3 * rng.normal() >= 0.0 ? 1.0 : 0.0;
                break;
            case LossKind::softmax_ce: {
                Eigen::Index best;
                s.row(i).maxCoeff(&best);
                p.y[i] = static_cast<double>(best);
                break;
            }
        }
    }
    return p;
}

}  // namespace

TEST_CASE("ridge interpolates exactly at lambda zero") {
    Matrix Z(2, 2);
    Z << 1, 1, 2, 1;
    Vector y(2);
    y << 1, 2;
    const Vector beta = train_ridge(Z, y, 0.0);
    CHECK(std::abs(beta[0] - 1.0) <= 1e-12);
    CHECK(std::abs(beta[1] - 0.0) <= 1e-12);
}

TEST_CASE("ridge matches the hand-computed 2x2 closed form at lambda 0.1") {
    Matrix Z(2, 2);
    Z << 1, 1, 2, 1;
    Vector y(2);
    y << 1, 2;
    const Vector beta = train_ridge(Z, y, 0.1);

    // independent oracle: Cramer's rule on (Z^T Z + 0.1 I) beta = Z^T y
    const Matrix C = Z.transpose() * Z + 0.1 * Matrix::Identity(2, 2);
    const Vector b = Z.transpose() * y;
    const double det = C(0, 0) * C(1, 1) - C(0, 1) * C(1, 0);
    const double b0 = (b[0] * C(1, 1) - C(0, 1) * b[1]) / det;
    const double b1 = (C(0, 0) * b[1] - b[0] * C(1, 0)) / det;
    CHECK(beta[0] == Catch::Approx(b0).margin(1e-14));
    CHECK(beta[1] == Catch::Approx(b1).margin(1e-14));
    // frozen values: C = [[5.1,3],[3,2.1]], b = (5,3), det = 1.71
    CHECK(beta[0] == Catch::Approx(1.5 / 1.71).margin(1e-12));
    CHECK(beta[1] == Catch::Approx(0.3 / 1.71).margin(1e-12));
}

TEST_CASE("regularization strictly shrinks the ridge solution") {
    const Problem p = seeded_problem(21, 30, 5, LossKind::ridge);
    const double n0 = train_ridge(p.Z, p.y, 0.0).norm();
    const double n1 = train_ridge(p.Z, p.y, 0.1).norm();
    const double n2 = train_ridge(p.Z, p.y, 1.0).norm();
    CHECK(n1 < n0);
    CHECK(n2 < n1);
}

TEST_CASE("ridge rejects non-finite input") {
    Matrix Z = Matrix::Ones(3, 2);
    Z(0, 0) = std::numeric_limits<double>::infinity();
    CHECK_THROWS_AS(train_ridge(Z, Vector::Ones(3), 0.1), Error);
}

TEST_CASE("separable logistic problem converges to a tight gradient norm") {
    Matrix Z(2, 2);
    Z << -1, 1, 1, 1;  // feature, bias
    Vector y(2);
    y << 0, 1;
    LossSpec spec{LossKind::logistic, 0.1, 0};
    auto [params, report] = train_iterative(Z, y, spec);
    CHECK(report.converged);
    CHECK(report.grad_max_norm <= 1e-9);
    CHECK(params.weights(0, 0) > 0.0);
}

TEST_CASE("two-class softmax reproduces the logistic decision boundary") {
    const Problem p = seeded_problem(5, 40, 4, LossKind::logistic);
    auto [lg, lg_rep] = train_iterative(p.Z, p.y, {LossKind::logistic, 0.01, 0});
    auto [sm, sm_rep] = train_iterative(p.Z, p.y, {LossKind::softmax_ce, 0.01, 2});
    REQUIRE(lg_rep.converged);
    REQUIRE(sm_rep.converged);
    const Vector s_lg = p.Z * lg.weights.col(0);
    const Matrix s_sm = p.Z * sm.weights;
    for (Eigen::Index i = 0; i < p.Z.rows(); ++i) {
        const int c_lg = s_lg[i] >= 0.0 ? 1 : 0;
        const int c_sm = s_sm(i, 1) >= s_sm(i, 0) ? 1 : 0;
        CHECK(c_lg == c_sm);
    }
}

TEST_CASE("large lambda drives iterative weights toward zero monotonically") {
    const Problem p = seeded_problem(8, 50, 4, LossKind::logistic);
    double prev = std::numeric_limits<double>::infinity();
    for (double lam : {0.01, 0.1, 1.0, 10.0, 100.0}) {
        auto [params, report] = train_iterative(p.Z, p.y, {LossKind::logistic, lam, 0});
        REQUIRE(report.converged);
        const double norm = params.weights.norm();
        CHECK(norm < prev);
        prev = norm;
    }
    CHECK(prev < 0.05);
}

TEST_CASE("iteration cap is reported as status, not thrown") {
    Matrix Z(2, 2);
    Z << -1, 1, 1, 1;
    Vector y(2);
    y << 0, 1;
    TrainOptions opts;
    opts.max_iterations = 2;
    auto [params, report] = train_iterative(Z, y, {LossKind::logistic, 1e-12, 0}, opts);
    CHECK_FALSE(report.converged);
    CHECK(report.iterations == 2);
}

TEST_CASE("analytic gradients match central finite differences for every loss") {
    struct Case {
        LossKind kind;
        int classes;
    };
    for (const Case c : {Case{LossKind::logistic, 0}, Case{LossKind::svm_squared_hinge, 0},
                         Case{LossKind::softmax_ce, 3}, Case{LossKind::ridge, 0}}) {
        const Problem p = seeded_problem(33 + static_cast<int>(c.kind), 25, 4, c.kind, 3);
        const LossSpec spec{c.kind, 0.05, c.classes};
        if (c.kind == LossKind::ridge) {
            // ridge gradient of the unaveraged objective
            Rng rng(44);
            const Vector beta = random_matrix(rng, 5, 1).col(0);
            const Vector g =
                2.0 * (p.Z.transpose() * (p.Z * beta - p.y) + spec.lambda * beta);
            const double h = 1e-6;
            for (Eigen::Index j = 0; j < 5; ++j) {
                Vector bp = beta, bm = beta;
                bp[j] += h;
                bm[j] -= h;
                auto obj = [&](const Vector& b) {
                    return (p.Z * b - p.y).squaredNorm() + spec.lambda * b.squaredNorm();
                };
                const double fd = (obj(bp) - obj(bm)) / (2.0 * h);
                CHECK(std::abs(g[j] - fd) / std::max(1.0, std::abs(fd)) <= 1e-5);
            }
            continue;
        }
        detail::IterativeProblem prob(p.Z, p.y, spec);
        Rng rng(55 + static_cast<int>(c.kind));
        const Matrix B = 0.5 * random_matrix(rng, 5, spec.output_cols());
        Matrix G;
        detail::IterativeProblem::Curvature curv;
        prob.objective_and_gradient(B, G, curv);
        const double h = 1e-6;
        for (Eigen::Index j = 0; j < B.size(); ++j) {
            Matrix Bp = B, Bm = B;
            Bp(j / B.cols(), j % B.cols()) += h;
            Bm(j / B.cols(), j % B.cols()) -= h;
            const double fd = (prob.objective(Bp) - prob.objective(Bm)) / (2.0 * h);
            const double an = G(j / B.cols(), j % B.cols());
            CHECK(std::abs(an - fd) / std::max(1.0, std::abs(fd)) <= 1e-5);
        }
    }
}

TEST_CASE("per-sample gradient matches finite differences") {
    Rng rng(71);
    const LossSpec spec{LossKind::softmax_ce, 0.0, 4};
    const Vector z = random_matrix(rng, 6, 1).col(0);
    const Matrix B = random_matrix(rng, 6, 4);
    const double y = 2.0;
    const Matrix G = per_sample_gradient(spec, z, y, B);
    const double h = 1e-6;
    for (Eigen::Index r = 0; r < 6; ++r)
        for (Eigen::Index c = 0; c < 4; ++c) {
            Matrix Bp = B, Bm = B;
            Bp(r, c) += h;
            Bm(r, c) -= h;
            const double fd = (loss::softmax_value(Bp.transpose() * z, 2) -
                               loss::softmax_value(Bm.transpose() * z, 2)) /
                              (2.0 * h);
            CHECK(std::abs(G(r, c) - fd) <= 1e-6);
        }
}

TEST_CASE("training is deterministic and first-order optimal at the solution") {
    for (LossKind kind : {LossKind::logistic, LossKind::svm_squared_hinge,
                          LossKind::softmax_ce}) {
        const Problem p = seeded_problem(200 + static_cast<int>(kind), 60, 5, kind, 3);
        const LossSpec spec{kind, 0.01, kind == LossKind::softmax_ce ? 3 : 0};
        auto [a, rep_a] = train_iterative(p.Z, p.y, spec);
        auto [b, rep_b] = train_iterative(p.Z, p.y, spec);
        REQUIRE(rep_a.converged);
        CHECK(a.weights == b.weights);  // bit-identical
        CHECK(rep_a.grad_max_norm <= 1e-8);
    }
}

TEST_CASE("exact unlearning equals the rank-one downdate for ridge") {
    Rng seeds(404);
    for (int trial = 0; trial < 20; ++trial) {
        const auto d = static_cast<Eigen::Index>(2 + seeds.index(10));
        const auto n = d + 3 + static_cast<Eigen::Index>(seeds.index(20));
        const double lambda = seeds.uniform(0.01, 1.0);
        const Problem p = seeded_problem(seeds.next_u64(), n, d, LossKind::ridge);
        const Vector beta_plus = train_ridge(p.Z, p.y, lambda);
        const Matrix C =
            p.Z.transpose() * p.Z + lambda * Matrix::Identity(p.Z.cols(), p.Z.cols());

        const auto del = static_cast<Eigen::Index>(seeds.index(static_cast<std::size_t>(n)));
        auto [retrained, rep] =
            unlearn_exact_embedded(p.Z, p.y, del, {LossKind::ridge, lambda, 0});
        const auto sm =
            sherman_morrison_unlearn(beta_plus, C, p.Z.row(del).transpose(), p.y[del]);
        CHECK_FALSE(sm.pinv_fallback);
        CHECK((retrained.weights.col(0) - sm.beta_minus).cwiseAbs().maxCoeff() <= 1e-10);
    }
}

TEST_CASE("rank-one downdate with x = 0 returns beta+ unchanged") {
    const Problem p = seeded_problem(17, 12, 3, LossKind::ridge);
    const double lambda = 0.2;
    const Vector beta_plus = train_ridge(p.Z, p.y, lambda);
    const Matrix C = p.Z.transpose() * p.Z + lambda * Matrix::Identity(4, 4);
    const auto res = sherman_morrison_unlearn(beta_plus, C, Vector::Zero(4), 0.0);
    CHECK((res.beta_minus - beta_plus).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("the rank-one update identity holds on random instances") {
    Rng seeds(505);
    for (int trial = 0; trial < 30; ++trial) {
        const auto d = static_cast<Eigen::Index>(2 + seeds.index(6));
        const auto n = d + 4 + static_cast<Eigen::Index>(seeds.index(15));
        const double lambda = seeds.uniform(0.05, 0.5);
        const Problem p = seeded_problem(seeds.next_u64(), n, d, LossKind::ridge);
        const Vector bp = train_ridge(p.Z, p.y, lambda);
        const Matrix C =
            p.Z.transpose() * p.Z + lambda * Matrix::Identity(p.Z.cols(), p.Z.cols());
        const Vector x = p.Z.row(0).transpose();
        const double y0 = p.y[0];
        const Vector bm = sherman_morrison_unlearn(bp, C, x, y0).beta_minus;

        // with the remaining-data covariance A = C - x x^T:
        //   beta+ = beta- + ((y - x.beta-) / (1 + x.A^-1 x)) A^-1 x
        const Matrix A = C - x * x.transpose();
        const Vector v = A.ldlt().solve(x);
        const Vector pred_down = bm + (y0 - x.dot(bm)) / (1.0 + x.dot(v)) * v;
        CHECK((bp - pred_down).norm() <= 1e-10);

        // equivalent full-covariance form: beta+ = beta- + (y - x.beta-) C^-1 x
        const Vector u = C.ldlt().solve(x);
        const Vector pred_full = bm + (y0 - x.dot(bm)) * u;
        CHECK((bp - pred_full).norm() <= 1e-10);

        // and the analytic difference: C (beta+ - beta-) = alpha x
        const Vector lhs = C * (bp - bm);
        const double alpha = y0 - x.dot(bm);
        CHECK((lhs - alpha * x).norm() <= 1e-9 * std::max(1.0, lhs.norm()));
    }
}

TEST_CASE("downdating to a singular matrix falls back to the pseudoinverse, flagged") {
    // square full-rank design at lambda 0: removing a row makes C - x x^T singular
    Rng rng(606);
    const Matrix Z = random_matrix(rng, 3, 3);
    Vector y(3);
    y << 1.0, -0.5, 2.0;
    const Vector bp = train_ridge(Z, y, 0.0);
    const Matrix C = Z.transpose() * Z;
    const auto res = sherman_morrison_unlearn(bp, C, Z.row(0).transpose(), y[0]);
    CHECK(res.pinv_fallback);
    CHECK(res.beta_minus.allFinite());
}

TEST_CASE("deleting either copy of a duplicated row gives the same model") {
    Problem p = seeded_problem(909, 15, 3, LossKind::ridge);
    p.Z.row(7) = p.Z.row(2);
    p.y[7] = p.y[2];
    const LossSpec spec{LossKind::ridge, 0.1, 0};
    auto [a, rep_a] = unlearn_exact_embedded(p.Z, p.y, 2, spec);
    auto [b, rep_b] = unlearn_exact_embedded(p.Z, p.y, 7, spec);
    CHECK((a.weights - b.weights).cwiseAbs().maxCoeff() <= 1e-12);
}

TEST_CASE("deleting an on-the-fit point leaves the unregularized solution unchanged") {
    // noiseless targets: every point lies on the fit, so alpha(x,y) = 0
    Rng rng(42);
    const Matrix Z = [&] {
        Matrix m = random_matrix(rng, 20, 4);
        m.col(3).setOnes();
        return m;
    }();
    const Vector w_true = random_matrix(rng, 4, 1).col(0);
    const Vector y = Z * w_true;
    const Vector beta_full = train_ridge(Z, y, 0.0);
    auto [after, rep] = unlearn_exact_embedded(Z, y, 5, {LossKind::ridge, 0.0, 0});
    CHECK((after.weights.col(0) - beta_full).cwiseAbs().maxCoeff() <= 1e-9);
}

TEST_CASE("unlearn_exact validates its index and works end to end") {
    const Dataset ds = synthesize({.n = 12, .d = 3, .task = Task::regression,
                                   .noise_std = 0.1, .seed = 55});
    const Embedding emb = make_identity(3);
    CHECK_THROWS_AS(unlearn_exact(ds, 12, {LossKind::ridge, 0.1, 0}, emb), Error);
    CHECK_THROWS_AS(unlearn_exact(ds, -1, {LossKind::ridge, 0.1, 0}, emb), Error);
    const ModelParams m = unlearn_exact(ds, 3, {LossKind::ridge, 0.1, 0}, emb);
    const Matrix Z = embed_rows(emb, ds.without_row(3).features);
    const Vector direct = train_ridge(Z, ds.without_row(3).targets, 0.1);
    CHECK((m.weights.col(0) - direct).cwiseAbs().maxCoeff() == 0.0);
    CHECK(m.embedding_hash == embedding_digest(emb));
}

TEST_CASE("predict follows each loss's link function") {
    const Embedding emb = make_identity(2);
    Vector x(2);
    x << 0.3, -0.4;

    ModelParams softmax;
    softmax.loss = {LossKind::softmax_ce, 0.0, 4};
    softmax.weights = Matrix::Zero(3, 4);
    const Vector probs = predict(softmax, emb, x);
    for (int j = 0; j < 4; ++j) CHECK(probs[j] == Catch::Approx(0.25).margin(1e-15));

    ModelParams logistic;
    logistic.loss = {LossKind::logistic, 0.0, 0};
    logistic.weights = Matrix::Zero(3, 1);
    CHECK(predict(logistic, emb, x)[0] == 0.5);

    ModelParams ridge;
    ridge.loss = {LossKind::ridge, 0.0, 0};
    ridge.weights = Matrix::Ones(3, 1);
    CHECK(predict(ridge, emb, x)[0] == Catch::Approx(0.3 - 0.4 + 1.0).margin(1e-15));
}

TEST_CASE("softmax probabilities sum to one within 1e-12 on random inputs") {
    Rng rng(77);
    const Embedding emb = make_identity(4);
    ModelParams m;
    m.loss = {LossKind::softmax_ce, 0.0, 5};
    m.weights = 3.0 * random_matrix(rng, 5, 5);
    for (int trial = 0; trial < 50; ++trial) {
        const Vector x = random_matrix(rng, 4, 1).col(0);
        const Vector p = predict(m, emb, x);
        CHECK(std::abs(p.sum() - 1.0) <= 1e-12);
        CHECK(p.minCoeff() >= 0.0);
    }
}

TEST_CASE("model serialization round-trips") {
    Rng rng(88);
    ModelParams m;
    m.loss = {LossKind::softmax_ce, 0.25, 3};
    m.weights = random_matrix(rng, 6, 3);
    m.embedding_hash = 0xdeadbeefULL;
    std::ostringstream os(std::ios::binary);
    save_model(m, os);
    std::istringstream is(os.str(), std::ios::binary);
    const ModelParams back = load_model(is);
    CHECK(back.weights == m.weights);
    CHECK(back.loss.kind == m.loss.kind);
    CHECK(back.loss.lambda == m.loss.lambda);
    CHECK(back.loss.classes == m.loss.classes);
    CHECK(back.embedding_hash == m.embedding_hash);
}
