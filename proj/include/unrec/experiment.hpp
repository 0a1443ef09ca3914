#pragma once

#include "unrec/attack.hpp"
#include "unrec/baselines.hpp"
#include "unrec/config.hpp"
#include "unrec/curvature.hpp"
#include "unrec/dataset.hpp"
#include "unrec/embedding.hpp"
#include "unrec/eval.hpp"
#include "unrec/model.hpp"

#include <atomic>
#include <filesystem>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

namespace unrec {

// ---------------------------------------------------------------------------
// Data preparation (shared by run and montage).

struct PreparedData {
    Dataset full, priv, pub;
    Embedding emb;
};

inline PreparedData prepare_data(const ExperimentConfig& cfg) {
    PreparedData out;
    switch (cfg.dataset.kind) {
        case DatasetSource::Kind::csv:
            out.full = load_csv(cfg.dataset.path, cfg.dataset.target_column, cfg.dataset.task);
            break;
        case DatasetSource::Kind::idx:
            out.full = load_idx(cfg.dataset.images_path, cfg.dataset.labels_path);
            break;
        case DatasetSource::Kind::synthetic:
            out.full = synthesize(cfg.dataset.synth);
            break;
    }
    // auto: CSV needs the min-max map; IDX and synthetic are already in range
    const bool do_norm = cfg.normalize == "on" ||
                         (cfg.normalize == "auto" && cfg.dataset.kind == DatasetSource::Kind::csv);
    if (do_norm) out.full = normalize_to_range(out.full);

    auto [priv, pub] = split_private_public(out.full, cfg.split);
    out.priv = std::move(priv);
    out.pub = std::move(pub);

    if (cfg.embedding.kind == EmbeddingSpec::Kind::identity) {
        out.emb = make_identity(out.full.d());
    } else {
        const double gamma = cfg.embedding.gamma ? *cfg.embedding.gamma
                                                 : median_heuristic_gamma(out.pub.features);
        out.emb = make_rff(out.full.d(), cfg.embedding.output_dim, gamma, cfg.embedding.seed);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Lambda selection: fixed grid on a seeded private holdout, then frozen.

inline const std::vector<double>& lambda_grid() {
    static const std::vector<double> grid = {1e-4, 1e-3, 1e-2, 1e-1, 1.0, 10.0};
    return grid;
}

namespace detail {

inline double holdout_score(const Matrix& Z, const Vector& y, const ModelParams& params) {
    const Matrix S = Z * params.weights;
    double total = 0.0;
    const auto n = Z.rows();
    if (params.loss.kind == LossKind::softmax_ce) {
        for (Eigen::Index i = 0; i < n; ++i)
            total += loss::softmax_value(S.row(i).transpose(), static_cast<int>(y[i]));
    } else {
        for (Eigen::Index i = 0; i < n; ++i)
            total += loss::value(params.loss.kind, S(i, 0), y[i]);
    }
    return total / static_cast<double>(n);
}

}  // namespace detail

inline double grid_search_lambda(const Matrix& Z, const Vector& y, LossSpec spec,
                                 const TrainOptions& opts, std::uint64_t seed) {
    const auto n = Z.rows();
    if (n < 5) throw Error("lambda grid search needs at least 5 private samples");
    Rng rng(seed);
    const auto perm = rng.permutation(static_cast<std::size_t>(n));
    const auto n_hold = std::max<Eigen::Index>(1, n / 5);

    Matrix Z_tr(n - n_hold, Z.cols()), Z_ho(n_hold, Z.cols());
    Vector y_tr(n - n_hold), y_ho(n_hold);
    for (Eigen::Index i = 0; i < n_hold; ++i) {
        Z_ho.row(i) = Z.row(static_cast<Eigen::Index>(perm[i]));
        y_ho[i] = y[static_cast<Eigen::Index>(perm[i])];
    }
    for (Eigen::Index i = n_hold; i < n; ++i) {
        Z_tr.row(i - n_hold) = Z.row(static_cast<Eigen::Index>(perm[i]));
        y_tr[i - n_hold] = y[static_cast<Eigen::Index>(perm[i])];
    }

    double best_lambda = lambda_grid().front();
    double best_score = std::numeric_limits<double>::infinity();
    for (double lam : lambda_grid()) {
        spec.lambda = lam;
        auto [params, report] = train(Z_tr, y_tr, spec, opts);
        (void)report;
        const double score = detail::holdout_score(Z_ho, y_ho, params);
        if (score < best_score) {
            best_score = score;
            best_lambda = lam;
        }
    }
    return best_lambda;
}

// ---------------------------------------------------------------------------
// Full experiment state after training beta+.

struct PreparedExperiment {
    PreparedData data;
    Matrix Z_priv, Z_pub;
    LossSpec loss;
    ModelParams beta_plus;
    TrainReport train_report;
    std::vector<Eigen::Index> deletion_indices;
    std::optional<CurvatureOperator> oracle_cov;
};

inline std::vector<Eigen::Index> resolve_deletions(const DeletionSpec& spec, Eigen::Index n) {
    std::vector<Eigen::Index> idx;
    switch (spec.kind) {
        case DeletionSpec::Kind::all:
            for (Eigen::Index i = 0; i < n; ++i) idx.push_back(i);
            break;
        case DeletionSpec::Kind::first:
            if (spec.count > n) throw Error("deletions: count exceeds private rows");
            for (Eigen::Index i = 0; i < spec.count; ++i) idx.push_back(i);
            break;
        case DeletionSpec::Kind::indices:
            idx = spec.indices;
            std::sort(idx.begin(), idx.end());
            idx.erase(std::unique(idx.begin(), idx.end()), idx.end());
            for (auto i : idx)
                if (i < 0 || i >= n) throw Error("deletions: index out of range");
            break;
        case DeletionSpec::Kind::sample: {
            if (spec.count > n) throw Error("deletions: count exceeds private rows");
            Rng rng(spec.seed);
            const auto perm = rng.permutation(static_cast<std::size_t>(n));
            idx.assign(perm.begin(), perm.begin() + spec.count);
            std::sort(idx.begin(), idx.end());
            break;
        }
    }
    if (idx.empty()) throw Error("deletions: empty deletion set");
    return idx;
}

inline PreparedExperiment prepare_experiment(const ExperimentConfig& cfg) {
    PreparedExperiment X;
    X.data = prepare_data(cfg);

    X.loss.kind = cfg.loss.kind;
    X.loss.classes = cfg.loss.kind == LossKind::softmax_ce
                         ? (cfg.loss.classes > 0 ? cfg.loss.classes : X.data.full.classes)
                         : 0;
    X.Z_priv = embed_rows(X.data.emb, X.data.priv.features);
    X.Z_pub = embed_rows(X.data.emb, X.data.pub.features);

    if (cfg.loss.lambda) {
        X.loss.lambda = *cfg.loss.lambda;
    } else {
        X.loss.lambda = grid_search_lambda(X.Z_priv, X.data.priv.targets, X.loss, cfg.trainer,
                                           cfg.seed ^ 0x6c616d626461ULL);
    }
    X.loss.validate();

    auto [bp, report] = train(X.Z_priv, X.data.priv.targets, X.loss, cfg.trainer);
    if (!report.converged)
        throw Error("train stage", "beta+ did not converge (gradient max-norm " +
                                       format_double(report.grad_max_norm, 3) + ")");
    X.beta_plus = std::move(bp);
    X.beta_plus.embedding_hash = embedding_digest(X.data.emb);
    X.train_report = report;

    X.deletion_indices = resolve_deletions(cfg.deletions, X.data.priv.n());
    if (cfg.assume_known_lambda)
        X.oracle_cov = exact_covariance(X.Z_priv, X.loss.lambda);
    return X;
}

// ---------------------------------------------------------------------------
// Per-deletion work item.

struct ItemOutput {
    std::vector<SimilarityRecord> records;
    std::vector<std::pair<std::string, Vector>> reconstructions;  // method -> x_tilde
};

namespace detail {

inline ItemOutput process_deletion(const PreparedExperiment& X, const ExperimentConfig& cfg,
                                   Eigen::Index del_index, const Vector& avg_guess) {
    ItemOutput out;
    const Vector x_true = X.data.priv.features.row(del_index).transpose();
    const double y_true = X.data.priv.targets[del_index];
    const bool classification = X.data.priv.task != Task::regression;

    auto [beta_minus, report] =
        unlearn_exact_embedded(X.Z_priv, X.data.priv.targets, del_index, X.loss, cfg.trainer);

    for (const auto& method : cfg.methods) {
        SimilarityRecord rec;
        rec.index = del_index;
        rec.method = method;
        rec.y_true = y_true;
        Vector x_hat;

        if (method == "hrec") {
            if (!report.converged) rec.flags.push_back("not_converged");
            AttackOptions opts;
            if (X.oracle_cov) opts.curvature_override = &*X.oracle_cov;
            try {
                Reconstruction r = generalized_attack(X.beta_plus.weights, beta_minus.weights,
                                                      X.data.pub.features, X.data.pub.targets,
                                                      X.loss, X.data.emb, &X.Z_pub, opts);
                x_hat = r.x_tilde;
                rec.y_hat = r.y_hat;
                rec.scale = r.scale;
                if (X.data.emb.kind == Embedding::Kind::rff)
                    rec.inversion_residual = r.inversion_residual;
                for (auto& f : r.flags) rec.flags.push_back(std::move(f));
            } catch (const NoUpdateError&) {
                rec.flags.push_back("no_update");
                x_hat = Vector::Zero(x_true.size());
            } catch (const Error& e) {
                rec.flags.push_back(std::string("attack_error: ") + e.what());
                x_hat = Vector::Zero(x_true.size());
            }
        } else if (method == "avg") {
            x_hat = avg_guess;
        } else if (method == "maxdiff") {
            x_hat = maxdiff_baseline(X.data.pub.features, X.beta_plus.weights,
                                     beta_minus.weights, X.data.emb, &X.Z_pub)
                        .x;
        } else {
            throw Error("unknown method '" + method + "'");
        }

        bool degenerate = false;
        rec.cosine = cosine_similarity(x_hat, x_true, &degenerate);
        if (degenerate) rec.flags.push_back("zero_norm_cosine");
        if (classification && rec.y_hat)
            rec.label_correct = *rec.y_hat == static_cast<int>(y_true);
        out.reconstructions.emplace_back(method, x_hat);
        out.records.push_back(std::move(rec));
    }
    return out;
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Reconstruction sidecar file (consumed by montage).
//
// Layout: magic "UARC" | u16 version | u64 d | u64 count
//         | count x { u64 deletion index | u32 method len | method bytes
//                     | d doubles }

inline void write_reconstructions(const std::vector<ItemOutput>& items,
                                  const std::vector<Eigen::Index>& deletions, Eigen::Index d,
                                  const std::string& path) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw Error("cannot write reconstruction file '" + path + "'");
    os.write("UARC", 4);
    io::write_le<std::uint16_t>(os, 1);
    io::write_le<std::uint64_t>(os, static_cast<std::uint64_t>(d));
    std::uint64_t count = 0;
    for (const auto& item : items) count += item.reconstructions.size();
    io::write_le<std::uint64_t>(os, count);
    for (std::size_t t = 0; t < items.size(); ++t) {
        for (const auto& [method, x] : items[t].reconstructions) {
            io::write_le<std::uint64_t>(os, static_cast<std::uint64_t>(deletions[t]));
            io::write_le<std::uint32_t>(os, static_cast<std::uint32_t>(method.size()));
            os.write(method.data(), static_cast<std::streamsize>(method.size()));
            for (Eigen::Index j = 0; j < x.size(); ++j) io::write_le<double>(os, x[j]);
        }
    }
}

struct ReconstructionFile {
    Eigen::Index d = 0;
    // (deletion index, method) -> x_tilde
    std::map<std::pair<Eigen::Index, std::string>, Vector> entries;
};

inline ReconstructionFile read_reconstructions(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw Error("cannot open reconstruction file '" + path + "'");
    char magic[4];
    is.read(magic, 4);
    if (!is || std::string(magic, 4) != "UARC") throw Error("bad reconstruction file magic");
    if (io::read_le<std::uint16_t>(is) != 1) throw Error("unsupported reconstruction version");
    ReconstructionFile out;
    out.d = static_cast<Eigen::Index>(io::read_le<std::uint64_t>(is));
    const auto count = io::read_le<std::uint64_t>(is);
    for (std::uint64_t r = 0; r < count; ++r) {
        const auto idx = static_cast<Eigen::Index>(io::read_le<std::uint64_t>(is));
        const auto len = io::read_le<std::uint32_t>(is);
        std::string method(len, '\0');
        is.read(method.data(), len);
        Vector x(out.d);
        for (Eigen::Index j = 0; j < out.d; ++j) x[j] = io::read_le<double>(is);
        out.entries[{idx, method}] = std::move(x);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Run: train beta+, sweep deletions (parallel work items, deterministic
// aggregation), attack, score, emit report.

struct RunResult {
    std::string config_digest;
    std::vector<SimilarityRecord> records;
    ReportPaths report;
    std::string reconstructions_path;
    double lambda_used = 0.0;
    int flagged_items = 0;
};

inline RunResult run_experiment(const ExperimentConfig& cfg) {
    {
        const auto diags = validate_config(cfg);
        if (!diags.empty()) {
            std::string msg = "invalid config:";
            for (const auto& d : diags) msg += "\n  " + d;
            throw Error("config stage", msg);
        }
    }
    PreparedExperiment X = prepare_experiment(cfg);
    const Vector avg_guess = avg_baseline(X.data.pub.features);

    const auto n_items = X.deletion_indices.size();
    std::vector<ItemOutput> items(n_items);
    std::atomic<std::size_t> next{0};
    std::atomic<int> hard_failures{0};
    std::vector<std::string> first_error(1);

    auto worker = [&]() {
        for (;;) {
            const std::size_t t = next.fetch_add(1);
            if (t >= n_items) return;
            try {
                items[t] = detail::process_deletion(X, cfg, X.deletion_indices[t], avg_guess);
            } catch (const std::exception& e) {
                // total item failure: emit flagged zero-cosine records so the
                // sweep stays complete
                ItemOutput out;
                for (const auto& method : cfg.methods) {
                    SimilarityRecord rec;
                    rec.index = X.deletion_indices[t];
                    rec.method = method;
                    rec.y_true = X.data.priv.targets[X.deletion_indices[t]];
                    rec.cosine = 0.0;
                    rec.flags.push_back(std::string("item_error: ") + e.what());
                    out.reconstructions.emplace_back(method,
                                                     Vector::Zero(X.data.priv.d()));
                    out.records.push_back(std::move(rec));
                }
                items[t] = std::move(out);
                hard_failures.fetch_add(1);
            }
        }
    };

    const int jobs = std::max(1, cfg.jobs);
    if (jobs == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (int j = 0; j < jobs - 1; ++j) pool.emplace_back(worker);
        worker();
        for (auto& th : pool) th.join();
    }

    // phi is fixed by the threat model: its content hash must match the one
    // taken before training
    if (embedding_digest(X.data.emb) != X.beta_plus.embedding_hash)
        throw Error("attack stage", "embedding changed during the experiment");

    RunResult result;
    result.config_digest = config_digest(cfg);
    result.lambda_used = X.loss.lambda;
    result.flagged_items = hard_failures.load();
    for (const auto& item : items)
        for (const auto& rec : item.records) result.records.push_back(rec);

    result.report = emit_report(result.records, cfg.output_dir, result.config_digest);
    if (cfg.keep_reconstructions) {
        result.reconstructions_path = cfg.output_dir + "/reconstructions.bin";
        write_reconstructions(items, X.deletion_indices, X.data.priv.d(),
                              result.reconstructions_path);
    }
    return result;
}

// ---------------------------------------------------------------------------
// Montage: one seeded deletion per label, rows original / HRec / MaxDiff.

struct MontageResult {
    std::string path;
    int columns = 0;
    std::vector<int> skipped_labels;
};

inline MontageResult make_montage(const ExperimentConfig& cfg, const std::string& out_path,
                                  std::uint64_t seed) {
    PreparedData data = prepare_data(cfg);
    if (!data.priv.image.present())
        throw Error("montage stage", "dataset is not an image dataset");

    const auto records = read_records(cfg.output_dir + "/records.jsonl");
    const auto recon = read_reconstructions(cfg.output_dir + "/reconstructions.bin");

    // deletions that have an hrec reconstruction, grouped by true label
    std::map<int, std::vector<Eigen::Index>> by_label;
    for (const auto& r : records.records)
        if (r.method == "hrec") by_label[static_cast<int>(r.y_true)].push_back(r.index);

    const int k = data.priv.classes;
    const int H = data.priv.image.rows, W = data.priv.image.cols, C = data.priv.image.channels;
    std::vector<std::string> row_methods = {"original", "hrec", "maxdiff"};

    std::vector<Eigen::Index> picks;
    std::vector<int> labels_present;
    MontageResult result;
    Rng rng(seed);
    for (int label = 0; label < k; ++label) {
        auto it = by_label.find(label);
        if (it == by_label.end() || it->second.empty()) {
            result.skipped_labels.push_back(label);
            continue;
        }
        picks.push_back(it->second[rng.index(it->second.size())]);
        labels_present.push_back(label);
    }
    if (picks.empty()) throw Error("montage stage", "no labels with deletions to show");

    auto to_bytes = [&](const Vector& x) {
        std::vector<unsigned char> bytes(static_cast<std::size_t>(x.size()));
        for (Eigen::Index j = 0; j < x.size(); ++j) {
            const double raw = data.priv.norm_map ? data.priv.norm_map->inverse(x[j], j)
                                                  : (x[j] + 1.0) / 2.0 * 255.0;
            bytes[static_cast<std::size_t>(j)] =
                static_cast<unsigned char>(std::clamp(std::lround(raw), 0L, 255L));
        }
        return bytes;
    };

    const int cols = static_cast<int>(picks.size());
    const int rows = static_cast<int>(row_methods.size());
    std::vector<unsigned char> canvas(static_cast<std::size_t>(rows * H) * (cols * W) * C, 0);
    auto blit = [&](int row, int col, const std::vector<unsigned char>& img) {
        for (int r = 0; r < H; ++r)
            for (int c = 0; c < W * C; ++c)
                canvas[static_cast<std::size_t>(row * H + r) * (cols * W * C) +
                       static_cast<std::size_t>(col * W * C + c)] =
                    img[static_cast<std::size_t>(r) * (W * C) + static_cast<std::size_t>(c)];
    };

    for (int col = 0; col < cols; ++col) {
        const Eigen::Index idx = picks[static_cast<std::size_t>(col)];
        blit(0, col, to_bytes(data.priv.features.row(idx).transpose()));
        for (int row = 1; row < rows; ++row) {
            const auto key = std::make_pair(idx, row_methods[static_cast<std::size_t>(row)]);
            auto it = recon.entries.find(key);
            if (it != recon.entries.end()) blit(row, col, to_bytes(it->second));
        }
    }
    write_pnm(out_path, canvas, rows * H, cols * W, C);
    result.path = out_path;
    result.columns = cols;
    return result;
}

}  // namespace unrec
