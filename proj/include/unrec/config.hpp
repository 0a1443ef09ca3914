#pragma once

#include "unrec/common.hpp"
#include "unrec/dataset.hpp"
#include "unrec/loss.hpp"
#include "unrec/model.hpp"

#include <json.hpp>

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

namespace unrec {

struct DatasetSource {
    enum class Kind { csv, idx, synthetic };
    Kind kind = Kind::synthetic;
    // csv
    std::string path;
    std::string target_column;
    Task task = Task::regression;
    // idx
    std::string images_path;
    std::string labels_path;
    // synthetic
    SyntheticSpec synth;
};

struct EmbeddingSpec {
    enum class Kind { identity, rff };
    Kind kind = Kind::identity;
    Eigen::Index output_dim = 0;        // rff only, includes the bias coordinate
    std::optional<double> gamma;        // absent -> median heuristic
    std::uint64_t seed = 0;
};

struct LossConfig {
    LossKind kind = LossKind::ridge;
    std::optional<double> lambda;  // absent -> grid search on a private holdout
    int classes = 0;               // softmax; 0 -> taken from the dataset
};

struct DeletionSpec {
    enum class Kind { all, first, indices, sample };
    Kind kind = Kind::all;
    Eigen::Index count = 0;
    std::vector<Eigen::Index> indices;
    std::uint64_t seed = 0;
};

struct ExperimentConfig {
    DatasetSource dataset;
    std::string normalize = "auto";  // auto | on | off
    SplitSpec split;
    EmbeddingSpec embedding;
    LossConfig loss;
    DeletionSpec deletions;
    std::vector<std::string> methods = {"hrec", "avg", "maxdiff"};
    bool assume_known_lambda = false;  // oracle mode: true C with lambda folded in
    std::string output_dir = "out";
    int jobs = 1;
    std::uint64_t seed = 0;
    bool keep_reconstructions = true;
    TrainOptions trainer;
};

namespace detail {

inline std::uint64_t get_seed(const nlohmann::json& j, const char* key, std::uint64_t dflt = 0) {
    return j.contains(key) ? j.at(key).get<std::uint64_t>() : dflt;
}

}  // namespace detail

inline ExperimentConfig config_from_json(const nlohmann::json& j) {
    ExperimentConfig cfg;

    const auto& d = j.at("dataset");
    const std::string dkind = d.at("kind").get<std::string>();
    if (dkind == "csv") {
        cfg.dataset.kind = DatasetSource::Kind::csv;
        cfg.dataset.path = d.at("path").get<std::string>();
        cfg.dataset.target_column = d.at("target").get<std::string>();
        cfg.dataset.task = task_from_name(d.at("task").get<std::string>());
    } else if (dkind == "idx") {
        cfg.dataset.kind = DatasetSource::Kind::idx;
        cfg.dataset.images_path = d.at("images").get<std::string>();
        cfg.dataset.labels_path = d.at("labels").get<std::string>();
        cfg.dataset.task = Task::multiclass;
    } else if (dkind == "synthetic") {
        cfg.dataset.kind = DatasetSource::Kind::synthetic;
        cfg.dataset.synth.n = d.at("n").get<Eigen::Index>();
        cfg.dataset.synth.d = d.at("d").get<Eigen::Index>();
        cfg.dataset.synth.task = task_from_name(d.at("task").get<std::string>());
        cfg.dataset.synth.noise_std = d.value("noise_std", 0.0);
        cfg.dataset.synth.seed = detail::get_seed(d, "seed");
        cfg.dataset.synth.classes = d.value("classes", 3);
        cfg.dataset.task = cfg.dataset.synth.task;
    } else {
        throw Error("dataset.kind must be csv, idx or synthetic (got '" + dkind + "')");
    }

    if (j.contains("normalize")) {
        if (j.at("normalize").is_boolean())
            cfg.normalize = j.at("normalize").get<bool>() ? "on" : "off";
        else
            cfg.normalize = j.at("normalize").get<std::string>();
    }

    if (j.contains("split")) {
        cfg.split.public_fraction = j.at("split").value("public_fraction", 0.5);
        cfg.split.seed = detail::get_seed(j.at("split"), "seed");
    }

    if (j.contains("embedding")) {
        const auto& e = j.at("embedding");
        const std::string ekind = e.at("kind").get<std::string>();
        if (ekind == "identity") {
            cfg.embedding.kind = EmbeddingSpec::Kind::identity;
        } else if (ekind == "rff") {
            cfg.embedding.kind = EmbeddingSpec::Kind::rff;
            cfg.embedding.output_dim = e.at("output_dim").get<Eigen::Index>();
            if (e.contains("gamma") && !e.at("gamma").is_string())
                cfg.embedding.gamma = e.at("gamma").get<double>();
            cfg.embedding.seed = detail::get_seed(e, "seed");
        } else {
            throw Error("embedding.kind must be identity or rff (got '" + ekind + "')");
        }
    }

    const auto& l = j.at("loss");
    cfg.loss.kind = loss_from_name(l.at("kind").get<std::string>());
    if (l.contains("lambda") && !l.at("lambda").is_string())
        cfg.loss.lambda = l.at("lambda").get<double>();
    cfg.loss.classes = l.value("classes", 0);

    if (j.contains("deletions")) {
        const auto& del = j.at("deletions");
        const std::string kind = del.at("kind").get<std::string>();
        if (kind == "all") {
            cfg.deletions.kind = DeletionSpec::Kind::all;
        } else if (kind == "first") {
            cfg.deletions.kind = DeletionSpec::Kind::first;
            cfg.deletions.count = del.at("count").get<Eigen::Index>();
        } else if (kind == "indices") {
            cfg.deletions.kind = DeletionSpec::Kind::indices;
            for (const auto& v : del.at("indices")) cfg.deletions.indices.push_back(v.get<Eigen::Index>());
        } else if (kind == "sample") {
            cfg.deletions.kind = DeletionSpec::Kind::sample;
            cfg.deletions.count = del.at("count").get<Eigen::Index>();
            cfg.deletions.seed = detail::get_seed(del, "seed");
        } else {
            throw Error("deletions.kind must be all, first, indices or sample");
        }
    }

    if (j.contains("methods")) {
        cfg.methods.clear();
        for (const auto& m : j.at("methods")) cfg.methods.push_back(m.get<std::string>());
    }
    if (j.contains("attack"))
        cfg.assume_known_lambda = j.at("attack").value("assume_known_lambda", false);
    cfg.output_dir = j.value("output_dir", std::string("out"));
    cfg.jobs = j.value("jobs", 1);
    cfg.seed = detail::get_seed(j, "seed");
    cfg.keep_reconstructions = j.value("keep_reconstructions", true);
    if (j.contains("trainer")) {
        cfg.trainer.tolerance = j.at("trainer").value("tolerance", 1e-9);
        cfg.trainer.max_iterations = j.at("trainer").value("max_iterations", 500);
    }
    return cfg;
}

// Canonical JSON form; nlohmann::json orders object keys, so the dump is a
// stable digest input.
inline nlohmann::json config_to_json(const ExperimentConfig& cfg) {
    nlohmann::json j;
    switch (cfg.dataset.kind) {
        case DatasetSource::Kind::csv:
            j["dataset"] = {{"kind", "csv"},
                            {"path", cfg.dataset.path},
                            {"target", cfg.dataset.target_column},
                            {"task", task_name(cfg.dataset.task)}};
            break;
        case DatasetSource::Kind::idx:
            j["dataset"] = {{"kind", "idx"},
                            {"images", cfg.dataset.images_path},
                            {"labels", cfg.dataset.labels_path}};
            break;
        case DatasetSource::Kind::synthetic:
            j["dataset"] = {{"kind", "synthetic"},
                            {"n", cfg.dataset.synth.n},
                            {"d", cfg.dataset.synth.d},
                            {"task", task_name(cfg.dataset.synth.task)},
                            {"noise_std", cfg.dataset.synth.noise_std},
                            {"seed", cfg.dataset.synth.seed},
                            {"classes", cfg.dataset.synth.classes}};
            break;
    }
    j["normalize"] = cfg.normalize;
    j["split"] = {{"public_fraction", cfg.split.public_fraction}, {"seed", cfg.split.seed}};
    if (cfg.embedding.kind == EmbeddingSpec::Kind::identity) {
        j["embedding"] = {{"kind", "identity"}};
    } else {
        j["embedding"] = {{"kind", "rff"},
                          {"output_dim", cfg.embedding.output_dim},
                          {"seed", cfg.embedding.seed}};
        if (cfg.embedding.gamma) j["embedding"]["gamma"] = *cfg.embedding.gamma;
        else j["embedding"]["gamma"] = "median";
    }
    j["loss"] = {{"kind", loss_name(cfg.loss.kind)}, {"classes", cfg.loss.classes}};
    if (cfg.loss.lambda) j["loss"]["lambda"] = *cfg.loss.lambda;
    else j["loss"]["lambda"] = "grid";
    switch (cfg.deletions.kind) {
        case DeletionSpec::Kind::all: j["deletions"] = {{"kind", "all"}}; break;
        case DeletionSpec::Kind::first:
            j["deletions"] = {{"kind", "first"}, {"count", cfg.deletions.count}};
            break;
        case DeletionSpec::Kind::indices:
            j["deletions"] = {{"kind", "indices"}, {"indices", cfg.deletions.indices}};
            break;
        case DeletionSpec::Kind::sample:
            j["deletions"] = {{"kind", "sample"},
                              {"count", cfg.deletions.count},
                              {"seed", cfg.deletions.seed}};
            break;
    }
    j["methods"] = cfg.methods;
    j["attack"] = {{"assume_known_lambda", cfg.assume_known_lambda}};
    j["output_dir"] = cfg.output_dir;
    j["jobs"] = cfg.jobs;
    j["seed"] = cfg.seed;
    j["keep_reconstructions"] = cfg.keep_reconstructions;
    j["trainer"] = {{"tolerance", cfg.trainer.tolerance},
                    {"max_iterations", cfg.trainer.max_iterations}};
    return j;
}

// Digest covers everything except the output location and parallelism degree,
// so replays into different directories compare equal.
inline std::string config_digest(const ExperimentConfig& cfg) {
    nlohmann::json j = config_to_json(cfg);
    j.erase("output_dir");
    j.erase("jobs");
    Fnv1a h;
    h.update(j.dump());
    return h.hex();
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw Error("cannot open config file '" + path + "'");
    nlohmann::json j;
    try {
        is >> j;
    } catch (const nlohmann::json::exception& e) {
        throw Error("config parse error in '" + path + "': " + e.what());
    }
    try {
        return config_from_json(j);
    } catch (const nlohmann::json::exception& e) {
        throw Error("config schema error in '" + path + "': " + e.what());
    }
}

// Schema/path/consistency diagnostics; no side effects. Empty list = valid.
inline std::vector<std::string> validate_config(const ExperimentConfig& cfg) {
    std::vector<std::string> diags;
    auto check = [&](bool ok, const std::string& field, const std::string& msg) {
        if (!ok) diags.push_back(field + ": " + msg);
    };

    switch (cfg.dataset.kind) {
        case DatasetSource::Kind::csv:
            check(std::filesystem::exists(cfg.dataset.path), "dataset.path",
                  "file '" + cfg.dataset.path + "' does not exist");
            check(!cfg.dataset.target_column.empty(), "dataset.target", "must be nonempty");
            break;
        case DatasetSource::Kind::idx:
            check(std::filesystem::exists(cfg.dataset.images_path), "dataset.images",
                  "file '" + cfg.dataset.images_path + "' does not exist");
            check(std::filesystem::exists(cfg.dataset.labels_path), "dataset.labels",
                  "file '" + cfg.dataset.labels_path + "' does not exist");
            break;
        case DatasetSource::Kind::synthetic:
            check(cfg.dataset.synth.n >= 2, "dataset.n", "must be at least 2");
            check(cfg.dataset.synth.d >= 1, "dataset.d", "must be at least 1");
            check(cfg.dataset.synth.noise_std >= 0.0, "dataset.noise_std", "must be nonnegative");
            if (cfg.dataset.synth.task == Task::multiclass)
                check(cfg.dataset.synth.classes >= 2, "dataset.classes", "must be at least 2");
            break;
    }
    check(cfg.normalize == "auto" || cfg.normalize == "on" || cfg.normalize == "off",
          "normalize", "must be auto, on or off");
    check(cfg.split.public_fraction > 0.0 && cfg.split.public_fraction < 1.0,
          "split.public_fraction", "must lie in (0,1)");
    if (cfg.embedding.kind == EmbeddingSpec::Kind::rff) {
        check(cfg.embedding.output_dim >= 2, "embedding.output_dim", "must be at least 2");
        if (cfg.embedding.gamma) check(*cfg.embedding.gamma > 0.0, "embedding.gamma",
                                       "must be positive");
    }
    if (cfg.loss.lambda) check(*cfg.loss.lambda >= 0.0, "loss.lambda", "must be nonnegative");
    const bool classification_loss = cfg.loss.kind != LossKind::ridge;
    if (classification_loss)
        check(cfg.dataset.task != Task::regression, "loss.kind",
              "classification loss on a regression dataset");
    if (cfg.loss.kind == LossKind::logistic || cfg.loss.kind == LossKind::svm_squared_hinge)
        check(cfg.dataset.task == Task::binary, "loss.kind", "binary loss needs a binary task");

    switch (cfg.deletions.kind) {
        case DeletionSpec::Kind::first:
        case DeletionSpec::Kind::sample:
            check(cfg.deletions.count >= 1, "deletions.count", "must be at least 1");
            break;
        case DeletionSpec::Kind::indices:
            check(!cfg.deletions.indices.empty(), "deletions.indices", "must be nonempty");
            break;
        default:
            break;
    }
    check(!cfg.methods.empty(), "methods", "must name at least one method");
    for (const auto& m : cfg.methods)
        check(m == "hrec" || m == "avg" || m == "maxdiff", "methods",
              "unknown method '" + m + "'");
    check(cfg.jobs >= 1, "jobs", "must be at least 1");
    check(cfg.trainer.tolerance > 0.0, "trainer.tolerance", "must be positive");
    check(cfg.trainer.max_iterations >= 1, "trainer.max_iterations", "must be at least 1");
    return diags;
}

}  // namespace unrec
