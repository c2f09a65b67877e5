#pragma once

// Synthetic multi-task testbed: Gaussian class clusters seen through a
// per-task rotation, an MLP base pre-trained on the task mixture, experts
// fine-tuned per task (full or low-rank), a joint data-mixing baseline, and
// accuracy / retention reports.

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "consolidate/checkpoint.hpp"
#include "consolidate/io.hpp"
#include "consolidate/linalg.hpp"
#include "consolidate/merge.hpp"
#include "consolidate/network.hpp"
#include "consolidate/parallel.hpp"
#include "consolidate/random.hpp"

namespace consolidate {

struct TaskSpec {
    std::size_t n_tasks = 3;
    std::size_t input_dim = 16;
    std::size_t n_classes = 4;
    double noise = 0.35;
    double similarity = 0.0;
    std::uint64_t seed = 0;
};

struct SplitSizes {
    std::size_t train = 512;
    std::size_t calibration = 64;
    std::size_t eval = 256;
};

struct Dataset {
    Matrix inputs;  // n x d
    std::optional<std::vector<int>> labels;
    std::string task_id;

    std::size_t size() const noexcept { return inputs.rows; }

    std::span<const int> label_span() const {
        if (!labels) fail(ErrorCode::data, "dataset '" + task_id + "' has no labels");
        return *labels;
    }

    void validate(std::size_t n_classes) const {
        if (labels && labels->size() != inputs.rows)
            fail(ErrorCode::data, "dataset '" + task_id + "' has " + std::to_string(labels->size()) + " labels for " +
                                      std::to_string(inputs.rows) + " inputs");
        if (labels)
            for (int y : *labels)
                if (y < 0 || static_cast<std::size_t>(y) >= n_classes)
                    fail(ErrorCode::data, "dataset '" + task_id + "' has label " + std::to_string(y) + " out of range");
    }
};

struct TaskData {
    std::string id;
    Matrix rotation;  // d x d, orthogonal
    Dataset train;
    Dataset calibration;  // unlabeled
    Dataset eval;
};

struct TaskSuite {
    TaskSpec spec;
    Matrix class_means;  // K x d, shared by every task
    std::vector<TaskData> tasks;

    std::vector<Dataset> train_sets() const { return collect(&TaskData::train); }
    std::vector<Dataset> eval_sets() const { return collect(&TaskData::eval); }

private:
    std::vector<Dataset> collect(Dataset TaskData::*split) const {
        std::vector<Dataset> out;
        for (const auto& t : tasks) out.push_back(t.*split);
        return out;
    }
};

inline std::string task_name(std::size_t t) { return "task" + std::to_string(t); }

/// Uniformly random proper rotation: the polar factor of a Gaussian matrix,
/// with the first column negated when the determinant is −1. Keeping every
/// rotation in SO(d) matters for interpolation: the sum of a proper and an
/// improper rotation is always singular.
inline Matrix random_rotation(Rng& rng, std::size_t d) {
    Matrix q = polar_factor(gaussian_matrix(rng, d, d));
    if (determinant(q) < 0.0)
        for (std::size_t i = 0; i < d; ++i) q(i, 0) = -q(i, 0);
    return q;
}

/// Angle between two rotations, arccos(tr(AᵀB)/d).
inline double rotation_distance(const Matrix& a, const Matrix& b) {
    double tr = 0.0;
    for (std::size_t i = 0; i < a.values.size(); ++i) tr += a.values[i] * b.values[i];
    return std::acos(std::clamp(tr / static_cast<double>(a.rows), -1.0, 1.0));
}

namespace detail {

inline Dataset sample_split(const TaskSpec& spec, const Matrix& rotation, const Matrix& means, std::size_t n,
                            const std::string& task_id, std::string_view split, std::size_t t, bool keep_labels) {
    Rng rng = Rng::keyed(spec.seed, "data", t, split);
    std::vector<int> labels;
    for (std::size_t c = 0; c < spec.n_classes; ++c) {
        const std::size_t count = n / spec.n_classes + (c < n % spec.n_classes ? 1 : 0);
        labels.insert(labels.end(), count, static_cast<int>(c));
    }
    rng.shuffle(labels);
    const std::size_t d = spec.input_dim;
    Matrix x(n, d);
    std::vector<double> z(d);
    for (std::size_t i = 0; i < n; ++i) {
        const auto y = static_cast<std::size_t>(labels[i]);
        for (std::size_t k = 0; k < d; ++k) z[k] = means(y, k) + spec.noise * rng.normal();
        for (std::size_t r = 0; r < d; ++r) {
            double acc = 0.0;
            for (std::size_t k = 0; k < d; ++k) acc += rotation(r, k) * z[k];
            x(i, r) = acc;
        }
    }
    Dataset out{std::move(x), std::nullopt, task_id};
    if (keep_labels) out.labels = std::move(labels);
    return out;
}

}  // namespace detail

/// Class means are drawn once per seed with every pair at least 2σ apart.
/// Task rotations interpolate between one shared rotation (similarity 1) and
/// independent ones (similarity 0).
inline TaskSuite gen_tasks(const TaskSpec& spec, const SplitSizes& sizes = {}) {
    if (!(spec.similarity >= 0.0 && spec.similarity <= 1.0))
        fail(ErrorCode::validation, "similarity must lie in [0, 1]");
    if (spec.n_tasks == 0 || spec.input_dim == 0 || spec.n_classes < 2)
        fail(ErrorCode::validation, "task spec needs at least one task, one input and two classes");
    const std::size_t d = spec.input_dim;
    TaskSuite suite{spec, Matrix(spec.n_classes, d), {}};

    Rng mean_rng = Rng::keyed(spec.seed, "means");
    for (bool separated = false; !separated;) {
        suite.class_means = gaussian_matrix(mean_rng, spec.n_classes, d, 0.5);
        separated = true;
        for (std::size_t a = 0; a < spec.n_classes; ++a)
            for (std::size_t b = a + 1; b < spec.n_classes; ++b) {
                double sq = 0.0;
                for (std::size_t k = 0; k < d; ++k) sq += std::pow(suite.class_means(a, k) - suite.class_means(b, k), 2);
                if (std::sqrt(sq) < 2.0 * spec.noise) separated = false;
            }
    }

    Rng shared_rng = Rng::keyed(spec.seed, "rotation-shared");
    const Matrix shared = random_rotation(shared_rng, d);
    for (std::size_t t = 0; t < spec.n_tasks; ++t) {
        Rng rng = Rng::keyed(spec.seed, "rotation", t);
        const Matrix own = random_rotation(rng, d);
        Matrix rotation = shared;
        if (spec.similarity < 1.0) {
            const Matrix mix = shared * spec.similarity + own * (1.0 - spec.similarity);
            if (numerical_rank(svd(mix).s) < d) fail(ErrorCode::degenerate, "rotation interpolation is singular");
            rotation = polar_factor(mix);
        }
        TaskData task;
        task.id = task_name(t);
        task.train = detail::sample_split(spec, rotation, suite.class_means, sizes.train, task.id, "train", t, true);
        task.calibration =
            detail::sample_split(spec, rotation, suite.class_means, sizes.calibration, task.id, "calibration", t, false);
        task.eval = detail::sample_split(spec, rotation, suite.class_means, sizes.eval, task.id, "eval", t, true);
        task.rotation = std::move(rotation);
        suite.tasks.push_back(std::move(task));
    }
    return suite;
}

inline Checkpoint dataset_to_checkpoint(const Dataset& data) {
    Checkpoint c;
    c.kind = CheckpointKind::dataset;
    c.source_tag = data.task_id;
    c.manifest.layer_count = 1;
    c.manifest.entries.push_back({"inputs", {data.inputs.rows, data.inputs.cols}, Role::inputs, 1, {}});
    c.tensors.emplace("inputs", data.inputs.to_tensor());
    if (data.labels) {
        c.manifest.entries.push_back({"labels", {data.labels->size()}, Role::labels, 1, {}});
        std::vector<float> y(data.labels->begin(), data.labels->end());
        c.tensors.emplace("labels", Tensor::vector(std::move(y)));
    }
    return c;
}

inline Dataset dataset_from_checkpoint(const Checkpoint& c) {
    if (c.kind != CheckpointKind::dataset)
        fail(ErrorCode::format, "expected a dataset file, got kind '" + std::string(to_string(c.kind)) + "'");
    Dataset d{Matrix::from_tensor(c.at("inputs")), std::nullopt, c.source_tag};
    if (c.manifest.find("labels")) {
        const Tensor& y = c.at("labels");
        if (y.rank() != 1 || y.size() != d.inputs.rows)
            fail(ErrorCode::data, "dataset '" + c.source_tag + "' labels do not match its inputs");
        std::vector<int> labels;
        for (float v : y.data()) {
            if (v != std::floor(v) || v < 0.0f) fail(ErrorCode::data, "dataset '" + c.source_tag + "' has a non-integer label");
            labels.push_back(static_cast<int>(v));
        }
        d.labels = std::move(labels);
    }
    return d;
}

inline void write_dataset(const Dataset& d, const std::filesystem::path& path) { write_checkpoint(dataset_to_checkpoint(d), path); }
inline Dataset read_dataset(const std::filesystem::path& path) { return dataset_from_checkpoint(read_checkpoint(path)); }

inline CalibrationSet to_calibration(const Dataset& d, std::uint64_t seed = 0) {
    return CalibrationSet{d.inputs, std::nullopt, d.task_id, seed};
}

enum class TrainMode { full, lowrank };

struct TrainOptions {
    std::size_t steps = 500;
    double lr = 0.05;
    std::size_t batch = 32;
    TrainMode mode = TrainMode::full;
    LowRankConfig lowrank{};
};

/// Adds zero-effect low-rank factors (b = 0, a Gaussian / √in) to every weight.
inline Checkpoint attach_lowrank(const Checkpoint& dense, const LowRankConfig& cfg, Rng& rng) {
    if (cfg.rank == 0) fail(ErrorCode::validation, "low-rank rank must be positive");
    Checkpoint c = dense;
    c.manifest.lowrank = cfg;
    for (const auto& e : dense.manifest.entries) {
        if (!is_weight_matrix(e.role)) continue;
        const std::size_t out = e.shape[0], in = e.shape[1];
        const std::string a = e.name + ".lora_a", b = e.name + ".lora_b";
        c.manifest.entries.push_back({a, {cfg.rank, in}, Role::lowrank_a, e.depth, e.name});
        c.manifest.entries.push_back({b, {out, cfg.rank}, Role::lowrank_b, e.depth, e.name});
        c.tensors.emplace(a, gaussian_matrix(rng, cfg.rank, in, 1.0 / std::sqrt(static_cast<double>(in))).to_tensor());
        c.tensors.emplace(b, Tensor({out, cfg.rank}));
    }
    c.manifest.validate();
    return c;
}

inline Matrix select_rows(const Matrix& x, std::span<const std::size_t> rows) {
    Matrix out(rows.size(), x.cols);
    for (std::size_t i = 0; i < rows.size(); ++i) std::copy_n(x.row(rows[i]).begin(), x.cols, out.values.begin() + static_cast<std::ptrdiff_t>(i * x.cols));
    return out;
}

inline double dataset_loss(const Checkpoint& model, const Dataset& data) {
    const Network net = Network::from_checkpoint(model);
    return cross_entropy(forward(net, data.inputs), data.label_span()).first;
}

namespace detail {

/// SGD over shuffled epochs. Full mode updates every dense parameter;
/// low-rank mode updates only the factor pairs.
inline void sgd(Network& net, const Dataset& data, const TrainOptions& opt, Rng& rng) {
    const auto labels = data.label_span();
    if (data.size() == 0) fail(ErrorCode::data, "dataset '" + data.task_id + "' is empty");
    std::vector<std::size_t> order(data.size());
    std::size_t cursor = order.size();
    std::vector<std::size_t> batch;
    std::vector<int> batch_labels;
    for (std::size_t step = 0; step < opt.steps; ++step) {
        batch.clear();
        batch_labels.clear();
        while (batch.size() < std::min(opt.batch, data.size())) {
            if (cursor == order.size()) {
                for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
                rng.shuffle(order);
                cursor = 0;
            }
            batch.push_back(order[cursor]);
            batch_labels.push_back(labels[order[cursor]]);
            ++cursor;
        }
        const ForwardCache cache = forward(net, select_rows(data.inputs, batch));
        auto [loss, dz] = cross_entropy(cache, batch_labels);
        if (!std::isfinite(loss))
            fail(ErrorCode::divergence, "training on '" + data.task_id + "' diverged at step " + std::to_string(step));
        const Gradients g = backward(net, cache, std::move(dz));
        for (std::size_t l = 0; l < net.layers.size(); ++l) {
            auto& layer = net.layers[l];
            if (opt.mode == TrainMode::full) {
                for (std::size_t k = 0; k < layer.weight.values.size(); ++k) layer.weight.values[k] -= opt.lr * g.weight[l].values[k];
                for (std::size_t k = 0; k < layer.bias.size(); ++k) layer.bias[k] -= opt.lr * g.bias[l][k];
            } else if (layer.lowrank) {
                for (std::size_t k = 0; k < layer.lowrank->a.values.size(); ++k)
                    layer.lowrank->a.values[k] -= opt.lr * g.lowrank_a[l]->values[k];
                for (std::size_t k = 0; k < layer.lowrank->b.values.size(); ++k)
                    layer.lowrank->b.values[k] -= opt.lr * g.lowrank_b[l]->values[k];
            }
        }
    }
}

inline void check_finite_model(const Checkpoint& c, const std::string& what) {
    for (const auto& [name, t] : c.tensors)
        if (!t.all_finite()) fail(ErrorCode::divergence, what + ": tensor '" + name + "' is not finite after training");
}

}  // namespace detail

/// Fine-tunes `model` on `data`. The returned checkpoint has kind expert and
/// the task id as its source tag.
inline Checkpoint train(const Checkpoint& model, const Dataset& data, const TrainOptions& opt, std::uint64_t seed) {
    Checkpoint start = model;
    if (opt.mode == TrainMode::full) {
        start = materialize_lowrank(model);
    } else if (!model.is_lowrank()) {
        Rng init = Rng::keyed(seed, "lowrank-init", 0, data.task_id);
        start = attach_lowrank(model, opt.lowrank, init);
    }
    Network net = Network::from_checkpoint(start);
    if (data.inputs.cols != net.input_dim())
        fail(ErrorCode::shape, "dataset '" + data.task_id + "' has input dimension " + std::to_string(data.inputs.cols) +
                                   ", model expects " + std::to_string(net.input_dim()));
    data.validate(net.output_dim());
    Rng rng = Rng::keyed(seed, "train", 0, data.task_id);
    detail::sgd(net, data, opt, rng);
    Checkpoint out = net.to_checkpoint(start);
    out.kind = CheckpointKind::expert;
    out.source_tag = data.task_id;
    detail::check_finite_model(out, "training on '" + data.task_id + "'");
    return out;
}

inline Dataset concatenate(std::span<const Dataset> sets, std::string task_id) {
    if (sets.empty()) fail(ErrorCode::data, "no datasets to concatenate");
    Dataset out{Matrix(0, sets.front().inputs.cols), std::vector<int>{}, std::move(task_id)};
    for (const auto& s : sets) {
        if (s.inputs.cols != out.inputs.cols) fail(ErrorCode::shape, "datasets differ in input dimension");
        out.inputs.values.insert(out.inputs.values.end(), s.inputs.values.begin(), s.inputs.values.end());
        out.inputs.rows += s.inputs.rows;
        const auto y = s.label_span();
        out.labels->insert(out.labels->end(), y.begin(), y.end());
    }
    return out;
}

/// Data-mixing baseline: training on the shuffled union of every task. The
/// `ordered` ablation instead trains on each task in turn, splitting the
/// step budget evenly.
inline Checkpoint train_joint(const Checkpoint& base, std::span<const Dataset> sets, const TrainOptions& opt,
                              std::uint64_t seed, bool ordered = false) {
    Checkpoint out;
    if (ordered) {
        out = base;
        TrainOptions each = opt;
        each.steps = opt.steps / sets.size();
        for (const auto& s : sets) out = train(out, s, each, seed);
    } else {
        Dataset all = concatenate(sets, "joint");
        std::vector<std::size_t> order(all.size());
        for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
        Rng shuffle_rng = Rng::keyed(seed, "joint-shuffle");
        shuffle_rng.shuffle(order);
        Dataset shuffled{select_rows(all.inputs, order), std::vector<int>(order.size()), "joint"};
        for (std::size_t i = 0; i < order.size(); ++i) (*shuffled.labels)[i] = (*all.labels)[order[i]];
        out = train(base, shuffled, opt, seed);
    }
    out.kind = CheckpointKind::joint;
    out.source_tag = "joint";
    return out;
}

inline constexpr std::size_t kPretrainSteps = 100;

/// Scaled-Gaussian initialization followed by a short pre-training run on an
/// equal mixture of the given tasks.
inline Checkpoint init_base(std::uint64_t seed, const MlpArch& arch, std::span<const Dataset> mixture) {
    Checkpoint c;
    c.manifest = mlp_manifest(arch);
    c.kind = CheckpointKind::base;
    c.source_tag = "base";
    Rng rng = Rng::keyed(seed, "init");
    for (const auto& e : c.manifest.entries) {
        if (is_weight_matrix(e.role)) {
            const double scale = std::sqrt(2.0 / static_cast<double>(e.shape[1]));
            c.tensors.emplace(e.name, gaussian_matrix(rng, e.shape[0], e.shape[1], scale).to_tensor());
        } else {
            c.tensors.emplace(e.name, Tensor(e.shape));
        }
    }
    if (mixture.empty()) return c;
    Dataset all = concatenate(mixture, "mixture");
    Network net = Network::from_checkpoint(c);
    TrainOptions opt;
    opt.steps = kPretrainSteps;
    Rng train_rng = Rng::keyed(seed, "pretrain");
    detail::sgd(net, all, opt, train_rng);
    Checkpoint out = net.to_checkpoint(c);
    detail::check_finite_model(out, "base pre-training");
    return out;
}

struct TaskScore {
    std::string task;
    double accuracy = 0.0;
    std::optional<double> retention;
};

struct EvalReport {
    std::string model;
    std::vector<TaskScore> tasks;
    double mean_accuracy = 0.0;
    std::optional<double> mean_retention;

    const TaskScore* find(std::string_view task) const {
        for (const auto& t : tasks)
            if (t.task == task) return &t;
        return nullptr;
    }
};

inline double accuracy(const Network& net, const Dataset& data) {
    const auto labels = data.label_span();
    const auto pred = predict(net, data.inputs);
    std::size_t hits = 0;
    for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == labels[i];
    return static_cast<double>(hits) / static_cast<double>(pred.size());
}

/// Accuracy per eval set. With a reference report, retention is the ratio to
/// the reference accuracy on the same task, when that accuracy is positive.
inline EvalReport evaluate(const Checkpoint& model, std::span<const Dataset> eval, const EvalReport* reference = nullptr,
                           std::string tag = {}) {
    const Network net = Network::from_checkpoint(materialize_lowrank(model));
    EvalReport r{tag.empty() ? model.source_tag : std::move(tag), {}, 0.0, std::nullopt};
    double retention_sum = 0.0;
    std::size_t retention_count = 0;
    for (const auto& d : eval) {
        d.validate(net.output_dim());
        TaskScore s{d.task_id, accuracy(net, d), std::nullopt};
        if (reference) {
            const TaskScore* ref = reference->find(d.task_id);
            if (ref && ref->accuracy > 0.0) {
                s.retention = s.accuracy / ref->accuracy;
                retention_sum += *s.retention;
                ++retention_count;
            }
        }
        r.mean_accuracy += s.accuracy;
        r.tasks.push_back(std::move(s));
    }
    if (!eval.empty()) r.mean_accuracy /= static_cast<double>(eval.size());
    if (retention_count) r.mean_retention = retention_sum / static_cast<double>(retention_count);
    return r;
}

/// `task,accuracy,retention` rows; retention is blank when undefined.
inline std::string report_csv(const EvalReport& r) {
    std::string out = "task,accuracy,retention\n";
    for (const auto& t : r.tasks)
        out += t.task + "," + format_g6(t.accuracy) + "," + (t.retention ? format_g6(*t.retention) : "") + "\n";
    return out;
}

struct SuiteOptions {
    TaskSpec tasks{};
    SplitSizes sizes{};
    MlpArch arch{};
    TrainOptions train{};
    std::size_t joint_steps = 500;
    std::vector<MergeRecipe> recipes;
    unsigned threads = 1;
};

struct SuiteResult {
    TaskSuite data;
    Checkpoint base;
    std::vector<Checkpoint> experts;
    Checkpoint joint;
    std::vector<std::pair<std::string, MergedModel>> merged;  // (row tag, model)
    EvalReport reference;  // each expert on its own task
    std::vector<EvalReport> rows;  // experts, joint, then one per recipe
};

inline std::vector<MergeRecipe> all_recipes(std::uint64_t seed) {
    std::vector<MergeRecipe> out;
    for (const auto& info : method_table()) out.push_back(default_recipe(info.method, seed));
    return out;
}

namespace detail {

template <typename Fn>
auto suite_step(const std::string& row, Fn&& fn) {
    try {
        return fn();
    } catch (const Error& e) {
        throw Error(e.code(), "suite row '" + row + "': " + e.what());
    }
}

inline std::vector<std::string> row_tags(std::span<const MergeRecipe> recipes) {
    std::vector<std::string> tags;
    std::map<std::string, int> seen;
    for (const auto& r : recipes) {
        std::string tag(to_string(r.method));
        if (const int n = ++seen[tag]; n > 1) tag += "-" + std::to_string(n);
        tags.push_back(std::move(tag));
    }
    return tags;
}

}  // namespace detail

inline SuiteResult run_suite(const SuiteOptions& opt) {
    SuiteResult res;
    res.data = gen_tasks(opt.tasks, opt.sizes);
    const auto train_sets = res.data.train_sets();
    const auto eval_sets = res.data.eval_sets();
    const std::uint64_t seed = opt.tasks.seed;

    MlpArch arch = opt.arch;
    arch.input_dim = opt.tasks.input_dim;
    arch.n_classes = opt.tasks.n_classes;
    res.base = detail::suite_step("base", [&] { return init_base(seed, arch, train_sets); });

    res.experts.resize(train_sets.size());
    parallel_for(train_sets.size(), opt.threads, [&](std::size_t t) {
        res.experts[t] = detail::suite_step("expert_" + train_sets[t].task_id,
                                            [&] { return train(res.base, train_sets[t], opt.train, seed); });
    });
    res.joint = detail::suite_step("joint", [&] {
        TrainOptions j = opt.train;
        j.mode = TrainMode::full;
        j.steps = opt.joint_steps;
        return train_joint(res.base, train_sets, j, seed);
    });

    res.reference.model = "experts";
    for (std::size_t t = 0; t < res.experts.size(); ++t) {
        const auto own = evaluate(res.experts[t], std::span(&eval_sets[t], 1));
        res.reference.tasks.push_back(own.tasks.front());
        res.reference.mean_accuracy += own.mean_accuracy / static_cast<double>(res.experts.size());
    }

    std::vector<CalibrationSet> cal;
    for (const auto& t : res.data.tasks) cal.push_back(to_calibration(t.calibration, seed));

    const auto tags = detail::row_tags(opt.recipes);
    std::vector<MergedModel> merged(opt.recipes.size());
    parallel_for(opt.recipes.size(), opt.threads, [&](std::size_t i) {
        merged[i] = detail::suite_step(tags[i], [&] { return merge(opt.recipes[i], res.base, res.experts, cal); });
    });

    for (std::size_t t = 0; t < res.experts.size(); ++t)
        res.rows.push_back(evaluate(res.experts[t], eval_sets, &res.reference, "expert_" + train_sets[t].task_id));
    res.rows.push_back(evaluate(res.joint, eval_sets, &res.reference, "joint"));
    for (std::size_t i = 0; i < merged.size(); ++i) {
        res.rows.push_back(evaluate(merged[i].checkpoint, eval_sets, &res.reference, tags[i]));
        res.merged.emplace_back(tags[i], std::move(merged[i]));
    }
    return res;
}

/// One row per model: `model,task,accuracy,retention` with task = mean.
inline std::string suite_csv(const SuiteResult& s) {
    std::string out = "model,task,accuracy,retention\n";
    for (const auto& r : s.rows)
        out += r.model + ",mean," + format_g6(r.mean_accuracy) + "," +
               (r.mean_retention ? format_g6(*r.mean_retention) : "") + "\n";
    return out;
}

/// Long form: one row per (model, task).
inline std::string suite_tasks_csv(const SuiteResult& s) {
    std::string out = "model,task,accuracy,retention\n";
    for (const auto& r : s.rows)
        for (const auto& t : r.tasks)
            out += r.model + "," + t.task + "," + format_g6(t.accuracy) + "," +
                   (t.retention ? format_g6(*t.retention) : "") + "\n";
    return out;
}

/// Number of tasks on which `r` beats the task's own expert.
inline std::size_t tasks_beating_expert(const EvalReport& r, const EvalReport& reference) {
    std::size_t n = 0;
    for (const auto& t : r.tasks)
        if (const auto* ref = reference.find(t.task); ref && t.accuracy > ref->accuracy) ++n;
    return n;
}

inline std::string suite_markdown(const SuiteResult& s) {
    const auto& spec = s.data.spec;
    std::string out = "# Consolidation suite\n\nseed " + std::to_string(spec.seed) + ", similarity " +
                      format_g6(spec.similarity) + ", " + std::to_string(spec.n_tasks) + " tasks\n\n| model |";
    std::string rule = "|---|";
    for (const auto& t : s.data.tasks) {
        out += " " + t.id + " |";
        rule += "---:|";
    }
    out += " mean | retention | beats expert |\n" + rule + "---:|---:|---:|\n";
    for (const auto& r : s.rows) {
        out += "| " + r.model + " |";
        for (const auto& t : r.tasks) out += " " + format_g6(t.accuracy) + " |";
        out += " " + format_g6(r.mean_accuracy) + " | " + (r.mean_retention ? format_g6(*r.mean_retention) : "") +
               " | " + std::to_string(tasks_beating_expert(r, s.reference)) + " |\n";
    }
    out += "\n\"beats expert\" counts the tasks on which a model is more accurate than that task's own expert.\n";
    return out;
}

/// Writes suite.csv, suite_tasks.csv, suite.md, models/ and merged/ under `dir`.
inline void write_suite(const SuiteResult& s, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir / "models");
    std::filesystem::create_directories(dir / "merged");
    write_checkpoint(s.base, dir / "models" / "base.mrgf");
    for (const auto& e : s.experts) write_checkpoint(e, dir / "models" / ("expert_" + e.source_tag + ".mrgf"));
    write_checkpoint(s.joint, dir / "models" / "joint.mrgf");
    for (const auto& [tag, m] : s.merged) write_checkpoint(m.checkpoint, dir / "merged" / (tag + ".mrgf"));
    atomic_write(dir / "suite.csv", suite_csv(s));
    atomic_write(dir / "suite_tasks.csv", suite_tasks_csv(s));
    atomic_write(dir / "suite.md", suite_markdown(s));
}

}  // namespace consolidate
