#pragma once

// Command-line driver. parse_args validates flags and input paths without
// touching any output; execute runs one verb and maps failures to exit codes
// (0 ok, 1 domain error, 2 usage error).

#include <CLI11.hpp>

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "consolidate/io.hpp"
#include "consolidate/merge.hpp"
#include "consolidate/parallel.hpp"
#include "consolidate/task_vectors.hpp"
#include "consolidate/testbed.hpp"

namespace consolidate::cli {

namespace fs = std::filesystem;

inline constexpr int kExitOk = 0;
inline constexpr int kExitDomain = 1;
inline constexpr int kExitUsage = 2;

struct Command {
    std::string verb;

    std::optional<std::uint64_t> seed;
    std::string out;

    // gen-tasks, suite
    double similarity = 0.3;
    std::size_t tasks = 3;
    std::size_t train_size = 512;
    std::size_t cal_size = 64;
    std::size_t eval_size = 256;
    std::string recipes = "all";

    // train, train-joint
    std::string model;
    std::vector<std::string> data;
    std::size_t steps = 500;
    double lr = 0.05;
    std::string mode = "full";
    std::size_t rank = 2;
    double alpha = 2.0;
    bool ordered = false;

    // merge
    std::string recipe;

    // eval
    std::string reference;

    // profile, angles
    std::string base;
    std::vector<std::string> experts;
    std::string normalize;
    std::string tensor;
    std::size_t k = 2;
};

struct ParseResult {
    std::optional<Command> command;
    int exit_code = kExitOk;
};

namespace detail {

inline CLI::Validator output_path() {
    return CLI::Validator(
        [](std::string& p) -> std::string {
            const fs::path parent = fs::path(p).parent_path();
            if (!parent.empty() && !fs::is_directory(parent)) return "output directory does not exist: " + parent.string();
            if (fs::is_directory(p)) return "output path is a directory: " + p;
            return {};
        },
        "OUTPUT");
}

inline CLI::Validator output_dir() {
    return CLI::Validator(
        [](std::string& p) -> std::string {
            if (fs::exists(p) && !fs::is_directory(p)) return "not a directory: " + p;
            const fs::path parent = fs::path(p).parent_path();
            if (!parent.empty() && !fs::is_directory(parent)) return "parent directory does not exist: " + parent.string();
            return {};
        },
        "DIR");
}

inline void train_flags(CLI::App* sub, Command& c) {
    sub->add_option("--steps", c.steps, "SGD steps")->capture_default_str();
    sub->add_option("--lr", c.lr, "learning rate")->capture_default_str()->check(CLI::PositiveNumber);
}

}  // namespace detail

inline ParseResult parse_args(const std::vector<std::string>& args, std::ostream& out = std::cout,
                              std::ostream& err = std::cerr) {
    Command c;
    CLI::App app{"Merge and evaluate specialised models", "consolidate"};
    app.require_subcommand(1);

    auto* gen = app.add_subcommand("gen-tasks", "generate synthetic task datasets and a pre-trained base");
    gen->add_option("--seed", c.seed, "random seed")->required();
    gen->add_option("--similarity", c.similarity, "task similarity in [0,1]")->capture_default_str()->check(CLI::Range(0.0, 1.0));
    gen->add_option("--tasks", c.tasks, "number of tasks")->capture_default_str()->check(CLI::PositiveNumber);
    gen->add_option("--train-size", c.train_size)->capture_default_str()->check(CLI::PositiveNumber);
    gen->add_option("--cal-size", c.cal_size)->capture_default_str()->check(CLI::PositiveNumber);
    gen->add_option("--eval-size", c.eval_size)->capture_default_str()->check(CLI::PositiveNumber);
    gen->add_option("--out", c.out, "output directory")->required()->check(detail::output_dir());

    auto* tr = app.add_subcommand("train", "fine-tune a model on one dataset");
    tr->add_option("--model", c.model, "starting checkpoint")->required()->check(CLI::ExistingFile);
    tr->add_option("--data", c.data, "training dataset")->required()->expected(1)->check(CLI::ExistingFile);
    tr->add_option("--seed", c.seed)->required();
    detail::train_flags(tr, c);
    tr->add_option("--mode", c.mode)->capture_default_str()->check(CLI::IsMember({"full", "lowrank"}));
    tr->add_option("--rank", c.rank, "low-rank factor rank")->capture_default_str()->check(CLI::PositiveNumber);
    tr->add_option("--alpha", c.alpha, "low-rank scale numerator")->capture_default_str()->check(CLI::PositiveNumber);
    tr->add_option("--out", c.out)->required()->check(detail::output_path());

    auto* joint = app.add_subcommand("train-joint", "train on the union of several datasets");
    joint->add_option("--model", c.model, "base checkpoint")->required()->check(CLI::ExistingFile);
    joint->add_option("--data", c.data, "training datasets")->required()->check(CLI::ExistingFile);
    joint->add_option("--seed", c.seed)->required();
    detail::train_flags(joint, c);
    joint->add_flag("--ordered", c.ordered, "train on each dataset in turn instead of shuffling the union");
    joint->add_option("--out", c.out)->required()->check(detail::output_path());

    auto* mg = app.add_subcommand("merge", "apply a merge recipe");
    mg->add_option("--recipe", c.recipe, "recipe JSON")->required()->check(CLI::ExistingFile);
    mg->add_option("--out", c.out)->required()->check(detail::output_path());

    auto* ev = app.add_subcommand("eval", "accuracy per dataset");
    ev->add_option("--model", c.model)->required()->check(CLI::ExistingFile);
    ev->add_option("--data", c.data, "evaluation datasets")->required()->check(CLI::ExistingFile);
    ev->add_option("--reference", c.reference, "report CSV to compute retention against")->check(CLI::ExistingFile);
    ev->add_option("--out", c.out)->required()->check(detail::output_path());

    auto* prof = app.add_subcommand("profile", "per-depth task-vector norms");
    prof->add_option("--base", c.base)->required()->check(CLI::ExistingFile);
    prof->add_option("--experts", c.experts)->required()->check(CLI::ExistingFile);
    prof->add_option("--normalize", c.normalize, "normalize task vectors first")->check(CLI::IsMember({"model", "matrix"}));
    prof->add_option("--out", c.out)->required()->check(detail::output_path());

    auto* ang = app.add_subcommand("angles", "principal angles between two experts' updates of one tensor");
    ang->add_option("--base", c.base)->required()->check(CLI::ExistingFile);
    ang->add_option("--experts", c.experts)->required()->expected(2)->check(CLI::ExistingFile);
    ang->add_option("--tensor", c.tensor, "weight tensor name")->required();
    ang->add_option("--k", c.k, "subspace dimension")->capture_default_str()->check(CLI::PositiveNumber);
    ang->add_option("--out", c.out)->required()->check(detail::output_path());

    auto* su = app.add_subcommand("suite", "run the full comparison grid");
    su->add_option("--seed", c.seed)->required();
    su->add_option("--similarity", c.similarity)->capture_default_str()->check(CLI::Range(0.0, 1.0));
    su->add_option("--tasks", c.tasks)->capture_default_str()->check(CLI::PositiveNumber);
    su->add_option("--recipes", c.recipes, "'all', 'none' or comma-separated method ids")->capture_default_str();
    su->add_option("--mode", c.mode, "expert training mode")->capture_default_str()->check(CLI::IsMember({"full", "lowrank"}));
    su->add_option("--out", c.out)->required()->check(detail::output_dir());

    std::vector<std::string> reversed(args.rbegin(), args.rend());
    try {
        app.parse(reversed);
    } catch (const CLI::CallForHelp&) {
        out << app.help();
        return {std::nullopt, kExitOk};
    } catch (const CLI::CallForAllHelp&) {
        out << app.help("", CLI::AppFormatMode::All);
        return {std::nullopt, kExitOk};
    } catch (const CLI::ParseError& e) {
        err << "ERROR usage: " << e.what() << "\n";
        const auto subs = app.get_subcommands();
        err << (subs.empty() ? app.help() : subs.front()->help());
        return {std::nullopt, kExitUsage};
    }
    c.verb = app.get_subcommands().front()->get_name();
    if (c.verb == "suite" && c.recipes != "all" && c.recipes != "none") {
        std::stringstream ss(c.recipes);
        for (std::string id; std::getline(ss, id, ',');) {
            try {
                parse_method(id);
            } catch (const Error& e) {
                err << "ERROR usage: " << e.what() << "\n";
                return {std::nullopt, kExitUsage};
            }
        }
    }
    return {std::move(c), kExitOk};
}

namespace detail {

inline std::vector<Checkpoint> read_all(const std::vector<std::string>& paths) {
    std::vector<Checkpoint> out;
    for (const auto& p : paths) out.push_back(read_checkpoint(p));
    return out;
}

inline std::vector<Dataset> read_datasets(const std::vector<std::string>& paths) {
    std::vector<Dataset> out;
    for (const auto& p : paths) out.push_back(read_dataset(p));
    return out;
}

inline TrainOptions train_options(const Command& c) {
    TrainOptions opt;
    opt.steps = c.steps;
    opt.lr = c.lr;
    opt.mode = c.mode == "lowrank" ? TrainMode::lowrank : TrainMode::full;
    opt.lowrank = LowRankConfig{c.rank, c.alpha};
    return opt;
}

/// Reads a `task,accuracy,...` report written by `eval`.
inline EvalReport read_report(const fs::path& path) {
    std::istringstream in(read_file(path));
    std::string line;
    if (!std::getline(in, line) || line.rfind("task,accuracy", 0) != 0)
        fail(ErrorCode::format, path.string() + ": not an evaluation report");
    EvalReport r;
    r.model = path.stem().string();
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream row(line);
        std::string task, acc;
        std::getline(row, task, ',');
        std::getline(row, acc, ',');
        try {
            r.tasks.push_back({task, std::stod(acc), std::nullopt});
        } catch (const std::exception&) {
            fail(ErrorCode::format, path.string() + ": bad accuracy '" + acc + "'");
        }
    }
    return r;
}

inline fs::path resolve_against(const fs::path& anchor_dir, const std::string& p) {
    const fs::path path(p);
    return path.is_absolute() ? path : anchor_dir / path;
}

inline int run_gen_tasks(const Command& c) {
    TaskSpec spec;
    spec.n_tasks = c.tasks;
    spec.similarity = c.similarity;
    spec.seed = *c.seed;
    const auto suite = gen_tasks(spec, {c.train_size, c.cal_size, c.eval_size});
    const fs::path dir(c.out);
    fs::create_directories(dir);
    for (const auto& t : suite.tasks) {
        write_dataset(t.train, dir / (t.id + "_train.mrgf"));
        write_dataset(t.calibration, dir / (t.id + "_cal.mrgf"));
        write_dataset(t.eval, dir / (t.id + "_eval.mrgf"));
    }
    MlpArch arch;
    arch.input_dim = spec.input_dim;
    arch.n_classes = spec.n_classes;
    write_checkpoint(init_base(spec.seed, arch, suite.train_sets()), dir / "base.mrgf");
    return kExitOk;
}

inline int run_merge(const Command& c, std::ostream& err) {
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(read_file(c.recipe));
    } catch (const nlohmann::json::parse_error& e) {
        fail(ErrorCode::recipe, c.recipe + ": " + e.what());
    }
    const RecipeFile f = parse_recipe_file(j);
    const fs::path anchor = fs::path(c.recipe).parent_path();
    const Checkpoint base = read_checkpoint(resolve_against(anchor, f.base));
    std::vector<Checkpoint> experts;
    for (const auto& e : f.experts) experts.push_back(read_checkpoint(resolve_against(anchor, e)));
    std::vector<CalibrationSet> cal;
    for (const auto& p : f.calibration) cal.push_back(to_calibration(read_dataset(resolve_against(anchor, p)), f.recipe.seed));
    const MergedModel m = merge(f.recipe, base, experts, cal, threads_from_env());
    for (const auto& w : m.warnings) err << "WARN: " << w << "\n";
    write_checkpoint(m.checkpoint, c.out);
    return kExitOk;
}

inline int run_eval(const Command& c) {
    const auto eval = read_datasets(c.data);
    std::optional<EvalReport> reference;
    if (!c.reference.empty()) reference = read_report(c.reference);
    const EvalReport r = evaluate(read_checkpoint(c.model), eval, reference ? &*reference : nullptr);
    atomic_write(c.out, report_csv(r));
    return kExitOk;
}

inline int run_profile(const Command& c) {
    const Checkpoint base = read_checkpoint(c.base);
    std::vector<TaskVector> tvs;
    for (const auto& p : c.experts) {
        TaskVector tv = compute_task_vector(base, read_checkpoint(p));
        tv.expert_tag = fs::path(p).stem().string();
        tvs.push_back(std::move(tv));
    }
    if (!c.normalize.empty())
        tvs = normalize_task_vectors(std::move(tvs), c.normalize == "model" ? NormLevel::model : NormLevel::matrix);
    atomic_write(c.out, profile_csv(layer_norm_profile(tvs)));
    return kExitOk;
}

inline int run_angles(const Command& c) {
    const Checkpoint base = read_checkpoint(c.base);
    const TaskVector a = compute_task_vector(base, read_checkpoint(c.experts[0]));
    const TaskVector b = compute_task_vector(base, read_checkpoint(c.experts[1]));
    const auto angles = subspace_angles(a.at(c.tensor), b.at(c.tensor), c.k);
    std::string csv = "index,angle\n";
    for (std::size_t i = 0; i < angles.size(); ++i) csv += std::to_string(i) + "," + format_g6(angles[i]) + "\n";
    atomic_write(c.out, csv);
    return kExitOk;
}

inline std::vector<MergeRecipe> suite_recipes(const std::string& list, std::uint64_t seed) {
    if (list == "all") return all_recipes(seed);
    std::vector<MergeRecipe> out;
    if (list == "none") return out;
    std::stringstream ss(list);
    for (std::string id; std::getline(ss, id, ',');) out.push_back(default_recipe(parse_method(id), seed));
    return out;
}

inline int run_suite_verb(const Command& c) {
    SuiteOptions opt;
    opt.tasks.seed = *c.seed;
    opt.tasks.similarity = c.similarity;
    opt.tasks.n_tasks = c.tasks;
    opt.train.mode = c.mode == "lowrank" ? TrainMode::lowrank : TrainMode::full;
    opt.recipes = suite_recipes(c.recipes, *c.seed);
    opt.threads = threads_from_env();
    write_suite(run_suite(opt), c.out);
    return kExitOk;
}

inline int dispatch(const Command& c, std::ostream& err) {
    if (c.verb == "gen-tasks") return run_gen_tasks(c);
    if (c.verb == "train") {
        const Dataset data = read_dataset(c.data.front());
        write_checkpoint(train(read_checkpoint(c.model), data, train_options(c), *c.seed), c.out);
        return kExitOk;
    }
    if (c.verb == "train-joint") {
        const auto sets = read_datasets(c.data);
        write_checkpoint(train_joint(read_checkpoint(c.model), sets, train_options(c), *c.seed, c.ordered), c.out);
        return kExitOk;
    }
    if (c.verb == "merge") return run_merge(c, err);
    if (c.verb == "eval") return run_eval(c);
    if (c.verb == "profile") return run_profile(c);
    if (c.verb == "angles") return run_angles(c);
    if (c.verb == "suite") return run_suite_verb(c);
    fail(ErrorCode::usage, "unknown verb '" + c.verb + "'");
}

}  // namespace detail

inline int execute(const Command& c, std::ostream& err = std::cerr) {
    try {
        return detail::dispatch(c, err);
    } catch (const Error& e) {
        err << "ERROR " << to_string(e.code()) << ": " << e.what() << "\n";
        return e.code() == ErrorCode::usage ? kExitUsage : kExitDomain;
    } catch (const fs::filesystem_error& e) {
        err << "ERROR io: " << e.what() << "\n";
        return kExitDomain;
    } catch (const std::bad_alloc&) {
        err << "ERROR io: out of memory\n";
        return kExitDomain;
    }
}

inline int run(int argc, char** argv, std::ostream& out = std::cout, std::ostream& err = std::cerr) {
    std::vector<std::string> args(argv + 1, argv + argc);
    const ParseResult p = parse_args(args, out, err);
    if (!p.command) return p.exit_code;
    return execute(*p.command, err);
}

}  // namespace consolidate::cli
