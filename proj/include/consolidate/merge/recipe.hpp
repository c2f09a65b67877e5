#pragma once

// Merge recipes: which operator, at which granularity, with which weights and
// hyperparameters. Every default is filled in by `resolve` and echoed into the
// merged checkpoint so a result can be reproduced from its own header.

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "consolidate/error.hpp"
#include "consolidate/task_vectors.hpp"

namespace consolidate {

enum class Method {
    average,
    slerp,
    metagpt,
    lines,
    dare,
    breadcrumbs,
    ties,
    consensus_ta,
    tsv,
    iso_cts,
    impart,
    tadrop,
    cabs,
    pcb,
    della,
    sce,
    wudi,
    adamerging,
    regmean,
    cat,
};

enum class Granularity { model, layer, matrix };

inline constexpr std::string_view to_string(Granularity g) noexcept {
    switch (g) {
        case Granularity::model: return "model";
        case Granularity::layer: return "layer";
        case Granularity::matrix: return "matrix";
    }
    return "?";
}

inline Granularity parse_granularity(std::string_view s) {
    if (s == "model") return Granularity::model;
    if (s == "layer") return Granularity::layer;
    if (s == "matrix") return Granularity::matrix;
    fail(ErrorCode::recipe, "unknown granularity '" + std::string(s) + "'");
}

struct ParamSpec {
    std::string_view name;
    double fallback;
    double lo;
    double hi;
    bool lo_open = false;
    bool hi_open = false;
    bool integer = false;
};

struct MethodInfo {
    Method method;
    std::string_view id;       // recipe spelling
    std::string_view display;  // report label
    Granularity granularity;   // taxonomy default
    bool data_free;
    std::vector<ParamSpec> params;
};

inline constexpr double kInf = 1e300;

/// All twenty operators in taxonomy order.
inline const std::vector<MethodInfo>& method_table() {
    static const std::vector<MethodInfo> table = {
        {Method::average, "average", "Average", Granularity::model, true, {}},
        {Method::slerp, "slerp", "SLERP", Granularity::model, true, {{"t", 0.5, 0.0, 1.0}}},
        {Method::metagpt, "metagpt", "MetaGPT", Granularity::model, true, {}},
        {Method::lines, "lines", "LiNeS", Granularity::layer, true,
         {{"alpha0", 0.5, -kInf, kInf}, {"beta0", 0.5, -kInf, kInf}}},
        {Method::dare, "dare", "DARE", Granularity::model, true, {{"p", 0.9, 0.0, 1.0, false, true}}},
        {Method::breadcrumbs, "breadcrumbs", "Breadcrumbs", Granularity::model, true,
         {{"beta", 0.85, 0.0, 1.0}, {"gamma", 0.99, 0.0, 1.0}}},
        {Method::ties, "ties", "TIES", Granularity::matrix, true, {{"k", 0.2, 0.0, 1.0, true, false}}},
        {Method::consensus_ta, "consensus_ta", "Consensus TA", Granularity::matrix, true,
         {{"lambda_mask", 0.4, 0.0, kInf, true, false}, {"min_support", 2, 1, kInf, false, false, true}}},
        {Method::tsv, "tsv", "TSV", Granularity::matrix, true, {{"rank", 0, 0, kInf, false, false, true}}},
        {Method::iso_cts, "iso_cts", "ISO-CTS", Granularity::matrix, true, {{"rank", 0, 0, kInf, false, false, true}}},
        {Method::impart, "impart", "IMPART", Granularity::matrix, true, {{"tau", 0.9, 0.0, 1.0, true, false}}},
        {Method::tadrop, "tadrop", "TADrop", Granularity::matrix, true, {{"rho", 0.9, 0.0, 1.0, true, false}}},
        {Method::cabs, "cabs", "CABS", Granularity::matrix, true,
         {{"n", 1, 1, kInf, false, false, true}, {"m", 4, 1, kInf, false, false, true}}},
        {Method::pcb, "pcb", "PCB Merging", Granularity::matrix, true, {{"r", 0.2, 0.0, 1.0, true, false}}},
        {Method::della, "della", "DELLA", Granularity::matrix, true,
         {{"p_min", 0.2, 0.0, 1.0, true, false}, {"p_max", 0.8, 0.0, 1.0, true, false}}},
        {Method::sce, "sce", "SCE", Granularity::matrix, true, {{"p", 0.1, 0.0, 1.0, true, false}}},
        {Method::wudi, "wudi", "WUDI", Granularity::matrix, true,
         {{"iters", 300, 0, kInf, false, false, true}, {"step", 1e-2, 0.0, kInf, true, false}}},
        {Method::adamerging, "adamerging", "AdaMerging", Granularity::layer, false,
         {{"init", 0.3, 0.0, 1.0}, {"iters", 200, 0, kInf, false, false, true}, {"step", 0.05, 0.0, kInf, true, false}}},
        {Method::regmean, "regmean", "RegMean++", Granularity::matrix, false, {{"rho", 0.9, 0.0, 1.0}}},
        {Method::cat, "cat", "CAT Merging", Granularity::matrix, false, {{"r", 2, 1, kInf, false, false, true}}},
    };
    return table;
}

inline const MethodInfo& method_info(Method m) {
    for (const auto& info : method_table())
        if (info.method == m) return info;
    fail(ErrorCode::recipe, "unknown method");
}

inline Method parse_method(std::string_view s) {
    for (const auto& info : method_table())
        if (info.id == s) return info.method;
    fail(ErrorCode::recipe, "unknown merge method '" + std::string(s) + "'");
}

inline std::string_view to_string(Method m) { return method_info(m).id; }

/// True for operators whose output is base + λ·(merged task vector).
inline bool is_delta_based(Method m) noexcept { return m != Method::average && m != Method::slerp; }

struct MergeRecipe {
    Method method = Method::average;
    std::optional<Granularity> granularity;
    std::vector<double> weights;  // α, one per expert; empty = uniform 1/n
    double lambda = 1.0;
    std::map<std::string, double> params;
    std::optional<NormLevel> normalize;
    std::uint64_t seed = 0;

    double param(std::string_view name) const {
        auto it = params.find(std::string(name));
        if (it == params.end()) fail(ErrorCode::recipe, "recipe has no parameter '" + std::string(name) + "'");
        return it->second;
    }

    Granularity resolved_granularity() const {
        return granularity.value_or(method_info(method).granularity);
    }

    /// Copy with defaults filled in and every constraint checked.
    MergeRecipe resolve(std::size_t n_experts) const {
        if (n_experts == 0) fail(ErrorCode::recipe, "a merge needs at least one expert");
        const auto& info = method_info(method);
        MergeRecipe r = *this;
        r.granularity = resolved_granularity();
        if (!info.data_free && *r.granularity != info.granularity)
            fail(ErrorCode::recipe, std::string(info.id) + " only runs at " + std::string(to_string(info.granularity)) +
                                        " granularity");
        if (r.weights.empty()) r.weights.assign(n_experts, 1.0 / static_cast<double>(n_experts));
        if (r.weights.size() != n_experts)
            fail(ErrorCode::recipe, "recipe lists " + std::to_string(r.weights.size()) + " weights for " +
                                        std::to_string(n_experts) + " experts");
        for (double w : r.weights)
            if (!(w >= 0.0) || !std::isfinite(w)) fail(ErrorCode::recipe, "expert weights must be finite and non-negative");
        if (method == Method::average) {
            double sum = 0.0;
            for (double w : r.weights) sum += w;
            if (std::abs(sum - 1.0) > 1e-6)
                fail(ErrorCode::recipe, "average weights must sum to 1 (got " + format_g6(sum) + ")");
        }
        if (!std::isfinite(r.lambda)) fail(ErrorCode::recipe, "lambda must be finite");

        std::set<std::string> known;
        for (const auto& spec : info.params) {
            known.insert(std::string(spec.name));
            auto it = r.params.find(std::string(spec.name));
            const double v = it == r.params.end() ? spec.fallback : it->second;
            const bool below = spec.lo_open ? !(v > spec.lo) : !(v >= spec.lo);
            const bool above = spec.hi_open ? !(v < spec.hi) : !(v <= spec.hi);
            if (below || above || !std::isfinite(v))
                fail(ErrorCode::recipe, std::string(info.id) + " parameter " + std::string(spec.name) + "=" +
                                            format_g6(v) + " is out of range");
            if (spec.integer && v != std::floor(v))
                fail(ErrorCode::recipe, std::string(info.id) + " parameter " + std::string(spec.name) +
                                            " must be an integer");
            r.params[std::string(spec.name)] = v;
        }
        for (const auto& [k, v] : r.params)
            if (!known.contains(k)) fail(ErrorCode::recipe, std::string(info.id) + " has no parameter '" + k + "'");

        switch (method) {
            case Method::breadcrumbs:
                if (!(r.param("beta") < r.param("gamma")))
                    fail(ErrorCode::recipe, "breadcrumbs needs beta < gamma");
                break;
            case Method::della:
                if (!(r.param("p_min") <= r.param("p_max"))) fail(ErrorCode::recipe, "della needs p_min <= p_max");
                break;
            case Method::consensus_ta:
                if (r.param("min_support") > static_cast<double>(n_experts))
                    fail(ErrorCode::recipe, "consensus_ta min_support exceeds the number of experts");
                break;
            case Method::cabs:
                if (r.param("n") > r.param("m")) fail(ErrorCode::recipe, "cabs needs n <= m");
                break;
            default:
                break;
        }
        return r;
    }

    nlohmann::json to_json() const {
        nlohmann::json j{{"method", to_string(method)},
                         {"weights", weights},
                         {"lambda", lambda},
                         {"params", params},
                         {"seed", seed}};
        if (granularity) j["granularity"] = to_string(*granularity);
        if (normalize) j["normalize"] = *normalize == NormLevel::model ? "model" : "matrix";
        return j;
    }
};

inline MergeRecipe default_recipe(Method m, std::uint64_t seed) {
    MergeRecipe r;
    r.method = m;
    r.seed = seed;
    return r;
}

/// A recipe file: the recipe plus the checkpoints and calibration data it
/// refers to.
struct RecipeFile {
    MergeRecipe recipe;
    std::string base;
    std::vector<std::string> experts;
    std::vector<std::string> calibration;
};

inline RecipeFile parse_recipe_file(const nlohmann::json& j) {
    static const std::set<std::string> allowed = {"method", "granularity", "base", "experts", "weights",
                                                  "lambda", "params", "normalize", "seed", "calibration"};
    if (!j.is_object()) fail(ErrorCode::recipe, "recipe must be a JSON object");
    for (const auto& [k, v] : j.items())
        if (!allowed.contains(k)) fail(ErrorCode::recipe, "unknown recipe field '" + k + "'");
    for (const char* required : {"method", "base", "experts", "seed"})
        if (!j.contains(required)) fail(ErrorCode::recipe, std::string("recipe is missing '") + required + "'");

    RecipeFile f;
    try {
        f.recipe.method = parse_method(j.at("method").get<std::string>());
        if (j.contains("granularity")) f.recipe.granularity = parse_granularity(j.at("granularity").get<std::string>());
        f.base = j.at("base").get<std::string>();
        f.experts = j.at("experts").get<std::vector<std::string>>();
        if (j.contains("weights")) f.recipe.weights = j.at("weights").get<std::vector<double>>();
        if (j.contains("lambda")) f.recipe.lambda = j.at("lambda").get<double>();
        if (j.contains("params")) f.recipe.params = j.at("params").get<std::map<std::string, double>>();
        if (j.contains("normalize")) {
            const auto& n = j.at("normalize");
            if (n.is_boolean()) {
                if (n.get<bool>()) f.recipe.normalize = NormLevel::model;
            } else {
                const auto s = n.get<std::string>();
                if (s == "model") f.recipe.normalize = NormLevel::model;
                else if (s == "matrix") f.recipe.normalize = NormLevel::matrix;
                else fail(ErrorCode::recipe, "normalize must be true, false, \"model\" or \"matrix\"");
            }
        }
        const auto& seed = j.at("seed");
        if (!seed.is_number_unsigned() && !(seed.is_number_integer() && seed.get<std::int64_t>() >= 0))
            fail(ErrorCode::recipe, "seed must be a non-negative integer");
        f.recipe.seed = seed.get<std::uint64_t>();
        if (j.contains("calibration")) {
            const auto& c = j.at("calibration");
            if (c.is_string()) f.calibration = {c.get<std::string>()};
            else f.calibration = c.get<std::vector<std::string>>();
        }
    } catch (const nlohmann::json::exception& ex) {
        fail(ErrorCode::recipe, std::string("malformed recipe: ") + ex.what());
    }
    if (f.experts.empty()) fail(ErrorCode::recipe, "recipe lists no experts");
    if (!method_info(f.recipe.method).data_free && f.calibration.empty())
        fail(ErrorCode::recipe, std::string(to_string(f.recipe.method)) + " needs calibration data");
    return f;
}

}  // namespace consolidate
