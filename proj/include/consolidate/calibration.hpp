#pragma once

// Data-dependent merging: activation statistics, RegMean++ (Gram-weighted
// least squares, layer by layer through the merged prefix), AdaMerging
// (per-depth coefficients fitted by entropy minimization) and CAT Merging
// (projecting out directions other experts rely on).

#include <algorithm>
#include <cmath>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "consolidate/checkpoint.hpp"
#include "consolidate/linalg.hpp"
#include "consolidate/merge/dispatch.hpp"
#include "consolidate/merge/recipe.hpp"
#include "consolidate/network.hpp"
#include "consolidate/task_vectors.hpp"

namespace consolidate {

inline constexpr std::size_t kMinCalibrationSamples = 8;

/// Relative ridge added to the RegMean++ Gram sum, pulling toward the α-average.
inline constexpr double kRegMeanRidge = 1e-9;

struct CalibrationSet {
    Matrix inputs;  // n_samples x input_dim
    std::optional<std::vector<int>> labels;
    std::string source_tag;
    std::uint64_t seed = 0;

    void validate() const {
        if (inputs.rows < kMinCalibrationSamples)
            fail(ErrorCode::recipe, "calibration set '" + source_tag + "' has " + std::to_string(inputs.rows) +
                                        " samples; at least " + std::to_string(kMinCalibrationSamples) + " are needed");
        for (double v : inputs.values)
            if (!std::isfinite(v)) fail(ErrorCode::data, "calibration set '" + source_tag + "' is not finite");
    }
};

struct LayerStats {
    std::string weight_name;
    Matrix gram;   // XᵀX, in x in
    Matrix basis;  // in x r, orthonormal columns
    std::size_t count = 0;
};

/// Statistics of one model on one calibration set, in network layer order.
struct ActivationStats {
    std::vector<LayerStats> layers;

    const LayerStats& at(std::string_view weight_name) const {
        for (const auto& l : layers)
            if (l.weight_name == weight_name) return l;
        fail(ErrorCode::validation, "no activation statistics for '" + std::string(weight_name) + "'");
    }
};

/// Top-r right singular directions of `x` as columns.
inline Matrix top_directions(const Matrix& x, std::size_t r) {
    if (r == 0) return Matrix(x.cols, 0);
    return svd(x).v.left_columns(std::min(r, x.cols));
}

inline ActivationStats capture_activations(const Checkpoint& model, const CalibrationSet& cal, std::size_t r) {
    cal.validate();
    const Network net = Network::from_checkpoint(materialize_lowrank(model));
    const ForwardCache cache = forward(net, cal.inputs);
    ActivationStats stats;
    for (std::size_t l = 0; l < net.layers.size(); ++l) {
        const Matrix& x = cache.inputs[l];
        stats.layers.push_back({net.layers[l].weight_name, matmul_tn(x, x), top_directions(x, r), x.rows});
    }
    return stats;
}

/// Shannon entropy −∑p·ln p with 0·ln 0 = 0.
inline double entropy(std::span<const double> p) {
    double sum = 0.0;
    for (double v : p) {
        if (!std::isfinite(v) || v < 0.0) fail(ErrorCode::validation, "entropy: probabilities must be non-negative");
        sum += v;
    }
    if (std::abs(sum - 1.0) > 1e-6) fail(ErrorCode::validation, "entropy: probabilities sum to " + format_g6(sum));
    double h = 0.0;
    for (double v : p)
        if (v > 0.0) h -= v * std::log(v);
    return h;
}

namespace detail {

inline void check_calibration(std::span<const CalibrationSet> cal, std::size_t n_experts) {
    if (cal.size() != 1 && cal.size() != n_experts)
        fail(ErrorCode::recipe, "expected 1 or " + std::to_string(n_experts) + " calibration sets, got " +
                                    std::to_string(cal.size()));
    for (const auto& c : cal) c.validate();
}

inline const CalibrationSet& calibration_for(std::span<const CalibrationSet> cal, std::size_t expert) {
    return cal.size() == 1 ? cal.front() : cal[expert];
}

struct Prepared {
    MergeRecipe recipe;
    Network base;
    std::vector<Network> experts;
    std::vector<ParameterMap> deltas;
};

inline Prepared prepare(const MergeRecipe& recipe, const Checkpoint& base, std::span<const Checkpoint> experts) {
    validate_compatible(base, experts);
    Prepared p{recipe.resolve(experts.size()), Network::from_checkpoint(base), {}, {}};
    for (const auto& e : experts) {
        const Checkpoint dense = materialize_lowrank(e);
        p.experts.push_back(Network::from_checkpoint(dense));
        p.deltas.push_back(exact_deltas(base, dense));
    }
    return p;
}

inline Matrix relu_affine(const Matrix& x, const AffineLayer& layer, bool last) {
    Matrix z;
    affine(x, layer.weight, layer.bias, z);
    if (!last)
        for (auto& v : z.values) v = std::max(v, 0.0);
    return z;
}

}  // namespace detail

/// RegMean++: for every layer in network order the weight delta solves
/// (∑Ĝᵢ)·Δᵀ = ∑Ĝᵢ·ΔWᵢᵀ where Ĝᵢ = D + ρ(G − D) is built from expert i's
/// calibration inputs propagated through the already-merged layers.
inline MergedModel regmean_merge(const MergeRecipe& recipe, const Checkpoint& base, std::span<const Checkpoint> experts,
                                 std::span<const CalibrationSet> cal) {
    detail::check_calibration(cal, experts.size());
    auto p = detail::prepare(recipe, base, experts);
    const double rho = p.recipe.param("rho");
    const auto& alpha = p.recipe.weights;

    MergedModel result;
    result.recipe_echo = p.recipe;
    ParameterMap merged;
    std::vector<Matrix> hidden;
    for (std::size_t i = 0; i < experts.size(); ++i) hidden.push_back(detail::calibration_for(cal, i).inputs);
    Network merged_net = p.base;

    for (std::size_t l = 0; l < merged_net.layers.size(); ++l) {
        AffineLayer& layer = merged_net.layers[l];
        const std::size_t in = layer.in_dim();
        const std::size_t out = layer.out_dim();
        Matrix gram_sum(in, in);
        Matrix rhs(in, out);
        for (std::size_t i = 0; i < experts.size(); ++i) {
            if (hidden[i].cols != in) fail(ErrorCode::shape, "calibration inputs do not match layer " + layer.weight_name);
            Matrix g = matmul_tn(hidden[i], hidden[i]);
            for (std::size_t a = 0; a < in; ++a)
                for (std::size_t b = 0; b < in; ++b)
                    if (a != b) g(a, b) *= rho;
            const Matrix dw(out, in, p.deltas[i].at(layer.weight_name));
            gram_sum += g;
            rhs += matmul_nt(g, dw);
        }
        std::vector<double> average(out * in, 0.0);
        for (std::size_t i = 0; i < experts.size(); ++i) {
            const auto& d = p.deltas[i].at(layer.weight_name);
            for (std::size_t k = 0; k < d.size(); ++k) average[k] += alpha[i] * d[k];
        }
        double trace = 0.0;
        for (std::size_t a = 0; a < in; ++a) trace += gram_sum(a, a);
        std::vector<double> dw_merged = average;
        try {
            if (!(trace > 0.0)) fail(ErrorCode::singular, layer.weight_name + ": Gram sum is zero");
            // A tiny ridge toward the average pins directions no calibration
            // input reaches (dead units) to the average instead of the base.
            const double ridge = kRegMeanRidge * trace / static_cast<double>(in);
            for (std::size_t a = 0; a < in; ++a) {
                gram_sum(a, a) += ridge;
                for (std::size_t o = 0; o < out; ++o) rhs(a, o) += ridge * average[o * in + a];
            }
            const Matrix solved = solve_spd(gram_sum, rhs, layer.weight_name);  // in x out
            for (std::size_t o = 0; o < out; ++o)
                for (std::size_t c = 0; c < in; ++c) dw_merged[o * in + c] = solved(c, o);
        } catch (const Error& e) {
            if (e.code() != ErrorCode::singular) throw;
            result.warnings.push_back(layer.weight_name + ": Gram sum is singular, using linear averaging");
        }
        std::vector<double> db_merged(out, 0.0);
        for (std::size_t i = 0; i < experts.size(); ++i) {
            const auto& d = p.deltas[i].at(layer.bias_name);
            for (std::size_t k = 0; k < out; ++k) db_merged[k] += alpha[i] * d[k];
        }
        // Propagate with the parameters that will actually be stored.
        for (std::size_t k = 0; k < dw_merged.size(); ++k) {
            const double step = p.recipe.lambda * dw_merged[k];
            if (step != 0.0) layer.weight.values[k] = static_cast<float>(layer.weight.values[k] + step);
        }
        for (std::size_t k = 0; k < out; ++k) {
            const double step = p.recipe.lambda * db_merged[k];
            if (step != 0.0) layer.bias[k] = static_cast<float>(layer.bias[k] + step);
        }
        merged.emplace(layer.weight_name, std::move(dw_merged));
        merged.emplace(layer.bias_name, std::move(db_merged));
        const bool last = l + 1 == merged_net.layers.size();
        if (!last)
            for (auto& h : hidden) h = detail::relu_affine(h, layer, false);
    }
    result.checkpoint = assemble_from_deltas(base, merged, p.recipe.lambda, p.recipe.to_json().dump());
    return result;
}

/// Entropy-minimization problem over per-(expert, depth) coefficients λ.
/// θ(λ) = θ_base + ∑ᵢ λᵢ,depth(p) · Tᵢ[p] for every parameter p.
class AdaMergingProblem {
public:
    using Lambdas = std::vector<std::vector<double>>;  // [expert][depth-1]

    AdaMergingProblem(const Checkpoint& base, std::span<const Checkpoint> experts, Matrix inputs)
        : inputs_(std::move(inputs)) {
        validate_compatible(base, experts);
        base_ = Network::from_checkpoint(base);
        layer_count_ = base.manifest.layer_count;
        for (const auto& e : experts) deltas_.push_back(exact_deltas(base, materialize_lowrank(e)));
    }

    std::size_t experts() const noexcept { return deltas_.size(); }
    int layer_count() const noexcept { return layer_count_; }
    const ParameterMap& delta(std::size_t i) const { return deltas_[i]; }

    Lambdas initial(double value) const {
        return Lambdas(experts(), std::vector<double>(static_cast<std::size_t>(layer_count_), value));
    }

    Network network_at(const Lambdas& lambda) const {
        Network net = base_;
        for (auto& layer : net.layers) {
            const std::size_t d = static_cast<std::size_t>(layer.depth - 1);
            for (std::size_t i = 0; i < experts(); ++i) {
                const double c = lambda[i][d];
                const auto& dw = deltas_[i].at(layer.weight_name);
                const auto& db = deltas_[i].at(layer.bias_name);
                for (std::size_t k = 0; k < dw.size(); ++k) layer.weight.values[k] += c * dw[k];
                for (std::size_t k = 0; k < db.size(); ++k) layer.bias[k] += c * db[k];
            }
        }
        return net;
    }

    double objective(const Lambdas& lambda) const {
        return mean_entropy(forward(network_at(lambda), inputs_)).first;
    }

    /// dH/dλ by backpropagation: the chain rule through θ(λ) is a dot
    /// product of the parameter gradient with each task vector.
    Lambdas gradient(const Lambdas& lambda) const {
        const Network net = network_at(lambda);
        const ForwardCache cache = forward(net, inputs_);
        const Gradients g = backward(net, cache, mean_entropy(cache).second);
        Lambdas out = initial(0.0);
        for (std::size_t l = 0; l < net.layers.size(); ++l) {
            const auto& layer = net.layers[l];
            const std::size_t d = static_cast<std::size_t>(layer.depth - 1);
            for (std::size_t i = 0; i < experts(); ++i)
                out[i][d] += dot(g.weight[l].values, deltas_[i].at(layer.weight_name)) +
                             dot(g.bias[l], deltas_[i].at(layer.bias_name));
        }
        return out;
    }

    Lambdas fd_gradient(const Lambdas& lambda, double h = 1e-4) const {
        Lambdas out = initial(0.0);
        for (std::size_t i = 0; i < experts(); ++i)
            for (std::size_t d = 0; d < out[i].size(); ++d) {
                Lambdas plus = lambda, minus = lambda;
                plus[i][d] += h;
                minus[i][d] -= h;
                out[i][d] = (objective(plus) - objective(minus)) / (2.0 * h);
            }
        return out;
    }

    struct Result {
        Lambdas lambda;
        std::vector<double> trace;  // objective before the first and after each iteration
    };

    /// Projected gradient descent on [0,1]. A step that raises the objective
    /// is halved (up to 10 times, and the smaller step is kept); if no
    /// halving helps the iterate stays put.
    Result optimize(double init, std::size_t iters, double step) const {
        Result r{initial(init), {}};
        double current = objective(r.lambda);
        r.trace.push_back(current);
        for (std::size_t it = 0; it < iters; ++it) {
            const Lambdas g = gradient(r.lambda);
            for (int halving = 0; halving <= 10; ++halving) {
                Lambdas next = r.lambda;
                for (std::size_t i = 0; i < next.size(); ++i)
                    for (std::size_t d = 0; d < next[i].size(); ++d)
                        next[i][d] = std::clamp(next[i][d] - step * g[i][d], 0.0, 1.0);
                const double value = objective(next);
                if (value <= current) {
                    r.lambda = std::move(next);
                    current = value;
                    break;
                }
                step *= 0.5;
            }
            r.trace.push_back(current);
        }
        return r;
    }

    /// Summed deltas ∑ᵢ λᵢ,depth · Tᵢ per tensor.
    ParameterMap merged_deltas(const Lambdas& lambda, const Manifest& dense) const {
        ParameterMap out;
        for (const auto& e : dense.entries) {
            std::vector<double> acc(shape_size(e.shape), 0.0);
            for (std::size_t i = 0; i < experts(); ++i) {
                const double c = lambda[i][static_cast<std::size_t>(e.depth - 1)];
                const auto& d = deltas_[i].at(e.name);
                for (std::size_t k = 0; k < acc.size(); ++k) acc[k] += c * d[k];
            }
            out.emplace(e.name, std::move(acc));
        }
        return out;
    }

private:
    Network base_;
    int layer_count_ = 0;
    std::vector<ParameterMap> deltas_;
    Matrix inputs_;
};

inline Matrix stack_rows(std::span<const CalibrationSet> cal) {
    Matrix out(0, cal.front().inputs.cols);
    for (const auto& c : cal) {
        if (c.inputs.cols != out.cols) fail(ErrorCode::shape, "calibration sets differ in input dimension");
        out.values.insert(out.values.end(), c.inputs.values.begin(), c.inputs.values.end());
        out.rows += c.inputs.rows;
    }
    return out;
}

inline MergedModel adamerging_merge(const MergeRecipe& recipe, const Checkpoint& base,
                                    std::span<const Checkpoint> experts, std::span<const CalibrationSet> cal) {
    if (cal.empty()) fail(ErrorCode::recipe, "adamerging needs a calibration set");
    for (const auto& c : cal) c.validate();
    const MergeRecipe r = recipe.resolve(experts.size());
    const AdaMergingProblem problem(base, experts, stack_rows(cal));
    auto fit = problem.optimize(r.param("init"), static_cast<std::size_t>(r.param("iters")), r.param("step"));

    MergedModel result;
    result.recipe_echo = r;
    for (std::size_t i = 0; i < experts.size(); ++i) result.coefficients["expert" + std::to_string(i)] = fit.lambda[i];
    result.traces["entropy"] = fit.trace;
    result.checkpoint =
        assemble_from_deltas(base, problem.merged_deltas(fit.lambda, base.manifest.dense()), r.lambda, r.to_json().dump());
    return result;
}

/// Orthonormal basis (in x r) of the top-r directions of a PSD matrix.
inline Matrix top_eigenvectors(const Matrix& psd, std::size_t r) { return svd(psd).u.left_columns(r); }

/// T − T·B·Bᵀ.
inline Matrix cat_project(const Matrix& t, const Matrix& basis) {
    if (basis.cols == 0) return t;
    return t - matmul_nt(matmul(t, basis), basis);
}

/// Removal bases for every expert at one layer: top-r directions of the
/// pooled Gram of all other experts. Empty when there is no other expert.
inline std::vector<Matrix> cat_removal_bases(std::span<const ActivationStats> stats, std::string_view weight_name,
                                             std::size_t r) {
    std::vector<Matrix> out;
    for (std::size_t k = 0; k < stats.size(); ++k) {
        const Matrix& own = stats[k].at(weight_name).gram;
        if (r >= own.rows)
            fail(ErrorCode::rank, "cat: r=" + std::to_string(r) + " must be below the input dimension " +
                                      std::to_string(own.rows) + " of '" + std::string(weight_name) + "'");
        if (stats.size() == 1) {
            out.emplace_back(own.rows, 0);
            continue;
        }
        Matrix pooled(own.rows, own.cols);
        for (std::size_t j = 0; j < stats.size(); ++j)
            if (j != k) pooled += stats[j].at(weight_name).gram;
        out.push_back(top_eigenvectors(pooled, r));
    }
    return out;
}

inline MergedModel cat_merge(const MergeRecipe& recipe, const Checkpoint& base, std::span<const Checkpoint> experts,
                             std::span<const ActivationStats> stats) {
    auto p = detail::prepare(recipe, base, experts);
    if (stats.size() != experts.size())
        fail(ErrorCode::recipe, "cat needs activation statistics for every expert");
    const auto r = static_cast<std::size_t>(p.recipe.param("r"));
    const auto& alpha = p.recipe.weights;

    ParameterMap merged;
    for (const auto& e : base.manifest.dense().entries) merged.emplace(e.name, std::vector<double>(shape_size(e.shape), 0.0));
    for (const auto& layer : p.base.layers) {
        const auto bases = cat_removal_bases(stats, layer.weight_name, r);
        auto& w = merged.at(layer.weight_name);
        auto& b = merged.at(layer.bias_name);
        for (std::size_t i = 0; i < experts.size(); ++i) {
            const Matrix t(layer.out_dim(), layer.in_dim(), p.deltas[i].at(layer.weight_name));
            const Matrix projected = cat_project(t, bases[i]);
            for (std::size_t k = 0; k < w.size(); ++k) w[k] += alpha[i] * projected.values[k];
            const auto& db = p.deltas[i].at(layer.bias_name);
            for (std::size_t k = 0; k < b.size(); ++k) b[k] += alpha[i] * db[k];
        }
    }
    MergedModel result;
    result.recipe_echo = p.recipe;
    result.checkpoint = assemble_from_deltas(base, merged, p.recipe.lambda, p.recipe.to_json().dump());
    return result;
}

/// CAT from calibration data: each expert's statistics come from the expert
/// itself run on its calibration set.
inline MergedModel cat_merge(const MergeRecipe& recipe, const Checkpoint& base, std::span<const Checkpoint> experts,
                             std::span<const CalibrationSet> cal) {
    detail::check_calibration(cal, experts.size());
    const auto r = static_cast<std::size_t>(recipe.resolve(experts.size()).param("r"));
    std::vector<ActivationStats> stats;
    for (std::size_t i = 0; i < experts.size(); ++i)
        stats.push_back(capture_activations(experts[i], detail::calibration_for(cal, i), r));
    return cat_merge(recipe, base, experts, stats);
}

}  // namespace consolidate
