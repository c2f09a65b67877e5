#pragma once

// Granularity dispatch for the data-free operators: split the parameters into
// groups (whole model, one depth, or one tensor), run the operator on every
// group, and reassemble base + λ·(merged task vector).

#include <map>
#include <span>
#include <string>
#include <vector>

#include "consolidate/checkpoint.hpp"
#include "consolidate/merge/operators.hpp"
#include "consolidate/merge/recipe.hpp"
#include "consolidate/parallel.hpp"
#include "consolidate/random.hpp"
#include "consolidate/task_vectors.hpp"

namespace consolidate {

struct MergedModel {
    Checkpoint checkpoint;
    MergeRecipe recipe_echo;
    /// Adaptive coefficients (MetaGPT, SCE, AdaMerging) keyed by group.
    std::map<std::string, std::vector<double>> coefficients;
    /// Objective traces (WUDI per tensor, AdaMerging).
    std::map<std::string, std::vector<double>> traces;
    std::vector<std::string> warnings;
};

struct GroupMember {
    std::string name;
    std::size_t offset = 0;
    Shape shape;
    int depth = 1;
};

struct Group {
    std::string label;
    std::vector<GroupMember> members;
    std::size_t size = 0;

    bool is_matrix() const noexcept { return members.size() == 1 && members.front().shape.size() == 2; }
};

inline std::vector<Group> make_groups(const Manifest& dense, Granularity granularity) {
    std::vector<Group> groups;
    auto add = [](Group& g, const ManifestEntry& e) {
        g.members.push_back({e.name, g.size, e.shape, e.depth});
        g.size += shape_size(e.shape);
    };
    switch (granularity) {
        case Granularity::model: {
            Group g{"model", {}, 0};
            for (const auto& e : dense.entries) add(g, e);
            groups.push_back(std::move(g));
            break;
        }
        case Granularity::layer:
            for (int l = 1; l <= dense.layer_count; ++l) {
                Group g{"depth" + std::to_string(l), {}, 0};
                for (const auto& e : dense.entries)
                    if (e.depth == l) add(g, e);
                if (!g.members.empty()) groups.push_back(std::move(g));
            }
            break;
        case Granularity::matrix:
            for (const auto& e : dense.entries) {
                Group g{e.name, {}, 0};
                add(g, e);
                groups.push_back(std::move(g));
            }
            break;
    }
    return groups;
}

/// Per-expert parameter values keyed by tensor name, in double.
using ParameterMap = std::map<std::string, std::vector<double>>;

inline ops::Flat gather(const Group& g, const ParameterMap& values) {
    ops::Flat out;
    out.reserve(g.size);
    for (const auto& m : g.members) {
        const auto& v = values.at(m.name);
        out.insert(out.end(), v.begin(), v.end());
    }
    return out;
}

/// Exact double-precision deltas expert − base over the dense parameters.
inline ParameterMap exact_deltas(const Checkpoint& base, const Checkpoint& dense_expert) {
    ParameterMap out;
    for (const auto& e : base.manifest.dense_entries()) {
        const auto b = base.at(e.name).data();
        const auto x = dense_expert.at(e.name).data();
        std::vector<double> d(b.size());
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = static_cast<double>(x[i]) - static_cast<double>(b[i]);
        out.emplace(e.name, std::move(d));
    }
    return out;
}

inline ParameterMap to_parameter_map(const TaskVector& tv) {
    ParameterMap out;
    for (const auto& [name, t] : tv.deltas) out.emplace(name, to_double(t.data()));
    return out;
}

/// θ_base + λ·delta, leaving entries with a zero delta bit-identical to the base.
inline Checkpoint assemble_from_deltas(const Checkpoint& base, const ParameterMap& delta, double lambda,
                                       const std::string& source_tag) {
    Checkpoint out;
    out.manifest = base.manifest.dense();
    out.kind = CheckpointKind::merged;
    out.source_tag = source_tag;
    for (const auto& e : out.manifest.entries) {
        const Tensor& b = base.at(e.name);
        const auto& d = delta.at(e.name);
        Tensor t = b;
        for (std::size_t i = 0; i < t.size(); ++i) {
            const double step = lambda * d[i];
            if (step != 0.0) t[i] = static_cast<float>(static_cast<double>(b[i]) + step);
        }
        require_finite(t, "merged tensor '" + e.name + "'");
        out.tensors.emplace(e.name, std::move(t));
    }
    return out;
}

namespace detail {

struct GroupOutput {
    ops::Flat values;
    std::vector<double> coefficients;
    std::vector<double> trace;
    std::string warning;
};

inline std::vector<ops::Flat> keyed_uniform_groups(const Group& g, std::uint64_t seed, std::string_view domain,
                                                   std::size_t n_experts) {
    std::vector<ops::Flat> out;
    for (std::size_t e = 0; e < n_experts; ++e) {
        ops::Flat u;
        u.reserve(g.size);
        for (const auto& m : g.members) {
            const auto part = keyed_uniforms(seed, domain, e, m.name, shape_size(m.shape));
            u.insert(u.end(), part.begin(), part.end());
        }
        out.push_back(std::move(u));
    }
    return out;
}

inline std::vector<Matrix> as_matrices(const Group& g, std::span<const ops::Flat> ts) {
    std::vector<Matrix> out;
    const auto& shape = g.members.front().shape;
    for (const auto& t : ts) out.emplace_back(shape[0], shape[1], t);
    return out;
}

inline GroupOutput run_delta_operator(const MergeRecipe& r, const Group& g, std::span<const ops::Flat> ts,
                                      std::span<const double> model_norms, int layer_count) {
    const auto& alpha = r.weights;
    GroupOutput out;
    auto sparsify_then_sum = [&](auto&& sparsify) {
        std::vector<ops::Flat> kept;
        for (std::size_t i = 0; i < ts.size(); ++i) kept.push_back(sparsify(i));
        return ops::weighted_sum(kept, alpha);
    };
    switch (r.method) {
        case Method::metagpt: {
            const auto c = ops::metagpt_coefficients(ts);
            out.values = ops::weighted_sum(ts, c.values);
            out.coefficients = c.values;
            if (c.degenerate) out.warning = g.label + ": all task vectors are zero, using uniform coefficients";
            break;
        }
        case Method::lines: {
            out.values = ops::weighted_sum(ts, alpha);
            for (const auto& m : g.members) {
                const double gamma = ops::lines_gamma(m.depth, layer_count, r.param("alpha0"), r.param("beta0"));
                for (std::size_t k = 0; k < shape_size(m.shape); ++k) out.values[m.offset + k] *= gamma;
            }
            break;
        }
        case Method::dare: {
            const auto u = keyed_uniform_groups(g, r.seed, "dare", ts.size());
            out.values = sparsify_then_sum([&](std::size_t i) { return ops::dare_sparsify(ts[i], r.param("p"), u[i]); });
            break;
        }
        case Method::breadcrumbs:
            out.values = sparsify_then_sum(
                [&](std::size_t i) { return ops::breadcrumbs_mask(ts[i], r.param("beta"), r.param("gamma")); });
            break;
        case Method::ties:
            out.values = ops::ties_merge(ts, r.param("k"));
            break;
        case Method::consensus_ta:
            out.values = ops::consensus_ta(ts, alpha, r.param("lambda_mask"),
                                           static_cast<std::size_t>(r.param("min_support")));
            break;
        case Method::tadrop:
            out.values = sparsify_then_sum([&](std::size_t i) { return ops::tadrop_sparsify(ts[i], r.param("rho")); });
            break;
        case Method::cabs:
            out.values = ops::cabs_merge(ts, model_norms, static_cast<std::size_t>(r.param("n")),
                                         static_cast<std::size_t>(r.param("m")))
                             .merged;
            break;
        case Method::pcb:
            out.values = ops::pcb_merge(ts, r.param("r"));
            break;
        case Method::della: {
            const auto u = keyed_uniform_groups(g, r.seed, "della", ts.size());
            std::vector<ops::Flat> dropped;
            for (std::size_t i = 0; i < ts.size(); ++i)
                dropped.push_back(ops::della_sparsify(ts[i], r.param("p_min"), r.param("p_max"), u[i]));
            out.values = ops::elect_and_mean(dropped);
            break;
        }
        case Method::sce: {
            auto s = ops::sce_merge(ts, r.param("p"));
            out.values = std::move(s.merged);
            out.coefficients = std::move(s.coefficients);
            break;
        }
        case Method::tsv:
        case Method::iso_cts:
        case Method::impart:
        case Method::wudi: {
            if (!g.is_matrix()) {
                out.values = ops::weighted_sum(ts, alpha);
                break;
            }
            const auto mats = as_matrices(g, ts);
            Matrix merged;
            if (r.method == Method::tsv) {
                const auto k = static_cast<std::size_t>(r.param("rank"));
                merged = ops::tsv_merge(mats, k ? std::optional<std::size_t>(k) : std::nullopt);
            } else if (r.method == Method::iso_cts) {
                const auto k = static_cast<std::size_t>(r.param("rank"));
                merged = ops::iso_cts_merge(mats, k ? std::optional<std::size_t>(k) : std::nullopt);
            } else if (r.method == Method::impart) {
                merged = ops::impart_merge(mats, alpha, r.param("tau"));
            } else {
                auto w = ops::wudi_merge(mats, static_cast<std::size_t>(r.param("iters")), r.param("step"));
                if (w.objective.back() > w.objective.front())
                    fail(ErrorCode::validation, "wudi objective increased on " + g.label);
                merged = std::move(w.merged);
                out.trace = std::move(w.objective);
            }
            out.values = std::move(merged.values);
            break;
        }
        default:
            fail(ErrorCode::recipe, std::string(to_string(r.method)) + " is not a data-free delta operator");
    }
    return out;
}

}  // namespace detail

/// Applies a data-free recipe. `threads` > 1 processes groups concurrently;
/// the result is identical to a sequential run.
inline MergedModel merge_data_free(const MergeRecipe& recipe, const Checkpoint& base,
                                   std::span<const Checkpoint> experts, unsigned threads = 1) {
    validate_compatible(base, experts);
    const MergeRecipe r = recipe.resolve(experts.size());
    if (!method_info(r.method).data_free)
        fail(ErrorCode::recipe, std::string(to_string(r.method)) + " needs calibration data");

    std::vector<Checkpoint> dense;
    for (const auto& e : experts) dense.push_back(materialize_lowrank(e));

    std::vector<ParameterMap> deltas;
    if (r.normalize) {
        std::vector<TaskVector> tvs;
        for (const auto& e : experts) tvs.push_back(compute_task_vector(base, e));
        for (const auto& tv : normalize_task_vectors(std::move(tvs), *r.normalize)) deltas.push_back(to_parameter_map(tv));
    } else {
        for (const auto& d : dense) deltas.push_back(exact_deltas(base, d));
    }

    std::vector<double> model_norms;
    for (const auto& d : deltas) {
        double sq = 0.0;
        for (const auto& [name, v] : d) sq += dot(v, v);
        model_norms.push_back(std::sqrt(sq));
    }

    const Manifest manifest = base.manifest.dense();
    const auto groups = make_groups(manifest, *r.granularity);
    std::vector<detail::GroupOutput> outputs(groups.size());
    const bool raw = !is_delta_based(r.method);

    // Raw parameters for the interpolating operators.
    std::vector<ParameterMap> thetas;
    if (raw) {
        for (std::size_t i = 0; i < experts.size(); ++i) {
            ParameterMap p;
            for (const auto& e : manifest.entries) {
                std::vector<double> v = to_double(r.normalize ? base.at(e.name).data() : dense[i].at(e.name).data());
                if (r.normalize)
                    for (std::size_t k = 0; k < v.size(); ++k) v[k] += deltas[i].at(e.name)[k];
                p.emplace(e.name, std::move(v));
            }
            thetas.push_back(std::move(p));
        }
    }

    parallel_for(groups.size(), threads, [&](std::size_t gi) {
        const Group& g = groups[gi];
        std::vector<ops::Flat> ts;
        for (const auto& src : raw ? thetas : deltas) ts.push_back(gather(g, src));
        if (r.method == Method::average) {
            outputs[gi].values = ops::linear_average(ts, r.weights);
        } else if (r.method == Method::slerp) {
            outputs[gi].values = ops::slerp_fold(ts, r.param("t"));
        } else {
            outputs[gi] = detail::run_delta_operator(r, g, ts, model_norms, manifest.layer_count);
        }
    });

    MergedModel result;
    result.recipe_echo = r;
    const std::string tag = r.to_json().dump();
    ParameterMap merged;
    for (std::size_t gi = 0; gi < groups.size(); ++gi) {
        const auto& g = groups[gi];
        for (const auto& m : g.members) {
            const auto first = outputs[gi].values.begin() + static_cast<std::ptrdiff_t>(m.offset);
            merged.emplace(m.name, std::vector<double>(first, first + static_cast<std::ptrdiff_t>(shape_size(m.shape))));
        }
        if (!outputs[gi].coefficients.empty()) result.coefficients[g.label] = outputs[gi].coefficients;
        if (!outputs[gi].trace.empty()) result.traces[g.label] = outputs[gi].trace;
        if (!outputs[gi].warning.empty()) result.warnings.push_back(outputs[gi].warning);
    }

    if (raw) {
        Checkpoint out;
        out.manifest = manifest;
        out.kind = CheckpointKind::merged;
        out.source_tag = tag;
        for (const auto& e : manifest.entries) {
            Tensor t(e.shape, to_float(merged.at(e.name)));
            require_finite(t, "merged tensor '" + e.name + "'");
            out.tensors.emplace(e.name, std::move(t));
        }
        result.checkpoint = std::move(out);
    } else {
        result.checkpoint = assemble_from_deltas(base, merged, r.lambda, tag);
    }
    return result;
}

}  // namespace consolidate
