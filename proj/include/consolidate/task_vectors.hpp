#pragma once

// Task vectors T = θ_expert − θ_base, their normalization, and two geometry
// diagnostics: the per-depth update-norm profile and principal angles between
// update subspaces.

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <map>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "consolidate/checkpoint.hpp"
#include "consolidate/linalg.hpp"

namespace consolidate {

struct TaskVector {
    Manifest manifest;  // dense manifest shared with the base
    std::map<std::string, Tensor> deltas;
    std::string expert_tag;

    const Tensor& at(std::string_view name) const {
        auto it = deltas.find(std::string(name));
        if (it == deltas.end()) fail(ErrorCode::validation, "task vector has no tensor '" + std::string(name) + "'");
        return it->second;
    }
};

/// Dense parameters of a low-rank expert with W + scale·(b·a) folded in.
/// Dense checkpoints are returned unchanged.
inline Checkpoint materialize_lowrank(const Checkpoint& c) {
    if (!c.is_lowrank()) return c;
    const double scale = c.manifest.lowrank->scale();
    Checkpoint out;
    out.manifest = c.manifest.dense();
    out.kind = c.kind;
    out.source_tag = c.source_tag;
    for (const auto& e : out.manifest.entries) out.tensors.emplace(e.name, c.at(e.name));
    std::map<std::string, const Tensor*> a, b;
    for (const auto& e : c.manifest.entries) {
        if (e.role == Role::lowrank_a) a[e.target] = &c.at(e.name);
        if (e.role == Role::lowrank_b) b[e.target] = &c.at(e.name);
    }
    for (const auto& [target, fa] : a) {
        auto fb = b.find(target);
        if (fb == b.end()) fail(ErrorCode::validation, "low-rank weight '" + target + "' lacks its b factor");
        const Matrix delta = matmul(Matrix::from_tensor(*fb->second), Matrix::from_tensor(*fa));
        Tensor& w = out.tensors.at(target);
        for (std::size_t i = 0; i < w.size(); ++i)
            w[i] = static_cast<float>(static_cast<double>(w[i]) + scale * delta.values[i]);
    }
    return out;
}

inline TaskVector compute_task_vector(const Checkpoint& base, const Checkpoint& expert) {
    validate_compatible(base, std::span<const Checkpoint>(&expert, 1));
    const Checkpoint dense = materialize_lowrank(expert);
    TaskVector tv{base.manifest.dense(), {}, expert.source_tag};
    for (const auto& e : tv.manifest.entries) {
        const Tensor& b = base.at(e.name);
        const Tensor& x = dense.at(e.name);
        Tensor d(e.shape);
        for (std::size_t i = 0; i < d.size(); ++i) d[i] = x[i] - b[i];
        tv.deltas.emplace(e.name, std::move(d));
    }
    return tv;
}

inline double model_norm(const TaskVector& tv) {
    double acc = 0.0;
    for (const auto& [name, t] : tv.deltas) {
        const double n = frobenius_norm(t);
        acc += n * n;
    }
    return std::sqrt(acc);
}

enum class NormLevel { model, matrix };

namespace detail {

inline double median(std::vector<double> v) {
    std::sort(v.begin(), v.end());
    const std::size_t n = v.size();
    return n % 2 ? v[n / 2] : 0.5 * (v[n / 2 - 1] + v[n / 2]);
}

inline void scale_tensor(Tensor& t, double s) {
    for (auto& v : t.data()) v = static_cast<float>(static_cast<double>(v) * s);
}

}  // namespace detail

/// Rescales each task vector to the median norm across experts. Zero-norm
/// vectors are left untouched but their zero norm takes part in the median.
inline std::vector<TaskVector> normalize_task_vectors(std::vector<TaskVector> tvs, NormLevel level) {
    if (tvs.empty()) return tvs;
    if (level == NormLevel::model) {
        std::vector<double> norms;
        for (const auto& tv : tvs) norms.push_back(model_norm(tv));
        const double target = detail::median(norms);
        for (std::size_t i = 0; i < tvs.size(); ++i) {
            if (norms[i] == 0.0) continue;
            for (auto& [name, t] : tvs[i].deltas) detail::scale_tensor(t, target / norms[i]);
        }
        return tvs;
    }
    for (const auto& e : tvs.front().manifest.entries) {
        std::vector<double> norms;
        for (const auto& tv : tvs) norms.push_back(frobenius_norm(tv.at(e.name)));
        const double target = detail::median(norms);
        for (std::size_t i = 0; i < tvs.size(); ++i) {
            if (norms[i] == 0.0) continue;
            detail::scale_tensor(tvs[i].deltas.at(e.name), target / norms[i]);
        }
    }
    return tvs;
}

struct LayerNormRow {
    std::string expert;
    int depth = 0;
    double norm = 0.0;
};

/// Frobenius norm of all deltas (weights and biases) sharing a depth, one row
/// per (expert, depth), ordered by expert tag then depth.
inline std::vector<LayerNormRow> layer_norm_profile(std::span<const TaskVector> tvs) {
    std::vector<LayerNormRow> rows;
    for (const auto& tv : tvs) {
        std::map<int, double> sq;
        for (int l = 1; l <= tv.manifest.layer_count; ++l) sq[l] = 0.0;
        for (const auto& e : tv.manifest.entries) {
            const double n = frobenius_norm(tv.at(e.name));
            sq[e.depth] += n * n;
        }
        for (auto [depth, s] : sq) rows.push_back({tv.expert_tag, depth, std::sqrt(s)});
    }
    std::stable_sort(rows.begin(), rows.end(), [](const auto& a, const auto& b) {
        return a.expert != b.expert ? a.expert < b.expert : a.depth < b.depth;
    });
    return rows;
}

inline std::string format_g6(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.6g", v);
    return buf;
}

inline std::string profile_csv(std::span<const LayerNormRow> rows) {
    std::string out = "expert,depth,norm\n";
    for (const auto& r : rows) out += r.expert + "," + std::to_string(r.depth) + "," + format_g6(r.norm) + "\n";
    return out;
}

/// Principal angles (radians, ascending) between the top-k right-singular
/// subspaces of two update matrices.
inline std::vector<double> subspace_angles(const Matrix& t1, const Matrix& t2, std::size_t k) {
    if (t1.cols != t2.cols) fail(ErrorCode::shape, "subspace_angles: row spaces live in different dimensions");
    const SvdResult a = svd(t1);
    const SvdResult b = svd(t2);
    const std::size_t ra = numerical_rank(a.s);
    const std::size_t rb = numerical_rank(b.s);
    if (k == 0 || k > ra || k > rb)
        fail(ErrorCode::rank, "subspace_angles: k=" + std::to_string(k) + " exceeds numerical ranks " +
                                  std::to_string(ra) + " and " + std::to_string(rb));
    const Matrix va = a.v.left_columns(k);
    const Matrix vb = b.v.left_columns(k);
    const Matrix cross = matmul_tn(va, vb);
    // acos loses half the digits near zero, so small angles come from the
    // sines: singular values of the part of vb orthogonal to va.
    const Matrix residual = vb - matmul(va, cross);
    const SvdResult c = svd(cross);
    const SvdResult r = svd(residual);
    std::vector<double> angles;
    for (std::size_t i = 0; i < k; ++i) {
        const double cosine = std::clamp(c.s[i], 0.0, 1.0);
        const double sine = std::clamp(r.s[k - 1 - i], 0.0, 1.0);
        angles.push_back(cosine > std::sqrt(0.5) ? std::asin(sine) : std::acos(cosine));
    }
    std::sort(angles.begin(), angles.end());
    return angles;
}

inline std::vector<double> subspace_angles(const Tensor& t1, const Tensor& t2, std::size_t k) {
    return subspace_angles(Matrix::from_tensor(t1), Matrix::from_tensor(t2), k);
}

}  // namespace consolidate
