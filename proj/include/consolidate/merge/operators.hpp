#pragma once

// Data-free merging operators. Each works on one granularity group: a flat
// vector per expert (or a matrix for the spectral operators) and returns the
// merged task vector for that group. Averaging and SLERP are the exceptions:
// they interpolate raw parameters.
//
// Ranking rules shared by all operators: magnitude/score ties break by
// ascending flat index, and "keep a fraction f of n entries" keeps
// ceil(f·n) entries.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "consolidate/error.hpp"
#include "consolidate/linalg.hpp"

namespace consolidate::ops {

using Flat = std::vector<double>;

inline int sign(double v) noexcept { return (v > 0.0) - (v < 0.0); }

inline std::size_t keep_count(double fraction, std::size_t n) {
    const double k = std::ceil(fraction * static_cast<double>(n) - 1e-9);
    return std::min(n, static_cast<std::size_t>(std::max(0.0, k)));
}

/// Indices sorted by descending key, ties by ascending index.
inline std::vector<std::size_t> order_desc(std::span<const double> key) {
    std::vector<std::size_t> idx(key.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return key[a] > key[b]; });
    return idx;
}

/// Indices sorted by ascending key, ties by ascending index.
inline std::vector<std::size_t> order_asc(std::span<const double> key) {
    std::vector<std::size_t> idx(key.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](auto a, auto b) { return key[a] < key[b]; });
    return idx;
}

inline Flat magnitudes(std::span<const double> t) {
    Flat m(t.size());
    std::transform(t.begin(), t.end(), m.begin(), [](double v) { return std::abs(v); });
    return m;
}

inline void check_same_size(std::span<const Flat> ts) {
    for (const auto& t : ts)
        if (t.size() != ts.front().size()) fail(ErrorCode::shape, "task vectors differ in length");
}

inline Flat weighted_sum(std::span<const Flat> ts, std::span<const double> alpha) {
    check_same_size(ts);
    Flat out(ts.front().size(), 0.0);
    for (std::size_t i = 0; i < ts.size(); ++i)
        for (std::size_t j = 0; j < out.size(); ++j) out[j] += alpha[i] * ts[i][j];
    return out;
}

// ---------------------------------------------------------------------------
// Interpolation

/// Convex combination ∑ αᵢ θᵢ.
inline Flat linear_average(std::span<const Flat> thetas, std::span<const double> alpha) {
    if (thetas.size() != alpha.size()) fail(ErrorCode::recipe, "one weight per expert is required");
    double sum = 0.0;
    for (double a : alpha) {
        if (!(a >= 0.0)) fail(ErrorCode::recipe, "average weights must be non-negative");
        sum += a;
    }
    if (std::abs(sum - 1.0) > 1e-6) fail(ErrorCode::recipe, "average weights must sum to 1");
    return weighted_sum(thetas, alpha);
}

/// Spherical interpolation between two parameter vectors; linear when the
/// angle is below 1e-6 rad.
inline Flat slerp(std::span<const double> a, std::span<const double> b, double t) {
    if (a.size() != b.size()) fail(ErrorCode::shape, "slerp operands differ in length");
    const double na = frobenius_norm(a);
    const double nb = frobenius_norm(b);
    if (na == 0.0 || nb == 0.0) fail(ErrorCode::degenerate, "slerp of a zero-norm parameter group");
    const double cosine = std::clamp(dot(a, b) / (na * nb), -1.0, 1.0);
    const double omega = std::acos(cosine);
    Flat out(a.size());
    if (omega < 1e-6) {
        for (std::size_t i = 0; i < a.size(); ++i) out[i] = (1.0 - t) * a[i] + t * b[i];
        return out;
    }
    const double so = std::sin(omega);
    const double wa = std::sin((1.0 - t) * omega) / so;
    const double wb = std::sin(t * omega) / so;
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = wa * a[i] + wb * b[i];
    return out;
}

/// Left fold slerp(slerp(θ₁, θ₂, t), θ₃, t)... for more than two experts.
inline Flat slerp_fold(std::span<const Flat> thetas, double t) {
    if (thetas.empty()) fail(ErrorCode::recipe, "slerp needs at least one expert");
    Flat acc = thetas.front();
    for (std::size_t i = 1; i < thetas.size(); ++i) acc = slerp(acc, thetas[i], t);
    return acc;
}

// ---------------------------------------------------------------------------
// Coefficient rules

struct Coefficients {
    std::vector<double> values;
    bool degenerate = false;  // all inputs were zero
};

/// λᵢ = ‖Tᵢ‖² / ∑ⱼ ‖Tⱼ‖²; uniform when every task vector is zero.
inline Coefficients metagpt_coefficients(std::span<const Flat> ts) {
    Coefficients c;
    double total = 0.0;
    for (const auto& t : ts) {
        const double n = dot(t, t);
        c.values.push_back(n);
        total += n;
    }
    if (total == 0.0) {
        c.values.assign(ts.size(), 1.0 / static_cast<double>(ts.size()));
        c.degenerate = true;
        return c;
    }
    for (auto& v : c.values) v /= total;
    return c;
}

/// Depth-dependent LiNeS scale γ_l = α₀ + β₀·(l−1)/(L−1), α₀+β₀ when L = 1.
inline double lines_gamma(int depth, int layer_count, double alpha0, double beta0) {
    if (layer_count <= 1) return alpha0 + beta0;
    return alpha0 + beta0 * static_cast<double>(depth - 1) / static_cast<double>(layer_count - 1);
}

// ---------------------------------------------------------------------------
// Sparsifiers (one expert at a time)

/// Drops each entry with probability p (entry kept iff u < 1−p) and rescales
/// survivors by 1/(1−p).
inline Flat dare_sparsify(std::span<const double> t, double p, std::span<const double> uniforms) {
    if (!(p >= 0.0 && p < 1.0)) fail(ErrorCode::recipe, "dare drop rate must lie in [0, 1)");
    const double keep = 1.0 - p;
    Flat out(t.size(), 0.0);
    for (std::size_t i = 0; i < t.size(); ++i)
        if (uniforms[i] < keep) out[i] = t[i] / keep;
    return out;
}

/// Keeps entries whose ascending magnitude rank r (1-based) satisfies
/// ⌊β·n⌋ < r ≤ ⌊γ·n⌋.
inline Flat breadcrumbs_mask(std::span<const double> t, double beta, double gamma) {
    if (!(beta >= 0.0 && beta < gamma && gamma <= 1.0)) fail(ErrorCode::recipe, "breadcrumbs needs 0 <= beta < gamma <= 1");
    const std::size_t n = t.size();
    const auto lo = static_cast<std::size_t>(std::floor(beta * static_cast<double>(n) + 1e-9));
    const auto hi = static_cast<std::size_t>(std::floor(gamma * static_cast<double>(n) + 1e-9));
    const auto order = order_asc(magnitudes(t));
    Flat out(n, 0.0);
    for (std::size_t pos = 0; pos < n; ++pos) {
        const std::size_t rank = pos + 1;
        if (rank > lo && rank <= hi) out[order[pos]] = t[order[pos]];
    }
    return out;
}

/// Top-k fraction by magnitude; the rest zeroed.
inline Flat trim_top_k(std::span<const double> t, double k) {
    const auto order = order_desc(magnitudes(t));
    const std::size_t keep = keep_count(k, t.size());
    Flat out(t.size(), 0.0);
    for (std::size_t i = 0; i < keep; ++i) out[order[i]] = t[order[i]];
    return out;
}

/// Keeps the fewest largest entries whose squared mass reaches ρ·‖t‖², then
/// rescales them so the vector keeps its norm.
inline Flat tadrop_sparsify(std::span<const double> t, double rho) {
    const auto order = order_desc(magnitudes(t));
    std::vector<double> cum(t.size());
    double acc = 0.0;
    for (std::size_t i = 0; i < order.size(); ++i) cum[i] = (acc += t[order[i]] * t[order[i]]);
    Flat out(t.size(), 0.0);
    if (acc == 0.0) return out;
    const double threshold = rho * acc;
    std::size_t keep = 0;
    while (keep < order.size() && cum[keep] < threshold) ++keep;
    keep = std::min(keep + 1, order.size());
    const double rescale = std::sqrt(acc / cum[keep - 1]);
    for (std::size_t i = 0; i < keep; ++i) out[order[i]] = t[order[i]] * rescale;
    return out;
}

/// Magnitude-ranked random drop: keep-probability rises linearly from p_min
/// (smallest magnitude) to p_max (largest); survivors are divided by their
/// keep-probability.
inline Flat della_sparsify(std::span<const double> t, double p_min, double p_max, std::span<const double> uniforms) {
    if (!(p_min > 0.0 && p_min <= p_max && p_max <= 1.0)) fail(ErrorCode::recipe, "della needs 0 < p_min <= p_max <= 1");
    const std::size_t n = t.size();
    const auto order = order_asc(magnitudes(t));
    Flat out(n, 0.0);
    for (std::size_t pos = 0; pos < n; ++pos) {
        const double frac = n > 1 ? static_cast<double>(pos) / static_cast<double>(n - 1) : 1.0;
        const double keep = p_min + (p_max - p_min) * frac;
        const std::size_t i = order[pos];
        if (uniforms[i] < keep) out[i] = t[i] / keep;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Sign consensus

/// s = sign(∑ᵢ sign(tᵢ)) per element; merged element is the mean of the
/// entries whose sign equals s, zero when s = 0 or none match.
inline Flat elect_and_mean(std::span<const Flat> ts) {
    check_same_size(ts);
    Flat out(ts.front().size(), 0.0);
    for (std::size_t j = 0; j < out.size(); ++j) {
        int vote = 0;
        for (const auto& t : ts) vote += sign(t[j]);
        const int s = sign(vote);
        if (s == 0) continue;
        double sum = 0.0;
        int count = 0;
        for (const auto& t : ts) {
            if (sign(t[j]) == s) {
                sum += t[j];
                ++count;
            }
        }
        if (count) out[j] = sum / count;
    }
    return out;
}

inline Flat ties_merge(std::span<const Flat> ts, double k) {
    std::vector<Flat> trimmed;
    for (const auto& t : ts) trimmed.push_back(trim_top_k(t, k));
    return elect_and_mean(trimmed);
}

/// Per-task masks mᵢ = 1[|tᵢ| ≥ λ·|∑ⱼtⱼ − tᵢ|]; entries supported by fewer than
/// `min_support` tasks are dropped from the weighted sum.
inline Flat consensus_ta(std::span<const Flat> ts, std::span<const double> alpha, double lambda_mask,
                         std::size_t min_support) {
    if (min_support > ts.size()) fail(ErrorCode::recipe, "consensus_ta min_support exceeds the number of experts");
    const Flat total = weighted_sum(ts, std::vector<double>(ts.size(), 1.0));
    Flat out = weighted_sum(ts, alpha);
    for (std::size_t j = 0; j < out.size(); ++j) {
        std::size_t support = 0;
        for (const auto& t : ts)
            if (std::abs(t[j]) >= lambda_mask * std::abs(total[j] - t[j])) ++support;
        if (support < min_support) out[j] = 0.0;
    }
    return out;
}

// ---------------------------------------------------------------------------
// Score-based and balanced sparsification

struct CabsResult {
    Flat merged;
    std::vector<Flat> kept;  // per expert, after rescaling
};

/// n:m balanced, conflict-aware masks. Experts claim entries in order of
/// descending `priority` (ties by index); within each block of m entries an
/// expert keeps its n largest entries not yet claimed. Each kept vector is
/// rescaled back to its expert's norm, then all are summed.
inline CabsResult cabs_merge(std::span<const Flat> ts, std::span<const double> priority, std::size_t n,
                             std::size_t m) {
    check_same_size(ts);
    if (n < 1 || n > m) fail(ErrorCode::recipe, "cabs needs 1 <= n <= m");
    if (n * ts.size() > m)
        fail(ErrorCode::infeasible, "cabs: " + std::to_string(ts.size()) + " experts x " + std::to_string(n) +
                                        " entries do not fit in blocks of " + std::to_string(m));
    const std::size_t size = ts.front().size();
    const auto expert_order = order_desc(priority);
    std::vector<bool> claimed(size, false);
    CabsResult r{Flat(size, 0.0), std::vector<Flat>(ts.size(), Flat(size, 0.0))};
    for (std::size_t start = 0; start < size; start += m) {
        const std::size_t end = std::min(size, start + m);
        for (std::size_t e : expert_order) {
            std::vector<std::size_t> free;
            for (std::size_t j = start; j < end; ++j)
                if (!claimed[j]) free.push_back(j);
            std::stable_sort(free.begin(), free.end(),
                             [&](auto a, auto b) { return std::abs(ts[e][a]) > std::abs(ts[e][b]); });
            for (std::size_t c = 0; c < std::min(n, free.size()); ++c) {
                claimed[free[c]] = true;
                r.kept[e][free[c]] = ts[e][free[c]];
            }
        }
    }
    for (std::size_t e = 0; e < ts.size(); ++e) {
        const double full = frobenius_norm(ts[e]);
        const double kept = frobenius_norm(r.kept[e]);
        if (kept > 0.0)
            for (auto& v : r.kept[e]) v *= full / kept;
        for (std::size_t j = 0; j < size; ++j) r.merged[j] += r.kept[e][j];
    }
    return r;
}

inline Flat softmax(std::span<const double> x) {
    Flat out(x.size());
    if (x.empty()) return out;
    const double mx = *std::max_element(x.begin(), x.end());
    double z = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) z += (out[i] = std::exp(x[i] - mx));
    for (auto& v : out) v /= z;
    return out;
}

/// Importance scores for PCB: intraᵢ ⊙ interᵢ with
/// intraᵢ = softmax(n·t̄ᵢ²), interᵢ = ∑ⱼ softmax(t̄ᵢ ⊙ t̄ⱼ), t̄ = t / max|t|.
inline std::vector<Flat> pcb_scores(std::span<const Flat> ts) {
    check_same_size(ts);
    const std::size_t size = ts.front().size();
    const double n_tasks = static_cast<double>(ts.size());
    std::vector<Flat> unit;
    for (const auto& t : ts) {
        const auto mags = magnitudes(t);
        const double mx = mags.empty() ? 0.0 : *std::max_element(mags.begin(), mags.end());
        Flat u(size, 0.0);
        if (mx > 0.0)
            for (std::size_t j = 0; j < size; ++j) u[j] = t[j] / mx;
        unit.push_back(std::move(u));
    }
    std::vector<Flat> scores;
    for (std::size_t i = 0; i < ts.size(); ++i) {
        Flat self(size);
        for (std::size_t j = 0; j < size; ++j) self[j] = n_tasks * unit[i][j] * unit[i][j];
        const Flat intra = softmax(self);
        Flat inter(size, 0.0);
        for (std::size_t k = 0; k < ts.size(); ++k) {
            Flat cross(size);
            for (std::size_t j = 0; j < size; ++j) cross[j] = unit[i][j] * unit[k][j];
            const Flat s = softmax(cross);
            for (std::size_t j = 0; j < size; ++j) inter[j] += s[j];
        }
        Flat score(size);
        for (std::size_t j = 0; j < size; ++j) score[j] = intra[j] * inter[j];
        scores.push_back(std::move(score));
    }
    return scores;
}

/// Keeps each expert's top-r fraction by PCB score; merged entry is the
/// score-weighted mean of the kept values.
inline Flat pcb_merge(std::span<const Flat> ts, double r) {
    const auto scores = pcb_scores(ts);
    const std::size_t size = ts.front().size();
    Flat num(size, 0.0), den(size, 0.0);
    for (std::size_t i = 0; i < ts.size(); ++i) {
        const auto order = order_desc(scores[i]);
        const std::size_t keep = keep_count(r, size);
        for (std::size_t c = 0; c < keep; ++c) {
            const std::size_t j = order[c];
            num[j] += scores[i][j] * ts[i][j];
            den[j] += scores[i][j];
        }
    }
    Flat out(size, 0.0);
    for (std::size_t j = 0; j < size; ++j)
        if (den[j] != 0.0) out[j] = num[j] / den[j];
    return out;
}

struct SceResult {
    Flat merged;
    std::vector<double> coefficients;
};

/// Select the top-p fraction of entries by cross-expert variance, weight
/// experts by their selected squared mass, erase sign-conflicting entries.
inline SceResult sce_merge(std::span<const Flat> ts, double p) {
    check_same_size(ts);
    const std::size_t size = ts.front().size();
    const double n = static_cast<double>(ts.size());
    Flat variance(size, 0.0);
    for (std::size_t j = 0; j < size; ++j) {
        double mean = 0.0;
        for (const auto& t : ts) mean += t[j];
        mean /= n;
        for (const auto& t : ts) variance[j] += (t[j] - mean) * (t[j] - mean);
        variance[j] /= n;
    }
    const auto order = order_desc(variance);
    std::vector<bool> selected(size, false);
    for (std::size_t c = 0; c < keep_count(p, size); ++c) selected[order[c]] = true;

    SceResult r{Flat(size, 0.0), std::vector<double>(ts.size(), 0.0)};
    double total = 0.0;
    for (std::size_t i = 0; i < ts.size(); ++i) {
        for (std::size_t j = 0; j < size; ++j)
            if (selected[j]) r.coefficients[i] += ts[i][j] * ts[i][j];
        total += r.coefficients[i];
    }
    for (auto& c : r.coefficients) c = total > 0.0 ? c / total : 1.0 / n;

    for (std::size_t j = 0; j < size; ++j) {
        if (!selected[j]) continue;
        double sum = 0.0;
        for (const auto& t : ts) sum += t[j];
        const int s = sign(sum);
        if (s == 0) continue;
        double num = 0.0, den = 0.0;
        for (std::size_t i = 0; i < ts.size(); ++i) {
            if (sign(ts[i][j]) != s) continue;
            num += r.coefficients[i] * ts[i][j];
            den += r.coefficients[i];
        }
        if (den > 0.0) r.merged[j] = num / den;
    }
    return r;
}

// ---------------------------------------------------------------------------
// Spectral operators (rank-2 groups)

inline void check_same_shape(std::span<const Matrix> ts) {
    if (ts.empty()) fail(ErrorCode::recipe, "no task matrices");
    for (const auto& t : ts)
        if (t.rows != ts.front().rows || t.cols != ts.front().cols)
            fail(ErrorCode::shape, "task matrices differ in shape");
}

/// Rank-k truncation of every task, joint decorrelation of the stacked
/// √s-scaled left and right bases (nearest partial isometry), and the sum of
/// the per-task pieces in that decorrelated frame.
inline Matrix tsv_merge(std::span<const Matrix> ts, std::optional<std::size_t> rank = std::nullopt) {
    check_same_shape(ts);
    const std::size_t m = ts.front().rows;
    const std::size_t n = ts.front().cols;
    const std::size_t full = std::min(m, n);
    const std::size_t k = rank.value_or(std::max<std::size_t>(1, full / ts.size()));
    if (k == 0 || k > full) fail(ErrorCode::rank, "tsv rank " + std::to_string(k) + " exceeds min(m, n) = " + std::to_string(full));

    const std::size_t cols = k * ts.size();
    Matrix ucat(m, cols), vcat(n, cols);
    std::vector<double> scat(cols, 0.0);
    for (std::size_t i = 0; i < ts.size(); ++i) {
        const SvdResult d = svd(ts[i]);
        for (std::size_t c = 0; c < k; ++c) {
            const std::size_t col = i * k + c;
            const double root = std::sqrt(d.s[c]);
            scat[col] = d.s[c];
            for (std::size_t r = 0; r < m; ++r) ucat(r, col) = d.u(r, c) * root;
            for (std::size_t r = 0; r < n; ++r) vcat(r, col) = d.v(r, c) * root;
        }
    }
    const Matrix uo = polar_factor(ucat);
    const Matrix vo = polar_factor(vcat);
    Matrix out(m, n);
    for (std::size_t c = 0; c < cols; ++c) {
        if (scat[c] == 0.0) continue;
        for (std::size_t r = 0; r < m; ++r) {
            const double ur = uo(r, c) * scat[c];
            if (ur == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) out(r, j) += ur * vo(j, c);
        }
    }
    return out;
}

/// Sum of tasks with its top-k nonzero singular values replaced by their mean
/// (k defaults to the numerical rank); remaining directions are dropped.
inline Matrix iso_cts_merge(std::span<const Matrix> ts, std::optional<std::size_t> rank = std::nullopt) {
    check_same_shape(ts);
    Matrix sum(ts.front().rows, ts.front().cols);
    for (const auto& t : ts) sum += t;
    SvdResult d = svd(sum);
    const std::size_t nonzero = numerical_rank(d.s);
    if (nonzero == 0) return Matrix(sum.rows, sum.cols);
    const std::size_t k = std::min(rank.value_or(nonzero), nonzero);
    if (k == 0) fail(ErrorCode::rank, "iso_cts rank must be positive");
    double mean = 0.0;
    for (std::size_t c = 0; c < k; ++c) mean += d.s[c];
    mean /= static_cast<double>(k);
    for (std::size_t c = 0; c < d.s.size(); ++c) d.s[c] = c < k ? mean : 0.0;
    return reconstruct(d, k);
}

/// Keeps the shortest prefix of singular components whose cumulative energy
/// reaches τ of the total.
inline std::size_t energy_rank(std::span<const double> s, double tau) {
    double total = 0.0;
    for (double x : s) total += x * x;
    if (total == 0.0) return 0;
    double cum = 0.0;
    for (std::size_t c = 0; c < s.size(); ++c) {
        cum += s[c] * s[c];
        if (cum >= tau * total * (1.0 - 1e-12)) return c + 1;
    }
    return s.size();
}

inline Matrix impart_truncate(const Matrix& t, double tau) {
    const SvdResult d = svd(t);
    return reconstruct(d, energy_rank(d.s, tau));
}

inline Matrix impart_merge(std::span<const Matrix> ts, std::span<const double> alpha, double tau) {
    check_same_shape(ts);
    Matrix out(ts.front().rows, ts.front().cols);
    for (std::size_t i = 0; i < ts.size(); ++i) out += impart_truncate(ts[i], tau) * alpha[i];
    return out;
}

struct WudiResult {
    Matrix merged;
    std::vector<double> objective;  // J before the first step, then after each iteration
};

/// Gradient descent on J(M) = ∑ᵢ ‖(M − Tᵢ)Pᵢ‖²_F / ‖Tᵢ‖²_F from M = ∑Tᵢ, where Pᵢ
/// projects onto the row space of Tᵢ. A step that would raise J is halved, up
/// to five times per iteration; if it still raises J the iterate is kept.
inline WudiResult wudi_merge(std::span<const Matrix> ts, std::size_t iters, double step) {
    check_same_shape(ts);
    const std::size_t m = ts.front().rows;
    const std::size_t n = ts.front().cols;

    struct Term {
        const Matrix* task;
        Matrix projector;
        double weight;
    };
    std::vector<Term> terms;
    Matrix current(m, n);
    for (const auto& t : ts) {
        current += t;
        const double sq = dot(t.values, t.values);
        if (sq == 0.0) continue;
        const SvdResult d = svd(t);
        const Matrix basis = d.v.left_columns(numerical_rank(d.s));
        terms.push_back({&t, matmul_nt(basis, basis), 1.0 / sq});
    }

    auto objective = [&](const Matrix& x) {
        double j = 0.0;
        for (const auto& term : terms) {
            const Matrix r = matmul(x - *term.task, term.projector);
            j += term.weight * dot(r.values, r.values);
        }
        return j;
    };

    WudiResult result;
    double j_now = objective(current);
    result.objective.push_back(j_now);
    for (std::size_t it = 0; it < iters; ++it) {
        Matrix grad(m, n);
        for (const auto& term : terms) grad += matmul(current - *term.task, term.projector) * (2.0 * term.weight);
        for (int halving = 0; halving <= 5; ++halving) {
            Matrix trial = current - grad * step;
            const double j_trial = objective(trial);
            if (j_trial <= j_now) {
                current = std::move(trial);
                j_now = j_trial;
                break;
            }
            if (halving < 5) step *= 0.5;
        }
        result.objective.push_back(j_now);
    }
    result.merged = std::move(current);
    return result;
}

}  // namespace consolidate::ops
