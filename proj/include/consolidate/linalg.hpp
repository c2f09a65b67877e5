#pragma once

// Dense linear algebra kernels: one-sided Jacobi SVD, SPD solves, and the
// rank / projection helpers shared by the subspace-based merging operators.

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <string_view>
#include <vector>

#include "consolidate/tensor.hpp"

namespace consolidate {

/// Relative cut-off below which a singular value counts as zero.
inline constexpr double kRankTolerance = 1e-10;

/// Orthogonality threshold for a Jacobi rotation pair.
inline constexpr double kJacobiTolerance = 1e-12;

struct SvdResult {
    Matrix u;               // m x k, orthonormal columns
    std::vector<double> s;  // k, descending, non-negative
    Matrix v;               // n x k, orthonormal columns
};

/// Number of singular values above kRankTolerance * s[0].
inline std::size_t numerical_rank(std::span<const double> s) {
    if (s.empty() || !(s[0] > 0.0)) return 0;
    const double cut = kRankTolerance * s[0];
    return static_cast<std::size_t>(std::count_if(s.begin(), s.end(), [cut](double x) { return x > cut; }));
}

namespace detail {

// Completes `basis` (columns stored as rows of `cols`, each of length dim)
// to `target` orthonormal vectors using standard basis candidates.
inline void complete_orthonormal(std::vector<std::vector<double>>& cols, std::size_t dim,
                                 std::size_t target) {
    while (cols.size() < target) {
        std::vector<double> best;
        double best_norm = -1.0;
        for (std::size_t i = 0; i < dim; ++i) {
            std::vector<double> cand(dim, 0.0);
            cand[i] = 1.0;
            for (int pass = 0; pass < 2; ++pass) {
                for (const auto& c : cols) {
                    const double proj = dot(cand, c);
                    for (std::size_t k = 0; k < dim; ++k) cand[k] -= proj * c[k];
                }
            }
            const double n = frobenius_norm(cand);
            if (n > best_norm + 1e-12) {
                best_norm = n;
                best = std::move(cand);
            }
        }
        for (auto& x : best) x /= best_norm;
        cols.push_back(std::move(best));
    }
}

// Hestenes one-sided Jacobi on a tall (m >= n) matrix.
inline SvdResult jacobi_tall(const Matrix& a) {
    const std::size_t m = a.rows;
    const std::size_t n = a.cols;
    Matrix w = a.transposed();     // row j = column j of the working matrix
    Matrix vt = Matrix::identity(n);  // row j = column j of V

    constexpr int kMaxSweeps = 100;
    for (int sweep = 0; sweep < kMaxSweeps; ++sweep) {
        bool rotated = false;
        for (std::size_t p = 0; p + 1 < n; ++p) {
            for (std::size_t q = p + 1; q < n; ++q) {
                auto wp = w.row(p);
                auto wq = w.row(q);
                const double alpha = dot(wp, wp);
                const double beta = dot(wq, wq);
                const double gamma = dot(wp, wq);
                if (alpha == 0.0 || beta == 0.0) continue;
                if (std::abs(gamma) <= kJacobiTolerance * std::sqrt(alpha * beta)) continue;
                rotated = true;
                const double zeta = (beta - alpha) / (2.0 * gamma);
                const double t = (zeta >= 0.0 ? 1.0 : -1.0) / (std::abs(zeta) + std::sqrt(1.0 + zeta * zeta));
                const double c = 1.0 / std::sqrt(1.0 + t * t);
                const double s = c * t;
                for (std::size_t k = 0; k < m; ++k) {
                    const double x = wp[k];
                    const double y = wq[k];
                    wp[k] = c * x - s * y;
                    wq[k] = s * x + c * y;
                }
                auto vp = vt.row(p);
                auto vq = vt.row(q);
                for (std::size_t k = 0; k < n; ++k) {
                    const double x = vp[k];
                    const double y = vq[k];
                    vp[k] = c * x - s * y;
                    vq[k] = s * x + c * y;
                }
            }
        }
        if (!rotated) break;
    }

    std::vector<double> sigma(n);
    for (std::size_t j = 0; j < n; ++j) sigma[j] = frobenius_norm(w.row(j));
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](auto i, auto j) { return sigma[i] > sigma[j]; });

    const double smax = sigma.empty() ? 0.0 : sigma[order[0]];
    const double floor = smax * 1e-13;

    std::vector<std::vector<double>> ucols;
    std::vector<double> s_sorted(n);
    std::vector<std::size_t> missing;
    for (std::size_t idx = 0; idx < n; ++idx) {
        const std::size_t j = order[idx];
        s_sorted[idx] = sigma[j];
        if (sigma[j] > floor && sigma[j] > 0.0) {
            std::vector<double> col(w.row(j).begin(), w.row(j).end());
            for (auto& x : col) x /= sigma[j];
            ucols.push_back(std::move(col));
        } else {
            missing.push_back(idx);
        }
    }
    // Columns for (numerically) zero singular values complete the basis.
    complete_orthonormal(ucols, m, n);

    SvdResult r{Matrix(m, n), std::move(s_sorted), Matrix(n, n)};
    for (std::size_t idx = 0; idx < n; ++idx) {
        const auto& col = ucols[idx];
        for (std::size_t k = 0; k < m; ++k) r.u(k, idx) = col[k];
        const auto vrow = vt.row(order[idx]);
        for (std::size_t k = 0; k < n; ++k) r.v(k, idx) = vrow[k];
    }
    return r;
}

}  // namespace detail

/// Thin SVD a = u·diag(s)·vᵀ with k = min(m, n).
inline SvdResult svd(const Matrix& a) {
    if (a.rows == 0 || a.cols == 0) fail(ErrorCode::shape, "svd of an empty matrix");
    for (double x : a.values) {
        if (!std::isfinite(x)) fail(ErrorCode::data, "svd input contains non-finite values");
    }
    if (a.rows >= a.cols) return detail::jacobi_tall(a);
    SvdResult t = detail::jacobi_tall(a.transposed());
    return {std::move(t.v), std::move(t.s), std::move(t.u)};
}

inline SvdResult svd(const Tensor& a) {
    if (a.rank() != 2) fail(ErrorCode::shape, "svd requires a rank-2 tensor, got " + shape_string(a.shape()));
    return svd(Matrix::from_tensor(a));
}

/// u[:, :k]·diag(s[:k])·v[:, :k]ᵀ.
inline Matrix reconstruct(const SvdResult& d, std::size_t k) {
    const std::size_t m = d.u.rows;
    const std::size_t n = d.v.rows;
    k = std::min(k, d.s.size());
    Matrix out(m, n);
    for (std::size_t c = 0; c < k; ++c) {
        const double sc = d.s[c];
        if (sc == 0.0) continue;
        for (std::size_t i = 0; i < m; ++i) {
            const double ui = d.u(i, c) * sc;
            if (ui == 0.0) continue;
            for (std::size_t j = 0; j < n; ++j) out(i, j) += ui * d.v(j, c);
        }
    }
    return out;
}

inline Matrix reconstruct(const SvdResult& d) { return reconstruct(d, d.s.size()); }

/// Closest partial isometry: p·qᵀ over the numerically nonzero singular pairs.
inline Matrix polar_factor(const Matrix& a) {
    const SvdResult d = svd(a);
    const std::size_t r = numerical_rank(d.s);
    Matrix out(a.rows, a.cols);
    for (std::size_t c = 0; c < r; ++c)
        for (std::size_t i = 0; i < a.rows; ++i)
            for (std::size_t j = 0; j < a.cols; ++j) out(i, j) += d.u(i, c) * d.v(j, c);
    return out;
}

/// Determinant by Gaussian elimination with partial pivoting.
inline double determinant(Matrix a) {
    if (a.rows != a.cols) fail(ErrorCode::shape, "determinant of a non-square matrix");
    const std::size_t n = a.rows;
    double det = 1.0;
    for (std::size_t c = 0; c < n; ++c) {
        std::size_t pivot = c;
        for (std::size_t r = c + 1; r < n; ++r)
            if (std::abs(a(r, c)) > std::abs(a(pivot, c))) pivot = r;
        if (a(pivot, c) == 0.0) return 0.0;
        if (pivot != c) {
            for (std::size_t k = 0; k < n; ++k) std::swap(a(c, k), a(pivot, k));
            det = -det;
        }
        det *= a(c, c);
        for (std::size_t r = c + 1; r < n; ++r) {
            const double f = a(r, c) / a(c, c);
            for (std::size_t k = c; k < n; ++k) a(r, k) -= f * a(c, k);
        }
    }
    return det;
}

namespace detail {

inline bool cholesky(const Matrix& a, double jitter, Matrix& l) {
    const std::size_t n = a.rows;
    double max_diag = 0.0;
    for (std::size_t i = 0; i < n; ++i) max_diag = std::max(max_diag, std::abs(a(i, i)));
    const double pivot_floor = 1e-13 * (max_diag + jitter);
    l = Matrix(n, n);
    for (std::size_t j = 0; j < n; ++j) {
        double d = a(j, j) + jitter;
        for (std::size_t k = 0; k < j; ++k) d -= l(j, k) * l(j, k);
        if (!(d > pivot_floor) || !std::isfinite(d)) return false;
        const double ljj = std::sqrt(d);
        l(j, j) = ljj;
        for (std::size_t i = j + 1; i < n; ++i) {
            double s = a(i, j);
            for (std::size_t k = 0; k < j; ++k) s -= l(i, k) * l(j, k);
            l(i, j) = s / ljj;
        }
    }
    return true;
}

}  // namespace detail

/// Solves a·x = b for symmetric positive (semi)definite `a`. A failed
/// factorization is retried with diagonal jitter 1e-8·trace/n, growing 10x per
/// retry, at most three retries.
inline Matrix solve_spd(const Matrix& a, const Matrix& b, std::string_view what = "system") {
    if (a.rows != a.cols) fail(ErrorCode::shape, "solve_spd: matrix is not square for " + std::string(what));
    if (a.rows != b.rows) fail(ErrorCode::shape, "solve_spd: leading dimensions differ for " + std::string(what));
    const std::size_t n = a.rows;
    double scale = 0.0;
    for (double x : a.values) scale = std::max(scale, std::abs(x));
    for (std::size_t i = 0; i < n; ++i)
        for (std::size_t j = i + 1; j < n; ++j)
            if (std::abs(a(i, j) - a(j, i)) > 1e-6 * std::max(1.0, scale))
                fail(ErrorCode::validation, "solve_spd: matrix for " + std::string(what) + " is not symmetric");

    double trace = 0.0;
    for (std::size_t i = 0; i < n; ++i) trace += a(i, i);
    const double base_jitter = 1e-8 * trace / static_cast<double>(n);

    Matrix l;
    bool ok = detail::cholesky(a, 0.0, l);
    double jitter = base_jitter;
    for (int retry = 0; !ok && retry < 3 && base_jitter > 0.0; ++retry, jitter *= 10.0) {
        ok = detail::cholesky(a, jitter, l);
    }
    if (!ok) fail(ErrorCode::singular, "matrix for " + std::string(what) + " is singular after jitter retries");

    Matrix x = b;
    for (std::size_t c = 0; c < b.cols; ++c) {
        for (std::size_t i = 0; i < n; ++i) {
            double s = x(i, c);
            for (std::size_t k = 0; k < i; ++k) s -= l(i, k) * x(k, c);
            x(i, c) = s / l(i, i);
        }
        for (std::size_t i = n; i-- > 0;) {
            double s = x(i, c);
            for (std::size_t k = i + 1; k < n; ++k) s -= l(k, i) * x(k, c);
            x(i, c) = s / l(i, i);
        }
    }
    return x;
}

}  // namespace consolidate
