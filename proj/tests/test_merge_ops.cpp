#include <gtest/gtest.h>

#include <array>
#include <cmath>
#include <numbers>

#include "consolidate/merge.hpp"
#include "consolidate/network.hpp"
#include "oracles.hpp"

using namespace consolidate;
using ops::Flat;

namespace {

// PCB merge of t1=[2,0], t2=[0,2] at r=1, fixed after the first run.
constexpr double kFrozenPcbSymmetric = 1.8441119397190635;

template <typename F>
ErrorCode code_of(F&& f) {
    try {
        f();
    } catch (const Error& e) {
        return e.code();
    }
    ADD_FAILURE() << "expected an Error";
    return ErrorCode::io;
}

Checkpoint random_model(std::uint64_t seed, double scale = 1.0) {
    Checkpoint c;
    c.manifest = mlp_manifest(MlpArch{6, 8, 3, 4});
    Rng rng(seed);
    for (const auto& e : c.manifest.entries) {
        Tensor t(e.shape);
        for (auto& v : t.data()) v = static_cast<float>(scale * rng.normal());
        c.tensors.emplace(e.name, std::move(t));
    }
    return c;
}

/// Base plus a small random perturbation.
Checkpoint perturbed(const Checkpoint& base, std::uint64_t seed, double scale = 0.1) {
    Checkpoint c = base;
    c.kind = CheckpointKind::expert;
    c.source_tag = "expert" + std::to_string(seed);
    Rng rng(seed);
    for (auto& [name, t] : c.tensors)
        for (auto& v : t.data()) v += static_cast<float>(scale * rng.normal());
    return c;
}

struct Fixture {
    Checkpoint base = random_model(1);
    std::vector<Checkpoint> experts{perturbed(base, 11), perturbed(base, 12, 0.2), perturbed(base, 13, 0.05)};
};

MergeRecipe recipe_for(Method m, std::uint64_t seed = 7) { return default_recipe(m, seed); }

std::vector<Method> data_free_methods() {
    std::vector<Method> out;
    for (const auto& info : method_table())
        if (info.data_free) out.push_back(info.method);
    return out;
}

Matrix mat(std::size_t r, std::size_t c, std::vector<double> v) { return Matrix(r, c, std::move(v)); }

}  // namespace

// ---------------------------------------------------------------------------
// Interpolation and coefficients

TEST(LinearAverage, HandExamples) {
    const std::vector<Flat> sym{{1, 3}, {3, 1}};
    EXPECT_EQ(ops::linear_average(sym, std::vector{0.5, 0.5}), (Flat{2, 2}));
    const std::vector<Flat> three{{2}, {4}, {6}};
    EXPECT_EQ(ops::linear_average(three, std::vector{1.0, 0.0, 0.0}), (Flat{2}));
    // 0.2·2 + 0.3·4 + 0.5·6
    EXPECT_NEAR(ops::linear_average(three, std::vector{0.2, 0.3, 0.5})[0], 4.6, 1e-12);
    EXPECT_EQ(code_of([&] { ops::linear_average(three, std::vector{0.5, 0.5, 0.5}); }), ErrorCode::recipe);
    EXPECT_EQ(code_of([&] { ops::linear_average(three, std::vector{1.5, -0.5, 0.0}); }), ErrorCode::recipe);
}

TEST(Slerp, EndpointsMidpointAndParallelFallback) {
    const Flat a{1, 0}, b{0, 1};
    EXPECT_EQ(ops::slerp(a, b, 0.0), a);
    EXPECT_NEAR(ops::slerp(a, b, 1.0)[1], 1.0, 1e-15);
    const Flat mid = ops::slerp(a, b, 0.5);
    EXPECT_NEAR(mid[0], std::sqrt(2.0) / 2, 1e-12);
    EXPECT_NEAR(mid[1], std::sqrt(2.0) / 2, 1e-12);
    EXPECT_NEAR(frobenius_norm(mid), 1.0, 1e-12);

    const Flat p{1, 2, 3}, q{1.0000001, 2.0000002, 3.0000003};
    const Flat lin = ops::slerp(p, q, 0.5);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_NEAR(lin[i], p[i], 1e-6);

    EXPECT_EQ(code_of([&] { ops::slerp(Flat{0, 0}, b, 0.5); }), ErrorCode::degenerate);
}

TEST(Slerp, PreservesEqualNorms) {
    Rng rng(3);
    Flat a(10), b(10);
    for (auto& v : a) v = rng.normal();
    for (auto& v : b) v = rng.normal();
    const double na = frobenius_norm(a), nb = frobenius_norm(b);
    for (auto& v : b) v *= na / nb;
    for (double t = 0.0; t <= 1.0; t += 0.125) EXPECT_NEAR(frobenius_norm(ops::slerp(a, b, t)), na, 1e-5) << t;
}

TEST(Slerp, ThreeExpertsFoldLeft) {
    const std::vector<Flat> th{{1, 0, 0}, {0, 1, 0}, {0, 0, 1}};
    const Flat expect = ops::slerp(ops::slerp(th[0], th[1], 0.5), th[2], 0.5);
    EXPECT_EQ(ops::slerp_fold(th, 0.5), expect);
}

TEST(MetaGpt, Coefficients) {
    const std::vector<Flat> one{{3, 4}};
    EXPECT_EQ(ops::metagpt_coefficients(one).values, (std::vector<double>{1.0}));
    const std::vector<Flat> equal{{1, 0}, {0, 1}};
    EXPECT_EQ(ops::metagpt_coefficients(equal).values, (std::vector<double>{0.5, 0.5}));
    const std::vector<Flat> ratio{{1}, {std::sqrt(3.0)}};
    const auto c = ops::metagpt_coefficients(ratio);
    EXPECT_NEAR(c.values[0], 0.25, 1e-12);
    EXPECT_NEAR(c.values[1], 0.75, 1e-12);
    const std::vector<Flat> zero{{0}, {0}, {0, }};
    const auto z = ops::metagpt_coefficients(zero);
    EXPECT_TRUE(z.degenerate);
    for (double v : z.values) EXPECT_DOUBLE_EQ(v, 1.0 / 3.0);
}

TEST(Lines, GammaRamp) {
    const double expect[] = {0.5, 2.0 / 3.0, 5.0 / 6.0, 1.0};
    for (int l = 1; l <= 4; ++l) EXPECT_NEAR(ops::lines_gamma(l, 4, 0.5, 0.5), expect[l - 1], 1e-12);
    for (int l = 1; l <= 4; ++l) EXPECT_EQ(ops::lines_gamma(l, 4, 1.0, 0.0), 1.0);
    EXPECT_EQ(ops::lines_gamma(1, 1, 0.5, 0.5), 1.0);
}

// ---------------------------------------------------------------------------
// Stochastic sparsifiers

TEST(Dare, ZeroDropIsIdentity) {
    const Flat t{1, -2, 3};
    EXPECT_EQ(ops::dare_sparsify(t, 0.0, keyed_uniforms(1, "dare", 0, "x", 3)), t);
    EXPECT_EQ(code_of([&] { ops::dare_sparsify(t, 1.0, keyed_uniforms(1, "dare", 0, "x", 3)); }), ErrorCode::recipe);
}

TEST(Dare, BinomialBoundsOnOnes) {
    const Flat ones(10000, 1.0);
    const Flat out = ops::dare_sparsify(ones, 0.5, keyed_uniforms(42, "dare", 0, "ones", ones.size()));
    std::size_t kept = 0;
    double sum = 0.0;
    for (double v : out) {
        kept += v != 0.0;
        sum += v;
        if (v != 0.0) {
            EXPECT_EQ(v, 2.0);
        }
    }
    EXPECT_GE(kept, 4800u);
    EXPECT_LE(kept, 5200u);
    const double mean = sum / static_cast<double>(ones.size());
    EXPECT_GE(mean, 0.96);
    EXPECT_LE(mean, 1.04);
}

TEST(Della, DegenerateProbabilitiesReduceToTies) {
    Rng rng(5);
    std::vector<Flat> ts(3, Flat(20));
    for (auto& t : ts)
        for (auto& v : t) v = rng.normal();
    std::vector<Flat> sparse;
    for (std::size_t i = 0; i < ts.size(); ++i)
        sparse.push_back(ops::della_sparsify(ts[i], 1.0, 1.0, keyed_uniforms(5, "della", i, "t", 20)));
    EXPECT_EQ(ops::elect_and_mean(sparse), ops::ties_merge(ts, 1.0));
}

TEST(Della, BinomialBoundsOnOnes) {
    const Flat ones(10000, 1.0);
    const Flat out = ops::della_sparsify(ones, 0.5, 0.5, keyed_uniforms(42, "della", 0, "ones", ones.size()));
    std::size_t kept = 0;
    double survivors = 0.0;
    for (double v : out)
        if (v != 0.0) {
            ++kept;
            survivors += v;
        }
    EXPECT_GE(kept, 4800u);
    EXPECT_LE(kept, 5200u);
    EXPECT_NEAR(survivors / static_cast<double>(kept), 2.0, 1e-12);
}

TEST(Della, RescaledMaskIsUnbiased) {
    const Flat t{1.0, -2.0, 3.0, 0.5};
    // Keep-probabilities 0.8..1 bound the per-element relative error of a
    // 10^4-trial mean by 0.5% (one sigma); the defaults need more trials.
    struct Case {
        double p_min, p_max;
        std::size_t trials;
    };
    for (const Case c : {Case{0.8, 1.0, 10000}, Case{0.2, 0.8, 200000}}) {
        Flat mean(4, 0.0);
        Rng rng(77);
        for (std::size_t trial = 0; trial < c.trials; ++trial) {
            std::vector<double> u(4);
            for (auto& x : u) x = rng.uniform();
            const Flat out = ops::della_sparsify(t, c.p_min, c.p_max, u);
            for (std::size_t j = 0; j < 4; ++j) mean[j] += out[j];
        }
        for (std::size_t j = 0; j < 4; ++j) {
            mean[j] /= static_cast<double>(c.trials);
            EXPECT_NEAR(mean[j], t[j], 0.02 * std::abs(t[j])) << c.p_min << " " << j;
        }
    }
}

// ---------------------------------------------------------------------------
// Deterministic masks

TEST(Breadcrumbs, PercentileWindow) {
    Flat t(100);
    for (std::size_t i = 0; i < 100; ++i) t[i] = (i % 2 ? -1.0 : 1.0) * static_cast<double>(100 - i);
    const Flat out = ops::breadcrumbs_mask(t, 0.85, 0.99);
    std::vector<double> kept;
    for (double v : out)
        if (v != 0.0) kept.push_back(std::abs(v));
    std::sort(kept.begin(), kept.end());
    ASSERT_EQ(kept.size(), 14u);
    for (std::size_t i = 0; i < kept.size(); ++i) EXPECT_EQ(kept[i], 86.0 + static_cast<double>(i));

    EXPECT_EQ(ops::breadcrumbs_mask(t, 0.0, 1.0), t);
    EXPECT_EQ(code_of([&] { ops::breadcrumbs_mask(t, 0.5, 0.5); }), ErrorCode::recipe);
}

TEST(Breadcrumbs, TiesBreakByFlatIndex) {
    const Flat flat(100, 0.25);
    const Flat out = ops::breadcrumbs_mask(flat, 0.85, 0.99);
    // Ascending rank follows flat index, so ranks 86..99 are indices 85..98.
    for (std::size_t i = 0; i < 100; ++i) EXPECT_EQ(out[i] != 0.0, i >= 85 && i <= 98) << i;
}

TEST(Ties, HandExamples) {
    const std::vector<Flat> one{{1, -2, 3}};
    EXPECT_EQ(ops::ties_merge(one, 1.0), one[0]);
    const std::vector<Flat> vote{{2}, {1}, {-3}};
    EXPECT_DOUBLE_EQ(ops::ties_merge(vote, 1.0)[0], 1.5);
    const std::vector<Flat> tie{{1}, {-1}};
    EXPECT_EQ(ops::ties_merge(tie, 1.0)[0], 0.0);
}

TEST(Ties, TrimKeepsTopFractionWithIndexTies) {
    const Flat t{1, -5, 5, 2, 0};
    EXPECT_EQ(ops::trim_top_k(t, 0.4), (Flat{0, -5, 5, 0, 0}));
    EXPECT_EQ(ops::trim_top_k(t, 0.2), (Flat{0, -5, 0, 0, 0}));
}

TEST(ConsensusTa, HandExamples) {
    const std::vector<Flat> agree{{1}, {1}};
    EXPECT_DOUBLE_EQ(ops::consensus_ta(agree, std::vector{0.3, 0.7}, 0.4, 2)[0], 1.0);
    const std::vector<Flat> selfish{{1, 0}, {0, 1}};
    EXPECT_EQ(ops::consensus_ta(selfish, std::vector{0.5, 0.5}, 0.4, 2), (Flat{0, 0}));
    const std::vector<Flat> loose{{1, 2}, {3, 4}};
    EXPECT_EQ(ops::consensus_ta(loose, std::vector{1.0, 1.0}, 1e-9, 1), (Flat{4, 6}));
    EXPECT_EQ(code_of([&] { ops::consensus_ta(agree, std::vector{0.5, 0.5}, 0.4, 3); }), ErrorCode::recipe);
}

TEST(Tadrop, HandTraceAndNormPreservation) {
    const Flat t{3, 1, 1, 1};
    EXPECT_EQ(ops::tadrop_sparsify(t, 1.0), t);
    const Flat out = ops::tadrop_sparsify(t, 0.9);
    const double s = std::sqrt(12.0 / 11.0);
    EXPECT_NEAR(out[0], 3 * s, 1e-12);
    EXPECT_NEAR(out[1], s, 1e-12);
    EXPECT_NEAR(out[2], s, 1e-12);
    EXPECT_EQ(out[3], 0.0);

    Rng rng(9);
    for (int trial = 0; trial < 20; ++trial) {
        Flat x(37);
        for (auto& v : x) v = rng.normal() * std::exp(2.0 * rng.normal());
        EXPECT_NEAR(frobenius_norm(ops::tadrop_sparsify(x, 0.7)), frobenius_norm(x), 1e-5 * frobenius_norm(x));
    }
}

namespace {

/// Straight transcription of the CABS rule for equal-length vectors.
Flat cabs_oracle(const std::vector<Flat>& ts, std::size_t n, std::size_t m) {
    std::vector<std::size_t> order(ts.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
    std::stable_sort(order.begin(), order.end(), [&](auto a, auto b) {
        return frobenius_norm(ts[a]) > frobenius_norm(ts[b]);
    });
    const std::size_t size = ts[0].size();
    std::vector<int> owner(size, -1);
    for (std::size_t block = 0; block < size; block += m) {
        for (std::size_t e : order) {
            for (std::size_t pick = 0; pick < n; ++pick) {
                int best = -1;
                for (std::size_t j = block; j < std::min(size, block + m); ++j) {
                    if (owner[j] != -1) continue;
                    if (best < 0 || std::abs(ts[e][j]) > std::abs(ts[e][static_cast<std::size_t>(best)])) best = static_cast<int>(j);
                }
                if (best >= 0) owner[static_cast<std::size_t>(best)] = static_cast<int>(e);
            }
        }
    }
    Flat merged(size, 0.0);
    for (std::size_t e = 0; e < ts.size(); ++e) {
        double kept_sq = 0.0;
        for (std::size_t j = 0; j < size; ++j)
            if (owner[j] == static_cast<int>(e)) kept_sq += ts[e][j] * ts[e][j];
        const double scale = kept_sq > 0.0 ? frobenius_norm(ts[e]) / std::sqrt(kept_sq) : 0.0;
        for (std::size_t j = 0; j < size; ++j)
            if (owner[j] == static_cast<int>(e)) merged[j] += ts[e][j] * scale;
    }
    return merged;
}

}  // namespace

TEST(Cabs, HandTraceMatchesOracle) {
    const std::vector<Flat> ts{{3, 1, -2, 0.5}, {2.5, 4, 0.1, -1}};
    const std::vector<double> prio{frobenius_norm(ts[0]), frobenius_norm(ts[1])};
    const auto r = ops::cabs_merge(ts, prio, 1, 4);
    // expert 2 (norm √23.26) claims index 1 first, expert 1 (norm √14.25) takes index 0
    EXPECT_NEAR(r.merged[0], std::sqrt(14.25), 1e-12);
    EXPECT_NEAR(r.merged[1], std::sqrt(23.26), 1e-12);
    EXPECT_EQ(r.merged[2], 0.0);
    EXPECT_EQ(r.merged[3], 0.0);
    EXPECT_NEAR(r.merged[0], 3.775, 5e-4);
    const Flat oracle = cabs_oracle(ts, 1, 4);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(r.merged[j], oracle[j], 1e-12);
}

TEST(Cabs, SingleExpertFullBlockAndDisjointMasks) {
    const std::vector<Flat> one{{1, -2, 3, 4, 5}};
    const auto all = ops::cabs_merge(one, std::vector{1.0}, 4, 4);
    for (std::size_t j = 0; j < 5; ++j) EXPECT_NEAR(all.merged[j], one[0][j], 1e-12);

    Rng rng(21);
    std::vector<Flat> ts(3, Flat(23));
    for (auto& t : ts)
        for (auto& v : t) v = rng.normal();
    std::vector<double> prio;
    for (const auto& t : ts) prio.push_back(frobenius_norm(t));
    const auto r = ops::cabs_merge(ts, prio, 2, 7);
    const Flat oracle = cabs_oracle(ts, 2, 7);
    for (std::size_t j = 0; j < 23; ++j) {
        int owners = 0;
        for (const auto& k : r.kept) owners += k[j] != 0.0;
        EXPECT_LE(owners, 1);
        EXPECT_NEAR(r.merged[j], oracle[j], 1e-12);
    }
    for (std::size_t e = 0; e < 3; ++e) EXPECT_NEAR(frobenius_norm(r.kept[e]), prio[e], 1e-5 * prio[e]);

    EXPECT_EQ(code_of([&] { ops::cabs_merge(ts, prio, 2, 4); }), ErrorCode::infeasible);
}

namespace {

/// PCB on two-element tensors, written out term by term.
Flat pcb_two_element_oracle(const std::vector<Flat>& ts) {
    const double n = static_cast<double>(ts.size());
    auto sm2 = [](double a, double b) {
        const double ea = std::exp(a), eb = std::exp(b);
        return std::array<double, 2>{ea / (ea + eb), eb / (ea + eb)};
    };
    std::vector<std::array<double, 2>> unit, score;
    for (const auto& t : ts) {
        const double mx = std::max(std::abs(t[0]), std::abs(t[1]));
        unit.push_back({t[0] / mx, t[1] / mx});
    }
    for (std::size_t i = 0; i < ts.size(); ++i) {
        const auto intra = sm2(n * unit[i][0] * unit[i][0], n * unit[i][1] * unit[i][1]);
        std::array<double, 2> inter{0.0, 0.0};
        for (std::size_t k = 0; k < ts.size(); ++k) {
            const auto s = sm2(unit[i][0] * unit[k][0], unit[i][1] * unit[k][1]);
            inter[0] += s[0];
            inter[1] += s[1];
        }
        score.push_back({intra[0] * inter[0], intra[1] * inter[1]});
    }
    Flat out(2);
    for (std::size_t j = 0; j < 2; ++j) {
        double num = 0.0, den = 0.0;
        for (std::size_t i = 0; i < ts.size(); ++i) {
            num += score[i][j] * ts[i][j];
            den += score[i][j];
        }
        out[j] = num / den;
    }
    return out;
}

}  // namespace

TEST(Pcb, SymmetricPairMatchesOracle) {
    const std::vector<Flat> ts{{2, 0}, {0, 2}};
    const Flat out = ops::pcb_merge(ts, 1.0);
    const Flat oracle = pcb_two_element_oracle(ts);
    EXPECT_NEAR(out[0], out[1], 1e-15);
    EXPECT_NEAR(out[0], oracle[0], 1e-12);
    EXPECT_NEAR(out[1], oracle[1], 1e-12);
    EXPECT_NEAR(out[0], kFrozenPcbSymmetric, 1e-12);

    const std::vector<Flat> other{{1, -3}, {2, 0.5}};
    const Flat o2 = ops::pcb_merge(other, 1.0), ref2 = pcb_two_element_oracle(other);
    EXPECT_NEAR(o2[0], ref2[0], 1e-12);
    EXPECT_NEAR(o2[1], ref2[1], 1e-12);
}

TEST(Pcb, IdenticalOrSingleExpertsReturnTheTaskVector) {
    const Flat t{0.5, -1, 2, 0};
    const std::vector<Flat> same{t, t, t};
    const Flat out = ops::pcb_merge(same, 1.0);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(out[j], t[j], 1e-12);
    const std::vector<Flat> one{t};
    EXPECT_EQ(ops::pcb_merge(one, 1.0), ops::pcb_merge(one, 1.0));
    const Flat single = ops::pcb_merge(one, 1.0);
    for (std::size_t j = 0; j < 4; ++j) EXPECT_NEAR(single[j], t[j], 1e-12);
}

TEST(Sce, HandTrace) {
    const std::vector<Flat> ts{{2, -1}, {1, 1}};
    const auto r = ops::sce_merge(ts, 1.0);
    EXPECT_NEAR(r.coefficients[0], 5.0 / 7.0, 1e-12);
    EXPECT_NEAR(r.coefficients[1], 2.0 / 7.0, 1e-12);
    EXPECT_NEAR(r.merged[0], 12.0 / 7.0, 1e-12);
    EXPECT_EQ(r.merged[1], 0.0);

    const std::vector<Flat> same{{1, -2}, {1, -2}};
    const auto s = ops::sce_merge(same, 1.0);
    EXPECT_NEAR(s.merged[0], 1.0, 1e-12);
    EXPECT_NEAR(s.merged[1], -2.0, 1e-12);
}

TEST(Sce, SingleExpertKeepsOnlySelectedMask) {
    // One expert has zero variance everywhere, so ties pick the lowest indices.
    const std::vector<Flat> one{{4, -1, 2, 3}};
    const auto r = ops::sce_merge(one, 0.5);
    EXPECT_EQ(r.merged, (Flat{4, -1, 0, 0}));
}

TEST(SignElection, MergedSignNeverOpposesTheVote) {
    Rng rng(31);
    for (int trial = 0; trial < 30; ++trial) {
        std::vector<Flat> ts(3, Flat(40));
        for (auto& t : ts)
            for (auto& v : t) v = rng.normal();
        auto check = [&](const Flat& merged, const std::vector<Flat>& voters, const char* what) {
            for (std::size_t j = 0; j < merged.size(); ++j) {
                int vote = 0;
                for (const auto& t : voters) vote += ops::sign(t[j]);
                const int s = ops::sign(static_cast<double>(vote));
                EXPECT_TRUE(merged[j] == 0.0 || ops::sign(merged[j]) == s) << what << " " << j;
            }
        };
        std::vector<Flat> trimmed;
        for (const auto& t : ts) trimmed.push_back(ops::trim_top_k(t, 0.3));
        check(ops::ties_merge(ts, 0.3), trimmed, "ties");

        std::vector<Flat> dropped;
        for (std::size_t i = 0; i < 3; ++i)
            dropped.push_back(ops::della_sparsify(ts[i], 0.2, 0.8, keyed_uniforms(static_cast<std::uint64_t>(trial), "della", i, "t", 40)));
        check(ops::elect_and_mean(dropped), dropped, "della");

        const auto sce = ops::sce_merge(ts, 0.5);
        for (std::size_t j = 0; j < 40; ++j) {
            double sum = 0.0;
            for (const auto& t : ts) sum += t[j];
            EXPECT_TRUE(sce.merged[j] == 0.0 || ops::sign(sce.merged[j]) == ops::sign(sum)) << "sce " << j;
        }
    }
}

// ---------------------------------------------------------------------------
// Spectral operators

TEST(Tsv, HandExamples) {
    const Matrix t = oracle::random_matrix(4, 5, 3);
    const std::vector<Matrix> one{t};
    EXPECT_LE(max_abs_diff(ops::tsv_merge(one, 3), t), 1e-6);

    const std::vector<Matrix> pieces{mat(2, 2, {2, 0, 0, 0}), mat(2, 2, {0, 0, 0, 3})};
    EXPECT_LE(max_abs_diff(ops::tsv_merge(pieces, 1), mat(2, 2, {2, 0, 0, 3})), 1e-6);
    EXPECT_LE(max_abs_diff(ops::tsv_merge(pieces), mat(2, 2, {2, 0, 0, 3})), 1e-6);
    EXPECT_EQ(code_of([&] { ops::tsv_merge(pieces, 3); }), ErrorCode::rank);
}

TEST(Tsv, RankBound) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        std::vector<Matrix> ts;
        for (std::uint64_t i = 0; i < 3; ++i) ts.push_back(oracle::random_matrix(seed * 10 + i, 8, 7));
        for (std::size_t k : {1u, 2u}) {
            const Matrix out = ops::tsv_merge(ts, k);
            EXPECT_LE(numerical_rank(svd(out).s), 3 * k);
        }
    }
}

TEST(IsoCts, FlattensTheSpectrum) {
    const Matrix q1 = polar_factor(oracle::random_matrix(1, 3, 3));
    const Matrix q2 = polar_factor(oracle::random_matrix(2, 3, 3));
    auto compose = [&](std::vector<double> s) { return matmul(matmul(q1, diag(s)), q2.transposed()); };
    const std::vector<Matrix> t{compose({4, 2, 0})};
    EXPECT_LE(max_abs_diff(ops::iso_cts_merge(t, 2), compose({3, 3, 0})), 1e-9);
    EXPECT_LE(max_abs_diff(ops::iso_cts_merge(t), compose({3, 3, 0})), 1e-9);

    const std::vector<Matrix> flat{compose({2, 2, 2})};
    EXPECT_LE(max_abs_diff(ops::iso_cts_merge(flat), flat[0]), 1e-6);

    const Matrix r1 = ops::iso_cts_merge(t, 1);
    const auto s = svd(r1).s;
    EXPECT_NEAR(s[0], 4.0, 1e-9);
    EXPECT_EQ(numerical_rank(s), 1u);

    const std::vector<Matrix> zero{Matrix(2, 3)};
    EXPECT_EQ(ops::iso_cts_merge(zero), Matrix(2, 3));
}

TEST(Impart, EnergyPrefix) {
    EXPECT_EQ(ops::energy_rank(std::vector{3.0, 1.0}, 0.9), 1u);
    EXPECT_EQ(ops::energy_rank(std::vector{3.0, 1.0}, 0.95), 2u);
    const Matrix t = oracle::random_matrix(8, 4, 4);
    EXPECT_LE(max_abs_diff(ops::impart_truncate(t, 1.0), t), 1e-6);
    Matrix rank1(3, 3);
    rank1(1, 2) = 2.5;
    EXPECT_LE(max_abs_diff(ops::impart_truncate(rank1, 0.3), rank1), 1e-12);

    const Matrix two = mat(2, 2, {3, 0, 0, 1});
    EXPECT_LE(max_abs_diff(ops::impart_truncate(two, 0.9), mat(2, 2, {3, 0, 0, 0})), 1e-12);
}

TEST(Wudi, SingleTaskStaysPut) {
    const std::vector<Matrix> one{oracle::random_matrix(3, 4, 5)};
    const auto r = ops::wudi_merge(one, 50, 1e-2);
    EXPECT_LE(r.objective.front(), 1e-20);
    EXPECT_LE(max_abs_diff(r.merged, one[0]), 1e-12);
}

TEST(Wudi, OrthogonalRowSpacesReachZero) {
    const std::vector<Matrix> ts{mat(2, 2, {1, 0, 2, 0}), mat(2, 2, {0, -1, 0, 3})};
    const auto r = ops::wudi_merge(ts, 300, 1e-2);
    EXPECT_LE(r.objective.back(), 1e-8);
    EXPECT_LE(max_abs_diff(r.merged, ts[0] + ts[1]), 1e-8);
}

TEST(Wudi, ObjectiveNeverIncreases) {
    for (std::uint64_t seed = 0; seed < 5; ++seed) {
        std::vector<Matrix> ts;
        for (std::uint64_t i = 0; i < 3; ++i) ts.push_back(oracle::random_matrix(100 + seed * 3 + i, 6, 4));
        const auto r = ops::wudi_merge(ts, 300, 1e-2);
        ASSERT_EQ(r.objective.size(), 301u);
        for (std::size_t i = 1; i < r.objective.size(); ++i) ASSERT_LE(r.objective[i], r.objective[i - 1]);
        EXPECT_LT(r.objective.back(), r.objective.front());
    }
}

// ---------------------------------------------------------------------------
// Dispatcher

TEST(Groups, Granularities) {
    const Manifest m = mlp_manifest(MlpArch{6, 8, 3, 4});
    EXPECT_EQ(make_groups(m, Granularity::model).size(), 1u);
    const auto layers = make_groups(m, Granularity::layer);
    ASSERT_EQ(layers.size(), 3u);
    EXPECT_EQ(layers[0].label, "depth1");
    EXPECT_EQ(layers[0].members.size(), 2u);
    EXPECT_EQ(layers[2].members.size(), 4u);  // the head shares the last depth
    const auto mats = make_groups(m, Granularity::matrix);
    EXPECT_EQ(mats.size(), m.entries.size());
    EXPECT_TRUE(mats[0].is_matrix());
    EXPECT_FALSE(mats[1].is_matrix());
}

TEST(Dispatch, ZeroDeltaIsBitExactIdentity) {
    const Checkpoint base = random_model(2);
    std::vector<Checkpoint> copies(3, base);
    for (Method m : data_free_methods()) {
        if (!is_delta_based(m)) continue;
        MergeRecipe r = recipe_for(m);
        if (m == Method::cabs) r.params = {{"n", 1}, {"m", 4}};
        const auto out = merge(r, base, copies);
        EXPECT_EQ(out.checkpoint.tensors, base.tensors) << to_string(m);
        EXPECT_EQ(out.checkpoint.kind, CheckpointKind::merged);
    }
}

TEST(Dispatch, EveryMethodIsDeterministicAndThreadIndependent) {
    Fixture f;
    for (Method m : data_free_methods()) {
        MergeRecipe r = recipe_for(m, 99);
        if (m == Method::wudi) r.params = {{"iters", 30}};
        const auto a = merge(r, f.base, f.experts);
        const auto b = merge(r, f.base, f.experts);
        const auto c = merge(r, f.base, f.experts, {}, 4);
        const std::string bytes = serialize_checkpoint(a.checkpoint);
        EXPECT_EQ(bytes, serialize_checkpoint(b.checkpoint)) << to_string(m);
        EXPECT_EQ(bytes, serialize_checkpoint(c.checkpoint)) << to_string(m);
        EXPECT_NO_THROW(validate_compatible(f.base, std::span(&a.checkpoint, 1)));
        EXPECT_EQ(a.recipe_echo.granularity, method_info(m).granularity);
    }
}

TEST(Dispatch, SeedChangesStochasticMasksOnly) {
    Fixture f;
    const auto a = merge(recipe_for(Method::dare, 1), f.base, f.experts);
    const auto b = merge(recipe_for(Method::dare, 2), f.base, f.experts);
    EXPECT_NE(a.checkpoint.tensors, b.checkpoint.tensors);
    const auto t1 = merge(recipe_for(Method::ties, 1), f.base, f.experts);
    const auto t2 = merge(recipe_for(Method::ties, 2), f.base, f.experts);
    EXPECT_EQ(t1.checkpoint.tensors, t2.checkpoint.tensors);
}

TEST(Dispatch, DareMaskOfOneExpertIgnoresTheOthers) {
    Fixture f;
    MergeRecipe r = recipe_for(Method::dare, 5);
    const std::vector<Checkpoint> two{f.experts[0], f.experts[1]};
    r.weights = {1.0, 0.0};
    const auto pair = merge(r, f.base, two);
    r.weights = {1.0, 0.0, 0.0};
    const auto triple = merge(r, f.base, f.experts);
    EXPECT_EQ(pair.checkpoint.tensors, triple.checkpoint.tensors);
}

TEST(Dispatch, LinearOperatorsAgreeAcrossGranularities) {
    Fixture f;
    auto max_diff = [](const Checkpoint& a, const Checkpoint& b) {
        double d = 0.0;
        for (const auto& [name, t] : a.tensors)
            for (std::size_t i = 0; i < t.size(); ++i) d = std::max(d, std::abs(double(t[i]) - double(b.at(name)[i])));
        return d;
    };
    MergeRecipe avg = recipe_for(Method::average);
    avg.weights = {0.2, 0.3, 0.5};
    avg.granularity = Granularity::model;
    const auto model = merge(avg, f.base, f.experts);
    avg.granularity = Granularity::matrix;
    EXPECT_LE(max_diff(model.checkpoint, merge(avg, f.base, f.experts).checkpoint), 1e-6);

    MergeRecipe lines = recipe_for(Method::lines);
    lines.params = {{"alpha0", 1.0}, {"beta0", 0.0}};
    const auto layer = merge(lines, f.base, f.experts);
    for (Granularity g : {Granularity::model, Granularity::matrix}) {
        lines.granularity = g;
        EXPECT_LE(max_diff(layer.checkpoint, merge(lines, f.base, f.experts).checkpoint), 1e-6);
    }
}

TEST(Dispatch, LinesScalesDeltasByDepth) {
    Fixture f;
    const auto out = merge(recipe_for(Method::lines), f.base, f.experts);
    const double gamma = ops::lines_gamma(2, 3, 0.5, 0.5);
    EXPECT_EQ(gamma, 0.75);
    const Tensor& b = f.base.at("layer2.weight");
    for (std::size_t i = 0; i < 5; ++i) {
        double avg = 0.0;
        for (const auto& e : f.experts) avg += (double(e.at("layer2.weight")[i]) - double(b[i])) / 3.0;
        EXPECT_NEAR(out.checkpoint.at("layer2.weight")[i], b[i] + gamma * avg, 1e-6);
    }
}

TEST(Dispatch, SlerpEndpointsAndAverageWeights) {
    Fixture f;
    const std::vector<Checkpoint> two{f.experts[0], f.experts[1]};
    MergeRecipe r = recipe_for(Method::slerp);
    r.params = {{"t", 0.0}};
    EXPECT_EQ(merge(r, f.base, two).checkpoint.tensors, two[0].tensors);

    MergeRecipe avg = recipe_for(Method::average);
    avg.weights = {0.0, 1.0, 0.0};
    EXPECT_EQ(merge(avg, f.base, f.experts).checkpoint.tensors, f.experts[1].tensors);
}

TEST(Dispatch, MetaGptRecordsCoefficientsAndWarnsWhenDegenerate) {
    Fixture f;
    const auto out = merge(recipe_for(Method::metagpt), f.base, f.experts);
    ASSERT_TRUE(out.coefficients.contains("model"));
    double sum = 0.0;
    for (double c : out.coefficients.at("model")) sum += c;
    EXPECT_NEAR(sum, 1.0, 1e-12);
    EXPECT_TRUE(out.warnings.empty());

    std::vector<Checkpoint> copies(2, f.base);
    EXPECT_FALSE(merge(recipe_for(Method::metagpt), f.base, copies).warnings.empty());
}

TEST(Dispatch, NormalizedMergeEqualizesNormsBeforeMerging) {
    Fixture f;
    MergeRecipe r = recipe_for(Method::ties);
    r.params = {{"k", 1.0}};
    r.normalize = NormLevel::model;
    const auto echo = merge(r, f.base, f.experts).recipe_echo;
    EXPECT_EQ(echo.to_json().at("normalize"), "model");
}

TEST(Recipe, ValidationErrors) {
    Fixture f;
    auto code = [&](MergeRecipe r) { return code_of([&] { merge(r, f.base, f.experts); }); };
    MergeRecipe avg = recipe_for(Method::average);
    avg.weights = {0.5, 0.5, 0.5};
    EXPECT_EQ(code(avg), ErrorCode::recipe);
    avg.weights = {0.5, 0.5};
    EXPECT_EQ(code(avg), ErrorCode::recipe);

    MergeRecipe dare = recipe_for(Method::dare);
    dare.params = {{"p", 1.0}};
    EXPECT_EQ(code(dare), ErrorCode::recipe);
    MergeRecipe bc = recipe_for(Method::breadcrumbs);
    bc.params = {{"beta", 0.9}, {"gamma", 0.9}};
    EXPECT_EQ(code(bc), ErrorCode::recipe);
    MergeRecipe cons = recipe_for(Method::consensus_ta);
    cons.params = {{"min_support", 4}};
    EXPECT_EQ(code(cons), ErrorCode::recipe);
    MergeRecipe cabs = recipe_for(Method::cabs);
    cabs.params = {{"n", 2}, {"m", 4}};
    EXPECT_EQ(code(cabs), ErrorCode::infeasible);
    MergeRecipe unknown = recipe_for(Method::ties);
    unknown.params = {{"bogus", 1}};
    EXPECT_EQ(code(unknown), ErrorCode::recipe);
    MergeRecipe regmean = recipe_for(Method::regmean);
    regmean.granularity = Granularity::model;
    EXPECT_EQ(code(regmean), ErrorCode::recipe);
    EXPECT_EQ(code(recipe_for(Method::cat)), ErrorCode::recipe);  // no calibration
}

TEST(Recipe, FileParsing) {
    const auto f = parse_recipe_file(nlohmann::json::parse(R"({
        "method": "dare", "base": "b.mrgf", "experts": ["e1.mrgf", "e2.mrgf"],
        "params": {"p": 0.5}, "lambda": 0.8, "normalize": "matrix", "seed": 3})"));
    EXPECT_EQ(f.recipe.method, Method::dare);
    EXPECT_EQ(f.experts.size(), 2u);
    EXPECT_EQ(f.recipe.param("p"), 0.5);
    EXPECT_EQ(f.recipe.lambda, 0.8);
    EXPECT_EQ(f.recipe.normalize, NormLevel::matrix);
    EXPECT_EQ(f.recipe.seed, 3u);

    const auto flag = parse_recipe_file(nlohmann::json::parse(
        R"({"method": "ties", "base": "b", "experts": ["e"], "normalize": true, "seed": 0})"));
    EXPECT_EQ(flag.recipe.normalize, NormLevel::model);

    auto bad = [](const char* text) { return code_of([&] { parse_recipe_file(nlohmann::json::parse(text)); }); };
    EXPECT_EQ(bad(R"({"method": "ties", "base": "b", "experts": ["e"], "seed": 0, "extra": 1})"), ErrorCode::recipe);
    EXPECT_EQ(bad(R"({"method": "nope", "base": "b", "experts": ["e"], "seed": 0})"), ErrorCode::recipe);
    EXPECT_EQ(bad(R"({"method": "ties", "base": "b", "experts": [], "seed": 0})"), ErrorCode::recipe);
    EXPECT_EQ(bad(R"({"method": "ties", "base": "b", "experts": ["e"], "seed": -1})"), ErrorCode::recipe);
    EXPECT_EQ(bad(R"({"method": "ties", "base": "b", "experts": ["e"]})"), ErrorCode::recipe);
    EXPECT_EQ(bad(R"({"method": "regmean", "base": "b", "experts": ["e"], "seed": 0})"), ErrorCode::recipe);
    EXPECT_EQ(bad(R"({"method": "ties", "base": "b", "experts": "e", "seed": 0})"), ErrorCode::recipe);
}

TEST(Recipe, EchoCarriesResolvedDefaults) {
    Fixture f;
    const auto out = merge(recipe_for(Method::tadrop, 4), f.base, f.experts);
    EXPECT_EQ(out.recipe_echo.param("rho"), 0.9);
    EXPECT_EQ(out.recipe_echo.weights.size(), 3u);
    const auto j = nlohmann::json::parse(out.checkpoint.source_tag);
    EXPECT_EQ(j.at("method"), "tadrop");
    EXPECT_EQ(j.at("seed"), 4);
}
