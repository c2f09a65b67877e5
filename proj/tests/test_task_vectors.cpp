#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numbers>

#include "consolidate/network.hpp"
#include "consolidate/random.hpp"
#include "consolidate/task_vectors.hpp"
#include "oracles.hpp"

using namespace consolidate;

namespace {

// Mean principal angle over 50 seeded pairs of rank-2 16x16 deltas.
constexpr double kFrozenLowRankAngle = 1.2849899725060725;

Checkpoint one_layer(std::vector<float> w, std::vector<float> b) {
    const std::size_t n = w.size();
    Checkpoint c;
    c.manifest.layer_count = 1;
    c.manifest.entries.push_back({"w", {1, n}, Role::weight, 1, {}});
    c.manifest.entries.push_back({"b", {b.size()}, Role::bias, 1, {}});
    c.tensors.emplace("w", Tensor({1, n}, std::move(w)));
    c.tensors.emplace("b", Tensor::vector(std::move(b)));
    return c;
}

Checkpoint random_mlp(std::uint64_t seed, double scale = 1.0) {
    MlpArch arch;
    arch.input_dim = 6;
    arch.width = 8;
    arch.hidden_layers = 3;
    arch.n_classes = 3;
    Checkpoint c;
    c.manifest = mlp_manifest(arch);
    Rng rng(seed);
    for (const auto& e : c.manifest.entries) {
        Tensor t(e.shape);
        for (auto& v : t.data()) v = static_cast<float>(scale * rng.normal());
        c.tensors.emplace(e.name, std::move(t));
    }
    return c;
}

/// A task vector whose only nonzero delta is `values` in tensor `w`.
TaskVector single(std::vector<float> values, std::string tag = "e") {
    TaskVector tv;
    tv.manifest.layer_count = 1;
    tv.manifest.entries.push_back({"w", {values.size()}, Role::bias, 1, {}});
    tv.deltas.emplace("w", Tensor::vector(std::move(values)));
    tv.expert_tag = std::move(tag);
    return tv;
}

}  // namespace

TEST(ComputeTaskVector, HandExamples) {
    const Checkpoint base = one_layer({1.0f, 2.0f}, {0.0f});
    const Checkpoint expert = one_layer({3.0f, 1.0f}, {0.5f});
    const TaskVector tv = compute_task_vector(base, expert);
    EXPECT_EQ(tv.at("w"), Tensor({1, 2}, {2.0f, -1.0f}));
    EXPECT_EQ(tv.at("b"), Tensor::vector({0.5f}));

    const TaskVector zero = compute_task_vector(expert, expert);
    for (const auto& [name, t] : zero.deltas) EXPECT_EQ(frobenius_norm(t), 0.0);

    const Checkpoint origin = one_layer({0.0f, 0.0f}, {0.0f});
    const TaskVector same = compute_task_vector(origin, expert);
    EXPECT_EQ(same.at("w"), expert.at("w"));
}

TEST(ComputeTaskVector, AddingBackReproducesExpert) {
    const Checkpoint base = random_mlp(1);
    Checkpoint expert = base;
    Rng rng(2);
    for (auto& [name, t] : expert.tensors)
        for (auto& v : t.data()) v += static_cast<float>(0.05 * rng.normal());
    const TaskVector tv = compute_task_vector(base, expert);
    std::size_t exact = 0, total = 0;
    for (const auto& [name, d] : tv.deltas) {
        const Tensor& b = base.at(name);
        const Tensor& x = expert.at(name);
        for (std::size_t i = 0; i < d.size(); ++i) {
            const float back = b[i] + d[i];
            // float subtraction may round once; the reconstruction is then off by at most one ulp
            EXPECT_LE(std::abs(back - x[i]), std::abs(std::nextafter(x[i], INFINITY) - x[i]));
            exact += back == x[i];
            ++total;
        }
    }
    EXPECT_GT(static_cast<double>(exact) / static_cast<double>(total), 0.95);
}

TEST(ComputeTaskVector, LowRankExpertMaterializesScaledProduct) {
    Checkpoint base = one_layer({1.0f, 2.0f, 3.0f}, {0.0f});
    Checkpoint expert = base;
    expert.manifest.lowrank = LowRankConfig{1, 4.0};  // scale 4
    expert.manifest.entries.push_back({"w.lora_a", {1, 3}, Role::lowrank_a, 1, "w"});
    expert.manifest.entries.push_back({"w.lora_b", {1, 1}, Role::lowrank_b, 1, "w"});
    expert.tensors.emplace("w.lora_a", Tensor({1, 3}, {1.0f, 0.0f, -1.0f}));
    expert.tensors.emplace("w.lora_b", Tensor({1, 1}, {0.5f}));
    const TaskVector tv = compute_task_vector(base, expert);
    EXPECT_EQ(tv.at("w"), Tensor({1, 3}, {2.0f, 0.0f, -2.0f}));
    EXPECT_EQ(tv.deltas.size(), 2u);
}

TEST(Normalize, EqualNormsUnchanged) {
    std::vector<TaskVector> tvs{single({3, 4}), single({0, 5}), single({5, 0})};
    const auto out = normalize_task_vectors(tvs, NormLevel::model);
    for (std::size_t i = 0; i < 3; ++i) EXPECT_EQ(out[i].at("w"), tvs[i].at("w"));
}

TEST(Normalize, MedianTargetScalesOneTwoFour) {
    std::vector<TaskVector> tvs{single({1}), single({2}), single({4})};
    const auto out = normalize_task_vectors(tvs, NormLevel::model);
    EXPECT_FLOAT_EQ(out[0].at("w")[0], 2.0f);
    EXPECT_FLOAT_EQ(out[1].at("w")[0], 2.0f);
    EXPECT_FLOAT_EQ(out[2].at("w")[0], 2.0f);
    // scales (2, 1, 0.5)
    EXPECT_DOUBLE_EQ(out[0].at("w")[0] / tvs[0].at("w")[0], 2.0);
    EXPECT_DOUBLE_EQ(out[2].at("w")[0] / tvs[2].at("w")[0], 0.5);
}

TEST(Normalize, ZeroVectorStaysAndJoinsTheMedian) {
    std::vector<TaskVector> tvs{single({0, 0}), single({3, 4}), single({0, 10})};
    const auto out = normalize_task_vectors(tvs, NormLevel::model);
    // norms (0, 5, 10): median 5
    EXPECT_EQ(out[0].at("w"), tvs[0].at("w"));
    EXPECT_NEAR(model_norm(out[1]), 5.0, 1e-6);
    EXPECT_NEAR(model_norm(out[2]), 5.0, 1e-6);
}

TEST(Normalize, MatrixLevelUsesPerTensorNorms) {
    const Checkpoint base = random_mlp(3);
    std::vector<TaskVector> tvs;
    for (std::uint64_t s = 10; s < 13; ++s) tvs.push_back(compute_task_vector(base, random_mlp(s, 0.1 * static_cast<double>(s - 9))));
    const auto out = normalize_task_vectors(tvs, NormLevel::matrix);
    for (const auto& e : out.front().manifest.entries) {
        const double n0 = frobenius_norm(out[0].at(e.name));
        for (const auto& tv : out) EXPECT_NEAR(frobenius_norm(tv.at(e.name)), n0, 1e-5 * n0) << e.name;
    }
}

TEST(Normalize, Idempotent) {
    const Checkpoint base = random_mlp(4);
    std::vector<TaskVector> tvs;
    for (std::uint64_t s = 20; s < 23; ++s) tvs.push_back(compute_task_vector(base, random_mlp(s, 0.5 * static_cast<double>(s - 19))));
    for (auto level : {NormLevel::model, NormLevel::matrix}) {
        const auto once = normalize_task_vectors(tvs, level);
        const auto twice = normalize_task_vectors(once, level);
        for (std::size_t i = 0; i < once.size(); ++i) {
            const double a = model_norm(once[i]), b = model_norm(twice[i]);
            EXPECT_LE(std::abs(a - b), 1e-6 * a);
        }
    }
}

TEST(LayerNormProfile, HandCases) {
    const Checkpoint base = random_mlp(5);
    const auto zero_tv = compute_task_vector(base, base);
    for (const auto& row : layer_norm_profile(std::span(&zero_tv, 1))) EXPECT_EQ(row.norm, 0.0);

    const TaskVector five = single({3, 4});
    const auto rows = layer_norm_profile(std::span(&five, 1));
    ASSERT_EQ(rows.size(), 1u);
    EXPECT_DOUBLE_EQ(rows[0].norm, 5.0);

    TaskVector two;
    two.manifest.layer_count = 2;
    two.manifest.entries.push_back({"a", {1}, Role::bias, 1, {}});
    two.manifest.entries.push_back({"b", {2}, Role::bias, 2, {}});
    two.deltas.emplace("a", Tensor::vector({1.0f}));
    two.deltas.emplace("b", Tensor::vector({0.0f, 2.0f}));
    two.expert_tag = "x";
    const auto r2 = layer_norm_profile(std::span(&two, 1));
    ASSERT_EQ(r2.size(), 2u);
    EXPECT_EQ(r2[0].depth, 1);
    EXPECT_DOUBLE_EQ(r2[0].norm, 1.0);
    EXPECT_EQ(r2[1].depth, 2);
    EXPECT_DOUBLE_EQ(r2[1].norm, 2.0);
}

TEST(LayerNormProfile, SortedByTagThenDepthAndCsvFormat) {
    const Checkpoint base = random_mlp(6);
    std::vector<TaskVector> tvs{compute_task_vector(base, random_mlp(7)), compute_task_vector(base, random_mlp(8))};
    tvs[0].expert_tag = "zeta";
    tvs[1].expert_tag = "alpha";
    const auto rows = layer_norm_profile(tvs);
    ASSERT_EQ(rows.size(), 6u);
    EXPECT_EQ(rows[0].expert, "alpha");
    EXPECT_EQ(rows[3].expert, "zeta");
    EXPECT_EQ(rows[1].depth, 2);
    const std::string csv = profile_csv(rows);
    EXPECT_EQ(csv.rfind("expert,depth,norm\n", 0), 0u);
    EXPECT_EQ(std::count(csv.begin(), csv.end(), '\n'), 7);
    EXPECT_EQ(csv.find('\r'), std::string::npos);
    EXPECT_EQ(format_g6(1.0 / 3.0), "0.333333");
}

TEST(SubspaceAngles, IdenticalAndOrthogonal) {
    const Matrix t = oracle::random_matrix(1, 4, 5);
    const auto same = subspace_angles(t, t, 1);
    ASSERT_EQ(same.size(), 1u);
    EXPECT_NEAR(same[0], 0.0, 1e-6);

    Matrix a(2, 2), b(2, 2);
    a(0, 0) = 1.0;  // rows in span(e1)
    b(0, 1) = 1.0;  // rows in span(e2)
    const auto ortho = subspace_angles(a, b, 1);
    EXPECT_NEAR(ortho[0], std::numbers::pi / 2, 1e-12);
}

TEST(SubspaceAngles, RankErrorAndSymmetry) {
    Matrix rank1(3, 3);
    rank1(0, 0) = 1.0;
    try {
        subspace_angles(rank1, oracle::random_matrix(2, 3, 3), 2);
        FAIL();
    } catch (const Error& e) {
        EXPECT_EQ(e.code(), ErrorCode::rank);
    }
    const Matrix x = oracle::random_matrix(3, 6, 5), y = oracle::random_matrix(4, 6, 5);
    const auto xy = subspace_angles(x, y, 3), yx = subspace_angles(y, x, 3);
    for (std::size_t i = 0; i < xy.size(); ++i) EXPECT_NEAR(xy[i], yx[i], 1e-9);
}

TEST(SubspaceAngles, MatchesEigenPrincipalAngles) {
    const Matrix x = oracle::random_matrix(5, 7, 6), y = oracle::random_matrix(6, 7, 6);
    const auto ours = subspace_angles(x, y, 2);
    Eigen::JacobiSVD<Eigen::MatrixXd> sx(oracle::to_eigen(x), Eigen::ComputeThinV);
    Eigen::JacobiSVD<Eigen::MatrixXd> sy(oracle::to_eigen(y), Eigen::ComputeThinV);
    const Eigen::MatrixXd cross = sx.matrixV().leftCols(2).transpose() * sy.matrixV().leftCols(2);
    Eigen::JacobiSVD<Eigen::MatrixXd> sc(cross);
    std::vector<double> ref;
    for (Eigen::Index i = 0; i < 2; ++i) ref.push_back(std::acos(std::min(1.0, sc.singularValues()(i))));
    std::sort(ref.begin(), ref.end());
    for (std::size_t i = 0; i < 2; ++i) EXPECT_NEAR(ours[i], ref[i], 1e-8);
}

TEST(SubspaceAngles, RandomLowRankDeltasAreNearlyOrthogonal) {
    double total = 0.0;
    for (std::uint64_t pair = 0; pair < 50; ++pair) {
        Rng r1(1000 + 2 * pair), r2(1001 + 2 * pair);
        const Matrix d1 = matmul(gaussian_matrix(r1, 16, 2), gaussian_matrix(r1, 2, 16));
        const Matrix d2 = matmul(gaussian_matrix(r2, 16, 2), gaussian_matrix(r2, 2, 16));
        const auto angles = subspace_angles(d1, d2, 2);
        total += 0.5 * (angles[0] + angles[1]);
    }
    const double mean = total / 50.0;
    EXPECT_GE(mean, 1.2);
    EXPECT_NEAR(mean, kFrozenLowRankAngle, 1e-9);
}
