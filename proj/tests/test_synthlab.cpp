#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <limits>

#include "helpers.hpp"
#include "protoscope/error.hpp"
#include "protoscope/synthlab.hpp"

using namespace protoscope;
using testutil::matrix;

namespace {

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

}  // namespace

TEST(Blobs, DefaultCounts) {
    const auto ds = synth::make_blobs({});
    ASSERT_EQ(ds.records.size(), 400u);
    std::size_t segs = 0;
    for (const auto& r : ds.records) segs += r.segments.n_segments();
    EXPECT_EQ(segs, 1600u);
    EXPECT_EQ(ds.labels.size(), 4u);
    EXPECT_EQ(ds.split(Split::train).size(), 320u);
    EXPECT_EQ(ds.split(Split::valid).size(), 40u);
    EXPECT_EQ(ds.split(Split::test).size(), 40u);
}

TEST(Blobs, ZeroNoiseCollapsesToCenter) {
    synth::BlobSpec spec;
    spec.noise_std = 0.0;
    spec.per_class = 10;
    const auto ds = synth::make_blobs(spec);
    std::vector<const SegmentMatrix*> first(spec.n_classes, nullptr);
    for (const auto& r : ds.records) {
        const auto c = ds.labels.index_of(r.label);
        if (!first[c]) first[c] = &r.segments;
        for (std::size_t s = 0; s < r.segments.n_segments(); ++s) {
            for (std::size_t d = 0; d < spec.dim; ++d) EXPECT_EQ(r.segments.row(s)[d], first[c]->row(0)[d]);
        }
    }
}

TEST(Blobs, SameSeedSameFilesAndLoadable) {
    synth::BlobSpec spec;
    spec.per_class = 10;
    spec.seed = 5;
    const auto a = testutil::temp_dir("blobs_a"), b = testutil::temp_dir("blobs_b");
    const auto ma = synth::gen_blobs(spec, a);
    synth::gen_blobs(spec, b);
    EXPECT_EQ(slurp(ma), slurp(b / "manifest.jsonl"));
    EXPECT_EQ(slurp(a / "emb" / "c01_t0003.pemb"), slurp(b / "emb" / "c01_t0003.pemb"));
    const auto ds = load_dataset(ma);
    EXPECT_EQ(ds.labels.size(), spec.n_classes);
    EXPECT_EQ(ds.records, synth::make_blobs(spec).records);
}

TEST(Blobs, InvalidSpecRejected) {
    synth::BlobSpec spec;
    spec.n_classes = 1;
    EXPECT_THROW(synth::make_blobs(spec), ValidationError);
}

TEST(FiniteDiff, QuadraticAndConstant) {
    const std::vector<double> x = {3.0};
    const auto g = synth::finite_diff_grad([](std::span<const double> v) { return v[0] * v[0]; }, x, 1e-3);
    EXPECT_NEAR(g[0], 6.0, 1e-6);
    const std::vector<double> y = {1.0, -2.0};
    const auto z = synth::finite_diff_grad([](std::span<const double>) { return 4.0; }, y, 1e-3);
    EXPECT_EQ(z, (Vector{0.0, 0.0}));
}

TEST(FiniteDiff, NonFiniteEvaluationFails) {
    const std::vector<double> x = {0.0};
    EXPECT_THROW(synth::finite_diff_grad([](std::span<const double> v) { return 1.0 / v[0] - 1.0 / v[0] + std::log(v[0]); },
                                         x, 1e-3),
                 ValidationError);
}

TEST(BruteForce, Examples) {
    EXPECT_EQ(synth::brute_force_kmeans(matrix(3, 1, {0, 2, 4}), 1).inertia, 8.0);
    EXPECT_NEAR(synth::brute_force_kmeans(matrix(4, 2, {0, 0, 0, 1, 10, 0, 10, 1}), 2).inertia, 1.0, 1e-12);
    EXPECT_EQ(synth::brute_force_kmeans(matrix(3, 1, {0, 2, 4}), 3).inertia, 0.0);
    EXPECT_EQ(synth::brute_force_kmeans(matrix(3, 1, {0, 2, 4}), 5).inertia, 0.0);
    EXPECT_THROW(synth::brute_force_kmeans(Matrix(11, 1), 2), ValidationError);
}

TEST(KMeansCheck, SeededInstancesPass) {
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const auto r = synth::run_kmeans_check(seed);
        EXPECT_TRUE(r.passed) << "seed " << seed;
        EXPECT_TRUE(r.monotone);
        EXPECT_LE(r.optimal_inertia, r.lloyd_inertia + 1e-9);
    }
}
