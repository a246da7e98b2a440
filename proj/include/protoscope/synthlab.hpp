#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "protoscope/embedstore.hpp"
#include "protoscope/protonet.hpp"
#include "protoscope/tensor.hpp"

namespace protoscope::synth {

/// Gaussian class blobs standing in for real segment embeddings.
struct BlobSpec {
    std::size_t n_classes = 4;
    std::size_t per_class = 100;  // tracks per class
    std::size_t dim = 16;
    double center_scale = 10.0;
    double noise_std = 1.0;
    std::size_t segments_per_track = 4;
    std::uint64_t seed = 0;

    void validate() const;
    double separation_ratio() const { return center_scale / noise_std; }
};

/// In-memory blob dataset: per class, tracks split 80/10/10 (train/valid/test)
/// by track index.
Dataset make_blobs(const BlobSpec& spec);

/// Writes manifest.jsonl and emb/<id>.pemb under out_dir; returns the
/// manifest path.
std::filesystem::path gen_blobs(const BlobSpec& spec, const std::filesystem::path& out_dir);

/// Central differences (f(x+h) - f(x-h)) / 2h per coordinate. Throws
/// ValidationError when an evaluation is non-finite.
Vector finite_diff_grad(const std::function<double(std::span<const double>)>& loss_fn,
                        std::span<const double> params, double h);

struct PartitionOptimum {
    double inertia = 0.0;
    std::vector<std::size_t> partition;  // point -> part
};

inline constexpr std::size_t kBruteForceMaxPoints = 10;

/// Exhaustive search over all partitions of the points into at most k
/// non-empty parts. Refuses more than kBruteForceMaxPoints points.
PartitionOptimum brute_force_kmeans(const Matrix& points, std::size_t k);

/// One randomized analytic-vs-numeric gradient comparison.
struct GradientCheck {
    std::uint64_t seed = 0;
    std::size_t dim = 0, classes = 0, protos = 0, batch = 0;
    AdaptorKind adaptor = AdaptorKind::identity;
    double lambda = 0.0;
    bool raw_prototype_loss = false;
    double max_rel_error = 0.0;  // over coordinates with |analytic| >= 1e-8
    double max_abs_error_small = 0.0;  // over coordinates with |analytic| < 1e-8
    std::string worst_tensor;
    double worst_analytic = 0.0;
    double worst_numeric = 0.0;
    bool passed = false;

    std::string describe() const;
};

inline constexpr double kGradStep = 1e-3;
inline constexpr double kGradRelTol = 1e-4;
inline constexpr double kGradAbsTol = 1e-7;
inline constexpr double kGradSmall = 1e-8;

/// Random small configuration (D<=8, M<=6, N<=16, C<=4). The adaptor cycles
/// with the seed and lambda cycles through {0, 0.25, 1}.
GradientCheck run_gradient_check(std::uint64_t seed, double h = kGradStep);

struct KMeansCheck {
    std::uint64_t seed = 0;
    std::size_t n = 0, k = 0, dim = 0;
    double lloyd_inertia = 0.0;
    double optimal_inertia = 0.0;
    bool monotone = false;
    bool passed = false;
};

/// Random instance with n<=8, k<=3, D<=3 compared against brute force.
KMeansCheck run_kmeans_check(std::uint64_t seed, double tol = 1e-9);

}  // namespace protoscope::synth
