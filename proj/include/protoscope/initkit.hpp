#pragma once

#include <cstddef>
#include <cstdint>
#include <vector>

#include "protoscope/embedstore.hpp"
#include "protoscope/protonet.hpp"
#include "protoscope/tensor.hpp"

namespace protoscope {

struct KMeansOptions {
    std::size_t restarts = 8;
    std::size_t max_iter = 200;
    double tol = 1e-6;  // relative inertia improvement
};

struct KMeansResult {
    Matrix centroids;                    // k x D
    std::vector<std::size_t> assignment;  // point -> centroid
    double inertia = 0.0;
    /// Inertia after every Lloyd iteration of the winning restart.
    std::vector<double> history;
};

/// Lloyd's algorithm with k-means++ seeding, best of `restarts` runs.
/// Throws ValidationError when k is 0, n < k, or a point is non-finite.
KMeansResult kmeans(const Matrix& points, std::size_t k, std::uint64_t seed,
                    const KMeansOptions& options = {});

/// Normalized train segment rows of one class, in record-id order.
Matrix class_train_rows(const Dataset& dataset, const Normalizer& norm, std::size_t class_index);

struct ClassInit {
    std::size_t class_index = 0;
    std::size_t rows = 0;
    double inertia = 0.0;
};

/// Per-class k-means on normalized train segments (seed = base_seed + class),
/// centroids concatenated class-major.
PrototypeBank init_prototypes(const Dataset& dataset, const Normalizer& norm,
                              std::size_t per_class, std::uint64_t base_seed,
                              std::vector<ClassInit>* summary = nullptr);

}  // namespace protoscope
