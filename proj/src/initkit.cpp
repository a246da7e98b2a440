#include "protoscope/initkit.hpp"

#include <cmath>
#include <limits>
#include <random>

#include "protoscope/error.hpp"

namespace protoscope {

namespace {

std::size_t nearest_centroid(std::span<const double> x, const Matrix& centroids, double* dist) {
    std::size_t best = 0;
    double best_d = std::numeric_limits<double>::infinity();
    for (std::size_t c = 0; c < centroids.rows(); ++c) {
        const double d = squared_distance(x, centroids.row(c));
        if (d < best_d) {
            best_d = d;
            best = c;
        }
    }
    if (dist) *dist = best_d;
    return best;
}

double uniform01(std::mt19937_64& rng) {
    return std::generate_canonical<double, 53>(rng);
}

Matrix seed_plus_plus(const Matrix& points, std::size_t k, std::mt19937_64& rng) {
    const std::size_t n = points.rows();
    Matrix centroids(k, points.cols());
    std::vector<double> d2(n, std::numeric_limits<double>::infinity());

    std::size_t pick = std::min(n - 1, static_cast<std::size_t>(uniform01(rng) * n));
    for (std::size_t c = 0; c < k; ++c) {
        std::copy(points.row(pick).begin(), points.row(pick).end(), centroids.row(c).begin());
        if (c + 1 == k) break;
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            d2[i] = std::min(d2[i], squared_distance(points.row(i), centroids.row(c)));
            total += d2[i];
        }
        if (total <= 0.0) {
            // Every point coincides with a chosen centroid; take the next row.
            pick = (pick + 1) % n;
            continue;
        }
        const double target = uniform01(rng) * total;
        double acc = 0.0;
        pick = n - 1;
        for (std::size_t i = 0; i < n; ++i) {
            acc += d2[i];
            if (d2[i] > 0.0 && acc > target) {
                pick = i;
                break;
            }
        }
    }
    return centroids;
}

void update_means(const Matrix& points, const std::vector<std::size_t>& assign, Matrix& centroids) {
    std::vector<std::size_t> counts(centroids.rows(), 0);
    Matrix sums(centroids.rows(), centroids.cols());
    for (std::size_t i = 0; i < points.rows(); ++i) {
        const auto x = points.row(i);
        auto s = sums.row(assign[i]);
        for (std::size_t d = 0; d < x.size(); ++d) s[d] += x[d];
        ++counts[assign[i]];
    }
    for (std::size_t c = 0; c < centroids.rows(); ++c) {
        if (counts[c] == 0) continue;
        for (std::size_t d = 0; d < centroids.cols(); ++d) {
            centroids(c, d) = sums(c, d) / static_cast<double>(counts[c]);
        }
    }
}

// Moves the point farthest from its centroid (taken from a cluster with more
// than one member) into each empty cluster.
void repair_empty(const Matrix& points, std::vector<std::size_t>& assign, Matrix& centroids) {
    std::vector<std::size_t> counts(centroids.rows(), 0);
    for (auto a : assign) ++counts[a];
    for (std::size_t c = 0; c < centroids.rows(); ++c) {
        if (counts[c] != 0) continue;
        std::size_t far = points.rows();
        double far_d = -1.0;
        for (std::size_t i = 0; i < points.rows(); ++i) {
            if (counts[assign[i]] < 2) continue;
            const double d = squared_distance(points.row(i), centroids.row(assign[i]));
            if (d > far_d) {
                far_d = d;
                far = i;
            }
        }
        if (far == points.rows()) break;  // unreachable while n >= k
        --counts[assign[far]];
        assign[far] = c;
        counts[c] = 1;
        std::copy(points.row(far).begin(), points.row(far).end(), centroids.row(c).begin());
    }
}

double total_inertia(const Matrix& points, const std::vector<std::size_t>& assign,
                     const Matrix& centroids) {
    double acc = 0.0;
    for (std::size_t i = 0; i < points.rows(); ++i) {
        acc += squared_distance(points.row(i), centroids.row(assign[i]));
    }
    return acc;
}

KMeansResult lloyd(const Matrix& points, Matrix centroids, const KMeansOptions& options) {
    KMeansResult r;
    r.assignment.assign(points.rows(), 0);
    for (std::size_t iter = 0; iter < options.max_iter; ++iter) {
        for (std::size_t i = 0; i < points.rows(); ++i) {
            r.assignment[i] = nearest_centroid(points.row(i), centroids, nullptr);
        }
        repair_empty(points, r.assignment, centroids);
        const double inertia = total_inertia(points, r.assignment, centroids);
        const bool converged = !r.history.empty() &&
                               (r.history.back() - inertia < options.tol * r.history.back());
        r.history.push_back(inertia);
        if (converged || inertia == 0.0) break;
        update_means(points, r.assignment, centroids);
    }
    update_means(points, r.assignment, centroids);
    r.inertia = total_inertia(points, r.assignment, centroids);
    r.history.push_back(r.inertia);
    r.centroids = std::move(centroids);
    return r;
}

}  // namespace

KMeansResult kmeans(const Matrix& points, std::size_t k, std::uint64_t seed,
                    const KMeansOptions& options) {
    const std::size_t n = points.rows();
    if (k == 0) throw ValidationError("kmeans: k must be at least 1");
    if (n < k) {
        throw ValidationError("kmeans: " + std::to_string(n) + " points cannot form " +
                              std::to_string(k) + " clusters");
    }
    for (double v : points.data()) {
        if (!std::isfinite(v)) throw ValidationError("kmeans: non-finite point coordinate");
    }

    std::mt19937_64 rng(seed);
    KMeansResult best;
    best.inertia = std::numeric_limits<double>::infinity();
    for (std::size_t run = 0; run < std::max<std::size_t>(1, options.restarts); ++run) {
        auto r = lloyd(points, seed_plus_plus(points, k, rng), options);
        if (r.inertia < best.inertia) best = std::move(r);
    }
    return best;
}

Matrix class_train_rows(const Dataset& dataset, const Normalizer& norm, std::size_t class_index) {
    const auto& name = dataset.labels.name(class_index);
    std::vector<const EmbeddingRecord*> recs;
    std::size_t rows = 0;
    for (const auto* rec : dataset.split(Split::train)) {
        if (rec->label != name) continue;
        recs.push_back(rec);
        rows += rec->segments.n_segments();
    }
    Matrix out(rows, dataset.dim);
    std::size_t r = 0;
    for (const auto* rec : recs) {
        for (std::size_t s = 0; s < rec->segments.n_segments(); ++s, ++r) {
            const auto z = apply_normalizer(norm, rec->segments.row(s));
            std::copy(z.begin(), z.end(), out.row(r).begin());
        }
    }
    return out;
}

PrototypeBank init_prototypes(const Dataset& dataset, const Normalizer& norm,
                              std::size_t per_class, std::uint64_t base_seed,
                              std::vector<ClassInit>* summary) {
    if (per_class == 0) throw ValidationError("prototypes per class must be at least 1");
    const std::size_t classes = dataset.labels.size();
    PrototypeBank bank{Matrix(classes * per_class, dataset.dim), per_class};
    if (summary) summary->clear();

    for (std::size_t c = 0; c < classes; ++c) {
        const Matrix rows = class_train_rows(dataset, norm, c);
        if (rows.rows() == 0) {
            throw ValidationError("class '" + dataset.labels.name(c) + "' has no train rows");
        }
        if (rows.rows() < per_class) {
            throw ValidationError("class '" + dataset.labels.name(c) + "' has " +
                                  std::to_string(rows.rows()) + " train rows, fewer than the " +
                                  std::to_string(per_class) + " prototypes requested");
        }
        const auto km = kmeans(rows, per_class, base_seed + c);
        for (std::size_t j = 0; j < per_class; ++j) {
            const auto src = km.centroids.row(j);
            std::copy(src.begin(), src.end(), bank.p.row(c * per_class + j).begin());
        }
        if (summary) summary->push_back({c, rows.rows(), km.inertia});
    }
    return bank;
}

}  // namespace protoscope
