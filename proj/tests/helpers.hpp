#pragma once

#include <cstdint>
#include <filesystem>
#include <random>
#include <string>
#include <vector>

#include "protoscope/embedstore.hpp"
#include "protoscope/protonet.hpp"
#include "protoscope/tensor.hpp"

namespace testutil {

using namespace protoscope;

inline std::filesystem::path temp_dir(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / ("protoscope_test_" + name);
    std::filesystem::remove_all(dir);
    std::filesystem::create_directories(dir);
    return dir;
}

inline EmbeddingRecord record(const std::string& id, const std::string& label, Split split,
                              std::size_t n, std::size_t dim, std::vector<float> values) {
    EmbeddingRecord r;
    r.id = id;
    r.label = label;
    r.split = split;
    r.segments = SegmentMatrix(n, dim, std::move(values));
    return r;
}

inline Matrix matrix(std::size_t rows, std::size_t cols, std::vector<double> values) {
    Matrix m(rows, cols);
    m.data() = std::move(values);
    return m;
}

inline Matrix random_matrix(std::size_t rows, std::size_t cols, std::mt19937_64& rng, double scale = 1.0) {
    std::normal_distribution<double> g(0.0, scale);
    Matrix m(rows, cols);
    for (auto& v : m.data()) v = g(rng);
    return m;
}

/// Hand-built model with identity normalizer and the given prototypes.
inline Model plain_model(std::size_t classes, std::size_t per_class, const Matrix& protos,
                         AdaptorKind kind = AdaptorKind::identity, std::uint64_t seed = 0) {
    std::vector<std::string> names;
    for (std::size_t c = 0; c < classes; ++c) names.push_back("k" + std::to_string(c));
    Normalizer norm{Vector(protos.cols(), 0.0), Vector(protos.cols(), 1.0)};
    return make_model(LabelSpace(names), norm, PrototypeBank{protos, per_class}, kind, seed);
}

}  // namespace testutil
