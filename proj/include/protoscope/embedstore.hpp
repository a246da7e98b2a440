#pragma once

#include <cstddef>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "protoscope/tensor.hpp"

namespace protoscope {

/// Segment embeddings of one track, stored exactly as they are on disk
/// (binary32, segment-major).
class SegmentMatrix {
public:
    SegmentMatrix() = default;
    /// Throws ValidationError on a zero dimension, size mismatch or a
    /// non-finite value.
    SegmentMatrix(std::size_t n_segments, std::size_t dim, std::vector<float> values);

    std::size_t n_segments() const noexcept { return n_segments_; }
    std::size_t dim() const noexcept { return dim_; }
    std::span<const float> row(std::size_t i) const { return {values_.data() + i * dim_, dim_}; }
    const std::vector<float>& values() const noexcept { return values_; }

    bool operator==(const SegmentMatrix&) const = default;

private:
    std::size_t n_segments_ = 0;
    std::size_t dim_ = 0;
    std::vector<float> values_;
};

enum class Split { train, valid, test };

Split parse_split(const std::string& token);
const char* split_name(Split split) noexcept;

struct EmbeddingRecord {
    std::string id;
    std::string label;
    Split split = Split::train;
    SegmentMatrix segments;

    bool operator==(const EmbeddingRecord&) const = default;
};

/// Ordered class names; a class index is a position in this list.
class LabelSpace {
public:
    LabelSpace() = default;
    /// Requires at least two distinct names.
    explicit LabelSpace(std::vector<std::string> classes);

    std::size_t size() const noexcept { return classes_.size(); }
    const std::vector<std::string>& classes() const noexcept { return classes_; }
    const std::string& name(std::size_t index) const { return classes_.at(index); }
    /// Throws ValidationError for an unknown label.
    std::size_t index_of(const std::string& label) const;

    bool operator==(const LabelSpace&) const = default;

private:
    std::vector<std::string> classes_;
};

/// Records sorted by id, plus the label space derived from them.
struct Dataset {
    LabelSpace labels;
    std::vector<EmbeddingRecord> records;
    std::size_t dim = 0;

    std::vector<const EmbeddingRecord*> split(Split which) const;
};

struct Normalizer {
    Vector mean;
    Vector stdev;

    std::size_t dim() const noexcept { return mean.size(); }
};

/// Std values below this floor are clamped so the transform stays total.
inline constexpr double kStdFloor = 1e-8;

// PEMB container.
SegmentMatrix read_embedding_file(const std::filesystem::path& path);
void write_embedding_file(const std::filesystem::path& path, const SegmentMatrix& matrix);
std::vector<unsigned char> encode_embedding(const SegmentMatrix& matrix);
SegmentMatrix decode_embedding(std::span<const unsigned char> bytes);

/// Loads a JSON-Lines manifest. Paths are resolved against the manifest's
/// directory; records come back sorted by id.
Dataset load_dataset(const std::filesystem::path& manifest_path);

/// Builds a dataset from in-memory records (same validation as load_dataset).
Dataset make_dataset(std::vector<EmbeddingRecord> records);

/// Per-dimension mean and population std over every train segment row.
Normalizer fit_normalizer(const Dataset& dataset);

Vector apply_normalizer(const Normalizer& norm, std::span<const double> row);
Vector apply_normalizer(const Normalizer& norm, std::span<const float> row);
Vector invert_normalizer(const Normalizer& norm, std::span<const double> row);

/// All segment rows of a track, z-scored.
Matrix normalize_segments(const Normalizer& norm, const SegmentMatrix& segments);

}  // namespace protoscope
