#include "protoscope/embedstore.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <fstream>
#include <iterator>
#include <set>
#include <unordered_set>

#include <nlohmann/json.hpp>

#include "binary_io.hpp"
#include "protoscope/error.hpp"

namespace protoscope {

namespace {

constexpr unsigned char kPembMagic[4] = {'P', 'E', 'M', 'B'};
constexpr unsigned char kPembVersion = 0x01;
constexpr std::size_t kPembHeaderSize = 16;

}  // namespace

SegmentMatrix::SegmentMatrix(std::size_t n_segments, std::size_t dim, std::vector<float> values)
    : n_segments_(n_segments), dim_(dim), values_(std::move(values)) {
    if (n_segments_ == 0 || dim_ == 0) {
        throw ValidationError("segment matrix must have a positive shape");
    }
    if (values_.size() != n_segments_ * dim_) {
        throw ValidationError("segment matrix holds " + std::to_string(values_.size()) +
                              " values, expected " + std::to_string(n_segments_ * dim_));
    }
    for (std::size_t i = 0; i < values_.size(); ++i) {
        if (!std::isfinite(values_[i])) {
            throw ValidationError("non-finite embedding value at segment " +
                                  std::to_string(i / dim_) + ", dim " + std::to_string(i % dim_));
        }
    }
}

Split parse_split(const std::string& token) {
    if (token == "train") return Split::train;
    if (token == "valid") return Split::valid;
    if (token == "test") return Split::test;
    throw ValidationError("unknown split token '" + token + "'");
}

const char* split_name(Split split) noexcept {
    switch (split) {
        case Split::train: return "train";
        case Split::valid: return "valid";
        case Split::test: return "test";
    }
    return "?";
}

LabelSpace::LabelSpace(std::vector<std::string> classes) : classes_(std::move(classes)) {
    if (classes_.size() < 2) {
        throw ValidationError("a label space needs at least 2 classes, got " +
                              std::to_string(classes_.size()));
    }
    std::set<std::string> seen(classes_.begin(), classes_.end());
    if (seen.size() != classes_.size()) {
        throw ValidationError("label space contains duplicate class names");
    }
}

std::size_t LabelSpace::index_of(const std::string& label) const {
    const auto it = std::find(classes_.begin(), classes_.end(), label);
    if (it == classes_.end()) {
        throw ValidationError("label '" + label + "' is not in the label space");
    }
    return static_cast<std::size_t>(it - classes_.begin());
}

std::vector<const EmbeddingRecord*> Dataset::split(Split which) const {
    std::vector<const EmbeddingRecord*> out;
    for (const auto& rec : records) {
        if (rec.split == which) out.push_back(&rec);
    }
    return out;
}

std::vector<unsigned char> encode_embedding(const SegmentMatrix& matrix) {
    if (matrix.n_segments() == 0 || matrix.dim() == 0) {
        throw ValidationError("cannot encode an empty segment matrix");
    }
    detail::ByteWriter out;
    out.bytes(kPembMagic, 4);
    out.u8(kPembVersion);
    out.u8(0);
    out.u8(0);
    out.u8(0);
    out.u32(static_cast<std::uint32_t>(matrix.n_segments()));
    out.u32(static_cast<std::uint32_t>(matrix.dim()));
    for (float v : matrix.values()) {
        if (!std::isfinite(v)) throw ValidationError("non-finite value in segment matrix");
        out.f32(v);
    }
    return out.take();
}

SegmentMatrix decode_embedding(std::span<const unsigned char> bytes) {
    if (bytes.size() < kPembHeaderSize) {
        throw CorruptionError("PEMB header truncated (" + std::to_string(bytes.size()) + " bytes)");
    }
    detail::ByteReader in(bytes);
    const auto magic = in.bytes(4);
    if (!std::equal(magic.begin(), magic.end(), kPembMagic)) {
        throw FormatError("bad PEMB magic");
    }
    const auto version = in.u8();
    if (version != kPembVersion) {
        throw FormatError("unsupported PEMB version " + std::to_string(version));
    }
    for (int i = 0; i < 3; ++i) {
        if (in.u8() != 0) throw FormatError("PEMB reserved bytes must be zero");
    }
    const std::uint64_t n = in.u32();
    const std::uint64_t dim = in.u32();
    if (n == 0 || dim == 0) throw FormatError("PEMB declares an empty shape");
    const std::uint64_t expected = kPembHeaderSize + n * dim * 4;
    if (bytes.size() < expected) {
        throw CorruptionError("PEMB payload truncated: have " + std::to_string(bytes.size()) +
                              " bytes, header declares " + std::to_string(expected));
    }
    if (bytes.size() > expected) {
        throw CorruptionError("PEMB has " + std::to_string(bytes.size() - expected) +
                              " trailing bytes");
    }
    std::vector<float> values(n * dim);
    for (auto& v : values) v = in.f32();
    return SegmentMatrix(n, dim, std::move(values));
}

SegmentMatrix read_embedding_file(const std::filesystem::path& path) {
    const auto bytes = detail::read_file(path);
    try {
        return decode_embedding(bytes);
    } catch (const Error& e) {
        // Re-throw with the file name, preserving the error kind.
        const std::string msg = path.string() + ": " + e.what();
        if (dynamic_cast<const FormatError*>(&e)) throw FormatError(msg);
        if (dynamic_cast<const CorruptionError*>(&e)) throw CorruptionError(msg);
        throw ValidationError(msg);
    }
}

void write_embedding_file(const std::filesystem::path& path, const SegmentMatrix& matrix) {
    detail::write_file(path, encode_embedding(matrix));
}

Dataset make_dataset(std::vector<EmbeddingRecord> records) {
    if (records.empty()) throw ValidationError("dataset has no records");
    std::unordered_set<std::string> ids;
    std::set<std::string> labels;
    const std::size_t dim = records.front().segments.dim();
    for (const auto& rec : records) {
        if (rec.id.empty()) throw ValidationError("record with empty id");
        if (!ids.insert(rec.id).second) throw ValidationError("duplicate record id '" + rec.id + "'");
        if (rec.segments.n_segments() == 0) {
            throw ValidationError("record '" + rec.id + "' has no segments");
        }
        if (rec.segments.dim() != dim) {
            throw ValidationError("record '" + rec.id + "' has dim " +
                                  std::to_string(rec.segments.dim()) + ", dataset dim is " +
                                  std::to_string(dim));
        }
        labels.insert(rec.label);
    }
    std::sort(records.begin(), records.end(),
              [](const EmbeddingRecord& a, const EmbeddingRecord& b) { return a.id < b.id; });
    Dataset ds;
    ds.labels = LabelSpace(std::vector<std::string>(labels.begin(), labels.end()));
    ds.records = std::move(records);
    ds.dim = dim;
    return ds;
}

Dataset load_dataset(const std::filesystem::path& manifest_path) {
    std::ifstream in(manifest_path);
    if (!in) throw IoError("cannot open manifest " + manifest_path.string());
    const auto base = manifest_path.parent_path();

    std::vector<EmbeddingRecord> records;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        nlohmann::json obj;
        try {
            obj = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw FormatError("manifest line " + std::to_string(line_no) + ": " + e.what());
        }
        const auto field = [&](const char* key) -> std::string {
            if (!obj.is_object() || !obj.contains(key) || !obj[key].is_string()) {
                throw ValidationError("manifest line " + std::to_string(line_no) +
                                      ": missing string field '" + key + "'");
            }
            return obj[key].get<std::string>();
        };
        EmbeddingRecord rec;
        rec.id = field("id");
        rec.label = field("label");
        rec.split = parse_split(field("split"));
        rec.segments = read_embedding_file(base / field("path"));
        records.push_back(std::move(rec));
    }

    Dataset ds = make_dataset(std::move(records));
    if (ds.split(Split::train).empty()) throw ValidationError("manifest has no train records");
    if (ds.split(Split::valid).empty()) throw ValidationError("manifest has no valid records");
    return ds;
}

Normalizer fit_normalizer(const Dataset& dataset) {
    const auto train = dataset.split(Split::train);
    const std::size_t dim = dataset.dim;
    std::size_t rows = 0;
    Vector sum(dim, 0.0);
    for (const auto* rec : train) {
        for (std::size_t s = 0; s < rec->segments.n_segments(); ++s) {
            const auto r = rec->segments.row(s);
            for (std::size_t d = 0; d < dim; ++d) sum[d] += r[d];
            ++rows;
        }
    }
    if (rows == 0) throw ValidationError("cannot fit a normalizer on zero train rows");

    Normalizer norm;
    norm.mean.resize(dim);
    for (std::size_t d = 0; d < dim; ++d) norm.mean[d] = sum[d] / static_cast<double>(rows);

    Vector sq(dim, 0.0);
    for (const auto* rec : train) {
        for (std::size_t s = 0; s < rec->segments.n_segments(); ++s) {
            const auto r = rec->segments.row(s);
            for (std::size_t d = 0; d < dim; ++d) {
                const double diff = r[d] - norm.mean[d];
                sq[d] += diff * diff;
            }
        }
    }
    norm.stdev.resize(dim);
    for (std::size_t d = 0; d < dim; ++d) {
        norm.stdev[d] = std::max(std::sqrt(sq[d] / static_cast<double>(rows)), kStdFloor);
    }
    return norm;
}

namespace {

template <typename T>
Vector normalize_row(const Normalizer& norm, std::span<const T> row) {
    if (row.size() != norm.dim()) {
        throw ValidationError("row length " + std::to_string(row.size()) +
                              " does not match normalizer dim " + std::to_string(norm.dim()));
    }
    Vector out(row.size());
    for (std::size_t d = 0; d < row.size(); ++d) {
        out[d] = (static_cast<double>(row[d]) - norm.mean[d]) / norm.stdev[d];
    }
    return out;
}

}  // namespace

Vector apply_normalizer(const Normalizer& norm, std::span<const double> row) {
    return normalize_row(norm, row);
}

Vector apply_normalizer(const Normalizer& norm, std::span<const float> row) {
    return normalize_row(norm, row);
}

Vector invert_normalizer(const Normalizer& norm, std::span<const double> row) {
    if (row.size() != norm.dim()) {
        throw ValidationError("row length does not match normalizer dim");
    }
    Vector out(row.size());
    for (std::size_t d = 0; d < row.size(); ++d) out[d] = row[d] * norm.stdev[d] + norm.mean[d];
    return out;
}

Matrix normalize_segments(const Normalizer& norm, const SegmentMatrix& segments) {
    if (segments.dim() != norm.dim()) {
        throw ValidationError("segment dim " + std::to_string(segments.dim()) +
                              " does not match normalizer dim " + std::to_string(norm.dim()));
    }
    Matrix out(segments.n_segments(), segments.dim());
    for (std::size_t s = 0; s < segments.n_segments(); ++s) {
        const auto r = segments.row(s);
        for (std::size_t d = 0; d < segments.dim(); ++d) {
            out(s, d) = (static_cast<double>(r[d]) - norm.mean[d]) / norm.stdev[d];
        }
    }
    return out;
}

}  // namespace protoscope
