#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "protoscope/embedstore.hpp"
#include "protoscope/protonet.hpp"

namespace protoscope {

struct Attribution {
    std::size_t prototype = 0;
    std::size_t prototype_class = 0;
    double similarity = 0.0;  // segment-averaged S
    double weight = 0.0;      // W[c][prototype]
    double contribution = 0.0;
};

/// Why a track got its prediction. Since the head is linear, averaging S over
/// segments first makes sum(contribution) + bias equal the averaged logit.
struct Explanation {
    std::string track_id;
    std::size_t predicted = 0;
    Vector logits;           // segment-averaged
    Vector mean_similarity;  // M
    double bias = 0.0;       // b[predicted]
    std::vector<Attribution> top;  // top_k by contribution, descending
};

Explanation explain_prediction(const Model& model, const EmbeddingRecord& record, std::size_t top_k);

/// Contributions of every prototype towards class `target` (prototype order).
std::vector<Attribution> class_contributions(const Model& model, const Vector& mean_similarity,
                                             std::size_t target);

struct NeighborHit {
    std::string track_id;
    std::size_t segment = 0;
    std::string label;
    double squared_distance = 0.0;
};

struct NeighborList {
    std::vector<NeighborHit> hits;
    bool truncated = false;  // fewer than k candidates existed
};

/// Exhaustive scan of normalized train segments against adapted prototype
/// `prototype`; ascending distance, ties by (track id, segment).
NeighborList nearest_samples(const Model& model, const Dataset& dataset, std::size_t prototype,
                             std::size_t k, bool same_class_only = false);

struct PrototypeVerdict {
    std::size_t prototype = 0;
    std::size_t truth = 0;
    std::size_t predicted = 0;
    std::size_t top_rival = 0;  // highest-scoring class other than `truth`
    Vector logits;
};

struct SelfCheckReport {
    std::vector<PrototypeVerdict> verdicts;
    double fraction_correct = 0.0;
};

/// Classifies every adapted prototype as a single-segment input.
SelfCheckReport self_classify_prototypes(const Model& model);

struct ExportOptions {
    const Dataset* dataset = nullptr;  // enables nearest-sample info in the index
    std::size_t neighbors = 3;
    std::string checkpoint_hash;
};

/// Writes proto_XXXX_raw.pemb and proto_XXXX_adapted.pemb per prototype
/// (de-normalized into encoder space) plus index.json. Returns the index.
nlohmann::json export_prototypes(const Model& model, const std::filesystem::path& out_dir,
                                 const ExportOptions& options = {});

/// FNV-1a 64-bit digest, hex encoded.
std::string fnv1a_hex(std::span<const unsigned char> bytes);

nlohmann::json to_json(const Explanation& e, const LabelSpace& labels);
nlohmann::json to_json(const SelfCheckReport& r, const LabelSpace& labels);

}  // namespace protoscope
