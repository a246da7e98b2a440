#pragma once

#include <cstddef>
#include <filesystem>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "protoscope/embedstore.hpp"
#include "protoscope/protonet.hpp"

namespace protoscope {

/// Mean of the per-segment logits of one (raw, un-normalized) track.
Vector track_logits(const Model& model, const EmbeddingRecord& record);

/// Index of the largest value; ties go to the lowest index.
std::size_t argmax(std::span<const double> values);

struct TrackPrediction {
    std::string id;
    std::size_t truth = 0;
    std::size_t predicted = 0;
    Vector logits;
};

struct EvalReport {
    std::vector<std::vector<std::size_t>> confusion;  // rows = true class
    Vector per_class_recall;                          // NaN for unrepresented classes
    std::vector<bool> represented;
    double class_normalized_accuracy = 0.0;
    double accuracy = 0.0;
    std::vector<TrackPrediction> predictions;
    Split split = Split::test;
};

EvalReport evaluate(const Model& model, const Dataset& dataset, Split split);

/// Report builder shared by evaluate() and tests that feed predictions directly.
EvalReport summarize(std::size_t classes, std::vector<TrackPrediction> predictions);

nlohmann::json to_json(const EvalReport& report, const LabelSpace& labels);
void write_confusion_csv(const std::filesystem::path& path, const EvalReport& report,
                         const LabelSpace& labels);
void write_predictions_csv(const std::filesystem::path& path, const EvalReport& report,
                           const LabelSpace& labels);

}  // namespace protoscope
