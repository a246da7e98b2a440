#include "protoscope/evaluator.hpp"

#include <cmath>
#include <fstream>
#include <limits>

#include "protoscope/error.hpp"

namespace protoscope {

Vector track_logits(const Model& model, const EmbeddingRecord& record) {
    if (record.segments.n_segments() == 0) {
        throw ValidationError("track '" + record.id + "' has no segments");
    }
    const Matrix z = normalize_segments(model.normalizer, record.segments);
    const ForwardTrace trace = forward(model, z);
    if (z.rows() == 1) {
        const auto row = trace.logits.row(0);
        return Vector(row.begin(), row.end());
    }
    Vector mean(model.num_classes(), 0.0);
    for (std::size_t s = 0; s < z.rows(); ++s) {
        for (std::size_t c = 0; c < mean.size(); ++c) mean[c] += trace.logits(s, c);
    }
    for (auto& v : mean) v /= static_cast<double>(z.rows());
    return mean;
}

std::size_t argmax(std::span<const double> values) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < values.size(); ++i) {
        if (values[i] > values[best]) best = i;
    }
    return best;
}

EvalReport summarize(std::size_t classes, std::vector<TrackPrediction> predictions) {
    EvalReport r;
    r.confusion.assign(classes, std::vector<std::size_t>(classes, 0));
    for (const auto& p : predictions) {
        if (p.truth >= classes || p.predicted >= classes) {
            throw ValidationError("prediction refers to a class outside the label space");
        }
        ++r.confusion[p.truth][p.predicted];
    }

    r.per_class_recall.assign(classes, std::numeric_limits<double>::quiet_NaN());
    r.represented.assign(classes, false);
    double recall_sum = 0.0;
    std::size_t represented = 0;
    std::size_t correct = 0;
    for (std::size_t c = 0; c < classes; ++c) {
        std::size_t count = 0;
        for (auto v : r.confusion[c]) count += v;
        correct += r.confusion[c][c];
        if (count == 0) continue;
        r.represented[c] = true;
        r.per_class_recall[c] =
            static_cast<double>(r.confusion[c][c]) / static_cast<double>(count);
        recall_sum += r.per_class_recall[c];
        ++represented;
    }
    r.class_normalized_accuracy = represented ? recall_sum / static_cast<double>(represented) : 0.0;
    r.accuracy = predictions.empty()
                     ? 0.0
                     : static_cast<double>(correct) / static_cast<double>(predictions.size());
    r.predictions = std::move(predictions);
    return r;
}

EvalReport evaluate(const Model& model, const Dataset& dataset, Split split) {
    const auto records = dataset.split(split);
    if (records.empty()) {
        throw ValidationError(std::string("split '") + split_name(split) + "' has no records");
    }
    std::vector<TrackPrediction> preds;
    preds.reserve(records.size());
    for (const auto* rec : records) {
        TrackPrediction p;
        p.id = rec->id;
        p.truth = model.labels.index_of(rec->label);
        p.logits = track_logits(model, *rec);
        p.predicted = argmax(p.logits);
        preds.push_back(std::move(p));
    }
    EvalReport r = summarize(model.num_classes(), std::move(preds));
    r.split = split;
    return r;
}

nlohmann::json to_json(const EvalReport& report, const LabelSpace& labels) {
    nlohmann::json recall = nlohmann::json::object();
    nlohmann::json excluded = nlohmann::json::array();
    for (std::size_t c = 0; c < labels.size(); ++c) {
        if (report.represented[c]) {
            recall[labels.name(c)] = report.per_class_recall[c];
        } else {
            recall[labels.name(c)] = nullptr;
            excluded.push_back(labels.name(c));
        }
    }
    return {
        {"split", split_name(report.split)},
        {"tracks", report.predictions.size()},
        {"labels", labels.classes()},
        {"confusion", report.confusion},
        {"per_class_recall", recall},
        {"classes_excluded_from_mean", excluded},
        {"class_normalized_accuracy", report.class_normalized_accuracy},
        {"accuracy", report.accuracy},
        {"tie_break", "lowest class index"},
    };
}

void write_confusion_csv(const std::filesystem::path& path, const EvalReport& report,
                         const LabelSpace& labels) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << "true\\predicted";
    for (const auto& name : labels.classes()) out << ',' << name;
    out << '\n';
    for (std::size_t c = 0; c < labels.size(); ++c) {
        out << labels.name(c);
        for (auto v : report.confusion[c]) out << ',' << v;
        out << '\n';
    }
}

void write_predictions_csv(const std::filesystem::path& path, const EvalReport& report,
                           const LabelSpace& labels) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << "id,true,predicted";
    for (const auto& name : labels.classes()) out << ",logit_" << name;
    out << '\n';
    char buf[64];
    for (const auto& p : report.predictions) {
        out << p.id << ',' << labels.name(p.truth) << ',' << labels.name(p.predicted);
        for (double v : p.logits) {
            std::snprintf(buf, sizeof buf, ",%.17g", v);
            out << buf;
        }
        out << '\n';
    }
}

}  // namespace protoscope
