#include "protoscope/explain.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <numeric>

#include "protoscope/error.hpp"
#include "protoscope/evaluator.hpp"

namespace protoscope {

std::vector<Attribution> class_contributions(const Model& model, const Vector& mean_similarity,
                                             std::size_t target) {
    std::vector<Attribution> out(model.num_prototypes());
    for (std::size_t m = 0; m < out.size(); ++m) {
        auto& a = out[m];
        a.prototype = m;
        a.prototype_class = model.class_of(m);
        a.similarity = mean_similarity[m];
        a.weight = model.params.head_weight(target, m);
        a.contribution = a.similarity * a.weight;
    }
    return out;
}

Explanation explain_prediction(const Model& model, const EmbeddingRecord& record, std::size_t top_k) {
    const Matrix z = normalize_segments(model.normalizer, record.segments);
    const ForwardTrace trace = forward(model, z);
    const std::size_t protos = model.num_prototypes();

    Explanation e;
    e.track_id = record.id;
    e.mean_similarity.assign(protos, 0.0);
    e.logits.assign(model.num_classes(), 0.0);
    for (std::size_t s = 0; s < z.rows(); ++s) {
        for (std::size_t m = 0; m < protos; ++m) e.mean_similarity[m] += trace.similarity(s, m);
        for (std::size_t c = 0; c < e.logits.size(); ++c) e.logits[c] += trace.logits(s, c);
    }
    const double n = static_cast<double>(z.rows());
    for (auto& v : e.mean_similarity) v /= n;
    for (auto& v : e.logits) v /= n;

    e.predicted = argmax(e.logits);
    e.bias = model.params.head_bias[e.predicted];
    e.top = class_contributions(model, e.mean_similarity, e.predicted);
    std::stable_sort(e.top.begin(), e.top.end(), [](const Attribution& a, const Attribution& b) {
        return a.contribution > b.contribution;
    });
    e.top.resize(std::min(top_k, e.top.size()));
    return e;
}

NeighborList nearest_samples(const Model& model, const Dataset& dataset, std::size_t prototype,
                             std::size_t k, bool same_class_only) {
    if (prototype >= model.num_prototypes()) {
        throw ValidationError("prototype index " + std::to_string(prototype) + " out of range");
    }
    const auto train = dataset.split(Split::train);
    if (train.empty()) throw ValidationError("nearest_samples: train split is empty");

    const Matrix z_p =
        adapt_prototypes(model.params.prototypes, model.adaptor, model.params.adaptor);
    const auto target = z_p.row(prototype);
    const std::string& own_label = model.labels.name(model.class_of(prototype));

    std::vector<NeighborHit> all;
    for (const auto* rec : train) {
        if (same_class_only && rec->label != own_label) continue;
        const Matrix z = normalize_segments(model.normalizer, rec->segments);
        for (std::size_t s = 0; s < z.rows(); ++s) {
            all.push_back({rec->id, s, rec->label, squared_distance(z.row(s), target)});
        }
    }
    std::sort(all.begin(), all.end(), [](const NeighborHit& a, const NeighborHit& b) {
        if (a.squared_distance != b.squared_distance) return a.squared_distance < b.squared_distance;
        if (a.track_id != b.track_id) return a.track_id < b.track_id;
        return a.segment < b.segment;
    });
    NeighborList out;
    out.truncated = all.size() < k;
    all.resize(std::min(k, all.size()));
    out.hits = std::move(all);
    return out;
}

SelfCheckReport self_classify_prototypes(const Model& model) {
    const Matrix z_p =
        adapt_prototypes(model.params.prototypes, model.adaptor, model.params.adaptor);
    const ForwardTrace trace = forward(model, z_p);
    SelfCheckReport r;
    std::size_t correct = 0;
    for (std::size_t m = 0; m < z_p.rows(); ++m) {
        PrototypeVerdict v;
        v.prototype = m;
        v.truth = model.class_of(m);
        const auto row = trace.logits.row(m);
        v.logits.assign(row.begin(), row.end());
        v.predicted = argmax(v.logits);
        v.top_rival = v.truth == 0 ? 1 : 0;
        for (std::size_t c = 0; c < v.logits.size(); ++c) {
            if (c != v.truth && v.logits[c] > v.logits[v.top_rival]) v.top_rival = c;
        }
        if (v.predicted == v.truth) ++correct;
        r.verdicts.push_back(std::move(v));
    }
    r.fraction_correct =
        r.verdicts.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(r.verdicts.size());
    return r;
}

std::string fnv1a_hex(std::span<const unsigned char> bytes) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (auto b : bytes) {
        h ^= b;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

namespace {

SegmentMatrix single_row(const Vector& v) {
    std::vector<float> values(v.size());
    for (std::size_t d = 0; d < v.size(); ++d) values[d] = static_cast<float>(v[d]);
    return SegmentMatrix(1, v.size(), std::move(values));
}

}  // namespace

nlohmann::json export_prototypes(const Model& model, const std::filesystem::path& out_dir,
                                 const ExportOptions& options) {
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create " + out_dir.string() + ": " + ec.message());

    const Matrix z_p =
        adapt_prototypes(model.params.prototypes, model.adaptor, model.params.adaptor);
    nlohmann::json entries = nlohmann::json::array();
    char name[64];
    for (std::size_t m = 0; m < model.num_prototypes(); ++m) {
        std::snprintf(name, sizeof name, "proto_%04zu_raw.pemb", m);
        const std::string raw_name = name;
        std::snprintf(name, sizeof name, "proto_%04zu_adapted.pemb", m);
        const std::string adapted_name = name;
        write_embedding_file(out_dir / raw_name,
                             single_row(invert_normalizer(model.normalizer, model.params.prototypes.row(m))));
        write_embedding_file(out_dir / adapted_name,
                             single_row(invert_normalizer(model.normalizer, z_p.row(m))));

        nlohmann::json entry = {
            {"prototype", m},
            {"class", model.labels.name(model.class_of(m))},
            {"raw", raw_name},
            {"adapted", adapted_name},
        };
        if (options.dataset) {
            nlohmann::json hits = nlohmann::json::array();
            for (const auto& h : nearest_samples(model, *options.dataset, m, options.neighbors).hits) {
                hits.push_back({{"id", h.track_id},
                                {"segment", h.segment},
                                {"label", h.label},
                                {"squared_distance", h.squared_distance}});
            }
            entry["nearest_train_segments"] = std::move(hits);
        }
        entries.push_back(std::move(entry));
    }

    nlohmann::json index = {
        {"checkpoint_hash", options.checkpoint_hash},
        {"hash_algorithm", "fnv1a64"},
        {"adaptor", adaptor_name(model.adaptor)},
        {"space", "encoder (de-normalized)"},
        {"dim", model.dim()},
        {"prototypes", std::move(entries)},
    };
    const std::string text = index.dump(2) + "\n";
    std::ofstream out(out_dir / "index.json", std::ios::trunc);
    if (!out) throw IoError("cannot write " + (out_dir / "index.json").string());
    out << text;
    return index;
}

nlohmann::json to_json(const Explanation& e, const LabelSpace& labels) {
    nlohmann::json top = nlohmann::json::array();
    for (const auto& a : e.top) {
        top.push_back({{"prototype", a.prototype},
                       {"prototype_class", labels.name(a.prototype_class)},
                       {"similarity", a.similarity},
                       {"weight", a.weight},
                       {"contribution", a.contribution}});
    }
    return {
        {"id", e.track_id},
        {"predicted", labels.name(e.predicted)},
        {"logits", e.logits},
        {"bias", e.bias},
        {"mean_similarity", e.mean_similarity},
        {"top", std::move(top)},
    };
}

nlohmann::json to_json(const SelfCheckReport& r, const LabelSpace& labels) {
    nlohmann::json rows = nlohmann::json::array();
    nlohmann::json wrong = nlohmann::json::array();
    for (const auto& v : r.verdicts) {
        nlohmann::json row = {{"prototype", v.prototype},
                              {"class", labels.name(v.truth)},
                              {"predicted", labels.name(v.predicted)},
                              {"top_rival", labels.name(v.top_rival)},
                              {"logits", v.logits}};
        if (v.predicted != v.truth) wrong.push_back(row);
        rows.push_back(std::move(row));
    }
    return {{"fraction_correct", r.fraction_correct},
            {"prototypes", std::move(rows)},
            {"misclassified", std::move(wrong)}};
}

}  // namespace protoscope
