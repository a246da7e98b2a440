#include "protoscope/synthlab.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

#include <nlohmann/json.hpp>

#include "protoscope/error.hpp"
#include "protoscope/initkit.hpp"
#include "protoscope/trainer.hpp"

namespace protoscope::synth {

void BlobSpec::validate() const {
    const auto fail = [](const std::string& what) { throw ValidationError("blob spec: " + what); };
    if (n_classes < 2) fail("need at least 2 classes");
    if (per_class < 3) fail("need at least 3 tracks per class for train/valid/test");
    if (dim == 0) fail("dim must be positive");
    if (segments_per_track == 0) fail("segments_per_track must be positive");
    if (!(center_scale >= 0.0) || !(noise_std >= 0.0)) fail("scales must be non-negative");
}

namespace {

struct BlobTrack {
    EmbeddingRecord record;
    std::string file;
};

std::vector<BlobTrack> generate(const BlobSpec& spec) {
    spec.validate();
    std::mt19937_64 rng(spec.seed);
    std::uniform_real_distribution<double> uni(-spec.center_scale, spec.center_scale);
    std::normal_distribution<double> gauss(0.0, 1.0);

    std::vector<Vector> centers(spec.n_classes, Vector(spec.dim));
    for (auto& c : centers) {
        for (auto& v : c) v = spec.center_scale > 0.0 ? uni(rng) : 0.0;
    }

    const std::size_t n_valid = std::max<std::size_t>(1, spec.per_class / 10);
    const std::size_t n_test = n_valid;
    const std::size_t n_train = spec.per_class - n_valid - n_test;

    std::vector<BlobTrack> tracks;
    char buf[64];
    for (std::size_t c = 0; c < spec.n_classes; ++c) {
        std::snprintf(buf, sizeof buf, "class_%02zu", c);
        const std::string label = buf;
        for (std::size_t t = 0; t < spec.per_class; ++t) {
            std::vector<float> values(spec.segments_per_track * spec.dim);
            for (std::size_t s = 0; s < spec.segments_per_track; ++s) {
                for (std::size_t d = 0; d < spec.dim; ++d) {
                    const double noise = spec.noise_std > 0.0 ? spec.noise_std * gauss(rng) : 0.0;
                    values[s * spec.dim + d] = static_cast<float>(centers[c][d] + noise);
                }
            }
            BlobTrack bt;
            std::snprintf(buf, sizeof buf, "c%02zu_t%04zu", c, t);
            bt.record.id = buf;
            bt.record.label = label;
            bt.record.split = t < n_train ? Split::train
                              : t < n_train + n_valid ? Split::valid
                                                      : Split::test;
            bt.record.segments = SegmentMatrix(spec.segments_per_track, spec.dim, std::move(values));
            bt.file = "emb/" + bt.record.id + ".pemb";
            tracks.push_back(std::move(bt));
        }
    }
    return tracks;
}

}  // namespace

Dataset make_blobs(const BlobSpec& spec) {
    std::vector<EmbeddingRecord> records;
    for (auto& t : generate(spec)) records.push_back(std::move(t.record));
    return make_dataset(std::move(records));
}

std::filesystem::path gen_blobs(const BlobSpec& spec, const std::filesystem::path& out_dir) {
    const auto tracks = generate(spec);
    std::error_code ec;
    std::filesystem::create_directories(out_dir / "emb", ec);
    if (ec) throw IoError("cannot create " + (out_dir / "emb").string() + ": " + ec.message());

    const auto manifest = out_dir / "manifest.jsonl";
    std::ofstream out(manifest, std::ios::trunc);
    if (!out) throw IoError("cannot write " + manifest.string());
    const double ratio = spec.separation_ratio();
    for (const auto& t : tracks) {
        write_embedding_file(out_dir / t.file, t.record.segments);
        nlohmann::json line = {
            {"id", t.record.id},
            {"label", t.record.label},
            {"split", split_name(t.record.split)},
            {"path", t.file},
            {"separation_ratio", std::isfinite(ratio) ? nlohmann::json(ratio) : nlohmann::json()},
        };
        out << line.dump() << '\n';
    }
    if (!out) throw IoError("write failed for " + manifest.string());
    return manifest;
}

Vector finite_diff_grad(const std::function<double(std::span<const double>)>& loss_fn,
                        std::span<const double> params, double h) {
    Vector x(params.begin(), params.end());
    Vector grad(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        const double saved = x[i];
        x[i] = saved + h;
        const double up = loss_fn(x);
        x[i] = saved - h;
        const double down = loss_fn(x);
        x[i] = saved;
        if (!std::isfinite(up) || !std::isfinite(down)) {
            throw ValidationError("finite_diff_grad: non-finite evaluation at coordinate " +
                                  std::to_string(i));
        }
        grad[i] = (up - down) / (2.0 * h);
    }
    return grad;
}

PartitionOptimum brute_force_kmeans(const Matrix& points, std::size_t k) {
    const std::size_t n = points.rows();
    if (n > kBruteForceMaxPoints) {
        throw ValidationError("brute_force_kmeans: " + std::to_string(n) + " points exceeds the " +
                              std::to_string(kBruteForceMaxPoints) + "-point enumeration bound");
    }
    if (k == 0) throw ValidationError("brute_force_kmeans: k must be at least 1");
    PartitionOptimum best;
    best.inertia = std::numeric_limits<double>::infinity();
    if (n == 0) return {0.0, {}};

    // Restricted growth strings enumerate each set partition exactly once.
    std::vector<std::size_t> part(n, 0);
    std::vector<std::size_t> prefix_max(n, 0);
    const auto evaluate = [&] {
        const std::size_t parts = prefix_max[n - 1] + 1;
        Matrix sums(parts, points.cols());
        std::vector<std::size_t> counts(parts, 0);
        for (std::size_t i = 0; i < n; ++i) {
            for (std::size_t d = 0; d < points.cols(); ++d) sums(part[i], d) += points(i, d);
            ++counts[part[i]];
        }
        for (std::size_t p = 0; p < parts; ++p) {
            for (std::size_t d = 0; d < points.cols(); ++d) sums(p, d) /= static_cast<double>(counts[p]);
        }
        double inertia = 0.0;
        for (std::size_t i = 0; i < n; ++i) inertia += squared_distance(points.row(i), sums.row(part[i]));
        if (inertia < best.inertia) {
            best.inertia = inertia;
            best.partition = part;
        }
    };
    const std::function<void(std::size_t)> recurse = [&](std::size_t i) {
        if (i == n) {
            evaluate();
            return;
        }
        const std::size_t limit = std::min(k - 1, prefix_max[i - 1] + 1);
        for (std::size_t v = 0; v <= limit; ++v) {
            part[i] = v;
            prefix_max[i] = std::max(prefix_max[i - 1], v);
            recurse(i + 1);
        }
    };
    part[0] = 0;
    prefix_max[0] = 0;
    recurse(1);
    return best;
}

std::string GradientCheck::describe() const {
    char buf[384];
    std::snprintf(buf, sizeof buf,
                  "seed=%llu D=%zu C=%zu M=%zu N=%zu adaptor=%s lambda=%.2f raw_lp=%d "
                  "max_rel=%.3e max_abs_small=%.3e worst=%s (analytic %.6e, numeric %.6e)",
                  static_cast<unsigned long long>(seed), dim, classes, protos, batch,
                  adaptor_name(adaptor), lambda, raw_prototype_loss ? 1 : 0, max_rel_error,
                  max_abs_error_small, worst_tensor.c_str(), worst_analytic, worst_numeric);
    return buf;
}

GradientCheck run_gradient_check(std::uint64_t seed, double h) {
    std::mt19937_64 rng(seed * 0x9E3779B97F4A7C15ULL + 17);
    const auto pick = [&](std::size_t lo, std::size_t hi) {
        return lo + static_cast<std::size_t>(rng() % (hi - lo + 1));
    };
    std::normal_distribution<double> gauss(0.0, 1.0);

    GradientCheck gc;
    gc.seed = seed;
    gc.adaptor = static_cast<AdaptorKind>(seed % 3);
    static constexpr double kLambdas[] = {0.0, 0.25, 1.0};
    gc.lambda = kLambdas[(seed / 3) % 3];
    gc.raw_prototype_loss = ((seed / 9) % 4) == 3;
    gc.dim = pick(1, 8);
    gc.classes = pick(2, 4);
    const std::size_t per_class = pick(1, 6 / gc.classes);
    gc.protos = gc.classes * per_class;
    gc.batch = pick(1, 16);

    std::vector<std::string> names;
    for (std::size_t c = 0; c < gc.classes; ++c) names.push_back("k" + std::to_string(c));

    Model model;
    model.labels = LabelSpace(names);
    model.normalizer = {Vector(gc.dim, 0.0), Vector(gc.dim, 1.0)};
    model.adaptor = gc.adaptor;
    model.per_class = per_class;
    auto& p = model.params;
    p.prototypes = Matrix(gc.protos, gc.dim);
    for (auto& v : p.prototypes.data()) v = 0.5 * gauss(rng);
    p.adaptor = init_adaptor(gc.adaptor, gc.dim, rng());
    // Fill the zero-initialized adaptor tensors too, so every path carries gradient.
    const double bound = 1.0 / std::sqrt(static_cast<double>(gc.dim));
    std::uniform_real_distribution<double> uni(-bound, bound);
    for (auto* m : {&p.adaptor.wo, &p.adaptor.w2}) {
        for (auto& v : m->data()) v = uni(rng);
    }
    for (auto* b : {&p.adaptor.b1, &p.adaptor.b2}) {
        for (auto& v : *b) v = 0.5 * uni(rng);
    }
    p.head_weight = Matrix(gc.classes, gc.protos);
    for (auto& v : p.head_weight.data()) v = gauss(rng);
    p.head_bias.resize(gc.classes);
    for (auto& v : p.head_bias) v = 0.5 * gauss(rng);
    model.validate();

    Matrix batch(gc.batch, gc.dim);
    std::vector<std::size_t> labels(gc.batch);
    for (std::size_t n = 0; n < gc.batch; ++n) {
        labels[n] = pick(0, gc.classes - 1);
        // Samples scatter around prototypes of their class so S is not vanishing.
        const std::size_t anchor = labels[n] * per_class + pick(0, per_class - 1);
        for (std::size_t d = 0; d < gc.dim; ++d) {
            batch(n, d) = p.prototypes(anchor, d) + 0.5 * gauss(rng);
        }
    }

    const ForwardTrace trace = forward(model, batch);
    const Parameters analytic =
        backward(model, trace, batch, labels, gc.lambda, gc.raw_prototype_loss);

    // Flatten parameters so the oracle sees a plain vector.
    Vector flat;
    for (const auto& t : model.params.tensors()) flat.insert(flat.end(), t.values.begin(), t.values.end());
    const auto loss_fn = [&](std::span<const double> x) {
        Model probe = model;
        std::size_t offset = 0;
        for (auto& t : probe.params.tensors()) {
            std::copy(x.begin() + offset, x.begin() + offset + t.values.size(), t.values.begin());
            offset += t.values.size();
        }
        const ForwardTrace tr = forward(probe, batch);
        return compute_loss(probe, tr, batch, labels, gc.lambda, gc.raw_prototype_loss).total;
    };
    const Vector numeric = finite_diff_grad(loss_fn, flat, h);

    std::size_t offset = 0;
    gc.passed = true;
    for (const auto& t : analytic.tensors()) {
        for (std::size_t i = 0; i < t.values.size(); ++i, ++offset) {
            const double a = t.values[i];
            const double err = std::abs(a - numeric[offset]);
            if (std::abs(a) < kGradSmall) {
                if (err > gc.max_abs_error_small) gc.max_abs_error_small = err;
                if (err > kGradAbsTol) gc.passed = false;
            } else {
                const double rel = err / std::abs(a);
                if (rel > gc.max_rel_error) {
                    gc.max_rel_error = rel;
                    gc.worst_tensor = t.name + "[" + std::to_string(i) + "]";
                    gc.worst_analytic = a;
                    gc.worst_numeric = numeric[offset];
                }
                if (rel > kGradRelTol) gc.passed = false;
            }
        }
    }
    return gc;
}

KMeansCheck run_kmeans_check(std::uint64_t seed, double tol) {
    std::mt19937_64 rng(seed * 0xD1B54A32D192ED03ULL + 3);
    const auto pick = [&](std::size_t lo, std::size_t hi) {
        return lo + static_cast<std::size_t>(rng() % (hi - lo + 1));
    };
    std::normal_distribution<double> gauss(0.0, 1.0);

    KMeansCheck kc;
    kc.seed = seed;
    kc.n = pick(1, 8);
    kc.k = pick(1, std::min<std::size_t>(3, kc.n));
    kc.dim = pick(1, 3);
    Matrix points(kc.n, kc.dim);
    for (auto& v : points.data()) v = gauss(rng);

    const auto lloyd = kmeans(points, kc.k, seed);
    const auto oracle = brute_force_kmeans(points, kc.k);
    kc.lloyd_inertia = lloyd.inertia;
    kc.optimal_inertia = oracle.inertia;
    kc.monotone = true;
    for (std::size_t i = 1; i < lloyd.history.size(); ++i) {
        if (lloyd.history[i] > lloyd.history[i - 1]) kc.monotone = false;
    }
    kc.passed = kc.monotone && std::abs(kc.lloyd_inertia - kc.optimal_inertia) <= tol;
    return kc;
}

}  // namespace protoscope::synth
