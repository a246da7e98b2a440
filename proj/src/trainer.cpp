#include "protoscope/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <limits>
#include <numbers>
#include <numeric>
#include <random>

#include "linalg.hpp"
#include "protoscope/error.hpp"
#include "protoscope/initkit.hpp"

namespace protoscope {

void TrainConfig::validate() const {
    const auto fail = [](const std::string& what) { throw ValidationError("config: " + what); };
    if (!(lambda >= 0.0 && lambda <= 1.0)) fail("lambda must lie in [0, 1]");
    if (batch_size == 0) fail("batch_size must be positive");
    if (total_steps == 0) fail("total_steps must be positive");
    if (!(peak_lr > 0.0) || !std::isfinite(peak_lr)) fail("peak_lr must be positive");
    if (!(weight_decay >= 0.0) || !std::isfinite(weight_decay)) fail("weight_decay must be >= 0");
    if (validate_every == 0) fail("validate_every must be positive");
    if (prototypes_per_class == 0) fail("prototypes_per_class must be positive");
}

namespace {

double sigmoid(double x) {
    if (x >= 0.0) return 1.0 / (1.0 + std::exp(-x));
    const double e = std::exp(x);
    return e / (1.0 + e);
}

double bce_with_logit(double x, double y) {
    return std::max(x, 0.0) - x * y + std::log1p(std::exp(-std::abs(x)));
}

}  // namespace

Matrix one_hot(std::span<const std::size_t> labels, std::size_t classes) {
    Matrix out(labels.size(), classes);
    for (std::size_t n = 0; n < labels.size(); ++n) {
        if (labels[n] >= classes) throw ValidationError("label index out of range");
        out(n, labels[n]) = 1.0;
    }
    return out;
}

double loss_classification(const Matrix& logits, const Matrix& targets) {
    if (logits.rows() != targets.rows() || logits.cols() != targets.cols()) {
        throw ValidationError("loss_classification: logits and targets differ in shape");
    }
    if (logits.empty()) throw ValidationError("loss_classification: empty batch");
    for (std::size_t n = 0; n < targets.rows(); ++n) {
        std::size_t ones = 0;
        for (double y : targets.row(n)) {
            if (y == 1.0) {
                ++ones;
            } else if (y != 0.0) {
                ones = 2;
                break;
            }
        }
        if (ones != 1) {
            throw ValidationError("loss_classification: target row " + std::to_string(n) +
                                  " is not one-hot");
        }
    }
    double acc = 0.0;
    const auto& x = logits.data();
    const auto& y = targets.data();
    for (std::size_t i = 0; i < x.size(); ++i) acc += bce_with_logit(x[i], y[i]);
    return acc / static_cast<double>(x.size());
}

PrototypeLoss loss_prototype(const Matrix& prototypes, std::size_t per_class, const Matrix& batch,
                             std::span<const std::size_t> labels) {
    if (batch.rows() != labels.size()) {
        throw ValidationError("loss_prototype: batch and label counts differ");
    }
    if (batch.cols() != prototypes.cols()) {
        throw ValidationError("loss_prototype: batch and prototype dims differ");
    }
    PrototypeLoss out;
    out.nearest.assign(prototypes.rows(), -1);
    double sum = 0.0;
    for (std::size_t j = 0; j < prototypes.rows(); ++j) {
        const std::size_t cls = j / per_class;
        double best = std::numeric_limits<double>::infinity();
        for (std::size_t i = 0; i < batch.rows(); ++i) {
            if (labels[i] != cls) continue;
            const double d = squared_distance(batch.row(i), prototypes.row(j));
            if (d < best) {
                best = d;
                out.nearest[j] = static_cast<std::ptrdiff_t>(i);
            }
        }
        if (out.nearest[j] >= 0) {
            sum += best;
            ++out.covered;
        }
    }
    out.value = out.covered ? sum / static_cast<double>(out.covered) : 0.0;
    return out;
}

double loss_total(double l_c, double l_p, double lambda) { return lambda * l_c + (1.0 - lambda) * l_p; }

LossReport compute_loss(const Model& model, const ForwardTrace& trace, const Matrix& batch,
                        std::span<const std::size_t> labels, double lambda,
                        bool prototype_loss_on_raw) {
    LossReport r;
    r.l_c = loss_classification(trace.logits, one_hot(labels, model.num_classes()));
    const auto& target = prototype_loss_on_raw ? model.params.prototypes : trace.z_p;
    const auto pl = loss_prototype(target, model.per_class, batch, labels);
    r.l_p = pl.value;
    r.covered_prototypes = pl.covered;
    r.total = loss_total(r.l_c, r.l_p, lambda);
    return r;
}

namespace {

Vector column_sums(const Matrix& m) {
    Vector out(m.cols(), 0.0);
    for (std::size_t r = 0; r < m.rows(); ++r) {
        for (std::size_t c = 0; c < m.cols(); ++c) out[c] += m(r, c);
    }
    return out;
}

// Backward through out = in + tanh(in W1 + b1) W2 + b2. Returns d/d(in).
Matrix residual_mlp_backward(const Matrix& g_out, const AdaptorCache& cache, const AdaptorParams& a,
                             AdaptorParams& grads) {
    const Matrix& act = cache.mlp_act;
    grads.w2 = detail::matmul_tn(act, g_out);
    grads.b2 = column_sums(g_out);
    Matrix g_pre = detail::matmul_nt(g_out, a.w2);
    for (std::size_t i = 0; i < g_pre.data().size(); ++i) {
        const double t = act.data()[i];
        g_pre.data()[i] *= 1.0 - t * t;
    }
    grads.w1 = detail::matmul_tn(cache.mlp_in, g_pre);
    grads.b1 = column_sums(g_pre);
    Matrix g_in = detail::matmul_nt(g_pre, a.w1);
    for (std::size_t i = 0; i < g_in.data().size(); ++i) g_in.data()[i] += g_out.data()[i];
    return g_in;
}

// Backward through h = p + softmax(Q K^T / sqrt(D)) V Wo. Returns d/dp.
Matrix set_attention_backward(const Matrix& g_h, const Matrix& p, const AdaptorCache& cache,
                              const AdaptorParams& a, AdaptorParams& grads) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(p.cols()));
    grads.wo = detail::matmul_tn(cache.mixed, g_h);
    const Matrix g_mixed = detail::matmul_nt(g_h, a.wo);
    Matrix g_scores = detail::matmul_nt(g_mixed, cache.v);
    const Matrix g_v = detail::matmul_tn(cache.attn, g_mixed);
    for (std::size_t i = 0; i < g_scores.rows(); ++i) {
        const auto attn = cache.attn.row(i);
        auto g = g_scores.row(i);
        double dot = 0.0;
        for (std::size_t j = 0; j < g.size(); ++j) dot += attn[j] * g[j];
        for (std::size_t j = 0; j < g.size(); ++j) g[j] = attn[j] * (g[j] - dot) * scale;
    }
    const Matrix g_q = detail::matmul(g_scores, cache.k);
    const Matrix g_k = detail::matmul_tn(g_scores, cache.q);
    grads.wq = detail::matmul_tn(p, g_q);
    grads.wk = detail::matmul_tn(p, g_k);
    grads.wv = detail::matmul_tn(p, g_v);

    Matrix g_p = g_h;
    detail::add_inplace(g_p, detail::matmul_nt(g_q, a.wq));
    detail::add_inplace(g_p, detail::matmul_nt(g_k, a.wk));
    detail::add_inplace(g_p, detail::matmul_nt(g_v, a.wv));
    return g_p;
}

}  // namespace

Parameters backward(const Model& model, const ForwardTrace& trace, const Matrix& batch,
                    std::span<const std::size_t> labels, double lambda,
                    bool prototype_loss_on_raw) {
    const std::size_t n_rows = batch.rows();
    const std::size_t classes = model.num_classes();
    const std::size_t protos = model.num_prototypes();
    const std::size_t dim = model.dim();
    const auto& w = model.params.head_weight;
    const auto& s = trace.similarity;

    Parameters grads = model.params.zeros_like();

    // Mean BCE over N*C entries: dL/dlogit = (sigmoid(x) - y) / (N*C).
    const Matrix targets = one_hot(labels, classes);
    const double norm = lambda / static_cast<double>(n_rows * classes);
    Matrix g_logits(n_rows, classes);
    for (std::size_t n = 0; n < n_rows; ++n) {
        for (std::size_t c = 0; c < classes; ++c) {
            g_logits(n, c) = norm * (sigmoid(trace.logits(n, c)) - targets(n, c));
        }
    }
    grads.head_weight = detail::matmul_tn(g_logits, s);
    grads.head_bias = column_sums(g_logits);

    // dL/dS, then through S = exp(-dist): d dist / d z_p = 2 (z_p - x).
    const Matrix g_s = detail::matmul(g_logits, w);
    Matrix g_zp(protos, dim);
    for (std::size_t n = 0; n < n_rows; ++n) {
        const auto x = batch.row(n);
        for (std::size_t m = 0; m < protos; ++m) {
            const double coef = -2.0 * g_s(n, m) * s(n, m);
            if (coef == 0.0) continue;
            auto g = g_zp.row(m);
            const auto z = trace.z_p.row(m);
            for (std::size_t d = 0; d < dim; ++d) g[d] += coef * (z[d] - x[d]);
        }
    }

    // Prototype loss: only the nearest same-class sample receives gradient.
    const Matrix& pl_target = prototype_loss_on_raw ? model.params.prototypes : trace.z_p;
    const auto pl = loss_prototype(pl_target, model.per_class, batch, labels);
    Matrix g_raw(protos, dim);
    if (pl.covered > 0) {
        Matrix& dest = prototype_loss_on_raw ? g_raw : g_zp;
        const double coef = 2.0 * (1.0 - lambda) / static_cast<double>(pl.covered);
        for (std::size_t j = 0; j < protos; ++j) {
            if (pl.nearest[j] < 0) continue;
            const auto x = batch.row(static_cast<std::size_t>(pl.nearest[j]));
            const auto t = pl_target.row(j);
            auto g = dest.row(j);
            for (std::size_t d = 0; d < dim; ++d) g[d] += coef * (t[d] - x[d]);
        }
    }

    const auto& a = model.params.adaptor;
    Matrix g_p;
    switch (model.adaptor) {
        case AdaptorKind::identity:
            g_p = std::move(g_zp);
            break;
        case AdaptorKind::residual_mlp:
            g_p = residual_mlp_backward(g_zp, trace.cache, a, grads.adaptor);
            break;
        case AdaptorKind::set_attention: {
            const Matrix g_h = residual_mlp_backward(g_zp, trace.cache, a, grads.adaptor);
            g_p = set_attention_backward(g_h, model.params.prototypes, trace.cache, a, grads.adaptor);
            break;
        }
    }
    detail::add_inplace(g_p, g_raw);
    grads.prototypes = std::move(g_p);
    return grads;
}

void adam_step(std::span<const TensorRef> params, std::span<const ConstTensorRef> grads,
               AdamState& state, double lr, double weight_decay) {
    if (params.size() != grads.size()) {
        throw ValidationError("adam_step: parameter and gradient lists differ in length");
    }
    for (std::size_t t = 0; t < params.size(); ++t) {
        if (params[t].values.size() != grads[t].values.size()) {
            throw ValidationError("adam_step: shape mismatch for " + params[t].name);
        }
        for (std::size_t i = 0; i < grads[t].values.size(); ++i) {
            if (!std::isfinite(grads[t].values[i])) {
                throw DivergenceError("non-finite gradient in " + grads[t].name + "[" +
                                      std::to_string(i) + "] at optimizer step " +
                                      std::to_string(state.step + 1));
            }
        }
    }
    if (state.m.empty()) {
        for (const auto& p : params) {
            state.m.emplace_back(p.values.size(), 0.0);
            state.v.emplace_back(p.values.size(), 0.0);
        }
    } else if (state.m.size() != params.size()) {
        throw ValidationError("adam_step: optimizer state does not match parameters");
    }

    ++state.step;
    const double t = static_cast<double>(state.step);
    const double correct1 = 1.0 - std::pow(state.beta1, t);
    const double correct2 = 1.0 - std::pow(state.beta2, t);
    const double decay = 1.0 - lr * weight_decay;
    for (std::size_t k = 0; k < params.size(); ++k) {
        auto p = params[k].values;
        const auto g = grads[k].values;
        auto& m = state.m[k];
        auto& v = state.v[k];
        for (std::size_t i = 0; i < p.size(); ++i) {
            p[i] *= decay;
            m[i] = state.beta1 * m[i] + (1.0 - state.beta1) * g[i];
            v[i] = state.beta2 * v[i] + (1.0 - state.beta2) * g[i] * g[i];
            const double m_hat = m[i] / correct1;
            const double v_hat = v[i] / correct2;
            p[i] -= lr * m_hat / (std::sqrt(v_hat) + state.eps);
        }
    }
}

double onecycle_lr(std::size_t step, std::size_t total_steps, double peak_lr) {
    if (step >= total_steps) {
        throw ValidationError("onecycle_lr: step " + std::to_string(step) + " outside [0, " +
                              std::to_string(total_steps) + ")");
    }
    const double initial = peak_lr / 25.0;
    const double final_lr = initial / 1e4;
    const std::size_t warm = total_steps * 3 / 10;
    if (step <= warm) {
        if (warm == 0) return peak_lr;
        const double frac = static_cast<double>(step) / static_cast<double>(warm);
        return peak_lr + (initial - peak_lr) * (1.0 + std::cos(std::numbers::pi * frac)) / 2.0;
    }
    const double frac =
        static_cast<double>(step - warm) / static_cast<double>(total_steps - 1 - warm);
    return final_lr + (peak_lr - final_lr) * (1.0 + std::cos(std::numbers::pi * frac)) / 2.0;
}

void write_metrics_csv(const std::filesystem::path& path, std::span<const MetricsRow> rows) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw IoError("cannot write " + path.string());
    out << "step,lr,l_c,l_p,total,val_total\n";
    char buf[256];
    for (const auto& r : rows) {
        std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g,%.17g,%.17g,", r.step, r.lr, r.loss.l_c,
                      r.loss.l_p, r.loss.total);
        out << buf;
        if (r.val_total) {
            std::snprintf(buf, sizeof buf, "%.17g", *r.val_total);
            out << buf;
        }
        out << '\n';
    }
    if (!out) throw IoError("write failed for " + path.string());
}

SegmentTable gather_segments(const Dataset& dataset, const Normalizer& norm, Split split) {
    const auto recs = dataset.split(split);
    std::size_t total = 0;
    for (const auto* r : recs) total += r->segments.n_segments();
    SegmentTable table{Matrix(total, dataset.dim), {}};
    table.labels.reserve(total);
    std::size_t row = 0;
    for (const auto* r : recs) {
        const std::size_t cls = dataset.labels.index_of(r->label);
        const Matrix z = normalize_segments(norm, r->segments);
        for (std::size_t s = 0; s < z.rows(); ++s, ++row) {
            std::copy(z.row(s).begin(), z.row(s).end(), table.rows.row(row).begin());
            table.labels.push_back(cls);
        }
    }
    return table;
}

Model initial_model(const TrainConfig& config, const Dataset& dataset) {
    config.validate();
    Normalizer norm = fit_normalizer(dataset);
    PrototypeBank bank = init_prototypes(dataset, norm, config.prototypes_per_class, config.seed);
    // Adaptor weights use a stream distinct from the k-means seeds.
    const std::uint64_t adaptor_seed = config.seed ^ 0x5DEECE66DULL;
    return make_model(dataset.labels, std::move(norm), std::move(bank), config.adaptor, adaptor_seed);
}

namespace {

bool finite_report(const LossReport& r) {
    return std::isfinite(r.l_c) && std::isfinite(r.l_p) && std::isfinite(r.total);
}

}  // namespace

TrainResult train(const TrainConfig& config, const Dataset& dataset) {
    Model model = initial_model(config, dataset);
    const SegmentTable train_rows = gather_segments(dataset, model.normalizer, Split::train);
    const SegmentTable valid_rows = gather_segments(dataset, model.normalizer, Split::valid);
    if (valid_rows.rows.rows() == 0) throw ValidationError("train: valid split is empty");

    std::mt19937_64 shuffle_rng(config.seed + 0x9E3779B97F4A7C15ULL);
    std::vector<std::size_t> order(train_rows.rows.rows());
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::shuffle(order.begin(), order.end(), shuffle_rng);
    std::size_t cursor = 0;

    AdamState adam;
    TrainResult result;
    result.metrics.reserve(config.total_steps);
    std::optional<Checkpoint> best;

    const std::size_t dim = model.dim();
    for (std::size_t step = 0; step < config.total_steps; ++step) {
        const std::size_t take = std::min(config.batch_size, order.size() - cursor);
        Matrix batch(take, dim);
        std::vector<std::size_t> labels(take);
        for (std::size_t i = 0; i < take; ++i) {
            const std::size_t src = order[cursor + i];
            const auto row = train_rows.rows.row(src);
            std::copy(row.begin(), row.end(), batch.row(i).begin());
            labels[i] = train_rows.labels[src];
        }
        cursor += take;
        if (cursor == order.size()) {
            std::shuffle(order.begin(), order.end(), shuffle_rng);
            cursor = 0;
        }

        const ForwardTrace trace = forward(model, batch);
        MetricsRow row;
        row.step = step;
        row.loss = compute_loss(model, trace, batch, labels, config.lambda,
                                config.prototype_loss_on_raw);
        if (!finite_report(row.loss)) {
            throw DivergenceError("non-finite training loss at step " + std::to_string(step) +
                                  (step ? "; last finite step " + std::to_string(step - 1)
                                        : std::string("; no finite step")));
        }
        const Parameters grads = backward(model, trace, batch, labels, config.lambda,
                                          config.prototype_loss_on_raw);
        row.lr = onecycle_lr(step, config.total_steps, config.peak_lr);
        const auto param_refs = model.params.tensors();
        const auto grad_refs = grads.tensors();
        adam_step(param_refs, grad_refs, adam, row.lr, config.weight_decay);

        const bool validate =
            (step + 1) % config.validate_every == 0 || step + 1 == config.total_steps;
        if (validate) {
            const ForwardTrace vt = forward(model, valid_rows.rows);
            const LossReport vr = compute_loss(model, vt, valid_rows.rows, valid_rows.labels,
                                               config.lambda, config.prototype_loss_on_raw);
            if (!finite_report(vr)) {
                throw DivergenceError("non-finite validation loss after step " +
                                      std::to_string(step));
            }
            row.val_total = vr.total;
            if (!best || vr.total < best->validation_loss) {
                best = make_checkpoint(model, config, step + 1, vr.total);
            }
        }
        result.metrics.push_back(row);
    }
    result.best = std::move(*best);
    return result;
}

}  // namespace protoscope
