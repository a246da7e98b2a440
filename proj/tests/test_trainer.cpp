#include <gtest/gtest.h>

#include <cmath>
#include <fstream>
#include <limits>
#include <random>
#include <sstream>

#include "helpers.hpp"
#include "protoscope/error.hpp"
#include "protoscope/synthlab.hpp"
#include "protoscope/trainer.hpp"

using namespace protoscope;
using testutil::matrix;

namespace {

std::string slurp(const std::filesystem::path& p) {
    std::ifstream in(p, std::ios::binary);
    return {std::istreambuf_iterator<char>(in), {}};
}

synth::BlobSpec small_blobs() {
    synth::BlobSpec spec;
    spec.per_class = 20;
    spec.dim = 6;
    return spec;
}

TrainConfig quick_config() {
    TrainConfig cfg;
    cfg.total_steps = 60;
    cfg.batch_size = 16;
    cfg.validate_every = 20;
    cfg.prototypes_per_class = 2;
    return cfg;
}

}  // namespace

TEST(ClassificationLoss, ZeroLogitsGiveLn2) {
    const std::vector<std::size_t> labels = {0, 2, 1};
    EXPECT_NEAR(loss_classification(Matrix(3, 3), one_hot(labels, 3)), std::log(2.0), 1e-9);
}

TEST(ClassificationLoss, SaturatedIsTiny) {
    const std::vector<std::size_t> labels = {1, 0};
    const auto y = one_hot(labels, 3);
    Matrix x(2, 3);
    for (std::size_t i = 0; i < 6; ++i) x.data()[i] = y.data()[i] > 0 ? 20.0 : -20.0;
    EXPECT_LT(loss_classification(x, y), 1e-8);
}

TEST(ClassificationLoss, StableMatchesNaive) {
    for (double x = -20.0; x <= 20.0; x += 0.25) {
        for (double y : {0.0, 1.0}) {
            const double s = 1.0 / (1.0 + std::exp(-x));
            const double not_s = 1.0 / (1.0 + std::exp(x));
            const double naive = -(y * std::log(s) + (1 - y) * std::log(not_s));
            Matrix logits(1, 2), targets(1, 2);
            logits(0, 0) = x;
            logits(0, 1) = 0.0;
            targets(0, 0) = y;
            targets(0, 1) = 1.0 - y;
            const double both = loss_classification(logits, targets);
            EXPECT_NEAR(both, (naive + std::log(2.0)) / 2.0, 1e-9);
        }
    }
}

TEST(ClassificationLoss, RejectsNonOneHot) {
    EXPECT_THROW(loss_classification(Matrix(1, 2), matrix(1, 2, {1, 1})), ValidationError);
}

TEST(PrototypeLoss, Examples) {
    const std::vector<std::size_t> two = {0, 0};
    auto r = loss_prototype(matrix(2, 1, {0, 50}), 1, matrix(2, 1, {2, 1}), two);
    EXPECT_EQ(r.value, 1.0);
    EXPECT_EQ(r.covered, 1u);
    EXPECT_EQ(r.nearest[1], -1);

    r = loss_prototype(matrix(2, 1, {1, 5}), 2, matrix(2, 1, {0, 3}), two);
    EXPECT_EQ(r.value, 2.5);
    EXPECT_EQ(r.covered, 2u);

    const std::vector<std::size_t> labels = {1, 0, 1};
    r = loss_prototype(matrix(2, 2, {1, 2, 3, 4}), 1, matrix(3, 2, {3, 4, 1, 2, 9, 9}), labels);
    EXPECT_EQ(r.value, 0.0);
}

TEST(PrototypeLoss, NoCoverageIsZero) {
    const std::vector<std::size_t> labels = {1};
    const auto r = loss_prototype(matrix(1, 1, {0}), 1, matrix(1, 1, {4}), labels);
    EXPECT_EQ(r.value, 0.0);
    EXPECT_EQ(r.covered, 0u);
}

TEST(PrototypeLoss, NonArgminSamplesDoNotMatter) {
    const std::vector<std::size_t> labels = {0, 0, 0};
    const auto a = loss_prototype(matrix(1, 1, {0}), 1, matrix(3, 1, {1, 2, 3}), labels);
    const auto b = loss_prototype(matrix(1, 1, {0}), 1, matrix(3, 1, {1, 20, -30}), labels);
    EXPECT_EQ(a.value, b.value);
}

TEST(TotalLoss, Examples) {
    EXPECT_EQ(loss_total(0.8, 0.4, 0.25), 0.5);
    EXPECT_EQ(loss_total(0.8, 0.4, 1.0), 0.8);
    EXPECT_EQ(loss_total(0.8, 0.4, 0.0), 0.4);
    const double a = loss_total(0.9, 0.3, 0.2), b = loss_total(0.9, 0.3, 0.6);
    EXPECT_NEAR(loss_total(0.9, 0.3, 0.4), (a + b) / 2.0, 1e-15);
}

TEST(Backward, HeadWeightGradientSingleSample) {
    std::mt19937_64 rng(21);
    auto model = testutil::plain_model(3, 2, testutil::random_matrix(6, 2, rng));
    const auto batch = testutil::random_matrix(1, 2, rng);
    const std::vector<std::size_t> labels = {1};
    const auto trace = forward(model, batch);
    const auto g = backward(model, trace, batch, labels, 1.0);
    for (std::size_t c = 0; c < 3; ++c) {
        const double sig = 1.0 / (1.0 + std::exp(-trace.logits(0, c)));
        const double y = c == 1 ? 1.0 : 0.0;
        for (std::size_t m = 0; m < 6; ++m) {
            EXPECT_NEAR(g.head_weight(c, m), (sig - y) * trace.similarity(0, m) / 3.0, 1e-15);
        }
    }
}

TEST(Backward, LambdaZeroLeavesHeadGradientZero) {
    std::mt19937_64 rng(22);
    auto model = testutil::plain_model(2, 2, testutil::random_matrix(4, 3, rng), AdaptorKind::set_attention, 1);
    const auto batch = testutil::random_matrix(5, 3, rng);
    const std::vector<std::size_t> labels = {0, 1, 1, 0, 1};
    const auto g = backward(model, forward(model, batch), batch, labels, 0.0);
    for (double v : g.head_weight.data()) EXPECT_EQ(v, 0.0);
    for (double v : g.head_bias) EXPECT_EQ(v, 0.0);
}

TEST(Backward, LambdaOneMatchesSimilarityPathOnly) {
    // With lambda = 1 the prototype gradient is the chain through S alone:
    // dL/dp_m = sum_n dL/dS[n][m] * 2 S[n][m] (z_x[n] - p_m).
    std::mt19937_64 rng(23);
    auto model = testutil::plain_model(2, 1, testutil::random_matrix(2, 2, rng));
    const auto batch = testutil::random_matrix(3, 2, rng);
    const std::vector<std::size_t> labels = {0, 1, 0};
    const auto tr = forward(model, batch);
    const auto g = backward(model, tr, batch, labels, 1.0);
    const auto y = one_hot(labels, 2);
    for (std::size_t m = 0; m < 2; ++m) {
        for (std::size_t d = 0; d < 2; ++d) {
            double expect = 0.0;
            for (std::size_t n = 0; n < 3; ++n) {
                double dS = 0.0;
                for (std::size_t c = 0; c < 2; ++c) {
                    const double sig = 1.0 / (1.0 + std::exp(-tr.logits(n, c)));
                    dS += (sig - y(n, c)) / 6.0 * model.params.head_weight(c, m);
                }
                expect += dS * 2.0 * tr.similarity(n, m) * (batch(n, d) - model.params.prototypes(m, d));
            }
            EXPECT_NEAR(g.prototypes(m, d), expect, 1e-14);
        }
    }
}

TEST(Backward, GradientCheckPasses) {
    for (std::uint64_t seed : {0, 1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 11, 12, 13, 14, 15, 16, 17, 18, 27}) {
        const auto r = synth::run_gradient_check(seed);
        EXPECT_TRUE(r.passed) << r.describe();
    }
}

TEST(Backward, FiniteDifferenceErrorShrinksQuadratically) {
    const auto coarse = synth::run_gradient_check(43, 1e-2);
    const auto fine = synth::run_gradient_check(43, 1e-3);
    ASSERT_GT(coarse.max_rel_error, 0.0);
    EXPECT_NEAR(coarse.max_rel_error / fine.max_rel_error, 100.0, 10.0);
}

TEST(Adam, ZeroGradientNoDecayIsNoOp) {
    Vector p = {1.5, -2.0}, g = {0.0, 0.0};
    AdamState st;
    std::vector<TensorRef> ps = {{"p", {2}, p}};
    std::vector<ConstTensorRef> gs = {{"p", {2}, g}};
    adam_step(ps, gs, st, 1e-3, 0.0);
    EXPECT_EQ(p, (Vector{1.5, -2.0}));
}

TEST(Adam, FirstStepIsLr) {
    Vector p = {0.0}, g = {1.0};
    AdamState st;
    std::vector<TensorRef> ps = {{"p", {1}, p}};
    std::vector<ConstTensorRef> gs = {{"p", {1}, g}};
    adam_step(ps, gs, st, 1e-3, 0.0);
    EXPECT_NEAR(p[0], -1e-3, 1e-10);
}

TEST(Adam, QuadraticTraceMatchesReference) {
    const std::vector<double> plain = {0.09999999983333335, 0.19989729258521102, 0.29961847654925267,
                                       0.3990864689442145, 0.4982205437727129};
    const std::vector<double> decayed = {0.09999999983333335, 0.19489729259354435, 0.2848818205984061,
                                         0.3701369099353804, 0.45083991121495764};
    for (const auto& [wd, ref] : {std::pair{0.0, plain}, std::pair{0.5, decayed}}) {
        Vector x = {0.0}, g = {0.0};
        AdamState st;
        std::vector<TensorRef> ps = {{"x", {1}, x}};
        std::vector<ConstTensorRef> gs = {{"x", {1}, g}};
        for (std::size_t t = 0; t < 5; ++t) {
            g[0] = 2.0 * (x[0] - 3.0);
            adam_step(ps, gs, st, 0.1, wd);
            EXPECT_NEAR(x[0], ref[t], 1e-12);
        }
    }
}

TEST(Adam, NonFiniteGradientAborts) {
    Vector p = {0.0}, g = {std::numeric_limits<double>::quiet_NaN()};
    AdamState st;
    std::vector<TensorRef> ps = {{"p", {1}, p}};
    std::vector<ConstTensorRef> gs = {{"p", {1}, g}};
    EXPECT_THROW(adam_step(ps, gs, st, 1e-3, 0.0), DivergenceError);
}

TEST(OneCycle, Endpoints) {
    EXPECT_DOUBLE_EQ(onecycle_lr(0, 1000, 1e-3), 4e-5);
    EXPECT_EQ(onecycle_lr(300, 1000, 1e-3), 1e-3);
    EXPECT_NEAR(onecycle_lr(999, 1000, 1e-3), 4e-9, 1e-15);
    EXPECT_THROW(onecycle_lr(1000, 1000, 1e-3), ValidationError);
    double top = 0.0;
    for (std::size_t s = 0; s < 1000; ++s) top = std::max(top, onecycle_lr(s, 1000, 1e-3));
    EXPECT_EQ(top, 1e-3);
}

TEST(OneCycle, Continuous) {
    for (std::size_t s = 1; s < 2000; ++s) {
        EXPECT_LT(std::abs(onecycle_lr(s, 2000, 1e-3) - onecycle_lr(s - 1, 2000, 1e-3)), 1e-5);
    }
}

TEST(Train, BlobsReachLowClassificationLoss) {
    const auto ds = synth::make_blobs({});
    TrainConfig cfg;
    cfg.total_steps = 2000;
    cfg.batch_size = 64;
    cfg.peak_lr = 0.1;
    cfg.adaptor = AdaptorKind::identity;
    const auto r = train(cfg, ds);
    EXPECT_LT(r.metrics.back().loss.l_c, 0.01);
}

TEST(Train, LambdaZeroHeadMovesOnlyByDecay) {
    const auto ds = synth::make_blobs(small_blobs());
    auto cfg = quick_config();
    cfg.lambda = 0.0;
    cfg.weight_decay = 0.3;
    cfg.peak_lr = 0.05;
    const auto init = initial_model(cfg, ds);
    const auto r = train(cfg, ds);
    double factor = 1.0;
    for (std::size_t s = 0; s < r.best.step; ++s) factor *= 1.0 - onecycle_lr(s, cfg.total_steps, cfg.peak_lr) * cfg.weight_decay;
    ASSERT_LT(factor, 0.999);
    const auto& w = r.best.model.params.head_weight;
    for (std::size_t i = 0; i < w.data().size(); ++i) {
        EXPECT_EQ(w.data()[i], static_cast<double>(static_cast<float>(init.params.head_weight.data()[i] * factor)));
    }
    for (double b : r.best.model.params.head_bias) EXPECT_EQ(b, 0.0);
}

TEST(Train, DeterministicCheckpointsAndMetrics) {
    const auto ds = synth::make_blobs(small_blobs());
    const auto dir = testutil::temp_dir("train_det");
    const auto cfg = quick_config();
    for (const char* tag : {"a", "b"}) {
        const auto r = train(cfg, ds);
        save_checkpoint(dir / (std::string(tag) + ".pckp"), r.best);
        write_metrics_csv(dir / (std::string(tag) + ".csv"), r.metrics);
    }
    EXPECT_EQ(slurp(dir / "a.pckp"), slurp(dir / "b.pckp"));
    EXPECT_EQ(slurp(dir / "a.csv"), slurp(dir / "b.csv"));
}

TEST(Train, MetricsCsvShape) {
    const auto ds = synth::make_blobs(small_blobs());
    const auto dir = testutil::temp_dir("metrics");
    const auto r = train(quick_config(), ds);
    ASSERT_EQ(r.metrics.size(), 60u);
    write_metrics_csv(dir / "m.csv", r.metrics);
    std::istringstream in(slurp(dir / "m.csv"));
    std::string line;
    std::getline(in, line);
    EXPECT_EQ(line, "step,lr,l_c,l_p,total,val_total");
    std::size_t rows = 0, validated = 0;
    while (std::getline(in, line)) {
        ++rows;
        if (line.back() != ',') ++validated;
    }
    EXPECT_EQ(rows, 60u);
    EXPECT_EQ(validated, 3u);
    EXPECT_TRUE(r.best.step == 20 || r.best.step == 40 || r.best.step == 60);
}

TEST(Train, BestCheckpointHasLowestValidationLoss) {
    const auto ds = synth::make_blobs(small_blobs());
    const auto r = train(quick_config(), ds);
    for (const auto& m : r.metrics) {
        if (m.val_total) EXPECT_LE(r.best.validation_loss, *m.val_total);
    }
}

TEST(Train, DivergenceIsReported) {
    const auto ds = synth::make_blobs(small_blobs());
    auto cfg = quick_config();
    cfg.peak_lr = 1e300;
    cfg.adaptor = AdaptorKind::residual_mlp;
    EXPECT_THROW(train(cfg, ds), DivergenceError);
}

TEST(Train, InvalidConfigRejected) {
    const auto ds = synth::make_blobs(small_blobs());
    auto cfg = quick_config();
    cfg.lambda = 1.5;
    EXPECT_THROW(train(cfg, ds), ValidationError);
    cfg = quick_config();
    cfg.batch_size = 0;
    EXPECT_THROW(train(cfg, ds), ValidationError);
}

TEST(Checkpoint, RoundTripIsByteIdentical) {
    const auto ds = synth::make_blobs(small_blobs());
    auto cfg = quick_config();
    for (auto kind : {AdaptorKind::identity, AdaptorKind::residual_mlp, AdaptorKind::set_attention}) {
        cfg.adaptor = kind;
        const auto r = train(cfg, ds);
        const auto bytes = encode_checkpoint(r.best);
        const auto back = decode_checkpoint(bytes);
        EXPECT_EQ(encode_checkpoint(back), bytes);
        EXPECT_EQ(back.model.params, r.best.model.params);
        EXPECT_EQ(back.model.labels, r.best.model.labels);
        EXPECT_EQ(back.step, r.best.step);
        const auto batch = gather_segments(ds, back.model.normalizer, Split::test).rows;
        EXPECT_EQ(forward(back.model, batch).logits, forward(r.best.model, batch).logits);
    }
}

TEST(Checkpoint, TamperingIsDetected) {
    const auto ds = synth::make_blobs(small_blobs());
    const auto r = train(quick_config(), ds);
    const auto bytes = encode_checkpoint(r.best);

    auto bad = bytes;
    bad[0] = 'Q';
    EXPECT_THROW(decode_checkpoint(bad), FormatError);
    bad = bytes;
    bad[4] = 9;
    EXPECT_THROW(decode_checkpoint(bad), FormatError);
    bad.assign(bytes.begin(), bytes.begin() + bytes.size() / 2);
    EXPECT_THROW(decode_checkpoint(bad), CorruptionError);
    bad = bytes;
    bad.push_back(0);
    EXPECT_THROW(decode_checkpoint(bad), CorruptionError);

    // First tensor: count(4) + name length(2) + "prototypes"(10) + rank(1), then dims.
    bad = bytes;
    const std::size_t dim0 = 12 + 2 + 10 + 1;
    bad[dim0] ^= 0x01;
    EXPECT_THROW(decode_checkpoint(bad), CorruptionError);
}

TEST(Checkpoint, MissingFileIsIoError) {
    EXPECT_THROW(load_checkpoint("/nonexistent/ck.pckp"), IoError);
}
