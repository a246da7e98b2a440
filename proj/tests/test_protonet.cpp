#include <gtest/gtest.h>

#include <cmath>
#include <random>

#include "helpers.hpp"
#include "protoscope/error.hpp"
#include "protoscope/protonet.hpp"

using namespace protoscope;
using testutil::matrix;

TEST(Similarity, Examples) {
    const auto s = similarity(matrix(3, 2, {1, 0, 0.5, 0.5, 0.3, -0.7}), matrix(2, 2, {0, 0, 0.3, -0.7}));
    EXPECT_NEAR(s(0, 0), 0.3678794, 1e-7);
    EXPECT_NEAR(s(1, 0), 0.6065307, 1e-7);
    EXPECT_EQ(s(2, 1), 1.0);
}

TEST(Similarity, BoundedAndSymmetric) {
    std::mt19937_64 rng(1);
    const auto a = testutil::random_matrix(6, 3, rng);
    const auto b = testutil::random_matrix(4, 3, rng);
    const auto ab = similarity(a, b);
    const auto ba = similarity(b, a);
    for (std::size_t i = 0; i < 6; ++i) {
        for (std::size_t j = 0; j < 4; ++j) {
            EXPECT_GT(ab(i, j), 0.0);
            EXPECT_LT(ab(i, j), 1.0);
            EXPECT_EQ(ab(i, j), ba(j, i));
        }
    }
}

TEST(Similarity, ShapeMismatch) {
    EXPECT_THROW(similarity(Matrix(1, 2), Matrix(1, 3)), ValidationError);
}

TEST(LinearHead, BlockAssignment) {
    const auto head2 = init_linear_head(LabelSpace({"a", "b"}), PrototypeBank{Matrix(2, 3), 1});
    EXPECT_EQ(head2.weight, matrix(2, 2, {1, 0, 0, 1}));
    const auto head4 = init_linear_head(LabelSpace({"a", "b"}), PrototypeBank{Matrix(4, 3), 2});
    EXPECT_EQ(head4.weight, matrix(2, 4, {1, 1, 0, 0, 0, 0, 1, 1}));
    EXPECT_EQ(head4.bias, (Vector{0.0, 0.0}));
}

TEST(LinearHead, InconsistentBankRejected) {
    EXPECT_THROW(init_linear_head(LabelSpace({"a", "b"}), PrototypeBank{Matrix(3, 3), 1}), ValidationError);
}

TEST(Adaptor, IdentityReturnsInput) {
    std::mt19937_64 rng(2);
    const auto p = testutil::random_matrix(4, 3, rng);
    EXPECT_EQ(adapt_prototypes(p, AdaptorKind::identity, {}), p);
}

TEST(Adaptor, ZeroResidualIsIdentity) {
    std::mt19937_64 rng(3);
    const auto p = testutil::random_matrix(4, 3, rng);
    AdaptorParams a;
    a.w1 = Matrix(3, 3);
    a.w2 = Matrix(3, 3);
    a.b1 = Vector(3, 0.0);
    a.b2 = Vector(3, 0.0);
    EXPECT_EQ(adapt_prototypes(p, AdaptorKind::residual_mlp, a), p);
    a.wq = a.wk = a.wv = a.wo = Matrix(3, 3);
    EXPECT_EQ(adapt_prototypes(p, AdaptorKind::set_attention, a), p);
}

TEST(Adaptor, FreshInitIsIdentityMap) {
    std::mt19937_64 rng(4);
    const auto p = testutil::random_matrix(5, 4, rng);
    for (auto kind : {AdaptorKind::residual_mlp, AdaptorKind::set_attention}) {
        EXPECT_EQ(adapt_prototypes(p, kind, init_adaptor(kind, 4, 9)), p);
    }
}

TEST(Adaptor, SingletonAttentionWeightIsOne) {
    std::mt19937_64 rng(5);
    auto a = init_adaptor(AdaptorKind::set_attention, 3, 1);
    a.wo = testutil::random_matrix(3, 3, rng);
    AdaptorCache cache;
    adapt_prototypes(testutil::random_matrix(1, 3, rng), AdaptorKind::set_attention, a, &cache);
    ASSERT_EQ(cache.attn.rows(), 1u);
    EXPECT_EQ(cache.attn(0, 0), 1.0);
}

TEST(Adaptor, AttentionIsPermutationEquivariant) {
    std::mt19937_64 rng(6);
    auto a = init_adaptor(AdaptorKind::set_attention, 3, 2);
    a.wo = testutil::random_matrix(3, 3, rng, 0.5);
    a.w2 = testutil::random_matrix(3, 3, rng, 0.5);
    const auto p = testutil::random_matrix(4, 3, rng);
    const std::vector<std::size_t> perm = {2, 0, 3, 1};
    Matrix q(4, 3);
    for (std::size_t i = 0; i < 4; ++i) {
        for (std::size_t d = 0; d < 3; ++d) q(i, d) = p(perm[i], d);
    }
    const auto zp = adapt_prototypes(p, AdaptorKind::set_attention, a);
    const auto zq = adapt_prototypes(q, AdaptorKind::set_attention, a);
    for (std::size_t i = 0; i < 4; ++i) {
        for (std::size_t d = 0; d < 3; ++d) EXPECT_NEAR(zq(i, d), zp(perm[i], d), 1e-12);
    }
}

TEST(Forward, InputOnPrototypeGivesUnitSimilarity) {
    const auto protos = matrix(4, 2, {0, 0, 1, 1, 5, 5, 6, 7});
    const auto model = testutil::plain_model(2, 2, protos);
    const auto t = forward(model, matrix(1, 2, {5, 5}));
    EXPECT_EQ(t.similarity(0, 2), 1.0);
    EXPECT_GE(t.logits(0, 1), 1.0);
}

TEST(Forward, ZeroHeadGivesZeroLogits) {
    std::mt19937_64 rng(7);
    auto model = testutil::plain_model(3, 1, testutil::random_matrix(3, 2, rng));
    model.params.head_weight = Matrix(3, 3);
    const auto t = forward(model, testutil::random_matrix(5, 2, rng));
    for (double v : t.logits.data()) EXPECT_EQ(v, 0.0);
}

TEST(Forward, LogitsAreSimilaritiesUnderBlockHead) {
    // S = [0.2, 0.7] for a point at the origin and prototypes at distance sqrt(-ln s).
    const double d0 = std::sqrt(-std::log(0.2)), d1 = std::sqrt(-std::log(0.7));
    const auto model = testutil::plain_model(2, 1, matrix(2, 1, {d0, -d1}));
    const auto t = forward(model, matrix(1, 1, {0}));
    EXPECT_NEAR(t.logits(0, 0), 0.2, 1e-15);
    EXPECT_NEAR(t.logits(0, 1), 0.7, 1e-15);
}

TEST(Forward, DeterministicAndDimChecked) {
    std::mt19937_64 rng(8);
    const auto model = testutil::plain_model(2, 2, testutil::random_matrix(4, 3, rng), AdaptorKind::set_attention, 4);
    const auto batch = testutil::random_matrix(6, 3, rng);
    const auto a = forward(model, batch), b = forward(model, batch);
    EXPECT_EQ(a.logits, b.logits);
    EXPECT_EQ(a.z_p, b.z_p);
    EXPECT_THROW(forward(model, Matrix(2, 4)), ValidationError);
}

TEST(Adaptor, ParseNames) {
    EXPECT_EQ(parse_adaptor("residual-mlp"), AdaptorKind::residual_mlp);
    EXPECT_EQ(parse_adaptor("set-attention"), AdaptorKind::set_attention);
    EXPECT_EQ(parse_adaptor("identity"), AdaptorKind::identity);
    EXPECT_THROW(parse_adaptor("transformer"), ValidationError);
}

TEST(Forward, PrototypePermutationWithHeadColumns) {
    std::mt19937_64 rng(9);
    for (auto kind : {AdaptorKind::identity, AdaptorKind::residual_mlp, AdaptorKind::set_attention}) {
        auto model = testutil::plain_model(2, 3, testutil::random_matrix(6, 3, rng), kind, 2);
        model.params.head_weight = testutil::random_matrix(2, 6, rng);
        if (kind != AdaptorKind::identity) model.params.adaptor.w2 = testutil::random_matrix(3, 3, rng, 0.5);
        const std::vector<std::size_t> perm = {4, 1, 5, 0, 3, 2};
        auto permuted = model;
        for (std::size_t m = 0; m < 6; ++m) {
            for (std::size_t d = 0; d < 3; ++d) permuted.params.prototypes(m, d) = model.params.prototypes(perm[m], d);
            for (std::size_t c = 0; c < 2; ++c) permuted.params.head_weight(c, m) = model.params.head_weight(c, perm[m]);
        }
        const auto batch = testutil::random_matrix(5, 3, rng);
        const auto a = forward(model, batch).logits, b = forward(permuted, batch).logits;
        for (std::size_t i = 0; i < a.data().size(); ++i) EXPECT_NEAR(a.data()[i], b.data()[i], 1e-12);
    }
}
