#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "protoscope/embedstore.hpp"
#include "protoscope/tensor.hpp"

namespace protoscope {

/// How raw prototypes are mapped to the vectors the similarity layer sees.
///   identity       z_p = p (no trainable parameters)
///   residual_mlp   z_p = p + tanh(p W1 + b1) W2 + b2, per prototype row
///   set_attention  h = p + softmax(p Wq (p Wk)^T / sqrt(D)) (p Wv) Wo,
///                  then z_p = residual_mlp(h)
/// All weight matrices are D x D and act on row vectors.
enum class AdaptorKind { identity, residual_mlp, set_attention };

AdaptorKind parse_adaptor(const std::string& name);
const char* adaptor_name(AdaptorKind kind) noexcept;

struct AdaptorParams {
    Matrix wq, wk, wv, wo;  // set_attention only
    Matrix w1, w2;          // residual_mlp and set_attention
    Vector b1, b2;

    bool operator==(const AdaptorParams&) const = default;
};

/// Initial adaptor weights: Wq, Wk, Wv, W1 ~ U(-1/sqrt(D), 1/sqrt(D)); Wo, W2,
/// b1, b2 = 0, so every variant starts as the identity map.
AdaptorParams init_adaptor(AdaptorKind kind, std::size_t dim, std::uint64_t seed);

/// Raw prototypes in class-major order: rows [c*per_class, (c+1)*per_class)
/// belong to class c.
struct PrototypeBank {
    Matrix p;
    std::size_t per_class = 0;

    std::size_t size() const noexcept { return p.rows(); }
    std::size_t num_classes() const noexcept { return per_class ? p.rows() / per_class : 0; }
    std::size_t class_of(std::size_t m) const noexcept { return m / per_class; }
};

struct LinearHead {
    Matrix weight;  // C x M
    Vector bias;    // C
};

/// 0/1 class-assignment weights, zero bias.
LinearHead init_linear_head(const LabelSpace& labels, const PrototypeBank& bank);

/// Every trainable tensor of the model. Also used as the gradient container.
struct Parameters {
    Matrix prototypes;
    AdaptorParams adaptor;
    Matrix head_weight;
    Vector head_bias;

    /// Non-empty tensors in a fixed order; names double as checkpoint keys.
    std::vector<TensorRef> tensors();
    std::vector<ConstTensorRef> tensors() const;
    Parameters zeros_like() const;

    bool operator==(const Parameters&) const = default;
};

struct Model {
    LabelSpace labels;
    Normalizer normalizer;
    AdaptorKind adaptor = AdaptorKind::identity;
    std::size_t per_class = 1;
    Parameters params;

    std::size_t num_classes() const noexcept { return labels.size(); }
    std::size_t num_prototypes() const noexcept { return params.prototypes.rows(); }
    std::size_t dim() const noexcept { return params.prototypes.cols(); }
    std::size_t class_of(std::size_t m) const noexcept { return m / per_class; }

    /// Checks that every tensor shape agrees with C, M and D.
    void validate() const;
};

Model make_model(LabelSpace labels, Normalizer normalizer, PrototypeBank bank, AdaptorKind adaptor,
                 std::uint64_t seed);

/// Intermediates of the adaptor, kept for the backward pass.
struct AdaptorCache {
    Matrix q, k, v, attn, mixed;  // attention block
    Matrix mlp_in, mlp_act;       // residual block input and tanh output
};

struct ForwardTrace {
    Matrix z_p;         // M x D adapted prototypes
    Matrix similarity;  // N x M
    Matrix logits;      // N x C
    AdaptorCache cache;
};

Matrix adapt_prototypes(const Matrix& p, AdaptorKind kind, const AdaptorParams& params,
                        AdaptorCache* cache = nullptr);

/// S[n][m] = exp(-||z_x[n] - z_p[m]||^2).
Matrix similarity(const Matrix& z_x, const Matrix& z_p);

/// Full forward pass on an already normalized batch (N x D).
ForwardTrace forward(const Model& model, const Matrix& batch);

}  // namespace protoscope
