#include "protoscope/protonet.hpp"

#include <algorithm>
#include <cmath>
#include <random>

#include "linalg.hpp"
#include "protoscope/error.hpp"

namespace protoscope {

AdaptorKind parse_adaptor(const std::string& name) {
    if (name == "identity" || name == "none") return AdaptorKind::identity;
    if (name == "residual-mlp" || name == "residual_mlp") return AdaptorKind::residual_mlp;
    if (name == "set-attention" || name == "set_attention") return AdaptorKind::set_attention;
    throw ValidationError("unknown adaptor '" + name + "'");
}

const char* adaptor_name(AdaptorKind kind) noexcept {
    switch (kind) {
        case AdaptorKind::identity: return "identity";
        case AdaptorKind::residual_mlp: return "residual-mlp";
        case AdaptorKind::set_attention: return "set-attention";
    }
    return "?";
}

AdaptorParams init_adaptor(AdaptorKind kind, std::size_t dim, std::uint64_t seed) {
    AdaptorParams a;
    if (kind == AdaptorKind::identity) return a;

    std::mt19937_64 rng(seed);
    const double bound = 1.0 / std::sqrt(static_cast<double>(dim));
    std::uniform_real_distribution<double> uni(-bound, bound);
    const auto random_square = [&] {
        Matrix m(dim, dim);
        for (auto& v : m.data()) v = uni(rng);
        return m;
    };

    if (kind == AdaptorKind::set_attention) {
        a.wq = random_square();
        a.wk = random_square();
        a.wv = random_square();
        a.wo = Matrix(dim, dim);
    }
    a.w1 = random_square();
    a.w2 = Matrix(dim, dim);
    a.b1.assign(dim, 0.0);
    a.b2.assign(dim, 0.0);
    return a;
}

LinearHead init_linear_head(const LabelSpace& labels, const PrototypeBank& bank) {
    const std::size_t classes = labels.size();
    if (bank.per_class == 0 || bank.size() != classes * bank.per_class) {
        throw ValidationError("prototype bank of " + std::to_string(bank.size()) +
                              " rows does not split evenly over " + std::to_string(classes) +
                              " classes");
    }
    LinearHead head{Matrix(classes, bank.size()), Vector(classes, 0.0)};
    for (std::size_t m = 0; m < bank.size(); ++m) head.weight(bank.class_of(m), m) = 1.0;
    return head;
}

namespace {

std::vector<std::uint32_t> shape_of(const Matrix& m) {
    return {static_cast<std::uint32_t>(m.rows()), static_cast<std::uint32_t>(m.cols())};
}

std::vector<std::uint32_t> shape_of(const Vector& v) { return {static_cast<std::uint32_t>(v.size())}; }

template <typename Ref, typename Self>
std::vector<Ref> collect_tensors(Self& self) {
    std::vector<Ref> out;
    const auto add = [&](const char* name, auto& t) {
        if (!t.empty()) {
            if constexpr (std::is_same_v<std::remove_cvref_t<decltype(t)>, Matrix>) {
                out.push_back(Ref{name, shape_of(t), t.data()});
            } else {
                out.push_back(Ref{name, shape_of(t), t});
            }
        }
    };
    add("prototypes", self.prototypes);
    add("adaptor.attn.wq", self.adaptor.wq);
    add("adaptor.attn.wk", self.adaptor.wk);
    add("adaptor.attn.wv", self.adaptor.wv);
    add("adaptor.attn.wo", self.adaptor.wo);
    add("adaptor.mlp.w1", self.adaptor.w1);
    add("adaptor.mlp.b1", self.adaptor.b1);
    add("adaptor.mlp.w2", self.adaptor.w2);
    add("adaptor.mlp.b2", self.adaptor.b2);
    add("head.weight", self.head_weight);
    add("head.bias", self.head_bias);
    return out;
}

}  // namespace

std::vector<TensorRef> Parameters::tensors() { return collect_tensors<TensorRef>(*this); }

std::vector<ConstTensorRef> Parameters::tensors() const {
    return collect_tensors<ConstTensorRef>(*this);
}

Parameters Parameters::zeros_like() const {
    Parameters z = *this;
    for (auto& t : z.tensors()) std::fill(t.values.begin(), t.values.end(), 0.0);
    return z;
}

void Model::validate() const {
    const std::size_t c = num_classes();
    const std::size_t m = num_prototypes();
    const std::size_t d = dim();
    const auto fail = [](const std::string& what) { throw ValidationError("model: " + what); };
    if (per_class == 0 || m != c * per_class) fail("prototype count is not classes x per_class");
    if (d == 0) fail("zero embedding dimension");
    if (normalizer.mean.size() != d || normalizer.stdev.size() != d) fail("normalizer dim mismatch");
    if (params.head_weight.rows() != c || params.head_weight.cols() != m) fail("head weight shape");
    if (params.head_bias.size() != c) fail("head bias shape");

    const auto& a = params.adaptor;
    const auto square = [d](const Matrix& w) { return w.rows() == d && w.cols() == d; };
    const bool has_mlp = square(a.w1) && square(a.w2) && a.b1.size() == d && a.b2.size() == d;
    const bool has_attn = square(a.wq) && square(a.wk) && square(a.wv) && square(a.wo);
    const bool no_mlp = a.w1.empty() && a.w2.empty() && a.b1.empty() && a.b2.empty();
    const bool no_attn = a.wq.empty() && a.wk.empty() && a.wv.empty() && a.wo.empty();
    switch (adaptor) {
        case AdaptorKind::identity:
            if (!no_mlp || !no_attn) fail("identity adaptor carries parameters");
            break;
        case AdaptorKind::residual_mlp:
            if (!has_mlp || !no_attn) fail("residual-mlp adaptor tensors have wrong shapes");
            break;
        case AdaptorKind::set_attention:
            if (!has_mlp || !has_attn) fail("set-attention adaptor tensors have wrong shapes");
            break;
    }
}

Model make_model(LabelSpace labels, Normalizer normalizer, PrototypeBank bank, AdaptorKind adaptor,
                 std::uint64_t seed) {
    Model model;
    auto head = init_linear_head(labels, bank);
    model.labels = std::move(labels);
    model.normalizer = std::move(normalizer);
    model.adaptor = adaptor;
    model.per_class = bank.per_class;
    model.params.adaptor = init_adaptor(adaptor, bank.p.cols(), seed);
    model.params.prototypes = std::move(bank.p);
    model.params.head_weight = std::move(head.weight);
    model.params.head_bias = std::move(head.bias);
    model.validate();
    return model;
}

namespace {

Matrix residual_mlp(const Matrix& in, const AdaptorParams& a, AdaptorCache* cache) {
    Matrix act = detail::matmul(in, a.w1);
    for (std::size_t m = 0; m < act.rows(); ++m) {
        for (std::size_t j = 0; j < act.cols(); ++j) act(m, j) = std::tanh(act(m, j) + a.b1[j]);
    }
    Matrix out = detail::matmul(act, a.w2);
    for (std::size_t m = 0; m < out.rows(); ++m) {
        for (std::size_t j = 0; j < out.cols(); ++j) out(m, j) = in(m, j) + (out(m, j) + a.b2[j]);
    }
    if (cache) {
        cache->mlp_in = in;
        cache->mlp_act = std::move(act);
    }
    return out;
}

Matrix set_attention(const Matrix& p, const AdaptorParams& a, AdaptorCache* cache) {
    const double scale = 1.0 / std::sqrt(static_cast<double>(p.cols()));
    Matrix q = detail::matmul(p, a.wq);
    Matrix k = detail::matmul(p, a.wk);
    Matrix v = detail::matmul(p, a.wv);
    Matrix attn = detail::matmul_nt(q, k);
    for (std::size_t i = 0; i < attn.rows(); ++i) {
        auto row = attn.row(i);
        double peak = row[0] * scale;
        for (auto& x : row) {
            x *= scale;
            peak = std::max(peak, x);
        }
        double total = 0.0;
        for (auto& x : row) {
            x = std::exp(x - peak);
            total += x;
        }
        for (auto& x : row) x /= total;
    }
    Matrix mixed = detail::matmul(attn, v);
    Matrix h = detail::matmul(mixed, a.wo);
    for (std::size_t m = 0; m < h.rows(); ++m) {
        for (std::size_t j = 0; j < h.cols(); ++j) h(m, j) = p(m, j) + h(m, j);
    }
    if (cache) {
        cache->q = std::move(q);
        cache->k = std::move(k);
        cache->v = std::move(v);
        cache->attn = std::move(attn);
        cache->mixed = std::move(mixed);
    }
    return h;
}

}  // namespace

Matrix adapt_prototypes(const Matrix& p, AdaptorKind kind, const AdaptorParams& params,
                        AdaptorCache* cache) {
    switch (kind) {
        case AdaptorKind::identity:
            return p;
        case AdaptorKind::residual_mlp:
            return residual_mlp(p, params, cache);
        case AdaptorKind::set_attention:
            return residual_mlp(set_attention(p, params, cache), params, cache);
    }
    return p;
}

Matrix similarity(const Matrix& z_x, const Matrix& z_p) {
    if (z_x.cols() != z_p.cols()) {
        throw ValidationError("similarity: input dim " + std::to_string(z_x.cols()) +
                              " vs prototype dim " + std::to_string(z_p.cols()));
    }
    Matrix s(z_x.rows(), z_p.rows());
    for (std::size_t n = 0; n < z_x.rows(); ++n) {
        for (std::size_t m = 0; m < z_p.rows(); ++m) {
            s(n, m) = std::exp(-squared_distance(z_x.row(n), z_p.row(m)));
        }
    }
    return s;
}

ForwardTrace forward(const Model& model, const Matrix& batch) {
    if (batch.cols() != model.dim()) {
        throw ValidationError("forward: batch dim " + std::to_string(batch.cols()) +
                              " does not match model dim " + std::to_string(model.dim()));
    }
    ForwardTrace trace;
    trace.z_p = adapt_prototypes(model.params.prototypes, model.adaptor, model.params.adaptor,
                                 &trace.cache);
    trace.similarity = similarity(batch, trace.z_p);

    const auto& w = model.params.head_weight;
    const auto& b = model.params.head_bias;
    const std::size_t classes = model.num_classes();
    trace.logits = Matrix(batch.rows(), classes);
    for (std::size_t n = 0; n < batch.rows(); ++n) {
        const auto s = trace.similarity.row(n);
        for (std::size_t c = 0; c < classes; ++c) {
            double acc = 0.0;
            for (std::size_t m = 0; m < s.size(); ++m) acc += s[m] * w(c, m);
            trace.logits(n, c) = acc + b[c];
        }
    }
    return trace;
}

}  // namespace protoscope
