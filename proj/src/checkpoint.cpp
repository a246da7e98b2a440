#include <cmath>
#include <map>

#include <nlohmann/json.hpp>

#include "binary_io.hpp"
#include "protoscope/error.hpp"
#include "protoscope/trainer.hpp"

namespace protoscope {

namespace {

constexpr unsigned char kPckpMagic[4] = {'P', 'C', 'K', 'P'};
constexpr unsigned char kPckpVersion = 0x01;

nlohmann::json config_to_json(const TrainConfig& c) {
    return {
        {"lambda", c.lambda},
        {"batch_size", c.batch_size},
        {"total_steps", c.total_steps},
        {"peak_lr", c.peak_lr},
        {"weight_decay", c.weight_decay},
        {"seed", c.seed},
        {"validate_every", c.validate_every},
        {"adaptor", adaptor_name(c.adaptor)},
        {"prototypes_per_class", c.prototypes_per_class},
        {"prototype_loss_on_raw", c.prototype_loss_on_raw},
    };
}

TrainConfig config_from_json(const nlohmann::json& j) {
    TrainConfig c;
    c.lambda = j.at("lambda").get<double>();
    c.batch_size = j.at("batch_size").get<std::size_t>();
    c.total_steps = j.at("total_steps").get<std::size_t>();
    c.peak_lr = j.at("peak_lr").get<double>();
    c.weight_decay = j.at("weight_decay").get<double>();
    c.seed = j.at("seed").get<std::uint64_t>();
    c.validate_every = j.at("validate_every").get<std::size_t>();
    c.adaptor = parse_adaptor(j.at("adaptor").get<std::string>());
    c.prototypes_per_class = j.at("prototypes_per_class").get<std::size_t>();
    c.prototype_loss_on_raw = j.at("prototype_loss_on_raw").get<bool>();
    return c;
}

// Parameter tensors with the shapes a model of this kind and size must have.
Parameters skeleton(AdaptorKind kind, std::size_t classes, std::size_t protos, std::size_t dim) {
    Parameters p;
    p.prototypes = Matrix(protos, dim);
    if (kind == AdaptorKind::set_attention) {
        p.adaptor.wq = Matrix(dim, dim);
        p.adaptor.wk = Matrix(dim, dim);
        p.adaptor.wv = Matrix(dim, dim);
        p.adaptor.wo = Matrix(dim, dim);
    }
    if (kind != AdaptorKind::identity) {
        p.adaptor.w1 = Matrix(dim, dim);
        p.adaptor.w2 = Matrix(dim, dim);
        p.adaptor.b1.assign(dim, 0.0);
        p.adaptor.b2.assign(dim, 0.0);
    }
    p.head_weight = Matrix(classes, protos);
    p.head_bias.assign(classes, 0.0);
    return p;
}

}  // namespace

Checkpoint make_checkpoint(const Model& model, const TrainConfig& config, std::size_t step,
                           double validation_loss) {
    Checkpoint ckpt{model, config, step, validation_loss};
    for (auto& t : ckpt.model.params.tensors()) {
        for (auto& v : t.values) v = static_cast<double>(static_cast<float>(v));
    }
    return ckpt;
}

std::vector<unsigned char> encode_checkpoint(const Checkpoint& ckpt) {
    ckpt.model.validate();
    if (!std::isfinite(ckpt.validation_loss)) {
        throw ValidationError("checkpoint validation loss must be finite");
    }
    detail::ByteWriter out;
    out.bytes(kPckpMagic, 4);
    out.u8(kPckpVersion);
    out.u8(0);
    out.u8(0);
    out.u8(0);

    const auto tensors = ckpt.model.params.tensors();
    out.u32(static_cast<std::uint32_t>(tensors.size()));
    for (const auto& t : tensors) {
        out.u16(static_cast<std::uint16_t>(t.name.size()));
        out.bytes(t.name.data(), t.name.size());
        out.u8(static_cast<std::uint8_t>(t.shape.size()));
        for (auto d : t.shape) out.u32(d);
        for (double v : t.values) out.f32(static_cast<float>(v));
    }

    const auto& model = ckpt.model;
    const nlohmann::json meta = {
        {"config", config_to_json(ckpt.config)},
        {"labels", model.labels.classes()},
        {"normalizer", {{"mean", model.normalizer.mean}, {"std", model.normalizer.stdev}}},
        {"adaptor", adaptor_name(model.adaptor)},
        {"prototypes_per_class", model.per_class},
        {"classes", model.num_classes()},
        {"prototypes", model.num_prototypes()},
        {"dim", model.dim()},
        {"step", ckpt.step},
        {"validation_loss", ckpt.validation_loss},
    };
    const std::string text = meta.dump();
    out.u32(static_cast<std::uint32_t>(text.size()));
    out.bytes(text.data(), text.size());
    return out.take();
}

Checkpoint decode_checkpoint(std::span<const unsigned char> bytes) {
    detail::ByteReader in(bytes);
    if (bytes.size() < 8) throw CorruptionError("PCKP header truncated");
    const auto magic = in.bytes(4);
    if (!std::equal(magic.begin(), magic.end(), kPckpMagic)) throw FormatError("bad PCKP magic");
    const auto version = in.u8();
    if (version != kPckpVersion) {
        throw FormatError("unsupported PCKP version " + std::to_string(version));
    }
    for (int i = 0; i < 3; ++i) {
        if (in.u8() != 0) throw FormatError("PCKP reserved bytes must be zero");
    }

    struct RawTensor {
        std::vector<std::uint32_t> shape;
        std::vector<float> values;
    };
    std::vector<std::pair<std::string, RawTensor>> raw;
    const std::uint32_t count = in.u32();
    for (std::uint32_t t = 0; t < count; ++t) {
        const auto name_len = in.u16();
        const auto name_bytes = in.bytes(name_len);
        std::string name(name_bytes.begin(), name_bytes.end());
        RawTensor rt;
        const auto rank = in.u8();
        std::uint64_t numel = 1;
        for (int r = 0; r < rank; ++r) {
            rt.shape.push_back(in.u32());
            numel *= rt.shape.back();
        }
        if (numel * 4 > in.remaining()) {
            throw CorruptionError("tensor '" + name + "' payload truncated");
        }
        rt.values.resize(numel);
        for (auto& v : rt.values) v = in.f32();
        raw.emplace_back(std::move(name), std::move(rt));
    }

    const auto meta_len = in.u32();
    const auto meta_bytes = in.bytes(meta_len);
    if (in.remaining() != 0) {
        throw CorruptionError("PCKP has " + std::to_string(in.remaining()) + " trailing bytes");
    }
    nlohmann::json meta;
    try {
        meta = nlohmann::json::parse(meta_bytes.begin(), meta_bytes.end());
    } catch (const nlohmann::json::exception& e) {
        throw CorruptionError(std::string("PCKP metadata is not valid JSON: ") + e.what());
    }

    Checkpoint ckpt;
    try {
        ckpt.config = config_from_json(meta.at("config"));
        ckpt.step = meta.at("step").get<std::size_t>();
        ckpt.validation_loss = meta.at("validation_loss").get<double>();
        auto& model = ckpt.model;
        model.labels = LabelSpace(meta.at("labels").get<std::vector<std::string>>());
        model.normalizer.mean = meta.at("normalizer").at("mean").get<Vector>();
        model.normalizer.stdev = meta.at("normalizer").at("std").get<Vector>();
        model.adaptor = parse_adaptor(meta.at("adaptor").get<std::string>());
        model.per_class = meta.at("prototypes_per_class").get<std::size_t>();
        const auto classes = meta.at("classes").get<std::size_t>();
        const auto protos = meta.at("prototypes").get<std::size_t>();
        const auto dim = meta.at("dim").get<std::size_t>();
        if (classes != model.labels.size() || protos != classes * model.per_class) {
            throw CorruptionError("PCKP metadata sizes disagree with the label space");
        }
        model.params = skeleton(model.adaptor, classes, protos, dim);
    } catch (const nlohmann::json::exception& e) {
        throw CorruptionError(std::string("PCKP metadata incomplete: ") + e.what());
    }

    auto expected = ckpt.model.params.tensors();
    if (expected.size() != raw.size()) {
        throw CorruptionError("PCKP holds " + std::to_string(raw.size()) + " tensors, expected " +
                              std::to_string(expected.size()));
    }
    for (std::size_t i = 0; i < expected.size(); ++i) {
        auto& dst = expected[i];
        const auto& [name, src] = raw[i];
        if (name != dst.name) {
            throw CorruptionError("PCKP tensor " + std::to_string(i) + " is '" + name +
                                  "', expected '" + dst.name + "'");
        }
        if (src.shape != dst.shape) {
            throw CorruptionError("PCKP tensor '" + name + "' shape disagrees with the config");
        }
        for (std::size_t k = 0; k < src.values.size(); ++k) {
            if (!std::isfinite(src.values[k])) {
                throw CorruptionError("PCKP tensor '" + name + "' holds a non-finite value");
            }
            dst.values[k] = src.values[k];
        }
    }
    ckpt.model.validate();
    return ckpt;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt) {
    detail::write_file(path, encode_checkpoint(ckpt));
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
    return decode_checkpoint(detail::read_file(path));
}

}  // namespace protoscope
