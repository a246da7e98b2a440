#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "protoscope/embedstore.hpp"
#include "protoscope/protonet.hpp"
#include "protoscope/tensor.hpp"

namespace protoscope {

struct TrainConfig {
    double lambda = 0.25;
    std::size_t batch_size = 256;
    std::size_t total_steps = 150000;
    double peak_lr = 1e-3;
    double weight_decay = 1e-5;
    std::uint64_t seed = 0;
    std::size_t validate_every = 500;
    AdaptorKind adaptor = AdaptorKind::set_attention;
    std::size_t prototypes_per_class = 5;
    /// Measure the prototype loss on raw p instead of the adapted z_p.
    bool prototype_loss_on_raw = false;

    /// Throws ValidationError for out-of-range values.
    void validate() const;
};

struct LossReport {
    double l_c = 0.0;
    double l_p = 0.0;
    double total = 0.0;
    std::size_t covered_prototypes = 0;
};

/// Rows of `targets` must be one-hot. Returns the mean per-entry sigmoid BCE.
double loss_classification(const Matrix& logits, const Matrix& targets);
Matrix one_hot(std::span<const std::size_t> labels, std::size_t classes);

struct PrototypeLoss {
    double value = 0.0;
    std::size_t covered = 0;
    /// Per prototype: index of the nearest same-class batch sample, or -1.
    std::vector<std::ptrdiff_t> nearest;
};

/// For each prototype whose class occurs in the batch, the squared distance to
/// its nearest same-class sample (ties to the lowest sample index); averaged
/// over the covered prototypes.
PrototypeLoss loss_prototype(const Matrix& prototypes, std::size_t per_class, const Matrix& batch,
                             std::span<const std::size_t> labels);

double loss_total(double l_c, double l_p, double lambda);

LossReport compute_loss(const Model& model, const ForwardTrace& trace, const Matrix& batch,
                        std::span<const std::size_t> labels, double lambda,
                        bool prototype_loss_on_raw = false);

/// Exact reverse-mode gradient of compute_loss with respect to every
/// parameter. The result has the same layout as model.params.
Parameters backward(const Model& model, const ForwardTrace& trace, const Matrix& batch,
                    std::span<const std::size_t> labels, double lambda,
                    bool prototype_loss_on_raw = false);

struct AdamState {
    double beta1 = 0.9;
    double beta2 = 0.999;
    double eps = 1e-8;
    std::uint64_t step = 0;
    std::vector<Vector> m;
    std::vector<Vector> v;
};

/// One Adam update with bias correction and decoupled weight decay
/// (param *= 1 - lr*wd before the moment update). Throws DivergenceError on a
/// non-finite gradient.
void adam_step(std::span<const TensorRef> params, std::span<const ConstTensorRef> grads,
               AdamState& state, double lr, double weight_decay);

/// One-cycle schedule: cosine ramp from peak/25 to peak over the first 30% of
/// steps, then cosine decay to peak/25/1e4 at the last step.
double onecycle_lr(std::size_t step, std::size_t total_steps, double peak_lr);

struct Checkpoint {
    Model model;
    TrainConfig config;
    std::size_t step = 0;
    double validation_loss = 0.0;
};

/// Snapshot of a model with every tensor rounded to binary32, which is what
/// the checkpoint file stores; a loaded checkpoint therefore reproduces this
/// snapshot's forward pass bitwise.
Checkpoint make_checkpoint(const Model& model, const TrainConfig& config, std::size_t step,
                           double validation_loss);

std::vector<unsigned char> encode_checkpoint(const Checkpoint& ckpt);
Checkpoint decode_checkpoint(std::span<const unsigned char> bytes);
void save_checkpoint(const std::filesystem::path& path, const Checkpoint& ckpt);
Checkpoint load_checkpoint(const std::filesystem::path& path);

struct MetricsRow {
    std::size_t step = 0;
    double lr = 0.0;
    LossReport loss;
    std::optional<double> val_total;
};

void write_metrics_csv(const std::filesystem::path& path, std::span<const MetricsRow> rows);

/// Normalized segments of one split, stacked, with class indices.
struct SegmentTable {
    Matrix rows;
    std::vector<std::size_t> labels;
};
SegmentTable gather_segments(const Dataset& dataset, const Normalizer& norm, Split split);

/// Model at step 0: normalizer fit on train, k-means prototypes, identity head.
Model initial_model(const TrainConfig& config, const Dataset& dataset);

struct TrainResult {
    Checkpoint best;
    std::vector<MetricsRow> metrics;
};

/// Mini-batch training from initial_model(); returns the checkpoint with the
/// lowest validation loss. Throws DivergenceError on a non-finite loss.
TrainResult train(const TrainConfig& config, const Dataset& dataset);

}  // namespace protoscope
