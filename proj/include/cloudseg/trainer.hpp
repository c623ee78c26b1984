#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "cloudseg/autograd.hpp"
#include "cloudseg/dataset.hpp"
#include "cloudseg/network.hpp"

namespace cloudseg {

struct OptimizerConfig {
    double learning_rate = 0.003;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double epsilon = 1e-8;
    int batch_size = 8;
    int epochs = 300;

    void validate() const;
};

inline constexpr double kBceClamp = 1e-7;

template <typename T>
struct BceResult {
    double loss = 0.0;
    BasicTensor<T> grad; // d loss / d pred
};

/// Mean binary cross-entropy with predictions clamped to [1e-7, 1 - 1e-7].
template <typename T>
BceResult<T> bce_loss(const BasicTensor<T>& pred, const BasicTensor<T>& target);

namespace ops {
/// Scalar (1,1,1,1) loss node; gradient flows into `pred` only.
template <typename T>
Variable<T> bce_loss(const Variable<T>& pred, const BasicTensor<T>& target);
} // namespace ops

/// Fraction of pixels where (pred >= threshold) agrees with (target >= 0.5).
template <typename T>
double pixel_accuracy(const BasicTensor<T>& pred, const BasicTensor<T>& target, double threshold = 0.5);

struct AdamState {
    std::vector<Tensor> m;
    std::vector<Tensor> v;
    std::int64_t t = 0;
};

/// One Adam update on raw arrays at step `t` (already incremented).
void adam_update(std::span<float> theta, std::span<const float> grad, std::span<float> m, std::span<float> v,
                 std::int64_t t, const OptimizerConfig& cfg);

/// Updates every trainable entry from its accumulated gradient. Gradients are
/// checked for finiteness before anything is modified; an entry without a
/// gradient is treated as all zeros.
void adam_step(std::vector<ParameterEntry<float>>& params, AdamState& state, const OptimizerConfig& cfg);

struct TrainConfig {
    OptimizerConfig optimizer;
    std::uint64_t seed = 0;
    int checkpoint_every = 10;
    std::string arch_config_path;
    std::string data_dir;
    std::string out_dir = "run";
    bool augment = true;

    void validate() const;
};

/// `key = value` lines, `#` comments. arch_config_path and data_dir are
/// required; unknown keys are rejected.
TrainConfig parse_train_config(std::string_view text);
TrainConfig load_train_config(const std::filesystem::path& path);

struct EpochRecord {
    int epoch = 0;
    double train_loss = 0.0;
    double train_acc = 0.0;
    double val_loss = 0.0;
    double val_acc = 0.0;
};

struct TrainingHistory {
    std::vector<EpochRecord> epochs;
    int best_epoch = 0;
    double best_val_acc = -1.0;
    std::int64_t optimizer_step = 0;

    /// `epoch,train_loss,train_acc,val_loss,val_acc` with %.9g values.
    std::string to_csv() const;
};

struct TrainData {
    std::vector<LabeledPatch> train;
    std::vector<LabeledPatch> validation;
    std::vector<LabeledPatch> test;
};

/// Splits a corpus by source with `split_dataset` and, when `augment` is set,
/// replaces every source by its 8 variants inside its own split.
TrainData prepare_data(const std::vector<LabeledPatch>& corpus, std::uint64_t seed, bool augment,
                       std::array<double, 3> ratios = {0.90, 0.05, 0.05});

/// Concatenates patches along the batch axis.
std::pair<Tensor, Tensor> make_batch(std::span<const LabeledPatch> patches, std::span<const std::size_t> ids);

/// Forward, loss, backward and one Adam step on a single batch in train mode.
/// Returns the batch loss; `accuracy` receives the train-mode pixel accuracy.
double train_step(Network<float>& net, AdamState& state, const OptimizerConfig& cfg, const Tensor& images,
                  const Tensor& masks, double* accuracy = nullptr);

/// Mean loss and pixel accuracy in inference mode.
std::pair<double, double> evaluate_loss(const Network<float>& net, std::span<const LabeledPatch> patches,
                                        int batch_size);

struct CheckpointMeta {
    int epoch = 0;
    std::int64_t optimizer_step = 0;
    std::string arch;
    std::uint64_t seed = 0;
    bool augment = true;
    double val_acc = 0.0;
};

std::filesystem::path meta_path(const std::filesystem::path& weights);
void write_checkpoint(const Network<float>& net, const CheckpointMeta& meta, const std::filesystem::path& weights);
CheckpointMeta read_checkpoint_meta(const std::filesystem::path& weights);

using EpochCallback = std::function<void(const EpochRecord&)>;

/// Epoch loop. With a non-empty `checkpoint_dir` writes history.csv after
/// every epoch, epoch_NNNN.cpw every `checkpoint_every` epochs, best.cpw on
/// each validation improvement and final.cpw at the end.
TrainingHistory train(Network<float>& net, const TrainData& data, const TrainConfig& cfg,
                      const std::filesystem::path& checkpoint_dir, const EpochCallback& on_epoch = {});

} // namespace cloudseg
