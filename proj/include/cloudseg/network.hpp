#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <unordered_map>
#include <vector>

#include "cloudseg/architecture.hpp"
#include "cloudseg/autograd.hpp"
#include "cloudseg/weights_io.hpp"

namespace cloudseg {

enum class Mode { Train, Inference };

struct BatchNormSettings {
    double epsilon = 1e-5;
    double decay = 0.9; // running = decay * running + (1 - decay) * batch
};

template <typename T>
struct ParameterEntry {
    std::string name;
    Variable<T> var;
    std::vector<std::uint32_t> dims; // logical dims written to CPW1
    bool trainable = true;
};

/// Owns every named tensor of a network. Trainable entries are gradient
/// leaves; BN running statistics are non-trainable entries whose names end
/// in ".running_mean" / ".running_var".
template <typename T>
class ParameterRegistry {
public:
    explicit ParameterRegistry(std::uint64_t seed = 0) : seed_(seed) {}

    /// He-normal (fan-in) initialized (c_out, c_in_per_group, k, k) kernel.
    Variable<T> conv_weight(const std::string& name, std::int64_t c_out, std::int64_t c_in_per_group,
                            std::int64_t kernel);
    /// Per-channel vector stored as (1, c, 1, 1).
    Variable<T> channel_vector(const std::string& name, std::int64_t channels, T value, bool trainable);
    /// Returns the running-statistics slot of a new BN layer.
    std::size_t add_running_stats(const std::string& prefix, std::int64_t channels);

    std::vector<ParameterEntry<T>>& entries() { return entries_; }
    const std::vector<ParameterEntry<T>>& entries() const { return entries_; }
    const ParameterEntry<T>& find(const std::string& name) const;
    ParameterEntry<T>& find(const std::string& name);

    Variable<T>& running_mean(std::size_t slot) { return running_[slot].first; }
    Variable<T>& running_var(std::size_t slot) { return running_[slot].second; }
    const Variable<T>& running_mean(std::size_t slot) const { return running_[slot].first; }
    const Variable<T>& running_var(std::size_t slot) const { return running_[slot].second; }
    std::size_t running_slots() const { return running_.size(); }

private:
    Variable<T>& add(const std::string& name, BasicTensor<T> value, std::vector<std::uint32_t> dims, bool trainable);

    std::uint64_t seed_;
    std::vector<ParameterEntry<T>> entries_;
    std::unordered_map<std::string, std::size_t> index_;
    std::vector<std::pair<Variable<T>, Variable<T>>> running_;
};

template <typename T>
struct StatUpdate {
    std::size_t slot;
    std::vector<T> mean;
    std::vector<T> var;
};

template <typename T>
struct ForwardContext {
    Mode mode = Mode::Inference;
    BatchNormSettings bn;
    std::vector<StatUpdate<T>> stat_updates; // train mode only
    std::unordered_map<std::string, Variable<T>> taps;
};

/// A composite block. forward never mutates the block; train-mode BN reports
/// its batch statistics through the context instead.
template <typename T>
class Block {
public:
    virtual ~Block() = default;
    virtual Variable<T> forward(const Variable<T>& x, ForwardContext<T>& ctx) const = 0;
    virtual std::int64_t output_channels() const = 0;
    virtual bool has_shortcut() const { return false; }
};

/// Builds one block reading `in_channels` (and `skip_channels` for
/// concat-skip), registering its tensors under `prefix`.
template <typename T>
std::unique_ptr<Block<T>> make_block(const BlockSpec& spec, std::int64_t in_channels, std::int64_t skip_channels,
                                     ParameterRegistry<T>& registry, const std::string& prefix);

template <typename T>
class Network {
public:
    /// Kernels He-normal from `seed`, BN gamma=1 beta=0, running mean 0 / var 1.
    static Network build(const ArchitectureConfig& config, std::uint64_t seed);

    const ArchitectureConfig& architecture() const { return config_; }
    int required_multiple() const { return summary_.required_multiple; }

    Mode mode() const { return mode_; }
    void set_mode(Mode mode) { mode_ = mode; }

    BatchNormSettings& batchnorm_settings() { return bn_; }

    /// Graph-recording forward in the current mode. In train mode BN running
    /// statistics are updated after the pass.
    Variable<T> forward(const Variable<T>& batch);

    /// Inference-mode forward with no graph. Safe to call concurrently.
    BasicTensor<T> infer(const BasicTensor<T>& batch) const;

    /// Sum of trainable element counts; running statistics are excluded.
    std::int64_t count_params() const;

    std::vector<ParameterEntry<T>>& parameters() { return registry_.entries(); }
    const std::vector<ParameterEntry<T>>& parameters() const { return registry_.entries(); }
    ParameterEntry<T>& parameter(const std::string& name) { return registry_.find(name); }

    void zero_grad();

    std::vector<NamedArray> export_weights() const;
    /// Every network tensor must be present with matching dims; extras are rejected.
    void import_weights(const std::vector<NamedArray>& arrays);

    std::size_t block_count() const { return blocks_.size(); }
    const Block<T>& block(std::size_t i) const { return *blocks_[i]; }

private:
    Network() = default;
    void check_input(const Shape& s) const;
    Variable<T> run(const Variable<T>& batch, ForwardContext<T>& ctx) const;

    ArchitectureConfig config_;
    ArchitectureSummary summary_;
    ParameterRegistry<T> registry_;
    std::vector<std::unique_ptr<Block<T>>> blocks_;
    Mode mode_ = Mode::Inference;
    BatchNormSettings bn_;
};

} // namespace cloudseg
