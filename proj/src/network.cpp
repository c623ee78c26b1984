#include "cloudseg/network.hpp"

#include <cmath>
#include <optional>

#include "cloudseg/rng.hpp"

namespace cloudseg {

// ---------------------------------------------------------------------------
// ParameterRegistry

template <typename T>
Variable<T>& ParameterRegistry<T>::add(const std::string& name, BasicTensor<T> value,
                                       std::vector<std::uint32_t> dims, bool trainable)
{
    if (index_.count(name) != 0) {
        throw ConfigError("duplicate parameter name " + name);
    }
    index_.emplace(name, entries_.size());
    entries_.push_back({name, Variable<T>::leaf(std::move(value), trainable), std::move(dims), trainable});
    return entries_.back().var;
}

template <typename T>
Variable<T> ParameterRegistry<T>::conv_weight(const std::string& name, std::int64_t c_out,
                                              std::int64_t c_in_per_group, std::int64_t kernel)
{
    BasicTensor<T> w({c_out, c_in_per_group, kernel, kernel});
    // Each tensor draws from its own stream so adding a block never shifts
    // the initialization of the others.
    Rng rng(derive_seed(seed_, 0x1417, entries_.size()));
    const double std_dev = std::sqrt(2.0 / static_cast<double>(c_in_per_group * kernel * kernel));
    for (auto& v : w.values()) {
        v = static_cast<T>(rng.normal() * std_dev);
    }
    return add(name, std::move(w),
               {static_cast<std::uint32_t>(c_out), static_cast<std::uint32_t>(c_in_per_group),
                static_cast<std::uint32_t>(kernel), static_cast<std::uint32_t>(kernel)},
               true);
}

template <typename T>
Variable<T> ParameterRegistry<T>::channel_vector(const std::string& name, std::int64_t channels, T value,
                                                 bool trainable)
{
    return add(name, BasicTensor<T>({1, channels, 1, 1}, value), {static_cast<std::uint32_t>(channels)}, trainable);
}

template <typename T>
std::size_t ParameterRegistry<T>::add_running_stats(const std::string& prefix, std::int64_t channels)
{
    auto mean = channel_vector(prefix + ".running_mean", channels, T(0), false);
    auto var = channel_vector(prefix + ".running_var", channels, T(1), false);
    running_.emplace_back(mean, var);
    return running_.size() - 1;
}

template <typename T>
const ParameterEntry<T>& ParameterRegistry<T>::find(const std::string& name) const
{
    auto it = index_.find(name);
    if (it == index_.end()) {
        throw ConfigError("no parameter named " + name);
    }
    return entries_[it->second];
}

template <typename T>
ParameterEntry<T>& ParameterRegistry<T>::find(const std::string& name)
{
    auto it = index_.find(name);
    if (it == index_.end()) {
        throw ConfigError("no parameter named " + name);
    }
    return entries_[it->second];
}

// ---------------------------------------------------------------------------
// Blocks

namespace {

/// convolution, optional BN, optional ReLU
template <typename T>
struct ConvUnit {
    Variable<T> weight;
    std::optional<Variable<T>> bias;
    kernels::ConvGeometry geometry;
    bool depthwise = false;
    bool batchnorm = true;
    Variable<T> gamma;
    Variable<T> beta;
    Variable<T> running_mean;
    Variable<T> running_var;
    std::size_t slot = 0;
    bool relu = true;

    Variable<T> operator()(const Variable<T>& x, ForwardContext<T>& ctx) const
    {
        Variable<T> y = depthwise ? ops::depthwise_conv2d(x, weight, geometry)
                                  : ops::conv2d(x, weight, bias ? &*bias : nullptr, geometry);
        if (batchnorm) {
            const T eps = static_cast<T>(ctx.bn.epsilon);
            if (ctx.mode == Mode::Train) {
                StatUpdate<T> update{slot, {}, {}};
                y = ops::batchnorm_train(y, gamma, beta, eps, &update.mean, &update.var);
                ctx.stat_updates.push_back(std::move(update));
            } else {
                y = ops::batchnorm_infer(y, gamma, beta, running_mean.value(), running_var.value(), eps);
            }
        }
        return relu ? ops::relu(y) : y;
    }
};

struct UnitSpec {
    std::int64_t in;
    std::int64_t out;
    int kernel = 1;
    int stride = 1;
    int dilation = 1;
    bool depthwise = false;
    bool batchnorm = true;
    bool relu = true;
    bool bias = false;
};

template <typename T>
ConvUnit<T> make_unit(ParameterRegistry<T>& reg, const std::string& name, const UnitSpec& s)
{
    ConvUnit<T> u;
    u.depthwise = s.depthwise;
    u.geometry = {s.stride, s.dilation, s.depthwise ? static_cast<int>(s.in) : 1, kernels::Padding::Same};
    u.weight = reg.conv_weight(name + ".weight", s.out, s.depthwise ? 1 : s.in, s.kernel);
    if (s.bias) {
        u.bias = reg.channel_vector(name + ".bias", s.out, T(0), true);
    }
    u.batchnorm = s.batchnorm;
    if (s.batchnorm) {
        u.gamma = reg.channel_vector(name + ".bn.gamma", s.out, T(1), true);
        u.beta = reg.channel_vector(name + ".bn.beta", s.out, T(0), true);
        u.slot = reg.add_running_stats(name + ".bn", s.out);
        u.running_mean = reg.running_mean(u.slot);
        u.running_var = reg.running_var(u.slot);
    }
    u.relu = s.relu;
    return u;
}

template <typename T>
class ConvBlock final : public Block<T> {
public:
    ConvBlock(const BlockSpec& spec, std::int64_t in, ParameterRegistry<T>& reg, const std::string& prefix)
        : unit_(make_unit(reg, prefix, {.in = in, .out = spec.filters, .kernel = spec.kernel, .stride = spec.stride,
                                        .dilation = spec.dilation})),
          out_(spec.filters)
    {
    }
    Variable<T> forward(const Variable<T>& x, ForwardContext<T>& ctx) const override { return unit_(x, ctx); }
    std::int64_t output_channels() const override { return out_; }

private:
    ConvUnit<T> unit_;
    std::int64_t out_;
};

template <typename T>
class InvertedResidual final : public Block<T> {
public:
    InvertedResidual(const BlockSpec& spec, std::int64_t in, ParameterRegistry<T>& reg, const std::string& prefix)
        : out_(spec.filters), shortcut_(spec.stride == 1 && in == spec.filters)
    {
        const std::int64_t hidden = in * spec.expansion;
        if (spec.expansion > 1) {
            expand_ = make_unit(reg, prefix + ".expand", {.in = in, .out = hidden});
        }
        depthwise_ = make_unit(reg, prefix + ".depthwise", {.in = hidden, .out = hidden, .kernel = 3,
                                                            .stride = spec.stride, .dilation = spec.dilation,
                                                            .depthwise = true});
        project_ = make_unit(reg, prefix + ".project", {.in = hidden, .out = spec.filters, .relu = false});
    }

    Variable<T> forward(const Variable<T>& x, ForwardContext<T>& ctx) const override
    {
        Variable<T> h = expand_ ? (*expand_)(x, ctx) : x;
        h = depthwise_(h, ctx);
        h = project_(h, ctx);
        return shortcut_ ? ops::add(h, x) : h;
    }
    std::int64_t output_channels() const override { return out_; }
    bool has_shortcut() const override { return shortcut_; }

private:
    std::optional<ConvUnit<T>> expand_;
    ConvUnit<T> depthwise_;
    ConvUnit<T> project_;
    std::int64_t out_;
    bool shortcut_;
};

template <typename T>
class AtrousSeparable final : public Block<T> {
public:
    AtrousSeparable(std::int64_t in, std::int64_t out, int stride, int rate, ParameterRegistry<T>& reg,
                    const std::string& prefix)
        : depthwise_(make_unit(reg, prefix + ".depthwise", {.in = in, .out = in, .kernel = 3, .stride = stride,
                                                            .dilation = rate, .depthwise = true})),
          pointwise_(make_unit(reg, prefix + ".pointwise", {.in = in, .out = out})),
          out_(out)
    {
    }
    Variable<T> forward(const Variable<T>& x, ForwardContext<T>& ctx) const override
    {
        return pointwise_(depthwise_(x, ctx), ctx);
    }
    std::int64_t output_channels() const override { return out_; }

private:
    ConvUnit<T> depthwise_;
    ConvUnit<T> pointwise_;
    std::int64_t out_;
};

template <typename T>
class Aspp final : public Block<T> {
public:
    Aspp(const BlockSpec& spec, std::int64_t in, ParameterRegistry<T>& reg, const std::string& prefix)
        : out_(spec.filters)
    {
        const std::int64_t width = spec.filters;
        conv1x1_ = make_unit(reg, prefix + ".branch1x1", {.in = in, .out = width});
        for (int rate : spec.rates) {
            atrous_.push_back(std::make_unique<AtrousSeparable<T>>(in, width, 1, rate, reg,
                                                                   prefix + ".rate" + std::to_string(rate)));
        }
        pool_ = make_unit(reg, prefix + ".pool", {.in = in, .out = width});
        const auto branches = static_cast<std::int64_t>(spec.rates.size()) + 2;
        fuse_ = make_unit(reg, prefix + ".fuse", {.in = branches * width, .out = spec.filters});
    }

    Variable<T> forward(const Variable<T>& x, ForwardContext<T>& ctx) const override
    {
        std::vector<Variable<T>> branches;
        branches.push_back(conv1x1_(x, ctx));
        for (const auto& a : atrous_) {
            branches.push_back(a->forward(x, ctx));
        }
        auto pooled = pool_(ops::global_avg_pool(x), ctx);
        branches.push_back(ops::resize_bilinear(pooled, x.shape().h, x.shape().w));
        return fuse_(ops::concat_channels(branches), ctx);
    }
    std::int64_t output_channels() const override { return out_; }

private:
    ConvUnit<T> conv1x1_;
    std::vector<std::unique_ptr<AtrousSeparable<T>>> atrous_;
    ConvUnit<T> pool_;
    ConvUnit<T> fuse_;
    std::int64_t out_;
};

template <typename T>
class Upsample final : public Block<T> {
public:
    Upsample(int factor, std::int64_t channels) : factor_(factor), channels_(channels) {}
    Variable<T> forward(const Variable<T>& x, ForwardContext<T>&) const override
    {
        return ops::upsample_bilinear(x, factor_);
    }
    std::int64_t output_channels() const override { return channels_; }

private:
    int factor_;
    std::int64_t channels_;
};

template <typename T>
class ConcatSkip final : public Block<T> {
public:
    ConcatSkip(const BlockSpec& spec, std::int64_t in, std::int64_t skip_channels, ParameterRegistry<T>& reg,
               const std::string& prefix)
        : reduce_(make_unit(reg, prefix + ".reduce", {.in = skip_channels, .out = spec.filters})),
          skip_(spec.skip),
          out_(in + spec.filters)
    {
    }
    Variable<T> forward(const Variable<T>& x, ForwardContext<T>& ctx) const override
    {
        auto it = ctx.taps.find(skip_);
        if (it == ctx.taps.end()) {
            throw ConfigError("skip tap '" + skip_ + "' was not produced");
        }
        return ops::concat_channels(std::vector<Variable<T>>{x, reduce_(it->second, ctx)});
    }
    std::int64_t output_channels() const override { return out_; }

private:
    ConvUnit<T> reduce_;
    std::string skip_;
    std::int64_t out_;
};

template <typename T>
class Head final : public Block<T> {
public:
    Head(std::int64_t in, ParameterRegistry<T>& reg, const std::string& prefix)
        : conv_(make_unit(reg, prefix, {.in = in, .out = 1, .batchnorm = false, .relu = false, .bias = true}))
    {
    }
    Variable<T> forward(const Variable<T>& x, ForwardContext<T>& ctx) const override
    {
        return ops::sigmoid(conv_(x, ctx));
    }
    std::int64_t output_channels() const override { return 1; }

private:
    ConvUnit<T> conv_;
};

} // namespace

template <typename T>
std::unique_ptr<Block<T>> make_block(const BlockSpec& spec, std::int64_t in_channels, std::int64_t skip_channels,
                                     ParameterRegistry<T>& registry, const std::string& prefix)
{
    switch (spec.kind) {
    case BlockKind::Conv:
        return std::make_unique<ConvBlock<T>>(spec, in_channels, registry, prefix);
    case BlockKind::Iru:
        return std::make_unique<InvertedResidual<T>>(spec, in_channels, registry, prefix);
    case BlockKind::Asc:
        if (spec.stride != 1 && spec.stride != 2) {
            throw ConfigError(prefix + ": stride must be 1 or 2");
        }
        return std::make_unique<AtrousSeparable<T>>(in_channels, spec.filters, spec.stride, spec.dilation, registry,
                                                    prefix);
    case BlockKind::Aspp:
        if (spec.rates.empty()) {
            throw ConfigError(prefix + ": empty ASPP rate list");
        }
        return std::make_unique<Aspp<T>>(spec, in_channels, registry, prefix);
    case BlockKind::Upsample:
        return std::make_unique<Upsample<T>>(spec.stride, in_channels);
    case BlockKind::ConcatSkip:
        return std::make_unique<ConcatSkip<T>>(spec, in_channels, skip_channels, registry, prefix);
    case BlockKind::Head:
        return std::make_unique<Head<T>>(in_channels, registry, prefix);
    }
    throw ConfigError(prefix + ": unknown block kind");
}

// ---------------------------------------------------------------------------
// Network

template <typename T>
Network<T> Network<T>::build(const ArchitectureConfig& config, std::uint64_t seed)
{
    Network net;
    net.summary_ = validate_architecture(config);
    net.config_ = config;
    net.registry_ = ParameterRegistry<T>(seed);
    std::unordered_map<std::string, std::int64_t> tap_channels;
    std::int64_t channels = config.input_channels;
    for (std::size_t i = 0; i < config.blocks.size(); ++i) {
        const BlockSpec& spec = config.blocks[i];
        char prefix[32];
        std::snprintf(prefix, sizeof prefix, "b%02zu.", i);
        const std::int64_t skip = spec.kind == BlockKind::ConcatSkip ? tap_channels.at(spec.skip) : 0;
        auto block = make_block<T>(spec, channels, skip, net.registry_, prefix + std::string(to_string(spec.kind)));
        channels = block->output_channels();
        if (!spec.tap.empty()) {
            tap_channels[spec.tap] = channels;
        }
        net.blocks_.push_back(std::move(block));
    }
    return net;
}

template <typename T>
void Network<T>::check_input(const Shape& s) const
{
    if (s.c != config_.input_channels) {
        throw ShapeError("network expects " + std::to_string(config_.input_channels) + " input channels, got "
                         + std::to_string(s.c));
    }
    const int m = summary_.required_multiple;
    if (s.h % m != 0 || s.w % m != 0) {
        throw ShapeError("input height and width must be multiples of " + std::to_string(m) + ", got "
                         + std::to_string(s.h) + "x" + std::to_string(s.w));
    }
}

template <typename T>
Variable<T> Network<T>::run(const Variable<T>& batch, ForwardContext<T>& ctx) const
{
    check_input(batch.shape());
    Variable<T> x = batch;
    for (std::size_t i = 0; i < blocks_.size(); ++i) {
        x = blocks_[i]->forward(x, ctx);
        if (!config_.blocks[i].tap.empty()) {
            ctx.taps[config_.blocks[i].tap] = x;
        }
    }
    return x;
}

template <typename T>
Variable<T> Network<T>::forward(const Variable<T>& batch)
{
    ForwardContext<T> ctx;
    ctx.mode = mode_;
    ctx.bn = bn_;
    Variable<T> out = run(batch, ctx);
    const T decay = static_cast<T>(bn_.decay);
    for (const auto& u : ctx.stat_updates) {
        auto mean = registry_.running_mean(u.slot).mutable_value().values();
        auto var = registry_.running_var(u.slot).mutable_value().values();
        for (std::size_t c = 0; c < mean.size(); ++c) {
            mean[c] = decay * mean[c] + (T(1) - decay) * u.mean[c];
            var[c] = decay * var[c] + (T(1) - decay) * u.var[c];
        }
    }
    return out;
}

template <typename T>
BasicTensor<T> Network<T>::infer(const BasicTensor<T>& batch) const
{
    NoGradGuard guard;
    ForwardContext<T> ctx;
    ctx.mode = Mode::Inference;
    ctx.bn = bn_;
    return run(Variable<T>::leaf(batch), ctx).value();
}

template <typename T>
std::int64_t Network<T>::count_params() const
{
    std::int64_t total = 0;
    for (const auto& e : registry_.entries()) {
        if (e.trainable) {
            total += e.var.value().size();
        }
    }
    return total;
}

template <typename T>
void Network<T>::zero_grad()
{
    for (auto& e : registry_.entries()) {
        e.var.zero_grad();
    }
}

template <typename T>
std::vector<NamedArray> Network<T>::export_weights() const
{
    std::vector<NamedArray> out;
    out.reserve(registry_.entries().size());
    for (const auto& e : registry_.entries()) {
        NamedArray a{e.name, e.dims, {}};
        const auto values = e.var.value().values();
        a.data.assign(values.begin(), values.end());
        out.push_back(std::move(a));
    }
    return out;
}

template <typename T>
void Network<T>::import_weights(const std::vector<NamedArray>& arrays)
{
    std::unordered_map<std::string, const NamedArray*> by_name;
    for (const auto& a : arrays) {
        if (!by_name.emplace(a.name, &a).second) {
            throw FormatError("weights contain " + a.name + " twice");
        }
    }
    if (by_name.size() != registry_.entries().size()) {
        for (const auto& a : arrays) {
            bool known = false;
            for (const auto& e : registry_.entries()) {
                known = known || e.name == a.name;
            }
            if (!known) {
                throw FormatError("weights contain unknown tensor " + a.name);
            }
        }
    }
    for (auto& e : registry_.entries()) {
        auto it = by_name.find(e.name);
        if (it == by_name.end()) {
            throw FormatError("weights are missing tensor " + e.name);
        }
        if (it->second->dims != e.dims) {
            throw FormatError("tensor " + e.name + " has mismatched dims");
        }
        auto dst = e.var.mutable_value().values();
        const auto& src = it->second->data;
        for (std::size_t i = 0; i < dst.size(); ++i) {
            dst[i] = static_cast<T>(src[i]);
        }
    }
}

template class ParameterRegistry<float>;
template class ParameterRegistry<double>;
template class Network<float>;
template class Network<double>;
template std::unique_ptr<Block<float>> make_block(const BlockSpec&, std::int64_t, std::int64_t,
                                                  ParameterRegistry<float>&, const std::string&);
template std::unique_ptr<Block<double>> make_block(const BlockSpec&, std::int64_t, std::int64_t,
                                                   ParameterRegistry<double>&, const std::string&);

} // namespace cloudseg
