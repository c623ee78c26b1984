#include "cloudseg/trainer.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <sstream>

#include "cloudseg/errors.hpp"
#include "cloudseg/rng.hpp"
#include "cloudseg/weights_io.hpp"

namespace cloudseg {

void OptimizerConfig::validate() const
{
    if (!(learning_rate > 0.0) || !std::isfinite(learning_rate)) {
        throw ConfigError("learning_rate must be > 0");
    }
    if (!(beta1 >= 0.0 && beta1 < 1.0)) {
        throw ConfigError("beta1 must lie in [0, 1)");
    }
    if (!(beta2 >= 0.0 && beta2 < 1.0)) {
        throw ConfigError("beta2 must lie in [0, 1)");
    }
    if (!(epsilon > 0.0)) {
        throw ConfigError("epsilon must be > 0");
    }
    if (batch_size < 1) {
        throw ConfigError("batch_size must be >= 1");
    }
    if (epochs < 0) {
        throw ConfigError("epochs must be >= 0");
    }
}

namespace {

void check_same_shape(const Shape& a, const Shape& b, const char* what)
{
    if (a != b) {
        throw ShapeError(std::string(what) + ": prediction " + a.str() + " vs target " + b.str());
    }
}

double clamp_prob(double p) { return std::clamp(p, kBceClamp, 1.0 - kBceClamp); }

} // namespace

template <typename T>
BceResult<T> bce_loss(const BasicTensor<T>& pred, const BasicTensor<T>& target)
{
    check_same_shape(pred.shape(), target.shape(), "bce_loss");
    BceResult<T> out;
    out.grad = BasicTensor<T>(pred.shape());
    const auto n = static_cast<double>(pred.size());
    double sum = 0.0;
    for (std::int64_t i = 0; i < pred.size(); ++i) {
        const double p = clamp_prob(static_cast<double>(pred[i]));
        const double y = static_cast<double>(target[i]);
        sum -= y * std::log(p) + (1.0 - y) * std::log(1.0 - p);
        out.grad[i] = static_cast<T>((p - y) / (p * (1.0 - p)) / n);
    }
    out.loss = sum / n;
    return out;
}

namespace ops {

template <typename T>
Variable<T> bce_loss(const Variable<T>& pred, const BasicTensor<T>& target)
{
    auto r = cloudseg::bce_loss(pred.value(), target);
    BasicTensor<T> value({1, 1, 1, 1}, static_cast<T>(r.loss));
    return Variable<T>::from_op(std::move(value), {pred},
                                [g = std::move(r.grad)](typename Variable<T>::Node& self) {
                                    BasicTensor<T> scaled = g;
                                    const T s = self.grad[0];
                                    for (std::int64_t i = 0; i < scaled.size(); ++i) {
                                        scaled[i] *= s;
                                    }
                                    self.parents[0]->accumulate(scaled);
                                });
}

} // namespace ops

template <typename T>
double pixel_accuracy(const BasicTensor<T>& pred, const BasicTensor<T>& target, double threshold)
{
    check_same_shape(pred.shape(), target.shape(), "pixel_accuracy");
    std::int64_t hits = 0;
    for (std::int64_t i = 0; i < pred.size(); ++i) {
        hits += (static_cast<double>(pred[i]) >= threshold) == (target[i] >= T(0.5));
    }
    return static_cast<double>(hits) / static_cast<double>(pred.size());
}

template BceResult<float> bce_loss(const Tensor&, const Tensor&);
template BceResult<double> bce_loss(const TensorD&, const TensorD&);
template Var ops::bce_loss(const Var&, const Tensor&);
template VarD ops::bce_loss(const VarD&, const TensorD&);
template double pixel_accuracy(const Tensor&, const Tensor&, double);
template double pixel_accuracy(const TensorD&, const TensorD&, double);

void adam_update(std::span<float> theta, std::span<const float> grad, std::span<float> m, std::span<float> v,
                 std::int64_t t, const OptimizerConfig& cfg)
{
    if (grad.size() != theta.size() || m.size() != theta.size() || v.size() != theta.size()) {
        throw ShapeError("adam_update: parameter, gradient and moment sizes differ");
    }
    if (t < 1) {
        throw RangeError("adam_update: step counter must be >= 1");
    }
    const double c1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
    const double c2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
    for (std::size_t i = 0; i < theta.size(); ++i) {
        const double g = grad[i];
        const double mi = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        const double vi = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        m[i] = static_cast<float>(mi);
        v[i] = static_cast<float>(vi);
        const double m_hat = mi / c1;
        const double v_hat = vi / c2;
        theta[i] = static_cast<float>(theta[i] - cfg.learning_rate * m_hat / (std::sqrt(v_hat) + cfg.epsilon));
    }
}

void adam_step(std::vector<ParameterEntry<float>>& params, AdamState& state, const OptimizerConfig& cfg)
{
    std::vector<ParameterEntry<float>*> trainable;
    for (auto& p : params) {
        if (p.trainable) {
            trainable.push_back(&p);
        }
    }
    if (state.m.empty()) {
        for (auto* p : trainable) {
            state.m.emplace_back(p->var.shape());
            state.v.emplace_back(p->var.shape());
        }
    }
    if (state.m.size() != trainable.size() || state.v.size() != trainable.size()) {
        throw ShapeError("Adam state holds " + std::to_string(state.m.size()) + " moments for "
                         + std::to_string(trainable.size()) + " trainable parameters");
    }
    for (std::size_t i = 0; i < trainable.size(); ++i) {
        const auto& p = *trainable[i];
        if (state.m[i].shape() != p.var.shape() || state.v[i].shape() != p.var.shape()) {
            throw ShapeError("Adam moments for " + p.name + " do not match the parameter shape");
        }
        if (!p.var.grad().empty() && !p.var.grad().all_finite()) {
            throw NumericError("non-finite gradient in parameter " + p.name);
        }
    }
    ++state.t;
    for (std::size_t i = 0; i < trainable.size(); ++i) {
        auto& p = *trainable[i];
        auto theta = p.var.mutable_value().values();
        const Tensor& g = p.var.grad();
        if (g.empty()) {
            const std::vector<float> zeros(theta.size(), 0.0f);
            adam_update(theta, zeros, state.m[i].values(), state.v[i].values(), state.t, cfg);
        } else {
            adam_update(theta, g.values(), state.m[i].values(), state.v[i].values(), state.t, cfg);
        }
    }
}

void TrainConfig::validate() const
{
    optimizer.validate();
    if (checkpoint_every < 1) {
        throw ConfigError("checkpoint_every must be >= 1");
    }
    if (arch_config_path.empty()) {
        throw ConfigError("arch_config_path is empty");
    }
    if (data_dir.empty()) {
        throw ConfigError("data_dir is empty");
    }
}

namespace {

std::string trim(std::string_view s)
{
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string_view::npos) {
        return {};
    }
    const auto e = s.find_last_not_of(" \t\r");
    return std::string(s.substr(b, e - b + 1));
}

double parse_real(const std::string& key, const std::string& value)
{
    char* end = nullptr;
    const double v = std::strtod(value.c_str(), &end);
    if (value.empty() || end != value.c_str() + value.size() || !std::isfinite(v)) {
        throw ConfigError(key + ": '" + value + "' is not a finite number");
    }
    return v;
}

long long parse_integer(const std::string& key, const std::string& value)
{
    char* end = nullptr;
    const long long v = std::strtoll(value.c_str(), &end, 10);
    if (value.empty() || end != value.c_str() + value.size()) {
        throw ConfigError(key + ": '" + value + "' is not an integer");
    }
    return v;
}

bool parse_bool(const std::string& key, const std::string& value)
{
    if (value == "true" || value == "1" || value == "yes") {
        return true;
    }
    if (value == "false" || value == "0" || value == "no") {
        return false;
    }
    throw ConfigError(key + ": '" + value + "' is not a boolean");
}

} // namespace

TrainConfig parse_train_config(std::string_view text)
{
    TrainConfig cfg;
    std::map<std::string, std::string> seen;
    std::istringstream in{std::string(text)};
    std::string raw;
    int line = 0;
    while (std::getline(in, raw)) {
        ++line;
        if (auto hash = raw.find('#'); hash != std::string::npos) {
            raw.erase(hash);
        }
        const std::string content = trim(raw);
        if (content.empty()) {
            continue;
        }
        const auto eq = content.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("line " + std::to_string(line) + ": expected `key = value`");
        }
        const std::string key = trim(std::string_view(content).substr(0, eq));
        const std::string value = trim(std::string_view(content).substr(eq + 1));
        if (!seen.emplace(key, value).second) {
            throw ConfigError("line " + std::to_string(line) + ": duplicate key " + key);
        }
        if (key == "learning_rate") {
            cfg.optimizer.learning_rate = parse_real(key, value);
        } else if (key == "beta1") {
            cfg.optimizer.beta1 = parse_real(key, value);
        } else if (key == "beta2") {
            cfg.optimizer.beta2 = parse_real(key, value);
        } else if (key == "epsilon") {
            cfg.optimizer.epsilon = parse_real(key, value);
        } else if (key == "batch_size") {
            cfg.optimizer.batch_size = static_cast<int>(parse_integer(key, value));
        } else if (key == "epochs") {
            cfg.optimizer.epochs = static_cast<int>(parse_integer(key, value));
        } else if (key == "seed") {
            cfg.seed = static_cast<std::uint64_t>(parse_integer(key, value));
        } else if (key == "checkpoint_every") {
            cfg.checkpoint_every = static_cast<int>(parse_integer(key, value));
        } else if (key == "arch_config_path") {
            cfg.arch_config_path = value;
        } else if (key == "data_dir") {
            cfg.data_dir = value;
        } else if (key == "out_dir") {
            cfg.out_dir = value;
        } else if (key == "augment") {
            cfg.augment = parse_bool(key, value);
        } else {
            throw ConfigError("line " + std::to_string(line) + ": unknown key " + key);
        }
    }
    std::string missing;
    for (const char* key : {"arch_config_path", "data_dir"}) {
        if (!seen.count(key)) {
            missing += missing.empty() ? key : std::string(", ") + key;
        }
    }
    if (!missing.empty()) {
        throw ConfigError("missing config keys: " + missing);
    }
    cfg.validate();
    return cfg;
}

TrainConfig load_train_config(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("cannot open training config " + path.string());
    }
    std::stringstream buffer;
    buffer << in.rdbuf();
    try {
        return parse_train_config(buffer.str());
    } catch (const ConfigError& e) {
        throw ConfigError(path.string() + ": " + e.what());
    }
}

std::string TrainingHistory::to_csv() const
{
    std::string out = "epoch,train_loss,train_acc,val_loss,val_acc\n";
    char buf[160];
    for (const auto& r : epochs) {
        std::snprintf(buf, sizeof buf, "%d,%.9g,%.9g,%.9g,%.9g\n", r.epoch, r.train_loss, r.train_acc, r.val_loss,
                      r.val_acc);
        out += buf;
    }
    return out;
}

TrainData prepare_data(const std::vector<LabeledPatch>& corpus, std::uint64_t seed, bool augment,
                       std::array<double, 3> ratios)
{
    const DatasetSplit split = split_dataset(corpus.size(), ratios, seed);
    auto gather = [&](const std::vector<std::size_t>& ids) {
        std::vector<LabeledPatch> out;
        if (augment) {
            for (std::size_t id : expand_augmented(ids)) {
                out.push_back(augment_variant(corpus[id / kAugmentations], static_cast<int>(id % kAugmentations)));
            }
        } else {
            for (std::size_t id : ids) {
                out.push_back(corpus[id]);
            }
        }
        return out;
    };
    return {gather(split.train), gather(split.validation), gather(split.test)};
}

std::pair<Tensor, Tensor> make_batch(std::span<const LabeledPatch> patches, std::span<const std::size_t> ids)
{
    if (ids.empty()) {
        throw ShapeError("empty batch");
    }
    const Shape is = patches[ids[0]].image.shape();
    const Shape ms = patches[ids[0]].mask.shape();
    const auto n = static_cast<std::int64_t>(ids.size());
    Tensor images({n * is.n, is.c, is.h, is.w});
    Tensor masks({n * ms.n, ms.c, ms.h, ms.w});
    float* di = images.data();
    float* dm = masks.data();
    for (std::size_t id : ids) {
        const LabeledPatch& p = patches[id];
        if (p.image.shape() != is || p.mask.shape() != ms) {
            throw ShapeError("patches in one batch must share a shape: " + is.str() + " vs " + p.image.shape().str());
        }
        di = std::copy(p.image.values().begin(), p.image.values().end(), di);
        dm = std::copy(p.mask.values().begin(), p.mask.values().end(), dm);
    }
    return {std::move(images), std::move(masks)};
}

double train_step(Network<float>& net, AdamState& state, const OptimizerConfig& cfg, const Tensor& images,
                  const Tensor& masks, double* accuracy)
{
    net.set_mode(Mode::Train);
    net.zero_grad();
    const Var out = net.forward(Var::leaf(images, false));
    const Var loss = ops::bce_loss(out, masks);
    const double value = loss.value()[0];
    if (!std::isfinite(value)) {
        throw NumericError("non-finite loss");
    }
    loss.backward(Tensor({1, 1, 1, 1}, 1.0f));
    adam_step(net.parameters(), state, cfg);
    if (accuracy) {
        *accuracy = pixel_accuracy(out.value(), masks);
    }
    return value;
}

std::pair<double, double> evaluate_loss(const Network<float>& net, std::span<const LabeledPatch> patches,
                                        int batch_size)
{
    if (patches.empty()) {
        return {std::numeric_limits<double>::quiet_NaN(), std::numeric_limits<double>::quiet_NaN()};
    }
    std::vector<std::size_t> ids(patches.size());
    std::iota(ids.begin(), ids.end(), std::size_t{0});
    double loss = 0.0;
    double acc = 0.0;
    double pixels = 0.0;
    for (std::size_t start = 0; start < ids.size(); start += static_cast<std::size_t>(batch_size)) {
        const std::size_t end = std::min(ids.size(), start + static_cast<std::size_t>(batch_size));
        const auto [images, masks] = make_batch(patches, std::span(ids).subspan(start, end - start));
        const Tensor probs = net.infer(images);
        const auto w = static_cast<double>(masks.size());
        loss += bce_loss(probs, masks).loss * w;
        acc += pixel_accuracy(probs, masks) * w;
        pixels += w;
    }
    return {loss / pixels, acc / pixels};
}

std::filesystem::path meta_path(const std::filesystem::path& weights)
{
    auto p = weights;
    p += ".meta";
    return p;
}

void write_checkpoint(const Network<float>& net, const CheckpointMeta& meta, const std::filesystem::path& weights)
{
    write_cpw(net.export_weights(), weights);
    std::ofstream out(meta_path(weights), std::ios::trunc);
    if (!out) {
        throw IoError("cannot write " + meta_path(weights).string());
    }
    char acc[64];
    std::snprintf(acc, sizeof acc, "%.9g", meta.val_acc);
    out << "epoch = " << meta.epoch << "\noptimizer_step = " << meta.optimizer_step << "\narch = " << meta.arch
         << "\nseed = " << meta.seed
        << "\naugment = " << (meta.augment ? "true" : "false") << "\nval_acc = " << acc << "\n";
    if (!out) {
        throw IoError("write failed: " + meta_path(weights).string());
    }
}

CheckpointMeta read_checkpoint_meta(const std::filesystem::path& weights)
{
    const auto path = meta_path(weights);
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open " + path.string());
    }
    CheckpointMeta meta;
    std::string raw;
    while (std::getline(in, raw)) {
        const auto eq = raw.find('=');
        if (eq == std::string::npos) {
            continue;
        }
        const std::string key = trim(std::string_view(raw).substr(0, eq));
        const std::string value = trim(std::string_view(raw).substr(eq + 1));
        try {
            if (key == "epoch") {
                meta.epoch = static_cast<int>(parse_integer(key, value));
            } else if (key == "optimizer_step") {
                meta.optimizer_step = parse_integer(key, value);
            } else if (key == "arch") {
                meta.arch = value;
            } else if (key == "seed") {
                meta.seed = static_cast<std::uint64_t>(parse_integer(key, value));
            } else if (key == "augment") {
                meta.augment = parse_bool(key, value);
            } else if (key == "val_acc") {
                meta.val_acc = value == "nan" ? std::numeric_limits<double>::quiet_NaN() : parse_real(key, value);
            }
        } catch (const ConfigError& e) {
            throw FormatError(path.string() + ": " + e.what());
        }
    }
    return meta;
}

TrainingHistory train(Network<float>& net, const TrainData& data, const TrainConfig& cfg,
                      const std::filesystem::path& checkpoint_dir, const EpochCallback& on_epoch)
{
    cfg.validate();
    if (data.train.empty()) {
        throw ConfigError("training split is empty");
    }
    if (!checkpoint_dir.empty()) {
        std::error_code ec;
        std::filesystem::create_directories(checkpoint_dir, ec);
        if (ec) {
            throw IoError("cannot create " + checkpoint_dir.string() + ": " + ec.message());
        }
    }
    const OptimizerConfig& opt = cfg.optimizer;
    TrainingHistory history;
    AdamState state;
    std::vector<std::size_t> order(data.train.size());

    auto checkpoint = [&](const std::string& name, int epoch, double val_acc) {
        write_checkpoint(net, {epoch, state.t, cfg.arch_config_path, cfg.seed, cfg.augment, val_acc}, checkpoint_dir / name);
    };

    for (int epoch = 1; epoch <= opt.epochs; ++epoch) {
        std::iota(order.begin(), order.end(), std::size_t{0});
        Rng rng(derive_seed(cfg.seed, 0x7a41, static_cast<std::uint64_t>(epoch)));
        rng.shuffle(std::span<std::size_t>(order));

        double loss_sum = 0.0;
        double acc_sum = 0.0;
        std::size_t batch_index = 0;
        for (std::size_t start = 0; start < order.size(); start += static_cast<std::size_t>(opt.batch_size)) {
            const std::size_t end = std::min(order.size(), start + static_cast<std::size_t>(opt.batch_size));
            const auto [images, masks] = make_batch(data.train, std::span(order).subspan(start, end - start));
            double acc = 0.0;
            double loss = 0.0;
            try {
                loss = train_step(net, state, opt, images, masks, &acc);
            } catch (const NumericError& e) {
                throw NumericError("epoch " + std::to_string(epoch) + ", batch " + std::to_string(batch_index) + ": "
                                   + e.what());
            }
            const auto n = static_cast<double>(end - start);
            loss_sum += loss * n;
            acc_sum += acc * n;
            ++batch_index;
        }
        net.set_mode(Mode::Inference);

        EpochRecord rec;
        rec.epoch = epoch;
        rec.train_loss = loss_sum / static_cast<double>(order.size());
        rec.train_acc = acc_sum / static_cast<double>(order.size());
        std::tie(rec.val_loss, rec.val_acc) = evaluate_loss(net, data.validation, opt.batch_size);
        history.epochs.push_back(rec);
        history.optimizer_step = state.t;

        const bool improved = !data.validation.empty() && rec.val_acc > history.best_val_acc;
        if (improved) {
            history.best_val_acc = rec.val_acc;
            history.best_epoch = epoch;
        }
        if (!checkpoint_dir.empty()) {
            std::ofstream csv(checkpoint_dir / "history.csv", std::ios::trunc);
            csv << history.to_csv();
            if (!csv) {
                throw IoError("cannot write " + (checkpoint_dir / "history.csv").string());
            }
            if (epoch % cfg.checkpoint_every == 0) {
                char name[32];
                std::snprintf(name, sizeof name, "epoch_%04d.cpw", epoch);
                checkpoint(name, epoch, rec.val_acc);
            }
            if (improved) {
                checkpoint("best.cpw", epoch, rec.val_acc);
            }
        }
        if (on_epoch) {
            on_epoch(rec);
        }
    }
    net.set_mode(Mode::Inference);
    if (!checkpoint_dir.empty()) {
        const double last = history.epochs.empty() ? std::numeric_limits<double>::quiet_NaN()
                                                   : history.epochs.back().val_acc;
        checkpoint("final.cpw", opt.epochs, last);
        if (history.epochs.empty()) {
            std::ofstream csv(checkpoint_dir / "history.csv", std::ios::trunc);
            csv << history.to_csv();
        }
    }
    return history;
}

} // namespace cloudseg
