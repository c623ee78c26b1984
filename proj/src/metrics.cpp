#include "cloudseg/metrics.hpp"

#include <cstdio>
#include <fstream>

#include "cloudseg/dataset.hpp"
#include "cloudseg/network.hpp"

namespace cloudseg {

ConfusionMatrix confusion(const RasterScene& predicted, const RasterScene& truth)
{
    if (predicted.width != truth.width || predicted.height != truth.height) {
        throw ShapeError("mask dims differ: " + std::to_string(predicted.width) + "x" + std::to_string(predicted.height)
                         + " vs " + std::to_string(truth.width) + "x" + std::to_string(truth.height));
    }
    predicted.validate_mask();
    truth.validate_mask();
    const auto p = predicted.as<std::uint8_t>();
    const auto t = truth.as<std::uint8_t>();
    ConfusionMatrix cm;
    for (std::size_t i = 0; i < p.size(); ++i) {
        const bool pc = p[i] == 255;
        const bool tc = t[i] == 255;
        if (pc && tc) {
            ++cm.tp;
        } else if (pc) {
            ++cm.fp;
        } else if (tc) {
            ++cm.fn;
        } else {
            ++cm.tn;
        }
    }
    return cm;
}

ConfusionMatrix confusion(std::span<const float> probabilities, std::span<const float> truth, double threshold)
{
    if (probabilities.size() != truth.size()) {
        throw ShapeError("prediction has " + std::to_string(probabilities.size()) + " pixels, truth has "
                         + std::to_string(truth.size()));
    }
    ConfusionMatrix cm;
    for (std::size_t i = 0; i < truth.size(); ++i) {
        const bool pc = static_cast<double>(probabilities[i]) >= threshold;
        const bool tc = truth[i] >= 0.5f;
        cm.tp += pc && tc;
        cm.fp += pc && !tc;
        cm.fn += !pc && tc;
        cm.tn += !pc && !tc;
    }
    return cm;
}

namespace {

std::optional<double> percent(std::uint64_t num, std::uint64_t den)
{
    if (den == 0) {
        return std::nullopt;
    }
    return 100.0 * static_cast<double>(num) / static_cast<double>(den);
}

std::string cell(const std::optional<double>& v)
{
    if (!v) {
        return "NA";
    }
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.2f", *v);
    return buf;
}

} // namespace

MetricsRow compute_metrics(const ConfusionMatrix& cm, std::string method)
{
    return {std::move(method), percent(cm.tp + cm.tn, cm.total()), percent(cm.tp, cm.tp + cm.fp),
            percent(cm.tp, cm.tp + cm.fn), percent(cm.tn, cm.tn + cm.fp)};
}

MetricsRow evaluate_split(const Network<float>& net, std::span<const LabeledPatch> patches, double threshold,
                          std::string method)
{
    if (patches.empty()) {
        throw ConfigError("evaluation split is empty");
    }
    ConfusionMatrix total;
    for (const auto& p : patches) {
        const Tensor probs = net.infer(p.image);
        total += confusion(probs.values(), p.mask.values(), threshold);
    }
    return compute_metrics(total, std::move(method));
}

std::string format_report(const std::vector<MetricsRow>& rows)
{
    std::string out = "method,acc,prec,sn,sp\n";
    for (const auto& r : rows) {
        out += r.method + "," + cell(r.acc) + "," + cell(r.prec) + "," + cell(r.sn) + "," + cell(r.sp) + "\n";
    }
    return out;
}

void emit_report(const std::vector<MetricsRow>& rows, const std::filesystem::path& path)
{
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw IoError("cannot open " + path.string() + " for writing");
    }
    out << format_report(rows);
    if (!out) {
        throw IoError("write failed: " + path.string());
    }
}

} // namespace cloudseg
