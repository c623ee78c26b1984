#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "cloudseg/raster_io.hpp"

namespace cloudseg {

template <typename T>
class Network;
struct LabeledPatch;

/// Pixel tallies with cloud as the positive class.
struct ConfusionMatrix {
    std::uint64_t tp = 0;
    std::uint64_t fp = 0;
    std::uint64_t fn = 0;
    std::uint64_t tn = 0;

    std::uint64_t total() const { return tp + fp + fn + tn; }
    ConfusionMatrix& operator+=(const ConfusionMatrix& o)
    {
        tp += o.tp;
        fp += o.fp;
        fn += o.fn;
        tn += o.tn;
        return *this;
    }
    bool operator==(const ConfusionMatrix&) const = default;
};

/// Percentages; nullopt where the denominator is zero.
struct MetricsRow {
    std::string method;
    std::optional<double> acc;
    std::optional<double> prec;
    std::optional<double> sn;
    std::optional<double> sp;
};

/// Both masks must be single-band u8 {0,255} of equal size.
ConfusionMatrix confusion(const RasterScene& predicted, const RasterScene& truth);

/// Probabilities >= threshold count as cloud; truth holds 0/1 labels.
ConfusionMatrix confusion(std::span<const float> probabilities, std::span<const float> truth, double threshold = 0.5);

MetricsRow compute_metrics(const ConfusionMatrix& cm, std::string method = "proposed");

/// Micro-averaged metrics: one confusion matrix accumulated over every patch.
MetricsRow evaluate_split(const Network<float>& net, std::span<const LabeledPatch> patches, double threshold = 0.5,
                          std::string method = "proposed");

/// CSV with header `method,acc,prec,sn,sp`, two decimals, "NA" when undefined.
std::string format_report(const std::vector<MetricsRow>& rows);
void emit_report(const std::vector<MetricsRow>& rows, const std::filesystem::path& path);

} // namespace cloudseg
