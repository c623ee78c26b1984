#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <utility>
#include <vector>

#include "cloudseg/raster_io.hpp"

namespace cloudseg {

template <typename T>
class Network;

struct WindowPlan {
    std::uint32_t scene_width = 0;
    std::uint32_t scene_height = 0;
    std::uint32_t window = 512;
    std::uint32_t overlap = 50;
    std::vector<std::uint32_t> x_offsets;
    std::vector<std::uint32_t> y_offsets;
    /// Row-major (x, y) pairs: y outer, x inner.
    std::vector<std::pair<std::uint32_t, std::uint32_t>> offsets;

    std::uint32_t stride() const { return window - overlap; }
};

/// Offsets 0, s, 2s, ... while offset + window <= dim, plus dim - window when
/// the regular grid stops short of the border.
std::vector<std::uint32_t> axis_offsets(std::uint32_t dim, std::uint32_t window, std::uint32_t overlap);

WindowPlan plan_windows(std::uint32_t scene_w, std::uint32_t scene_h, std::uint32_t window = 512,
                        std::uint32_t overlap = 50);

struct ProbabilityCanvas {
    std::uint32_t width = 0;
    std::uint32_t height = 0;
    std::vector<float> values;
    std::vector<std::uint32_t> coverage;

    ProbabilityCanvas() = default;
    ProbabilityCanvas(std::uint32_t w, std::uint32_t h)
        : width(w), height(h), values(std::size_t{w} * h, 0.0f), coverage(std::size_t{w} * h, 0)
    {
    }
};

/// Max-merges a `size` x `size` block of probabilities whose top-left corner
/// lands at (x, y).
void merge_window(ProbabilityCanvas& canvas, std::span<const float> probs, std::uint32_t size, std::uint32_t x,
                  std::uint32_t y);

/// 255 where value >= threshold, else 0.
RasterScene threshold_canvas(const ProbabilityCanvas& canvas, double threshold = 0.5);

/// Single-band f32 raster of the canvas values.
RasterScene canvas_to_raster(const ProbabilityCanvas& canvas);

/// Maps a normalized (1,4,window,window) patch to window*window probabilities.
using WindowPredictor = std::function<std::vector<float>(const Patch&)>;

struct SegmentOptions {
    std::uint32_t window = 512;
    std::uint32_t overlap = 50;
    double threshold = 0.5;
    unsigned threads = 1;
    /// Optional permutation of plan indices; empty means plan order.
    std::vector<std::size_t> order;
};

struct SegmentResult {
    RasterScene mask;
    ProbabilityCanvas canvas;
    std::size_t windows = 0;
};

SegmentResult segment_scene(const RasterScene& scene, const WindowPredictor& predict,
                            const SegmentOptions& options = {});

/// The network must be in inference mode; it is shared read-only by workers.
SegmentResult segment_scene(const RasterScene& scene, const Network<float>& net, const SegmentOptions& options = {});

} // namespace cloudseg
