#include "cloudseg/segmenter.hpp"

#include <algorithm>
#include <atomic>
#include <exception>
#include <mutex>
#include <numeric>
#include <thread>

#include "cloudseg/errors.hpp"
#include "cloudseg/network.hpp"

namespace cloudseg {

std::vector<std::uint32_t> axis_offsets(std::uint32_t dim, std::uint32_t window, std::uint32_t overlap)
{
    if (window == 0) {
        throw ConfigError("window must be positive");
    }
    if (overlap >= window) {
        throw ConfigError("overlap " + std::to_string(overlap) + " must be smaller than the window "
                          + std::to_string(window));
    }
    if (window > dim) {
        throw ConfigError("window " + std::to_string(window) + " is larger than the scene dimension "
                          + std::to_string(dim));
    }
    const std::uint32_t stride = window - overlap;
    std::vector<std::uint32_t> out;
    std::uint32_t last = 0;
    for (std::uint64_t off = 0; off + window <= dim; off += stride) {
        last = static_cast<std::uint32_t>(off);
        out.push_back(last);
    }
    if (last != dim - window) {
        out.push_back(dim - window);
    }
    return out;
}

WindowPlan plan_windows(std::uint32_t scene_w, std::uint32_t scene_h, std::uint32_t window, std::uint32_t overlap)
{
    WindowPlan plan;
    plan.scene_width = scene_w;
    plan.scene_height = scene_h;
    plan.window = window;
    plan.overlap = overlap;
    plan.x_offsets = axis_offsets(scene_w, window, overlap);
    plan.y_offsets = axis_offsets(scene_h, window, overlap);
    plan.offsets.reserve(plan.x_offsets.size() * plan.y_offsets.size());
    for (auto y : plan.y_offsets) {
        for (auto x : plan.x_offsets) {
            plan.offsets.emplace_back(x, y);
        }
    }
    return plan;
}

void merge_window(ProbabilityCanvas& canvas, std::span<const float> probs, std::uint32_t size, std::uint32_t x,
                  std::uint32_t y)
{
    if (probs.size() != std::size_t{size} * size) {
        throw ShapeError("window of size " + std::to_string(size) + " needs " + std::to_string(std::size_t{size} * size)
                         + " probabilities, got " + std::to_string(probs.size()));
    }
    if (std::uint64_t{x} + size > canvas.width || std::uint64_t{y} + size > canvas.height) {
        throw RangeError("window " + std::to_string(size) + "x" + std::to_string(size) + " at (" + std::to_string(x)
                         + ", " + std::to_string(y) + ") exceeds canvas " + std::to_string(canvas.width) + "x"
                         + std::to_string(canvas.height));
    }
    for (std::uint32_t r = 0; r < size; ++r) {
        const std::size_t row = std::size_t{y + r} * canvas.width + x;
        const float* src = probs.data() + std::size_t{r} * size;
        float* dst = canvas.values.data() + row;
        std::uint32_t* cov = canvas.coverage.data() + row;
        for (std::uint32_t c = 0; c < size; ++c) {
            dst[c] = std::max(dst[c], src[c]);
            ++cov[c];
        }
    }
}

RasterScene threshold_canvas(const ProbabilityCanvas& canvas, double threshold)
{
    auto mask = RasterScene::zeros(canvas.width, canvas.height, 1, DType::U8, "cloud-mask");
    auto out = mask.as<std::uint8_t>();
    for (std::size_t i = 0; i < canvas.values.size(); ++i) {
        out[i] = static_cast<double>(canvas.values[i]) >= threshold ? 255 : 0;
    }
    return mask;
}

RasterScene canvas_to_raster(const ProbabilityCanvas& canvas)
{
    RasterScene r;
    r.width = canvas.width;
    r.height = canvas.height;
    r.bands = 1;
    r.tag = "cloud-probability";
    r.samples = canvas.values;
    return r;
}

namespace {

struct WindowFailure {
    std::size_t index;
    std::exception_ptr error;
};

[[noreturn]] void rethrow_with_offset(const WindowFailure& f, std::uint32_t x, std::uint32_t y)
{
    const std::string where = "window at (" + std::to_string(x) + ", " + std::to_string(y) + "): ";
    try {
        std::rethrow_exception(f.error);
    } catch (const ValidationError& e) {
        throw ValidationError(where + e.what());
    } catch (const std::exception& e) {
        throw Error(where + e.what());
    }
}

} // namespace

SegmentResult segment_scene(const RasterScene& scene, const WindowPredictor& predict, const SegmentOptions& options)
{
    scene.validate();
    if (scene.bands != 4) {
        throw ConfigError("scene has " + std::to_string(scene.bands) + " bands; segmentation needs 4 (R, G, B, NIR)");
    }
    if (!(options.threshold >= 0.0 && options.threshold <= 1.0)) {
        throw ConfigError("threshold must lie in [0, 1]");
    }
    const WindowPlan plan = plan_windows(scene.width, scene.height, options.window, options.overlap);
    const std::size_t n = plan.offsets.size();

    std::vector<std::size_t> order = options.order;
    if (order.empty()) {
        order.resize(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
    } else {
        auto sorted = order;
        std::sort(sorted.begin(), sorted.end());
        for (std::size_t i = 0; i < sorted.size(); ++i) {
            if (sorted[i] != i || sorted.size() != n) {
                throw ConfigError("window order is not a permutation of the " + std::to_string(n) + " planned windows");
            }
        }
    }

    SegmentResult result;
    result.canvas = ProbabilityCanvas(scene.width, scene.height);
    result.windows = n;

    std::mutex merge_mutex;
    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::vector<WindowFailure> failures;

    auto worker = [&] {
        while (!failed.load()) {
            const std::size_t k = next.fetch_add(1);
            if (k >= n) {
                return;
            }
            const std::size_t idx = order[k];
            const auto [x, y] = plan.offsets[idx];
            try {
                const Patch patch = extract_patch(scene, x, y, plan.window);
                const std::vector<float> probs = predict(patch);
                std::lock_guard lock(merge_mutex);
                merge_window(result.canvas, probs, plan.window, x, y);
            } catch (...) {
                std::lock_guard lock(merge_mutex);
                failures.push_back({idx, std::current_exception()});
                failed.store(true);
            }
        }
    };

    const unsigned threads = std::max(1u, std::min<unsigned>(options.threads, static_cast<unsigned>(n)));
    if (threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        pool.reserve(threads);
        for (unsigned t = 0; t < threads; ++t) {
            pool.emplace_back(worker);
        }
        for (auto& t : pool) {
            t.join();
        }
    }
    if (!failures.empty()) {
        const auto first = std::min_element(failures.begin(), failures.end(),
                                            [](const auto& a, const auto& b) { return a.index < b.index; });
        rethrow_with_offset(*first, plan.offsets[first->index].first, plan.offsets[first->index].second);
    }
    result.mask = threshold_canvas(result.canvas, options.threshold);
    return result;
}

SegmentResult segment_scene(const RasterScene& scene, const Network<float>& net, const SegmentOptions& options)
{
    if (options.window % static_cast<std::uint32_t>(net.required_multiple()) != 0) {
        throw ConfigError("window " + std::to_string(options.window) + " is not a multiple of "
                          + std::to_string(net.required_multiple()) + " required by the architecture");
    }
    WindowPredictor predict = [&net](const Patch& patch) {
        const Tensor probs = net.infer(patch.pixels);
        return std::vector<float>(probs.values().begin(), probs.values().end());
    };
    return segment_scene(scene, predict, options);
}

} // namespace cloudseg
