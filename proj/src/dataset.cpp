#include "cloudseg/dataset.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <sstream>

#include "cloudseg/rng.hpp"

namespace cloudseg {

LabeledPatch make_labeled_patch(const RasterScene& scene, const RasterScene& mask)
{
    scene.validate();
    if (scene.bands != 4) {
        throw ValidationError("training scenes need 4 bands (R, G, B, NIR), got " + std::to_string(scene.bands));
    }
    if (scene.width != mask.width || scene.height != mask.height) {
        throw ShapeError("scene is " + std::to_string(scene.width) + "x" + std::to_string(scene.height)
                         + " but its mask is " + std::to_string(mask.width) + "x" + std::to_string(mask.height));
    }
    const auto values = normalize_reflectance(scene.samples);
    return {Tensor({1, 4, scene.height, scene.width}, values), mask_to_tensor(mask)};
}

std::string manifest_file_name() { return "manifest.csv"; }

void write_manifest(const std::vector<ManifestEntry>& entries, const std::filesystem::path& path)
{
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw IoError("cannot open " + path.string() + " for writing");
    }
    for (const auto& e : entries) {
        char frac[64];
        std::snprintf(frac, sizeof frac, "%.17g", e.cloud_fraction);
        out << e.scene_path << ',' << e.mask_path << ',' << frac << '\n';
    }
    if (!out) {
        throw IoError("write failed: " + path.string());
    }
}

std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path)
{
    std::ifstream in(path);
    if (!in) {
        throw IoError("cannot open manifest " + path.string());
    }
    std::vector<ManifestEntry> entries;
    std::string line;
    int number = 0;
    while (std::getline(in, line)) {
        ++number;
        if (line.empty()) {
            continue;
        }
        std::vector<std::string> fields;
        std::stringstream ss(line);
        for (std::string f; std::getline(ss, f, ',');) {
            fields.push_back(f);
        }
        if (fields.size() != 3) {
            throw FormatError(path.string() + ":" + std::to_string(number) + ": expected 3 comma-separated fields");
        }
        ManifestEntry e{fields[0], fields[1], 0.0};
        try {
            std::size_t used = 0;
            e.cloud_fraction = std::stod(fields[2], &used);
            if (used != fields[2].size()) {
                throw std::invalid_argument("trailing characters");
            }
        } catch (const std::exception&) {
            throw FormatError(path.string() + ":" + std::to_string(number) + ": bad cloud fraction '" + fields[2]
                              + "'");
        }
        entries.push_back(std::move(e));
    }
    return entries;
}

std::vector<LabeledPatch> load_corpus(const std::filesystem::path& dir)
{
    if (!std::filesystem::is_directory(dir)) {
        throw ValidationError("data directory " + dir.string() + " does not exist");
    }
    const auto manifest = dir / manifest_file_name();
    if (!std::filesystem::exists(manifest)) {
        throw ValidationError("no " + manifest_file_name() + " in " + dir.string());
    }
    std::vector<LabeledPatch> patches;
    for (const auto& e : read_manifest(manifest)) {
        patches.push_back(make_labeled_patch(read_msr(dir / e.scene_path), read_msr(dir / e.mask_path)));
    }
    return patches;
}

Tensor rotate90(const Tensor& t)
{
    const std::int64_t h = t.h();
    const std::int64_t w = t.w();
    Tensor out({t.n(), t.c(), w, h});
    for (std::int64_t n = 0; n < t.n(); ++n) {
        for (std::int64_t c = 0; c < t.c(); ++c) {
            for (std::int64_t i = 0; i < w; ++i) {
                for (std::int64_t j = 0; j < h; ++j) {
                    out.at(n, c, i, j) = t.at(n, c, j, w - 1 - i);
                }
            }
        }
    }
    return out;
}

Tensor hflip(const Tensor& t)
{
    Tensor out(t.shape());
    for (std::int64_t n = 0; n < t.n(); ++n) {
        for (std::int64_t c = 0; c < t.c(); ++c) {
            for (std::int64_t i = 0; i < t.h(); ++i) {
                for (std::int64_t j = 0; j < t.w(); ++j) {
                    out.at(n, c, i, j) = t.at(n, c, i, t.w() - 1 - j);
                }
            }
        }
    }
    return out;
}

LabeledPatch augment_variant(const LabeledPatch& patch, int k)
{
    if (k < 0 || k >= static_cast<int>(kAugmentations)) {
        throw RangeError("augmentation index " + std::to_string(k) + " outside [0, 8)");
    }
    const Shape& a = patch.image.shape();
    const Shape& b = patch.mask.shape();
    if (a.h != a.w || a.n != b.n || a.h != b.h || a.w != b.w) {
        throw ShapeError("augmentation needs a square patch with an aligned mask, got image " + a.str() + " and mask "
                         + b.str());
    }
    LabeledPatch out = patch;
    for (int r = 0; r < k % 4; ++r) {
        out.image = rotate90(out.image);
        out.mask = rotate90(out.mask);
    }
    if (k >= 4) {
        out.image = hflip(out.image);
        out.mask = hflip(out.mask);
    }
    return out;
}

namespace {

template <typename S>
std::vector<S> transform_planes(std::span<const S> in, std::uint32_t w, std::uint32_t h, std::uint16_t bands, int k,
                                std::uint32_t& out_w, std::uint32_t& out_h)
{
    // Track where each output pixel comes from by composing the per-step maps.
    const int turns = k % 4;
    out_w = turns % 2 ? h : w;
    out_h = turns % 2 ? w : h;
    const std::size_t plane = std::size_t{w} * h;
    std::vector<S> out(in.size());
    for (std::uint16_t b = 0; b < bands; ++b) {
        const S* src = in.data() + plane * b;
        S* dst = out.data() + plane * b;
        for (std::uint32_t i = 0; i < out_h; ++i) {
            for (std::uint32_t j = 0; j < out_w; ++j) {
                std::uint32_t r = i;
                std::uint32_t c = k >= 4 ? out_w - 1 - j : j;
                // undo the rotations one quarter turn at a time
                std::uint32_t cur_w = out_w;
                std::uint32_t cur_h = out_h;
                for (int t = 0; t < turns; ++t) {
                    // out(i, j) = in(j, w_in - 1 - i), with w_in = cur_h
                    const std::uint32_t nr = c;
                    const std::uint32_t nc = cur_h - 1 - r;
                    r = nr;
                    c = nc;
                    std::swap(cur_w, cur_h);
                }
                dst[std::size_t{i} * out_w + j] = src[std::size_t{r} * w + c];
            }
        }
    }
    return out;
}

} // namespace

RasterScene augment_raster(const RasterScene& scene, int k)
{
    if (k < 0 || k >= static_cast<int>(kAugmentations)) {
        throw RangeError("augmentation index " + std::to_string(k) + " outside [0, 8)");
    }
    scene.validate();
    RasterScene out;
    out.bands = scene.bands;
    out.tag = scene.tag;
    std::visit(
        [&](const auto& v) {
            using S = typename std::decay_t<decltype(v)>::value_type;
            out.samples = transform_planes<S>(v, scene.width, scene.height, scene.bands, k, out.width, out.height);
        },
        scene.samples);
    return out;
}

std::array<LabeledPatch, 8> augment_patch(const LabeledPatch& patch)
{
    std::array<LabeledPatch, 8> out;
    for (int k = 0; k < 8; ++k) {
        out[k] = augment_variant(patch, k);
    }
    return out;
}

DatasetSplit split_dataset(std::size_t n_sources, std::array<double, 3> ratios, std::uint64_t seed)
{
    for (double r : ratios) {
        if (!(r >= 0.0)) {
            throw ConfigError("split ratios must be non-negative");
        }
    }
    const double sum = ratios[0] + ratios[1] + ratios[2];
    if (std::abs(sum - 1.0) > 1e-9) {
        throw ConfigError("split ratios sum to " + std::to_string(sum) + ", expected 1");
    }
    std::vector<std::size_t> ids(n_sources);
    std::iota(ids.begin(), ids.end(), std::size_t{0});
    Rng rng(derive_seed(seed, 0x5b17));
    rng.shuffle(std::span<std::size_t>(ids));
    const auto n = static_cast<double>(n_sources);
    const auto n_val = static_cast<std::size_t>(std::llround(ratios[1] * n));
    const auto n_test = std::min(static_cast<std::size_t>(std::llround(ratios[2] * n)), n_sources - n_val);
    const std::size_t n_train = n_sources - n_val - n_test;

    DatasetSplit split;
    split.ratios = ratios;
    split.seed = seed;
    split.train.assign(ids.begin(), ids.begin() + static_cast<std::ptrdiff_t>(n_train));
    split.validation.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train),
                            ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_val));
    split.test.assign(ids.begin() + static_cast<std::ptrdiff_t>(n_train + n_val), ids.end());
    std::sort(split.train.begin(), split.train.end());
    std::sort(split.validation.begin(), split.validation.end());
    std::sort(split.test.begin(), split.test.end());
    return split;
}

std::vector<std::size_t> expand_augmented(const std::vector<std::size_t>& sources)
{
    std::vector<std::size_t> out;
    out.reserve(sources.size() * kAugmentations);
    for (std::size_t s : sources) {
        for (std::size_t k = 0; k < kAugmentations; ++k) {
            out.push_back(s * kAugmentations + k);
        }
    }
    return out;
}

} // namespace cloudseg
