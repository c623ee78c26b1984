#include "cloudseg/synth.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <exception>
#include <mutex>
#include <numbers>
#include <thread>

#include "cloudseg/errors.hpp"
#include "cloudseg/rng.hpp"

namespace cloudseg {

std::string to_string(Terrain terrain)
{
    switch (terrain) {
    case Terrain::Flat:
        return "flat";
    case Terrain::Gradient:
        return "gradient";
    case Terrain::Speckle:
        return "speckle";
    case Terrain::Mixed:
        return "mixed";
    }
    return "unknown";
}

Terrain parse_terrain(const std::string& name)
{
    for (Terrain t : {Terrain::Flat, Terrain::Gradient, Terrain::Speckle, Terrain::Mixed}) {
        if (to_string(t) == name) {
            return t;
        }
    }
    throw ConfigError("unknown terrain '" + name + "' (expected flat, gradient, speckle or mixed)");
}

void SynthConfig::validate() const
{
    if (width < 1 || height < 1) {
        throw ConfigError("scene size must be at least 1x1");
    }
    if (min_blobs < 0 || max_blobs < min_blobs) {
        throw ConfigError("blob count range must satisfy 0 <= min <= max");
    }
    if (!(min_radius > 0.0) || max_radius < min_radius) {
        throw ConfigError("blob radius range must satisfy 0 < min <= max");
    }
    static constexpr const char* kBands[] = {"R", "G", "B", "NIR"};
    for (int b = 0; b < 4; ++b) {
        for (const BandRange& r : {cloud[b], background[b]}) {
            if (!(r.lo >= 0.0 && r.lo <= r.hi && r.hi <= 1.0)) {
                throw ConfigError(std::string("band ") + kBands[b] + ": brightness range must lie in [0, 1] with lo <= hi");
            }
        }
        if (!(cloud[b].lo > background[b].hi)) {
            throw ConfigError(std::string("band ") + kBands[b]
                              + ": cloud brightness must lie strictly above the background range");
        }
    }
    if (!(min_fraction >= 0.0 && min_fraction <= max_fraction && max_fraction < 1.0)) {
        throw ConfigError("cloud fraction range must satisfy 0 <= min <= max < 1");
    }
    if (!(edge_softness >= 0.0)) {
        throw ConfigError("edge softness must be >= 0");
    }
    if (max_retries < 1) {
        throw ConfigError("max_retries must be >= 1");
    }
}

namespace {

constexpr std::uint64_t kSceneStream = 0x53594e54;

std::vector<double> render_background(const SynthConfig& cfg, Terrain terrain, Rng& rng)
{
    const std::size_t plane = std::size_t{cfg.width} * cfg.height;
    std::vector<double> out(plane * 4);
    const double angle = rng.uniform(0.0, 2.0 * std::numbers::pi);
    const double dx = std::cos(angle);
    const double dy = std::sin(angle);
    const double span = std::abs(dx) * (cfg.width - 1) + std::abs(dy) * (cfg.height - 1);
    const double x0 = dx < 0 ? (cfg.width - 1) : 0.0;
    const double y0 = dy < 0 ? (cfg.height - 1) : 0.0;
    for (int b = 0; b < 4; ++b) {
        const BandRange r = cfg.background[b];
        double* dst = out.data() + plane * b;
        const double a = rng.uniform(r.lo, r.hi);
        const double c = rng.uniform(r.lo, r.hi);
        switch (terrain) {
        case Terrain::Flat:
            std::fill(dst, dst + plane, a);
            break;
        case Terrain::Gradient:
            for (std::uint32_t y = 0; y < cfg.height; ++y) {
                for (std::uint32_t x = 0; x < cfg.width; ++x) {
                    const double t = span > 0 ? ((x - x0) * dx + (y - y0) * dy) / span : 0.0;
                    dst[std::size_t{y} * cfg.width + x] = a + (c - a) * t;
                }
            }
            break;
        case Terrain::Speckle:
        case Terrain::Mixed: {
            const double amp = 0.25 * (r.hi - r.lo);
            for (std::size_t i = 0; i < plane; ++i) {
                dst[i] = std::clamp(a + rng.uniform(-amp, amp), r.lo, r.hi);
            }
            break;
        }
        }
    }
    return out;
}

struct Blob {
    double cx, cy, rx, ry, cos_t, sin_t;
    std::array<double, 4> color;
};

struct Attempt {
    SynthScene result;
    bool accepted = false;
};

Attempt render_attempt(const SynthConfig& cfg, std::uint64_t index, int attempt)
{
    Rng rng(derive_seed(derive_seed(cfg.seed, kSceneStream, index), static_cast<std::uint64_t>(attempt)));
    Terrain terrain = cfg.terrain;
    if (terrain == Terrain::Mixed) {
        terrain = static_cast<Terrain>(rng.below(3));
    }
    std::vector<double> image = render_background(cfg, terrain, rng);

    const auto n_blobs = static_cast<int>(rng.between(cfg.min_blobs, cfg.max_blobs));
    std::vector<Blob> blobs;
    for (int i = 0; i < n_blobs; ++i) {
        Blob b{};
        b.cx = rng.uniform(0.0, cfg.width);
        b.cy = rng.uniform(0.0, cfg.height);
        b.rx = rng.uniform(cfg.min_radius, cfg.max_radius);
        b.ry = rng.uniform(cfg.min_radius, cfg.max_radius);
        const double theta = rng.uniform(0.0, std::numbers::pi);
        b.cos_t = std::cos(theta);
        b.sin_t = std::sin(theta);
        const double level = rng.uniform();
        for (int band = 0; band < 4; ++band) {
            const BandRange r = cfg.cloud[band];
            const double u = std::clamp(level + rng.uniform(-0.05, 0.05), 0.0, 1.0);
            b.color[band] = r.lo + (r.hi - r.lo) * u;
        }
        blobs.push_back(b);
    }

    const std::size_t plane = std::size_t{cfg.width} * cfg.height;
    std::vector<double> alpha(plane, 0.0);
    std::vector<int> owner(plane, -1);
    for (int i = 0; i < n_blobs; ++i) {
        const Blob& b = blobs[i];
        const double reach = std::max(b.rx, b.ry) + cfg.edge_softness + 1.0;
        const auto x_lo = static_cast<std::int64_t>(std::max(0.0, std::floor(b.cx - reach)));
        const auto x_hi = static_cast<std::int64_t>(std::min<double>(cfg.width - 1, std::ceil(b.cx + reach)));
        const auto y_lo = static_cast<std::int64_t>(std::max(0.0, std::floor(b.cy - reach)));
        const auto y_hi = static_cast<std::int64_t>(std::min<double>(cfg.height - 1, std::ceil(b.cy + reach)));
        const double r_edge = std::min(b.rx, b.ry);
        for (std::int64_t y = y_lo; y <= y_hi; ++y) {
            for (std::int64_t x = x_lo; x <= x_hi; ++x) {
                const double px = x + 0.5 - b.cx;
                const double py = y + 0.5 - b.cy;
                const double u = (px * b.cos_t + py * b.sin_t) / b.rx;
                const double v = (-px * b.sin_t + py * b.cos_t) / b.ry;
                const double d = std::sqrt(u * u + v * v);
                double a;
                if (cfg.edge_softness > 0.0) {
                    a = std::clamp(0.5 - (d - 1.0) * r_edge / cfg.edge_softness, 0.0, 1.0);
                } else {
                    a = d <= 1.0 ? 1.0 : 0.0;
                }
                const std::size_t p = static_cast<std::size_t>(y) * cfg.width + static_cast<std::size_t>(x);
                if (a > alpha[p]) {
                    alpha[p] = a;
                    owner[p] = i;
                }
            }
        }
    }

    Attempt out;
    SynthScene& s = out.result;
    s.scene = RasterScene::zeros(cfg.width, cfg.height, 4, DType::U16,
                                 "synth seed=" + std::to_string(cfg.seed) + " index=" + std::to_string(index));
    s.mask = RasterScene::zeros(cfg.width, cfg.height, 1, DType::U8, "cloud-mask");
    auto samples = s.scene.as<std::uint16_t>();
    auto mask = s.mask.as<std::uint8_t>();
    std::size_t cloudy = 0;
    for (std::size_t p = 0; p < plane; ++p) {
        const double a = alpha[p];
        for (int band = 0; band < 4; ++band) {
            double v = image[plane * band + p];
            if (owner[p] >= 0) {
                v = (1.0 - a) * v + a * blobs[owner[p]].color[band];
            }
            samples[plane * band + p] = static_cast<std::uint16_t>(std::lround(v * 10000.0));
        }
        if (a >= 0.5) {
            mask[p] = 255;
            ++cloudy;
        }
    }
    s.cloud_fraction = static_cast<double>(cloudy) / static_cast<double>(plane);
    out.accepted = s.cloud_fraction >= cfg.min_fraction && s.cloud_fraction <= cfg.max_fraction;
    return out;
}

std::string numbered(const char* stem, std::size_t i)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, "%s_%04zu.msr", stem, i);
    return buf;
}

} // namespace

SynthScene generate_scene(const SynthConfig& cfg, std::uint64_t index)
{
    cfg.validate();
    for (int attempt = 0; attempt < cfg.max_retries; ++attempt) {
        Attempt a = render_attempt(cfg, index, attempt);
        if (a.accepted) {
            return std::move(a.result);
        }
    }
    char buf[160];
    std::snprintf(buf, sizeof buf, "scene %llu: no cloud fraction in [%g, %g] after %d attempts",
                  static_cast<unsigned long long>(index), cfg.min_fraction, cfg.max_fraction, cfg.max_retries);
    throw GenerationError(buf);
}

std::vector<ManifestEntry> generate_corpus(const SynthConfig& cfg, std::size_t n_scenes,
                                           const std::filesystem::path& out_dir, unsigned threads)
{
    cfg.validate();
    std::error_code ec;
    std::filesystem::create_directories(out_dir, ec);
    if (ec) {
        throw IoError("cannot create " + out_dir.string() + ": " + ec.message());
    }
    std::vector<ManifestEntry> entries(n_scenes);
    std::atomic<std::size_t> next{0};
    std::atomic<bool> failed{false};
    std::mutex error_mutex;
    std::exception_ptr error;
    std::size_t error_index = n_scenes;

    auto worker = [&] {
        while (!failed.load()) {
            const std::size_t i = next.fetch_add(1);
            if (i >= n_scenes) {
                return;
            }
            try {
                const SynthScene s = generate_scene(cfg, i);
                entries[i] = {numbered("scene", i), numbered("mask", i), s.cloud_fraction};
                write_msr(s.scene, out_dir / entries[i].scene_path);
                write_msr(s.mask, out_dir / entries[i].mask_path);
            } catch (...) {
                std::lock_guard lock(error_mutex);
                if (i < error_index) {
                    error_index = i;
                    error = std::current_exception();
                }
                failed.store(true);
            }
        }
    };
    const unsigned n_threads =
        std::max(1u, std::min<unsigned>(threads, static_cast<unsigned>(std::max<std::size_t>(n_scenes, 1))));
    if (n_threads == 1) {
        worker();
    } else {
        std::vector<std::thread> pool;
        for (unsigned t = 0; t < n_threads; ++t) {
            pool.emplace_back(worker);
        }
        for (auto& t : pool) {
            t.join();
        }
    }
    if (error) {
        std::rethrow_exception(error);
    }
    write_manifest(entries, out_dir / manifest_file_name());
    return entries;
}

} // namespace cloudseg
