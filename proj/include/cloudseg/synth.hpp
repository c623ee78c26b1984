#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cloudseg/dataset.hpp"
#include "cloudseg/raster_io.hpp"

namespace cloudseg {

enum class Terrain { Flat, Gradient, Speckle, Mixed };

std::string to_string(Terrain terrain);
Terrain parse_terrain(const std::string& name);

/// Reflectance interval in [0, 1].
struct BandRange {
    double lo = 0.0;
    double hi = 0.0;
};

struct SynthConfig {
    std::uint64_t seed = 0;
    std::uint32_t width = 64;
    std::uint32_t height = 64;
    int min_blobs = 1;
    int max_blobs = 4;
    double min_radius = 5.0;
    double max_radius = 18.0;
    // Band order R, G, B, NIR. Every cloud range sits above its background range.
    std::array<BandRange, 4> cloud{{{0.55, 0.85}, {0.55, 0.85}, {0.58, 0.90}, {0.50, 0.80}}};
    std::array<BandRange, 4> background{{{0.03, 0.25}, {0.04, 0.28}, {0.02, 0.22}, {0.10, 0.40}}};
    Terrain terrain = Terrain::Mixed;
    double min_fraction = 0.0;
    double max_fraction = 0.9;
    /// Width in pixels of the alpha ramp across a blob border.
    double edge_softness = 2.0;
    int max_retries = 64;

    /// Throws ConfigError on the first violated constraint.
    void validate() const;
};

struct SynthScene {
    RasterScene scene; // 4-band u16, reflectance * 10000
    RasterScene mask;  // 1-band u8 {0, 255}
    double cloud_fraction = 0.0;
};

/// Deterministic in (cfg.seed, index) alone.
SynthScene generate_scene(const SynthConfig& cfg, std::uint64_t index);

/// Writes scene_NNNN.msr / mask_NNNN.msr and manifest.csv into `out_dir`.
std::vector<ManifestEntry> generate_corpus(const SynthConfig& cfg, std::size_t n_scenes,
                                           const std::filesystem::path& out_dir, unsigned threads = 1);

} // namespace cloudseg
