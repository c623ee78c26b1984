#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <string>
#include <vector>

#include "cloudseg/raster_io.hpp"
#include "cloudseg/tensor.hpp"

namespace cloudseg {

/// Normalized 4-band image (1,4,h,w) with its 0/1 cloud mask (1,1,h,w).
struct LabeledPatch {
    Tensor image;
    Tensor mask;
};

LabeledPatch make_labeled_patch(const RasterScene& scene, const RasterScene& mask);

/// One line of a corpus manifest: `scene_path,mask_path,cloud_fraction`.
/// Paths are stored relative to the manifest's directory.
struct ManifestEntry {
    std::string scene_path;
    std::string mask_path;
    double cloud_fraction = 0.0;
};

std::string manifest_file_name();
void write_manifest(const std::vector<ManifestEntry>& entries, const std::filesystem::path& path);
std::vector<ManifestEntry> read_manifest(const std::filesystem::path& path);

/// Loads every scene/mask pair listed in `dir/manifest.csv`.
std::vector<LabeledPatch> load_corpus(const std::filesystem::path& dir);

/// Counter-clockwise quarter turn of every plane, origin top-left:
/// out(i, j) = in(j, w - 1 - i).
Tensor rotate90(const Tensor& t);
/// Mirror across the vertical axis: out(i, j) = in(i, w - 1 - j).
Tensor hflip(const Tensor& t);

/// The eight variants in a fixed order: rotations by 0, 90, 180, 270 degrees,
/// then the horizontal flip of each. Variant 0 is the input itself.
std::array<LabeledPatch, 8> augment_patch(const LabeledPatch& patch);

/// Variant `k` (0..7) of augment_patch without materializing the others.
LabeledPatch augment_variant(const LabeledPatch& patch, int k);

inline constexpr std::size_t kAugmentations = 8;

/// Same variant numbering applied to a raw raster of any dtype (every band).
RasterScene augment_raster(const RasterScene& scene, int k);

struct DatasetSplit {
    std::vector<std::size_t> train;
    std::vector<std::size_t> validation;
    std::vector<std::size_t> test;
    std::array<double, 3> ratios{0.90, 0.05, 0.05};
    std::uint64_t seed = 0;
};

/// Seeded shuffle of source ids 0..n-1 followed by a contiguous cut.
/// Validation and test sizes are round(ratio * n); train takes the rest.
DatasetSplit split_dataset(std::size_t n_sources, std::array<double, 3> ratios, std::uint64_t seed);

/// Expands source ids to augmented ids (source * 8 + variant) so every
/// variant of a source lands in the split its source belongs to.
std::vector<std::size_t> expand_augmented(const std::vector<std::size_t>& sources);

} // namespace cloudseg
