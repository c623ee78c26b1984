#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

namespace cloudseg {

enum class BlockKind { Conv, Iru, Asc, Aspp, Upsample, ConcatSkip, Head };

std::string_view to_string(BlockKind kind);

/// One line of an architecture file.
///
/// conv         k x k convolution (default k = 3), BN, ReLU
/// iru          inverted residual: 1x1 expand (omitted when expansion = 1),
///              3x3 depthwise, 1x1 project; shortcut iff stride 1 and
///              in-channels = filters
/// asc          dilated 3x3 depthwise + BN + ReLU, 1x1 pointwise + BN + ReLU
/// aspp         1x1 branch, one asc branch per rate, pooled branch, all
///              `filters` wide; concatenated and fused by 1x1 conv + BN + ReLU
/// upsample     bilinear by the factor in the stride column
/// concat-skip  1x1 conv + BN + ReLU on the named tap, concatenated after
///              the current tensor
/// head         1x1 conv with bias, sigmoid
struct BlockSpec {
    BlockKind kind = BlockKind::Conv;
    int filters = 1;
    int stride = 1;
    int dilation = 1;
    int expansion = 1;
    int kernel = 3;
    std::vector<int> rates; // aspp only
    std::string tap;        // name under which this block's output is kept
    std::string skip;       // concat-skip source tap

    bool operator==(const BlockSpec&) const = default;
};

struct ArchitectureConfig {
    int input_channels = 4;
    std::vector<BlockSpec> blocks;

    bool operator==(const ArchitectureConfig&) const = default;
};

struct ArchitectureSummary {
    int output_channels = 0;
    /// Largest cumulative downsampling factor; input sides must be multiples of it.
    int required_multiple = 1;
};

/// Checks every structural rule (channel flow, tap references, resolution
/// bookkeeping, single-channel full-resolution output). Throws ConfigError
/// naming the offending block index.
ArchitectureSummary validate_architecture(const ArchitectureConfig& config);

/// Line format: `kind filters stride dilation expansion [tap=NAME] [skip=NAME] [k=N]`.
/// For aspp the dilation column is a comma-separated rate list. `#` starts a
/// comment. Throws ConfigError with the line number.
ArchitectureConfig parse_architecture(std::string_view text);

std::string format_architecture(const ArchitectureConfig& config);

/// Accepts a file path or `builtin:default` / `builtin:tiny`.
ArchitectureConfig load_architecture(const std::string& source);

/// Text of the shipped configs (identical to configs/*.arch).
std::string_view default_architecture_text();
std::string_view tiny_architecture_text();

ArchitectureConfig default_architecture();
ArchitectureConfig tiny_architecture();

} // namespace cloudseg
