#include "cloudseg/architecture.hpp"

#include <algorithm>
#include <charconv>
#include <fstream>
#include <map>
#include <sstream>

#include "cloudseg/errors.hpp"
#include "builtin_configs.hpp"

namespace cloudseg {

namespace {

struct KindName {
    BlockKind kind;
    std::string_view name;
};

constexpr KindName kKinds[] = {
    {BlockKind::Conv, "conv"},         {BlockKind::Iru, "iru"},
    {BlockKind::Asc, "asc"},           {BlockKind::Aspp, "aspp"},
    {BlockKind::Upsample, "upsample"}, {BlockKind::ConcatSkip, "concat-skip"},
    {BlockKind::Head, "head"},
};

int parse_int(std::string_view token, int line, std::string_view field)
{
    int value = 0;
    const auto* end = token.data() + token.size();
    auto [ptr, ec] = std::from_chars(token.data(), end, value);
    if (ec != std::errc() || ptr != end) {
        throw ConfigError("line " + std::to_string(line) + ": " + std::string(field) + " '" + std::string(token)
                          + "' is not an integer");
    }
    return value;
}

std::string block_label(std::size_t index, const BlockSpec& spec)
{
    return "block " + std::to_string(index) + " (" + std::string(to_string(spec.kind)) + ")";
}

} // namespace

std::string_view to_string(BlockKind kind)
{
    for (const auto& k : kKinds) {
        if (k.kind == kind) {
            return k.name;
        }
    }
    return "unknown";
}

ArchitectureSummary validate_architecture(const ArchitectureConfig& config)
{
    if (config.input_channels != 4) {
        throw ConfigError("input_channels must be 4 (R, G, B, NIR), got " + std::to_string(config.input_channels));
    }
    if (config.blocks.empty()) {
        throw ConfigError("architecture has no blocks");
    }
    struct TapInfo {
        int channels;
        int scale;
    };
    std::map<std::string, TapInfo> taps;
    int channels = config.input_channels;
    int scale = 1;
    int max_scale = 1;
    bool has_head = false;
    for (std::size_t i = 0; i < config.blocks.size(); ++i) {
        const BlockSpec& b = config.blocks[i];
        const std::string label = block_label(i, b);
        if (has_head && b.kind != BlockKind::Upsample) {
            throw ConfigError(label + ": only upsample blocks may follow the head");
        }
        const bool strided = b.kind == BlockKind::Conv || b.kind == BlockKind::Iru || b.kind == BlockKind::Asc;
        if (b.kind != BlockKind::Upsample) {
            if (b.filters < 1) {
                throw ConfigError(label + ": filters must be >= 1");
            }
            if (strided ? (b.stride != 1 && b.stride != 2) : b.stride != 1) {
                throw ConfigError(label + ": stride " + std::to_string(b.stride) + " not allowed");
            }
            if (b.dilation < 1) {
                throw ConfigError(label + ": dilation must be >= 1");
            }
        }
        if (b.expansion < 1) {
            throw ConfigError(label + ": expansion must be >= 1");
        }
        if (b.kind == BlockKind::Conv && (b.kernel < 1 || b.kernel % 2 == 0)) {
            throw ConfigError(label + ": kernel size must be odd and positive");
        }
        if (!b.skip.empty() && b.kind != BlockKind::ConcatSkip) {
            throw ConfigError(label + ": skip= is only valid on concat-skip");
        }
        switch (b.kind) {
        case BlockKind::Conv:
        case BlockKind::Iru:
        case BlockKind::Asc:
            channels = b.filters;
            scale *= b.stride;
            break;
        case BlockKind::Aspp:
            if (b.rates.empty()) {
                throw ConfigError(label + ": empty ASPP rate list");
            }
            for (int r : b.rates) {
                if (r < 1) {
                    throw ConfigError(label + ": ASPP rates must be >= 1");
                }
            }
            channels = b.filters;
            break;
        case BlockKind::Upsample:
            if (b.filters != 0) {
                throw ConfigError(label + ": filters column must be 0 (channels pass through)");
            }
            if (b.stride < 1 || scale % b.stride != 0) {
                throw ConfigError(label + ": factor " + std::to_string(b.stride) + " does not divide current stride "
                                  + std::to_string(scale));
            }
            scale /= b.stride;
            break;
        case BlockKind::ConcatSkip: {
            auto it = taps.find(b.skip);
            if (b.skip.empty() || it == taps.end()) {
                throw ConfigError(label + ": skip tap '" + b.skip + "' is not defined by an earlier block");
            }
            if (it->second.scale != scale) {
                throw ConfigError(label + ": skip tap '" + b.skip + "' is at stride " + std::to_string(it->second.scale)
                                  + " but the current stride is " + std::to_string(scale));
            }
            channels += b.filters;
            break;
        }
        case BlockKind::Head:
            if (b.filters != 1) {
                throw ConfigError(label + ": head must have exactly 1 filter");
            }
            channels = 1;
            has_head = true;
            break;
        }
        max_scale = std::max(max_scale, scale);
        if (!b.tap.empty()) {
            if (!taps.emplace(b.tap, TapInfo{channels, scale}).second) {
                throw ConfigError(label + ": tap '" + b.tap + "' defined twice");
            }
        }
    }
    if (!has_head) {
        throw ConfigError("architecture has no head block");
    }
    if (scale != 1) {
        throw ConfigError("output is at stride " + std::to_string(scale) + "; it must return to input resolution");
    }
    return {channels, max_scale};
}

ArchitectureConfig parse_architecture(std::string_view text)
{
    ArchitectureConfig config;
    std::istringstream in{std::string(text)};
    std::string raw;
    int line = 0;
    while (std::getline(in, raw)) {
        ++line;
        if (auto hash = raw.find('#'); hash != std::string::npos) {
            raw.erase(hash);
        }
        std::istringstream fields(raw);
        std::vector<std::string> tokens;
        for (std::string t; fields >> t;) {
            tokens.push_back(t);
        }
        if (tokens.empty()) {
            continue;
        }
        const std::string where = "line " + std::to_string(line);
        if (tokens.size() < 5) {
            throw ConfigError(where + ": expected `kind filters stride dilation expansion`, got "
                              + std::to_string(tokens.size()) + " fields");
        }
        BlockSpec spec;
        bool known = false;
        for (const auto& k : kKinds) {
            if (tokens[0] == k.name) {
                spec.kind = k.kind;
                known = true;
            }
        }
        if (!known) {
            throw ConfigError(where + ": unknown block kind '" + tokens[0] + "'");
        }
        spec.filters = parse_int(tokens[1], line, "filters");
        spec.stride = parse_int(tokens[2], line, "stride");
        if (spec.kind == BlockKind::Aspp) {
            std::string_view rest = tokens[3];
            while (true) {
                const auto comma = rest.find(',');
                spec.rates.push_back(parse_int(rest.substr(0, comma), line, "rate"));
                if (comma == std::string_view::npos) {
                    break;
                }
                rest.remove_prefix(comma + 1);
            }
            spec.dilation = 1;
        } else {
            spec.dilation = parse_int(tokens[3], line, "dilation");
        }
        spec.expansion = parse_int(tokens[4], line, "expansion");
        for (std::size_t t = 5; t < tokens.size(); ++t) {
            const auto eq = tokens[t].find('=');
            if (eq == std::string::npos || eq == 0 || eq + 1 == tokens[t].size()) {
                throw ConfigError(where + ": malformed option '" + tokens[t] + "'");
            }
            const std::string key = tokens[t].substr(0, eq);
            const std::string value = tokens[t].substr(eq + 1);
            if (key == "tap") {
                spec.tap = value;
            } else if (key == "skip") {
                spec.skip = value;
            } else if (key == "k") {
                spec.kernel = parse_int(value, line, "k");
            } else {
                throw ConfigError(where + ": unknown option '" + key + "'");
            }
        }
        config.blocks.push_back(std::move(spec));
    }
    validate_architecture(config);
    return config;
}

std::string format_architecture(const ArchitectureConfig& config)
{
    std::ostringstream out;
    for (const auto& b : config.blocks) {
        out << to_string(b.kind) << ' ' << b.filters << ' ' << b.stride << ' ';
        if (b.kind == BlockKind::Aspp) {
            for (std::size_t i = 0; i < b.rates.size(); ++i) {
                out << (i ? "," : "") << b.rates[i];
            }
        } else {
            out << b.dilation;
        }
        out << ' ' << b.expansion;
        if (!b.tap.empty()) {
            out << " tap=" << b.tap;
        }
        if (!b.skip.empty()) {
            out << " skip=" << b.skip;
        }
        if (b.kind == BlockKind::Conv && b.kernel != 3) {
            out << " k=" << b.kernel;
        }
        out << '\n';
    }
    return out.str();
}

std::string_view default_architecture_text() { return builtin::kDefaultArch; }

std::string_view tiny_architecture_text() { return builtin::kTinyArch; }

ArchitectureConfig default_architecture() { return parse_architecture(default_architecture_text()); }

ArchitectureConfig tiny_architecture() { return parse_architecture(tiny_architecture_text()); }

ArchitectureConfig load_architecture(const std::string& source)
{
    if (source == "builtin:default") {
        return default_architecture();
    }
    if (source == "builtin:tiny") {
        return tiny_architecture();
    }
    std::ifstream in(source);
    if (!in) {
        throw ConfigError("cannot open architecture file " + source);
    }
    std::stringstream buffer;
    buffer << in.rdbuf();
    try {
        return parse_architecture(buffer.str());
    } catch (const ConfigError& e) {
        throw ConfigError(source + ": " + e.what());
    }
}

} // namespace cloudseg
