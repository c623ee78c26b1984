#include <CLI11.hpp>

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <optional>
#include <regex>
#include <string>

#include "cloudseg/architecture.hpp"
#include "cloudseg/dataset.hpp"
#include "cloudseg/errors.hpp"
#include "cloudseg/metrics.hpp"
#include "cloudseg/network.hpp"
#include "cloudseg/segmenter.hpp"
#include "cloudseg/synth.hpp"
#include "cloudseg/trainer.hpp"
#include "cloudseg/weights_io.hpp"

namespace fs = std::filesystem;
using namespace cloudseg;

namespace {

constexpr const char* kDefaultsFooter =
    "Defaults: window 512, overlap 50, threshold 0.5; training learning_rate 0.003, beta1 0.9, beta2 0.999, "
    "batch_size 8, epochs 300.";

std::pair<std::uint32_t, std::uint32_t> parse_size(const std::string& text)
{
    static const std::regex pattern(R"((\d{1,9})x(\d{1,9}))");
    std::smatch m;
    if (!std::regex_match(text, m, pattern)) {
        throw ValidationError("--size: expected WxH, got '" + text + "'");
    }
    const auto w = static_cast<std::uint32_t>(std::stoul(m[1]));
    const auto h = static_cast<std::uint32_t>(std::stoul(m[2]));
    if (w == 0 || h == 0) {
        throw ValidationError("--size: width and height must be positive, got '" + text + "'");
    }
    return {w, h};
}

std::string resolve_arch(const std::string& flag, const fs::path& weights)
{
    if (!flag.empty()) {
        return flag;
    }
    if (fs::exists(meta_path(weights))) {
        const auto meta = read_checkpoint_meta(weights);
        if (!meta.arch.empty()) {
            return meta.arch;
        }
    }
    return "builtin:default";
}

Network<float> load_network(const std::string& arch, const fs::path& weights)
{
    auto net = Network<float>::build(load_architecture(arch), 0);
    net.import_weights(read_cpw(weights));
    net.set_mode(Mode::Inference);
    return net;
}

struct Options {
    unsigned threads = 1;

    std::uint64_t synth_seed = 0;
    std::size_t synth_scenes = 0;
    std::string synth_size = "64x64";
    std::string synth_out;
    std::string synth_terrain = "mixed";
    int min_blobs = 1;
    int max_blobs = 4;

    std::string patch_data;
    std::string patch_out;
    std::uint32_t patch_size = 512;
    std::uint32_t patch_overlap = 0;

    std::string aug_data;
    std::string aug_out;

    std::string train_config;

    std::string eval_weights;
    std::string eval_data;
    std::string eval_split = "test";
    std::string eval_report;
    std::string eval_arch;
    std::optional<std::uint64_t> eval_seed;
    double eval_threshold = 0.5;

    std::string seg_weights;
    std::string seg_scene;
    std::string seg_out;
    std::string seg_prob;
    std::string seg_arch;
    std::uint32_t seg_window = 512;
    std::uint32_t seg_overlap = 50;
    double seg_threshold = 0.5;
};

int cmd_synth(const Options& o)
{
    const auto [w, h] = parse_size(o.synth_size);
    SynthConfig cfg;
    cfg.seed = o.synth_seed;
    cfg.width = w;
    cfg.height = h;
    cfg.terrain = parse_terrain(o.synth_terrain);
    cfg.min_blobs = o.min_blobs;
    cfg.max_blobs = o.max_blobs;
    const double scale = std::min(w, h) / 64.0;
    cfg.min_radius *= scale;
    cfg.max_radius *= scale;
    cfg.edge_softness = std::max(1.0, cfg.edge_softness * scale);
    const auto entries = generate_corpus(cfg, o.synth_scenes, o.synth_out, o.threads);
    std::cerr << "wrote " << entries.size() << " scene/mask pairs to " << o.synth_out << "\n";
    return 0;
}

int cmd_patchify(const Options& o)
{
    const fs::path in_dir = o.patch_data;
    const fs::path out_dir = o.patch_out;
    if (o.patch_size == 0) {
        throw ValidationError("--size must be positive");
    }
    fs::create_directories(out_dir);
    std::vector<ManifestEntry> out;
    for (const auto& e : read_manifest(in_dir / manifest_file_name())) {
        const RasterScene scene = read_msr(in_dir / e.scene_path);
        const RasterScene mask = read_msr(in_dir / e.mask_path);
        if (scene.width != mask.width || scene.height != mask.height) {
            throw ShapeError(e.scene_path + ": scene and mask sizes differ");
        }
        const WindowPlan plan = plan_windows(scene.width, scene.height, o.patch_size, o.patch_overlap);
        const std::string stem = fs::path(e.scene_path).stem().string();
        for (const auto& [x, y] : plan.offsets) {
            const std::string suffix = "_" + std::to_string(x) + "_" + std::to_string(y) + ".msr";
            const RasterScene m = crop_scene(mask, x, y, o.patch_size, o.patch_size);
            ManifestEntry pe{stem + suffix, stem + "_mask" + suffix, cloud_fraction(m)};
            write_msr(crop_scene(scene, x, y, o.patch_size, o.patch_size), out_dir / pe.scene_path);
            write_msr(m, out_dir / pe.mask_path);
            out.push_back(pe);
        }
    }
    write_manifest(out, out_dir / manifest_file_name());
    std::cerr << "wrote " << out.size() << " patches to " << out_dir.string() << "\n";
    return 0;
}

int cmd_augment(const Options& o)
{
    const fs::path in_dir = o.aug_data;
    const fs::path out_dir = o.aug_out;
    fs::create_directories(out_dir);
    std::vector<ManifestEntry> out;
    for (const auto& e : read_manifest(in_dir / manifest_file_name())) {
        const RasterScene scene = read_msr(in_dir / e.scene_path);
        const RasterScene mask = read_msr(in_dir / e.mask_path);
        if (scene.width != scene.height || mask.width != scene.width || mask.height != scene.height) {
            throw ShapeError(e.scene_path + ": augmentation needs square patches with aligned masks");
        }
        const std::string stem = fs::path(e.scene_path).stem().string();
        for (int k = 0; k < static_cast<int>(kAugmentations); ++k) {
            const std::string suffix = "_a" + std::to_string(k) + ".msr";
            ManifestEntry ae{stem + suffix, stem + "_mask" + suffix, e.cloud_fraction};
            write_msr(augment_raster(scene, k), out_dir / ae.scene_path);
            write_msr(augment_raster(mask, k), out_dir / ae.mask_path);
            out.push_back(ae);
        }
    }
    write_manifest(out, out_dir / manifest_file_name());
    std::cerr << "wrote " << out.size() << " augmented pairs to " << out_dir.string() << "\n";
    return 0;
}

int cmd_train(const Options& o)
{
    const TrainConfig cfg = load_train_config(o.train_config);
    const auto& opt = cfg.optimizer;
    std::printf("train: learning_rate=%g beta1=%g beta2=%g epsilon=%g batch_size=%d epochs=%d seed=%llu augment=%s\n",
                opt.learning_rate, opt.beta1, opt.beta2, opt.epsilon, opt.batch_size, opt.epochs,
                static_cast<unsigned long long>(cfg.seed), cfg.augment ? "true" : "false");
    auto net = Network<float>::build(load_architecture(cfg.arch_config_path), cfg.seed);
    std::printf("architecture %s: %lld trainable parameters\n", cfg.arch_config_path.c_str(),
                static_cast<long long>(net.count_params()));
    const auto corpus = load_corpus(cfg.data_dir);
    if (corpus.empty()) {
        throw ValidationError("data directory " + cfg.data_dir + " holds no patches");
    }
    const TrainData data = prepare_data(corpus, cfg.seed, cfg.augment);
    std::printf("split: %zu train / %zu validation / %zu test patches\n", data.train.size(), data.validation.size(),
                data.test.size());
    std::fflush(stdout);
    const auto history = train(net, data, cfg, cfg.out_dir, [](const EpochRecord& r) {
        std::printf("epoch %d: train_loss=%.5f train_acc=%.4f val_loss=%.5f val_acc=%.4f\n", r.epoch, r.train_loss,
                    r.train_acc, r.val_loss, r.val_acc);
        std::fflush(stdout);
    });
    if (!history.epochs.empty()) {
        std::printf("final validation accuracy: %.4f (best %.4f at epoch %d)\n", history.epochs.back().val_acc,
                    history.best_val_acc, history.best_epoch);
    }
    return 0;
}

int cmd_eval(const Options& o)
{
    const fs::path weights = o.eval_weights;
    const std::string arch = resolve_arch(o.eval_arch, weights);
    std::uint64_t seed = 0;
    bool augment = false;
    if (fs::exists(meta_path(weights))) {
        const auto meta = read_checkpoint_meta(weights);
        seed = meta.seed;
        augment = meta.augment;
    }
    if (o.eval_seed) {
        seed = *o.eval_seed;
    }
    const auto net = load_network(arch, weights);
    const auto corpus = load_corpus(o.eval_data);
    const TrainData data = prepare_data(corpus, seed, augment);
    const auto& patches = o.eval_split == "val" ? data.validation : data.test;
    const MetricsRow row = evaluate_split(net, patches, o.eval_threshold);
    if (o.eval_report.empty()) {
        std::cout << format_report({row});
    } else {
        emit_report({row}, o.eval_report);
        std::cerr << "wrote " << o.eval_report << "\n";
    }
    if (!row.acc || !row.prec || !row.sn || !row.sp) {
        std::cerr << "error: some metrics are undefined on this split\n";
        return 2;
    }
    return 0;
}

int cmd_segment(const Options& o)
{
    if (o.seg_overlap >= o.seg_window) {
        throw ValidationError("--overlap " + std::to_string(o.seg_overlap) + " must be smaller than --window "
                              + std::to_string(o.seg_window));
    }
    const fs::path weights = o.seg_weights;
    const RasterScene scene = read_msr(o.seg_scene);
    if (scene.bands != 4) {
        throw ConfigError("--scene has " + std::to_string(scene.bands) + " bands; 4 are required");
    }
    const auto net = load_network(resolve_arch(o.seg_arch, weights), weights);
    const WindowPlan plan = plan_windows(scene.width, scene.height, o.seg_window, o.seg_overlap);
    std::cerr << "windows: " << plan.x_offsets.size() << " x " << plan.y_offsets.size() << " = "
              << plan.offsets.size() << "\n";
    SegmentOptions opts;
    opts.window = o.seg_window;
    opts.overlap = o.seg_overlap;
    opts.threshold = o.seg_threshold;
    opts.threads = o.threads;
    const SegmentResult result = segment_scene(scene, net, opts);
    write_msr(result.mask, o.seg_out);
    if (!o.seg_prob.empty()) {
        write_msr(canvas_to_raster(result.canvas), o.seg_prob);
    }
    std::cerr << "cloud fraction " << cloud_fraction(result.mask) << ", mask written to " << o.seg_out << "\n";
    return 0;
}

} // namespace

int main(int argc, char** argv)
{
    CLI::App app{"Cloud segmentation toolkit for 4-band (R, G, B, NIR) satellite scenes"};
    app.footer(kDefaultsFooter);
    app.require_subcommand(1);
    Options o;
    app.add_option("--threads", o.threads, "Worker thread cap; results are identical for any value")
        ->capture_default_str()
        ->check(CLI::PositiveNumber);

    auto* synth = app.add_subcommand("synth", "Generate a synthetic scene/mask corpus with a manifest");
    synth->footer(kDefaultsFooter);
    synth->add_option("--seed", o.synth_seed, "Generator seed")->capture_default_str();
    synth->add_option("--scenes", o.synth_scenes, "Number of scenes")->required();
    synth->add_option("--size", o.synth_size, "Scene size WxH")->capture_default_str();
    synth->add_option("--out", o.synth_out, "Output directory")->required();
    synth->add_option("--terrain", o.synth_terrain, "flat, gradient, speckle or mixed")->capture_default_str();
    synth->add_option("--min-blobs", o.min_blobs, "Minimum clouds per scene")->capture_default_str();
    synth->add_option("--max-blobs", o.max_blobs, "Maximum clouds per scene")->capture_default_str();

    auto* patchify = app.add_subcommand("patchify", "Cut every manifest scene into square patches");
    patchify->footer(kDefaultsFooter);
    patchify->add_option("--data", o.patch_data, "Directory with manifest.csv")->required();
    patchify->add_option("--out", o.patch_out, "Output directory")->required();
    patchify->add_option("--size", o.patch_size, "Patch side in pixels")->capture_default_str();
    patchify->add_option("--overlap", o.patch_overlap, "Overlap between neighbouring patches")->capture_default_str();

    auto* augment = app.add_subcommand("augment", "Write the 8 rotation/flip variants of every manifest patch");
    augment->footer(kDefaultsFooter);
    augment->add_option("--data", o.aug_data, "Directory with manifest.csv")->required();
    augment->add_option("--out", o.aug_out, "Output directory")->required();

    auto* train_cmd = app.add_subcommand("train", "Train a network from a key = value config file");
    train_cmd->footer(
        "Config keys: arch_config_path, data_dir (required); learning_rate (0.003), beta1 (0.9), beta2 (0.999), "
        "epsilon (1e-8), batch_size (8), epochs (300), seed (0), checkpoint_every (10), out_dir (run), augment "
        "(true).\nSegmentation defaults: window 512, overlap 50, threshold 0.5.");
    train_cmd->add_option("--config", o.train_config, "Training config file")->required();

    auto* eval = app.add_subcommand("eval", "Evaluate weights on the validation or test split");
    eval->footer(kDefaultsFooter);
    eval->add_option("--weights", o.eval_weights, "CPW1 weights file")->required();
    eval->add_option("--data", o.eval_data, "Corpus directory with manifest.csv")->required();
    eval->add_option("--split", o.eval_split, "val or test")
        ->capture_default_str()
        ->check(CLI::IsMember({"val", "test"}));
    eval->add_option("--report", o.eval_report, "CSV report path (stdout when omitted)");
    eval->add_option("--arch", o.eval_arch, "Architecture file or builtin:default / builtin:tiny (default: from .meta)");
    eval->add_option("--seed", o.eval_seed, "Split seed (default: from .meta)");
    eval->add_option("--threshold", o.eval_threshold, "Cloud probability threshold")->capture_default_str();

    auto* segment = app.add_subcommand("segment", "Cloud-mask a whole scene with a sliding window");
    segment->footer(kDefaultsFooter);
    segment->add_option("--weights", o.seg_weights, "CPW1 weights file")->required();
    segment->add_option("--scene", o.seg_scene, "4-band MSR1 scene")->required();
    segment->add_option("--out", o.seg_out, "Output mask (MSR1, u8 {0,255})")->required();
    segment->add_option("--window", o.seg_window, "Window side in pixels")->capture_default_str();
    segment->add_option("--overlap", o.seg_overlap, "Overlap between windows in pixels")->capture_default_str();
    segment->add_option("--threshold", o.seg_threshold, "Cloud probability threshold")->capture_default_str();
    segment->add_option("--prob", o.seg_prob, "Also write the f32 probability canvas here");
    segment->add_option("--arch", o.seg_arch,
                        "Architecture file or builtin:default / builtin:tiny (default: from .meta)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? 0 : 1;
    }

    try {
        if (synth->parsed()) {
            return cmd_synth(o);
        }
        if (patchify->parsed()) {
            return cmd_patchify(o);
        }
        if (augment->parsed()) {
            return cmd_augment(o);
        }
        if (train_cmd->parsed()) {
            return cmd_train(o);
        }
        if (eval->parsed()) {
            return cmd_eval(o);
        }
        if (segment->parsed()) {
            return cmd_segment(o);
        }
    } catch (const ValidationError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
    return 1;
}
