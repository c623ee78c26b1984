#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numeric>
#include <set>
#include <sstream>
#include <string>
#include <type_traits>
#include <variant>
#include <vector>

#include "cloudseg/architecture.hpp"
#include "cloudseg/dataset.hpp"
#include "cloudseg/metrics.hpp"
#include "cloudseg/network.hpp"
#include "cloudseg/raster_io.hpp"
#include "cloudseg/rng.hpp"
#include "cloudseg/segmenter.hpp"
#include "cloudseg/synth.hpp"
#include "cloudseg/trainer.hpp"
#include "cloudseg/weights_io.hpp"
#include "netcheck.hpp"
#include "primitives.hpp"

using namespace cloudseg;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start)
{
    return std::chrono::duration<double>(Clock::now() - start).count();
}

// Collects failed expectations for one criterion.
struct Verdict {
    std::vector<std::string> failures;
    std::string detail;

    void expect(bool ok, const std::string& what)
    {
        if (!ok) {
            failures.push_back(what);
        }
    }
};

fs::path scratch(const std::string& name)
{
    auto dir = fs::temp_directory_path() / "cloudseg_acceptance" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::string slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

std::string fmt(const char* f, double v)
{
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

BlockSpec spec(BlockKind kind, int filters, int stride = 1, int dilation = 1, int expansion = 1)
{
    BlockSpec s;
    s.kind = kind;
    s.filters = filters;
    s.stride = stride;
    s.dilation = dilation;
    s.expansion = expansion;
    return s;
}

std::int64_t block_params(const BlockSpec& s, std::int64_t in, std::int64_t skip = 0)
{
    ParameterRegistry<float> reg(1);
    auto block = make_block<float>(s, in, skip, reg, "x");
    std::int64_t total = 0;
    for (const auto& e : reg.entries()) {
        if (e.trainable) {
            total += e.var.value().size();
        }
    }
    return total;
}

Tensor random_tensor(Shape s, Rng& rng)
{
    Tensor t(s);
    for (auto& v : t.values()) {
        v = static_cast<float>(rng.normal());
    }
    return t;
}

bool bit_equal(const Tensor& a, const Tensor& b)
{
    if (!(a.shape() == b.shape())) {
        return false;
    }
    const auto x = a.values();
    const auto y = b.values();
    return std::equal(x.begin(), x.end(), y.begin(), y.end(),
                      [](float p, float q) { return std::memcmp(&p, &q, sizeof p) == 0; });
}

RasterScene random_raster(Rng& rng)
{
    const auto dtype = static_cast<DType>(rng.below(3));
    const auto w = static_cast<std::uint32_t>(rng.between(1, 40));
    const auto h = static_cast<std::uint32_t>(rng.between(1, 40));
    const auto bands = static_cast<std::uint16_t>(rng.between(1, 6));
    std::string tag(rng.below(20), 'a');
    for (auto& ch : tag) {
        ch = static_cast<char>('a' + rng.below(26));
    }
    auto s = RasterScene::zeros(w, h, bands, dtype, tag);
    std::visit(
        [&](auto& vec) {
            using S = typename std::decay_t<decltype(vec)>::value_type;
            for (auto& v : vec) {
                if constexpr (std::is_same_v<S, float>) {
                    v = static_cast<float>(rng.normal());
                } else {
                    v = static_cast<S>(rng.below(std::uint64_t{std::numeric_limits<S>::max()} + 1));
                }
            }
        },
        s.samples);
    return s;
}

std::vector<NamedArray> random_arrays(Rng& rng)
{
    std::vector<NamedArray> arrays(rng.below(6));
    for (std::size_t i = 0; i < arrays.size(); ++i) {
        auto& a = arrays[i];
        a.name = "t" + std::to_string(i) + "." + std::string(rng.below(12), 'w');
        a.dims.resize(rng.between(1, 4));
        std::size_t n = 1;
        for (auto& d : a.dims) {
            d = static_cast<std::uint32_t>(rng.between(1, 5));
            n *= d;
        }
        a.data.resize(n);
        for (auto& v : a.data) {
            v = static_cast<float>(rng.normal());
        }
    }
    return arrays;
}

std::vector<LabeledPatch> synthetic_patches(std::size_t n, std::uint64_t seed, std::uint32_t size)
{
    SynthConfig cfg;
    cfg.seed = seed;
    cfg.width = size;
    cfg.height = size;
    cfg.min_radius = std::max(2.0, size * 5.0 / 64.0);
    cfg.max_radius = std::max(cfg.min_radius + 1.0, size * 18.0 / 64.0);
    std::vector<LabeledPatch> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        const auto s = generate_scene(cfg, i);
        out.push_back(make_labeled_patch(s.scene, s.mask));
    }
    return out;
}

RasterScene random_scene(std::uint32_t w, std::uint32_t h, std::uint64_t seed)
{
    Rng rng(seed);
    auto s = RasterScene::zeros(w, h, 4, DType::U16);
    for (auto& v : s.as<std::uint16_t>()) {
        v = static_cast<std::uint16_t>(rng.below(10000));
    }
    return s;
}

// Position- and content-dependent probabilities so overlapping windows disagree.
std::vector<float> fake_predict(const Patch& p)
{
    std::vector<float> out(std::size_t{p.size} * p.size);
    const auto nir = p.pixels.plane(0, 3);
    for (std::size_t i = 0; i < out.size(); ++i) {
        const float bias = static_cast<float>((p.origin_x * 7 + p.origin_y * 13) % 17) / 40.0f;
        out[i] = std::min(1.0f, 0.5f * nir[i] + bias);
    }
    return out;
}

Verdict gradient_fidelity()
{
    Verdict v;
    const auto start = Clock::now();
    double worst_f = 0.0, worst_d = 0.0;
    for (const auto& s : testing::sweep_primitives(20, 0x5eed)) {
        v.expect(s.instances >= 20, s.name + " ran fewer than 20 instances");
        v.expect(s.worst_float < 1e-3, s.name + " float error " + fmt("%.3g", s.worst_float));
        v.expect(s.worst_double < 1e-5, s.name + " double error " + fmt("%.3g", s.worst_double));
        worst_f = std::max(worst_f, s.worst_float);
        worst_d = std::max(worst_d, s.worst_double);
    }
    const auto tiny = tiny_architecture();
    double net_f = 0.0, net_d = 0.0;
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto f = testing::network_grad_check<float>(tiny, seed, {4, 4, 8, 8}, 4, 32);
        const auto d = testing::network_grad_check<double>(tiny, seed, {4, 4, 8, 8}, 4, 32);
        v.expect(f.all_finite && f.max_rel_error < 1e-3,
                 "network float seed " + std::to_string(seed) + " at " + f.worst_name + " " + fmt("%.3g", f.max_rel_error));
        v.expect(d.all_finite && d.max_rel_error < 1e-5,
                 "network double seed " + std::to_string(seed) + " at " + d.worst_name + " "
                     + fmt("%.3g", d.max_rel_error));
        net_f = std::max(net_f, f.max_rel_error);
        net_d = std::max(net_d, d.max_rel_error);
    }
    const double elapsed = seconds_since(start);
    v.expect(elapsed < 60.0, "suite took " + fmt("%.1f", elapsed) + " s");
    v.detail = "primitives f32 " + fmt("%.2g", worst_f) + " f64 " + fmt("%.2g", worst_d) + ", network f32 "
               + fmt("%.2g", net_f) + " f64 " + fmt("%.2g", net_d) + ", " + fmt("%.1f", elapsed) + " s";
    return v;
}

Verdict parameter_counts()
{
    Verdict v;
    v.expect(block_params(spec(BlockKind::Conv, 32, 2), 4) == 9 * 4 * 32 + 2 * 32, "conv 4->32");
    v.expect(block_params(spec(BlockKind::Head, 1), 64) == 64 + 1, "head 64->1");
    {
        const std::int64_t cin = 16, t = 6, f = 24, h = cin * t;
        v.expect(block_params(spec(BlockKind::Iru, f, 2, 1, t), cin) == cin * h + 2 * h + 9 * h + 2 * h + h * f + 2 * f,
                 "iru 16->24 t=6");
    }
    {
        const std::int64_t cin = 32, f = 16;
        v.expect(block_params(spec(BlockKind::Iru, f, 1, 1, 1), cin) == 9 * cin + 2 * cin + cin * f + 2 * f,
                 "iru 32->16 t=1");
    }
    v.expect(block_params(spec(BlockKind::Asc, 48, 1, 12), 64) == 9 * 64 + 2 * 64 + 64 * 48 + 2 * 48, "asc 64->48");
    {
        auto a = spec(BlockKind::Aspp, 96);
        a.rates = {6, 12, 18};
        const std::int64_t cin = 144, f = 96;
        const std::int64_t unit = cin * f + 2 * f;
        const std::int64_t asc = 9 * cin + 2 * cin + cin * f + 2 * f;
        v.expect(block_params(a, cin) == unit + 3 * asc + unit + 5 * f * f + 2 * f, "aspp 144->96");
    }
    auto cs = spec(BlockKind::ConcatSkip, 32);
    cs.skip = "low";
    v.expect(block_params(cs, 96, 24) == 24 * 32 + 2 * 32, "concat-skip 24->32");
    v.expect(block_params(spec(BlockKind::Upsample, 0, 4), 96) == 0, "upsample");

    const auto full = Network<float>::build(load_architecture(CLOUDSEG_SOURCE_DIR "/configs/default.arch"), 0);
    v.expect(full.count_params() == 503377, "default config reports " + std::to_string(full.count_params()));
    v.detail = "8 closed forms, default config " + std::to_string(full.count_params());
    return v;
}

Verdict augmentation()
{
    Verdict v;
    const auto sources = synthetic_patches(2800, 11, 8);
    const auto data = prepare_data(sources, 3, true);
    const std::size_t total = data.train.size() + data.validation.size() + data.test.size();
    v.expect(total == 22400, "augmented total " + std::to_string(total));
    v.expect(data.train.size() == 20160 && data.validation.size() == 1120 && data.test.size() == 1120,
             "split sizes " + std::to_string(data.train.size()) + "/" + std::to_string(data.validation.size()) + "/"
                 + std::to_string(data.test.size()));

    Rng rng(5);
    for (int i = 0; i < 50; ++i) {
        const Shape s{1, static_cast<std::int64_t>(rng.between(1, 4)), static_cast<std::int64_t>(rng.between(1, 20)),
                      static_cast<std::int64_t>(rng.between(1, 20))};
        const Tensor t = random_tensor(s, rng);
        v.expect(bit_equal(rotate90(rotate90(rotate90(rotate90(t)))), t), "rot90^4 != id");
        v.expect(bit_equal(hflip(hflip(t)), t), "hflip^2 != id");
        const auto raster = random_raster(rng);
        auto r = raster;
        for (int k = 0; k < 4; ++k) {
            r = augment_raster(r, 1);
        }
        v.expect(r == raster, "raster rot90^4 != id");
        v.expect(augment_raster(augment_raster(raster, 4), 4) == raster, "raster hflip^2 != id");
    }

    for (std::uint64_t seed = 0; seed < 50; ++seed) {
        const auto split = split_dataset(2800, {0.90, 0.05, 0.05}, seed * 7919 + 1);
        std::vector<int> owner(22400, -1);
        bool clean = true;
        int which = 0;
        for (const auto* part : {&split.train, &split.validation, &split.test}) {
            for (std::size_t id : expand_augmented(*part)) {
                if (id >= owner.size() || owner[id] != -1) {
                    clean = false;
                    continue;
                }
                owner[id] = which;
            }
            ++which;
        }
        for (std::size_t src = 0; src < 2800 && clean; ++src) {
            for (std::size_t k = 0; k < 8; ++k) {
                clean = clean && owner[src * 8 + k] != -1 && owner[src * 8 + k] == owner[src * 8];
            }
        }
        v.expect(clean, "leakage or gap for seed " + std::to_string(seed));
    }
    v.detail = "2800 -> " + std::to_string(total) + ", group laws on 50 tensors and rasters, 50 split seeds";
    return v;
}

Verdict tiling()
{
    Verdict v;
    std::vector<std::uint32_t> expected;
    for (std::uint32_t o = 0; o <= 5544; o += 462) {
        expected.push_back(o);
    }
    expected.push_back(5664);
    const auto plan = plan_windows(6176, 6176);
    v.expect(plan.x_offsets == expected, "6176 offsets");
    v.expect(plan.x_offsets.size() == 14, "6176 window count " + std::to_string(plan.x_offsets.size()));

    Rng rng(2024);
    for (int i = 0; i < 200; ++i) {
        const auto w = static_cast<std::uint32_t>(rng.between(16, 120));
        const auto h = static_cast<std::uint32_t>(rng.between(16, 120));
        const auto window = static_cast<std::uint32_t>(rng.between(4, 16));
        const auto overlap = static_cast<std::uint32_t>(rng.below(window));
        const auto scene = random_scene(w, h, derive_seed(77, static_cast<std::uint64_t>(i)));

        SegmentOptions opt;
        opt.window = window;
        opt.overlap = overlap;
        const auto base = segment_scene(scene, fake_predict, opt);
        v.expect(std::all_of(base.canvas.coverage.begin(), base.canvas.coverage.end(), [](auto c) { return c >= 1; }),
                 "uncovered pixel for " + std::to_string(w) + "x" + std::to_string(h));

        SegmentOptions shuffled = opt;
        shuffled.order.resize(base.windows);
        std::iota(shuffled.order.begin(), shuffled.order.end(), std::size_t{0});
        rng.shuffle(std::span<std::size_t>(shuffled.order));
        const auto other = segment_scene(scene, fake_predict, shuffled);
        v.expect(other.mask == base.mask && other.canvas.values == base.canvas.values,
                 "order changed the result for " + std::to_string(w) + "x" + std::to_string(h));

        const auto big = static_cast<std::uint32_t>(rng.between(512, 13000));
        const auto offs = axis_offsets(big, 512, 50);
        bool ok = offs.front() == 0 && offs.back() == big - 512;
        for (std::size_t k = 1; k < offs.size(); ++k) {
            ok = ok && offs[k] > offs[k - 1] && offs[k] - offs[k - 1] <= 462;
        }
        v.expect(ok, "axis coverage for " + std::to_string(big));
    }
    v.detail = "6176 -> " + std::to_string(plan.x_offsets.size()) + " offsets ending at "
               + std::to_string(plan.x_offsets.back()) + ", 200 random scenes";
    return v;
}

Verdict metric_identities()
{
    Verdict v;
    const auto row = compute_metrics({8, 2, 1, 9}, "hand");
    v.expect(format_report({row}) == "method,acc,prec,sn,sp\nhand,85.00,80.00,88.89,81.82\n", "hand row");

    Rng rng(31);
    for (int i = 0; i < 1000; ++i) {
        const ConfusionMatrix cm{rng.below(5000) + 1, rng.below(5000) + 1, rng.below(5000) + 1, rng.below(5000) + 1};
        const auto m = compute_metrics(cm);
        const double pos = static_cast<double>(cm.tp + cm.fn);
        const double neg = static_cast<double>(cm.fp + cm.tn);
        if (std::abs((pos * *m.sn + neg * *m.sp) / (pos + neg) - *m.acc) >= 1e-9) {
            v.expect(false, "convexity identity");
            break;
        }
    }

    std::vector<float> probs(400), truth(400);
    for (std::size_t i = 0; i < probs.size(); ++i) {
        probs[i] = static_cast<float>(rng.uniform());
        truth[i] = static_cast<float>(rng.below(2));
    }
    const auto base = compute_metrics(confusion(probs, truth));
    std::vector<std::size_t> perm(probs.size());
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    for (int t = 0; t < 50; ++t) {
        rng.shuffle(std::span<std::size_t>(perm));
        std::vector<float> p2(probs.size()), t2(probs.size());
        for (std::size_t i = 0; i < perm.size(); ++i) {
            p2[i] = probs[perm[i]];
            t2[i] = truth[perm[i]];
        }
        const auto m = compute_metrics(confusion(p2, t2));
        v.expect(std::abs(*m.acc - *base.acc) < 1e-9 && std::abs(*m.prec - *base.prec) < 1e-9
                     && std::abs(*m.sn - *base.sn) < 1e-9 && std::abs(*m.sp - *base.sp) < 1e-9,
                 "permutation changed metrics");
    }

    const auto dir = scratch("metrics");
    emit_report({MetricsRow{"proposed", 97.50, 96.45, 98.46, 96.58}}, dir / "report.csv");
    const auto text = slurp(dir / "report.csv");
    v.expect(text == "method,acc,prec,sn,sp\nproposed,97.50,96.45,98.46,96.58\n", "proposed row: " + text);
    v.detail = "hand row, 1000 convexity draws, 50 permutations, report round-trip";
    return v;
}

Verdict training()
{
    Verdict v;
    const auto start = Clock::now();
    const auto corpus = synthetic_patches(200, 2026, 64);
    const auto data = prepare_data(corpus, 1, false);
    v.expect(data.train.size() == 180 && data.validation.size() == 10 && data.test.size() == 10, "split sizes");

    TrainConfig cfg;
    cfg.optimizer.learning_rate = 0.003;
    cfg.optimizer.beta1 = 0.9;
    cfg.optimizer.beta2 = 0.999;
    cfg.optimizer.batch_size = 8;
    cfg.optimizer.epochs = 12;
    cfg.seed = 1;
    cfg.augment = false;
    cfg.arch_config_path = "builtin:tiny";
    cfg.data_dir = "in-memory";
    auto net = Network<float>::build(tiny_architecture(), cfg.seed);
    const auto history = train(net, data, cfg, {});
    const auto row = evaluate_split(net, data.validation, 0.5);
    const double val_acc = history.epochs.empty() ? 0.0 : history.epochs.back().val_acc;
    const double elapsed = seconds_since(start);

    v.expect(val_acc >= 0.95, "validation pixel accuracy " + fmt("%.4f", val_acc));
    v.expect(row.acc && *row.acc >= 90.0, "validation ACC " + fmt("%.2f", row.acc.value_or(0.0)));
    v.expect(row.sn && *row.sn >= 90.0, "validation SN " + fmt("%.2f", row.sn.value_or(0.0)));
    v.expect(elapsed < 600.0, "training took " + fmt("%.0f", elapsed) + " s");
    v.detail = std::to_string(history.epochs.size()) + " epochs, val acc " + fmt("%.4f", val_acc) + ", ACC "
               + fmt("%.2f", row.acc.value_or(0.0)) + " SN " + fmt("%.2f", row.sn.value_or(0.0)) + ", "
               + fmt("%.0f", elapsed) + " s";
    return v;
}

Verdict determinism()
{
    Verdict v;
    SynthConfig sc;
    sc.seed = 99;
    sc.width = 48;
    sc.height = 40;
    const auto a = scratch("det_a");
    const auto b = scratch("det_b");
    generate_corpus(sc, 6, a);
    generate_corpus(sc, 6, b, 3);
    for (const auto& e : fs::directory_iterator(a)) {
        v.expect(slurp(e.path()) == slurp(b / e.path().filename()), "corpus file " + e.path().filename().string());
    }

    v.expect(encode_cpw(Network<float>::build(tiny_architecture(), 42).export_weights())
                 == encode_cpw(Network<float>::build(tiny_architecture(), 42).export_weights()),
             "initial weights");
    v.expect(encode_cpw(Network<float>::build(default_architecture(), 42).export_weights())
                 == encode_cpw(Network<float>::build(default_architecture(), 42).export_weights()),
             "default initial weights");

    const auto corpus = synthetic_patches(24, 5, 16);
    TrainConfig cfg;
    cfg.optimizer.batch_size = 8;
    cfg.optimizer.epochs = 2;
    cfg.seed = 13;
    cfg.augment = true;
    cfg.arch_config_path = "builtin:tiny";
    cfg.data_dir = "in-memory";
    const auto data = prepare_data(corpus, cfg.seed, cfg.augment);
    auto run_once = [&] {
        auto net = Network<float>::build(tiny_architecture(), cfg.seed);
        const auto h = train(net, data, cfg, {});
        return std::make_pair(h.to_csv(), encode_cpw(net.export_weights()));
    };
    const auto first = run_once();
    const auto second = run_once();
    v.expect(first.first == second.first, "training history");
    v.expect(first.second == second.second, "trained weights");

    const auto net = Network<float>::build(tiny_architecture(), 8);
    const auto scene = random_scene(150, 110, 21);
    SegmentOptions one;
    one.window = 32;
    one.overlap = 6;
    const auto m1 = segment_scene(scene, net, one);
    const auto m1b = segment_scene(scene, net, one);
    v.expect(m1.mask == m1b.mask, "repeated scene mask");
    for (unsigned threads : {2u, 4u, 8u}) {
        SegmentOptions many = one;
        many.threads = threads;
        const auto mn = segment_scene(scene, net, many);
        v.expect(mn.mask == m1.mask && mn.canvas.values == m1.canvas.values,
                 "mask with " + std::to_string(threads) + " threads");
    }
    v.detail = "corpus, initial weights, history, weights, masks at 1/2/4/8 threads";
    return v;
}

Verdict round_trips()
{
    Verdict v;
    const auto dir = scratch("formats");
    Rng rng(8);
    for (int i = 0; i < 100; ++i) {
        const auto scene = random_raster(rng);
        const auto first = dir / "a.msr";
        const auto second = dir / "b.msr";
        write_msr(scene, first);
        write_msr(read_msr(first), second);
        v.expect(slurp(first) == slurp(second), "MSR instance " + std::to_string(i));
        v.expect(encode_msr(decode_msr(encode_msr(scene))) == encode_msr(scene), "MSR bytes " + std::to_string(i));

        const auto arrays = random_arrays(rng);
        const auto p = dir / "a.cpw";
        const auto q = dir / "b.cpw";
        write_cpw(arrays, p);
        const auto back = read_cpw(p);
        v.expect(back == arrays, "CPW values " + std::to_string(i));
        write_cpw(back, q);
        v.expect(slurp(p) == slurp(q), "CPW instance " + std::to_string(i));
    }
    auto net = Network<float>::build(default_architecture(), 3);
    const auto w = dir / "net.cpw";
    write_cpw(net.export_weights(), w);
    net.import_weights(read_cpw(w));
    const auto w2 = dir / "net2.cpw";
    write_cpw(net.export_weights(), w2);
    v.expect(slurp(w) == slurp(w2), "network CPW");
    v.detail = "100 MSR1 and 100 CPW1 instances plus the default network";
    return v;
}

} // namespace

int main()
{
    const std::vector<std::pair<std::string, std::function<Verdict()>>> criteria{
        {"gradient fidelity", gradient_fidelity},
        {"parameter counts", parameter_counts},
        {"augmentation arithmetic and group laws", augmentation},
        {"tiling correctness", tiling},
        {"metric identities", metric_identities},
        {"desk-scale training", training},
        {"determinism", determinism},
        {"format round-trips", round_trips},
    };
    int failed = 0;
    int index = 0;
    for (const auto& [name, check] : criteria) {
        ++index;
        Verdict v;
        try {
            v = check();
        } catch (const std::exception& e) {
            v.failures.push_back(std::string("exception: ") + e.what());
        }
        const bool ok = v.failures.empty();
        failed += !ok;
        std::printf("%s [%d] %s: %s\n", ok ? "PASS" : "FAIL", index, name.c_str(), v.detail.c_str());
        for (std::size_t i = 0; i < v.failures.size() && i < 5; ++i) {
            std::printf("    %s\n", v.failures[i].c_str());
        }
        std::fflush(stdout);
    }
    std::printf("%d/%zu criteria passed\n", static_cast<int>(criteria.size()) - failed, criteria.size());
    return failed == 0 ? 0 : 1;
}
