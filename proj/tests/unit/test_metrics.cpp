#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <numeric>
#include <sstream>

#include "cloudseg/dataset.hpp"
#include "cloudseg/metrics.hpp"
#include "cloudseg/network.hpp"
#include "cloudseg/rng.hpp"

using namespace cloudseg;

namespace {

RasterScene mask_from(std::uint32_t w, std::uint32_t h, const std::vector<int>& bits)
{
    auto m = RasterScene::zeros(w, h, 1, DType::U8);
    auto v = m.as<std::uint8_t>();
    for (std::size_t i = 0; i < bits.size(); ++i) {
        v[i] = bits[i] ? 255 : 0;
    }
    return m;
}

std::string slurp(const std::filesystem::path& p)
{
    std::ifstream in(p);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

} // namespace

TEST_CASE("confusion counts")
{
    std::vector<int> gt(100, 0);
    std::fill(gt.begin(), gt.begin() + 60, 1);
    std::vector<int> inv(100);
    for (int i = 0; i < 100; ++i) {
        inv[i] = 1 - gt[i];
    }
    const auto truth = mask_from(10, 10, gt);
    CHECK(confusion(truth, truth) == ConfusionMatrix{60, 0, 0, 40});
    CHECK(confusion(mask_from(10, 10, inv), truth) == ConfusionMatrix{0, 40, 60, 0});

    std::vector<int> checker(16);
    for (int i = 0; i < 16; ++i) {
        checker[i] = ((i / 4) + (i % 4)) % 2;
    }
    CHECK(confusion(mask_from(4, 4, std::vector<int>(16, 1)), mask_from(4, 4, checker))
          == ConfusionMatrix{8, 8, 0, 0});

    CHECK_THROWS_AS(confusion(mask_from(4, 4, checker), mask_from(2, 8, checker)), ShapeError);

    const std::vector<float> probs{0.49f, 0.5f, 0.9f, 0.1f};
    const std::vector<float> labels{1, 1, 0, 0};
    CHECK(confusion(probs, labels) == ConfusionMatrix{1, 1, 1, 1});
}

TEST_CASE("metric rows")
{
    const auto full = compute_metrics({50, 0, 0, 50});
    CHECK(*full.acc == 100.0);
    CHECK(*full.prec == 100.0);
    CHECK(*full.sn == 100.0);
    CHECK(*full.sp == 100.0);

    const auto row = compute_metrics({8, 2, 1, 9}, "hand");
    CHECK(format_report({row}) == "method,acc,prec,sn,sp\nhand,85.00,80.00,88.89,81.82\n");

    const auto na = compute_metrics({1, 0, 0, 0}, "m");
    CHECK_FALSE(na.sp.has_value());
    CHECK(format_report({na}) == "method,acc,prec,sn,sp\nm,100.00,100.00,100.00,NA\n");
    CHECK_FALSE(compute_metrics({}).acc.has_value());
}

TEST_CASE("metric identities on random matrices")
{
    Rng rng(1);
    for (int i = 0; i < 500; ++i) {
        const ConfusionMatrix cm{rng.below(1000) + 1, rng.below(1000) + 1, rng.below(1000) + 1, rng.below(1000) + 1};
        const auto m = compute_metrics(cm);
        // ACC is the prevalence-weighted mix of SN and SP
        const double pos = static_cast<double>(cm.tp + cm.fn);
        const double neg = static_cast<double>(cm.fp + cm.tn);
        const double mix = (pos * *m.sn + neg * *m.sp) / (pos + neg);
        REQUIRE(std::abs(mix - *m.acc) < 1e-9);
        // swapping the class roles swaps SN and SP
        const auto swapped = compute_metrics({cm.tn, cm.fn, cm.fp, cm.tp});
        REQUIRE(std::abs(*swapped.sn - *m.sp) < 1e-9);
        REQUIRE(std::abs(*swapped.acc - *m.acc) < 1e-9);
    }
}

TEST_CASE("pixel permutations leave the matrix unchanged")
{
    Rng rng(2);
    std::vector<float> probs(256), truth(256);
    for (std::size_t i = 0; i < 256; ++i) {
        probs[i] = static_cast<float>(rng.uniform());
        truth[i] = static_cast<float>(rng.below(2));
    }
    const auto base = confusion(probs, truth);
    std::vector<std::size_t> perm(256);
    std::iota(perm.begin(), perm.end(), std::size_t{0});
    for (int t = 0; t < 20; ++t) {
        rng.shuffle(std::span<std::size_t>(perm));
        std::vector<float> p2(256), t2(256);
        for (std::size_t i = 0; i < 256; ++i) {
            p2[i] = probs[perm[i]];
            t2[i] = truth[perm[i]];
        }
        REQUIRE(confusion(p2, t2) == base);
    }
}

TEST_CASE("report emission")
{
    const MetricsRow proposed{"proposed", 97.50, 96.45, 98.46, 96.58};
    CHECK(format_report({proposed}) == "method,acc,prec,sn,sp\nproposed,97.50,96.45,98.46,96.58\n");
    CHECK(format_report({}) == "method,acc,prec,sn,sp\n");

    const auto dir = std::filesystem::temp_directory_path() / "cloudseg_metrics";
    std::filesystem::create_directories(dir);
    emit_report({proposed}, dir / "r.csv");
    CHECK(slurp(dir / "r.csv") == "method,acc,prec,sn,sp\nproposed,97.50,96.45,98.46,96.58\n");
    emit_report({}, dir / "empty.csv");
    CHECK(slurp(dir / "empty.csv") == "method,acc,prec,sn,sp\n");
    CHECK_THROWS_AS(emit_report({}, dir / "no" / "such" / "dir.csv"), IoError);
}

TEST_CASE("evaluate_split micro-averages one confusion matrix")
{
    const auto net = Network<float>::build(tiny_architecture(), 4);
    Rng rng(3);
    std::vector<LabeledPatch> patches;
    for (int i = 0; i < 3; ++i) {
        Tensor img({1, 4, 16, 16});
        Tensor mask({1, 1, 16, 16});
        for (auto& v : img.values()) {
            v = static_cast<float>(rng.uniform());
        }
        for (auto& v : mask.values()) {
            v = static_cast<float>(rng.below(2));
        }
        patches.push_back({img, mask});
    }
    ConfusionMatrix total;
    for (const auto& p : patches) {
        total += confusion(net.infer(p.image).values(), p.mask.values());
    }
    const auto expected = compute_metrics(total, "x");
    const auto got = evaluate_split(net, patches, 0.5, "x");
    CHECK(format_report({got}) == format_report({expected}));

    const auto single = evaluate_split(net, std::span(patches).first(1), 0.5, "x");
    CHECK(format_report({single})
          == format_report({compute_metrics(confusion(net.infer(patches[0].image).values(), patches[0].mask.values()),
                                            "x")}));
    CHECK_THROWS_AS(evaluate_split(net, {}, 0.5), ConfigError);
}
