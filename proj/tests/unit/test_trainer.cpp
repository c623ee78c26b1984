#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>

#include "cloudseg/dataset.hpp"
#include "cloudseg/synth.hpp"
#include "cloudseg/trainer.hpp"

using namespace cloudseg;
namespace fs = std::filesystem;

namespace {

fs::path scratch(const std::string& name)
{
    auto dir = fs::temp_directory_path() / "cloudseg_trainer" / name;
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

std::vector<LabeledPatch> synth_patches(std::size_t n, std::uint32_t size, std::uint64_t seed)
{
    SynthConfig cfg;
    cfg.seed = seed;
    cfg.width = size;
    cfg.height = size;
    cfg.min_radius = size / 8.0;
    cfg.max_radius = size / 3.0;
    std::vector<LabeledPatch> out;
    for (std::size_t i = 0; i < n; ++i) {
        const auto s = generate_scene(cfg, i);
        out.push_back(make_labeled_patch(s.scene, s.mask));
    }
    return out;
}

Tensor grid(std::int64_t h, std::int64_t w, std::int64_t c = 1)
{
    Tensor t({1, c, h, w});
    for (std::int64_t i = 0; i < t.size(); ++i) {
        t[i] = static_cast<float>(i + 1);
    }
    return t;
}

} // namespace

TEST_CASE("binary cross-entropy closed forms")
{
    const Tensor target({1, 1, 2, 2}, std::vector<float>{0, 1, 1, 0});
    const auto exact = bce_loss(target, target);
    CHECK(exact.loss < 1e-6);
    const auto half = bce_loss(Tensor({1, 1, 2, 2}, 0.5f), target);
    CHECK(half.loss == doctest::Approx(std::log(2.0)).epsilon(1e-6));
    CHECK(half.grad[0] == doctest::Approx(0.5f));
    CHECK(half.grad[1] == doctest::Approx(-0.5f));
    CHECK(std::isfinite(bce_loss(Tensor({1, 1, 2, 2}, 0.0f), Tensor({1, 1, 2, 2}, 1.0f)).loss));
    CHECK_THROWS_AS(bce_loss(Tensor({1, 1, 2, 2}), Tensor({1, 1, 2, 3})), ShapeError);
}

TEST_CASE("pixel accuracy")
{
    const Tensor target({1, 1, 2, 2}, std::vector<float>{0, 1, 1, 0});
    CHECK(pixel_accuracy(target, target) == 1.0);
    CHECK(pixel_accuracy(Tensor({1, 1, 2, 2}, 0.6f), target) == 0.5);
    CHECK(pixel_accuracy(Tensor({1, 1, 2, 2}, 0.5f), target) == 0.5);
}

TEST_CASE("Adam update closed forms")
{
    OptimizerConfig cfg;
    std::vector<float> theta{1.0f, -2.0f};
    std::vector<float> zero{0.0f, 0.0f};
    std::vector<float> m(2), v(2);
    adam_update(theta, zero, m, v, 1, cfg);
    CHECK(theta[0] == 1.0f);
    CHECK(theta[1] == -2.0f);

    for (float g : {0.7f, -5.0f, 1e-2f}) {
        std::vector<float> p{0.0f};
        std::vector<float> grad{g};
        std::vector<float> m1(1), v1(1);
        adam_update(p, grad, m1, v1, 1, cfg);
        CHECK(std::abs(p[0]) == doctest::Approx(0.003).epsilon(1e-4));
        CHECK((p[0] < 0) == (g > 0));
    }
    CHECK_THROWS_AS(adam_update(theta, zero, m, v, 0, cfg), RangeError);
}

TEST_CASE("adam_step rejects non-finite gradients before touching anything")
{
    auto net = Network<float>::build(tiny_architecture(), 1);
    const auto before = net.export_weights();
    net.set_mode(Mode::Train);
    net.zero_grad();
    // the last trainable tensor, so every earlier entry would already be updated by a naive loop
    auto& params = net.parameters();
    auto it = std::find_if(params.rbegin(), params.rend(), [](const auto& e) { return e.trainable; });
    auto& p = *it;
    Tensor g(p.var.value().shape(), 0.0f);
    g[0] = std::nanf("");
    p.var.node()->accumulate(g);
    AdamState state;
    CHECK_THROWS_WITH_AS(adam_step(net.parameters(), state, OptimizerConfig{}), doctest::Contains(p.name.c_str()),
                         NumericError);
    CHECK(net.export_weights() == before);
}

TEST_CASE("training config parsing")
{
    const auto cfg = parse_train_config("# run\nlearning_rate = 0.003\nbatch_size = 8\nepochs = 2\n"
                                        "arch_config_path = builtin:tiny\ndata_dir = corpus\naugment = false\n");
    CHECK(cfg.optimizer.learning_rate == 0.003);
    CHECK(cfg.optimizer.beta1 == 0.9);
    CHECK(cfg.optimizer.beta2 == 0.999);
    CHECK(cfg.optimizer.batch_size == 8);
    CHECK(cfg.optimizer.epochs == 2);
    CHECK_FALSE(cfg.augment);
    CHECK(cfg.data_dir == "corpus");

    const OptimizerConfig defaults;
    CHECK(defaults.learning_rate == 0.003);
    CHECK(defaults.batch_size == 8);
    CHECK(defaults.epochs == 300);

    CHECK_THROWS_WITH_AS(parse_train_config("epochs = 3\n"),
                         doctest::Contains("missing config keys: arch_config_path, data_dir"), ConfigError);
    CHECK_THROWS_AS(parse_train_config("arch_config_path = a\ndata_dir = b\nlr = 1\n"), ConfigError);
    CHECK_THROWS_AS(parse_train_config("arch_config_path = a\ndata_dir = b\ndata_dir = c\n"), ConfigError);
    CHECK_THROWS_AS(parse_train_config("arch_config_path = a\ndata_dir = b\nbatch_size = 0\n"), ConfigError);
    CHECK_THROWS_AS(parse_train_config("arch_config_path = a\ndata_dir = b\nbeta1 = 1\n"), ConfigError);
    CHECK_THROWS_AS(parse_train_config("arch_config_path = a\ndata_dir = b\nepochs = two\n"), ConfigError);
    CHECK_THROWS_AS(load_train_config(scratch("cfg") / "missing.cfg"), ConfigError);
}

TEST_CASE("rotation and flip conventions")
{
    // [[a,b],[c,d]] -> [[b,d],[a,c]]
    const Tensor t({1, 1, 2, 2}, std::vector<float>{1, 2, 3, 4});
    const Tensor r = rotate90(t);
    CHECK(r == Tensor({1, 1, 2, 2}, std::vector<float>{2, 4, 1, 3}));
    CHECK(hflip(t) == Tensor({1, 1, 2, 2}, std::vector<float>{2, 1, 4, 3}));
    CHECK(rotate90(grid(2, 3)).shape() == Shape{1, 1, 3, 2});
}

TEST_CASE("augmentation group laws hold bit-exactly")
{
    const Tensor t = grid(5, 5, 3);
    CHECK(rotate90(rotate90(rotate90(rotate90(t)))) == t);
    CHECK(hflip(hflip(t)) == t);
    // flip then rotate equals rotate-inverse then flip (dihedral relation)
    CHECK(rotate90(hflip(t)) == hflip(rotate90(rotate90(rotate90(t)))));

    LabeledPatch p{t, grid(5, 5)};
    const auto all = augment_patch(p);
    CHECK(all[0].image == t);
    std::set<std::vector<float>> distinct;
    for (int k = 0; k < 8; ++k) {
        CHECK(augment_variant(p, k).image == all[k].image);
        CHECK(all[k].mask.shape() == Shape{1, 1, 5, 5});
        distinct.insert(std::vector<float>(all[k].image.values().begin(), all[k].image.values().end()));
    }
    CHECK(distinct.size() == 8);
    CHECK_THROWS_AS(augment_variant(p, 8), RangeError);
    CHECK_THROWS_AS(augment_variant(LabeledPatch{grid(4, 5, 4), grid(4, 5)}, 1), ShapeError);
}

TEST_CASE("augment_raster matches the tensor variants for every dtype")
{
    SynthConfig cfg;
    cfg.width = 12;
    cfg.height = 12;
    cfg.seed = 5;
    cfg.min_radius = 1.5;
    cfg.max_radius = 4.0;
    const auto s = generate_scene(cfg, 0);
    for (int k = 0; k < 8; ++k) {
        const auto via_raster = make_labeled_patch(augment_raster(s.scene, k), augment_raster(s.mask, k));
        const auto via_tensor = augment_variant(make_labeled_patch(s.scene, s.mask), k);
        CHECK(via_raster.image == via_tensor.image);
        CHECK(via_raster.mask == via_tensor.mask);
    }

    auto rect = RasterScene::zeros(3, 2, 2, DType::F32, "r");
    auto v = rect.as<float>();
    for (std::size_t i = 0; i < v.size(); ++i) {
        v[i] = static_cast<float>(i);
    }
    const auto turned = augment_raster(rect, 1);
    CHECK(turned.width == 2);
    CHECK(turned.height == 3);
    // out(i, j) = in(j, w - 1 - i)
    CHECK(turned.as<float>()[0] == 2.0f);
    CHECK(turned.as<float>()[1] == 5.0f);
    CHECK(augment_raster(augment_raster(augment_raster(turned, 1), 1), 1) == rect);
    CHECK(augment_raster(augment_raster(rect, 4), 4) == rect);
}

TEST_CASE("split arithmetic, determinism and disjointness")
{
    const auto split = split_dataset(2800, {0.90, 0.05, 0.05}, 3);
    CHECK(split.train.size() == 2520);
    CHECK(split.validation.size() == 140);
    CHECK(split.test.size() == 140);
    CHECK(expand_augmented(split.train).size() == 20160);
    CHECK(expand_augmented(split.validation).size() == 1120);
    CHECK(expand_augmented(split.test).size() == 1120);

    const auto again = split_dataset(2800, {0.90, 0.05, 0.05}, 3);
    CHECK(again.train == split.train);
    CHECK(again.test == split.test);
    CHECK_FALSE(split_dataset(2800, {0.90, 0.05, 0.05}, 4).test == split.test);

    std::set<std::size_t> seen;
    for (const auto* part : {&split.train, &split.validation, &split.test}) {
        for (std::size_t id : *part) {
            CHECK(seen.insert(id).second);
        }
    }
    CHECK(seen.size() == 2800);

    CHECK(expand_augmented({3}) == std::vector<std::size_t>{24, 25, 26, 27, 28, 29, 30, 31});
    CHECK_THROWS_AS(split_dataset(10, {0.5, 0.5, 0.5}, 0), ConfigError);
    CHECK_THROWS_AS(split_dataset(10, {1.2, -0.1, -0.1}, 0), ConfigError);
}

TEST_CASE("prepare_data keeps every variant with its source")
{
    const auto corpus = synth_patches(20, 8, 1);
    const auto data = prepare_data(corpus, 9, true, {0.8, 0.1, 0.1});
    CHECK(data.train.size() == 16 * 8);
    CHECK(data.validation.size() == 2 * 8);
    CHECK(data.test.size() == 2 * 8);
    const auto plain = prepare_data(corpus, 9, false, {0.8, 0.1, 0.1});
    CHECK(plain.train.size() == 16);
    // variant 0 of each validation source is the source itself
    CHECK(data.validation[0].image == plain.validation[0].image);
    CHECK(data.validation[8].image == plain.validation[1].image);
}

TEST_CASE("one batch can be overfit")
{
    const auto patches = synth_patches(4, 16, 2);
    const std::vector<std::size_t> ids{0, 1, 2, 3};
    const auto [images, masks] = make_batch(patches, ids);
    CHECK(images.shape() == Shape{4, 4, 16, 16});
    auto net = Network<float>::build(tiny_architecture(), 3);
    AdamState state;
    OptimizerConfig cfg;
    double first = 0.0, last = 0.0, acc = 0.0;
    for (int step = 0; step < 60; ++step) {
        last = train_step(net, state, cfg, images, masks, &acc);
        if (step == 0) {
            first = last;
        }
    }
    CHECK(state.t == 60);
    CHECK(last < 0.5 * first);
    CHECK(acc > 0.9);
}

TEST_CASE("training is deterministic and writes its artifacts")
{
    const auto corpus = synth_patches(24, 16, 4);
    const auto data = prepare_data(corpus, 2, false, {0.75, 0.125, 0.125});
    TrainConfig cfg;
    cfg.optimizer.epochs = 3;
    cfg.optimizer.batch_size = 4;
    cfg.checkpoint_every = 2;
    cfg.seed = 2;
    cfg.augment = false;
    cfg.arch_config_path = "builtin:tiny";
    cfg.data_dir = "unused";

    auto run = [&](const fs::path& dir) {
        auto net = Network<float>::build(tiny_architecture(), cfg.seed);
        int calls = 0;
        auto history = train(net, data, cfg, dir, [&](const EpochRecord&) { ++calls; });
        CHECK(calls == 3);
        return std::make_pair(history, net.export_weights());
    };
    const auto dir_a = scratch("a");
    const auto dir_b = scratch("b");
    const auto [ha, wa] = run(dir_a);
    const auto [hb, wb] = run(dir_b);
    CHECK(ha.to_csv() == hb.to_csv());
    CHECK(wa == wb);
    CHECK(ha.epochs.size() == 3);
    CHECK(ha.optimizer_step == 3 * 5);

    for (const char* f : {"history.csv", "epoch_0002.cpw", "final.cpw", "best.cpw", "final.cpw.meta"}) {
        CHECK_MESSAGE(fs::exists(dir_a / f), f);
    }
    CHECK_FALSE(fs::exists(dir_a / "epoch_0001.cpw"));
    std::ifstream csv(dir_a / "history.csv");
    std::string line;
    int rows = 0;
    std::getline(csv, line);
    CHECK(line == "epoch,train_loss,train_acc,val_loss,val_acc");
    while (std::getline(csv, line)) {
        ++rows;
    }
    CHECK(rows == 3);

    const auto meta = read_checkpoint_meta(dir_a / "final.cpw");
    CHECK(meta.epoch == 3);
    CHECK(meta.optimizer_step == 15);
    CHECK(meta.seed == 2);
    CHECK(meta.arch == "builtin:tiny");
    CHECK_FALSE(meta.augment);
    CHECK(read_cpw(dir_a / "final.cpw") == wa);
}

TEST_CASE("evaluate_loss on an empty split is NaN")
{
    const auto net = Network<float>::build(tiny_architecture(), 0);
    const auto [loss, acc] = evaluate_loss(net, {}, 8);
    CHECK(std::isnan(loss));
    CHECK(std::isnan(acc));
}
