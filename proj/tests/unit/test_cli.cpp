#include <doctest.h>

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <sys/wait.h>

#include "cloudseg/raster_io.hpp"
#include "cloudseg/rng.hpp"

namespace fs = std::filesystem;

namespace {

struct Outcome {
    int code = -1;
    std::string out;
    std::string err;
};

fs::path work_dir()
{
    static const fs::path dir = [] {
        auto d = fs::temp_directory_path() / "cloudseg_cli";
        fs::remove_all(d);
        fs::create_directories(d);
        return d;
    }();
    return dir;
}

std::string slurp(const fs::path& p)
{
    std::ifstream in(p, std::ios::binary);
    std::stringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

Outcome run(const std::string& args)
{
    const auto out = work_dir() / "stdout.txt";
    const auto err = work_dir() / "stderr.txt";
    const std::string cmd = std::string("\"") + CLOUDSEG_CLI + "\" " + args + " >\"" + out.string() + "\" 2>\""
                            + err.string() + "\"";
    const int status = std::system(cmd.c_str());
    Outcome o;
    o.code = WIFEXITED(status) ? WEXITSTATUS(status) : -1;
    o.out = slurp(out);
    o.err = slurp(err);
    return o;
}

std::string q(const fs::path& p) { return "\"" + p.string() + "\""; }

void write_text(const fs::path& p, const std::string& text)
{
    std::ofstream out(p);
    out << text;
}

// Trains once and shares the result between test cases.
const fs::path& trained_run()
{
    static const fs::path run_dir = [] {
        const auto data = work_dir() / "train_data";
        REQUIRE(run("synth --seed 3 --scenes 24 --size 16x16 --out " + q(data)).code == 0);
        const auto dir = work_dir() / "train_run";
        const auto cfg = work_dir() / "train.cfg";
        write_text(cfg, "arch_config_path = builtin:tiny\ndata_dir = " + data.string() + "\nout_dir = " + dir.string()
                            + "\nepochs = 2\nbatch_size = 8\nlearning_rate = 0.003\naugment = false\nseed = 5\n");
        const auto r = run("train --config " + q(cfg));
        INFO(r.err);
        REQUIRE(r.code == 0);
        return dir;
    }();
    return run_dir;
}

} // namespace

TEST_CASE("synth writes a corpus and is repeatable")
{
    const auto a = work_dir() / "synth_a";
    const auto b = work_dir() / "synth_b";
    CHECK(run("synth --seed 7 --scenes 2 --size 64x48 --out " + q(a)).code == 0);
    CHECK(run("--threads 3 synth --seed 7 --scenes 2 --size 64x48 --out " + q(b)).code == 0);
    std::size_t msr = 0;
    for (const auto& e : fs::directory_iterator(a)) {
        msr += e.path().extension() == ".msr";
        CHECK(slurp(e.path()) == slurp(b / e.path().filename()));
    }
    CHECK(msr == 4);
    CHECK(fs::exists(a / "manifest.csv"));
    const auto scene = cloudseg::read_msr(a / "scene_0001.msr");
    CHECK(scene.width == 64);
    CHECK(scene.height == 48);
}

TEST_CASE("malformed sizes and missing options are validation errors")
{
    const auto bad = run("synth --scenes 1 --size 0x10 --out " + q(work_dir() / "never"));
    CHECK(bad.code == 1);
    CHECK(bad.err.find("--size") != std::string::npos);
    CHECK(run("synth --scenes 1 --size 12 --out " + q(work_dir() / "never")).code == 1);
    CHECK(run("synth --scenes 1").code == 1);
    CHECK(run("frobnicate").code == 1);
    CHECK_FALSE(fs::exists(work_dir() / "never"));
}

TEST_CASE("help documents the default constants")
{
    for (const char* sub : {"synth", "patchify", "augment", "train", "eval", "segment"}) {
        const auto h = run(std::string(sub) + " --help");
        INFO(sub);
        CHECK(h.code == 0);
        for (const char* value : {"512", "50", "0.5", "0.003", "8"}) {
            CHECK_MESSAGE(h.out.find(value) != std::string::npos, value);
        }
    }
}

TEST_CASE("train writes history and checkpoints")
{
    const auto& dir = trained_run();
    const auto history = slurp(dir / "history.csv");
    CHECK(history.rfind("epoch,train_loss,train_acc,val_loss,val_acc\n", 0) == 0);
    CHECK(std::count(history.begin(), history.end(), '\n') == 3);
    CHECK(fs::exists(dir / "final.cpw"));
    CHECK(fs::exists(dir / "final.cpw.meta"));

    const auto cfg = work_dir() / "missing.cfg";
    write_text(cfg, "epochs = 2\n");
    const auto missing = run("train --config " + q(cfg));
    CHECK(missing.code == 1);
    CHECK(missing.err.find("arch_config_path") != std::string::npos);
    CHECK(missing.err.find("data_dir") != std::string::npos);

    write_text(cfg, "arch_config_path = builtin:tiny\ndata_dir = " + (work_dir() / "absent").string() + "\n");
    CHECK(run("train --config " + q(cfg)).code == 1);
}

TEST_CASE("banner echoes the optimizer settings")
{
    const auto data = work_dir() / "banner_data";
    REQUIRE(run("synth --seed 4 --scenes 8 --size 16x16 --out " + q(data)).code == 0);
    const auto cfg = work_dir() / "banner.cfg";
    write_text(cfg, "arch_config_path = builtin:tiny\ndata_dir = " + data.string() + "\nout_dir = "
                        + (work_dir() / "banner_run").string() + "\nepochs = 0\nbatch_size = 8\nlearning_rate = 0.003\n");
    const auto r = run("train --config " + q(cfg));
    const auto text = r.out + r.err;
    CHECK(text.find("0.003") != std::string::npos);
    CHECK(text.find("batch") != std::string::npos);
}

TEST_CASE("eval emits a report matching the requested split")
{
    const auto& dir = trained_run();
    const auto data = work_dir() / "train_data";
    const auto report = work_dir() / "report.csv";
    const auto r = run("eval --weights " + q(dir / "final.cpw") + " --data " + q(data) + " --split val --report "
                       + q(report));
    INFO(r.err);
    CHECK((r.code == 0 || r.code == 2));
    CHECK(slurp(report).rfind("method,acc,prec,sn,sp\n", 0) == 0);

    const auto empty = work_dir() / "empty_split";
    fs::create_directories(empty);
    CHECK(run("eval --weights " + q(dir / "final.cpw") + " --data " + q(empty)).code == 1);
    CHECK(run("eval --weights " + q(dir / "final.cpw") + " --data " + q(data) + " --split train").code == 1);
}

TEST_CASE("segment: thread count does not change the mask")
{
    const auto& dir = trained_run();
    const auto scenes = work_dir() / "seg_scene";
    REQUIRE(run("synth --seed 9 --scenes 1 --size 150x110 --out " + q(scenes)).code == 0);
    const auto scene = scenes / "scene_0000.msr";
    const auto one = work_dir() / "mask1.msr";
    const auto four = work_dir() / "mask4.msr";
    const auto prob = work_dir() / "prob.msr";
    const std::string common = "segment --weights " + q(dir / "final.cpw") + " --scene " + q(scene)
                               + " --window 32 --overlap 6";
    const auto r1 = run("--threads 1 " + common + " --out " + q(one) + " --prob " + q(prob));
    INFO(r1.err);
    CHECK(r1.code == 0);
    CHECK(r1.err.find("windows: 6 x 4 = 24") != std::string::npos);
    CHECK(run("--threads 4 " + common + " --out " + q(four)).code == 0);
    CHECK(slurp(one) == slurp(four));
    const auto p = cloudseg::read_msr(prob);
    CHECK(p.dtype() == cloudseg::DType::F32);
    CHECK(cloudseg::read_msr(one).dtype() == cloudseg::DType::U8);

    CHECK(run(common + " --overlap 32 --out " + q(one)).code == 1);
    CHECK(run("segment --weights " + q(dir / "final.cpw") + " --scene " + q(scene) + " --overlap 512 --out "
              + q(one))
              .code
          == 1);

    auto three = cloudseg::RasterScene::zeros(64, 64, 3, cloudseg::DType::U16);
    cloudseg::write_msr(three, work_dir() / "three.msr");
    CHECK(run("segment --weights " + q(dir / "final.cpw") + " --scene " + q(work_dir() / "three.msr")
              + " --window 32 --overlap 6 --out " + q(one))
              .code
          == 1);
    CHECK(run("segment --weights " + q(work_dir() / "nope.cpw") + " --scene " + q(scene)
              + " --window 32 --overlap 6 --out " + q(one))
              .code
          == 2);
}

TEST_CASE("patchify and augment")
{
    const auto src = work_dir() / "patch_src";
    REQUIRE(run("synth --seed 2 --scenes 1 --size 40x30 --out " + q(src)).code == 0);
    const auto patches = work_dir() / "patches";
    CHECK(run("patchify --data " + q(src) + " --out " + q(patches) + " --size 16 --overlap 4").code == 0);
    // x offsets 0,12,24 ; y offsets 0,12,14
    std::size_t n = 0;
    std::istringstream lines(slurp(patches / "manifest.csv"));
    for (std::string line; std::getline(lines, line);) {
        n += !line.empty();
    }
    CHECK(n == 9);

    const auto aug = work_dir() / "augmented";
    CHECK(run("augment --data " + q(patches) + " --out " + q(aug)).code == 0);
    std::istringstream aug_lines(slurp(aug / "manifest.csv"));
    std::size_t m = 0;
    for (std::string line; std::getline(aug_lines, line);) {
        m += !line.empty();
    }
    CHECK(m == 72);
}
