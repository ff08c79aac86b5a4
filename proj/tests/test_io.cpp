#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstring>
#include <filesystem>
#include <fstream>

#include "helpers.hpp"
#include "itarflow/checkpoint.hpp"
#include "itarflow/config.hpp"
#include "itarflow/dataset.hpp"
#include "itarflow/image_io.hpp"

using namespace itarflow;

namespace {

std::string temp_path(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "itarflow_io_test";
    std::filesystem::create_directories(dir);
    return (dir / name).string();
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

void spit(const std::string& path, const std::string& bytes) {
    std::ofstream f(path, std::ios::binary);
    f.write(bytes.data(), bytes.size());
}

}  // namespace

TEST_CASE("config defaults and validation") {
    RunConfig cfg = parse_config_text("task = gmm1d\n", "test");
    CHECK(cfg.train.t_min == 0.01);
    CHECK(cfg.train.weight_decay == 1e-4);
    CHECK(cfg.train.beta1 == 0.9);
    CHECK(cfg.train.beta2 == 0.95);
    CHECK(cfg.train.label_dropout == 0.1);
    CHECK(cfg.train.lr_peak == 1e-4);
    CHECK(cfg.preset == "desk");

    CHECK_THROWS_WITH_AS(parse_config_text("task = gmm1d\nbogus = 1\n", "test"),
                         doctest::Contains("unknown key 'bogus'"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_config_text("task = gmm1d\nbogus = 1\n", "test"),
                         doctest::Contains("test:2"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_config_text("task = gmm1d\nt_max = 0.005\n", "test"),
                         doctest::Contains("t_max"), ConfigError);
    CHECK_THROWS_WITH_AS(parse_config_text("out_dir = x\n", "test"),
                         doctest::Contains("task"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("task = gmm1d\nlabel_dropout = 1.0\n", "test"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("task = gmm1d\nbatch_size = 0\n", "test"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("task = nope\n", "test"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("task = gmm1d\ntask = gmm2d\n", "test"), ConfigError);
    CHECK_THROWS_AS(parse_config_text("task = idx-file\n", "test"), ConfigError);

    // comments and blank lines are fine
    RunConfig c2 = parse_config_text("# a run\n\ntask = gmm2d  # inline\nseq_len = 3\n", "test");
    CHECK(c2.task == "gmm2d");
    CHECK(c2.seq_len == 3);
}

TEST_CASE("config round trip") {
    RunConfig cfg = parse_config_text(
        "task = gmm1d\nseq_len = 6\nt_max = 0.7\nbatch_size = 32\npreset = custom\n"
        "block_layers = 2,1,2\nwidth = 24\ncfg_scale = 1.5\nfinal_tweedie = false\nseed = 99\n",
        "test");
    std::string s1 = serialize_config(cfg);
    RunConfig cfg2 = parse_config_text(s1, "reparse");
    CHECK(serialize_config(cfg2) == s1);
    CHECK(cfg2.block_layers == std::vector<int>{2, 1, 2});
    CHECK(cfg2.final_tweedie == false);
    CHECK(cfg2.cfg_scale == 1.5);
}

TEST_CASE("checkpoint round trip is bitwise") {
    RunConfig cfg;
    cfg.task = "gmm1d";
    cfg.preset = "tiny";
    cfg.seq_len = 2;
    ArchSpec arch;
    arch.num_tokens = 2;
    arch.token_dim = 1;
    arch.block_layers = {1, 1};
    arch.width = 16;
    arch.heads = 2;
    arch.time_dim = 8;
    arch.num_classes = 2;
    auto model = testutil::random_stack(arch, 23);
    OptimizerState state;
    state.step_count = 17;
    for (auto& p : model.parameters()) {
        state.m.emplace_back(p.numel(), 0.25f);
        state.v.emplace_back(p.numel(), 0.5f);
    }

    std::string path = temp_path("roundtrip.itar");
    checkpoint_save(model, state, cfg, path);
    auto loaded = checkpoint_load(path);

    auto orig = model.named_parameters();
    auto back = loaded.model.named_parameters();
    REQUIRE(orig.size() == back.size());
    for (size_t i = 0; i < orig.size(); ++i) {
        CHECK(orig[i].first == back[i].first);
        CHECK(orig[i].second.values() == back[i].second.values());
    }
    CHECK(loaded.state.step_count == 17);
    CHECK(loaded.state.m == state.m);
    CHECK(loaded.state.v == state.v);
    CHECK(loaded.config.task == "gmm1d");

    // saving the loaded model reproduces the identical file
    std::string path2 = temp_path("roundtrip2.itar");
    checkpoint_save(loaded.model, loaded.state, loaded.config, path2);
    CHECK(slurp(path) == slurp(path2));
}

TEST_CASE("checkpoint corruption and version checks") {
    RunConfig cfg;
    cfg.task = "gmm1d";
    cfg.preset = "tiny";
    cfg.seq_len = 2;
    ArchSpec arch;
    arch.num_tokens = 2;
    arch.token_dim = 1;
    arch.block_layers = {1};
    arch.width = 16;
    arch.heads = 2;
    arch.time_dim = 8;
    arch.num_classes = 1;
    auto model = testutil::random_stack(arch, 29);
    std::string path = temp_path("corrupt.itar");
    checkpoint_save(model, OptimizerState{}, cfg, path);
    std::string good = slurp(path);

    // golden header: magic + version 1 LE
    CHECK(good.substr(0, 4) == "ITAR");
    CHECK(good[4] == 1);
    CHECK(good[5] == 0);
    CHECK(good[6] == 0);
    CHECK(good[7] == 0);

    // flip one payload byte -> CRC error
    {
        std::string bad = good;
        bad[bad.size() - 10] ^= 0x01;  // inside the payload region
        spit(path, bad);
        try {
            checkpoint_load(path);
            FAIL("expected CRC failure");
        } catch (const CheckpointError& e) {
            CHECK(e.code == CheckpointError::Code::crc_mismatch);
        }
    }

    // bump the version -> refused
    {
        std::string bad = good;
        bad[4] = 2;
        spit(path, bad);
        try {
            checkpoint_load(path);
            FAIL("expected version failure");
        } catch (const CheckpointError& e) {
            CHECK(e.code == CheckpointError::Code::version_mismatch);
        }
    }

    // truncate -> distinct error
    {
        spit(path, good.substr(0, good.size() / 2));
        try {
            checkpoint_load(path);
            FAIL("expected truncation failure");
        } catch (const CheckpointError& e) {
            CHECK(e.code == CheckpointError::Code::truncated);
        }
    }

    // wrong magic
    {
        std::string bad = good;
        bad[0] = 'X';
        spit(path, bad);
        try {
            checkpoint_load(path);
            FAIL("expected magic failure");
        } catch (const CheckpointError& e) {
            CHECK(e.code == CheckpointError::Code::bad_magic);
        }
    }
}

TEST_CASE("image grid emission") {
    std::string path = temp_path("gray.pgm");

    // single all-gray 8x8 sample: P5, constant 128 inside the tile
    std::vector<std::vector<float>> one{std::vector<float>(64, 0.0f)};
    emit_image_grid(one, 8, 8, 1, 1, 1, path);
    std::string bytes = slurp(path);
    CHECK(bytes.substr(0, 2) == "P5");
    RasterImage img = read_raster(path);
    CHECK(img.w == 12);  // 8 + 2 gutters of 2
    CHECK(img.h == 12);
    for (int64_t y = 0; y < 12; ++y)
        for (int64_t x = 0; x < 12; ++x) {
            uint8_t expect = (y >= 2 && y < 10 && x >= 2 && x < 10) ? 128 : 0;
            CHECK(img.pixels[y * 12 + x] == expect);
        }

    // 2x2 grid of 8x8: raster side 2*8 + 3*2 = 22
    std::vector<std::vector<float>> four(4, std::vector<float>(64, 0.5f));
    emit_image_grid(four, 8, 8, 1, 2, 2, path);
    RasterImage grid = read_raster(path);
    CHECK(grid.w == 22);
    CHECK(grid.h == 22);

    // value mapping: -1 -> 0, +1 -> 255, clamped outside
    CHECK(pixel_from_unit(-1.0f) == 0);
    CHECK(pixel_from_unit(1.0f) == 255);
    CHECK(pixel_from_unit(-3.0f) == 0);
    CHECK(pixel_from_unit(2.0f) == 255);

    // count > rows*cols
    CHECK_THROWS_AS(emit_image_grid(four, 8, 8, 1, 1, 2, path), std::invalid_argument);

    // color round trip through P6
    std::string cpath = temp_path("color.ppm");
    std::vector<std::vector<float>> rgb{std::vector<float>(4 * 4 * 3, -1.0f)};
    for (size_t i = 0; i < rgb[0].size(); i += 3) rgb[0][i] = 1.0f;  // red
    emit_image_grid(rgb, 4, 4, 3, 1, 1, cpath);
    RasterImage back = read_raster(cpath);
    CHECK(back.c == 3);
    CHECK(back.pixels[(2 * back.w + 2) * 3 + 0] == 255);
    CHECK(back.pixels[(2 * back.w + 2) * 3 + 1] == 0);
}

TEST_CASE("idx files round trip") {
    IdxImages imgs;
    imgs.count = 3;
    imgs.h = 4;
    imgs.w = 5;
    imgs.pixels.resize(60);
    for (size_t i = 0; i < imgs.pixels.size(); ++i) imgs.pixels[i] = static_cast<uint8_t>(i * 3);
    std::string ipath = temp_path("imgs.idx");
    write_idx_images(imgs, ipath);
    IdxImages back = read_idx_images(ipath);
    CHECK(back.count == 3);
    CHECK(back.h == 4);
    CHECK(back.w == 5);
    CHECK(back.pixels == imgs.pixels);

    std::vector<uint8_t> labels{0, 2, 1};
    std::string lpath = temp_path("labels.idx");
    write_idx_labels(labels, lpath);
    CHECK(read_idx_labels(lpath) == labels);

    CHECK_THROWS(read_idx_labels(ipath));  // wrong magic

    // dataset wiring: pixels map to [-1, 1], patch tokens have the right shape
    RunConfig cfg;
    cfg.task = "idx-file";
    cfg.data_path = ipath;
    cfg.labels_path = lpath;
    cfg.patch_size = 1;
    auto data = make_dataset(cfg);
    CHECK(data->seq_len() == 20);
    CHECK(data->token_dim() == 1);
    CHECK(data->num_classes() == 3);
    auto rng = make_rng(5);
    Batch b = data->batch(2, rng);
    CHECK(b.x.shape() == Shape{2, 20, 1});
    for (float v : b.x.values()) {
        CHECK(v >= -1.0f);
        CHECK(v <= 1.0f);
    }
}

TEST_CASE("procedural datasets") {
    RunConfig cfg;
    cfg.task = "gmm2d";
    cfg.seq_len = 3;
    auto data = make_dataset(cfg);
    CHECK(data->token_dim() == 2);
    CHECK(data->num_classes() == 4);
    CHECK(data->analytic_gmm() != nullptr);
    auto rng = make_rng(6);
    Batch b = data->batch(5, rng);
    CHECK(b.x.shape() == Shape{5, 3, 2});
    for (int64_t l : b.labels) {
        CHECK(l >= 0);
        CHECK(l < 4);
    }

    RunConfig ch;
    ch.task = "checkerboard2d";
    ch.seq_len = 2;
    auto cdata = make_dataset(ch);
    Batch cb = cdata->batch(100, rng);
    for (int64_t i = 0; i < 200; ++i) {
        double x = cb.x.values()[i * 2], y = cb.x.values()[i * 2 + 1];
        int64_t par = (static_cast<int64_t>(std::floor(x)) + static_cast<int64_t>(std::floor(y))) % 2;
        CHECK(par == 0);
    }
}
