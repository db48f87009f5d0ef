#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cstdio>
#include <filesystem>
#include <fstream>

#include "testutil.hpp"

using namespace moss;

namespace {

std::string tmp_path(const std::string& name) {
    auto dir = std::filesystem::temp_directory_path() / "mossfuse_imagery_tests";
    std::filesystem::create_directories(dir);
    return (dir / name).string();
}

}  // namespace

TEST_CASE("load_image on a hand-written 2x2x3 file") {
    const std::string base = tmp_path("tiny");
    {
        std::ofstream h(base + ".json");
        h << R"({"height":2,"width":2,"bands":3})";
        std::ofstream p(base + ".bsq", std::ios::binary);
        for (int i = 0; i < 12; ++i) {
            float v = static_cast<float>(i);
            p.write(reinterpret_cast<const char*>(&v), sizeof(float));
        }
    }
    SpectralImage img = load_image(base);
    CHECK(img.height == 2);
    CHECK(img.width == 2);
    CHECK(img.bands == 3);
    CHECK(img.data[0] == 0.0f);
    CHECK(img.data[11] == 11.0f);
}

TEST_CASE("save/load round trip is bitwise, wavelengths included") {
    SpectralImage img = tu::random_image(8, 8, 31, 7);
    std::vector<double> wl(31);
    for (int i = 0; i < 31; ++i) wl[i] = 400.0 + 10.0 * i;
    img.wavelengths_nm = wl;
    const std::string base = tmp_path("round");
    save_image(img, base);
    SpectralImage back = load_image(base + ".bsq");  // .bsq suffix accepted
    CHECK(back.data == img.data);
    REQUIRE(back.wavelengths_nm.has_value());
    CHECK(*back.wavelengths_nm == wl);

    // overwriting truncates and succeeds
    SpectralImage smaller = tu::random_image(4, 4, 2, 8);
    save_image(smaller, base);
    SpectralImage back2 = load_image(base);
    CHECK(back2.data == smaller.data);
}

TEST_CASE("header/payload integrity errors") {
    const std::string base = tmp_path("broken");
    {
        std::ofstream h(base + ".json");
        h << R"({"height":4,"width":4,"bands":2})";
        std::ofstream p(base + ".bsq", std::ios::binary);
        for (int i = 0; i < 31; ++i) {  // 31 floats instead of 32
            float v = 0.0f;
            p.write(reinterpret_cast<const char*>(&v), sizeof(float));
        }
    }
    CHECK_THROWS_AS(load_image(base), IntegrityError);

    const std::string corrupt = tmp_path("corrupt");
    {
        std::ofstream h(corrupt + ".json");
        h << "{not json";
        std::ofstream p(corrupt + ".bsq", std::ios::binary);
    }
    CHECK_THROWS_AS(load_image(corrupt), FormatError);
    CHECK_THROWS_AS(load_image(tmp_path("missing")), FormatError);
}

TEST_CASE("normalize_minmax") {
    SpectralImage img(1, 3, 1);
    img.data = {0.0f, 5.0f, 10.0f};
    SpectralImage n = normalize_minmax(img);
    CHECK(n.data[0] == 0.0f);
    CHECK(n.data[1] == 0.5f);
    CHECK(n.data[2] == 1.0f);

    // already [0,1] stays unchanged
    SpectralImage u(1, 2, 1);
    u.data = {0.0f, 1.0f};
    CHECK(normalize_minmax(u).data == u.data);

    SpectralImage c(2, 2, 1, 0.7f);
    CHECK_THROWS_AS(normalize_minmax(c), DegenerateError);
}

TEST_CASE("normalize_minmax is idempotent on its own output") {
    SpectralImage img = tu::random_image(6, 5, 4, 17, -3.0f, 9.0f);
    SpectralImage once = normalize_minmax(img);
    SpectralImage twice = normalize_minmax(once);
    for (size_t i = 0; i < once.data.size(); ++i)
        CHECK(std::fabs(once.data[i] - twice.data[i]) < 1e-7f);
}

TEST_CASE("crop_patches counts and contents") {
    SpectralImage big = tu::random_image(256, 256, 2, 21);
    CHECK(crop_patches(big, 128, 128).size() == 4);

    SpectralImage exact = tu::random_image(128, 128, 2, 22);
    auto one = crop_patches(exact, 128, 128);
    REQUIRE(one.size() == 1);
    CHECK(one[0].data == exact.data);

    // 200x200, size 128, stride 64: offsets {0, 64} each axis -> 4 patches
    SpectralImage mid = tu::random_image(200, 200, 1, 23);
    auto four = crop_patches(mid, 128, 64);
    CHECK(four.size() == 4);
    CHECK(four[3].at(0, 0, 0) == mid.at(0, 64, 64));

    CHECK_THROWS_AS(crop_patches(exact, 200, 1), ArgumentError);
    CHECK_THROWS_AS(crop_patches(exact, 16, 0), ArgumentError);
}

TEST_CASE("crop_patches count formula on random geometries") {
    std::mt19937_64 eng(5);
    for (int t = 0; t < 20; ++t) {
        const int H = 16 + static_cast<int>(eng() % 60);
        const int W = 16 + static_cast<int>(eng() % 60);
        const int size = 4 + static_cast<int>(eng() % 12);
        const int stride = 1 + static_cast<int>(eng() % 9);
        SpectralImage img(H, W, 1, 0.5f);
        img.data[0] = 0.0f;  // avoid accidental constant-image pitfalls elsewhere
        const auto patches = crop_patches(img, size, stride);
        const long expect = (static_cast<long>(H - size) / stride + 1) *
                            (static_cast<long>(W - size) / stride + 1);
        CHECK(static_cast<long>(patches.size()) == expect);
    }
}

TEST_CASE("upsample: identity, constants, and the direct-evaluation oracle") {
    SpectralImage img = tu::random_image(6, 6, 3, 31);
    SpectralImage same = upsample(img, 1);
    CHECK(same.data == img.data);

    SpectralImage flat(5, 4, 2, 0.37f);
    SpectralImage up = upsample(flat, 3);
    CHECK(up.height == 15);
    CHECK(up.width == 12);
    for (float v : up.data) CHECK(std::fabs(v - 0.37f) < 1e-6f);

    CHECK_THROWS_AS(upsample(img, 0), ArgumentError);

    // 2x2 ramp upsampled x2 against the direct 4x4-tap evaluation
    SpectralImage ramp(2, 2, 1);
    ramp.data = {0.0f, 1.0f, 2.0f, 3.0f};
    SpectralImage r2 = upsample(ramp, 2);
    std::vector<double> src = {0.0, 1.0, 2.0, 3.0};
    for (int y = 0; y < 4; ++y)
        for (int x = 0; x < 4; ++x) {
            const double sy = (y + 0.5) / 2.0 - 0.5;
            const double sx = (x + 0.5) / 2.0 - 0.5;
            const double want = tu::bicubic_point_naive(src, 2, 2, sy, sx);
            CHECK(r2.at(0, y, x) == doctest::Approx(want).epsilon(1e-6));
        }
}

TEST_CASE("upsample matches the direct oracle on a random image") {
    SpectralImage img = tu::random_image(7, 5, 2, 41);
    SpectralImage up = upsample(img, 4);
    std::vector<double> src(img.plane());
    for (int b = 0; b < img.bands; ++b) {
        for (long i = 0; i < img.plane(); ++i) src[i] = img.band_ptr(b)[i];
        for (int y = 0; y < up.height; ++y)
            for (int x = 0; x < up.width; ++x) {
                const double sy = (y + 0.5) / 4.0 - 0.5;
                const double sx = (x + 0.5) / 4.0 - 0.5;
                CHECK(up.at(b, y, x) ==
                      doctest::Approx(tu::bicubic_point_naive(src, 7, 5, sy, sx)).epsilon(1e-5));
            }
    }
}

TEST_CASE("validate rejects bad containers") {
    SpectralImage img = tu::random_image(3, 3, 2, 51);
    img.data.pop_back();
    CHECK_THROWS_AS(img.validate(), ArgumentError);

    SpectralImage wl = tu::random_image(3, 3, 2, 52);
    wl.wavelengths_nm = std::vector<double>{500.0, 400.0};
    CHECK_THROWS_AS(wl.validate(), ArgumentError);
    wl.wavelengths_nm = std::vector<double>{400.0, 500.0, 600.0};
    CHECK_THROWS_AS(wl.validate(), ArgumentError);

    SceneTriplet t;
    t.hrmsi = tu::random_image(8, 8, 3, 53);
    t.lrhsi = tu::random_image(4, 4, 7, 54);
    t.scale = 2;
    CHECK_NOTHROW(t.validate());
    t.scale = 4;
    CHECK_THROWS_AS(t.validate(), ArgumentError);
}
