#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>

#include "coda/io.hpp"
#include "coda/rng.hpp"

using namespace coda;
namespace fs = std::filesystem;

namespace {

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("coda_io_test_" + std::to_string(std::uintptr_t(this)));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
    std::string file(const std::string& name) const { return (path / name).string(); }
};

}  // namespace

TEST_CASE("dmap round-trips bitwise", "[io]") {
    TempDir tmp;
    Rng rng(5);
    Grid<float> m(Shape{1, 1, 7, 9});
    for (auto& v : m.data) v = float(rng.uniform(-10, 10));
    m.data[3] = 0.0f;
    m.data[4] = 1e-30f;

    write_dmap(tmp.file("a.dmap"), m);
    Grid<float> back = read_dmap(tmp.file("a.dmap"));
    CHECK(back.shape == m.shape);
    CHECK(std::memcmp(back.data.data(), m.data.data(), m.data.size() * 4) == 0);

    // layout is fixed: magic + dims + payload
    auto bytes = read_file_bytes(tmp.file("a.dmap"));
    REQUIRE(bytes.size() == 12 + 7 * 9 * 4);
    CHECK(std::memcmp(bytes.data(), "DMAP", 4) == 0);
    CHECK(bytes[4] == 7);  // height, little-endian
    CHECK(bytes[8] == 9);  // width

    CHECK_THROWS_AS(write_dmap(tmp.file("b.dmap"), Grid<float>(Shape{1, 2, 4, 4})),
                    std::invalid_argument);
}

TEST_CASE("dmap rejects corrupt files", "[io]") {
    TempDir tmp;
    write_file_bytes(tmp.file("bad_magic"), {'X', 'M', 'A', 'P', 1, 0, 0, 0, 1, 0, 0, 0});
    CHECK_THROWS_WITH(read_dmap(tmp.file("bad_magic")),
                      Catch::Matchers::ContainsSubstring("bad magic"));

    Grid<float> m(Shape{1, 1, 2, 2}, 1.0f);
    write_dmap(tmp.file("t.dmap"), m);
    auto bytes = read_file_bytes(tmp.file("t.dmap"));
    bytes.pop_back();
    write_file_bytes(tmp.file("trunc.dmap"), bytes);
    CHECK_THROWS_WITH(read_dmap(tmp.file("trunc.dmap")),
                      Catch::Matchers::ContainsSubstring("truncated"));
}

TEST_CASE("checkpoint round-trips names, dims and values", "[io]") {
    TempDir tmp;
    Rng rng(6);
    std::vector<NamedArray> arrays;
    arrays.push_back({"cn.f0c0.w", {4, 1, 3, 3}, std::vector<float>(36)});
    arrays.push_back({"cn.f0c0.b", {4}, std::vector<float>(4)});
    arrays.push_back({"meta.step", {1}, {42.0f}});
    for (auto& a : arrays)
        for (auto& v : a.values) v = float(rng.uniform(-1, 1));

    save_checkpoint(tmp.file("c.ckpt"), arrays);
    auto back = load_checkpoint(tmp.file("c.ckpt"));
    REQUIRE(back.size() == arrays.size());
    for (std::size_t i = 0; i < arrays.size(); ++i) {
        CHECK(back[i].name == arrays[i].name);
        CHECK(back[i].dims == arrays[i].dims);
        CHECK(std::memcmp(back[i].values.data(), arrays[i].values.data(),
                          arrays[i].values.size() * 4) == 0);
    }

    // byte-identical re-save (persistence determinism)
    save_checkpoint(tmp.file("c2.ckpt"), back);
    CHECK(read_file_bytes(tmp.file("c.ckpt")) == read_file_bytes(tmp.file("c2.ckpt")));
}

TEST_CASE("checkpoint rejects bad headers", "[io]") {
    TempDir tmp;
    write_file_bytes(tmp.file("bad"), {'N', 'O', 'P', 'E', 1, 0, 0, 0});
    CHECK_THROWS_WITH(load_checkpoint(tmp.file("bad")),
                      Catch::Matchers::ContainsSubstring("bad magic"));
    write_file_bytes(tmp.file("v9"), {'C', 'K', 'P', 'T', 9, 0, 0, 0});
    CHECK_THROWS_WITH(load_checkpoint(tmp.file("v9")),
                      Catch::Matchers::ContainsSubstring("version"));
}

TEST_CASE("pgm round-trip and ppm read", "[io]") {
    TempDir tmp;
    ImageU8 img;
    img.width = 5;
    img.height = 3;
    img.channels = 1;
    img.pix = {0, 50, 100, 150, 200, 250, 1, 2, 3, 4, 5, 6, 7, 8, 255};
    write_pgm(tmp.file("a.pgm"), img);
    ImageU8 back = read_pnm(tmp.file("a.pgm"));
    CHECK(back.width == 5);
    CHECK(back.height == 3);
    CHECK(back.channels == 1);
    CHECK(back.pix == img.pix);

    // P6 with a comment line
    std::vector<std::uint8_t> ppm = {'P', '6', '\n', '#', ' ', 'x', '\n', '2', ' ', '1',
                                     '\n', '2', '5', '5', '\n', 10, 20, 30, 40, 50, 60};
    write_file_bytes(tmp.file("b.ppm"), ppm);
    ImageU8 rgb = read_pnm(tmp.file("b.ppm"));
    CHECK(rgb.channels == 3);
    CHECK(rgb.width == 2);
    CHECK(rgb.pix == std::vector<std::uint8_t>{10, 20, 30, 40, 50, 60});
}

TEST_CASE("png round-trips gray and rgb", "[io][png]") {
    TempDir tmp;
    Rng rng(7);
    for (int channels : {1, 3}) {
        ImageU8 img;
        img.width = 23;
        img.height = 17;
        img.channels = channels;
        img.pix.resize(std::size_t(23) * 17 * channels);
        for (auto& p : img.pix) p = std::uint8_t(rng.uniform_int(256));
        const std::string path = tmp.file("t" + std::to_string(channels) + ".png");
        write_png(path, img);
        ImageU8 back = read_png(path);
        CHECK(back.width == img.width);
        CHECK(back.height == img.height);
        CHECK(back.channels == channels);
        CHECK(back.pix == img.pix);
    }
}

TEST_CASE("png writer emits deterministic bytes", "[io][png]") {
    TempDir tmp;
    ImageU8 img;
    img.width = 9;
    img.height = 4;
    img.channels = 1;
    img.pix.resize(36);
    for (std::size_t i = 0; i < img.pix.size(); ++i) img.pix[i] = std::uint8_t(i * 7);
    write_png(tmp.file("a.png"), img);
    write_png(tmp.file("b.png"), img);
    CHECK(read_file_bytes(tmp.file("a.png")) == read_file_bytes(tmp.file("b.png")));
}

TEST_CASE("png reader handles all five row filters", "[io][png]") {
    // Hand-build a 3-wide, 5-tall grayscale PNG using one filter per row.
    TempDir tmp;
    const int W = 3, H = 5;
    std::uint8_t pix[H][W] = {
        {10, 20, 30}, {40, 60, 90}, {5, 5, 5}, {100, 110, 130}, {200, 190, 180}};
    std::vector<std::uint8_t> raw;
    auto a_of = [&](int y, int x) { return x > 0 ? int(pix[y][x - 1]) : 0; };
    auto b_of = [&](int y, int x) { return y > 0 ? int(pix[y - 1][x]) : 0; };
    auto c_of = [&](int y, int x) { return (y > 0 && x > 0) ? int(pix[y - 1][x - 1]) : 0; };
    for (int y = 0; y < H; ++y) {
        const int f = y % 5;
        raw.push_back(std::uint8_t(f));
        for (int x = 0; x < W; ++x) {
            int v = pix[y][x];
            switch (f) {
                case 0: break;
                case 1: v -= a_of(y, x); break;
                case 2: v -= b_of(y, x); break;
                case 3: v -= (a_of(y, x) + b_of(y, x)) / 2; break;
                case 4: {
                    int a = a_of(y, x), b = b_of(y, x), c = c_of(y, x);
                    int p = a + b - c;
                    int pa = std::abs(p - a), pb = std::abs(p - b), pc = std::abs(p - c);
                    v -= (pa <= pb && pa <= pc) ? a : (pb <= pc ? b : c);
                    break;
                }
            }
            raw.push_back(std::uint8_t(v & 0xff));
        }
    }
    uLongf clen = compressBound(uLong(raw.size()));
    std::vector<std::uint8_t> comp(clen);
    REQUIRE(compress2(comp.data(), &clen, raw.data(), uLong(raw.size()), 6) == Z_OK);
    comp.resize(clen);

    std::vector<std::uint8_t> out = {0x89, 'P', 'N', 'G', 0x0d, 0x0a, 0x1a, 0x0a};
    std::vector<std::uint8_t> ihdr;
    coda::detail::put_u32be(ihdr, W);
    coda::detail::put_u32be(ihdr, H);
    ihdr.insert(ihdr.end(), {8, 0, 0, 0, 0});
    coda::detail::png_chunk(out, "IHDR", ihdr);
    coda::detail::png_chunk(out, "IDAT", comp);
    coda::detail::png_chunk(out, "IEND", {});
    write_file_bytes(tmp.file("filters.png"), out);

    ImageU8 img = read_png(tmp.file("filters.png"));
    REQUIRE(img.width == W);
    REQUIRE(img.height == H);
    for (int y = 0; y < H; ++y)
        for (int x = 0; x < W; ++x) CHECK(int(img.pix[std::size_t(y) * W + x]) == int(pix[y][x]));
}

TEST_CASE("image_to_grid scales to unit range", "[io]") {
    ImageU8 img;
    img.width = 2;
    img.height = 1;
    img.channels = 3;
    img.pix = {0, 128, 255, 51, 102, 204};
    Grid<float> g = image_to_grid<float>(img);
    CHECK(g.shape == (Shape{1, 3, 1, 2}));
    CHECK(g.at(0, 0, 0, 0) == 0.0f);
    CHECK(g.at(0, 2, 0, 0) == 1.0f);
    CHECK(g.at(0, 0, 0, 1) == Catch::Approx(51.0 / 255.0));
}

TEST_CASE("annotations round-trip", "[io]") {
    TempDir tmp;
    std::vector<PointAnnotation> anns;
    anns.push_back({"img_a", 100, 80, {{0.0, 0.0}, {99.9, 79.5}, {50.25, 40.75}}, ""});
    anns.push_back({"img_b", 64, 64, {}, "masks/img_b.pgm"});
    save_annotations(anns, tmp.file("ann.json"));
    auto back = load_annotations(tmp.file("ann.json"));
    REQUIRE(back.size() == 2);
    CHECK(back[0] == anns[0]);
    CHECK(back[1] == anns[1]);
}

TEST_CASE("annotations reject out-of-bounds and malformed input", "[io]") {
    TempDir tmp;

    // point exactly at (W, H) violates the half-open bounds
    write_file_text(tmp.file("oob.json"),
                    R"([{"image_id":"x","width":10,"height":10,"points":[[10.0,5.0]]}])");
    CHECK_THROWS_WITH(load_annotations(tmp.file("oob.json")),
                      Catch::Matchers::ContainsSubstring("points[0]"));

    write_file_text(tmp.file("neg.json"),
                    R"([{"image_id":"x","width":10,"height":10,"points":[[3.0,-0.1]]}])");
    CHECK_THROWS(load_annotations(tmp.file("neg.json")));

    write_file_text(tmp.file("bad.json"), "{not json");
    CHECK_THROWS_WITH(load_annotations(tmp.file("bad.json")),
                      Catch::Matchers::ContainsSubstring("bad.json"));

    write_file_text(tmp.file("nofield.json"), R"([{"image_id":"x","width":10,"points":[]}])");
    CHECK_THROWS_WITH(load_annotations(tmp.file("nofield.json")),
                      Catch::Matchers::ContainsSubstring("annotations[0]"));

    write_file_text(tmp.file("badpt.json"),
                    R"([{"image_id":"x","width":10,"height":10,"points":[[1.0]]}])");
    CHECK_THROWS_WITH(load_annotations(tmp.file("badpt.json")),
                      Catch::Matchers::ContainsSubstring("[x, y]"));

    // save validates too
    CHECK_THROWS(save_annotations({{"x", 10, 10, {{10.0, 0.0}}, ""}}, tmp.file("out.json")));
}
