#include "doctest.h"

#include <zlib.h>

#include <cstring>
#include <filesystem>

#include "neurovid/common.hpp"
#include "neurovid/util.hpp"

using namespace neurovid;

namespace {

std::filesystem::path tmpdir() {
    auto p = std::filesystem::temp_directory_path() / "neurovid_util_test";
    std::filesystem::create_directories(p);
    return p;
}

}  // namespace

TEST_CASE("sha256 matches published test vectors") {
    CHECK(sha256_hex(std::string("abc")) ==
          "ba7816bf8f01cfea414140de5dae2223b00361a396177a9cb410ff61f20015ad");
    CHECK(sha256_hex(std::string("")) ==
          "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855");
}

TEST_CASE("atomic file writes round trip") {
    const auto path = (tmpdir() / "blob.bin").string();
    std::string content = "hello\0world\n\xff", expect(content);
    write_file_atomic(path, content);
    CHECK(read_file(path) == expect);
    CHECK(sha256_file(path) == sha256_hex(expect));
    CHECK_THROWS_AS(read_file((tmpdir() / "missing").string()), Error);
}

TEST_CASE("png writer emits a decodable image") {
    const int h = 5, w = 7;
    std::vector<uint8_t> rgb(static_cast<size_t>(h * w * 3));
    for (size_t i = 0; i < rgb.size(); ++i) rgb[i] = static_cast<uint8_t>((i * 37) % 251);
    const auto path = (tmpdir() / "img.png").string();
    write_png(path, h, w, rgb);
    const std::string bytes = read_file(path);

    REQUIRE(bytes.size() > 45);
    CHECK(std::memcmp(bytes.data(), "\x89PNG\r\n\x1a\n", 8) == 0);

    // Walk chunks; inflate IDAT and compare to the filtered scanlines.
    size_t pos = 8;
    std::string idat;
    bool saw_ihdr = false, saw_iend = false;
    while (pos + 8 <= bytes.size()) {
        const uint32_t len = (static_cast<uint32_t>(static_cast<uint8_t>(bytes[pos])) << 24) |
                             (static_cast<uint32_t>(static_cast<uint8_t>(bytes[pos + 1])) << 16) |
                             (static_cast<uint32_t>(static_cast<uint8_t>(bytes[pos + 2])) << 8) |
                             static_cast<uint32_t>(static_cast<uint8_t>(bytes[pos + 3]));
        const std::string type = bytes.substr(pos + 4, 4);
        const std::string payload = bytes.substr(pos + 8, len);
        if (type == "IHDR") {
            saw_ihdr = true;
            REQUIRE(len == 13);
            const uint32_t pw = (static_cast<uint8_t>(payload[0]) << 24) |
                                (static_cast<uint8_t>(payload[1]) << 16) |
                                (static_cast<uint8_t>(payload[2]) << 8) |
                                static_cast<uint8_t>(payload[3]);
            const uint32_t ph = (static_cast<uint8_t>(payload[4]) << 24) |
                                (static_cast<uint8_t>(payload[5]) << 16) |
                                (static_cast<uint8_t>(payload[6]) << 8) |
                                static_cast<uint8_t>(payload[7]);
            CHECK(pw == static_cast<uint32_t>(w));
            CHECK(ph == static_cast<uint32_t>(h));
            CHECK(static_cast<uint8_t>(payload[8]) == 8);   // bit depth
            CHECK(static_cast<uint8_t>(payload[9]) == 2);   // RGB
        } else if (type == "IDAT") {
            idat += payload;
        } else if (type == "IEND") {
            saw_iend = true;
        }
        pos += 8 + len + 4;
    }
    CHECK(saw_ihdr);
    CHECK(saw_iend);

    std::string raw(static_cast<size_t>(h) * (static_cast<size_t>(w) * 3 + 1), '\0');
    uLongf rawlen = static_cast<uLongf>(raw.size());
    REQUIRE(uncompress(reinterpret_cast<Bytef*>(raw.data()), &rawlen,
                       reinterpret_cast<const Bytef*>(idat.data()),
                       static_cast<uLong>(idat.size())) == Z_OK);
    REQUIRE(rawlen == raw.size());
    for (int y = 0; y < h; ++y) {
        CHECK(raw[static_cast<size_t>(y) * (w * 3 + 1)] == 0);  // filter byte
        for (int i = 0; i < w * 3; ++i)
            CHECK(static_cast<uint8_t>(raw[static_cast<size_t>(y) * (w * 3 + 1) + 1 + i]) ==
                  rgb[static_cast<size_t>(y * w * 3 + i)]);
    }

    // Determinism: rewriting gives identical bytes.
    const auto path2 = (tmpdir() / "img2.png").string();
    write_png(path2, h, w, rgb);
    CHECK(read_file(path2) == bytes);
}

TEST_CASE("gif writer emits a well-formed animation") {
    const int h = 4, w = 6;
    std::vector<std::vector<uint8_t>> frames;
    for (int f = 0; f < 3; ++f) {
        std::vector<uint8_t> rgb(static_cast<size_t>(h * w * 3));
        for (size_t i = 0; i < rgb.size(); ++i)
            rgb[i] = static_cast<uint8_t>((i * 11 + static_cast<size_t>(f) * 79) % 256);
        frames.push_back(std::move(rgb));
    }
    const auto path = (tmpdir() / "anim.gif").string();
    write_gif(path, h, w, frames, 33);
    const std::string bytes = read_file(path);
    REQUIRE(bytes.size() > 6 + 7 + 768);
    CHECK(bytes.substr(0, 6) == "GIF89a");
    CHECK(static_cast<uint8_t>(bytes[6]) == w);
    CHECK(static_cast<uint8_t>(bytes[8]) == h);
    CHECK(static_cast<uint8_t>(bytes.back()) == 0x3b);
    // Three image descriptors, one per frame.
    int descriptors = 0;
    for (size_t i = 6 + 7 + 768; i + 9 < bytes.size(); ++i)
        if (static_cast<uint8_t>(bytes[i]) == 0x2c &&
            static_cast<uint8_t>(bytes[i + 5]) == w % 256 &&
            static_cast<uint8_t>(bytes[i + 7]) == h % 256)
            ++descriptors;
    CHECK(descriptors == 3);

    const auto path2 = (tmpdir() / "anim2.gif").string();
    write_gif(path2, h, w, frames, 33);
    CHECK(read_file(path2) == bytes);

    CHECK_THROWS_AS(write_gif(path, h, w, {}, 10), Error);
}

TEST_CASE("csv emission, parsing and escaping") {
    CHECK(csv_line({"a", "b"}) == "a,b\n");
    CHECK(csv_line({"a,b", "c\"d", "e\nf"}) == "\"a,b\",\"c\"\"d\",\"e\nf\"\n");

    const auto path = (tmpdir() / "t.csv").string();
    std::vector<std::vector<std::string>> rows{{"1", "x,y", "2.5"}, {"2", "q\"", "-1"}};
    write_csv(path, {"id", "label", "value"}, rows);
    auto parsed = parse_csv(read_file(path));
    REQUIRE(parsed.size() == 3);
    CHECK(parsed[0] == std::vector<std::string>({"id", "label", "value"}));
    CHECK(parsed[1] == rows[0]);
    CHECK(parsed[2] == rows[1]);

    CHECK_THROWS_AS(write_csv(path, {"a"}, {{"1", "2"}}), Error);
    CHECK_THROWS_AS(parse_csv("\"unterminated"), Error);
}

TEST_CASE("fmt_double round trips representative values") {
    for (double v : {0.0, 1.0, -1.5, 0.1, 3.141592653589793, 1e-300, -2.5e17, 0.5686274766921997}) {
        const std::string s = fmt_double(v);
        CHECK(std::stod(s) == v);
    }
}
