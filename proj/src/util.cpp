#include "neurovid/util.hpp"

#include <openssl/evp.h>
#include <zlib.h>

#include <array>
#include <charconv>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <unordered_map>

#include "neurovid/common.hpp"

namespace neurovid {

std::string sha256_hex(const void* data, size_t len) {
    unsigned char digest[EVP_MAX_MD_SIZE];
    unsigned int dlen = 0;
    EVP_MD_CTX* ctx = EVP_MD_CTX_new();
    require(ctx != nullptr, ErrorKind::Numeric, "EVP context allocation failed");
    EVP_DigestInit_ex(ctx, EVP_sha256(), nullptr);
    EVP_DigestUpdate(ctx, data, len);
    EVP_DigestFinal_ex(ctx, digest, &dlen);
    EVP_MD_CTX_free(ctx);
    static const char* hex = "0123456789abcdef";
    std::string out;
    out.reserve(dlen * 2);
    for (unsigned int i = 0; i < dlen; ++i) {
        out.push_back(hex[digest[i] >> 4]);
        out.push_back(hex[digest[i] & 0xf]);
    }
    return out;
}

std::string sha256_hex(const std::string& bytes) { return sha256_hex(bytes.data(), bytes.size()); }

std::string sha256_file(const std::string& path) { return sha256_hex(read_file(path)); }

std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    require(in.good(), ErrorKind::Io, "cannot open " + path);
    std::string out(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>{});
    require(!in.bad(), ErrorKind::Io, "read failed for " + path);
    return out;
}

void write_file_atomic(const std::string& path, const std::string& content) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        require(out.good(), ErrorKind::Io, "cannot open " + tmp);
        out.write(content.data(), static_cast<std::streamsize>(content.size()));
        require(out.good(), ErrorKind::Io, "write failed for " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    require(!ec, ErrorKind::Io, "rename failed for " + path + ": " + ec.message());
}

namespace {

void put_u32_be(std::string& out, uint32_t v) {
    out.push_back(static_cast<char>(v >> 24));
    out.push_back(static_cast<char>(v >> 16));
    out.push_back(static_cast<char>(v >> 8));
    out.push_back(static_cast<char>(v));
}

void png_chunk(std::string& out, const char type[4], const std::string& payload) {
    put_u32_be(out, static_cast<uint32_t>(payload.size()));
    std::string body(type, 4);
    body += payload;
    out += body;
    const uint32_t crc = static_cast<uint32_t>(
        crc32(0, reinterpret_cast<const Bytef*>(body.data()), static_cast<uInt>(body.size())));
    put_u32_be(out, crc);
}

}  // namespace

void write_png(const std::string& path, int height, int width, const std::vector<uint8_t>& rgb) {
    require(height > 0 && width > 0, ErrorKind::Validation, "png: empty image");
    require(rgb.size() == static_cast<size_t>(height) * static_cast<size_t>(width) * 3,
            ErrorKind::Validation, "png: buffer size mismatch");

    std::string raw;
    raw.reserve(static_cast<size_t>(height) * (static_cast<size_t>(width) * 3 + 1));
    for (int y = 0; y < height; ++y) {
        raw.push_back('\0');  // filter type 0
        raw.append(reinterpret_cast<const char*>(rgb.data() + static_cast<size_t>(y) * width * 3),
                   static_cast<size_t>(width) * 3);
    }
    uLongf bound = compressBound(static_cast<uLong>(raw.size()));
    std::string compressed(bound, '\0');
    const int rc = compress2(reinterpret_cast<Bytef*>(compressed.data()), &bound,
                             reinterpret_cast<const Bytef*>(raw.data()),
                             static_cast<uLong>(raw.size()), 9);
    require(rc == Z_OK, ErrorKind::Numeric, "png: deflate failed");
    compressed.resize(bound);

    std::string out("\x89PNG\r\n\x1a\n", 8);
    std::string ihdr;
    put_u32_be(ihdr, static_cast<uint32_t>(width));
    put_u32_be(ihdr, static_cast<uint32_t>(height));
    ihdr += std::string("\x08\x02\x00\x00\x00", 5);  // 8-bit RGB
    png_chunk(out, "IHDR", ihdr);
    png_chunk(out, "IDAT", compressed);
    png_chunk(out, "IEND", "");
    write_file_atomic(path, out);
}

namespace {

// 6x7x6 color cube (252 entries) — enough for flat-shaded synthetic frames.
constexpr int kRLevels = 6, kGLevels = 7, kBLevels = 6;

uint8_t quant(uint8_t v, int levels) {
    int q = v * levels / 256;
    if (q >= levels) q = levels - 1;
    return static_cast<uint8_t>(q);
}

uint8_t palette_index(uint8_t r, uint8_t g, uint8_t b) {
    return static_cast<uint8_t>((quant(r, kRLevels) * kGLevels + quant(g, kGLevels)) * kBLevels +
                                quant(b, kBLevels));
}

uint8_t level_value(int q, int levels) {
    return static_cast<uint8_t>(q * 255 / (levels - 1));
}

// GIF-variant LZW with variable code width, clear at 4096 codes.
std::string gif_lzw(const std::vector<uint8_t>& indices) {
    constexpr int kMinCodeSize = 8;
    constexpr int kClear = 1 << kMinCodeSize;  // 256
    constexpr int kEnd = kClear + 1;

    std::string out;
    uint32_t bitbuf = 0;
    int bitcount = 0;
    int codesize = kMinCodeSize + 1;
    auto emit = [&](int code) {
        bitbuf |= static_cast<uint32_t>(code) << bitcount;
        bitcount += codesize;
        while (bitcount >= 8) {
            out.push_back(static_cast<char>(bitbuf & 0xff));
            bitbuf >>= 8;
            bitcount -= 8;
        }
    };

    std::unordered_map<uint32_t, int> table;
    int next_code = kEnd + 1;
    auto reset_table = [&] {
        table.clear();
        next_code = kEnd + 1;
        codesize = kMinCodeSize + 1;
    };

    emit(kClear);
    reset_table();
    int prefix = -1;
    for (uint8_t sym : indices) {
        if (prefix < 0) {
            prefix = sym;
            continue;
        }
        const uint32_t key = (static_cast<uint32_t>(prefix) << 8) | sym;
        auto it = table.find(key);
        if (it != table.end()) {
            prefix = it->second;
            continue;
        }
        emit(prefix);
        table[key] = next_code++;
        if (next_code - 1 == (1 << codesize) && codesize < 12) ++codesize;
        if (next_code >= 4096) {
            emit(kClear);
            reset_table();
        }
        prefix = sym;
    }
    if (prefix >= 0) emit(prefix);
    emit(kEnd);
    if (bitcount > 0) out.push_back(static_cast<char>(bitbuf & 0xff));

    // Chop into <=255-byte sub-blocks.
    std::string blocks;
    blocks.push_back(static_cast<char>(kMinCodeSize));
    size_t pos = 0;
    while (pos < out.size()) {
        const size_t n = std::min<size_t>(255, out.size() - pos);
        blocks.push_back(static_cast<char>(n));
        blocks.append(out, pos, n);
        pos += n;
    }
    blocks.push_back('\0');
    return blocks;
}

void put_u16_le(std::string& out, uint16_t v) {
    out.push_back(static_cast<char>(v & 0xff));
    out.push_back(static_cast<char>(v >> 8));
}

}  // namespace

void write_gif(const std::string& path, int height, int width,
               const std::vector<std::vector<uint8_t>>& frames, int delay_cs) {
    require(height > 0 && width > 0, ErrorKind::Validation, "gif: empty image");
    require(!frames.empty(), ErrorKind::Validation, "gif: no frames");
    const size_t frame_bytes = static_cast<size_t>(height) * static_cast<size_t>(width) * 3;
    for (const auto& f : frames)
        require(f.size() == frame_bytes, ErrorKind::Validation, "gif: frame size mismatch");

    std::string out = "GIF89a";
    put_u16_le(out, static_cast<uint16_t>(width));
    put_u16_le(out, static_cast<uint16_t>(height));
    out.push_back(static_cast<char>(0xf7));  // global color table, 256 entries, 8-bit
    out.push_back('\0');                     // background color index
    out.push_back('\0');                     // no aspect ratio

    for (int i = 0; i < 256; ++i) {
        if (i < kRLevels * kGLevels * kBLevels) {
            const int r = i / (kGLevels * kBLevels);
            const int g = (i / kBLevels) % kGLevels;
            const int b = i % kBLevels;
            out.push_back(static_cast<char>(level_value(r, kRLevels)));
            out.push_back(static_cast<char>(level_value(g, kGLevels)));
            out.push_back(static_cast<char>(level_value(b, kBLevels)));
        } else {
            out.append(3, '\0');
        }
    }

    // Loop forever.
    out += std::string("\x21\xff\x0b", 3);
    out += "NETSCAPE2.0";
    out += std::string("\x03\x01", 2);
    put_u16_le(out, 0);
    out.push_back('\0');

    for (const auto& frame : frames) {
        out += std::string("\x21\xf9\x04\x04", 4);  // graphic control, no transparency
        put_u16_le(out, static_cast<uint16_t>(delay_cs));
        out.append(2, '\0');

        out.push_back(0x2c);  // image descriptor
        put_u16_le(out, 0);
        put_u16_le(out, 0);
        put_u16_le(out, static_cast<uint16_t>(width));
        put_u16_le(out, static_cast<uint16_t>(height));
        out.push_back('\0');  // no local color table

        std::vector<uint8_t> indices(static_cast<size_t>(height) * width);
        for (size_t p = 0; p < indices.size(); ++p)
            indices[p] = palette_index(frame[3 * p], frame[3 * p + 1], frame[3 * p + 2]);
        out += gif_lzw(indices);
    }
    out.push_back(0x3b);
    write_file_atomic(path, out);
}

std::string csv_line(const std::vector<std::string>& fields) {
    std::string out;
    for (size_t i = 0; i < fields.size(); ++i) {
        if (i) out.push_back(',');
        const std::string& f = fields[i];
        if (f.find_first_of(",\"\n") != std::string::npos) {
            out.push_back('"');
            for (char c : f) {
                if (c == '"') out.push_back('"');
                out.push_back(c);
            }
            out.push_back('"');
        } else {
            out += f;
        }
    }
    out.push_back('\n');
    return out;
}

void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows) {
    std::string out = csv_line(header);
    for (const auto& row : rows) {
        require(row.size() == header.size(), ErrorKind::Validation,
                "csv row width does not match header");
        out += csv_line(row);
    }
    write_file_atomic(path, out);
}

std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> row;
    std::string field;
    bool quoted = false;
    for (size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    field.push_back('"');
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                field.push_back(c);
            }
        } else if (c == '"' && field.empty()) {
            quoted = true;
        } else if (c == ',') {
            row.push_back(std::move(field));
            field.clear();
        } else if (c == '\n') {
            row.push_back(std::move(field));
            field.clear();
            rows.push_back(std::move(row));
            row.clear();
        } else if (c != '\r') {
            field.push_back(c);
        }
    }
    if (!field.empty() || !row.empty()) {
        row.push_back(std::move(field));
        rows.push_back(std::move(row));
    }
    require(!quoted, ErrorKind::Format, "csv: unterminated quote");
    return rows;
}

std::string fmt_double(double v) {
    std::array<char, 32> buf;
    const auto res = std::to_chars(buf.data(), buf.data() + buf.size(), v);
    require(res.ec == std::errc{}, ErrorKind::Numeric, "double formatting failed");
    return std::string(buf.data(), res.ptr);
}

}  // namespace neurovid
