#pragma once

#include <cstdint>
#include <string>
#include <vector>

namespace neurovid {

// SHA-256 as lowercase hex.
std::string sha256_hex(const void* data, size_t len);
std::string sha256_hex(const std::string& bytes);
std::string sha256_file(const std::string& path);

// Whole-file helpers; writes are atomic (temp file + rename).
std::string read_file(const std::string& path);
void write_file_atomic(const std::string& path, const std::string& content);

// RGB8 image/animation writers. `rgb` is row-major H*W*3.
void write_png(const std::string& path, int height, int width,
               const std::vector<uint8_t>& rgb);
// Animated GIF over a fixed 252-color cube palette; delay in centiseconds.
void write_gif(const std::string& path, int height, int width,
               const std::vector<std::vector<uint8_t>>& frames, int delay_cs);

// Minimal CSV emission; fields are escaped per RFC 4180 when needed.
std::string csv_line(const std::vector<std::string>& fields);
void write_csv(const std::string& path, const std::vector<std::string>& header,
               const std::vector<std::vector<std::string>>& rows);
std::vector<std::vector<std::string>> parse_csv(const std::string& text);

// Fixed-format float for CSV cells: shortest round-trip-stable decimal.
std::string fmt_double(double v);

}  // namespace neurovid
