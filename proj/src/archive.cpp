#include "neurovid/archive.hpp"

#include <cstdio>
#include <cstring>
#include <filesystem>
#include <fstream>

#include <json.hpp>

namespace neurovid {

namespace {
constexpr char kMagic[5] = {'N', 'F', 'T', 'A', '1'};

void put_u64_le(std::string& out, uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

uint64_t get_u64_le(const unsigned char* p) {
    uint64_t v = 0;
    for (int i = 7; i >= 0; --i) v = (v << 8) | p[i];
    return v;
}
}  // namespace

void NamedTensors::add(const std::string& name, Tensor t) {
    require(!name.empty(), ErrorKind::Validation, "tensor name must be non-empty");
    require(!contains(name), ErrorKind::Validation, "duplicate tensor name: " + name);
    items_.emplace_back(name, std::move(t));
}

bool NamedTensors::contains(const std::string& name) const {
    for (const auto& [n, t] : items_)
        if (n == name) return true;
    return false;
}

const Tensor& NamedTensors::get(const std::string& name) const {
    for (const auto& [n, t] : items_)
        if (n == name) return t;
    fail(ErrorKind::Validation, "no tensor named " + name + " in archive");
}

Tensor& NamedTensors::get(const std::string& name) {
    for (auto& [n, t] : items_)
        if (n == name) return t;
    fail(ErrorKind::Validation, "no tensor named " + name + " in archive");
}

void archive_write(const std::string& path, const NamedTensors& tensors) {
    nlohmann::ordered_json header = nlohmann::ordered_json::array();
    for (const auto& [name, t] : tensors.items()) {
        nlohmann::ordered_json entry;
        entry["name"] = name;
        entry["dtype"] = "f32";
        entry["shape"] = t.shape;
        header.push_back(entry);
    }
    const std::string header_text = header.dump();

    std::string blob;
    blob.reserve(5 + 8 + header_text.size());
    blob.append(kMagic, 5);
    put_u64_le(blob, header_text.size());
    blob += header_text;

    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::binary | std::ios::trunc);
        require(f.good(), ErrorKind::Io, "cannot open " + tmp + " for writing");
        f.write(blob.data(), static_cast<std::streamsize>(blob.size()));
        for (const auto& [name, t] : tensors.items()) {
            static_assert(sizeof(float) == 4);
            // Little-endian host assumed; payload is the raw f32 buffer.
            f.write(reinterpret_cast<const char*>(t.data.data()),
                    static_cast<std::streamsize>(t.data.size() * 4));
        }
        f.flush();
        require(f.good(), ErrorKind::Io, "write failed for " + tmp);
    }
    std::error_code ec;
    std::filesystem::rename(tmp, path, ec);
    require(!ec, ErrorKind::Io, "rename failed for " + path + ": " + ec.message());
}

NamedTensors archive_read(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    require(f.good(), ErrorKind::Io, "cannot open " + path);

    char magic[5];
    f.read(magic, 5);
    require(f.gcount() == 5 && std::memcmp(magic, kMagic, 5) == 0, ErrorKind::Format,
            "bad archive magic in " + path);

    unsigned char lenbuf[8];
    f.read(reinterpret_cast<char*>(lenbuf), 8);
    require(f.gcount() == 8, ErrorKind::Format, "truncated archive header length in " + path);
    const uint64_t header_len = get_u64_le(lenbuf);

    std::string header_text(header_len, '\0');
    f.read(header_text.data(), static_cast<std::streamsize>(header_len));
    require(static_cast<uint64_t>(f.gcount()) == header_len, ErrorKind::Format,
            "truncated archive header in " + path);

    nlohmann::json header;
    try {
        header = nlohmann::json::parse(header_text);
    } catch (const nlohmann::json::exception& e) {
        fail(ErrorKind::Format, std::string("bad archive header JSON: ") + e.what());
    }
    require(header.is_array(), ErrorKind::Format, "archive header must be a JSON array");

    NamedTensors out;
    for (const auto& entry : header) {
        const std::string name = entry.at("name").get<std::string>();
        const std::string dtype = entry.at("dtype").get<std::string>();
        require(dtype == "f32", ErrorKind::Format, "unsupported dtype " + dtype);
        std::vector<int64_t> shape = entry.at("shape").get<std::vector<int64_t>>();
        const int64_t n = Tensor::numel_of(shape);
        std::vector<float> data(static_cast<size_t>(n));
        f.read(reinterpret_cast<char*>(data.data()), static_cast<std::streamsize>(n * 4));
        require(f.gcount() == n * 4, ErrorKind::Format,
                "truncated payload for tensor " + name + " in " + path);
        out.add(name, Tensor(std::move(shape), std::move(data)));
    }
    return out;
}

}  // namespace neurovid
