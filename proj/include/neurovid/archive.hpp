#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "neurovid/tensor.hpp"

namespace neurovid {

// Ordered collection of named tensors; order is preserved through the
// archive so read order always matches header order.
class NamedTensors {
  public:
    void add(const std::string& name, Tensor t);
    bool contains(const std::string& name) const;
    const Tensor& get(const std::string& name) const;
    Tensor& get(const std::string& name);
    const std::vector<std::pair<std::string, Tensor>>& items() const { return items_; }
    size_t size() const { return items_.size(); }

  private:
    std::vector<std::pair<std::string, Tensor>> items_;
};

// On-disk tensor archive:
//   magic "NFTA1" | u64 LE header length | UTF-8 JSON header | f32 LE payloads
// Header is a JSON array of {"name","dtype":"f32","shape"} entries; payloads
// follow in header order. Writes go through a temp file and a rename.
void archive_write(const std::string& path, const NamedTensors& tensors);
NamedTensors archive_read(const std::string& path);

}  // namespace neurovid
