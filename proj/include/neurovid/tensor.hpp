#pragma once

#include <cmath>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <string>
#include <vector>

#include "neurovid/common.hpp"

namespace neurovid {

// Dense row-major float32 tensor. This is the persistence and interchange
// type for every module; training-time math promotes to double internally.
struct Tensor {
    std::vector<int64_t> shape;
    std::vector<float> data;

    Tensor() = default;
    Tensor(std::vector<int64_t> s, std::vector<float> d)
        : shape(std::move(s)), data(std::move(d)) {
        require(numel_of(shape) == static_cast<int64_t>(data.size()), ErrorKind::Validation,
                "tensor data length does not match shape");
    }

    static Tensor zeros(std::vector<int64_t> s) {
        const int64_t n = numel_of(s);
        return Tensor(std::move(s), std::vector<float>(static_cast<size_t>(n), 0.0f));
    }

    static Tensor full(std::vector<int64_t> s, float v) {
        const int64_t n = numel_of(s);
        return Tensor(std::move(s), std::vector<float>(static_cast<size_t>(n), v));
    }

    static int64_t numel_of(const std::vector<int64_t>& s) {
        int64_t n = 1;
        for (int64_t d : s) {
            require(d > 0, ErrorKind::Validation, "tensor dims must be positive");
            n *= d;
        }
        return n;
    }

    int64_t numel() const { return static_cast<int64_t>(data.size()); }
    int64_t dim(size_t i) const { return shape.at(i); }
    size_t rank() const { return shape.size(); }

    float& at(std::initializer_list<int64_t> idx) { return data[offset(idx)]; }
    float at(std::initializer_list<int64_t> idx) const { return data[offset(idx)]; }

    bool all_finite() const {
        for (float v : data)
            if (!std::isfinite(v)) return false;
        return true;
    }

    bool same_shape(const Tensor& o) const { return shape == o.shape; }

    std::string shape_str() const {
        std::string s = "[";
        for (size_t i = 0; i < shape.size(); ++i) {
            if (i) s += ",";
            s += std::to_string(shape[i]);
        }
        return s + "]";
    }

  private:
    size_t offset(std::initializer_list<int64_t> idx) const {
        size_t off = 0;
        size_t k = 0;
        for (int64_t i : idx) {
            off = off * static_cast<size_t>(shape[k]) + static_cast<size_t>(i);
            ++k;
        }
        return off;
    }
};

}  // namespace neurovid
