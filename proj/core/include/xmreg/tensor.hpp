#pragma once

#include <cassert>
#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "xmreg/rng.hpp"

namespace xmreg {

/// Dense row-major double tensor, up to 4 dims. Image batches are NCHW,
/// single images CHW. Copy is a deep copy.
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int64_t> shape) : shape_(std::move(shape)) {
        data_.assign(static_cast<size_t>(numel_of(shape_)), 0.0);
    }
    Tensor(std::initializer_list<int64_t> shape) : Tensor(std::vector<int64_t>(shape)) {}

    static Tensor zeros(std::vector<int64_t> shape) { return Tensor(std::move(shape)); }

    static Tensor full(std::vector<int64_t> shape, double v) {
        Tensor t(std::move(shape));
        t.fill(v);
        return t;
    }

    static Tensor from(std::vector<int64_t> shape, std::vector<double> values) {
        Tensor t;
        t.shape_ = std::move(shape);
        assert(static_cast<int64_t>(values.size()) == numel_of(t.shape_));
        t.data_ = std::move(values);
        return t;
    }

    static Tensor randn(std::vector<int64_t> shape, Rng& rng) {
        Tensor t(std::move(shape));
        for (auto& v : t.data_) v = rng.normal();
        return t;
    }

    static Tensor rand_uniform(std::vector<int64_t> shape, Rng& rng, double lo, double hi) {
        Tensor t(std::move(shape));
        for (auto& v : t.data_) v = rng.uniform(lo, hi);
        return t;
    }

    bool empty() const { return data_.empty(); }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    int ndim() const { return static_cast<int>(shape_.size()); }
    const std::vector<int64_t>& shape() const { return shape_; }
    int64_t dim(int i) const { return shape_[static_cast<size_t>(i)]; }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }

    /// NCHW access.
    double& at(int64_t n, int64_t c, int64_t h, int64_t w) {
        return data_[static_cast<size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
    }
    double at(int64_t n, int64_t c, int64_t h, int64_t w) const {
        return data_[static_cast<size_t>(((n * shape_[1] + c) * shape_[2] + h) * shape_[3] + w)];
    }
    /// CHW access.
    double& at(int64_t c, int64_t h, int64_t w) {
        return data_[static_cast<size_t>((c * shape_[1] + h) * shape_[2] + w)];
    }
    double at(int64_t c, int64_t h, int64_t w) const {
        return data_[static_cast<size_t>((c * shape_[1] + h) * shape_[2] + w)];
    }

    void fill(double v) {
        for (auto& x : data_) x = v;
    }

    Tensor reshaped(std::vector<int64_t> shape) const {
        assert(numel_of(shape) == numel());
        Tensor t = *this;
        t.shape_ = std::move(shape);
        return t;
    }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    double min() const;
    double max() const;
    double sum() const;
    double mean() const { return numel() ? sum() / static_cast<double>(numel()) : 0.0; }
    double abs_max() const;
    bool all_finite() const;

    std::string shape_str() const;

    static int64_t numel_of(const std::vector<int64_t>& shape) {
        int64_t n = shape.empty() ? 0 : 1;
        for (auto d : shape) n *= d;
        return n;
    }

private:
    std::vector<int64_t> shape_;
    std::vector<double> data_;
};

} // namespace xmreg
