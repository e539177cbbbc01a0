#pragma once

#include <algorithm>
#include <cstdint>
#include <initializer_list>
#include <numeric>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace spottunet {

/// Dense row-major array. Feature maps use (batch, channels, height, width).
template <typename T>
class Tensor {
public:
    Tensor() = default;

    explicit Tensor(std::vector<int> shape)
        : shape_(std::move(shape)), data_(numel_of(shape_), T(0)) {}

    Tensor(std::vector<int> shape, T fill)
        : shape_(std::move(shape)), data_(numel_of(shape_), fill) {}

    Tensor(std::vector<int> shape, std::vector<T> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (static_cast<std::int64_t>(data_.size()) != numel_of(shape_))
            throw std::invalid_argument("tensor data size does not match shape");
    }

    static Tensor zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }
    static Tensor full(std::vector<int> shape, T v) { return Tensor(std::move(shape), v); }

    bool empty() const { return data_.empty(); }
    int ndim() const { return static_cast<int>(shape_.size()); }
    const std::vector<int>& shape() const { return shape_; }
    int dim(int i) const { return shape_.at(static_cast<std::size_t>(i)); }
    std::int64_t numel() const { return static_cast<std::int64_t>(data_.size()); }

    T* data() { return data_.data(); }
    const T* data() const { return data_.data(); }
    std::vector<T>& vec() { return data_; }
    const std::vector<T>& vec() const { return data_; }

    T& operator[](std::int64_t i) { return data_[static_cast<std::size_t>(i)]; }
    const T& operator[](std::int64_t i) const { return data_[static_cast<std::size_t>(i)]; }

    T& at2(int i, int j) { return data_[idx2(i, j)]; }
    const T& at2(int i, int j) const { return data_[idx2(i, j)]; }
    T& at4(int b, int c, int h, int w) { return data_[idx4(b, c, h, w)]; }
    const T& at4(int b, int c, int h, int w) const { return data_[idx4(b, c, h, w)]; }

    std::size_t idx2(int i, int j) const {
        return static_cast<std::size_t>(i) * shape_[1] + j;
    }
    std::size_t idx4(int b, int c, int h, int w) const {
        return ((static_cast<std::size_t>(b) * shape_[1] + c) * shape_[2] + h) * shape_[3] + w;
    }

    void fill(T v) { std::fill(data_.begin(), data_.end(), v); }

    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    bool operator==(const Tensor& o) const {
        return shape_ == o.shape_ && data_ == o.data_;
    }

    Tensor reshaped(std::vector<int> shape) const {
        if (numel_of(shape) != numel())
            throw std::invalid_argument("reshape changes element count");
        Tensor out;
        out.shape_ = std::move(shape);
        out.data_ = data_;
        return out;
    }

    static std::int64_t numel_of(const std::vector<int>& shape) {
        std::int64_t n = 1;
        for (int d : shape) {
            if (d < 0) throw std::invalid_argument("negative dimension");
            n *= d;
        }
        return n;
    }

private:
    std::vector<int> shape_;
    std::vector<T> data_;
};

/// Layout converters between the public (batch, channels, height, width)
/// convention and the internal NHWC compute layout. Single-channel tensors
/// convert by relabeling only.
template <typename T>
Tensor<T> nchw_to_nhwc(const Tensor<T>& x) {
    if (x.ndim() != 4) throw std::invalid_argument("nchw_to_nhwc: want 4 axes");
    const int b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (c == 1) return x.reshaped({b, h, w, 1});
    Tensor<T> y({b, h, w, c});
    for (int bi = 0; bi < b; ++bi)
        for (int ci = 0; ci < c; ++ci)
            for (int i = 0; i < h; ++i)
                for (int j = 0; j < w; ++j)
                    y[((static_cast<std::size_t>(bi) * h + i) * w + j) * c + ci] =
                        x[((static_cast<std::size_t>(bi) * c + ci) * h + i) * w + j];
    return y;
}

template <typename T>
Tensor<T> nhwc_to_nchw(const Tensor<T>& x) {
    if (x.ndim() != 4) throw std::invalid_argument("nhwc_to_nchw: want 4 axes");
    const int b = x.dim(0), h = x.dim(1), w = x.dim(2), c = x.dim(3);
    if (c == 1) return x.reshaped({b, 1, h, w});
    Tensor<T> y({b, c, h, w});
    for (int bi = 0; bi < b; ++bi)
        for (int i = 0; i < h; ++i)
            for (int j = 0; j < w; ++j)
                for (int ci = 0; ci < c; ++ci)
                    y[((static_cast<std::size_t>(bi) * c + ci) * h + i) * w + j] =
                        x[((static_cast<std::size_t>(bi) * h + i) * w + j) * c + ci];
    return y;
}

inline std::string shape_to_string(const std::vector<int>& s) {
    std::ostringstream os;
    os << "(";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ")";
    return os.str();
}

/// Thrown on malformed configurations (bad channel arithmetic, invalid tau, ...).
class ConfigError : public std::runtime_error {
public:
    explicit ConfigError(const std::string& msg) : std::runtime_error(msg) {}
};

/// Thrown on shape/dimension mismatches between runtime arguments.
class DimensionError : public std::runtime_error {
public:
    explicit DimensionError(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace spottunet
