#pragma once

#include <bit>
#include <cstdint>
#include <span>
#include <stdexcept>
#include <string>
#include <variant>
#include <vector>

namespace ddl {

enum class DType : uint8_t { f32 = 0, f64 = 1 };

inline const char* dtype_name(DType dt) { return dt == DType::f32 ? "f32" : "f64"; }
inline size_t dtype_size(DType dt) { return dt == DType::f32 ? 4 : 8; }

// Dense row-major tensor. Rank 0 means a scalar with one element.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int64_t> dims, DType dt) {
        Tensor t;
        t.dims_ = std::move(dims);
        t.dtype_ = dt;
        int64_t n = t.check_dims();
        if (dt == DType::f32)
            t.buf_ = std::vector<float>(static_cast<size_t>(n), 0.0f);
        else
            t.buf_ = std::vector<double>(static_cast<size_t>(n), 0.0);
        return t;
    }

    static Tensor full(std::vector<int64_t> dims, double v, DType dt) {
        Tensor t = zeros(std::move(dims), dt);
        for (int64_t i = 0; i < t.numel(); ++i) t.set(i, v);
        return t;
    }

    static Tensor scalar(double v, DType dt) { return full({}, v, dt); }

    static Tensor from_f32(std::vector<int64_t> dims, std::vector<float> v) {
        Tensor t;
        t.dims_ = std::move(dims);
        t.dtype_ = DType::f32;
        int64_t n = t.check_dims();
        if (n != static_cast<int64_t>(v.size())) throw std::runtime_error("tensor: data size does not match dims");
        t.buf_ = std::move(v);
        return t;
    }

    static Tensor from_f64(std::vector<int64_t> dims, std::vector<double> v) {
        Tensor t;
        t.dims_ = std::move(dims);
        t.dtype_ = DType::f64;
        int64_t n = t.check_dims();
        if (n != static_cast<int64_t>(v.size())) throw std::runtime_error("tensor: data size does not match dims");
        t.buf_ = std::move(v);
        return t;
    }

    bool defined() const { return !std::holds_alternative<std::monostate>(buf_); }
    const std::vector<int64_t>& dims() const { return dims_; }
    int rank() const { return static_cast<int>(dims_.size()); }
    DType dtype() const { return dtype_; }

    int64_t dim(int i) const {
        if (i < 0 || i >= rank()) throw std::runtime_error("tensor: dim index out of range");
        return dims_[static_cast<size_t>(i)];
    }

    int64_t numel() const {
        int64_t n = 1;
        for (int64_t d : dims_) n *= d;
        return defined() ? n : 0;
    }

    template <class T> std::span<T> data() {
        auto* v = std::get_if<std::vector<T>>(&buf_);
        if (!v) throw std::runtime_error("tensor: dtype access mismatch");
        return std::span<T>(v->data(), v->size());
    }

    template <class T> std::span<const T> data() const {
        const auto* v = std::get_if<std::vector<T>>(&buf_);
        if (!v) throw std::runtime_error("tensor: dtype access mismatch");
        return std::span<const T>(v->data(), v->size());
    }

    double at(int64_t i) const {
        if (dtype_ == DType::f32) return static_cast<double>(data<float>()[static_cast<size_t>(i)]);
        return data<double>()[static_cast<size_t>(i)];
    }

    void set(int64_t i, double v) {
        if (dtype_ == DType::f32)
            data<float>()[static_cast<size_t>(i)] = static_cast<float>(v);
        else
            data<double>()[static_cast<size_t>(i)] = v;
    }

    Tensor astype(DType dt) const {
        if (dt == dtype_) return *this;
        Tensor out = zeros(dims_, dt);
        for (int64_t i = 0; i < numel(); ++i) out.set(i, at(i));
        return out;
    }

    Tensor reshaped(std::vector<int64_t> dims) const {
        Tensor out = *this;
        out.dims_ = std::move(dims);
        int64_t n = 1;
        for (int64_t d : out.dims_) {
            if (d <= 0) throw std::runtime_error("tensor: reshape dims must be positive");
            n *= d;
        }
        if (n != numel()) throw std::runtime_error("tensor: reshape element count mismatch");
        return out;
    }

    bool same_shape(const Tensor& o) const { return dims_ == o.dims_; }

    bool bitwise_equal(const Tensor& o) const {
        if (dtype_ != o.dtype_ || dims_ != o.dims_) return false;
        if (dtype_ == DType::f32) {
            auto a = data<float>(), b = o.data<float>();
            for (size_t i = 0; i < a.size(); ++i)
                if (std::bit_cast<uint32_t>(a[i]) != std::bit_cast<uint32_t>(b[i])) return false;
        } else {
            auto a = data<double>(), b = o.data<double>();
            for (size_t i = 0; i < a.size(); ++i)
                if (std::bit_cast<uint64_t>(a[i]) != std::bit_cast<uint64_t>(b[i])) return false;
        }
        return true;
    }

private:
    int64_t check_dims() const {
        int64_t n = 1;
        for (int64_t d : dims_) {
            if (d <= 0) throw std::runtime_error("tensor: dims must be positive");
            n *= d;
        }
        return n;
    }

    std::vector<int64_t> dims_;
    DType dtype_ = DType::f32;
    std::variant<std::monostate, std::vector<float>, std::vector<double>> buf_;
};

inline std::string shape_str(const std::vector<int64_t>& dims) {
    std::string s = "[";
    for (size_t i = 0; i < dims.size(); ++i) {
        if (i) s += "x";
        s += std::to_string(dims[i]);
    }
    return s + "]";
}

}  // namespace ddl
