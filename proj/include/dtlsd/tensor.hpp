#pragma once

#include <cstddef>
#include <initializer_list>
#include <stdexcept>
#include <string>
#include <vector>

namespace dtlsd {

/// Dense row-major multi-dimensional array of 64-bit floats.
class Tensor {
public:
    Tensor() = default;

    /// Zero-filled tensor of the given shape.
    explicit Tensor(std::vector<std::size_t> shape)
        : shape_(std::move(shape)), data_(count(shape_), 0.0) {}

    Tensor(std::vector<std::size_t> shape, std::vector<double> data)
        : shape_(std::move(shape)), data_(std::move(data)) {
        if (count(shape_) != data_.size()) {
            throw std::invalid_argument("Tensor: shape does not match data length");
        }
    }

    static Tensor scalar(double v) { return Tensor({1}, {v}); }

    static Tensor full(std::vector<std::size_t> shape, double v) {
        Tensor t(std::move(shape));
        t.fill(v);
        return t;
    }

    const std::vector<std::size_t>& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t i) const { return shape_.at(i); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }

    double& operator[](std::size_t i) { return data_[i]; }
    double operator[](std::size_t i) const { return data_[i]; }

    /// Element access for 2D tensors.
    double& at2(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    double at2(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }

    /// Element access for 3D tensors.
    double& at3(std::size_t i, std::size_t j, std::size_t k) {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    double at3(std::size_t i, std::size_t j, std::size_t k) const {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }

    void fill(double v) {
        for (double& x : data_) x = v;
    }

    bool all_finite() const;

    bool same_shape(const Tensor& other) const { return shape_ == other.shape_; }

    /// Reinterpret the buffer under a new shape with the same element count.
    Tensor reshaped(std::vector<std::size_t> shape) const {
        if (count(shape) != data_.size()) {
            throw std::invalid_argument("Tensor::reshaped: element count mismatch");
        }
        return Tensor(std::move(shape), data_);
    }

    static std::size_t count(const std::vector<std::size_t>& shape) {
        std::size_t n = 1;
        for (std::size_t d : shape) n *= d;
        return shape.empty() ? 0 : n;
    }

    static std::string shape_str(const std::vector<std::size_t>& shape);

private:
    std::vector<std::size_t> shape_;
    std::vector<double> data_;
};

// Plain GEMM kernels. C is n x m; `acc` keeps existing contents of C.
void mm_nn(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
           std::size_t m, bool acc);
// C = A * B^T with A n x k, B m x k.
void mm_nt(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
           std::size_t m, bool acc);
// C = A^T * B with A k x n, B k x m.
void mm_tn(const double* a, const double* b, double* c, std::size_t n, std::size_t k,
           std::size_t m, bool acc);

/// Numerically stable softmax along `axis`. Slices along the axis sum to 1.
Tensor softmax(const Tensor& x, std::size_t axis);

}  // namespace dtlsd
