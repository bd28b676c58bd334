#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <vector>

namespace spon {

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_string(const Shape& shape);

// Dense row-major float32 array. A tensor owns its buffer and has value
// semantics; copies are deep. Matrix-style ops treat a tensor of rank >= 2 as
// rows() x cols() where cols() is the last dimension.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape);
    Tensor(Shape shape, std::vector<float> data);

    static Tensor zeros(Shape shape) { return Tensor(std::move(shape)); }
    static Tensor full(Shape shape, float value);
    static Tensor scalar(float value) { return Tensor({1}, {value}); }

    const Shape& shape() const noexcept { return shape_; }
    std::size_t rank() const noexcept { return shape_.size(); }
    std::size_t dim(std::size_t i) const;
    std::size_t numel() const noexcept { return data_.size(); }
    bool empty() const noexcept { return data_.empty(); }

    std::size_t cols() const noexcept { return shape_.empty() ? 0 : shape_.back(); }
    std::size_t rows() const noexcept { return cols() == 0 ? 0 : data_.size() / cols(); }

    std::span<const float> data() const noexcept { return data_; }
    std::span<float> mutable_data() noexcept { return data_; }
    const float* ptr() const noexcept { return data_.data(); }
    float* mutable_ptr() noexcept { return data_.data(); }

    float operator[](std::size_t i) const { return data_[i]; }
    float& operator[](std::size_t i) { return data_[i]; }
    float at(std::size_t r, std::size_t c) const { return data_[r * cols() + c]; }
    float& at(std::size_t r, std::size_t c) { return data_[r * cols() + c]; }

    std::span<const float> row(std::size_t r) const { return {data_.data() + r * cols(), cols()}; }
    std::span<float> mutable_row(std::size_t r) { return {data_.data() + r * cols(), cols()}; }

    // Same buffer, new shape with equal element count.
    Tensor reshaped(Shape shape) const;

    bool all_finite() const noexcept;

    // Bitwise equality of shape and contents.
    bool bit_equal(const Tensor& other) const noexcept;

private:
    Shape shape_;
    std::vector<float> data_;
};

// Throws NumericError naming `what` when any entry is NaN or Inf.
void require_finite(const Tensor& t, const std::string& what);

// ---- Plain (non-differentiable) ops. The autograd layer reuses these for its
// forward values, so each has exactly one implementation.

Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k] x [k,n]
Tensor transpose(const Tensor& a);                // [m,n] -> [n,m]

// Elementwise add/mul. `b` may match `a` exactly, be a row vector with
// a.cols() entries, or be a single-element scalar.
Tensor add(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& a, float s);

Tensor relu(const Tensor& x);
Tensor silu(const Tensor& x);
float sigmoid(float x);

// Softmax along `axis` with max subtraction; exp and the normaliser are
// evaluated in double.
Tensor softmax(const Tensor& x, std::size_t axis);
// Softmax of one contiguous row, in place. Entries at index >= valid are set to 0.
void softmax_row_inplace(std::span<float> row, std::size_t valid);

// Row-wise RMS normalisation: y = x / sqrt(mean(x^2) + eps) * gain.
Tensor rms_norm(const Tensor& x, const Tensor& gain, float eps);

double sum(const Tensor& x);

}  // namespace spon
