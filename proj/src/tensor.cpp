#include "spon/tensor.hpp"

#include "spon/error.hpp"
#include "spon/kernels.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <sstream>

namespace spon {

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "," : "") << shape[i];
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape) : shape_(std::move(shape)), data_(shape_numel(shape_), 0.0f) {}

Tensor::Tensor(Shape shape, std::vector<float> data) : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != data_.size())
        throw DimensionError("tensor shape " + shape_string(shape_) + " does not match " +
                             std::to_string(data_.size()) + " elements");
}

Tensor Tensor::full(Shape shape, float value) {
    Tensor t(std::move(shape));
    std::fill(t.data_.begin(), t.data_.end(), value);
    return t;
}

std::size_t Tensor::dim(std::size_t i) const {
    if (i >= shape_.size()) throw DimensionError("dimension index out of range");
    return shape_[i];
}

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size())
        throw DimensionError("cannot reshape " + shape_string(shape_) + " to " + shape_string(shape));
    return Tensor(std::move(shape), data_);
}

bool Tensor::all_finite() const noexcept {
    return std::all_of(data_.begin(), data_.end(), [](float v) { return std::isfinite(v); });
}

bool Tensor::bit_equal(const Tensor& other) const noexcept {
    return shape_ == other.shape_ && data_.size() == other.data_.size() &&
           (data_.empty() || std::memcmp(data_.data(), other.data_.data(), data_.size() * sizeof(float)) == 0);
}

void require_finite(const Tensor& t, const std::string& what) {
    if (!t.all_finite()) throw NumericError("non-finite value produced by " + what);
}

namespace {

void require_matrix(const Tensor& t, const char* op) {
    if (t.rank() != 2) throw DimensionError(std::string(op) + ": expected a matrix, got shape " + shape_string(t.shape()));
}

enum class Broadcast { Same, Row, Scalar };

Broadcast classify(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() == b.shape()) return Broadcast::Same;
    if (b.numel() == 1) return Broadcast::Scalar;
    if (b.numel() == a.cols() && (b.rank() == 1 || (b.rank() == 2 && b.dim(0) == 1))) return Broadcast::Row;
    throw DimensionError(std::string(op) + ": cannot broadcast " + shape_string(b.shape()) + " onto " +
                         shape_string(a.shape()));
}

template <class F>
Tensor binary(const Tensor& a, const Tensor& b, const char* op, F f) {
    const Broadcast mode = classify(a, b, op);
    Tensor out(a.shape());
    const std::size_t n = a.numel();
    const std::size_t cols = a.cols();
    for (std::size_t i = 0; i < n; ++i) {
        const float bv = mode == Broadcast::Same ? b[i] : mode == Broadcast::Row ? b[i % cols] : b[0];
        out[i] = f(a[i], bv);
    }
    return out;
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    if (a.dim(1) != b.dim(0))
        throw DimensionError("matmul: inner dimensions differ, " + shape_string(a.shape()) + " x " +
                             shape_string(b.shape()));
    Tensor c({a.dim(0), b.dim(1)});
    kernels::active().gemm(a.dim(0), b.dim(1), a.dim(1), a.ptr(), b.ptr(), c.mutable_ptr());
    return c;
}

Tensor transpose(const Tensor& a) {
    require_matrix(a, "transpose");
    const std::size_t m = a.dim(0), n = a.dim(1);
    Tensor t({n, m});
    for (std::size_t i = 0; i < m; ++i)
        for (std::size_t j = 0; j < n; ++j) t[j * m + i] = a[i * n + j];
    return t;
}

Tensor add(const Tensor& a, const Tensor& b) {
    if (a.shape() == b.shape()) {
        Tensor out(a.shape());
        kernels::active().add(a.ptr(), b.ptr(), out.mutable_ptr(), a.numel());
        return out;
    }
    return binary(a, b, "add", [](float x, float y) { return x + y; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary(a, b, "mul", [](float x, float y) { return x * y; });
}

Tensor scale(const Tensor& a, float s) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.numel(); ++i) out[i] = a[i] * s;
    return out;
}

Tensor relu(const Tensor& x) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] > 0.0f ? x[i] : 0.0f;
    return out;
}

float sigmoid(float x) {
    return static_cast<float>(1.0 / (1.0 + std::exp(-static_cast<double>(x))));
}

Tensor silu(const Tensor& x) {
    Tensor out(x.shape());
    for (std::size_t i = 0; i < x.numel(); ++i) out[i] = x[i] * sigmoid(x[i]);
    return out;
}

void softmax_row_inplace(std::span<float> row, std::size_t valid) {
    valid = std::min(valid, row.size());
    if (valid == 0) {
        std::fill(row.begin(), row.end(), 0.0f);
        return;
    }
    const float mx = *std::max_element(row.begin(), row.begin() + static_cast<std::ptrdiff_t>(valid));
    double total = 0.0;
    for (std::size_t j = 0; j < valid; ++j) total += std::exp(static_cast<double>(row[j]) - mx);
    for (std::size_t j = 0; j < valid; ++j)
        row[j] = static_cast<float>(std::exp(static_cast<double>(row[j]) - mx) / total);
    std::fill(row.begin() + static_cast<std::ptrdiff_t>(valid), row.end(), 0.0f);
}

Tensor softmax(const Tensor& x, std::size_t axis) {
    if (axis >= x.rank()) throw DimensionError("softmax: axis out of range");
    if (!x.all_finite()) throw NumericError("softmax: input is not finite");
    const Shape& s = x.shape();
    const std::size_t len = s[axis];
    std::size_t inner = 1;
    for (std::size_t d = axis + 1; d < s.size(); ++d) inner *= s[d];
    const std::size_t outer = x.numel() / (len * inner);
    Tensor out(s);
    std::vector<float> buf(len);
    for (std::size_t o = 0; o < outer; ++o) {
        for (std::size_t in = 0; in < inner; ++in) {
            const std::size_t base = o * len * inner + in;
            for (std::size_t j = 0; j < len; ++j) buf[j] = x[base + j * inner];
            softmax_row_inplace(buf, len);
            for (std::size_t j = 0; j < len; ++j) out[base + j * inner] = buf[j];
        }
    }
    return out;
}

Tensor rms_norm(const Tensor& x, const Tensor& gain, float eps) {
    if (gain.numel() != x.cols())
        throw DimensionError("rms_norm: gain has " + std::to_string(gain.numel()) + " entries, rows have " +
                             std::to_string(x.cols()));
    if (eps < 0.0f) throw InputError("rms_norm: eps must be non-negative");
    const std::size_t d = x.cols();
    Tensor out(x.shape());
    const auto& k = kernels::active();
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const float* xr = x.ptr() + r * d;
        const double ms = k.sum_squares(xr, d) / static_cast<double>(d);
        const float inv = static_cast<float>(1.0 / std::sqrt(ms + static_cast<double>(eps)));
        float* o = out.mutable_ptr() + r * d;
        for (std::size_t j = 0; j < d; ++j) o[j] = xr[j] * inv * gain[j];
    }
    return out;
}

double sum(const Tensor& x) {
    double s = 0.0;
    for (float v : x.data()) s += v;
    return s;
}

}  // namespace spon
