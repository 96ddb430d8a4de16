#include "dverge/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>

DVERGE_NAMESPACE_BEGIN

std::size_t shape_numel(const Shape& shape) {
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

std::string shape_to_string(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << ", ";
        os << shape[i];
    }
    os << ']';
    return os.str();
}

Tensor::Tensor(Shape shape, Scalar fill) : shape_(std::move(shape)), data_(shape_numel(shape_), fill) {}

Tensor::Tensor(Shape shape, std::vector<Scalar> values) : shape_(std::move(shape)), data_(std::move(values)) {
    if (data_.size() != shape_numel(shape_)) {
        throw std::invalid_argument("tensor: " + std::to_string(data_.size()) +
                                    " values do not fill shape " + shape_to_string(shape_));
    }
}

Tensor::Tensor(Shape shape, std::initializer_list<Scalar> values)
    : Tensor(std::move(shape), std::vector<Scalar>(values)) {}

Tensor Tensor::scalar(Scalar value) { return Tensor(Shape{}, std::vector<Scalar>{value}); }

Scalar Tensor::item() const {
    if (data_.size() != 1) {
        throw std::logic_error("tensor: item() on tensor with " + std::to_string(data_.size()) + " elements");
    }
    return data_[0];
}

std::span<Scalar> Tensor::row(std::size_t r) {
    const std::size_t n = row_size();
    return std::span<Scalar>(data_).subspan(r * n, n);
}

std::span<const Scalar> Tensor::row(std::size_t r) const {
    const std::size_t n = row_size();
    return std::span<const Scalar>(data_).subspan(r * n, n);
}

Tensor Tensor::gather_rows(std::span<const std::size_t> indices) const {
    if (shape_.empty()) throw std::logic_error("tensor: gather_rows on rank-0 tensor");
    Shape out_shape = shape_;
    out_shape[0] = indices.size();
    Tensor out(out_shape);
    const std::size_t n = row_size();
    for (std::size_t i = 0; i < indices.size(); ++i) {
        if (indices[i] >= rows()) throw std::out_of_range("tensor: row index out of range");
        std::copy_n(data_.begin() + static_cast<std::ptrdiff_t>(indices[i] * n), n,
                    out.data_.begin() + static_cast<std::ptrdiff_t>(i * n));
    }
    return out;
}

Tensor Tensor::slice_rows(std::size_t begin, std::size_t end) const {
    if (shape_.empty() || begin > end || end > rows()) throw std::out_of_range("tensor: bad row slice");
    Shape out_shape = shape_;
    out_shape[0] = end - begin;
    const std::size_t n = row_size();
    std::vector<Scalar> values(data_.begin() + static_cast<std::ptrdiff_t>(begin * n),
                               data_.begin() + static_cast<std::ptrdiff_t>(end * n));
    return Tensor(out_shape, std::move(values));
}

void Tensor::set_row(std::size_t r, std::span<const Scalar> values) {
    auto dst = row(r);
    if (values.size() != dst.size()) throw std::invalid_argument("tensor: set_row size mismatch");
    std::copy(values.begin(), values.end(), dst.begin());
}

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_numel(shape) != data_.size()) {
        throw std::invalid_argument("tensor: cannot reshape " + shape_to_string(shape_) + " to " +
                                    shape_to_string(shape));
    }
    return Tensor(std::move(shape), data_);
}

void Tensor::reset(const Shape& shape, Scalar fill) {
    shape_ = shape;
    data_.assign(shape_numel(shape_), fill);
}

void Tensor::fill(Scalar value) { std::fill(data_.begin(), data_.end(), value); }

bool Tensor::all_finite() const {
    // v - v is 0 for finite v and NaN otherwise; the comparison is done once.
    Scalar acc = 0;
    for (Scalar v : data_) acc += v - v;
    return acc == 0;
}

Tensor concat_rows(std::span<const Tensor> parts) {
    if (parts.empty()) return Tensor();
    Shape shape = parts.front().shape();
    if (shape.empty()) throw std::invalid_argument("concat_rows: rank-0 parts");
    std::size_t rows = 0;
    for (const auto& p : parts) {
        if (p.rank() != shape.size() || !std::equal(p.shape().begin() + 1, p.shape().end(), shape.begin() + 1)) {
            throw std::invalid_argument("concat_rows: trailing shapes differ");
        }
        rows += p.rows();
    }
    shape[0] = rows;
    std::vector<Scalar> values;
    values.reserve(shape_numel(shape));
    for (const auto& p : parts) values.insert(values.end(), p.values().begin(), p.values().end());
    return Tensor(shape, std::move(values));
}

Scalar max_abs_diff(const Tensor& a, const Tensor& b) {
    if (a.shape() != b.shape()) throw std::invalid_argument("max_abs_diff: shape mismatch");
    Scalar m = 0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

DVERGE_NAMESPACE_END
