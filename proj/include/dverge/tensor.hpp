#pragma once

#include <cstddef>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

// Element precision is fixed per build: the default library uses float, the
// verification build (DVERGE_DOUBLE) uses double so gradient checks can run
// at tight tolerances.
// Each precision lives in its own inline namespace so both libraries can be
// linked into one program.
#ifdef DVERGE_DOUBLE
#define DVERGE_NAMESPACE_BEGIN \
    namespace dverge {         \
    inline namespace f64 {
#else
#define DVERGE_NAMESPACE_BEGIN \
    namespace dverge {         \
    inline namespace f32 {
#endif
#define DVERGE_NAMESPACE_END \
    }                        \
    }

DVERGE_NAMESPACE_BEGIN

#ifdef DVERGE_DOUBLE
using Scalar = double;
#else
using Scalar = float;
#endif

using Shape = std::vector<std::size_t>;

std::size_t shape_numel(const Shape& shape);
std::string shape_to_string(const Shape& shape);

/// Dense row-major array. The leading axis is the batch axis wherever an
/// operation talks about "rows".
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, Scalar fill = Scalar(0));
    Tensor(Shape shape, std::vector<Scalar> values);
    Tensor(Shape shape, std::initializer_list<Scalar> values);

    static Tensor scalar(Scalar value);

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t dim(std::size_t axis) const { return shape_.at(axis); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }

    /// Number of rows (extent of axis 0); a rank-0 tensor has one row.
    std::size_t rows() const { return shape_.empty() ? 1 : shape_[0]; }
    /// Elements per row.
    std::size_t row_size() const { return rows() == 0 ? 0 : data_.size() / rows(); }

    std::span<Scalar> data() { return data_; }
    std::span<const Scalar> data() const { return data_; }
    Scalar* raw() { return data_.data(); }
    const Scalar* raw() const { return data_.data(); }
    std::vector<Scalar>& values() { return data_; }
    const std::vector<Scalar>& values() const { return data_; }

    Scalar& operator[](std::size_t i) { return data_[i]; }
    Scalar operator[](std::size_t i) const { return data_[i]; }
    Scalar item() const;

    std::span<Scalar> row(std::size_t r);
    std::span<const Scalar> row(std::size_t r) const;

    /// Copies the given rows (in order) into a new tensor.
    Tensor gather_rows(std::span<const std::size_t> indices) const;
    Tensor slice_rows(std::size_t begin, std::size_t end) const;
    void set_row(std::size_t r, std::span<const Scalar> values);

    /// Reshapes in place, reusing the existing allocation, and fills.
    void reset(const Shape& shape, Scalar fill = Scalar(0));
    Tensor reshaped(Shape shape) const;
    void fill(Scalar value);
    bool all_finite() const;

    friend bool operator==(const Tensor& a, const Tensor& b) = default;

private:
    Shape shape_;
    std::vector<Scalar> data_;
};

/// Appends the rows of tensors whose trailing dimensions agree.
Tensor concat_rows(std::span<const Tensor> parts);

Scalar max_abs_diff(const Tensor& a, const Tensor& b);

DVERGE_NAMESPACE_END
