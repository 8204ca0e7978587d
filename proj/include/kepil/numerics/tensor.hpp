#pragma once

#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <string>
#include <vector>

namespace kepil::num {

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& shape);

// Dense row-major tensor of doubles. Most of the library works with rank-2
// tensors; a scalar is stored as a 1x1 matrix.
class Tensor {
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> values);

    static Tensor scalar(double v);
    static Tensor matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values);
    static Tensor row_vector(std::span<const double> values);
    static Tensor zeros_like(const Tensor& t) { return Tensor(t.shape()); }

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return values_.size(); }
    bool empty() const { return values_.empty(); }

    // Rank-2 accessors; throw ShapeError on other ranks.
    std::size_t rows() const;
    std::size_t cols() const;

    double operator()(std::size_t r, std::size_t c) const { return values_[r * shape_[1] + c]; }
    double& operator()(std::size_t r, std::size_t c) { return values_[r * shape_[1] + c]; }
    double operator[](std::size_t i) const { return values_[i]; }
    double& operator[](std::size_t i) { return values_[i]; }

    std::span<const double> values() const { return values_; }
    std::span<double> values() { return values_; }
    std::span<const double> row(std::size_t r) const;
    std::span<double> row(std::size_t r);

    double item() const;  // value of a single-element tensor
    bool all_finite() const;

    Tensor reshaped(Shape shape) const;

    friend bool operator==(const Tensor& a, const Tensor& b) {
        return a.shape_ == b.shape_ && a.values_ == b.values_;
    }

private:
    Shape shape_;
    std::vector<double> values_;
};

std::size_t shape_size(const Shape& shape);
void require_matrix(const Tensor& t, const char* what);

// Dense kernels. All loops run in a fixed order so results are reproducible
// and each output row depends only on the matching input row.
Tensor matmul(const Tensor& a, const Tensor& b);
Tensor matmul_nt(const Tensor& a, const Tensor& b);  // a * b^T
Tensor matmul_tn(const Tensor& a, const Tensor& b);  // a^T * b
Tensor transpose(const Tensor& a);

// Row-wise softmax with max subtraction.
Tensor softmax_rows(const Tensor& m);
// Same, but columns with mask[c] == false get probability exactly 0.
Tensor softmax_rows_masked(const Tensor& m, const std::vector<bool>& col_mask);

// Inverted dropout. Each element is kept with probability 1-p and scaled by
// 1/(1-p); the mask depends only on (seed, element index).
Tensor seeded_dropout(const Tensor& v, double p, std::uint64_t seed);
std::vector<double> dropout_mask(std::size_t n, double p, std::uint64_t seed);

double cosine_sim(std::span<const double> a, std::span<const double> b);
double dot(std::span<const double> a, std::span<const double> b);
double norm(std::span<const double> a);

} // namespace kepil::num
