#include "kepil/numerics/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

#include "kepil/errors.hpp"
#include "kepil/numerics/random.hpp"

namespace kepil::num {

std::string shape_str(const Shape& shape) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) os << 'x';
        os << shape[i];
    }
    os << ']';
    return os.str();
}

std::size_t shape_size(const Shape& shape) {
    std::size_t n = 1;
    for (auto d : shape) n *= d;
    return n;
}

static void check_dims(const Shape& shape) {
    if (shape.empty()) throw ShapeError("tensor shape must have at least one dimension");
    for (auto d : shape)
        if (d == 0) throw ShapeError("tensor dimensions must be positive, got " + shape_str(shape));
}

Tensor::Tensor(Shape shape, double fill) : shape_(std::move(shape)) {
    check_dims(shape_);
    values_.assign(shape_size(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> values)
    : shape_(std::move(shape)), values_(std::move(values)) {
    check_dims(shape_);
    if (shape_size(shape_) != values_.size())
        throw ShapeError("value count " + std::to_string(values_.size()) + " does not match shape " +
                         shape_str(shape_));
}

Tensor Tensor::scalar(double v) { return Tensor({1, 1}, std::vector<double>{v}); }

Tensor Tensor::matrix(std::size_t rows, std::size_t cols, std::initializer_list<double> values) {
    return Tensor({rows, cols}, std::vector<double>(values));
}

Tensor Tensor::row_vector(std::span<const double> values) {
    return Tensor({1, values.size()}, std::vector<double>(values.begin(), values.end()));
}

std::size_t Tensor::rows() const {
    if (shape_.size() != 2) throw ShapeError("expected a matrix, got shape " + shape_str(shape_));
    return shape_[0];
}

std::size_t Tensor::cols() const {
    if (shape_.size() != 2) throw ShapeError("expected a matrix, got shape " + shape_str(shape_));
    return shape_[1];
}

std::span<const double> Tensor::row(std::size_t r) const {
    std::size_t c = cols();
    return std::span<const double>(values_).subspan(r * c, c);
}

std::span<double> Tensor::row(std::size_t r) {
    std::size_t c = cols();
    return std::span<double>(values_).subspan(r * c, c);
}

double Tensor::item() const {
    if (values_.size() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape_));
    return values_[0];
}

bool Tensor::all_finite() const {
    return std::all_of(values_.begin(), values_.end(), [](double v) { return std::isfinite(v); });
}

Tensor Tensor::reshaped(Shape shape) const {
    if (shape_size(shape) != values_.size())
        throw ShapeError("cannot reshape " + shape_str(shape_) + " to " + shape_str(shape));
    return Tensor(std::move(shape), values_);
}

void require_matrix(const Tensor& t, const char* what) {
    if (t.rank() != 2)
        throw ShapeError(std::string(what) + ": expected a matrix, got shape " + shape_str(t.shape()));
}

// c[m x n] += a[m x k] * b[k x n]
static void gemm_acc(const double* a, const double* b, double* c, std::size_t m, std::size_t k,
                     std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        double* ci = c + i * n;
        const double* ai = a + i * k;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ai[p];
            const double* bp = b + p * n;
            for (std::size_t j = 0; j < n; ++j) ci[j] += av * bp[j];
        }
    }
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul");
    require_matrix(b, "matmul");
    if (a.cols() != b.rows())
        throw ShapeError("matmul: " + shape_str(a.shape()) + " * " + shape_str(b.shape()));
    Tensor c({a.rows(), b.cols()});
    gemm_acc(a.values().data(), b.values().data(), c.values().data(), a.rows(), a.cols(), b.cols());
    return c;
}

Tensor transpose(const Tensor& a) {
    require_matrix(a, "transpose");
    const std::size_t r = a.rows(), c = a.cols();
    Tensor t({c, r});
    for (std::size_t i = 0; i < r; ++i)
        for (std::size_t j = 0; j < c; ++j) t(j, i) = a(i, j);
    return t;
}

Tensor matmul_nt(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul_nt");
    require_matrix(b, "matmul_nt");
    if (a.cols() != b.cols())
        throw ShapeError("matmul_nt: " + shape_str(a.shape()) + " * " + shape_str(b.shape()) + "^T");
    return matmul(a, transpose(b));
}

Tensor matmul_tn(const Tensor& a, const Tensor& b) {
    require_matrix(a, "matmul_tn");
    require_matrix(b, "matmul_tn");
    if (a.rows() != b.rows())
        throw ShapeError("matmul_tn: " + shape_str(a.shape()) + "^T * " + shape_str(b.shape()));
    const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
    Tensor c({k, n});
    double* cv = c.values().data();
    for (std::size_t i = 0; i < m; ++i) {
        const double* ai = a.values().data() + i * k;
        const double* bi = b.values().data() + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            const double av = ai[p];
            double* cp = cv + p * n;
            for (std::size_t j = 0; j < n; ++j) cp[j] += av * bi[j];
        }
    }
    return c;
}

Tensor softmax_rows(const Tensor& m) {
    if (m.rank() != 2) throw ShapeError("softmax_rows: expected a matrix, got shape " + shape_str(m.shape()));
    Tensor out(m.shape());
    const std::size_t cols = m.cols();
    for (std::size_t r = 0; r < m.rows(); ++r) {
        auto in = m.row(r);
        auto o = out.row(r);
        double mx = *std::max_element(in.begin(), in.end());
        double sum = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            o[c] = std::exp(in[c] - mx);
            sum += o[c];
        }
        for (std::size_t c = 0; c < cols; ++c) o[c] /= sum;
    }
    return out;
}

Tensor softmax_rows_masked(const Tensor& m, const std::vector<bool>& col_mask) {
    if (m.rank() != 2)
        throw ShapeError("softmax_rows_masked: expected a matrix, got shape " + shape_str(m.shape()));
    const std::size_t cols = m.cols();
    if (col_mask.size() != cols) throw ShapeError("softmax_rows_masked: mask width mismatch");
    if (std::none_of(col_mask.begin(), col_mask.end(), [](bool b) { return b; }))
        throw DomainError("softmax_rows_masked: every column is masked");
    Tensor out(m.shape());
    for (std::size_t r = 0; r < m.rows(); ++r) {
        auto in = m.row(r);
        auto o = out.row(r);
        double mx = -INFINITY;
        for (std::size_t c = 0; c < cols; ++c)
            if (col_mask[c]) mx = std::max(mx, in[c]);
        double sum = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            o[c] = col_mask[c] ? std::exp(in[c] - mx) : 0.0;
            sum += o[c];
        }
        for (std::size_t c = 0; c < cols; ++c) o[c] /= sum;
    }
    return out;
}

std::vector<double> dropout_mask(std::size_t n, double p, std::uint64_t seed) {
    if (!(p >= 0.0 && p < 1.0)) throw DomainError("dropout probability must be in [0, 1), got " + std::to_string(p));
    std::vector<double> mask(n, 1.0);
    if (p == 0.0) return mask;
    const double keep_scale = 1.0 / (1.0 - p);
    for (std::size_t i = 0; i < n; ++i) {
        double u = static_cast<double>(derive_seed(seed, i) >> 11) * 0x1.0p-53;
        mask[i] = u < p ? 0.0 : keep_scale;
    }
    return mask;
}

Tensor seeded_dropout(const Tensor& v, double p, std::uint64_t seed) {
    auto mask = dropout_mask(v.size(), p, seed);
    if (p == 0.0) return v;
    Tensor out = v;
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= mask[i];
    return out;
}

double dot(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ShapeError("dot: length mismatch");
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

double cosine_sim(std::span<const double> a, std::span<const double> b) {
    if (a.size() != b.size()) throw ShapeError("cosine_sim: length mismatch");
    const double na = norm(a), nb = norm(b);
    if (na == 0.0 && nb == 0.0) throw DomainError("cosine_sim: both vectors are zero");
    if (na == 0.0 || nb == 0.0) return 0.0;
    double c = dot(a, b) / (na * nb);
    return std::clamp(c, -1.0, 1.0);
}

} // namespace kepil::num

namespace kepil::num {

std::size_t Rng::below(std::size_t n) {
    // Lemire-style rejection keeps the result unbiased and portable.
    const std::uint64_t bound = n;
    const std::uint64_t limit = (~std::uint64_t{0}) - ((~std::uint64_t{0}) % bound);
    std::uint64_t x;
    do {
        x = next_u64();
    } while (x >= limit);
    return static_cast<std::size_t>(x % bound);
}

double Rng::normal() {
    if (has_spare_) {
        has_spare_ = false;
        return spare_;
    }
    double u1 = uniform();
    while (u1 <= 0.0) u1 = uniform();
    const double u2 = uniform();
    const double r = std::sqrt(-2.0 * std::log(u1));
    const double theta = 2.0 * M_PI * u2;
    spare_ = r * std::sin(theta);
    has_spare_ = true;
    return r * std::cos(theta);
}

} // namespace kepil::num
