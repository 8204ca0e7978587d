#include "kepil/numerics/ops.hpp"

#include <algorithm>
#include <cmath>
#include <memory>

#include "kepil/errors.hpp"

namespace kepil::num::ops {

namespace {

void same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape() != b.shape())
        throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape()) + " vs " +
                         shape_str(b.shape()));
}

Tensor rows_of(const Tensor& t, std::size_t begin, std::size_t count) {
    const std::size_t c = t.cols();
    auto src = t.values().subspan(begin * c, count * c);
    return Tensor({count, c}, std::vector<double>(src.begin(), src.end()));
}

void add_rows_into(Tensor& dst, std::size_t begin, const Tensor& src) {
    auto d = dst.values().subspan(begin * dst.cols(), src.size());
    auto s = src.values();
    for (std::size_t i = 0; i < s.size(); ++i) d[i] += s[i];
}

template <typename F>
Tensor map(const Tensor& a, F f) {
    Tensor out(a.shape());
    auto in = a.values();
    auto o = out.values();
    for (std::size_t i = 0; i < in.size(); ++i) o[i] = f(in[i]);
    return out;
}

Tensor hadamard(const Tensor& a, const Tensor& b) {
    Tensor out(a.shape());
    for (std::size_t i = 0; i < a.size(); ++i) out[i] = a[i] * b[i];
    return out;
}

} // namespace

Var matmul(Var a, Var b) {
    Graph& g = *a.graph;
    Tensor out = num::matmul(a.value(), b.value());
    return g.record(std::move(out), {a, b}, [a, b](Graph& g, const Tensor& d) {
        if (a.requires_grad()) g.accumulate(a, num::matmul_nt(d, g.value(b)));
        if (b.requires_grad()) g.accumulate(b, num::matmul_tn(g.value(a), d));
    });
}

Var matmul_nt(Var a, Var b) {
    Graph& g = *a.graph;
    Tensor out = num::matmul_nt(a.value(), b.value());
    return g.record(std::move(out), {a, b}, [a, b](Graph& g, const Tensor& d) {
        // out = a b^T: da = d b, db = d^T a
        if (a.requires_grad()) g.accumulate(a, num::matmul(d, g.value(b)));
        if (b.requires_grad()) g.accumulate(b, num::matmul_tn(d, g.value(a)));
    });
}

Var add(Var a, Var b) {
    same_shape(a.value(), b.value(), "add");
    Tensor out = a.value();
    auto bv = b.value().values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] += bv[i];
    return a.graph->record(std::move(out), {a, b}, [a, b](Graph& g, const Tensor& d) {
        g.accumulate(a, d);
        g.accumulate(b, d);
    });
}

Var sub(Var a, Var b) {
    same_shape(a.value(), b.value(), "sub");
    Tensor out = a.value();
    auto bv = b.value().values();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] -= bv[i];
    return a.graph->record(std::move(out), {a, b}, [a, b](Graph& g, const Tensor& d) {
        g.accumulate(a, d);
        if (b.requires_grad()) g.accumulate(b, map(d, [](double x) { return -x; }));
    });
}

Var mul(Var a, Var b) {
    same_shape(a.value(), b.value(), "mul");
    Tensor out = hadamard(a.value(), b.value());
    return a.graph->record(std::move(out), {a, b}, [a, b](Graph& g, const Tensor& d) {
        if (a.requires_grad()) g.accumulate(a, hadamard(d, g.value(b)));
        if (b.requires_grad()) g.accumulate(b, hadamard(d, g.value(a)));
    });
}

Var add_row(Var m, Var row) {
    const Tensor& mv = m.value();
    const Tensor& rv = row.value();
    require_matrix(mv, "add_row");
    if (rv.rank() != 2 || rv.rows() != 1 || rv.cols() != mv.cols())
        throw ShapeError("add_row: row " + shape_str(rv.shape()) + " does not fit " + shape_str(mv.shape()));
    Tensor out = mv;
    const std::size_t c = mv.cols();
    for (std::size_t r = 0; r < mv.rows(); ++r)
        for (std::size_t j = 0; j < c; ++j) out(r, j) += rv[j];
    return m.graph->record(std::move(out), {m, row}, [m, row](Graph& g, const Tensor& d) {
        g.accumulate(m, d);
        if (row.requires_grad()) {
            Tensor dr({1, d.cols()});
            for (std::size_t r = 0; r < d.rows(); ++r)
                for (std::size_t j = 0; j < d.cols(); ++j) dr[j] += d(r, j);
            g.accumulate(row, std::move(dr));
        }
    });
}

Var scale(Var a, double c) {
    Tensor out = map(a.value(), [c](double x) { return x * c; });
    return a.graph->record(std::move(out), {a}, [a, c](Graph& g, const Tensor& d) {
        g.accumulate(a, map(d, [c](double x) { return x * c; }));
    });
}

Var sum(Var a) {
    double s = 0.0;
    for (double x : a.value().values()) s += x;
    return a.graph->record(Tensor::scalar(s), {a}, [a](Graph& g, const Tensor& d) {
        g.accumulate(a, Tensor(g.value(a).shape(), d.item()));
    });
}

Var mean(Var a) {
    const double n = static_cast<double>(a.value().size());
    double s = 0.0;
    for (double x : a.value().values()) s += x;
    return a.graph->record(Tensor::scalar(s / n), {a}, [a, n](Graph& g, const Tensor& d) {
        g.accumulate(a, Tensor(g.value(a).shape(), d.item() / n));
    });
}

Var reshape(Var a, Shape shape) {
    Tensor out = a.value().reshaped(std::move(shape));
    return a.graph->record(std::move(out), {a}, [a](Graph& g, const Tensor& d) {
        g.accumulate(a, d.reshaped(g.value(a).shape()));
    });
}

Var transpose(Var a) {
    Tensor out = num::transpose(a.value());
    return a.graph->record(std::move(out), {a}, [a](Graph& g, const Tensor& d) {
        g.accumulate(a, num::transpose(d));
    });
}

namespace {
constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;
}

Var gelu(Var a) {
    Tensor out = map(a.value(), [](double x) {
        return 0.5 * x * (1.0 + std::tanh(kGeluC * (x + kGeluA * x * x * x)));
    });
    return a.graph->record(std::move(out), {a}, [a](Graph& g, const Tensor& d) {
        const Tensor& x = g.value(a);
        Tensor dx(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double v = x[i];
            const double t = std::tanh(kGeluC * (v + kGeluA * v * v * v));
            const double dt = (1.0 - t * t) * kGeluC * (1.0 + 3.0 * kGeluA * v * v);
            dx[i] = d[i] * (0.5 * (1.0 + t) + 0.5 * v * dt);
        }
        g.accumulate(a, std::move(dx));
    });
}

Var sigmoid(Var a) {
    auto out = std::make_shared<Tensor>(map(a.value(), [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
    }));
    Tensor copy = *out;
    return a.graph->record(std::move(copy), {a}, [a, out](Graph& g, const Tensor& d) {
        Tensor dx(d.shape());
        for (std::size_t i = 0; i < d.size(); ++i) dx[i] = d[i] * (*out)[i] * (1.0 - (*out)[i]);
        g.accumulate(a, std::move(dx));
    });
}

Var tanh(Var a) {
    Tensor out = map(a.value(), [](double x) { return std::tanh(x); });
    return a.graph->record(std::move(out), {a}, [a](Graph& g, const Tensor& d) {
        const Tensor& x = g.value(a);
        Tensor dx(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) {
            const double t = std::tanh(x[i]);
            dx[i] = d[i] * (1.0 - t * t);
        }
        g.accumulate(a, std::move(dx));
    });
}

Var log(Var a) {
    for (double x : a.value().values())
        if (!(x > 0.0)) throw DomainError("log of non-positive value");
    Tensor out = map(a.value(), [](double x) { return std::log(x); });
    return a.graph->record(std::move(out), {a}, [a](Graph& g, const Tensor& d) {
        const Tensor& x = g.value(a);
        Tensor dx(x.shape());
        for (std::size_t i = 0; i < x.size(); ++i) dx[i] = d[i] / x[i];
        g.accumulate(a, std::move(dx));
    });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
    const Tensor& xv = x.value();
    require_matrix(xv, "layer_norm");
    const std::size_t rows = xv.rows(), cols = xv.cols();
    if (gain.value().shape() != Shape{1, cols} || bias.value().shape() != Shape{1, cols})
        throw ShapeError("layer_norm: gain/bias must be 1x" + std::to_string(cols));
    auto xhat = std::make_shared<Tensor>(xv.shape());
    auto inv = std::make_shared<std::vector<double>>(rows);
    Tensor out(xv.shape());
    const auto& gv = gain.value();
    const auto& bv = bias.value();
    for (std::size_t r = 0; r < rows; ++r) {
        auto in = xv.row(r);
        double mu = 0.0;
        for (double v : in) mu += v;
        mu /= static_cast<double>(cols);
        double var = 0.0;
        for (double v : in) var += (v - mu) * (v - mu);
        var /= static_cast<double>(cols);
        const double is = 1.0 / std::sqrt(var + eps);
        (*inv)[r] = is;
        for (std::size_t c = 0; c < cols; ++c) {
            const double h = (in[c] - mu) * is;
            (*xhat)(r, c) = h;
            out(r, c) = h * gv[c] + bv[c];
        }
    }
    return x.graph->record(std::move(out), {x, gain, bias},
                           [x, gain, bias, xhat, inv](Graph& g, const Tensor& d) {
        const std::size_t rows = d.rows(), cols = d.cols();
        const auto& gv = g.value(gain);
        if (gain.requires_grad() || bias.requires_grad()) {
            Tensor dg({1, cols}), db({1, cols});
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c) {
                    dg[c] += d(r, c) * (*xhat)(r, c);
                    db[c] += d(r, c);
                }
            g.accumulate(gain, std::move(dg));
            g.accumulate(bias, std::move(db));
        }
        if (x.requires_grad()) {
            Tensor dx({rows, cols});
            const double n = static_cast<double>(cols);
            for (std::size_t r = 0; r < rows; ++r) {
                double s1 = 0.0, s2 = 0.0;
                for (std::size_t c = 0; c < cols; ++c) {
                    const double dh = d(r, c) * gv[c];
                    s1 += dh;
                    s2 += dh * (*xhat)(r, c);
                }
                const double is = (*inv)[r];
                for (std::size_t c = 0; c < cols; ++c) {
                    const double dh = d(r, c) * gv[c];
                    dx(r, c) = is / n * (n * dh - s1 - (*xhat)(r, c) * s2);
                }
            }
            g.accumulate(x, std::move(dx));
        }
    });
}

namespace {
// d(softmax) for one row block: ds = a * (da - sum(da * a))
Tensor softmax_backward(const Tensor& a, const Tensor& da) {
    Tensor ds(a.shape());
    for (std::size_t r = 0; r < a.rows(); ++r) {
        double s = 0.0;
        for (std::size_t c = 0; c < a.cols(); ++c) s += da(r, c) * a(r, c);
        for (std::size_t c = 0; c < a.cols(); ++c) ds(r, c) = a(r, c) * (da(r, c) - s);
    }
    return ds;
}
} // namespace

Var softmax_rows(Var m) {
    auto out = std::make_shared<Tensor>(num::softmax_rows(m.value()));
    Tensor copy = *out;
    return m.graph->record(std::move(copy), {m}, [m, out](Graph& g, const Tensor& d) {
        g.accumulate(m, softmax_backward(*out, d));
    });
}

Var l2_normalize_rows(Var x) {
    const Tensor& xv = x.value();
    require_matrix(xv, "l2_normalize_rows");
    auto norms = std::make_shared<std::vector<double>>(xv.rows());
    Tensor out(xv.shape());
    for (std::size_t r = 0; r < xv.rows(); ++r) {
        const double n = num::norm(xv.row(r));
        if (n == 0.0) throw DomainError("l2_normalize_rows: zero row has no direction");
        (*norms)[r] = n;
        for (std::size_t c = 0; c < xv.cols(); ++c) out(r, c) = xv(r, c) / n;
    }
    auto y = std::make_shared<Tensor>(out);
    return x.graph->record(std::move(out), {x}, [x, y, norms](Graph& g, const Tensor& d) {
        Tensor dx(d.shape());
        for (std::size_t r = 0; r < d.rows(); ++r) {
            const double yd = num::dot(y->row(r), d.row(r));
            for (std::size_t c = 0; c < d.cols(); ++c)
                dx(r, c) = (d(r, c) - (*y)(r, c) * yd) / (*norms)[r];
        }
        g.accumulate(x, std::move(dx));
    });
}

Var cross_entropy_rows(Var logits, const std::vector<std::size_t>& targets,
                       const std::vector<std::vector<bool>>& exclude) {
    const Tensor& lv = logits.value();
    require_matrix(lv, "cross_entropy_rows");
    const std::size_t rows = lv.rows(), cols = lv.cols();
    if (targets.size() != rows) throw ShapeError("cross_entropy_rows: one target per row required");
    if (!exclude.empty() && exclude.size() != rows) throw ShapeError("cross_entropy_rows: exclusion mask rows");
    auto probs = std::make_shared<Tensor>(lv.shape());
    double total = 0.0;
    for (std::size_t r = 0; r < rows; ++r) {
        if (targets[r] >= cols) throw ShapeError("cross_entropy_rows: target out of range");
        auto in = lv.row(r);
        auto included = [&](std::size_t c) {
            return exclude.empty() || c == targets[r] || !exclude[r][c];
        };
        double mx = -INFINITY;
        for (std::size_t c = 0; c < cols; ++c)
            if (included(c)) mx = std::max(mx, in[c]);
        double s = 0.0;
        for (std::size_t c = 0; c < cols; ++c) {
            const double e = included(c) ? std::exp(in[c] - mx) : 0.0;
            (*probs)(r, c) = e;
            s += e;
        }
        for (std::size_t c = 0; c < cols; ++c) (*probs)(r, c) /= s;
        total += -(in[targets[r]] - mx - std::log(s));
    }
    const double n = static_cast<double>(rows);
    return logits.graph->record(Tensor::scalar(total / n), {logits},
                                [logits, probs, targets, n](Graph& g, const Tensor& d) {
        Tensor dl = *probs;
        for (std::size_t r = 0; r < dl.rows(); ++r) dl(r, targets[r]) -= 1.0;
        const double k = d.item() / n;
        for (double& v : dl.values()) v *= k;
        g.accumulate(logits, std::move(dl));
    });
}

Var cosine_sim(Var a, Var b) {
    const Tensor& av = a.value();
    const Tensor& bv = b.value();
    same_shape(av, bv, "cosine_sim");
    const double na = num::norm(av.values()), nb = num::norm(bv.values());
    if (na == 0.0 || nb == 0.0) throw DomainError("cosine_sim: zero vector has no direction");
    const double c = num::dot(av.values(), bv.values()) / (na * nb);
    return a.graph->record(Tensor::scalar(c), {a, b}, [a, b, na, nb, c](Graph& g, const Tensor& d) {
        const Tensor& av = g.value(a);
        const Tensor& bv = g.value(b);
        const double k = d.item();
        if (a.requires_grad()) {
            Tensor da(av.shape());
            for (std::size_t i = 0; i < av.size(); ++i)
                da[i] = k * (bv[i] / (na * nb) - c * av[i] / (na * na));
            g.accumulate(a, std::move(da));
        }
        if (b.requires_grad()) {
            Tensor db(bv.shape());
            for (std::size_t i = 0; i < bv.size(); ++i)
                db[i] = k * (av[i] / (na * nb) - c * bv[i] / (nb * nb));
            g.accumulate(b, std::move(db));
        }
    });
}

Var dropout(Var v, double p, std::uint64_t seed) {
    auto mask = std::make_shared<std::vector<double>>(dropout_mask(v.value().size(), p, seed));
    if (p == 0.0) return v;
    Tensor out = v.value();
    for (std::size_t i = 0; i < out.size(); ++i) out[i] *= (*mask)[i];
    return v.graph->record(std::move(out), {v}, [v, mask](Graph& g, const Tensor& d) {
        Tensor dv = d;
        for (std::size_t i = 0; i < dv.size(); ++i) dv[i] *= (*mask)[i];
        g.accumulate(v, std::move(dv));
    });
}

Var slice_rows(Var x, std::size_t begin, std::size_t count) {
    const Tensor& xv = x.value();
    require_matrix(xv, "slice_rows");
    if (count == 0 || begin + count > xv.rows())
        throw ShapeError("slice_rows: range out of bounds for " + shape_str(xv.shape()));
    return x.graph->record(rows_of(xv, begin, count), {x}, [x, begin](Graph& g, const Tensor& d) {
        Tensor dx(g.value(x).shape());
        add_rows_into(dx, begin, d);
        g.accumulate(x, std::move(dx));
    });
}

Var slice_cols(Var x, std::size_t begin, std::size_t count) {
    const Tensor& xv = x.value();
    require_matrix(xv, "slice_cols");
    if (count == 0 || begin + count > xv.cols())
        throw ShapeError("slice_cols: range out of bounds for " + shape_str(xv.shape()));
    Tensor out({xv.rows(), count});
    for (std::size_t r = 0; r < xv.rows(); ++r)
        for (std::size_t c = 0; c < count; ++c) out(r, c) = xv(r, begin + c);
    return x.graph->record(std::move(out), {x}, [x, begin](Graph& g, const Tensor& d) {
        Tensor dx(g.value(x).shape());
        for (std::size_t r = 0; r < d.rows(); ++r)
            for (std::size_t c = 0; c < d.cols(); ++c) dx(r, begin + c) = d(r, c);
        g.accumulate(x, std::move(dx));
    });
}

Var concat_rows(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_rows: nothing to concatenate");
    const std::size_t cols = parts.front().value().cols();
    std::size_t rows = 0;
    for (const auto& p : parts) {
        if (p.value().cols() != cols) throw ShapeError("concat_rows: column count mismatch");
        rows += p.value().rows();
    }
    std::vector<double> vals;
    vals.reserve(rows * cols);
    for (const auto& p : parts) {
        auto v = p.value().values();
        vals.insert(vals.end(), v.begin(), v.end());
    }
    return parts.front().graph->record(Tensor({rows, cols}, std::move(vals)), parts,
                                       [parts](Graph& g, const Tensor& d) {
        std::size_t off = 0;
        for (const auto& p : parts) {
            const std::size_t n = g.value(p).rows();
            if (p.requires_grad()) g.accumulate(p, rows_of(d, off, n));
            off += n;
        }
    });
}

Var concat_cols(const std::vector<Var>& parts) {
    if (parts.empty()) throw ShapeError("concat_cols: nothing to concatenate");
    const std::size_t rows = parts.front().value().rows();
    std::size_t cols = 0;
    for (const auto& p : parts) {
        if (p.value().rows() != rows) throw ShapeError("concat_cols: row count mismatch");
        cols += p.value().cols();
    }
    Tensor out({rows, cols});
    std::size_t off = 0;
    for (const auto& p : parts) {
        const Tensor& v = p.value();
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < v.cols(); ++c) out(r, off + c) = v(r, c);
        off += v.cols();
    }
    return parts.front().graph->record(std::move(out), parts, [parts](Graph& g, const Tensor& d) {
        std::size_t off = 0;
        for (const auto& p : parts) {
            const std::size_t n = g.value(p).cols();
            if (p.requires_grad()) {
                Tensor dp({d.rows(), n});
                for (std::size_t r = 0; r < d.rows(); ++r)
                    for (std::size_t c = 0; c < n; ++c) dp(r, c) = d(r, off + c);
                g.accumulate(p, std::move(dp));
            }
            off += n;
        }
    });
}

Var gather_rows(Var table, const std::vector<std::size_t>& index) {
    const Tensor& tv = table.value();
    require_matrix(tv, "gather_rows");
    if (index.empty()) throw ShapeError("gather_rows: empty index");
    const std::size_t cols = tv.cols();
    Tensor out({index.size(), cols});
    for (std::size_t i = 0; i < index.size(); ++i) {
        if (index[i] >= tv.rows()) throw ShapeError("gather_rows: index out of range");
        auto src = tv.row(index[i]);
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return table.graph->record(std::move(out), {table}, [table, index](Graph& g, const Tensor& d) {
        Tensor dt(g.value(table).shape());
        for (std::size_t i = 0; i < index.size(); ++i) {
            auto dst = dt.row(index[i]);
            auto src = d.row(i);
            for (std::size_t c = 0; c < src.size(); ++c) dst[c] += src[c];
        }
        g.accumulate(table, std::move(dt));
    });
}

Var clamp(Var x, double lo, double hi) {
    Tensor out = map(x.value(), [lo, hi](double v) { return std::clamp(v, lo, hi); });
    return x.graph->record(std::move(out), {x}, [x, lo, hi](Graph& g, const Tensor& d) {
        const Tensor& xv = g.value(x);
        Tensor dx(xv.shape());
        for (std::size_t i = 0; i < xv.size(); ++i) dx[i] = (xv[i] < lo || xv[i] > hi) ? 0.0 : d[i];
        g.accumulate(x, std::move(dx));
    });
}

AttentionResult attention_values(const Tensor& q, const Tensor& k, const Tensor& v, double scale,
                                 const std::vector<bool>& key_mask) {
    require_matrix(q, "attention");
    require_matrix(k, "attention");
    require_matrix(v, "attention");
    if (q.cols() != k.cols()) throw ShapeError("attention: query/key width mismatch");
    if (k.rows() != v.rows()) throw ShapeError("attention: key/value row mismatch");
    Tensor scores = num::matmul_nt(q, k);
    for (double& s : scores.values()) s *= scale;
    Tensor w = key_mask.empty() ? num::softmax_rows(scores) : num::softmax_rows_masked(scores, key_mask);
    Tensor out = num::matmul(w, v);
    return {std::move(out), std::move(w)};
}

Var attention(Var q, Var k, Var v, const std::vector<AttentionBlock>& blocks, double scale) {
    const Tensor& qv = q.value();
    const Tensor& kv = k.value();
    const Tensor& vv = v.value();
    require_matrix(qv, "attention");
    require_matrix(kv, "attention");
    require_matrix(vv, "attention");
    if (qv.cols() != kv.cols()) throw ShapeError("attention: query/key width mismatch");
    if (kv.rows() != vv.rows()) throw ShapeError("attention: key/value row mismatch");
    if (blocks.empty()) throw ShapeError("attention: no blocks");
    std::size_t out_rows = 0;
    for (const auto& b : blocks) {
        if (b.q_count == 0 || b.k_count == 0 || b.q_begin + b.q_count > qv.rows() ||
            b.k_begin + b.k_count > kv.rows())
            throw ShapeError("attention: block range out of bounds");
        if (!b.key_mask.empty() && b.key_mask.size() != b.k_count)
            throw ShapeError("attention: key mask length mismatch");
        out_rows += b.q_count;
    }
    auto weights = std::make_shared<std::vector<Tensor>>();
    weights->reserve(blocks.size());
    Tensor out({out_rows, vv.cols()});
    std::size_t off = 0;
    for (const auto& b : blocks) {
        auto r = attention_values(rows_of(qv, b.q_begin, b.q_count), rows_of(kv, b.k_begin, b.k_count),
                                  rows_of(vv, b.k_begin, b.k_count), scale, b.key_mask);
        add_rows_into(out, off, r.output);
        weights->push_back(std::move(r.weights));
        off += b.q_count;
    }
    return q.graph->record(std::move(out), {q, k, v},
                           [q, k, v, blocks, weights, scale](Graph& g, const Tensor& d) {
        const Tensor& qv = g.value(q);
        const Tensor& kv = g.value(k);
        const Tensor& vv = g.value(v);
        Tensor dq(qv.shape()), dk(kv.shape()), dv(vv.shape());
        std::size_t off = 0;
        for (std::size_t i = 0; i < blocks.size(); ++i) {
            const auto& b = blocks[i];
            const Tensor& w = (*weights)[i];
            Tensor dout = rows_of(d, off, b.q_count);
            Tensor vb = rows_of(vv, b.k_begin, b.k_count);
            Tensor dw = num::matmul_nt(dout, vb);
            add_rows_into(dv, b.k_begin, num::matmul_tn(w, dout));
            Tensor ds = softmax_backward(w, dw);
            for (double& x : ds.values()) x *= scale;
            add_rows_into(dq, b.q_begin, num::matmul(ds, rows_of(kv, b.k_begin, b.k_count)));
            add_rows_into(dk, b.k_begin, num::matmul_tn(ds, rows_of(qv, b.q_begin, b.q_count)));
            off += b.q_count;
        }
        g.accumulate(q, std::move(dq));
        g.accumulate(k, std::move(dk));
        g.accumulate(v, std::move(dv));
    });
}

} // namespace kepil::num::ops
