#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <functional>
#include <memory>
#include <numeric>
#include <string>
#include <vector>

#include "kblink/error.hpp"
#include "kblink/rng.hpp"

namespace kblink {

using Shape = std::vector<std::size_t>;

inline std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::string out = "[";
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += "x";
        out += std::to_string(s[i]);
    }
    return out + "]";
}

struct TensorImpl {
    Shape shape;
    std::vector<double> values;
    std::vector<double> grad;  // empty until first accumulation
    bool requires_grad = false;
    bool tracked = false;

    void ensure_grad() {
        if (grad.empty()) grad.assign(values.size(), 0.0);
    }
};

// Value-semantics handle onto a shared dense buffer of 64-bit floats.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape shape) {
        return from_values(std::move(shape), {}, false);
    }

    static Tensor constant(Shape shape, std::vector<double> values) {
        return from_values(std::move(shape), std::move(values), false);
    }

    static Tensor scalar(double v) { return constant({1}, {v}); }

    // Trainable leaf.
    static Tensor parameter(Shape shape, std::vector<double> values) {
        return from_values(std::move(shape), std::move(values), true);
    }

    bool defined() const { return impl_ != nullptr; }
    const Shape& shape() const { return impl_->shape; }
    std::size_t rank() const { return impl_->shape.size(); }
    std::size_t numel() const { return impl_->values.size(); }

    const std::vector<double>& values() const { return impl_->values; }
    std::vector<double>& mutable_values() { return impl_->values; }

    double value_at(std::size_t flat) const { return impl_->values.at(flat); }

    double scalar_value() const {
        if (numel() != 1)
            throw shape_error("scalar_value: tensor has shape " + shape_str(shape()));
        return impl_->values[0];
    }

    bool requires_grad() const { return impl_->requires_grad; }
    bool tracked() const { return impl_->tracked; }

    const std::vector<double>& grad() const {
        impl_->ensure_grad();
        return impl_->grad;
    }

    void zero_grad() { impl_->grad.assign(impl_->values.size(), 0.0); }

    std::shared_ptr<TensorImpl> impl() const { return impl_; }

private:
    static Tensor from_values(Shape shape, std::vector<double> values, bool requires_grad) {
        Tensor t;
        t.impl_ = std::make_shared<TensorImpl>();
        const std::size_t n = shape_numel(shape);
        t.impl_->shape = std::move(shape);
        if (values.empty()) {
            t.impl_->values.assign(n, 0.0);
        } else {
            if (values.size() != n)
                throw shape_error("tensor init: " + std::to_string(values.size()) +
                                  " values for shape " + shape_str(t.impl_->shape));
            t.impl_->values = std::move(values);
        }
        t.impl_->requires_grad = requires_grad;
        t.impl_->tracked = requires_grad;
        return t;
    }

    std::shared_ptr<TensorImpl> impl_;
};

// Dropout switch threaded through forward passes. Disabled means identity.
struct DropoutCtx {
    double p = 0.0;
    bool enabled = false;
    Rng* rng = nullptr;
};

// Records one reverse-mode step per produced tensor. Creation order is
// topological order, so the backward pass is a single reverse sweep.
class Tape {
public:
    void set_recording(bool on) { recording_ = on; }
    bool recording() const { return recording_; }
    std::size_t node_count() const { return nodes_.size(); }
    void clear() { nodes_.clear(); }

    // ---- elementwise / arithmetic ----------------------------------------

    // Same-shape add, or b rank-1 broadcast over the rows of rank-2 a.
    Tensor add(const Tensor& a, const Tensor& b) {
        const bool row_broadcast =
            a.rank() == 2 && b.rank() == 1 && a.shape()[1] == b.shape()[0];
        if (!row_broadcast && a.shape() != b.shape())
            throw shape_error("add: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
        std::vector<double> out(a.numel());
        if (row_broadcast) {
            const std::size_t rows = a.shape()[0], cols = a.shape()[1];
            for (std::size_t r = 0; r < rows; ++r)
                for (std::size_t c = 0; c < cols; ++c)
                    out[r * cols + c] = a.values()[r * cols + c] + b.values()[c];
        } else {
            for (std::size_t i = 0; i < out.size(); ++i)
                out[i] = a.values()[i] + b.values()[i];
        }
        Tensor y = result(a.shape(), std::move(out), {a, b});
        if (y.tracked()) {
            auto ai = a.impl(), bi = b.impl(), yi = y.impl();
            push([ai, bi, yi, row_broadcast] {
                if (yi->grad.empty()) return;
                ai->ensure_grad();
                bi->ensure_grad();
                for (std::size_t i = 0; i < yi->grad.size(); ++i) ai->grad[i] += yi->grad[i];
                if (row_broadcast) {
                    const std::size_t cols = bi->values.size();
                    for (std::size_t i = 0; i < yi->grad.size(); ++i)
                        bi->grad[i % cols] += yi->grad[i];
                } else {
                    for (std::size_t i = 0; i < yi->grad.size(); ++i) bi->grad[i] += yi->grad[i];
                }
            });
        }
        return y;
    }

    Tensor add_n(const std::vector<Tensor>& terms) {
        if (terms.empty()) throw contract_error("add_n: empty term list");
        for (const auto& t : terms)
            if (t.shape() != terms[0].shape())
                throw shape_error("add_n: " + shape_str(t.shape()) + " vs " +
                                  shape_str(terms[0].shape()));
        std::vector<double> out(terms[0].numel(), 0.0);
        for (const auto& t : terms)
            for (std::size_t i = 0; i < out.size(); ++i) out[i] += t.values()[i];
        Tensor y = result(terms[0].shape(), std::move(out), terms);
        if (y.tracked()) {
            std::vector<std::shared_ptr<TensorImpl>> ins;
            ins.reserve(terms.size());
            for (const auto& t : terms) ins.push_back(t.impl());
            auto yi = y.impl();
            push([ins, yi] {
                if (yi->grad.empty()) return;
                for (auto& in : ins) {
                    in->ensure_grad();
                    for (std::size_t i = 0; i < yi->grad.size(); ++i)
                        in->grad[i] += yi->grad[i];
                }
            });
        }
        return y;
    }

    Tensor sub(const Tensor& a, const Tensor& b) { return add(a, scale(b, -1.0)); }

    // Same-shape product, or either side a [1] scalar broadcast.
    Tensor mul(const Tensor& a, const Tensor& b) {
        const bool a_scalar = a.numel() == 1, b_scalar = b.numel() == 1;
        if (!a_scalar && !b_scalar && a.shape() != b.shape())
            throw shape_error("mul: " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
        const Shape& out_shape = a_scalar ? b.shape() : a.shape();
        std::vector<double> out(shape_numel(out_shape));
        for (std::size_t i = 0; i < out.size(); ++i)
            out[i] = a.values()[a_scalar ? 0 : i] * b.values()[b_scalar ? 0 : i];
        Tensor y = result(out_shape, std::move(out), {a, b});
        if (y.tracked()) {
            auto ai = a.impl(), bi = b.impl(), yi = y.impl();
            push([ai, bi, yi, a_scalar, b_scalar] {
                if (yi->grad.empty()) return;
                ai->ensure_grad();
                bi->ensure_grad();
                for (std::size_t i = 0; i < yi->grad.size(); ++i) {
                    const double g = yi->grad[i];
                    ai->grad[a_scalar ? 0 : i] += g * bi->values[b_scalar ? 0 : i];
                    bi->grad[b_scalar ? 0 : i] += g * ai->values[a_scalar ? 0 : i];
                }
            });
        }
        return y;
    }

    Tensor scale(const Tensor& a, double c) {
        std::vector<double> out(a.numel());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * c;
        Tensor y = result(a.shape(), std::move(out), {a});
        if (y.tracked()) {
            auto ai = a.impl(), yi = y.impl();
            push([ai, yi, c] {
                if (yi->grad.empty()) return;
                ai->ensure_grad();
                for (std::size_t i = 0; i < yi->grad.size(); ++i) ai->grad[i] += c * yi->grad[i];
            });
        }
        return y;
    }

    // ---- linear algebra ---------------------------------------------------

    Tensor matmul(const Tensor& a, const Tensor& b) {
        if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0])
            throw shape_error("matmul: " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
        const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
        std::vector<double> out(m * n, 0.0);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t p = 0; p < k; ++p) {
                const double av = a.values()[i * k + p];
                if (av == 0.0) continue;
                for (std::size_t j = 0; j < n; ++j)
                    out[i * n + j] += av * b.values()[p * n + j];
            }
        Tensor y = result({m, n}, std::move(out), {a, b});
        if (y.tracked()) {
            auto ai = a.impl(), bi = b.impl(), yi = y.impl();
            push([ai, bi, yi, m, k, n] {
                if (yi->grad.empty()) return;
                ai->ensure_grad();
                bi->ensure_grad();
                // dA += dY * B^T ; dB += A^T * dY
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j) {
                        const double g = yi->grad[i * n + j];
                        if (g == 0.0) continue;
                        for (std::size_t p = 0; p < k; ++p) {
                            ai->grad[i * k + p] += g * bi->values[p * n + j];
                            bi->grad[p * n + j] += g * ai->values[i * k + p];
                        }
                    }
            });
        }
        return y;
    }

    Tensor transpose(const Tensor& a) {
        if (a.rank() != 2) throw shape_error("transpose: need rank 2, got " + shape_str(a.shape()));
        const std::size_t m = a.shape()[0], n = a.shape()[1];
        std::vector<double> out(m * n);
        for (std::size_t i = 0; i < m; ++i)
            for (std::size_t j = 0; j < n; ++j) out[j * m + i] = a.values()[i * n + j];
        Tensor y = result({n, m}, std::move(out), {a});
        if (y.tracked()) {
            auto ai = a.impl(), yi = y.impl();
            push([ai, yi, m, n] {
                if (yi->grad.empty()) return;
                ai->ensure_grad();
                for (std::size_t i = 0; i < m; ++i)
                    for (std::size_t j = 0; j < n; ++j)
                        ai->grad[i * n + j] += yi->grad[j * m + i];
            });
        }
        return y;
    }

    Tensor dot(const Tensor& a, const Tensor& b) {
        if (a.rank() != 1 || b.rank() != 1 || a.numel() != b.numel())
            throw shape_error("dot: " + shape_str(a.shape()) + " . " + shape_str(b.shape()));
        double acc = 0.0;
        for (std::size_t i = 0; i < a.numel(); ++i) acc += a.values()[i] * b.values()[i];
        Tensor y = result({1}, {acc}, {a, b});
        if (y.tracked()) {
            auto ai = a.impl(), bi = b.impl(), yi = y.impl();
            push([ai, bi, yi] {
                if (yi->grad.empty()) return;
                ai->ensure_grad();
                bi->ensure_grad();
                const double g = yi->grad[0];
                for (std::size_t i = 0; i < ai->values.size(); ++i) {
                    ai->grad[i] += g * bi->values[i];
                    bi->grad[i] += g * ai->values[i];
                }
            });
        }
        return y;
    }

    // ---- shape manipulation ----------------------------------------------

    Tensor reshape(const Tensor& a, Shape shape) {
        if (shape_numel(shape) != a.numel())
            throw shape_error("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape));
        Tensor y = result(shape, a.values(), {a});
        if (y.tracked()) {
            auto ai = a.impl(), yi = y.impl();
            push([ai, yi] {
                if (yi->grad.empty()) return;
                ai->ensure_grad();
                for (std::size_t i = 0; i < yi->grad.size(); ++i) ai->grad[i] += yi->grad[i];
            });
        }
        return y;
    }

    // Concatenate rank-1 tensors into a longer vector, or rank-2 tensors by
    // stacking rows (all with equal column counts).
    Tensor concat(const std::vector<Tensor>& parts) {
        if (parts.empty()) throw contract_error("concat: empty part list");
        const std::size_t rank = parts[0].rank();
        for (const auto& p : parts)
            if (p.rank() != rank)
                throw shape_error("concat: mixed ranks " + shape_str(parts[0].shape()) + " vs " +
                                  shape_str(p.shape()));
        std::vector<double> out;
        Shape out_shape;
        std::vector<std::size_t> offsets;
        if (rank == 1) {
            std::size_t total = 0;
            for (const auto& p : parts) {
                offsets.push_back(total);
                total += p.numel();
            }
            out.reserve(total);
            for (const auto& p : parts)
                out.insert(out.end(), p.values().begin(), p.values().end());
            out_shape = {total};
        } else if (rank == 2) {
            const std::size_t cols = parts[0].shape()[1];
            std::size_t rows = 0;
            for (const auto& p : parts) {
                if (p.shape()[1] != cols)
                    throw shape_error("concat: column mismatch " + shape_str(parts[0].shape()) +
                                      " vs " + shape_str(p.shape()));
                offsets.push_back(rows * cols);
                rows += p.shape()[0];
            }
            out.reserve(rows * cols);
            for (const auto& p : parts)
                out.insert(out.end(), p.values().begin(), p.values().end());
            out_shape = {rows, cols};
        } else {
            throw shape_error("concat: rank " + std::to_string(rank) + " unsupported");
        }
        Tensor y = result(out_shape, std::move(out), parts);
        if (y.tracked()) {
            std::vector<std::shared_ptr<TensorImpl>> ins;
            for (const auto& p : parts) ins.push_back(p.impl());
            auto yi = y.impl();
            push([ins, yi, offsets] {
                if (yi->grad.empty()) return;
                for (std::size_t p = 0; p < ins.size(); ++p) {
                    ins[p]->ensure_grad();
                    for (std::size_t i = 0; i < ins[p]->values.size(); ++i)
                        ins[p]->grad[i] += yi->grad[offsets[p] + i];
                }
            });
        }
        return y;
    }

    Tensor slice_rows(const Tensor& a, std::size_t begin, std::size_t end) {
        if (a.rank() != 2) throw shape_error("slice_rows: need rank 2, got " + shape_str(a.shape()));
        if (begin >= end || end > a.shape()[0])
            throw span_error("slice_rows: [" + std::to_string(begin) + ", " + std::to_string(end) +
                             ") out of " + std::to_string(a.shape()[0]) + " rows");
        const std::size_t cols = a.shape()[1];
        std::vector<double> out(a.values().begin() + static_cast<std::ptrdiff_t>(begin * cols),
                                a.values().begin() + static_cast<std::ptrdiff_t>(end * cols));
        Tensor y = result({end - begin, cols}, std::move(out), {a});
        if (y.tracked()) {
            auto ai = a.impl(), yi = y.impl();
            push([ai, yi, begin, cols] {
                if (yi->grad.empty()) return;
                ai->ensure_grad();
                for (std::size_t i = 0; i < yi->grad.size(); ++i)
                    ai->grad[begin * cols + i] += yi->grad[i];
            });
        }
        return y;
    }

    Tensor slice_cols(const Tensor& a, std::size_t begin, std::size_t end) {
        if (a.rank() != 2) throw shape_error("slice_cols: need rank 2, got " + shape_str(a.shape()));
        if (begin >= end || end > a.shape()[1])
            throw span_error("slice_cols: [" + std::to_string(begin) + ", " + std::to_string(end) +
                             ") out of " + std::to_string(a.shape()[1]) + " cols");
        const std::size_t rows = a.shape()[0], cols = a.shape()[1], width = end - begin;
        std::vector<double> out(rows * width);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < width; ++c)
                out[r * width + c] = a.values()[r * cols + begin + c];
        Tensor y = result({rows, width}, std::move(out), {a});
        if (y.tracked()) {
            auto ai = a.impl(), yi = y.impl();
            push([ai, yi, rows, cols, begin, width] {
                if (yi->grad.empty()) return;
                ai->ensure_grad();
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < width; ++c)
                        ai->grad[r * cols + begin + c] += yi->grad[r * width + c];
            });
        }
        return y;
    }

    // Row i of a rank-2 tensor as a rank-1 vector.
    Tensor row(const Tensor& a, std::size_t i) {
        return reshape(slice_rows(a, i, i + 1), {a.shape()[1]});
    }

    // Single element as a [1] tensor.
    Tensor element(const Tensor& a, std::size_t flat) {
        if (flat >= a.numel())
            throw range_error("element: index " + std::to_string(flat) + " out of " +
                              std::to_string(a.numel()));
        Tensor y = result({1}, {a.values()[flat]}, {a});
        if (y.tracked()) {
            auto ai = a.impl(), yi = y.impl();
            push([ai, yi, flat] {
                if (yi->grad.empty()) return;
                ai->ensure_grad();
                ai->grad[flat] += yi->grad[0];
            });
        }
        return y;
    }

    // Sum of the selected coordinates of a rank-1 tensor. The sparse gather
    // used for relation-vector * fact-bit products.
    Tensor index_sum(const Tensor& a, const std::vector<std::size_t>& idx) {
        if (a.rank() != 1) throw shape_error("index_sum: need rank 1, got " + shape_str(a.shape()));
        double acc = 0.0;
        for (auto i : idx) {
            if (i >= a.numel())
                throw range_error("index_sum: index " + std::to_string(i) + " out of " +
                                  std::to_string(a.numel()));
            acc += a.values()[i];
        }
        Tensor y = result({1}, {acc}, {a});
        if (y.tracked()) {
            auto ai = a.impl(), yi = y.impl();
            push([ai, yi, idx] {
                if (yi->grad.empty()) return;
                ai->ensure_grad();
                for (auto i : idx) ai->grad[i] += yi->grad[0];
            });
        }
        return y;
    }

    // ---- reductions -------------------------------------------------------

    Tensor sum(const Tensor& a) {
        double acc = 0.0;
        for (double v : a.values()) acc += v;
        Tensor y = result({1}, {acc}, {a});
        if (y.tracked()) {
            auto ai = a.impl(), yi = y.impl();
            push([ai, yi] {
                if (yi->grad.empty()) return;
                ai->ensure_grad();
                for (std::size_t i = 0; i < ai->values.size(); ++i) ai->grad[i] += yi->grad[0];
            });
        }
        return y;
    }

    // Mean over axis 0 of a rank-2 tensor.
    Tensor mean_rows(const Tensor& a) {
        if (a.rank() != 2) throw shape_error("mean_rows: need rank 2, got " + shape_str(a.shape()));
        const std::size_t rows = a.shape()[0], cols = a.shape()[1];
        std::vector<double> out(cols, 0.0);
        for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t c = 0; c < cols; ++c) out[c] += a.values()[r * cols + c];
        for (auto& v : out) v /= static_cast<double>(rows);
        Tensor y = result({cols}, std::move(out), {a});
        if (y.tracked()) {
            auto ai = a.impl(), yi = y.impl();
            push([ai, yi, rows, cols] {
                if (yi->grad.empty()) return;
                ai->ensure_grad();
                const double inv = 1.0 / static_cast<double>(rows);
                for (std::size_t r = 0; r < rows; ++r)
                    for (std::size_t c = 0; c < cols; ++c)
                        ai->grad[r * cols + c] += yi->grad[c] * inv;
            });
        }
        return y;
    }

    // ---- lookup -----------------------------------------------------------

    Tensor embedding(const Tensor& table, const std::vector<std::uint32_t>& ids) {
        if (table.rank() != 2)
            throw shape_error("embedding: table must be rank 2, got " + shape_str(table.shape()));
        const std::size_t rows = table.shape()[0], cols = table.shape()[1];
        std::vector<double> out(ids.size() * cols);
        for (std::size_t i = 0; i < ids.size(); ++i) {
            if (ids[i] >= rows)
                throw range_error("embedding: id " + std::to_string(ids[i]) +
                                  " out of vocabulary of size " + std::to_string(rows));
            std::copy_n(table.values().begin() + static_cast<std::ptrdiff_t>(ids[i] * cols), cols,
                        out.begin() + static_cast<std::ptrdiff_t>(i * cols));
        }
        Tensor y = result({ids.size(), cols}, std::move(out), {table});
        if (y.tracked()) {
            auto ti = table.impl(), yi = y.impl();
            push([ti, yi, ids, cols] {
                if (yi->grad.empty()) return;
                ti->ensure_grad();
                for (std::size_t i = 0; i < ids.size(); ++i)
                    for (std::size_t c = 0; c < cols; ++c)
                        ti->grad[ids[i] * cols + c] += yi->grad[i * cols + c];
            });
        }
        return y;
    }

    // ---- nonlinearities ---------------------------------------------------

    Tensor sigmoid(const Tensor& a) {
        std::vector<double> out(a.numel());
        for (std::size_t i = 0; i < out.size(); ++i) {
            const double x = a.values()[i];
            out[i] = x >= 0.0 ? 1.0 / (1.0 + std::exp(-x))
                              : std::exp(x) / (1.0 + std::exp(x));
        }
        Tensor y = result(a.shape(), std::move(out), {a});
        if (y.tracked()) {
            auto ai = a.impl(), yi = y.impl();
            push([ai, yi] {
                if (yi->grad.empty()) return;
                ai->ensure_grad();
                for (std::size_t i = 0; i < yi->grad.size(); ++i) {
                    const double s = yi->values[i];
                    ai->grad[i] += yi->grad[i] * s * (1.0 - s);
                }
            });
        }
        return y;
    }

    Tensor tanh(const Tensor& a) {
        std::vector<double> out(a.numel());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = std::tanh(a.values()[i]);
        Tensor y = result(a.shape(), std::move(out), {a});
        if (y.tracked()) {
            auto ai = a.impl(), yi = y.impl();
            push([ai, yi] {
                if (yi->grad.empty()) return;
                ai->ensure_grad();
                for (std::size_t i = 0; i < yi->grad.size(); ++i) {
                    const double t = yi->values[i];
                    ai->grad[i] += yi->grad[i] * (1.0 - t * t);
                }
            });
        }
        return y;
    }

    // Exact (erf-based) GELU.
    Tensor gelu(const Tensor& a) {
        std::vector<double> out(a.numel());
        for (std::size_t i = 0; i < out.size(); ++i) {
            const double x = a.values()[i];
            out[i] = 0.5 * x * (1.0 + std::erf(x * M_SQRT1_2));
        }
        Tensor y = result(a.shape(), std::move(out), {a});
        if (y.tracked()) {
            auto ai = a.impl(), yi = y.impl();
            push([ai, yi] {
                if (yi->grad.empty()) return;
                ai->ensure_grad();
                constexpr double inv_sqrt_2pi = 0.3989422804014326779399461;
                for (std::size_t i = 0; i < yi->grad.size(); ++i) {
                    const double x = ai->values[i];
                    const double cdf = 0.5 * (1.0 + std::erf(x * M_SQRT1_2));
                    const double pdf = inv_sqrt_2pi * std::exp(-0.5 * x * x);
                    ai->grad[i] += yi->grad[i] * (cdf + x * pdf);
                }
            });
        }
        return y;
    }

    // Softmax over the last axis (whole vector for rank 1, per row for rank 2).
    Tensor softmax(const Tensor& a) {
        if (a.rank() != 1 && a.rank() != 2)
            throw shape_error("softmax: rank must be 1 or 2, got " + shape_str(a.shape()));
        const std::size_t cols = a.shape().back();
        const std::size_t rows = a.numel() / cols;
        std::vector<double> out(a.numel());
        for (std::size_t r = 0; r < rows; ++r) {
            const double* x = a.values().data() + r * cols;
            double mx = x[0];
            for (std::size_t c = 1; c < cols; ++c) mx = std::max(mx, x[c]);
            double z = 0.0;
            for (std::size_t c = 0; c < cols; ++c) {
                out[r * cols + c] = std::exp(x[c] - mx);
                z += out[r * cols + c];
            }
            for (std::size_t c = 0; c < cols; ++c) out[r * cols + c] /= z;
        }
        Tensor y = result(a.shape(), std::move(out), {a});
        if (y.tracked()) {
            auto ai = a.impl(), yi = y.impl();
            push([ai, yi, rows, cols] {
                if (yi->grad.empty()) return;
                ai->ensure_grad();
                for (std::size_t r = 0; r < rows; ++r) {
                    const double* yv = yi->values.data() + r * cols;
                    const double* gy = yi->grad.data() + r * cols;
                    double inner = 0.0;
                    for (std::size_t c = 0; c < cols; ++c) inner += gy[c] * yv[c];
                    for (std::size_t c = 0; c < cols; ++c)
                        ai->grad[r * cols + c] += yv[c] * (gy[c] - inner);
                }
            });
        }
        return y;
    }

    // Layer norm over the last axis with learnable gain and bias.
    Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias,
                      double eps = 1e-5) {
        const std::size_t cols = a.shape().back();
        if (gain.rank() != 1 || gain.numel() != cols || bias.rank() != 1 || bias.numel() != cols)
            throw shape_error("layer_norm: gain/bias " + shape_str(gain.shape()) + "/" +
                              shape_str(bias.shape()) + " vs input " + shape_str(a.shape()));
        const std::size_t rows = a.numel() / cols;
        std::vector<double> out(a.numel());
        std::vector<double> inv_sigma(rows), xhat(a.numel());
        for (std::size_t r = 0; r < rows; ++r) {
            const double* x = a.values().data() + r * cols;
            double mu = 0.0;
            for (std::size_t c = 0; c < cols; ++c) mu += x[c];
            mu /= static_cast<double>(cols);
            double var = 0.0;
            for (std::size_t c = 0; c < cols; ++c) var += (x[c] - mu) * (x[c] - mu);
            var /= static_cast<double>(cols);
            inv_sigma[r] = 1.0 / std::sqrt(var + eps);
            for (std::size_t c = 0; c < cols; ++c) {
                xhat[r * cols + c] = (x[c] - mu) * inv_sigma[r];
                out[r * cols + c] = gain.values()[c] * xhat[r * cols + c] + bias.values()[c];
            }
        }
        Tensor y = result(a.shape(), std::move(out), {a, gain, bias});
        if (y.tracked()) {
            auto ai = a.impl(), gi = gain.impl(), bi = bias.impl(), yi = y.impl();
            push([ai, gi, bi, yi, rows, cols, inv_sigma, xhat] {
                if (yi->grad.empty()) return;
                ai->ensure_grad();
                gi->ensure_grad();
                bi->ensure_grad();
                for (std::size_t r = 0; r < rows; ++r) {
                    const double* gy = yi->grad.data() + r * cols;
                    const double* xh = xhat.data() + r * cols;
                    double mean_g = 0.0, mean_gx = 0.0;
                    for (std::size_t c = 0; c < cols; ++c) {
                        const double gg = gy[c] * gi->values[c];
                        mean_g += gg;
                        mean_gx += gg * xh[c];
                        gi->grad[c] += gy[c] * xh[c];
                        bi->grad[c] += gy[c];
                    }
                    mean_g /= static_cast<double>(cols);
                    mean_gx /= static_cast<double>(cols);
                    for (std::size_t c = 0; c < cols; ++c) {
                        const double gg = gy[c] * gi->values[c];
                        ai->grad[r * cols + c] +=
                            (gg - mean_g - xh[c] * mean_gx) * inv_sigma[r];
                    }
                }
            });
        }
        return y;
    }

    // Inverted dropout; identity when disabled.
    Tensor dropout(const Tensor& a, const DropoutCtx& ctx) {
        if (!ctx.enabled || ctx.p <= 0.0) return a;
        if (ctx.rng == nullptr) throw contract_error("dropout: enabled without rng");
        const double keep = 1.0 - ctx.p;
        std::vector<double> mask(a.numel());
        for (auto& m : mask) m = ctx.rng->uniform() < keep ? 1.0 / keep : 0.0;
        std::vector<double> out(a.numel());
        for (std::size_t i = 0; i < out.size(); ++i) out[i] = a.values()[i] * mask[i];
        Tensor y = result(a.shape(), std::move(out), {a});
        if (y.tracked()) {
            auto ai = a.impl(), yi = y.impl();
            push([ai, yi, mask] {
                if (yi->grad.empty()) return;
                ai->ensure_grad();
                for (std::size_t i = 0; i < yi->grad.size(); ++i)
                    ai->grad[i] += yi->grad[i] * mask[i];
            });
        }
        return y;
    }

    // ---- losses -----------------------------------------------------------

    // Negative log softmax probability of the gold coordinate.
    Tensor cross_entropy(const Tensor& logits, std::size_t gold) {
        if (logits.rank() != 1)
            throw shape_error("cross_entropy: need rank 1 logits, got " +
                              shape_str(logits.shape()));
        if (gold >= logits.numel())
            throw range_error("cross_entropy: gold " + std::to_string(gold) + " out of " +
                              std::to_string(logits.numel()));
        const auto& x = logits.values();
        double mx = x[0];
        for (double v : x) mx = std::max(mx, v);
        double z = 0.0;
        for (double v : x) z += std::exp(v - mx);
        const double loss = std::log(z) + mx - x[gold];
        Tensor y = result({1}, {loss}, {logits});
        if (y.tracked()) {
            auto li = logits.impl(), yi = y.impl();
            push([li, yi, gold, mx, z] {
                if (yi->grad.empty()) return;
                li->ensure_grad();
                const double g = yi->grad[0];
                for (std::size_t i = 0; i < li->values.size(); ++i) {
                    double p = std::exp(li->values[i] - mx) / z;
                    if (i == gold) p -= 1.0;
                    li->grad[i] += g * p;
                }
            });
        }
        return y;
    }

    // ---- reverse pass -----------------------------------------------------

    // Seeds d(loss)/d(loss) = 1 and sweeps the tape in reverse creation
    // order. All tracked tensors reachable from the loss receive gradients;
    // everything else keeps zeros.
    void backward(const Tensor& loss) {
        if (loss.numel() != 1)
            throw contract_error("backward: loss must be scalar, got " +
                                 shape_str(loss.shape()));
        if (!loss.tracked()) return;
        loss.impl()->ensure_grad();
        loss.impl()->grad[0] += 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

private:
    Tensor result(Shape shape, std::vector<double> values, const std::vector<Tensor>& inputs) {
        Tensor y = Tensor::constant(std::move(shape), std::move(values));
        if (recording_) {
            for (const auto& in : inputs) {
                if (in.tracked()) {
                    y.impl()->tracked = true;
                    break;
                }
            }
        }
        return y;
    }

    void push(std::function<void()> fn) { nodes_.push_back(std::move(fn)); }

    std::vector<std::function<void()>> nodes_;
    bool recording_ = true;
};

}  // namespace kblink
