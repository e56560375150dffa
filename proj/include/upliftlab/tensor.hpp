#pragma once

// Dense 2-D double tensors on a reverse-mode tape, plus Adam and a
// finite-difference gradient checker. Everything trainable in this
// project runs through this file.
//
// Conventions: all tensors are 2-D (scalars are {1,1}, column vectors
// {n,1}). Ops record one backward closure per node; Tape::backward runs
// them in reverse. Gradients accumulate additively, so a tensor feeding
// two consumers gets the sum of both contributions.

#include <cassert>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace uplift {

#ifndef UPLIFT_CHECK_FINITE
#ifndef NDEBUG
#define UPLIFT_CHECK_FINITE 1
#else
#define UPLIFT_CHECK_FINITE 0
#endif
#endif

struct Tensor {
    std::size_t rows = 0, cols = 0;
    std::vector<double> data;
    bool requires_grad = false;
    std::vector<double> grad;  // empty until first accumulation

    std::size_t numel() const { return rows * cols; }

    double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    void ensure_grad() {
        if (grad.size() != numel()) grad.assign(numel(), 0.0);
    }
    void zero_grad() { grad.assign(numel(), 0.0); }
};

using Var = std::shared_ptr<Tensor>;

inline Var make_var(std::size_t rows, std::size_t cols, bool requires_grad = false) {
    auto t = std::make_shared<Tensor>();
    t->rows = rows;
    t->cols = cols;
    t->data.assign(rows * cols, 0.0);
    // Grad storage is allocated up front: backward closures read their
    // output's grad even when nothing downstream consumed that output.
    t->grad.assign(rows * cols, 0.0);
    t->requires_grad = requires_grad;
    return t;
}

inline Var make_var(std::size_t rows, std::size_t cols, std::vector<double> data,
                    bool requires_grad = false) {
    auto t = make_var(rows, cols, requires_grad);
    if (data.size() != rows * cols) throw std::invalid_argument("make_var: data size mismatch");
    t->data = std::move(data);
    return t;
}

inline Var scalar_var(double v, bool requires_grad = false) {
    return make_var(1, 1, {v}, requires_grad);
}

inline void check_finite(const Tensor& t, const char* op) {
#if UPLIFT_CHECK_FINITE
    for (double v : t.data)
        if (!std::isfinite(v)) throw std::runtime_error(std::string("non-finite value after ") + op);
#else
    (void)t;
    (void)op;
#endif
}

class Tape {
public:
    void record(std::function<void()> back) { nodes_.push_back(std::move(back)); }

    // Seeds grad(loss) = 1 and runs all recorded nodes in reverse order.
    void backward(const Var& loss) {
        if (loss->numel() != 1) throw std::invalid_argument("backward: loss must be scalar");
        loss->ensure_grad();
        loss->grad[0] += 1.0;
        for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
    }

    void clear() { nodes_.clear(); }
    std::size_t size() const { return nodes_.size(); }

private:
    std::vector<std::function<void()>> nodes_;
};

// ---------------------------------------------------------------------------
// raw kernels

// C += A(m,k) * B(k,n), row-major, ikj order for contiguous inner loops.
inline void matmul_acc(const double* a, const double* b, double* c, std::size_t m,
                       std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t p = 0; p < k; ++p) {
            double av = arow[p];
            if (av == 0.0) continue;
            const double* brow = b + p * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C += A^T(m,k) * B with A given as (k,m).
inline void matmul_at_acc(const double* a, const double* b, double* c, std::size_t k,
                          std::size_t m, std::size_t n) {
    for (std::size_t p = 0; p < k; ++p) {
        const double* arow = a + p * m;
        const double* brow = b + p * n;
        for (std::size_t i = 0; i < m; ++i) {
            double av = arow[i];
            if (av == 0.0) continue;
            double* crow = c + i * n;
            for (std::size_t j = 0; j < n; ++j) crow[j] += av * brow[j];
        }
    }
}

// C += A(m,k) * B^T with B given as (n,k).
inline void matmul_bt_acc(const double* a, const double* b, double* c, std::size_t m,
                          std::size_t k, std::size_t n) {
    for (std::size_t i = 0; i < m; ++i) {
        const double* arow = a + i * k;
        double* crow = c + i * n;
        for (std::size_t j = 0; j < n; ++j) {
            const double* brow = b + j * k;
            double s = 0.0;
            for (std::size_t p = 0; p < k; ++p) s += arow[p] * brow[p];
            crow[j] += s;
        }
    }
}

// ---------------------------------------------------------------------------
// primitive ops

inline Var matmul(Tape& tape, const Var& a, const Var& b) {
    if (a->cols != b->rows) throw std::invalid_argument("matmul: inner dimensions differ");
    Var out = make_var(a->rows, b->cols);
    matmul_acc(a->data.data(), b->data.data(), out->data.data(), a->rows, a->cols, b->cols);
    check_finite(*out, "matmul");
    tape.record([a, b, out] {
        a->ensure_grad();
        b->ensure_grad();
        // dA = dC * B^T, dB = A^T * dC
        matmul_bt_acc(out->grad.data(), b->data.data(), a->grad.data(), a->rows, b->cols, a->cols);
        matmul_at_acc(a->data.data(), out->grad.data(), b->grad.data(), a->rows, a->cols, b->cols);
    });
    return out;
}

// Y = X * W^T + broadcast bias; fused layer for batched nets.
// X:(B,in), W:(out,in), b:(out,1) -> (B,out)
inline Var linear(Tape& tape, const Var& x, const Var& w, const Var& b) {
    if (x->cols != w->cols || b->rows != w->rows || b->cols != 1)
        throw std::invalid_argument("linear: shape mismatch");
    Var out = make_var(x->rows, w->rows);
    matmul_bt_acc(x->data.data(), w->data.data(), out->data.data(), x->rows, x->cols, w->rows);
    for (std::size_t i = 0; i < x->rows; ++i)
        for (std::size_t j = 0; j < w->rows; ++j) out->at(i, j) += b->data[j];
    check_finite(*out, "linear");
    tape.record([x, w, b, out] {
        x->ensure_grad();
        w->ensure_grad();
        b->ensure_grad();
        // dX += G * W ; dW += G^T * X ; db += colsum(G)
        matmul_acc(out->grad.data(), w->data.data(), x->grad.data(), x->rows, w->rows, w->cols);
        matmul_at_acc(out->grad.data(), x->data.data(), w->grad.data(), x->rows, w->rows, x->cols);
        for (std::size_t i = 0; i < x->rows; ++i)
            for (std::size_t j = 0; j < w->rows; ++j) b->grad[j] += out->grad[i * w->rows + j];
    });
    return out;
}

inline void require_same_shape(const Var& a, const Var& b, const char* op) {
    if (a->rows != b->rows || a->cols != b->cols)
        throw std::invalid_argument(std::string(op) + ": shape mismatch");
}

inline Var add(Tape& tape, const Var& a, const Var& b) {
    require_same_shape(a, b, "add");
    Var out = make_var(a->rows, a->cols);
    for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] + b->data[i];
    tape.record([a, b, out] {
        a->ensure_grad();
        b->ensure_grad();
        for (std::size_t i = 0; i < out->numel(); ++i) {
            a->grad[i] += out->grad[i];
            b->grad[i] += out->grad[i];
        }
    });
    return out;
}

inline Var sub(Tape& tape, const Var& a, const Var& b) {
    require_same_shape(a, b, "sub");
    Var out = make_var(a->rows, a->cols);
    for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] - b->data[i];
    tape.record([a, b, out] {
        a->ensure_grad();
        b->ensure_grad();
        for (std::size_t i = 0; i < out->numel(); ++i) {
            a->grad[i] += out->grad[i];
            b->grad[i] -= out->grad[i];
        }
    });
    return out;
}

inline Var mul(Tape& tape, const Var& a, const Var& b) {
    require_same_shape(a, b, "mul");
    Var out = make_var(a->rows, a->cols);
    for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] * b->data[i];
    tape.record([a, b, out] {
        a->ensure_grad();
        b->ensure_grad();
        for (std::size_t i = 0; i < out->numel(); ++i) {
            a->grad[i] += out->grad[i] * b->data[i];
            b->grad[i] += out->grad[i] * a->data[i];
        }
    });
    return out;
}

inline Var scale(Tape& tape, const Var& a, double s) {
    Var out = make_var(a->rows, a->cols);
    for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] * s;
    tape.record([a, out, s] {
        a->ensure_grad();
        for (std::size_t i = 0; i < out->numel(); ++i) a->grad[i] += out->grad[i] * s;
    });
    return out;
}

inline Var tanh_op(Tape& tape, const Var& a) {
    Var out = make_var(a->rows, a->cols);
    for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = std::tanh(a->data[i]);
    check_finite(*out, "tanh");
    tape.record([a, out] {
        a->ensure_grad();
        for (std::size_t i = 0; i < out->numel(); ++i)
            a->grad[i] += out->grad[i] * (1.0 - out->data[i] * out->data[i]);
    });
    return out;
}

// Overflow-safe: max(x,0) + log1p(exp(-|x|)).
inline Var softplus_op(Tape& tape, const Var& a) {
    Var out = make_var(a->rows, a->cols);
    for (std::size_t i = 0; i < out->numel(); ++i) {
        double x = a->data[i];
        out->data[i] = std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
    }
    check_finite(*out, "softplus");
    tape.record([a, out] {
        a->ensure_grad();
        for (std::size_t i = 0; i < out->numel(); ++i) {
            double x = a->data[i];
            double sig = 1.0 / (1.0 + std::exp(-x));
            a->grad[i] += out->grad[i] * sig;
        }
    });
    return out;
}

inline Var relu(Tape& tape, const Var& a) {
    Var out = make_var(a->rows, a->cols);
    for (std::size_t i = 0; i < out->numel(); ++i) out->data[i] = a->data[i] > 0.0 ? a->data[i] : 0.0;
    tape.record([a, out] {
        a->ensure_grad();
        for (std::size_t i = 0; i < out->numel(); ++i)
            if (a->data[i] > 0.0) a->grad[i] += out->grad[i];
    });
    return out;
}

// Softmax along an axis: 1 = across each row, 0 = down each column.
// Shift-by-max for stability.
inline Var softmax(Tape& tape, const Var& a, int axis = 1) {
    if (axis != 0 && axis != 1) throw std::invalid_argument("softmax: axis must be 0 or 1");
    Var out = make_var(a->rows, a->cols);
    std::size_t groups = axis == 1 ? a->rows : a->cols;
    std::size_t len = axis == 1 ? a->cols : a->rows;
    std::size_t cols = a->cols;
    auto idx = [axis, cols](std::size_t g, std::size_t i) {
        return axis == 1 ? g * cols + i : i * cols + g;
    };
    for (std::size_t g = 0; g < groups; ++g) {
        double mx = a->data[idx(g, 0)];
        for (std::size_t i = 1; i < len; ++i) mx = std::max(mx, a->data[idx(g, i)]);
        double z = 0.0;
        for (std::size_t i = 0; i < len; ++i) {
            double e = std::exp(a->data[idx(g, i)] - mx);
            out->data[idx(g, i)] = e;
            z += e;
        }
        for (std::size_t i = 0; i < len; ++i) out->data[idx(g, i)] /= z;
    }
    check_finite(*out, "softmax");
    tape.record([a, out, groups, len, idx] {
        a->ensure_grad();
        for (std::size_t g = 0; g < groups; ++g) {
            double dot = 0.0;
            for (std::size_t i = 0; i < len; ++i)
                dot += out->grad[idx(g, i)] * out->data[idx(g, i)];
            for (std::size_t i = 0; i < len; ++i)
                a->grad[idx(g, i)] += out->data[idx(g, i)] * (out->grad[idx(g, i)] - dot);
        }
    });
    return out;
}

inline Var mse(Tape& tape, const Var& pred, const Var& target) {
    require_same_shape(pred, target, "mse");
    std::size_t n = pred->numel();
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double d = pred->data[i] - target->data[i];
        acc += d * d;
    }
    Var out = scalar_var(acc / double(n));
    check_finite(*out, "mse");
    tape.record([pred, target, out, n] {
        pred->ensure_grad();
        target->ensure_grad();
        double g = out->grad[0] * 2.0 / double(n);
        for (std::size_t i = 0; i < n; ++i) {
            double d = pred->data[i] - target->data[i];
            pred->grad[i] += g * d;
            target->grad[i] -= g * d;
        }
    });
    return out;
}

inline Var frob_norm_sq(Tape& tape, const Var& a) {
    double acc = 0.0;
    for (double v : a->data) acc += v * v;
    Var out = scalar_var(acc);
    tape.record([a, out] {
        a->ensure_grad();
        for (std::size_t i = 0; i < a->numel(); ++i) a->grad[i] += out->grad[0] * 2.0 * a->data[i];
    });
    return out;
}

inline Var sum(Tape& tape, const Var& a) {
    double acc = 0.0;
    for (double v : a->data) acc += v;
    Var out = scalar_var(acc);
    tape.record([a, out] {
        a->ensure_grad();
        for (std::size_t i = 0; i < a->numel(); ++i) a->grad[i] += out->grad[0];
    });
    return out;
}

inline Var mean(Tape& tape, const Var& a) { return scale(tape, sum(tape, a), 1.0 / double(a->numel())); }

inline Var transpose(Tape& tape, const Var& a) {
    Var out = make_var(a->cols, a->rows);
    for (std::size_t i = 0; i < a->rows; ++i)
        for (std::size_t j = 0; j < a->cols; ++j) out->at(j, i) = a->at(i, j);
    tape.record([a, out] {
        a->ensure_grad();
        for (std::size_t i = 0; i < a->rows; ++i)
            for (std::size_t j = 0; j < a->cols; ++j) a->grad[i * a->cols + j] += out->grad[j * a->rows + i];
    });
    return out;
}

// Stack two column blocks vertically: (r1,c) over (r2,c).
inline Var vconcat(Tape& tape, const Var& a, const Var& b) {
    if (a->cols != b->cols) throw std::invalid_argument("vconcat: column mismatch");
    Var out = make_var(a->rows + b->rows, a->cols);
    std::copy(a->data.begin(), a->data.end(), out->data.begin());
    std::copy(b->data.begin(), b->data.end(), out->data.begin() + a->numel());
    tape.record([a, b, out] {
        a->ensure_grad();
        b->ensure_grad();
        for (std::size_t i = 0; i < a->numel(); ++i) a->grad[i] += out->grad[i];
        for (std::size_t i = 0; i < b->numel(); ++i) b->grad[i] += out->grad[a->numel() + i];
    });
    return out;
}

inline Var hconcat(Tape& tape, const Var& a, const Var& b) {
    if (a->rows != b->rows) throw std::invalid_argument("hconcat: row mismatch");
    Var out = make_var(a->rows, a->cols + b->cols);
    for (std::size_t i = 0; i < a->rows; ++i) {
        std::copy(a->data.begin() + i * a->cols, a->data.begin() + (i + 1) * a->cols,
                  out->data.begin() + i * out->cols);
        std::copy(b->data.begin() + i * b->cols, b->data.begin() + (i + 1) * b->cols,
                  out->data.begin() + i * out->cols + a->cols);
    }
    tape.record([a, b, out] {
        a->ensure_grad();
        b->ensure_grad();
        for (std::size_t i = 0; i < a->rows; ++i) {
            for (std::size_t j = 0; j < a->cols; ++j)
                a->grad[i * a->cols + j] += out->grad[i * out->cols + j];
            for (std::size_t j = 0; j < b->cols; ++j)
                b->grad[i * b->cols + j] += out->grad[i * out->cols + a->cols + j];
        }
    });
    return out;
}

// Row lookup as a (d,1) column; used by group / treatment / categorical tables.
inline Var lookup_row(Tape& tape, const Var& table, std::size_t row) {
    if (row >= table->rows) throw std::out_of_range("lookup_row: index out of range");
    Var out = make_var(table->cols, 1);
    for (std::size_t j = 0; j < table->cols; ++j) out->data[j] = table->at(row, j);
    tape.record([table, out, row] {
        table->ensure_grad();
        for (std::size_t j = 0; j < table->cols; ++j)
            table->grad[row * table->cols + j] += out->grad[j];
    });
    return out;
}

inline Var row_abs_sum(Tape& tape, const Var& w) {
    Var out = make_var(w->rows, 1);
    for (std::size_t i = 0; i < w->rows; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < w->cols; ++j) s += std::abs(w->at(i, j));
        out->data[i] = s;
    }
    tape.record([w, out] {
        w->ensure_grad();
        for (std::size_t i = 0; i < w->rows; ++i) {
            double g = out->grad[i];
            for (std::size_t j = 0; j < w->cols; ++j) {
                double v = w->at(i, j);
                w->grad[i * w->cols + j] += g * (v > 0.0 ? 1.0 : v < 0.0 ? -1.0 : 0.0);
            }
        }
    });
    return out;
}

// out_i = s / v_i with scalar s and vector v.
inline Var scalar_div_vec(Tape& tape, const Var& s, const Var& v) {
    if (s->numel() != 1) throw std::invalid_argument("scalar_div_vec: s must be scalar");
    Var out = make_var(v->rows, v->cols);
    for (std::size_t i = 0; i < v->numel(); ++i) out->data[i] = s->data[0] / v->data[i];
    check_finite(*out, "scalar_div_vec");
    tape.record([s, v, out] {
        s->ensure_grad();
        v->ensure_grad();
        for (std::size_t i = 0; i < v->numel(); ++i) {
            s->grad[0] += out->grad[i] / v->data[i];
            v->grad[i] -= out->grad[i] * s->data[0] / (v->data[i] * v->data[i]);
        }
    });
    return out;
}

inline Var min_const(Tape& tape, const Var& a, double cap) {
    Var out = make_var(a->rows, a->cols);
    for (std::size_t i = 0; i < a->numel(); ++i) out->data[i] = std::min(a->data[i], cap);
    tape.record([a, out, cap] {
        a->ensure_grad();
        for (std::size_t i = 0; i < a->numel(); ++i)
            if (a->data[i] < cap) a->grad[i] += out->grad[i];
    });
    return out;
}

// Scale row i of W by s_i.
inline Var scale_rows(Tape& tape, const Var& w, const Var& s) {
    if (s->rows != w->rows || s->cols != 1) throw std::invalid_argument("scale_rows: shape mismatch");
    Var out = make_var(w->rows, w->cols);
    for (std::size_t i = 0; i < w->rows; ++i)
        for (std::size_t j = 0; j < w->cols; ++j) out->at(i, j) = w->at(i, j) * s->data[i];
    tape.record([w, s, out] {
        w->ensure_grad();
        s->ensure_grad();
        for (std::size_t i = 0; i < w->rows; ++i) {
            double acc = 0.0;
            for (std::size_t j = 0; j < w->cols; ++j) {
                std::size_t k = i * w->cols + j;
                w->grad[k] += out->grad[k] * s->data[i];
                acc += out->grad[k] * w->data[k];
            }
            s->grad[i] += acc;
        }
    });
    return out;
}

// Single element as a scalar node.
inline Var select_elem(Tape& tape, const Var& a, std::size_t idx) {
    if (idx >= a->numel()) throw std::out_of_range("select_elem: index out of range");
    Var out = scalar_var(a->data[idx]);
    tape.record([a, out, idx] {
        a->ensure_grad();
        a->grad[idx] += out->grad[0];
    });
    return out;
}

// Tensor times scalar node.
inline Var mul_scalar(Tape& tape, const Var& a, const Var& s) {
    if (s->numel() != 1) throw std::invalid_argument("mul_scalar: s must be scalar");
    Var out = make_var(a->rows, a->cols);
    for (std::size_t i = 0; i < a->numel(); ++i) out->data[i] = a->data[i] * s->data[0];
    tape.record([a, s, out] {
        a->ensure_grad();
        s->ensure_grad();
        for (std::size_t i = 0; i < a->numel(); ++i) {
            a->grad[i] += out->grad[i] * s->data[0];
            s->grad[0] += out->grad[i] * a->data[i];
        }
    });
    return out;
}

// Column-wise mean pooled to a (rows,1) vector.
inline Var mean_cols(Tape& tape, const Var& a) {
    Var out = make_var(a->rows, 1);
    for (std::size_t i = 0; i < a->rows; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < a->cols; ++j) s += a->at(i, j);
        out->data[i] = s / double(a->cols);
    }
    tape.record([a, out] {
        a->ensure_grad();
        for (std::size_t i = 0; i < a->rows; ++i) {
            double g = out->grad[i] / double(a->cols);
            for (std::size_t j = 0; j < a->cols; ++j) a->grad[i * a->cols + j] += g;
        }
    });
    return out;
}

// Weighted sum of scalar terms with constant weights; collapses a batch of
// per-sample losses into one node.
inline Var affine_combine(Tape& tape, const std::vector<Var>& terms,
                          const std::vector<double>& weights) {
    if (terms.size() != weights.size()) throw std::invalid_argument("affine_combine: size mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < terms.size(); ++i) {
        if (terms[i]->numel() != 1) throw std::invalid_argument("affine_combine: non-scalar term");
        acc += weights[i] * terms[i]->data[0];
    }
    Var out = scalar_var(acc);
    check_finite(*out, "affine_combine");
    tape.record([terms, weights, out] {
        for (std::size_t i = 0; i < terms.size(); ++i) {
            terms[i]->ensure_grad();
            terms[i]->grad[0] += out->grad[0] * weights[i];
        }
    });
    return out;
}

// Stack single-row tensors into one (n, cols) matrix with one tape node.
inline Var stack_rows(Tape& tape, const std::vector<Var>& rows) {
    if (rows.empty()) throw std::invalid_argument("stack_rows: empty input");
    std::size_t cols = rows[0]->numel();
    Var out = make_var(rows.size(), cols);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        if (rows[i]->numel() != cols) throw std::invalid_argument("stack_rows: ragged input");
        std::copy(rows[i]->data.begin(), rows[i]->data.end(), out->data.begin() + i * cols);
    }
    tape.record([rows, out, cols] {
        for (std::size_t i = 0; i < rows.size(); ++i) {
            rows[i]->ensure_grad();
            for (std::size_t j = 0; j < cols; ++j) rows[i]->grad[j] += out->grad[i * cols + j];
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Adam

struct AdamState {
    double lr = 1e-3, beta1 = 0.9, beta2 = 0.999, eps = 1e-8;
    std::size_t step = 0;
    std::vector<std::vector<double>> m, v;
};

inline void adam_step(std::vector<Var>& params, AdamState& st) {
    if (st.m.empty()) {
        st.m.resize(params.size());
        st.v.resize(params.size());
        for (std::size_t i = 0; i < params.size(); ++i) {
            st.m[i].assign(params[i]->numel(), 0.0);
            st.v[i].assign(params[i]->numel(), 0.0);
        }
    }
    ++st.step;
    double bc1 = 1.0 - std::pow(st.beta1, double(st.step));
    double bc2 = 1.0 - std::pow(st.beta2, double(st.step));
    for (std::size_t i = 0; i < params.size(); ++i) {
        Tensor& p = *params[i];
        p.ensure_grad();
        for (std::size_t j = 0; j < p.numel(); ++j) {
            double g = p.grad[j];
            st.m[i][j] = st.beta1 * st.m[i][j] + (1.0 - st.beta1) * g;
            st.v[i][j] = st.beta2 * st.v[i][j] + (1.0 - st.beta2) * g * g;
            double mhat = st.m[i][j] / bc1;
            double vhat = st.v[i][j] / bc2;
            p.data[j] -= st.lr * mhat / (std::sqrt(vhat) + st.eps);
        }
    }
}

inline void zero_grads(std::vector<Var>& params) {
    for (auto& p : params) p->zero_grad();
}

// ---------------------------------------------------------------------------
// gradient verification

// Max over all parameter entries of the symmetric relative error between
// analytic and central-difference gradients. fn must rebuild the graph from
// the current parameter values and return the scalar output.
inline double grad_check(const std::function<Var(Tape&)>& fn, std::vector<Var> params,
                         double h = 1e-5) {
    Tape tape;
    Var loss = fn(tape);
    if (loss->numel() != 1) throw std::invalid_argument("grad_check: fn must produce a scalar");
    zero_grads(params);
    tape.backward(loss);
    std::vector<std::vector<double>> analytic;
    for (auto& p : params) {
        p->ensure_grad();
        analytic.push_back(p->grad);
    }
    double worst = 0.0;
    for (std::size_t i = 0; i < params.size(); ++i) {
        for (std::size_t j = 0; j < params[i]->numel(); ++j) {
            double orig = params[i]->data[j];
            params[i]->data[j] = orig + h;
            Tape tp;
            double fp = fn(tp)->data[0];
            params[i]->data[j] = orig - h;
            Tape tm;
            double fm = fn(tm)->data[0];
            params[i]->data[j] = orig;
            double numeric = (fp - fm) / (2.0 * h);
            double a = analytic[i][j];
            double err = std::abs(a - numeric) / std::max(1e-8, std::abs(a) + std::abs(numeric));
            worst = std::max(worst, err);
        }
    }
    return worst;
}

// Text edge-list style dump of a tensor for debugging.
inline std::string debug_str(const Var& t) {
    std::string s = "[" + std::to_string(t->rows) + "x" + std::to_string(t->cols) + "]";
    for (std::size_t i = 0; i < std::min<std::size_t>(t->numel(), 8); ++i)
        s += (i ? "," : " ") + std::to_string(t->data[i]);
    return s;
}

}  // namespace uplift
