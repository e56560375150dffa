#pragma once

// Per-feature embedding layers: numeric features map to x*w + b (one
// learned vector pair per feature), categorical features map to lookup
// rows. Context embeddings concatenate per-feature blocks in feature
// order; user features embed as a d x p token matrix.

#include <cstdint>
#include <stdexcept>
#include <vector>

#include "rng.hpp"
#include "tensor.hpp"

namespace uplift {

struct FeatureSpec {
    enum class Kind { Numeric, Categorical };
    Kind kind = Kind::Numeric;
    int cardinality = 0;  // categorical only
};

inline void init_uniform(const Var& t, Rng& rng, double scale) {
    for (auto& v : t->data) v = rng.uniform(-scale, scale);
}

// Concatenated categorical + numerical embeddings for a context feature
// vector; output length q*d in feature order.
class ContextEmbedder {
public:
    ContextEmbedder() = default;

    ContextEmbedder(std::vector<FeatureSpec> specs, int d, Rng rng) : specs_(std::move(specs)), d_(d) {
        int n_numeric = 0;
        slot_.resize(specs_.size());
        for (std::size_t j = 0; j < specs_.size(); ++j) {
            if (specs_[j].kind == FeatureSpec::Kind::Numeric) {
                slot_[j] = n_numeric++;
            } else {
                slot_[j] = int(tables_.size());
                tables_.push_back(make_var(specs_[j].cardinality, d_, true));
            }
        }
        num_w_ = make_var(std::size_t(n_numeric), d_, true);
        num_b_ = make_var(std::size_t(n_numeric), d_, true);
        double s = 1.0 / std::sqrt(double(d_));
        Rng r = rng.derive("ctx-embed");
        init_uniform(num_w_, r, s);
        init_uniform(num_b_, r, s);
        for (auto& t : tables_) init_uniform(t, r, s);
    }

    int d() const { return d_; }
    std::size_t n_features() const { return specs_.size(); }
    std::size_t out_dim() const { return specs_.size() * std::size_t(d_); }

    // Batched embedding: rows[b] points at a q-length feature vector.
    // One tape node covers the whole batch.
    Var embed_batch(Tape& tape, const std::vector<const double*>& rows) const {
        std::size_t b = rows.size(), q = specs_.size(), d = std::size_t(d_);
        Var out = make_var(b, q * d);
        std::vector<int> cat_idx(b * tables_.size());
        for (std::size_t i = 0; i < b; ++i) {
            for (std::size_t j = 0; j < q; ++j) {
                double* dst = out->data.data() + i * q * d + j * d;
                if (specs_[j].kind == FeatureSpec::Kind::Numeric) {
                    const double* w = num_w_->data.data() + slot_[j] * d;
                    const double* bi = num_b_->data.data() + slot_[j] * d;
                    double x = rows[i][j];
                    for (std::size_t k = 0; k < d; ++k) dst[k] = x * w[k] + bi[k];
                } else {
                    int v = int(rows[i][j]);
                    if (v < 0 || v >= specs_[j].cardinality)
                        throw std::out_of_range("ContextEmbedder: category index out of range");
                    cat_idx[i * tables_.size() + slot_[j]] = v;
                    const double* row = tables_[slot_[j]]->data.data() + std::size_t(v) * d;
                    for (std::size_t k = 0; k < d; ++k) dst[k] = row[k];
                }
            }
        }
        check_finite(*out, "embed_context");
        Var nw = num_w_, nb = num_b_;
        auto tables = tables_;
        auto specs = specs_;
        auto slot = slot_;
        tape.record([out, rows, nw, nb, tables, specs, slot, cat_idx, b, q, d] {
            nw->ensure_grad();
            nb->ensure_grad();
            for (auto& t : tables) t->ensure_grad();
            for (std::size_t i = 0; i < b; ++i) {
                for (std::size_t j = 0; j < q; ++j) {
                    const double* g = out->grad.data() + i * q * d + j * d;
                    if (specs[j].kind == FeatureSpec::Kind::Numeric) {
                        double x = rows[i][j];
                        double* gw = nw->grad.data() + slot[j] * d;
                        double* gb = nb->grad.data() + slot[j] * d;
                        for (std::size_t k = 0; k < d; ++k) {
                            gw[k] += x * g[k];
                            gb[k] += g[k];
                        }
                    } else {
                        int v = cat_idx[i * tables.size() + slot[j]];
                        double* gt = tables[slot[j]]->grad.data() + std::size_t(v) * d;
                        for (std::size_t k = 0; k < d; ++k) gt[k] += g[k];
                    }
                }
            }
        });
        return out;
    }

    Var embed_one(Tape& tape, const double* x) const {
        return embed_batch(tape, std::vector<const double*>{x});
    }

    // Token layout: d x q matrix, one column per context feature. Used when
    // raw contexts (no grouping) feed the attention stage.
    Var embed_tokens(Tape& tape, const double* x) const {
        std::size_t q = specs_.size(), d = std::size_t(d_);
        Var out = make_var(d, q);
        std::vector<int> cat_idx(tables_.size(), 0);
        for (std::size_t j = 0; j < q; ++j) {
            if (specs_[j].kind == FeatureSpec::Kind::Numeric) {
                const double* w = num_w_->data.data() + slot_[j] * d;
                const double* bi = num_b_->data.data() + slot_[j] * d;
                for (std::size_t k = 0; k < d; ++k) out->at(k, j) = x[j] * w[k] + bi[k];
            } else {
                int v = int(x[j]);
                if (v < 0 || v >= specs_[j].cardinality)
                    throw std::out_of_range("ContextEmbedder: category index out of range");
                cat_idx[std::size_t(slot_[j])] = v;
                const double* row = tables_[slot_[j]]->data.data() + std::size_t(v) * d;
                for (std::size_t k = 0; k < d; ++k) out->at(k, j) = row[k];
            }
        }
        check_finite(*out, "embed_context_tokens");
        Var nw = num_w_, nb = num_b_;
        auto tables = tables_;
        auto specs = specs_;
        auto slot = slot_;
        tape.record([out, x, nw, nb, tables, specs, slot, cat_idx, q, d] {
            nw->ensure_grad();
            nb->ensure_grad();
            for (auto& t : tables) t->ensure_grad();
            for (std::size_t j = 0; j < q; ++j) {
                if (specs[j].kind == FeatureSpec::Kind::Numeric) {
                    double* gw = nw->grad.data() + slot[j] * d;
                    double* gb = nb->grad.data() + slot[j] * d;
                    for (std::size_t k = 0; k < d; ++k) {
                        double g = out->grad[k * q + j];
                        gw[k] += x[j] * g;
                        gb[k] += g;
                    }
                } else {
                    int v = cat_idx[std::size_t(slot[j])];
                    double* gt = tables[slot[j]]->grad.data() + std::size_t(v) * d;
                    for (std::size_t k = 0; k < d; ++k) gt[k] += out->grad[k * q + j];
                }
            }
        });
        return out;
    }

    // Inference-only embedding, no tape.
    void embed_values(const double* x, double* dst) const {
        std::size_t d = std::size_t(d_);
        for (std::size_t j = 0; j < specs_.size(); ++j) {
            double* o = dst + j * d;
            if (specs_[j].kind == FeatureSpec::Kind::Numeric) {
                const double* w = num_w_->data.data() + slot_[j] * d;
                const double* bi = num_b_->data.data() + slot_[j] * d;
                for (std::size_t k = 0; k < d; ++k) o[k] = x[j] * w[k] + bi[k];
            } else {
                int v = int(x[j]);
                if (v < 0 || v >= specs_[j].cardinality)
                    throw std::out_of_range("ContextEmbedder: category index out of range");
                const double* row = tables_[slot_[j]]->data.data() + std::size_t(v) * d;
                for (std::size_t k = 0; k < d; ++k) o[k] = row[k];
            }
        }
    }

    std::vector<Var> params() const {
        std::vector<Var> p{num_w_, num_b_};
        p.insert(p.end(), tables_.begin(), tables_.end());
        return p;
    }

    const std::vector<FeatureSpec>& specs() const { return specs_; }

private:
    std::vector<FeatureSpec> specs_;
    int d_ = 0;
    std::vector<int> slot_;
    Var num_w_, num_b_;       // (n_numeric, d)
    std::vector<Var> tables_;  // per categorical feature
};

// One token per user feature: output is a d x p matrix whose column j is
// x_j * w_j + b_j.
class UserTokenEmbedder {
public:
    UserTokenEmbedder() = default;

    UserTokenEmbedder(std::size_t p, int d, Rng rng) : p_(p), d_(d) {
        w_ = make_var(p, std::size_t(d), true);
        b_ = make_var(p, std::size_t(d), true);
        double s = 1.0 / std::sqrt(double(d));
        Rng r = rng.derive("user-embed");
        init_uniform(w_, r, s);
        init_uniform(b_, r, s);
    }

    std::size_t n_tokens() const { return p_; }
    int d() const { return d_; }

    Var embed_tokens(Tape& tape, const double* x) const {
        std::size_t d = std::size_t(d_);
        Var out = make_var(d, p_);
        for (std::size_t j = 0; j < p_; ++j)
            for (std::size_t k = 0; k < d; ++k)
                out->at(k, j) = x[j] * w_->at(j, k) + b_->at(j, k);
        check_finite(*out, "embed_user_tokens");
        Var w = w_, b = b_;
        std::size_t p = p_;
        tape.record([out, x, w, b, p, d] {
            w->ensure_grad();
            b->ensure_grad();
            for (std::size_t j = 0; j < p; ++j)
                for (std::size_t k = 0; k < d; ++k) {
                    double g = out->grad[k * p + j];
                    w->grad[j * d + k] += x[j] * g;
                    b->grad[j * d + k] += g;
                }
        });
        return out;
    }

    std::vector<Var> params() const { return {w_, b_}; }

private:
    std::size_t p_ = 0;
    int d_ = 0;
    Var w_, b_;  // (p, d)
};

// K x d lookup; one token per context group.
class GroupEmbedder {
public:
    GroupEmbedder() = default;

    GroupEmbedder(int k, int d, Rng rng) {
        table_ = make_var(std::size_t(k), std::size_t(d), true);
        Rng r = rng.derive("group-embed");
        init_uniform(table_, r, 1.0 / std::sqrt(double(d)));
    }

    Var embed(Tape& tape, int g) const { return lookup_row(tape, table_, std::size_t(g)); }
    std::vector<Var> params() const { return {table_}; }
    const Var& table() const { return table_; }

private:
    Var table_;
};

// e_t^0 and e_t^1 as the two rows of a 2 x d_t table.
class TreatmentEmbedding {
public:
    TreatmentEmbedding() = default;

    TreatmentEmbedding(int d_t, Rng rng) {
        table_ = make_var(2, std::size_t(d_t), true);
        Rng r = rng.derive("treat-embed");
        init_uniform(table_, r, 1.0 / std::sqrt(double(d_t)));
    }

    Var embed(Tape& tape, int t) const { return lookup_row(tape, table_, std::size_t(t)); }
    std::vector<Var> params() const { return {table_}; }
    const Var& table() const { return table_; }

private:
    Var table_;
};

}  // namespace uplift
