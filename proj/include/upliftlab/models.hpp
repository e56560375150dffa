#pragma once

// Uplift models: the co-attention / cross-attention network with pluggable
// base heads, plus standalone baselines (S-Learner, T-Learner, TARNet,
// CFRNet with an MMD balancing penalty).

#include <algorithm>
#include <array>
#include <cmath>
#include <cstdint>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "upliftlab/datagen.hpp"
#include "upliftlab/features.hpp"
#include "upliftlab/grouping.hpp"
#include "upliftlab/metrics.hpp"
#include "upliftlab/rng.hpp"
#include "upliftlab/tensor.hpp"

namespace uplift {

// ---------------------------------------------------------------------------
// Small dense nets

struct Mlp {
    std::vector<Var> ws, bs;  // ws[i] is (out, in)
    bool relu_last = false;

    Mlp() = default;
    Mlp(const std::vector<std::size_t>& dims, Rng rng, bool relu_last_ = false)
        : relu_last(relu_last_) {
        for (std::size_t i = 0; i + 1 < dims.size(); ++i) {
            double s = 1.0 / std::sqrt(double(dims[i]));
            Var w = make_var(dims[i + 1], dims[i], true);
            Var b = make_var(dims[i + 1], 1, true);
            for (double& v : w->data) v = rng.uniform(-s, s);
            for (double& v : b->data) v = rng.uniform(-s, s);
            ws.push_back(w);
            bs.push_back(b);
        }
    }

    // x is (batch, in); returns (batch, out).
    Var forward(Tape& tape, Var x) const {
        for (std::size_t i = 0; i < ws.size(); ++i) {
            x = linear(tape, x, ws[i], bs[i]);
            if (i + 1 < ws.size() || relu_last) x = relu(tape, x);
        }
        return x;
    }

    std::vector<Var> params() const {
        std::vector<Var> out;
        for (std::size_t i = 0; i < ws.size(); ++i) {
            out.push_back(ws[i]);
            out.push_back(bs[i]);
        }
        return out;
    }
};

// ---------------------------------------------------------------------------
// Linear-time unbiased MMD between treated and control representation rows,
// RBF kernel with a median-of-squared-distances bandwidth. Disjoint paired
// differences keep the estimate O(n) and unbiased; identical treated and
// control sets give exactly zero.

// fixed_h > 0 bypasses the median heuristic; the heuristic's bandwidth is
// treated as a constant during backprop, so a fixed bandwidth is what makes
// the gradient exactly finite-difference checkable.
inline Var mmd_linear(Tape& tape, const Var& rep, const std::vector<std::int8_t>& t,
                      double fixed_h = 0.0) {
    if (t.size() != rep->rows) throw std::invalid_argument("mmd_linear: treatment size mismatch");
    std::vector<std::size_t> ti, ci;
    for (std::size_t i = 0; i < t.size(); ++i) (t[i] ? ti : ci).push_back(i);
    std::size_t m = std::min(ti.size(), ci.size());
    std::size_t pairs = m / 2;
    if (pairs == 0) return scalar_var(0.0);
    std::size_t d = rep->cols;

    auto sqdist = [&](std::size_t a, std::size_t b) {
        double s = 0.0;
        for (std::size_t j = 0; j < d; ++j) {
            double diff = rep->at(a, j) - rep->at(b, j);
            s += diff * diff;
        }
        return s;
    };

    // Median heuristic over the distances this estimator actually uses.
    std::vector<double> dists;
    dists.reserve(pairs * 4);
    std::vector<std::array<std::size_t, 2>> terms;  // (a, b) per kernel term
    std::vector<double> signs;
    for (std::size_t k = 0; k < pairs; ++k) {
        std::size_t x1 = ti[2 * k], x2 = ti[2 * k + 1], y1 = ci[2 * k], y2 = ci[2 * k + 1];
        terms.push_back({x1, x2});
        signs.push_back(1.0);
        terms.push_back({y1, y2});
        signs.push_back(1.0);
        terms.push_back({x1, y2});
        signs.push_back(-1.0);
        terms.push_back({x2, y1});
        signs.push_back(-1.0);
    }
    for (const auto& p : terms) dists.push_back(sqdist(p[0], p[1]));
    double h = fixed_h;
    if (!(h > 0.0)) {
        std::vector<double> sorted(dists);
        std::nth_element(sorted.begin(), sorted.begin() + sorted.size() / 2, sorted.end());
        h = sorted[sorted.size() / 2];
        if (!(h > 0.0)) h = 1.0;
    }

    double acc = 0.0;
    std::vector<double> kvals(terms.size());
    for (std::size_t i = 0; i < terms.size(); ++i) {
        kvals[i] = std::exp(-dists[i] / h);
        acc += signs[i] * kvals[i];
    }
    Var out = scalar_var(acc / double(pairs));
    double inv = 1.0 / double(pairs);
    tape.record([rep, out, terms, signs, kvals, h, d, inv] {
        rep->ensure_grad();
        double go = out->grad[0] * inv;
        for (std::size_t i = 0; i < terms.size(); ++i) {
            std::size_t a = terms[i][0], b = terms[i][1];
            double c = go * signs[i] * kvals[i] * 2.0 / h;
            for (std::size_t j = 0; j < d; ++j) {
                double diff = rep->at(a, j) - rep->at(b, j);
                rep->grad[a * d + j] -= c * diff;
                rep->grad[b * d + j] += c * diff;
            }
        }
    });
    return out;
}

// Mean squared error against the factual arm only: per row pick p1 when
// treated, p0 otherwise.
inline Var masked_mse(Tape& tape, const Var& p0, const Var& p1, const std::vector<std::int8_t>& t,
                      const std::vector<double>& y) {
    std::size_t n = t.size();
    if (p0->numel() != n || p1->numel() != n || y.size() != n)
        throw std::invalid_argument("masked_mse: size mismatch");
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        double r = (t[i] ? p1->data[i] : p0->data[i]) - y[i];
        acc += r * r;
    }
    Var out = scalar_var(acc / double(n));
    tape.record([p0, p1, out, t, y, n] {
        p0->ensure_grad();
        p1->ensure_grad();
        double go = out->grad[0] * 2.0 / double(n);
        for (std::size_t i = 0; i < n; ++i) {
            if (t[i])
                p1->grad[i] += go * (p1->data[i] - y[i]);
            else
                p0->grad[i] += go * (p0->data[i] - y[i]);
        }
    });
    return out;
}

// ---------------------------------------------------------------------------
// Attention blocks. Token matrices are laid out (dim, n_tokens).

struct CoAttention {
    Var w_l;            // (d, d)
    Var w_u, w_c;       // (h, d)
    Var w_hu, w_hc;     // (h, 1)

    CoAttention() = default;
    CoAttention(int d, int h, Rng rng) {
        auto mk = [&](std::size_t r, std::size_t c) {
            double s = 1.0 / std::sqrt(double(c));
            Var v = make_var(r, c, true);
            for (double& x : v->data) x = rng.uniform(-s, s);
            return v;
        };
        w_l = mk(std::size_t(d), std::size_t(d));
        w_u = mk(std::size_t(h), std::size_t(d));
        w_c = mk(std::size_t(h), std::size_t(d));
        w_hu = mk(std::size_t(h), 1);
        w_hc = mk(std::size_t(h), 1);
    }

    struct Out {
        Var eu_hat, ec_hat;  // (d, 1) attended summaries
        Var a_u, a_c;        // (1, n) attention rows
    };

    Out forward(Tape& tape, const Var& e_u, const Var& e_c) const {
        Var affinity = tanh_op(tape, matmul(tape, matmul(tape, transpose(tape, e_u), w_l), e_c));
        Var pu = matmul(tape, w_u, e_u);  // (h, n_u)
        Var pc = matmul(tape, w_c, e_c);  // (h, n_c)
        Var hu = tanh_op(tape, add(tape, pu, matmul(tape, pc, transpose(tape, affinity))));
        Var hc = tanh_op(tape, add(tape, pc, matmul(tape, pu, affinity)));
        Out out;
        out.a_u = softmax(tape, matmul(tape, transpose(tape, w_hu), hu), 1);
        out.a_c = softmax(tape, matmul(tape, transpose(tape, w_hc), hc), 1);
        out.eu_hat = matmul(tape, e_u, transpose(tape, out.a_u));
        out.ec_hat = matmul(tape, e_c, transpose(tape, out.a_c));
        return out;
    }

    std::vector<Var> params() const { return {w_l, w_u, w_c, w_hu, w_hc}; }
};

struct CrossAttention {
    Var w_q;  // (k_d, d_t), query projection of the treatment token
    Var w_k;  // (k_d, d), shared key projection of the feature tokens
    int k_d = 0;

    CrossAttention() = default;
    CrossAttention(int d, int d_t, int kd, Rng rng) : k_d(kd) {
        auto mk = [&](std::size_t r, std::size_t c) {
            double s = 1.0 / std::sqrt(double(c));
            Var v = make_var(r, c, true);
            for (double& x : v->data) x = rng.uniform(-s, s);
            return v;
        };
        w_q = mk(std::size_t(kd), std::size_t(d_t));
        w_k = mk(std::size_t(kd), std::size_t(d));
    }

    // Treatment-conditioned attention over the two feature tokens; returns a
    // (1, 2) probability row.
    Var attend(Tape& tape, const Var& e_t, const Var& eu_hat, const Var& ec_hat) const {
        Var q = matmul(tape, w_q, e_t);  // (k_d, 1)
        Var keys = matmul(tape, w_k, hconcat(tape, eu_hat, ec_hat));  // (k_d, 2)
        Var scores = scale(tape, matmul(tape, transpose(tape, q), keys), 1.0 / std::sqrt(double(k_d)));
        return softmax(tape, scores, 1);
    }

    std::vector<Var> params() const { return {w_q, w_k}; }
};

// Treatment-feature interaction: token summaries rescaled by how much the
// treatment shifts attention onto them.
inline Var information_gain(Tape& tape, const Var& a_t1, const Var& a_t0, const Var& eu_hat,
                            const Var& ec_hat) {
    Var du = sub(tape, select_elem(tape, a_t1, 0), select_elem(tape, a_t0, 0));
    Var dc = sub(tape, select_elem(tape, a_t1, 1), select_elem(tape, a_t0, 1));
    return vconcat(tape, mul_scalar(tape, eu_hat, du), mul_scalar(tape, ec_hat, dc));
}

// ---------------------------------------------------------------------------
// Uplift model

enum class BaseKind { Mlp, Tarnet, CfrnetMmd };

inline const char* base_kind_name(BaseKind k) {
    switch (k) {
        case BaseKind::Mlp: return "mlp";
        case BaseKind::Tarnet: return "tarnet";
        default: return "cfrnet-mmd";
    }
}

inline BaseKind base_kind_from_name(const std::string& s) {
    if (s == "mlp") return BaseKind::Mlp;
    if (s == "tarnet") return BaseKind::Tarnet;
    if (s == "cfrnet-mmd") return BaseKind::CfrnetMmd;
    throw std::invalid_argument("unknown base head: " + s);
}

struct UpliftConfig {
    int d = 4;        // feature token width
    int d_t = 4;      // treatment token width
    int h = 8;        // co-attention hidden width
    int k_d = 8;      // cross-attention key width
    std::size_t hidden = 32;
    double beta = 0.5;
    double gamma = 1e-3;
    double lr = 1e-3;
    double mmd_lambda = 1.0;
    std::size_t batch_size = 256;
    int max_epochs = 50;
    int patience = 5;
    BaseKind base = BaseKind::CfrnetMmd;
    bool use_grouping = true;  // context token from learned group vs raw feature tokens
    bool use_coattention = true;
    bool use_tfi = true;  // treatment-feature interaction branch
    bool tied_tau_heads = false;
    std::size_t max_train_records = 0;  // 0 = no cap
};

// One training record: user tokens plus either a group id or a raw context
// feature row. Pointers reference dataset storage and must outlive training.
struct UpliftSample {
    std::int32_t user = 0;
    const double* xu = nullptr;
    int g = -1;
    const double* xc = nullptr;
    std::int8_t t = 0, split = kTrain;
    double y = 0.0, y0 = 0.0, y1 = 0.0;
};

inline std::vector<UpliftSample> build_grouped_samples(const Dataset& ds,
                                                       const GroupedDataset& gds) {
    std::vector<UpliftSample> out;
    out.reserve(gds.recs.size());
    for (const GroupedRec& r : gds.recs) {
        UpliftSample s;
        s.user = r.user;
        s.xu = ds.user_row(std::size_t(r.user));
        s.g = r.g;
        s.t = r.t;
        s.split = r.split;
        s.y = r.y_bar;
        s.y0 = r.y0_bar;
        s.y1 = r.y1_bar;
        out.push_back(s);
    }
    return out;
}

inline std::vector<UpliftSample> build_raw_samples(const Dataset& ds) {
    std::vector<UpliftSample> out;
    out.reserve(ds.recs.size());
    for (const SampleRec& r : ds.recs) {
        UpliftSample s;
        s.user = r.user;
        s.xu = ds.user_row(std::size_t(r.user));
        s.xc = ds.ctx_row(std::size_t(r.ctx));
        s.t = ds.user_t[std::size_t(r.user)];
        s.split = ds.rec_split(r);
        s.y = r.y;
        s.y0 = r.y0;
        s.y1 = r.y1;
        out.push_back(s);
    }
    return out;
}

struct UpliftModel {
    UpliftConfig cfg;
    UserTokenEmbedder user_embed;
    GroupEmbedder group_embed;    // grouped mode
    ContextEmbedder ctx_embed;    // raw-context mode
    TreatmentEmbedding treat;
    CoAttention coatt;
    CrossAttention crossatt;

    // Base heads. Mlp base: three independent nets over the fused token
    // vector. Tarnet/Cfrnet base: shared trunk, linear outcome heads.
    Mlp mu0_net, tau_net, tau2_net;
    Mlp trunk;
    Var h_mu0_w, h_mu0_b, h_tau_w, h_tau_b, h_tau2_w, h_tau2_b;

    // Train-split response standardization. The heads predict in standardized
    // units; prediction unscales, so Adam's bounded step size is unaffected
    // by the raw response magnitude. Stored as a tensor so checkpoints carry
    // it: data = {mean, sd}.
    Var y_stats;

    double y_mean() const { return y_stats ? y_stats->data[0] : 0.0; }
    double y_sd() const { return y_stats ? y_stats->data[1] : 1.0; }

    std::vector<std::pair<std::string, Var>> named_params() const {
        std::vector<std::pair<std::string, Var>> out;
        auto push = [&](const std::string& prefix, const std::vector<Var>& vs) {
            for (std::size_t i = 0; i < vs.size(); ++i)
                out.emplace_back(prefix + "." + std::to_string(i), vs[i]);
        };
        push("user_embed", user_embed.params());
        if (cfg.use_grouping)
            push("group_embed", group_embed.params());
        else
            push("ctx_embed", ctx_embed.params());
        push("treat_embed", treat.params());
        if (cfg.use_coattention) push("coatt", coatt.params());
        if (cfg.use_tfi) push("crossatt", crossatt.params());
        if (cfg.base == BaseKind::Mlp) {
            push("mu0", mu0_net.params());
            push("tau", tau_net.params());
            if (cfg.use_tfi && !cfg.tied_tau_heads) push("tau2", tau2_net.params());
        } else {
            push("trunk", trunk.params());
            out.emplace_back("head_mu0.w", h_mu0_w);
            out.emplace_back("head_mu0.b", h_mu0_b);
            out.emplace_back("head_tau.w", h_tau_w);
            out.emplace_back("head_tau.b", h_tau_b);
            if (cfg.use_tfi && !cfg.tied_tau_heads) {
                out.emplace_back("head_tau2.w", h_tau2_w);
                out.emplace_back("head_tau2.b", h_tau2_b);
            }
        }
        if (y_stats) out.emplace_back("y_stats", y_stats);
        return out;
    }

    // trainable parameters only; y_stats is fitted, not optimized
    std::vector<Var> params() const {
        std::vector<Var> out;
        for (auto& [name, v] : named_params())
            if (v->requires_grad) out.push_back(v);
        return out;
    }
};

// gen_cfg supplies the raw context feature layout; it may be null in the
// grouped mode, which only needs the user feature width and group count.
inline UpliftModel make_uplift_model(const UpliftConfig& cfg, std::size_t n_user_features,
                                     const GenConfig* gen_cfg, int k_groups, Rng rng) {
    UpliftModel m;
    m.cfg = cfg;
    m.user_embed = UserTokenEmbedder(n_user_features, cfg.d, rng.derive("user"));
    if (cfg.use_grouping) {
        m.group_embed = GroupEmbedder(k_groups, cfg.d, rng.derive("group"));
    } else {
        if (!gen_cfg)
            throw std::invalid_argument("make_uplift_model: raw mode needs the data schema");
        m.ctx_embed = ContextEmbedder(context_feature_specs(*gen_cfg), cfg.d, rng.derive("ctx"));
    }
    m.treat = TreatmentEmbedding(cfg.d_t, rng.derive("treat"));
    if (cfg.use_coattention) m.coatt = CoAttention(cfg.d, cfg.h, rng.derive("coatt"));
    if (cfg.use_tfi) m.crossatt = CrossAttention(cfg.d, cfg.d_t, cfg.k_d, rng.derive("crossatt"));

    std::size_t in = 2 * std::size_t(cfg.d);
    Rng hr = rng.derive("heads");
    if (cfg.base == BaseKind::Mlp) {
        m.mu0_net = Mlp({in, cfg.hidden, 1}, hr.derive("mu0"));
        m.tau_net = Mlp({in, cfg.hidden, 1}, hr.derive("tau"));
        m.tau2_net = cfg.tied_tau_heads ? m.tau_net : Mlp({in, cfg.hidden, 1}, hr.derive("tau2"));
    } else {
        m.trunk = Mlp({in, cfg.hidden}, hr.derive("trunk"), true);
        auto mk_head = [&](Rng r, Var& w, Var& b) {
            double s = 1.0 / std::sqrt(double(cfg.hidden));
            w = make_var(1, cfg.hidden, true);
            b = make_var(1, 1, true);
            for (double& v : w->data) v = r.uniform(-s, s);
            b->data[0] = r.uniform(-s, s);
        };
        mk_head(hr.derive("mu0"), m.h_mu0_w, m.h_mu0_b);
        mk_head(hr.derive("tau"), m.h_tau_w, m.h_tau_b);
        if (cfg.tied_tau_heads) {
            m.h_tau2_w = m.h_tau_w;
            m.h_tau2_b = m.h_tau_b;
        } else {
            mk_head(hr.derive("tau2"), m.h_tau2_w, m.h_tau2_b);
        }
    }
    m.y_stats = make_var(1, 2, {0.0, 1.0}, false);
    return m;
}

inline UpliftModel make_uplift_model(const UpliftConfig& cfg, const Dataset& ds, int k_groups,
                                     Rng rng) {
    return make_uplift_model(cfg, ds.p(), &ds.cfg, k_groups, rng);
}

struct UpliftForward {
    Var mu0, tau;   // scalars
    Var tau2;       // scalar, empty when the interaction branch is off
    Var e_delta;    // (2d, 1), empty when the interaction branch is off
    Var rep;        // (1, hidden) trunk representation for tarnet/cfrnet
};

namespace detail {

inline Var head_scalar(Tape& tape, const Var& row, const Var& w, const Var& b) {
    return linear(tape, row, w, b);  // (1, 1)
}

}  // namespace detail

inline UpliftForward uplift_forward(Tape& tape, const UpliftModel& m, const UpliftSample& s) {
    const UpliftConfig& cfg = m.cfg;
    Var e_u = m.user_embed.embed_tokens(tape, s.xu);  // (d, p)
    Var e_c;
    if (cfg.use_grouping)
        e_c = m.group_embed.embed(tape, s.g);  // (d, 1)
    else
        e_c = m.ctx_embed.embed_tokens(tape, s.xc);  // (d, q)

    Var eu_hat, ec_hat;
    if (cfg.use_coattention) {
        CoAttention::Out co = m.coatt.forward(tape, e_u, e_c);
        eu_hat = co.eu_hat;
        ec_hat = co.ec_hat;
    } else {
        eu_hat = mean_cols(tape, e_u);
        ec_hat = mean_cols(tape, e_c);
    }
    Var fused = transpose(tape, vconcat(tape, eu_hat, ec_hat));  // (1, 2d)

    UpliftForward out;
    if (cfg.use_tfi) {
        Var a1 = m.crossatt.attend(tape, m.treat.embed(tape, 1), eu_hat, ec_hat);
        Var a0 = m.crossatt.attend(tape, m.treat.embed(tape, 0), eu_hat, ec_hat);
        out.e_delta = information_gain(tape, a1, a0, eu_hat, ec_hat);
    }

    if (cfg.base == BaseKind::Mlp) {
        out.mu0 = m.mu0_net.forward(tape, fused);
        out.tau = m.tau_net.forward(tape, fused);
        if (cfg.use_tfi) {
            Var shifted = add(tape, fused, transpose(tape, out.e_delta));
            out.tau2 = m.tau2_net.forward(tape, shifted);
        }
    } else {
        out.rep = m.trunk.forward(tape, fused);
        out.mu0 = detail::head_scalar(tape, out.rep, m.h_mu0_w, m.h_mu0_b);
        out.tau = detail::head_scalar(tape, out.rep, m.h_tau_w, m.h_tau_b);
        if (cfg.use_tfi) {
            Var shifted = add(tape, fused, transpose(tape, out.e_delta));
            Var rep2 = m.trunk.forward(tape, shifted);
            out.tau2 = detail::head_scalar(tape, rep2, m.h_tau2_w, m.h_tau2_b);
        }
    }
    return out;
}

// Batch loss. The robustness weights compare the two uplift estimates with
// gradients blocked, softmax-normalised over the batch. The information
// gain bonus is averaged over the batch and subtracted.
// weights_in overrides the computed robustness weights; the weights are
// detached from the graph either way, and pinning them keeps the loss
// finite-difference checkable.
inline Var uplift_batch_loss(Tape& tape, const UpliftModel& m,
                             const std::vector<UpliftForward>& outs,
                             const std::vector<const UpliftSample*>& batch,
                             std::vector<double>* weights_out = nullptr,
                             const std::vector<double>* weights_in = nullptr) {
    const UpliftConfig& cfg = m.cfg;
    std::size_t b = batch.size();
    std::vector<double> w(b, 1.0 / double(b));
    if (weights_in) {
        w = *weights_in;
    } else if (cfg.use_tfi) {
        double mx = -std::numeric_limits<double>::infinity();
        std::vector<double> diff(b);
        for (std::size_t i = 0; i < b; ++i) {
            diff[i] = outs[i].tau2->data[0] - outs[i].tau->data[0];
            mx = std::max(mx, diff[i]);
        }
        double z = 0.0;
        for (std::size_t i = 0; i < b; ++i) z += std::exp(diff[i] - mx);
        for (std::size_t i = 0; i < b; ++i) w[i] = std::exp(diff[i] - mx) / z;
    }
    if (weights_out) *weights_out = w;

    std::vector<Var> terms;
    std::vector<double> coeffs;
    terms.reserve(b * 2 + 1);
    for (std::size_t i = 0; i < b; ++i) {
        const UpliftSample& s = *batch[i];
        Var target = scalar_var((s.y - m.y_mean()) / m.y_sd());
        if (s.t == 0) {
            Var d0 = sub(tape, outs[i].mu0, target);
            terms.push_back(mul(tape, d0, d0));
            coeffs.push_back(w[i]);
        } else {
            Var mu1 = add(tape, outs[i].mu0, outs[i].tau);
            Var d1 = sub(tape, mu1, target);
            terms.push_back(mul(tape, d1, d1));
            coeffs.push_back(w[i]);
            if (cfg.use_tfi) {
                Var mu1b = add(tape, outs[i].mu0, outs[i].tau2);
                Var d2 = sub(tape, mu1b, target);
                terms.push_back(mul(tape, d2, d2));
                coeffs.push_back(w[i] * cfg.beta);
            }
        }
        if (cfg.use_tfi && cfg.gamma != 0.0) {
            terms.push_back(frob_norm_sq(tape, outs[i].e_delta));
            coeffs.push_back(-cfg.gamma / double(b));
        }
    }
    return affine_combine(tape, terms, coeffs);
}

// ---------------------------------------------------------------------------
// Training and prediction

struct UpliftTrainReport {
    std::vector<double> train_loss;  // per epoch
    std::vector<double> val_qini;
    int best_epoch = -1;
    double best_val_qini = -std::numeric_limits<double>::infinity();
};

inline std::vector<double> predict_uplift(const UpliftModel& m,
                                          const std::vector<const UpliftSample*>& samples) {
    std::vector<double> out(samples.size());
    Tape tape;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        out[i] = m.y_sd() * uplift_forward(tape, m, *samples[i]).tau->data[0];
        tape.clear();
    }
    return out;
}

struct UpliftPrediction {
    double tau = 0.0, tau2 = 0.0, mu0 = 0.0;
};

inline std::vector<UpliftPrediction> predict_uplift_full(
    const UpliftModel& m, const std::vector<const UpliftSample*>& samples) {
    std::vector<UpliftPrediction> out(samples.size());
    Tape tape;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        UpliftForward f = uplift_forward(tape, m, *samples[i]);
        out[i].tau = m.y_sd() * f.tau->data[0];
        out[i].mu0 = m.y_mean() + m.y_sd() * f.mu0->data[0];
        out[i].tau2 = m.y_sd() * (m.cfg.use_tfi ? f.tau2->data[0] : f.tau->data[0]);
        tape.clear();
    }
    return out;
}

namespace detail {

inline double val_qini_score(const UpliftModel& m, const std::vector<const UpliftSample*>& val) {
    std::vector<double> preds = predict_uplift(m, val);
    std::vector<ScoredRecord> recs(val.size());
    for (std::size_t i = 0; i < val.size(); ++i) {
        recs[i].pred = preds[i];
        recs[i].t = val[i]->t;
        recs[i].y = val[i]->y;
        recs[i].stable_index = i;
    }
    return qini(recs);
}

inline std::vector<std::vector<double>> snapshot_params(const std::vector<Var>& ps) {
    std::vector<std::vector<double>> out;
    out.reserve(ps.size());
    for (const Var& p : ps) out.push_back(p->data);
    return out;
}

inline void restore_params(const std::vector<Var>& ps,
                           const std::vector<std::vector<double>>& snap) {
    for (std::size_t i = 0; i < ps.size(); ++i) ps[i]->data = snap[i];
}

}  // namespace detail

// Minibatch Adam with early stopping on validation qini; restores the best
// parameters before returning.
inline UpliftTrainReport train_uplift(UpliftModel& m, const std::vector<UpliftSample>& samples,
                                      Rng rng) {
    const UpliftConfig& cfg = m.cfg;
    std::vector<const UpliftSample*> train, val;
    for (const UpliftSample& s : samples) {
        if (s.split == kTrain) train.push_back(&s);
        else if (s.split == kVal) val.push_back(&s);
    }
    if (train.empty()) throw std::invalid_argument("train_uplift: empty train split");
    if (val.empty()) throw std::invalid_argument("train_uplift: empty validation split");

    if (m.y_stats) {
        double mean = 0.0;
        for (const UpliftSample* s : train) mean += s->y;
        mean /= double(train.size());
        double var = 0.0;
        for (const UpliftSample* s : train) var += (s->y - mean) * (s->y - mean);
        double sd = std::sqrt(var / double(train.size()));
        m.y_stats->data[0] = mean;
        m.y_stats->data[1] = sd > 0.0 ? sd : 1.0;
    }
    if (cfg.max_train_records > 0 && train.size() > cfg.max_train_records) {
        Rng sub = rng.derive("subsample");
        for (std::size_t i = 0; i < cfg.max_train_records; ++i) {
            std::size_t j = i + std::size_t(sub.uniform_int(0, std::int64_t(train.size() - 1 - i)));
            std::swap(train[i], train[j]);
        }
        train.resize(cfg.max_train_records);
    }

    std::vector<Var> params = m.params();
    AdamState adam;
    adam.lr = cfg.lr;
    Tape tape;
    UpliftTrainReport rep;
    std::vector<std::vector<double>> best = detail::snapshot_params(params);
    int since_best = 0;
    Rng shuffle_rng = rng.derive("shuffle");

    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i) {
            std::size_t j = std::size_t(shuffle_rng.uniform_int(0, std::int64_t(i - 1)));
            std::swap(order[i - 1], order[j]);
        }
        double epoch_loss = 0.0;
        std::size_t n_batches = 0;
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            std::size_t end = std::min(order.size(), start + cfg.batch_size);
            std::vector<const UpliftSample*> batch;
            batch.reserve(end - start);
            for (std::size_t i = start; i < end; ++i) batch.push_back(train[order[i]]);
            std::vector<UpliftForward> outs;
            outs.reserve(batch.size());
            for (const UpliftSample* s : batch) outs.push_back(uplift_forward(tape, m, *s));
            Var loss = uplift_batch_loss(tape, m, outs, batch);
            if (!std::isfinite(loss->data[0]))
                throw std::runtime_error("train_uplift: non-finite loss");
            epoch_loss += loss->data[0];
            ++n_batches;
            zero_grads(params);
            tape.backward(loss);
            adam_step(params, adam);
            tape.clear();
        }
        rep.train_loss.push_back(epoch_loss / double(n_batches));
        double q = detail::val_qini_score(m, val);
        rep.val_qini.push_back(q);
        if (q > rep.best_val_qini) {
            rep.best_val_qini = q;
            rep.best_epoch = epoch;
            best = detail::snapshot_params(params);
            since_best = 0;
        } else if (++since_best >= cfg.patience) {
            break;
        }
    }
    detail::restore_params(params, best);
    return rep;
}

// ---------------------------------------------------------------------------
// Standalone baselines over flat feature rows

enum class BaselineKind { SLearner, TLearner, Tarnet, CfrnetMmd };

inline const char* baseline_name(BaselineKind k) {
    switch (k) {
        case BaselineKind::SLearner: return "s-learner";
        case BaselineKind::TLearner: return "t-learner";
        case BaselineKind::Tarnet: return "tarnet";
        default: return "cfrnet-mmd";
    }
}

inline BaselineKind baseline_from_name(const std::string& s) {
    if (s == "s-learner") return BaselineKind::SLearner;
    if (s == "t-learner") return BaselineKind::TLearner;
    if (s == "tarnet") return BaselineKind::Tarnet;
    if (s == "cfrnet-mmd") return BaselineKind::CfrnetMmd;
    throw std::invalid_argument("unknown baseline: " + s);
}

struct FlatData {
    std::size_t n = 0, dim = 0;
    std::vector<double> x;  // n x dim
    std::vector<std::int8_t> t, split;
    std::vector<double> y, y0, y1;
    const double* row(std::size_t i) const { return x.data() + i * dim; }
};

// [x_u | x_c] per raw sample.
inline FlatData build_raw_flat(const Dataset& ds) {
    FlatData fd;
    fd.n = ds.recs.size();
    fd.dim = ds.p() + ds.q();
    fd.x.resize(fd.n * fd.dim);
    fd.t.resize(fd.n);
    fd.split.resize(fd.n);
    fd.y.resize(fd.n);
    fd.y0.resize(fd.n);
    fd.y1.resize(fd.n);
    for (std::size_t i = 0; i < fd.n; ++i) {
        const SampleRec& r = ds.recs[i];
        double* dst = fd.x.data() + i * fd.dim;
        std::copy(ds.user_row(std::size_t(r.user)), ds.user_row(std::size_t(r.user)) + ds.p(), dst);
        std::copy(ds.ctx_row(std::size_t(r.ctx)), ds.ctx_row(std::size_t(r.ctx)) + ds.q(),
                  dst + ds.p());
        fd.t[i] = ds.user_t[std::size_t(r.user)];
        fd.split[i] = ds.rec_split(r);
        fd.y[i] = r.y;
        fd.y0[i] = r.y0;
        fd.y1[i] = r.y1;
    }
    return fd;
}

// [x_u | one-hot(group)] per aggregated record.
inline FlatData build_grouped_flat(const Dataset& ds, const GroupedDataset& gds) {
    FlatData fd;
    fd.n = gds.recs.size();
    fd.dim = ds.p() + std::size_t(gds.K);
    fd.x.assign(fd.n * fd.dim, 0.0);
    fd.t.resize(fd.n);
    fd.split.resize(fd.n);
    fd.y.resize(fd.n);
    fd.y0.resize(fd.n);
    fd.y1.resize(fd.n);
    for (std::size_t i = 0; i < fd.n; ++i) {
        const GroupedRec& r = gds.recs[i];
        double* dst = fd.x.data() + i * fd.dim;
        std::copy(ds.user_row(std::size_t(r.user)), ds.user_row(std::size_t(r.user)) + ds.p(), dst);
        dst[ds.p() + std::size_t(r.g)] = 1.0;
        fd.t[i] = r.t;
        fd.split[i] = r.split;
        fd.y[i] = r.y_bar;
        fd.y0[i] = r.y0_bar;
        fd.y1[i] = r.y1_bar;
    }
    return fd;
}

struct BaselineConfig {
    BaselineKind kind = BaselineKind::SLearner;
    std::size_t hidden = 32;
    double lr = 1e-3;
    double mmd_lambda = 1.0;
    std::size_t batch_size = 256;
    int max_epochs = 50;
    int patience = 5;
    std::size_t max_train_samples = 0;
};

struct BaselineModel {
    BaselineConfig cfg;
    std::size_t dim = 0;
    Mlp net;             // s-learner (dim+1 input)
    Mlp net0, net1;      // t-learner
    Mlp trunk;           // tarnet / cfrnet
    Var h0_w, h0_b, h1_w, h1_b;

    // train-split response standardization, data = {mean, sd}
    Var y_stats;

    double y_mean() const { return y_stats ? y_stats->data[0] : 0.0; }
    double y_sd() const { return y_stats ? y_stats->data[1] : 1.0; }

    std::vector<std::pair<std::string, Var>> named_params() const {
        std::vector<std::pair<std::string, Var>> out;
        auto push = [&](const std::string& prefix, const std::vector<Var>& vs) {
            for (std::size_t i = 0; i < vs.size(); ++i)
                out.emplace_back(prefix + "." + std::to_string(i), vs[i]);
        };
        switch (cfg.kind) {
            case BaselineKind::SLearner: push("net", net.params()); break;
            case BaselineKind::TLearner:
                push("net0", net0.params());
                push("net1", net1.params());
                break;
            default:
                push("trunk", trunk.params());
                out.emplace_back("head0.w", h0_w);
                out.emplace_back("head0.b", h0_b);
                out.emplace_back("head1.w", h1_w);
                out.emplace_back("head1.b", h1_b);
        }
        if (y_stats) out.emplace_back("y_stats", y_stats);
        return out;
    }

    // trainable parameters only; y_stats is fitted, not optimized
    std::vector<Var> params() const {
        std::vector<Var> out;
        for (auto& [name, v] : named_params())
            if (v->requires_grad) out.push_back(v);
        return out;
    }

    // Per-row uplift prediction.
    std::vector<double> predict(const FlatData& fd, const std::vector<std::size_t>& rows) const {
        Tape tape;
        std::vector<double> out(rows.size());
        std::size_t chunk = 512;
        for (std::size_t start = 0; start < rows.size(); start += chunk) {
            std::size_t end = std::min(rows.size(), start + chunk);
            std::size_t b = end - start;
            if (cfg.kind == BaselineKind::SLearner) {
                Var x0 = make_var(b, dim + 1), x1 = make_var(b, dim + 1);
                for (std::size_t i = 0; i < b; ++i) {
                    const double* src = fd.row(rows[start + i]);
                    std::copy(src, src + dim, x0->data.begin() + i * (dim + 1));
                    std::copy(src, src + dim, x1->data.begin() + i * (dim + 1));
                    x0->data[i * (dim + 1) + dim] = 0.0;
                    x1->data[i * (dim + 1) + dim] = 1.0;
                }
                Var p0 = net.forward(tape, x0), p1 = net.forward(tape, x1);
                for (std::size_t i = 0; i < b; ++i) out[start + i] = y_sd() * (p1->data[i] - p0->data[i]);
            } else {
                Var x = make_var(b, dim);
                for (std::size_t i = 0; i < b; ++i) {
                    const double* src = fd.row(rows[start + i]);
                    std::copy(src, src + dim, x->data.begin() + i * dim);
                }
                Var p0, p1;
                if (cfg.kind == BaselineKind::TLearner) {
                    p0 = net0.forward(tape, x);
                    p1 = net1.forward(tape, x);
                } else {
                    Var rep = trunk.forward(tape, x);
                    p0 = linear(tape, rep, h0_w, h0_b);
                    p1 = linear(tape, rep, h1_w, h1_b);
                }
                for (std::size_t i = 0; i < b; ++i) out[start + i] = y_sd() * (p1->data[i] - p0->data[i]);
            }
            tape.clear();
        }
        return out;
    }
};

namespace detail {

inline double baseline_val_qini(const BaselineModel& m, const FlatData& fd,
                                const std::vector<std::size_t>& val_rows) {
    std::vector<double> preds = m.predict(fd, val_rows);
    std::vector<ScoredRecord> recs(val_rows.size());
    for (std::size_t i = 0; i < val_rows.size(); ++i) {
        recs[i].pred = preds[i];
        recs[i].t = fd.t[val_rows[i]];
        recs[i].y = fd.y[val_rows[i]];
        recs[i].stable_index = i;
    }
    return qini(recs);
}

}  // namespace detail

inline BaselineModel fit_baseline(const BaselineConfig& cfg, const FlatData& fd, Rng rng) {
    BaselineModel m;
    m.cfg = cfg;
    m.dim = fd.dim;
    Rng init = rng.derive("init");
    switch (cfg.kind) {
        case BaselineKind::SLearner:
            m.net = Mlp({fd.dim + 1, cfg.hidden, 1}, init.derive("net"));
            break;
        case BaselineKind::TLearner:
            m.net0 = Mlp({fd.dim, cfg.hidden, 1}, init.derive("net0"));
            m.net1 = Mlp({fd.dim, cfg.hidden, 1}, init.derive("net1"));
            break;
        default: {
            m.trunk = Mlp({fd.dim, cfg.hidden}, init.derive("trunk"), true);
            auto mk_head = [&](Rng r, Var& w, Var& b) {
                double s = 1.0 / std::sqrt(double(cfg.hidden));
                w = make_var(1, cfg.hidden, true);
                b = make_var(1, 1, true);
                for (double& v : w->data) v = r.uniform(-s, s);
                b->data[0] = r.uniform(-s, s);
            };
            mk_head(init.derive("h0"), m.h0_w, m.h0_b);
            mk_head(init.derive("h1"), m.h1_w, m.h1_b);
        }
    }

    std::vector<std::size_t> train_rows, val_rows;
    for (std::size_t i = 0; i < fd.n; ++i) {
        if (fd.split[i] == kTrain) train_rows.push_back(i);
        else if (fd.split[i] == kVal) val_rows.push_back(i);
    }
    if (train_rows.empty()) throw std::invalid_argument("fit_baseline: empty train split");
    if (val_rows.empty()) throw std::invalid_argument("fit_baseline: empty validation split");
    if (cfg.max_train_samples > 0 && train_rows.size() > cfg.max_train_samples) {
        Rng sub = rng.derive("subsample");
        for (std::size_t i = 0; i < cfg.max_train_samples; ++i) {
            std::size_t j =
                i + std::size_t(sub.uniform_int(0, std::int64_t(train_rows.size() - 1 - i)));
            std::swap(train_rows[i], train_rows[j]);
        }
        train_rows.resize(cfg.max_train_samples);
    }

    bool has_t = false, has_c = false;
    for (std::size_t i : train_rows) (fd.t[i] ? has_t : has_c) = true;
    if (!has_t || !has_c)
        throw std::runtime_error("fit_baseline: train split is missing a treatment arm");

    m.y_stats = make_var(1, 2, {0.0, 1.0}, false);
    {
        double mean = 0.0;
        for (std::size_t i : train_rows) mean += fd.y[i];
        mean /= double(train_rows.size());
        double var = 0.0;
        for (std::size_t i : train_rows) var += (fd.y[i] - mean) * (fd.y[i] - mean);
        double sd = std::sqrt(var / double(train_rows.size()));
        m.y_stats->data[0] = mean;
        m.y_stats->data[1] = sd > 0.0 ? sd : 1.0;
    }

    std::vector<Var> params = m.params();
    AdamState adam;
    adam.lr = cfg.lr;
    Tape tape;
    Rng shuffle_rng = rng.derive("shuffle");
    std::vector<std::vector<double>> best = detail::snapshot_params(params);
    double best_q = -std::numeric_limits<double>::infinity();
    int since_best = 0;

    std::vector<std::size_t> order(train_rows.size());
    for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;

    for (int epoch = 0; epoch < cfg.max_epochs; ++epoch) {
        for (std::size_t i = order.size(); i > 1; --i) {
            std::size_t j = std::size_t(shuffle_rng.uniform_int(0, std::int64_t(i - 1)));
            std::swap(order[i - 1], order[j]);
        }
        for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
            std::size_t end = std::min(order.size(), start + cfg.batch_size);
            std::size_t b = end - start;
            std::vector<std::int8_t> bt(b);
            std::vector<double> by(b);
            Var loss;
            if (cfg.kind == BaselineKind::SLearner) {
                Var x = make_var(b, fd.dim + 1);
                Var target = make_var(b, 1);
                for (std::size_t i = 0; i < b; ++i) {
                    std::size_t r = train_rows[order[start + i]];
                    const double* src = fd.row(r);
                    std::copy(src, src + fd.dim, x->data.begin() + i * (fd.dim + 1));
                    x->data[i * (fd.dim + 1) + fd.dim] = double(fd.t[r]);
                    target->data[i] = (fd.y[r] - m.y_mean()) / m.y_sd();
                }
                loss = mse(tape, m.net.forward(tape, x), target);
            } else {
                Var x = make_var(b, fd.dim);
                for (std::size_t i = 0; i < b; ++i) {
                    std::size_t r = train_rows[order[start + i]];
                    const double* src = fd.row(r);
                    std::copy(src, src + fd.dim, x->data.begin() + i * fd.dim);
                    bt[i] = fd.t[r];
                    by[i] = (fd.y[r] - m.y_mean()) / m.y_sd();
                }
                if (cfg.kind == BaselineKind::TLearner) {
                    // Per-arm squared error; an all-one-arm batch still works
                    // because masked_mse ignores the unused head.
                    Var p0 = m.net0.forward(tape, x), p1 = m.net1.forward(tape, x);
                    loss = masked_mse(tape, p0, p1, bt, by);
                } else {
                    Var rep = m.trunk.forward(tape, x);
                    Var p0 = linear(tape, rep, m.h0_w, m.h0_b);
                    Var p1 = linear(tape, rep, m.h1_w, m.h1_b);
                    loss = masked_mse(tape, p0, p1, bt, by);
                    if (cfg.kind == BaselineKind::CfrnetMmd && cfg.mmd_lambda != 0.0)
                        loss = add(tape, loss,
                                   scale(tape, mmd_linear(tape, rep, bt), cfg.mmd_lambda));
                }
            }
            if (!std::isfinite(loss->data[0]))
                throw std::runtime_error("fit_baseline: non-finite loss");
            zero_grads(params);
            tape.backward(loss);
            adam_step(params, adam);
            tape.clear();
        }
        double q = detail::baseline_val_qini(m, fd, val_rows);
        if (q > best_q) {
            best_q = q;
            best = detail::snapshot_params(params);
            since_best = 0;
        } else if (++since_best >= cfg.patience) {
            break;
        }
    }
    detail::restore_params(params, best);
    return m;
}

}  // namespace uplift
