#pragma once

// Response-guided context grouping: a Lipschitz-regularized regressor over
// (x_u, xi(x_c), t) trains the context embedding, k-means clusters the
// embeddings into K groups, and samples sharing (user, group, treatment)
// aggregate into mean-response records.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <limits>
#include <map>
#include <set>
#include <stdexcept>
#include <vector>

#include "datagen.hpp"
#include "features.hpp"
#include "rng.hpp"
#include "tensor.hpp"

namespace uplift {

// Linear layer whose effective weight rows are rescaled so each absolute
// row sum stays <= softplus(c); the layer is then softplus(c)-Lipschitz
// under the max norm, and tanh keeps that bound.
struct LipschitzLayer {
    Var w, b, c;  // c is the trainable per-layer bound parameter, scalar
    bool activation = true;

    LipschitzLayer() = default;
    LipschitzLayer(std::size_t in, std::size_t out, bool act, Rng& rng) : activation(act) {
        w = make_var(out, in, true);
        b = make_var(out, 1, true);
        c = scalar_var(1.0, true);
        init_uniform(w, rng, 1.0 / std::sqrt(double(in)));
    }

    Var forward(Tape& tape, const Var& x) const {
        Var s = softplus_op(tape, c);
        Var sigma = row_abs_sum(tape, w);
        Var factor = min_const(tape, scalar_div_vec(tape, s, sigma), 1.0);
        Var weff = scale_rows(tape, w, factor);
        Var y = linear(tape, x, weff, b);
        return activation ? tanh_op(tape, y) : y;
    }

    double certified_bound() const {
        double x = c->data[0];
        return std::max(x, 0.0) + std::log1p(std::exp(-std::abs(x)));
    }

    std::vector<Var> params() const { return {w, b, c}; }
};

struct RegressorHyper {
    std::vector<std::size_t> widths = {32, 32};
    int embed_dim = 4;
    double lr = 1e-3;
    double alpha = 1e-4;  // Lipschitz regularization weight
    int max_epochs = 50;
    int patience = 5;
    std::size_t batch_size = 1024;
    std::size_t max_train_samples = 0;  // 0 = use the full train split
    bool standardize_y = true;  // fit on (y - mean) / sd of the train split
    // Rank of the per-arm bilinear trend model fit before the embedding
    // regressor; 0 disables detrending. The bilinear stage absorbs global
    // additive and user-by-context interaction effects so the embedding
    // stage sees the residual, where context-group structure dominates.
    int detrend_rank = 3;
    std::size_t detrend_max_rows = 20000;  // per arm, subsampled
    int detrend_sweeps = 8;
    // The embedding table is updated with plain SGD plus decoupled weight
    // decay while the network uses Adam. SGD steps scale with the actual
    // gradient, so feature blocks carrying no residual signal stay small
    // instead of random-walking at the Adam step size, and decay pulls them
    // toward zero; distances between trained embeddings then reflect
    // response-relevant structure only.
    double embed_lr = 0.05;
    double embed_decay = 1.0;
};

namespace detail {

// Solves (G + lam*diag_scale*I) x = rhs via Cholesky, G row-major n x n.
inline std::vector<double> ridge_solve(std::vector<double> g, std::vector<double> rhs,
                                       std::size_t n, double lam) {
    double diag = 0.0;
    for (std::size_t i = 0; i < n; ++i) diag += g[i * n + i];
    double shift = lam * (diag / double(n) + 1.0);
    for (std::size_t i = 0; i < n; ++i) g[i * n + i] += shift;
    // in-place Cholesky, lower triangle
    for (std::size_t i = 0; i < n; ++i) {
        for (std::size_t j = 0; j <= i; ++j) {
            double s = g[i * n + j];
            for (std::size_t k = 0; k < j; ++k) s -= g[i * n + k] * g[j * n + k];
            if (i == j) {
                g[i * n + i] = std::sqrt(std::max(s, 1e-12));
            } else {
                g[i * n + j] = s / g[j * n + j];
            }
        }
    }
    for (std::size_t i = 0; i < n; ++i) {
        double s = rhs[i];
        for (std::size_t k = 0; k < i; ++k) s -= g[i * n + k] * rhs[k];
        rhs[i] = s / g[i * n + i];
    }
    for (std::size_t ii = n; ii-- > 0;) {
        double s = rhs[ii];
        for (std::size_t k = ii + 1; k < n; ++k) s -= g[k * n + ii] * rhs[k];
        rhs[ii] = s / g[ii * n + ii];
    }
    return rhs;
}

}  // namespace detail

// Rank-r bilinear response trend for one treatment arm: sum_r (a_r . [xu,1])
// * (b_r . [xc,1]), fit by alternating ridge regression.
struct BilinearArm {
    std::vector<double> a, b;  // rank x du, rank x dc
    std::size_t du = 0, dc = 0;
    int rank = 0;
    bool active = false;

    double predict(const double* xu, const double* xc) const {
        if (!active) return 0.0;
        double out = 0.0;
        for (int r = 0; r < rank; ++r) {
            const double* ar = a.data() + std::size_t(r) * du;
            const double* br = b.data() + std::size_t(r) * dc;
            double s = ar[du - 1], t = br[dc - 1];
            for (std::size_t i = 0; i + 1 < du; ++i) s += ar[i] * xu[i];
            for (std::size_t j = 0; j + 1 < dc; ++j) t += br[j] * xc[j];
            out += s * t;
        }
        return out;
    }
};

struct BilinearBase {
    BilinearArm arm[2];
    double predict(const double* xu, const double* xc, int t) const {
        return arm[t == 0 ? 0 : 1].predict(xu, xc);
    }
};

struct TrainHistory {
    std::vector<double> train_loss, val_pred_loss;
    double final_lip = 0.0;
    int best_epoch = -1;
};

struct GroupingModel {
    ContextEmbedder embed;
    std::vector<LipschitzLayer> layers;
    // The regressor is fit in two stages: a bilinear trend model over raw
    // features, then the embedding network on the standardized residual.
    // y_mean/y_sd standardize the raw response; r_mean/r_sd standardize the
    // residual the network actually predicts.
    BilinearBase base;
    double y_mean = 0.0, y_sd = 1.0;
    double r_mean = 0.0, r_sd = 1.0;
    int K = 0;
    std::vector<double> centroids;  // K x emb_dim, present when trained
    bool trained = false;
    TrainHistory history;

    std::vector<Var> params() const {
        auto p = embed.params();
        for (const auto& l : layers) {
            auto lp = l.params();
            p.insert(p.end(), lp.begin(), lp.end());
        }
        return p;
    }
};

inline std::vector<FeatureSpec> context_feature_specs(const GenConfig& cfg) {
    std::vector<FeatureSpec> specs;
    for (int j = 0; j < cfg.q_b + cfg.q_c; ++j) specs.push_back({FeatureSpec::Kind::Numeric, 0});
    for (int j = 0; j < cfg.q_m; ++j) specs.push_back({FeatureSpec::Kind::Categorical, 4});
    if (cfg.group_observable) specs.push_back({FeatureSpec::Kind::Categorical, cfg.k_true});
    return specs;
}

// Product of per-layer softplus(c_i): the certified network Lipschitz
// constant (max-norm, hence also valid against Euclidean distances).
inline double lipschitz_bound(const GroupingModel& model) {
    double c = 1.0;
    for (const auto& l : model.layers) c *= l.certified_bound();
    return c;
}

namespace detail {

// Forward f on a batch; rows index into ds.recs.
inline Var regressor_forward(Tape& tape, const GroupingModel& model, const Dataset& ds,
                             const std::vector<std::size_t>& rows) {
    std::size_t b = rows.size(), p = ds.p();
    std::vector<const double*> ctx_rows(b);
    Var side = make_var(b, p + 1);  // [x_u | t], constant input block
    for (std::size_t i = 0; i < b; ++i) {
        const SampleRec& r = ds.recs[rows[i]];
        ctx_rows[i] = ds.ctx_row(std::size_t(r.ctx));
        const double* xu = ds.user_row(std::size_t(r.user));
        std::copy(xu, xu + p, side->data.begin() + i * (p + 1));
        side->data[i * (p + 1) + p] = double(ds.user_t[std::size_t(r.user)]);
    }
    Var emb = model.embed.embed_batch(tape, ctx_rows);
    Var x = hconcat(tape, side, emb);
    for (const auto& l : model.layers) x = l.forward(tape, x);
    return x;  // (b, 1)
}

inline Var lip_product(Tape& tape, const GroupingModel& model) {
    Var prod = softplus_op(tape, model.layers[0].c);
    for (std::size_t i = 1; i < model.layers.size(); ++i)
        prod = mul(tape, prod, softplus_op(tape, model.layers[i].c));
    return prod;
}

// Alternating ridge regression for one arm's bilinear trend on scaled
// targets. rows index ds.recs; all must share the arm's treatment.
inline BilinearArm fit_bilinear_arm(const Dataset& ds, const std::vector<std::size_t>& rows,
                                    int rank, int sweeps, double y_mean, double y_sd, Rng rng) {
    BilinearArm arm;
    arm.rank = rank;
    arm.du = ds.p() + 1;
    arm.dc = ds.q() + 1;
    if (rows.empty() || rank <= 0) return arm;
    std::size_t n = rows.size(), du = arm.du, dc = arm.dc, R = std::size_t(rank);
    arm.a.assign(R * du, 0.0);
    arm.b.assign(R * dc, 0.0);
    for (auto& v : arm.b) v = rng.uniform() - 0.5;

    std::vector<double> zu(n * du), zc(n * dc), y(n);
    for (std::size_t i = 0; i < n; ++i) {
        const SampleRec& r = ds.recs[rows[i]];
        const double* xu = ds.user_row(std::size_t(r.user));
        const double* xc = ds.ctx_row(std::size_t(r.ctx));
        std::copy(xu, xu + du - 1, zu.begin() + i * du);
        zu[i * du + du - 1] = 1.0;
        std::copy(xc, xc + dc - 1, zc.begin() + i * dc);
        zc[i * dc + dc - 1] = 1.0;
        y[i] = (r.y - y_mean) / y_sd;
    }

    // one least-squares pass over whichever side is free, other side fixed
    auto solve_side = [&](std::vector<double>& free_side, const std::vector<double>& fixed_side,
                          const std::vector<double>& zfree, const std::vector<double>& zfixed,
                          std::size_t dfree, std::size_t dfixed) {
        std::size_t m = R * dfree;
        std::vector<double> gram(m * m, 0.0), rhs(m, 0.0), phi(m), s(R);
        for (std::size_t i = 0; i < n; ++i) {
            const double* zf = zfixed.data() + i * dfixed;
            for (std::size_t r = 0; r < R; ++r) {
                const double* w = fixed_side.data() + r * dfixed;
                double acc = 0.0;
                for (std::size_t j = 0; j < dfixed; ++j) acc += w[j] * zf[j];
                s[r] = acc;
            }
            const double* zr = zfree.data() + i * dfree;
            for (std::size_t r = 0; r < R; ++r)
                for (std::size_t j = 0; j < dfree; ++j) phi[r * dfree + j] = s[r] * zr[j];
            for (std::size_t a = 0; a < m; ++a) {
                double pa = phi[a];
                if (pa == 0.0) continue;
                double* gr = gram.data() + a * m;
                for (std::size_t bq = a; bq < m; ++bq) gr[bq] += pa * phi[bq];
                rhs[a] += pa * y[i];
            }
        }
        for (std::size_t a = 0; a < m; ++a)
            for (std::size_t bq = 0; bq < a; ++bq) gram[a * m + bq] = gram[bq * m + a];
        free_side = ridge_solve(std::move(gram), std::move(rhs), m, 1e-8);
    };

    for (int sweep = 0; sweep < sweeps; ++sweep) {
        solve_side(arm.a, arm.b, zu, zc, du, dc);
        solve_side(arm.b, arm.a, zc, zu, dc, du);
    }
    arm.active = true;
    return arm;
}

inline std::vector<std::size_t> split_rows(const Dataset& ds, std::int8_t split) {
    std::vector<std::size_t> rows;
    for (std::size_t i = 0; i < ds.recs.size(); ++i)
        if (ds.rec_split(ds.recs[i]) == split) rows.push_back(i);
    return rows;
}

// Standardized-residual target the embedding network is trained against.
inline double network_target(const GroupingModel& model, const Dataset& ds,
                             const SampleRec& rec) {
    double ys = (rec.y - model.y_mean) / model.y_sd;
    double trend = model.base.predict(ds.user_row(std::size_t(rec.user)),
                                      ds.ctx_row(std::size_t(rec.ctx)),
                                      ds.user_t[std::size_t(rec.user)]);
    return (ys - trend - model.r_mean) / model.r_sd;
}

inline double eval_pred_loss(const GroupingModel& model, const Dataset& ds,
                             const std::vector<std::size_t>& rows, std::size_t batch) {
    double acc = 0.0;
    for (std::size_t start = 0; start < rows.size(); start += batch) {
        std::vector<std::size_t> chunk(rows.begin() + start,
                                       rows.begin() + std::min(start + batch, rows.size()));
        Tape tape;
        Var pred = regressor_forward(tape, model, ds, chunk);
        for (std::size_t i = 0; i < chunk.size(); ++i) {
            double d = pred->data[i] - network_target(model, ds, ds.recs[chunk[i]]);
            acc += d * d;
        }
    }
    return acc / double(rows.size());
}

inline std::vector<std::vector<double>> snapshot(const std::vector<Var>& params) {
    std::vector<std::vector<double>> s;
    for (const auto& p : params) s.push_back(p->data);
    return s;
}

inline void restore(std::vector<Var>& params, const std::vector<std::vector<double>>& s) {
    for (std::size_t i = 0; i < params.size(); ++i) params[i]->data = s[i];
}

}  // namespace detail

// Minimizes mse(f, y) + alpha * prod softplus(c_i) with Adam; early stops
// on validation prediction loss.
inline GroupingModel train_regressor(const Dataset& ds, const RegressorHyper& hyper, Rng rng) {
    GroupingModel model;
    Rng init = rng.derive("regressor-init");
    model.embed = ContextEmbedder(context_feature_specs(ds.cfg), hyper.embed_dim, init);
    std::size_t in_dim = ds.p() + 1 + model.embed.out_dim();
    Rng layer_rng = init.derive("layers");
    for (std::size_t i = 0; i < hyper.widths.size(); ++i) {
        model.layers.emplace_back(in_dim, hyper.widths[i], true, layer_rng);
        in_dim = hyper.widths[i];
    }
    model.layers.emplace_back(in_dim, 1, false, layer_rng);

    auto train_rows = detail::split_rows(ds, kTrain);
    auto val_rows = detail::split_rows(ds, kVal);
    if (train_rows.empty()) throw std::runtime_error("train_regressor: empty train split");
    if (hyper.standardize_y) {
        double m = 0.0;
        for (std::size_t i : train_rows) m += ds.recs[i].y;
        m /= double(train_rows.size());
        double v = 0.0;
        for (std::size_t i : train_rows) v += (ds.recs[i].y - m) * (ds.recs[i].y - m);
        v /= double(train_rows.size());
        model.y_mean = m;
        model.y_sd = v > 0.0 ? std::sqrt(v) : 1.0;
    }
    if (hyper.detrend_rank > 0) {
        Rng det_rng = rng.derive("detrend");
        std::vector<std::size_t> arm_rows[2];
        for (std::size_t i : train_rows)
            arm_rows[ds.user_t[std::size_t(ds.recs[i].user)] == 0 ? 0 : 1].push_back(i);
        for (int t = 0; t < 2; ++t) {
            auto& rows = arm_rows[t];
            if (hyper.detrend_max_rows > 0 && rows.size() > hyper.detrend_max_rows) {
                Rng sub = det_rng.derive("sub", std::uint64_t(t));
                for (std::size_t i = 0; i < hyper.detrend_max_rows; ++i) {
                    std::size_t j = std::size_t(
                        sub.uniform_int(std::int64_t(i), std::int64_t(rows.size()) - 1));
                    std::swap(rows[i], rows[j]);
                }
                rows.resize(hyper.detrend_max_rows);
            }
            model.base.arm[t] =
                detail::fit_bilinear_arm(ds, rows, hyper.detrend_rank, hyper.detrend_sweeps,
                                         model.y_mean, model.y_sd, det_rng.derive("arm", std::uint64_t(t)));
        }
        double rm = 0.0;
        for (std::size_t i : train_rows) {
            const SampleRec& r = ds.recs[i];
            rm += (r.y - model.y_mean) / model.y_sd -
                  model.base.predict(ds.user_row(std::size_t(r.user)),
                                     ds.ctx_row(std::size_t(r.ctx)),
                                     ds.user_t[std::size_t(r.user)]);
        }
        rm /= double(train_rows.size());
        double rv = 0.0;
        for (std::size_t i : train_rows) {
            const SampleRec& r = ds.recs[i];
            double d = (r.y - model.y_mean) / model.y_sd -
                       model.base.predict(ds.user_row(std::size_t(r.user)),
                                          ds.ctx_row(std::size_t(r.ctx)),
                                          ds.user_t[std::size_t(r.user)]) -
                       rm;
            rv += d * d;
        }
        rv /= double(train_rows.size());
        model.r_mean = rm;
        model.r_sd = rv > 0.0 ? std::sqrt(rv) : 1.0;
    }
    Rng shuffle_rng = rng.derive("regressor-shuffle");
    if (hyper.max_train_samples > 0 && train_rows.size() > hyper.max_train_samples) {
        for (std::size_t i = 0; i < hyper.max_train_samples; ++i) {
            std::size_t j = std::size_t(
                shuffle_rng.uniform_int(std::int64_t(i), std::int64_t(train_rows.size()) - 1));
            std::swap(train_rows[i], train_rows[j]);
        }
        train_rows.resize(hyper.max_train_samples);
    }

    auto params = model.params();
    std::vector<Var> net_params;
    for (const auto& l : model.layers) {
        auto lp = l.params();
        net_params.insert(net_params.end(), lp.begin(), lp.end());
    }
    auto embed_params = model.embed.params();
    double decay_factor = 1.0 - hyper.embed_lr * hyper.embed_decay;
    AdamState adam;
    adam.lr = hyper.lr;
    double best_val = std::numeric_limits<double>::infinity();
    auto best_params = detail::snapshot(params);
    int since_best = 0;
    for (int epoch = 0; epoch < hyper.max_epochs; ++epoch) {
        for (std::size_t i = train_rows.size(); i > 1; --i) {
            std::size_t j = std::size_t(shuffle_rng.uniform_int(0, std::int64_t(i) - 1));
            std::swap(train_rows[i - 1], train_rows[j]);
        }
        double epoch_loss = 0.0;
        std::size_t n_batches = 0;
        for (std::size_t start = 0; start < train_rows.size(); start += hyper.batch_size) {
            std::vector<std::size_t> chunk(
                train_rows.begin() + start,
                train_rows.begin() + std::min(start + hyper.batch_size, train_rows.size()));
            Tape tape;
            Var pred = detail::regressor_forward(tape, model, ds, chunk);
            Var target = make_var(chunk.size(), 1);
            for (std::size_t i = 0; i < chunk.size(); ++i)
                target->data[i] = detail::network_target(model, ds, ds.recs[chunk[i]]);
            Var loss = add(tape, mse(tape, pred, target),
                           scale(tape, detail::lip_product(tape, model), hyper.alpha));
            if (!std::isfinite(loss->data[0]))
                throw std::runtime_error("train_regressor: non-finite loss at epoch " +
                                         std::to_string(epoch));
            zero_grads(params);
            tape.backward(loss);
            adam_step(net_params, adam);
            for (auto& ep : embed_params) {
                if (!ep->grad.empty())
                    for (std::size_t k = 0; k < ep->data.size(); ++k)
                        ep->data[k] -= hyper.embed_lr * ep->grad[k];
                for (auto& v : ep->data) v *= decay_factor;
            }
            epoch_loss += loss->data[0];
            ++n_batches;
        }
        model.history.train_loss.push_back(epoch_loss / double(n_batches));
        double val = val_rows.empty()
                         ? model.history.train_loss.back()
                         : detail::eval_pred_loss(model, ds, val_rows, hyper.batch_size);
        model.history.val_pred_loss.push_back(val);
        if (val < best_val) {
            best_val = val;
            best_params = detail::snapshot(params);
            model.history.best_epoch = epoch;
            since_best = 0;
        } else if (++since_best >= hyper.patience) {
            break;
        }
    }
    detail::restore(params, best_params);
    model.history.final_lip = lipschitz_bound(model);
    return model;
}

// Point evaluation of the trained regressor.
inline double regressor_eval(const GroupingModel& model, const double* xu, std::size_t p,
                             const std::vector<double>& ctx_emb, int t) {
    Tape tape;
    Var x = make_var(1, p + 1 + ctx_emb.size());
    std::copy(xu, xu + p, x->data.begin());
    x->data[p] = double(t);
    std::copy(ctx_emb.begin(), ctx_emb.end(), x->data.begin() + p + 1);
    Var out = x;
    for (const auto& l : model.layers) out = l.forward(tape, out);
    return out->data[0];
}

// Full response prediction in raw units: bilinear trend plus the rescaled
// network output.
inline double predict_response(const GroupingModel& model, const Dataset& ds,
                               const SampleRec& rec) {
    std::vector<double> emb(model.embed.out_dim());
    model.embed.embed_values(ds.ctx_row(std::size_t(rec.ctx)), emb.data());
    int t = ds.user_t[std::size_t(rec.user)];
    double f = regressor_eval(model, ds.user_row(std::size_t(rec.user)), ds.p(), emb, t);
    double trend = model.base.predict(ds.user_row(std::size_t(rec.user)),
                                      ds.ctx_row(std::size_t(rec.ctx)), t);
    return model.y_mean + model.y_sd * (trend + model.r_mean + model.r_sd * f);
}

struct Proposition1Report {
    double mu_hat = 0.0;  // max |f - y| empirical surrogate for the approximation bound
    double lipschitz_c = 0.0;
    std::size_t n_pairs = 0;
    std::size_t violations = 0;
    double worst_margin = std::numeric_limits<double>::infinity();  // min(RHS - LHS)
};

// Pairs share (x_u, t) and differ in context; the certified inequality
// |f(xu, xi_i, t) - f(xu, xi_j, t)| <= C * ||xi_i - xi_j||_2 must hold for
// every pair regardless of training.
inline Proposition1Report check_proposition1(const GroupingModel& model, const Dataset& ds,
                                             std::size_t n_pairs, std::uint64_t seed,
                                             std::size_t mu_sample = 2000) {
    Proposition1Report rep;
    rep.lipschitz_c = lipschitz_bound(model);
    rep.n_pairs = n_pairs;
    Rng rng = Rng(seed).derive("prop1");
    std::size_t p = ds.p(), ed = model.embed.out_dim();

    std::vector<double> ei(ed), ej(ed);
    for (std::size_t k = 0; k < n_pairs; ++k) {
        std::size_t u = std::size_t(rng.uniform_int(0, std::int64_t(ds.cfg.n_users) - 1));
        std::size_t ci = std::size_t(rng.uniform_int(0, std::int64_t(ds.ctx_group.size()) - 1));
        std::size_t cj = std::size_t(rng.uniform_int(0, std::int64_t(ds.ctx_group.size()) - 1));
        int t = ds.user_t[u];
        model.embed.embed_values(ds.ctx_row(ci), ei.data());
        model.embed.embed_values(ds.ctx_row(cj), ej.data());
        std::vector<double> vi(ei), vj(ej);
        double fi = regressor_eval(model, ds.user_row(u), p, vi, t);
        double fj = regressor_eval(model, ds.user_row(u), p, vj, t);
        double dist = 0.0;
        for (std::size_t m = 0; m < ed; ++m) dist += (ei[m] - ej[m]) * (ei[m] - ej[m]);
        dist = std::sqrt(dist);
        double lhs = std::abs(fi - fj), rhs = rep.lipschitz_c * dist;
        if (lhs > rhs) ++rep.violations;
        rep.worst_margin = std::min(rep.worst_margin, rhs - lhs);
    }

    std::size_t n_mu = std::min(mu_sample, ds.recs.size());
    for (std::size_t k = 0; k < n_mu; ++k) {
        std::size_t i = std::size_t(rng.uniform_int(0, std::int64_t(ds.recs.size()) - 1));
        const SampleRec& r = ds.recs[i];
        model.embed.embed_values(ds.ctx_row(std::size_t(r.ctx)), ei.data());
        double f = regressor_eval(model, ds.user_row(std::size_t(r.user)), p, ei,
                                  ds.user_t[std::size_t(r.user)]);
        rep.mu_hat = std::max(rep.mu_hat, std::abs(f - detail::network_target(model, ds, r)));
    }
    return rep;
}

// ---------------------------------------------------------------------------
// k-means (k-means++ init, Lloyd, lowest-index tie-breaking)

struct KMeansResult {
    std::vector<double> centroids;  // K x dim
    std::vector<int> assignments;
    double inertia = 0.0;
    int iterations = 0;
};

inline KMeansResult kmeans(const std::vector<double>& data, std::size_t n, std::size_t dim,
                           std::size_t k, std::uint64_t seed, int max_iters = 100,
                           double tol = 1e-6) {
    if (n < k) throw std::invalid_argument("kmeans: fewer points than clusters");
    Rng rng = Rng(seed).derive("kmeans");
    auto dist2 = [&](const double* a, const double* b) {
        double s = 0.0;
        for (std::size_t m = 0; m < dim; ++m) {
            double d = a[m] - b[m];
            s += d * d;
        }
        return s;
    };

    // k-means++ seeding
    KMeansResult res;
    res.centroids.assign(k * dim, 0.0);
    std::vector<double> min_d2(n, std::numeric_limits<double>::infinity());
    std::size_t first = std::size_t(rng.uniform_int(0, std::int64_t(n) - 1));
    std::copy(data.begin() + first * dim, data.begin() + (first + 1) * dim, res.centroids.begin());
    for (std::size_t c = 1; c < k; ++c) {
        double total = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            double d = dist2(data.data() + i * dim, res.centroids.data() + (c - 1) * dim);
            min_d2[i] = std::min(min_d2[i], d);
            total += min_d2[i];
        }
        std::size_t pick = 0;
        if (total > 0.0) {
            double u = rng.uniform() * total, acc = 0.0;
            for (std::size_t i = 0; i < n; ++i) {
                acc += min_d2[i];
                pick = i;
                if (u < acc) break;
            }
        } else {
            pick = std::size_t(rng.uniform_int(0, std::int64_t(n) - 1));
        }
        std::copy(data.begin() + pick * dim, data.begin() + (pick + 1) * dim,
                  res.centroids.begin() + c * dim);
    }

    res.assignments.assign(n, 0);
    std::vector<double> next(k * dim);
    std::vector<std::size_t> counts(k);
    for (int iter = 0; iter < max_iters; ++iter) {
        res.iterations = iter + 1;
        std::fill(next.begin(), next.end(), 0.0);
        std::fill(counts.begin(), counts.end(), 0);
        res.inertia = 0.0;
        for (std::size_t i = 0; i < n; ++i) {
            const double* x = data.data() + i * dim;
            int best = 0;
            double bd = dist2(x, res.centroids.data());
            for (std::size_t c = 1; c < k; ++c) {
                double d = dist2(x, res.centroids.data() + c * dim);
                if (d < bd) {
                    bd = d;
                    best = int(c);
                }
            }
            res.assignments[i] = best;
            res.inertia += bd;
            ++counts[std::size_t(best)];
            double* nc = next.data() + std::size_t(best) * dim;
            for (std::size_t m = 0; m < dim; ++m) nc[m] += x[m];
        }
        double shift = 0.0;
        for (std::size_t c = 0; c < k; ++c) {
            if (counts[c] == 0) continue;  // empty cluster keeps its centroid
            double* nc = next.data() + c * dim;
            double* oc = res.centroids.data() + c * dim;
            for (std::size_t m = 0; m < dim; ++m) {
                double v = nc[m] / double(counts[c]);
                shift = std::max(shift, std::abs(v - oc[m]));
                oc[m] = v;
            }
        }
        if (shift < tol) break;
    }
    // final assignment against the last centroid update
    res.inertia = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double* x = data.data() + i * dim;
        int best = 0;
        double bd = dist2(x, res.centroids.data());
        for (std::size_t c = 1; c < k; ++c) {
            double d = dist2(x, res.centroids.data() + c * dim);
            if (d < bd) {
                bd = d;
                best = int(c);
            }
        }
        res.assignments[i] = best;
        res.inertia += bd;
    }
    return res;
}

// Embed every pool context with the trained embedder.
inline std::vector<double> embed_all_contexts(const GroupingModel& model, const Dataset& ds) {
    std::size_t n = ds.ctx_group.size(), ed = model.embed.out_dim();
    std::vector<double> out(n * ed);
    for (std::size_t c = 0; c < n; ++c) model.embed.embed_values(ds.ctx_row(c), out.data() + c * ed);
    return out;
}

// Fit k-means on train-split context embeddings, store centroids in the
// model; returns the context indices used for fitting.
inline std::vector<std::size_t> fit_groups(GroupingModel& model, const Dataset& ds, int k,
                                           std::uint64_t seed) {
    std::set<std::int32_t> train_ctx;
    for (const auto& r : ds.recs)
        if (ds.rec_split(r) == kTrain) train_ctx.insert(r.ctx);
    std::vector<std::size_t> ctx_ids(train_ctx.begin(), train_ctx.end());
    std::size_t ed = model.embed.out_dim();
    std::vector<double> emb(ctx_ids.size() * ed);
    for (std::size_t i = 0; i < ctx_ids.size(); ++i)
        model.embed.embed_values(ds.ctx_row(ctx_ids[i]), emb.data() + i * ed);
    KMeansResult km = kmeans(emb, ctx_ids.size(), ed, std::size_t(k), seed);
    model.K = k;
    model.centroids = std::move(km.centroids);
    model.trained = true;
    return ctx_ids;
}

// Nearest-centroid group per pool context.
inline std::vector<int> assign_groups(const GroupingModel& model, const Dataset& ds) {
    if (!model.trained) throw std::runtime_error("assign_groups: model has no centroids");
    std::size_t ed = model.embed.out_dim();
    std::vector<int> g(ds.ctx_group.size());
    std::vector<double> emb(ed);
    for (std::size_t c = 0; c < ds.ctx_group.size(); ++c) {
        model.embed.embed_values(ds.ctx_row(c), emb.data());
        int best = 0;
        double bd = std::numeric_limits<double>::infinity();
        for (int cl = 0; cl < model.K; ++cl) {
            const double* cent = model.centroids.data() + std::size_t(cl) * ed;
            double d = 0.0;
            for (std::size_t m = 0; m < ed; ++m) {
                double x = emb[m] - cent[m];
                d += x * x;
            }
            if (d < bd) {
                bd = d;
                best = cl;
            }
        }
        g[c] = best;
    }
    return g;
}

// Fraction of points whose cluster's majority latent group matches theirs.
inline double purity(const std::vector<int>& assignments, const std::vector<int>& latent, int k,
                     int k_true) {
    std::vector<std::vector<std::size_t>> counts(std::size_t(k),
                                                 std::vector<std::size_t>(std::size_t(k_true), 0));
    for (std::size_t i = 0; i < assignments.size(); ++i)
        ++counts[std::size_t(assignments[i])][std::size_t(latent[i])];
    std::size_t hit = 0;
    for (int c = 0; c < k; ++c)
        hit += *std::max_element(counts[std::size_t(c)].begin(), counts[std::size_t(c)].end());
    return double(hit) / double(assignments.size());
}

// ---------------------------------------------------------------------------
// aggregation

struct GroupedRec {
    std::int32_t user = 0;
    int g = 0;
    std::int8_t t = 0, split = kTrain;
    double y_bar = 0.0, y0_bar = 0.0, y1_bar = 0.0;
    int n_merged = 1;
};

struct GroupedDataset {
    int K = 0;
    std::vector<GroupedRec> recs;  // ordered by (user, g)
};

// Merge samples sharing (user, group, treatment) into mean-response
// records. Treatment and split are per-user, so the key reduces to
// (user, g).
inline GroupedDataset aggregate(const Dataset& ds, const std::vector<int>& ctx_to_group, int k) {
    GroupedDataset out;
    out.K = k;
    std::size_t i = 0;
    while (i < ds.recs.size()) {
        std::int32_t user = ds.recs[i].user;
        std::map<int, GroupedRec> per_group;
        for (; i < ds.recs.size() && ds.recs[i].user == user; ++i) {
            const SampleRec& r = ds.recs[i];
            int g = ctx_to_group[std::size_t(r.ctx)];
            auto [it, inserted] = per_group.try_emplace(g);
            GroupedRec& gr = it->second;
            if (inserted) {
                gr.user = user;
                gr.g = g;
                gr.t = ds.user_t[std::size_t(user)];
                gr.split = ds.user_split[std::size_t(user)];
                gr.n_merged = 0;
                gr.y_bar = gr.y0_bar = gr.y1_bar = 0.0;
            }
            gr.y_bar += r.y;
            gr.y0_bar += r.y0;
            gr.y1_bar += r.y1;
            ++gr.n_merged;
        }
        for (auto& [g, gr] : per_group) {
            gr.y_bar /= double(gr.n_merged);
            gr.y0_bar /= double(gr.n_merged);
            gr.y1_bar /= double(gr.n_merged);
            out.recs.push_back(gr);
        }
    }
    return out;
}

// Re-aggregating an already grouped dataset merges nothing new.
inline GroupedDataset aggregate_grouped(const GroupedDataset& gds) {
    GroupedDataset out;
    out.K = gds.K;
    std::map<std::tuple<std::int32_t, int, std::int8_t>, GroupedRec> merged;
    for (const auto& r : gds.recs) {
        auto key = std::make_tuple(r.user, r.g, r.t);
        auto [it, inserted] = merged.try_emplace(key, r);
        if (!inserted) {
            GroupedRec& gr = it->second;
            double tot = double(gr.n_merged + r.n_merged);
            gr.y_bar = (gr.y_bar * gr.n_merged + r.y_bar * r.n_merged) / tot;
            gr.y0_bar = (gr.y0_bar * gr.n_merged + r.y0_bar * r.n_merged) / tot;
            gr.y1_bar = (gr.y1_bar * gr.n_merged + r.y1_bar * r.n_merged) / tot;
            gr.n_merged = int(tot);
        }
    }
    for (auto& [key, gr] : merged) out.recs.push_back(gr);
    return out;
}

// ---------------------------------------------------------------------------
// alignment (fraction of treated users whose context-group set equals the
// group set of their nearest control user under Euclidean x_u distance)

inline double alignment(const Dataset& ds, const GroupedDataset& gds) {
    std::vector<std::set<int>> groups(ds.cfg.n_users);
    for (const auto& r : gds.recs) groups[std::size_t(r.user)].insert(r.g);
    std::vector<std::size_t> treated, control;
    for (std::size_t u = 0; u < ds.cfg.n_users; ++u)
        (ds.user_t[u] ? treated : control).push_back(u);
    if (treated.empty() || control.empty())
        throw std::invalid_argument("alignment: an arm is empty");
    std::size_t p = ds.p(), matched = 0;
    for (std::size_t ut : treated) {
        const double* xt = ds.user_row(ut);
        std::size_t best = control[0];
        double bd = std::numeric_limits<double>::infinity();
        for (std::size_t uc : control) {
            const double* xc = ds.user_row(uc);
            double d = 0.0;
            for (std::size_t m = 0; m < p; ++m) {
                double v = xt[m] - xc[m];
                d += v * v;
            }
            if (d < bd) {
                bd = d;
                best = uc;
            }
        }
        if (groups[ut] == groups[best]) ++matched;
    }
    return double(matched) / double(treated.size());
}

}  // namespace uplift
