#pragma once

// Uplift evaluation metrics. Conventions used throughout (shared with the
// brute-force oracles in the test suite):
//   - records sort by predicted uplift descending, ties by stable_index
//   - AUUC: V(k) = (mean y treated - mean y control) * k over the top-k,
//     0 when either arm is empty there; AUUC = sum_k V(k) / n^2
//   - QINI: Q(k) = S_t(k) - S_c(k) * n_t(k)/n_c(k), 0 when n_c(k)=0;
//     QINI = sum_k (Q(k) - Q(n)*k/n) / n^2
//   - KENDALL: tau-a over 20 per-bin (mean pred, observed uplift) pairs,
//     ties contribute 0
// The divisions by n^2 are this library's normalization; only orderings
// between models are comparable, not absolute table values elsewhere.

#include <algorithm>
#include <cstdint>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

namespace uplift {

struct ScoredRecord {
    double pred = 0.0;
    std::int8_t t = 0;
    double y = 0.0;
    std::optional<double> y0, y1;
    std::size_t stable_index = 0;
};

inline std::vector<std::size_t> rank_order(const std::vector<ScoredRecord>& recs) {
    std::vector<std::size_t> order(recs.size());
    for (std::size_t i = 0; i < recs.size(); ++i) order[i] = i;
    std::sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        if (recs[a].pred != recs[b].pred) return recs[a].pred > recs[b].pred;
        return recs[a].stable_index < recs[b].stable_index;
    });
    return order;
}

inline double auuc(const std::vector<ScoredRecord>& recs) {
    if (recs.empty()) throw std::invalid_argument("auuc: empty input");
    auto order = rank_order(recs);
    std::size_t n = recs.size();
    double st = 0.0, sc = 0.0, acc = 0.0;
    std::size_t nt = 0, nc = 0;
    for (std::size_t k = 1; k <= n; ++k) {
        const ScoredRecord& r = recs[order[k - 1]];
        if (r.t) {
            st += r.y;
            ++nt;
        } else {
            sc += r.y;
            ++nc;
        }
        if (nt > 0 && nc > 0) acc += (st / double(nt) - sc / double(nc)) * double(k);
    }
    return acc / (double(n) * double(n));
}

inline double qini(const std::vector<ScoredRecord>& recs) {
    if (recs.empty()) throw std::invalid_argument("qini: empty input");
    auto order = rank_order(recs);
    std::size_t n = recs.size();
    std::vector<double> q(n, 0.0);
    double st = 0.0, sc = 0.0;
    std::size_t nt = 0, nc = 0;
    for (std::size_t k = 1; k <= n; ++k) {
        const ScoredRecord& r = recs[order[k - 1]];
        if (r.t) {
            st += r.y;
            ++nt;
        } else {
            sc += r.y;
            ++nc;
        }
        q[k - 1] = nc > 0 ? st - sc * double(nt) / double(nc) : 0.0;
    }
    double qn = q[n - 1], acc = 0.0;
    for (std::size_t k = 1; k <= n; ++k) acc += q[k - 1] - qn * double(k) / double(n);
    return acc / (double(n) * double(n));
}

// Kendall tau-a between per-bin mean predicted uplift and per-bin observed
// uplift. Bin sizes are n/n_bins with the remainder spread over the
// leading bins. A bin missing one arm is a metric error.
inline double kendall_bins(const std::vector<ScoredRecord>& recs, std::size_t n_bins = 20) {
    if (recs.size() < n_bins) throw std::invalid_argument("kendall_bins: fewer records than bins");
    auto order = rank_order(recs);
    std::size_t n = recs.size(), base = n / n_bins, rem = n % n_bins, pos = 0;
    std::vector<double> mp(n_bins), mu(n_bins);
    for (std::size_t b = 0; b < n_bins; ++b) {
        std::size_t len = base + (b < rem ? 1 : 0);
        double sp = 0.0, syt = 0.0, syc = 0.0;
        std::size_t nt = 0, nc = 0;
        for (std::size_t i = 0; i < len; ++i) {
            const ScoredRecord& r = recs[order[pos++]];
            sp += r.pred;
            if (r.t) {
                syt += r.y;
                ++nt;
            } else {
                syc += r.y;
                ++nc;
            }
        }
        if (nt == 0 || nc == 0)
            throw std::runtime_error("kendall_bins: bin " + std::to_string(b) + " has an empty arm");
        mp[b] = sp / double(len);
        mu[b] = syt / double(nt) - syc / double(nc);
    }
    double s = 0.0;
    for (std::size_t i = 0; i < n_bins; ++i)
        for (std::size_t j = i + 1; j < n_bins; ++j) {
            double a = mp[i] - mp[j], b = mu[i] - mu[j];
            if (a != 0.0 && b != 0.0) s += (a > 0) == (b > 0) ? 1.0 : -1.0;
        }
    return s / (double(n_bins) * double(n_bins - 1) / 2.0);
}

inline void require_ground_truth(const std::vector<ScoredRecord>& recs, const char* op) {
    for (const auto& r : recs)
        if (!r.y0 || !r.y1) throw std::invalid_argument(std::string(op) + ": missing ground truth");
}

inline double epsilon_ate(const std::vector<ScoredRecord>& recs) {
    if (recs.empty()) throw std::invalid_argument("epsilon_ate: empty input");
    require_ground_truth(recs, "epsilon_ate");
    double true_sum = 0.0, pred_sum = 0.0;
    for (const auto& r : recs) {
        true_sum += *r.y1 - *r.y0;
        pred_sum += r.pred;
    }
    return std::abs(true_sum - pred_sum) / double(recs.size());
}

inline double epsilon_pehe(const std::vector<ScoredRecord>& recs) {
    if (recs.empty()) throw std::invalid_argument("epsilon_pehe: empty input");
    require_ground_truth(recs, "epsilon_pehe");
    double acc = 0.0;
    for (const auto& r : recs) {
        double d = (*r.y1 - *r.y0) - r.pred;
        acc += d * d;
    }
    return acc / double(recs.size());
}

struct CurvePoint {
    double x = 0.0;  // k or s%
    double value = 0.0;
};

// Gain(s) = (sum of y1 over the top s% + sum of y0 over the rest - sum y0)
//           / sum y0 * 100, top s% counted as round(n*s/100).
inline std::vector<CurvePoint> gain_curve(const std::vector<ScoredRecord>& recs, int step_pct = 5) {
    if (recs.empty()) throw std::invalid_argument("gain_curve: empty input");
    require_ground_truth(recs, "gain_curve");
    double sum_y0 = 0.0;
    for (const auto& r : recs) sum_y0 += *r.y0;
    if (sum_y0 == 0.0) throw std::invalid_argument("gain_curve: sum of y0 is zero");
    auto order = rank_order(recs);
    std::size_t n = recs.size();
    std::vector<double> prefix_delta(n + 1, 0.0);  // y1 - y0 of top-k
    for (std::size_t k = 0; k < n; ++k) {
        const ScoredRecord& r = recs[order[k]];
        prefix_delta[k + 1] = prefix_delta[k] + (*r.y1 - *r.y0);
    }
    std::vector<CurvePoint> out;
    for (int s = 0; s <= 100; s += step_pct) {
        std::size_t k = std::size_t(std::llround(double(n) * double(s) / 100.0));
        out.push_back({double(s), prefix_delta[k] / sum_y0 * 100.0});
    }
    return out;
}

// Uplift and Qini cumulative curves as (k, value) points, for CSV export.
inline std::vector<CurvePoint> uplift_curve(const std::vector<ScoredRecord>& recs) {
    auto order = rank_order(recs);
    std::vector<CurvePoint> out;
    double st = 0.0, sc = 0.0;
    std::size_t nt = 0, nc = 0;
    for (std::size_t k = 1; k <= recs.size(); ++k) {
        const ScoredRecord& r = recs[order[k - 1]];
        if (r.t) {
            st += r.y;
            ++nt;
        } else {
            sc += r.y;
            ++nc;
        }
        double v = (nt > 0 && nc > 0) ? (st / double(nt) - sc / double(nc)) * double(k) : 0.0;
        out.push_back({double(k), v});
    }
    return out;
}

inline std::vector<CurvePoint> qini_curve(const std::vector<ScoredRecord>& recs) {
    auto order = rank_order(recs);
    std::vector<CurvePoint> out;
    double st = 0.0, sc = 0.0;
    std::size_t nt = 0, nc = 0;
    for (std::size_t k = 1; k <= recs.size(); ++k) {
        const ScoredRecord& r = recs[order[k - 1]];
        if (r.t) {
            st += r.y;
            ++nt;
        } else {
            sc += r.y;
            ++nc;
        }
        out.push_back({double(k), nc > 0 ? st - sc * double(nt) / double(nc) : 0.0});
    }
    return out;
}

}  // namespace uplift
