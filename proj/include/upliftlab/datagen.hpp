#pragma once

// Synthetic real-time-marketing RCT generator. Users carry binary +
// continuous features; a large context pool carries binary, continuous
// and categorical features plus a group-indicator categorical whose
// effect on the response flows through a group-indexed shift term.
// Ground-truth potential responses y0/y1 are kept alongside the observed
// response.

#include <algorithm>
#include <cstdint>
#include <numeric>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "io.hpp"
#include "rng.hpp"

namespace uplift {

struct GenConfig {
    std::size_t n_users = 5000;
    double pool_multiplier = 10.0;  // pool size = n_users * pool_multiplier
    int ctx_min = 60, ctx_max = 130;
    int p_b = 34, p_c = 66;           // user binary / continuous counts
    int q_b = 34, q_c = 66, q_m = 3;  // context binary / continuous / categorical counts
    int k_true = 6;
    std::vector<double> group_probs = {0.2, 0.16, 0.16, 0.16, 0.16, 0.16};
    std::uint64_t seed = 1;
    // The group indicator is appended to the observable context features;
    // set false to hide it (groups then carry no observable signal).
    bool group_observable = true;
    bool shared_z = false;  // draw z1 from the same variate as z0
    // Test knobs: scale the noise terms and the group shift; the same
    // variates are consumed either way so seeds stay comparable.
    double noise_scale = 1.0, shift_scale = 1.0;

    int p() const { return p_b + p_c; }
    int q_base() const { return q_b + q_c + q_m; }
    int q_obs() const { return q_base() + (group_observable ? 1 : 0); }
    std::size_t pool_size() const { return std::size_t(double(n_users) * pool_multiplier + 0.5); }

    void validate() const {
        if (n_users == 0 || p_b < 0 || p_c < 0 || q_b < 0 || q_c < 0 || q_m < 0)
            throw std::invalid_argument("GenConfig: counts must be non-negative");
        if (ctx_min <= 0 || ctx_min > ctx_max) throw std::invalid_argument("GenConfig: need 0 < ctx_min <= ctx_max");
        if (k_true < 1 || int(group_probs.size()) != k_true)
            throw std::invalid_argument("GenConfig: group_probs size must equal k_true");
        double s = std::accumulate(group_probs.begin(), group_probs.end(), 0.0);
        if (std::abs(s - 1.0) > 1e-9) throw std::invalid_argument("GenConfig: group_probs must sum to 1");
        if (std::size_t(ctx_max) > pool_size()) throw std::invalid_argument("GenConfig: pool smaller than ctx_max");
    }
};

// Group-indexed shift distributions (mean, stddev); cycled when k_true > 6.
inline std::pair<double, double> group_shift_dist(int g) {
    static const std::pair<double, double> dists[6] = {
        {0.0, 1.0}, {2.0, 0.5}, {-1.0, 2.0}, {3.0, 1.5}, {-2.0, 0.8}, {1.0, 2.0}};
    return dists[g % 6];
}

struct SampleRec {
    std::int32_t user = 0, ctx = 0;
    double y = 0.0, y0 = 0.0, y1 = 0.0;
};

enum Split : std::int8_t { kTrain = 0, kVal = 1, kTest = 2 };

struct Dataset {
    GenConfig cfg;
    std::vector<double> user_x;       // n_users x p
    std::vector<double> ctx_x;        // pool x q_obs
    std::vector<int> ctx_group;       // latent ground truth per context
    std::vector<std::int8_t> user_t;  // shared by all of a user's samples
    std::vector<std::int8_t> user_split;
    std::vector<SampleRec> recs;  // sorted by (user, ctx)

    std::size_t p() const { return std::size_t(cfg.p()); }
    std::size_t q() const { return std::size_t(cfg.q_obs()); }
    const double* user_row(std::size_t u) const { return user_x.data() + u * p(); }
    const double* ctx_row(std::size_t c) const { return ctx_x.data() + c * q(); }
    std::int8_t rec_split(const SampleRec& r) const { return user_split[std::size_t(r.user)]; }
};

// First p_b columns ~ Bernoulli(0.5), remaining p_c ~ N(0,1).
inline std::vector<double> generate_users(const GenConfig& cfg) {
    cfg.validate();
    Rng root(cfg.seed);
    std::vector<double> x(cfg.n_users * std::size_t(cfg.p()));
    for (std::size_t u = 0; u < cfg.n_users; ++u) {
        Rng r = root.derive("user", u);
        double* row = x.data() + u * std::size_t(cfg.p());
        for (int j = 0; j < cfg.p_b; ++j) row[j] = r.bernoulli(0.5) ? 1.0 : 0.0;
        for (int j = 0; j < cfg.p_c; ++j) row[cfg.p_b + j] = r.normal();
    }
    return x;
}

// Pool features: binary, continuous, categorical(4, uniform), plus the
// group indicator drawn from group_probs.
inline void generate_context_pool(const GenConfig& cfg, std::vector<double>& ctx_x,
                                  std::vector<int>& ctx_group) {
    cfg.validate();
    Rng root(cfg.seed);
    std::size_t pool = cfg.pool_size(), q = std::size_t(cfg.q_obs());
    ctx_x.assign(pool * q, 0.0);
    ctx_group.assign(pool, 0);
    for (std::size_t c = 0; c < pool; ++c) {
        Rng r = root.derive("ctx", c);
        double* row = ctx_x.data() + c * q;
        int off = 0;
        for (int j = 0; j < cfg.q_b; ++j) row[off++] = r.bernoulli(0.5) ? 1.0 : 0.0;
        for (int j = 0; j < cfg.q_c; ++j) row[off++] = r.normal();
        for (int j = 0; j < cfg.q_m; ++j) row[off++] = double(r.uniform_int(0, 3));
        int g = r.categorical(cfg.group_probs);
        ctx_group[c] = g;
        if (cfg.group_observable) row[off++] = double(g);
    }
}

// Per user: a uniform-random count in [ctx_min, ctx_max] of distinct
// contexts, sampled without replacement via partial Fisher-Yates.
inline std::vector<std::pair<std::int32_t, std::int32_t>> assign_contexts(const GenConfig& cfg) {
    cfg.validate();
    Rng root(cfg.seed);
    std::size_t pool = cfg.pool_size();
    std::vector<std::pair<std::int32_t, std::int32_t>> pairs;
    pairs.reserve(cfg.n_users * std::size_t((cfg.ctx_min + cfg.ctx_max) / 2 + 1));
    std::vector<std::int32_t> idx(pool);
    for (std::size_t u = 0; u < cfg.n_users; ++u) {
        Rng r = root.derive("assign", u);
        int count = int(r.uniform_int(cfg.ctx_min, cfg.ctx_max));
        std::iota(idx.begin(), idx.end(), 0);
        std::vector<std::int32_t> chosen(static_cast<std::size_t>(count));
        for (int i = 0; i < count; ++i) {
            std::size_t j = std::size_t(r.uniform_int(std::int64_t(i), std::int64_t(pool) - 1));
            std::swap(idx[std::size_t(i)], idx[j]);
            chosen[std::size_t(i)] = idx[std::size_t(i)];
        }
        std::sort(chosen.begin(), chosen.end());
        for (auto c : chosen) pairs.emplace_back(std::int32_t(u), c);
    }
    return pairs;
}

// Potential responses per the four 0.5-weighted terms (0.2 for the uplift
// increment), with the group-indexed shift z and unit noise.
inline Dataset generate_responses(const GenConfig& cfg, std::vector<double> user_x,
                                  std::vector<double> ctx_x, std::vector<int> ctx_group,
                                  const std::vector<std::pair<std::int32_t, std::int32_t>>& pairs) {
    cfg.validate();
    Dataset ds;
    ds.cfg = cfg;
    ds.user_x = std::move(user_x);
    ds.ctx_x = std::move(ctx_x);
    ds.ctx_group = std::move(ctx_group);
    Rng root(cfg.seed);

    ds.user_t.resize(cfg.n_users);
    for (std::size_t u = 0; u < cfg.n_users; ++u)
        ds.user_t[u] = root.derive("treat", u).bernoulli(0.5) ? 1 : 0;

    std::size_t p = ds.p();
    std::vector<double> user_sum(cfg.n_users, 0.0);
    for (std::size_t u = 0; u < cfg.n_users; ++u) {
        const double* row = ds.user_row(u);
        user_sum[u] = std::accumulate(row, row + p, 0.0);
    }
    int qbc = cfg.q_b + cfg.q_c;
    std::vector<double> ctx_sum(ds.ctx_group.size(), 0.0), cat_sum(ds.ctx_group.size(), 0.0);
    for (std::size_t c = 0; c < ds.ctx_group.size(); ++c) {
        const double* row = ds.ctx_row(c);
        ctx_sum[c] = std::accumulate(row, row + qbc, 0.0);
        cat_sum[c] = std::accumulate(row + qbc, row + qbc + cfg.q_m, 0.0);
    }

    ds.recs.reserve(pairs.size());
    std::int32_t prev_user = -1;
    Rng resp(0);
    for (const auto& [u, c] : pairs) {
        if (u != prev_user) {
            resp = root.derive("resp", std::uint64_t(u));
            prev_user = u;
        }
        int g = ds.ctx_group[std::size_t(c)];
        auto [zm, zs] = group_shift_dist(g);
        double z0 = cfg.shift_scale * resp.normal(zm, zs);
        double z1 = cfg.shared_z ? z0 : cfg.shift_scale * resp.normal(zm, zs);
        double eps0 = cfg.noise_scale * resp.normal(), eps1 = cfg.noise_scale * resp.normal();
        double su = user_sum[std::size_t(u)], sc = ctx_sum[std::size_t(c)], sv = cat_sum[std::size_t(c)];
        double base = su + sc + su * sc + sv;
        double y0 = 0.5 * base + z0 + eps0;
        double y1 = y0 + 0.2 * base + z1 + eps1;
        SampleRec r;
        r.user = u;
        r.ctx = c;
        r.y0 = y0;
        r.y1 = y1;
        r.y = ds.user_t[std::size_t(u)] ? y1 : y0;
        ds.recs.push_back(r);
    }
    return ds;
}

// Shuffle users, then tag floor(0.7 n) train, floor(0.2 n) val, rest test.
inline void split_dataset(Dataset& ds, std::uint64_t seed) {
    std::size_t n = ds.cfg.n_users;
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng r = Rng(seed).derive("split");
    for (std::size_t i = n; i > 1; --i) {
        std::size_t j = std::size_t(r.uniform_int(0, std::int64_t(i) - 1));
        std::swap(order[i - 1], order[j]);
    }
    std::size_t n_train = std::size_t(0.7 * double(n));
    std::size_t n_val = std::size_t(0.2 * double(n));
    ds.user_split.assign(n, kTest);
    for (std::size_t i = 0; i < n; ++i)
        ds.user_split[order[i]] = i < n_train ? kTrain : (i < n_train + n_val ? kVal : kTest);
}

inline Dataset generate_dataset(const GenConfig& cfg) {
    auto users = generate_users(cfg);
    std::vector<double> ctx_x;
    std::vector<int> groups;
    generate_context_pool(cfg, ctx_x, groups);
    auto pairs = assign_contexts(cfg);
    Dataset ds = generate_responses(cfg, std::move(users), std::move(ctx_x), std::move(groups), pairs);
    split_dataset(ds, cfg.seed);
    return ds;
}

// ---------------------------------------------------------------------------
// persistence: one CSV per split + a JSON schema sidecar

inline nlohmann::json schema_json(const GenConfig& cfg) {
    return nlohmann::json{{"p_b", cfg.p_b},
                          {"p_c", cfg.p_c},
                          {"q_b", cfg.q_b},
                          {"q_c", cfg.q_c},
                          {"q_m", cfg.q_m},
                          {"k_true", cfg.k_true},
                          {"seed", cfg.seed},
                          {"n_users", cfg.n_users},
                          {"pool_multiplier", cfg.pool_multiplier},
                          {"ctx_min", cfg.ctx_min},
                          {"ctx_max", cfg.ctx_max},
                          {"group_probs", cfg.group_probs},
                          {"group_observable", cfg.group_observable},
                          {"shared_z", cfg.shared_z},
                          {"q_obs", cfg.q_obs()}};
}

inline GenConfig config_from_schema(const nlohmann::json& j) {
    GenConfig cfg;
    cfg.p_b = j.at("p_b");
    cfg.p_c = j.at("p_c");
    cfg.q_b = j.at("q_b");
    cfg.q_c = j.at("q_c");
    cfg.q_m = j.at("q_m");
    cfg.k_true = j.at("k_true");
    cfg.seed = j.at("seed");
    cfg.n_users = j.at("n_users");
    if (j.contains("pool_multiplier")) cfg.pool_multiplier = j.at("pool_multiplier");
    if (j.contains("ctx_min")) cfg.ctx_min = j.at("ctx_min");
    if (j.contains("ctx_max")) cfg.ctx_max = j.at("ctx_max");
    if (j.contains("group_probs")) cfg.group_probs = j.at("group_probs").get<std::vector<double>>();
    if (j.contains("group_observable")) cfg.group_observable = j.at("group_observable");
    if (j.contains("shared_z")) cfg.shared_z = j.at("shared_z");
    return cfg;
}

inline const char* split_name(std::int8_t s) {
    return s == kTrain ? "train" : s == kVal ? "val" : "test";
}

inline void save_dataset(const Dataset& ds, const std::string& dir) {
    std::string header = "user_id,ctx_id,split,t,y,y0,y1,latent_group";
    for (std::size_t j = 0; j < ds.p(); ++j) header += ",xu_" + std::to_string(j);
    for (std::size_t j = 0; j < ds.q(); ++j) header += ",xc_" + std::to_string(j);
    header += "\n";
    std::string out[3] = {header, header, header};
    for (const auto& r : ds.recs) {
        std::int8_t s = ds.rec_split(r);
        std::string& dst = out[s];
        dst += std::to_string(r.user) + "," + std::to_string(r.ctx) + "," + split_name(s) + "," +
               std::to_string(int(ds.user_t[std::size_t(r.user)])) + "," + fmt_double(r.y) + "," +
               fmt_double(r.y0) + "," + fmt_double(r.y1) + "," +
               std::to_string(ds.ctx_group[std::size_t(r.ctx)]);
        const double* xu = ds.user_row(std::size_t(r.user));
        for (std::size_t j = 0; j < ds.p(); ++j) dst += "," + fmt_double(xu[j]);
        const double* xc = ds.ctx_row(std::size_t(r.ctx));
        for (std::size_t j = 0; j < ds.q(); ++j) dst += "," + fmt_double(xc[j]);
        dst += "\n";
    }
    write_file(dir + "/train.csv", out[0]);
    write_file(dir + "/val.csv", out[1]);
    write_file(dir + "/test.csv", out[2]);
    write_file(dir + "/schema.json", schema_json(ds.cfg).dump(2) + "\n");
}

inline Dataset load_dataset(const std::string& dir) {
    GenConfig cfg = config_from_schema(nlohmann::json::parse(read_file(dir + "/schema.json")));
    Dataset ds;
    ds.cfg = cfg;
    std::size_t p = ds.p(), q = ds.q();
    std::size_t max_user = 0, max_ctx = 0;
    struct Row {
        SampleRec rec;
        std::int8_t t, split;
        int group;
        std::vector<double> xu, xc;
    };
    std::vector<Row> rows;
    for (const char* name : {"train", "val", "test"}) {
        std::ifstream f(dir + "/" + name + ".csv");
        if (!f) throw std::runtime_error("missing split csv: " + std::string(name));
        std::string line;
        std::getline(f, line);  // header
        while (std::getline(f, line)) {
            if (line.empty()) continue;
            auto cells = split_csv_line(line);
            if (cells.size() != 8 + p + q) throw std::runtime_error("bad csv row width");
            Row row;
            row.rec.user = std::stoi(cells[0]);
            row.rec.ctx = std::stoi(cells[1]);
            row.split = cells[2] == "train" ? kTrain : cells[2] == "val" ? kVal : kTest;
            row.t = std::int8_t(std::stoi(cells[3]));
            row.rec.y = std::stod(cells[4]);
            row.rec.y0 = std::stod(cells[5]);
            row.rec.y1 = std::stod(cells[6]);
            row.group = std::stoi(cells[7]);
            row.xu.resize(p);
            row.xc.resize(q);
            for (std::size_t j = 0; j < p; ++j) row.xu[j] = std::stod(cells[8 + j]);
            for (std::size_t j = 0; j < q; ++j) row.xc[j] = std::stod(cells[8 + p + j]);
            max_user = std::max(max_user, std::size_t(row.rec.user));
            max_ctx = std::max(max_ctx, std::size_t(row.rec.ctx));
            rows.push_back(std::move(row));
        }
    }
    ds.user_x.assign((max_user + 1) * p, 0.0);
    ds.ctx_x.assign((max_ctx + 1) * q, 0.0);
    ds.ctx_group.assign(max_ctx + 1, 0);
    ds.user_t.assign(max_user + 1, 0);
    ds.user_split.assign(max_user + 1, kTrain);
    for (auto& row : rows) {
        std::copy(row.xu.begin(), row.xu.end(), ds.user_x.begin() + std::size_t(row.rec.user) * p);
        std::copy(row.xc.begin(), row.xc.end(), ds.ctx_x.begin() + std::size_t(row.rec.ctx) * q);
        ds.ctx_group[std::size_t(row.rec.ctx)] = row.group;
        ds.user_t[std::size_t(row.rec.user)] = row.t;
        ds.user_split[std::size_t(row.rec.user)] = row.split;
        ds.recs.push_back(row.rec);
    }
    std::sort(ds.recs.begin(), ds.recs.end(), [](const SampleRec& a, const SampleRec& b) {
        return a.user != b.user ? a.user < b.user : a.ctx < b.ctx;
    });
    ds.cfg.n_users = max_user + 1;
    return ds;
}

}  // namespace uplift
