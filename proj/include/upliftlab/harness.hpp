#pragma once

// Experiment harness: config parsing, checkpoint serialization, the
// end-to-end pipeline (generate, group, train, evaluate), seeded random
// hyperparameter search, and seed aggregation into reports.

#include <chrono>
#include <cmath>
#include <cstdint>
#include <cstdlib>
#include <filesystem>
#include <limits>
#include <map>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "upliftlab/datagen.hpp"
#include "upliftlab/grouping.hpp"
#include "upliftlab/io.hpp"
#include "upliftlab/metrics.hpp"
#include "upliftlab/models.hpp"

namespace uplift {

using nlohmann::json;

// Stage-tagged failure; exit_code follows the CLI contract (2 config,
// 3 training, 4 evaluation).
struct StageError : std::runtime_error {
    int exit_code;
    StageError(int code, const std::string& stage, const std::string& what)
        : std::runtime_error(stage + ": " + what), exit_code(code) {}
};

inline std::optional<std::uint64_t> env_seed_override() {
    const char* v = std::getenv("UPLIFTLAB_SEED");
    if (!v || !*v) return std::nullopt;
    char* end = nullptr;
    unsigned long long parsed = std::strtoull(v, &end, 10);
    if (end == v || *end != '\0')
        throw StageError(2, "config", "UPLIFTLAB_SEED is not an integer: " + std::string(v));
    return std::uint64_t(parsed);
}

// ---------------------------------------------------------------------------
// Checkpoints: a single JSON document holding a manifest (hyperparameters,
// seed) and named tensors with shapes.

inline json checkpoint_json(const json& manifest,
                            const std::vector<std::pair<std::string, Var>>& tensors) {
    json out;
    out["format"] = "upliftlab-checkpoint-v1";
    out["manifest"] = manifest;
    json arr = json::array();
    for (const auto& [name, v] : tensors) {
        json t;
        t["name"] = name;
        t["rows"] = v->rows;
        t["cols"] = v->cols;
        t["data"] = v->data;
        arr.push_back(std::move(t));
    }
    out["tensors"] = std::move(arr);
    return out;
}

inline void save_checkpoint(const std::string& path, const json& manifest,
                            const std::vector<std::pair<std::string, Var>>& tensors) {
    write_file(path, checkpoint_json(manifest, tensors).dump(2) + "\n");
}

inline json load_checkpoint(const std::string& path) {
    json ckpt = json::parse(read_file(path));
    if (ckpt.value("format", "") != "upliftlab-checkpoint-v1")
        throw StageError(2, "checkpoint", "unrecognised format in " + path);
    return ckpt;
}

// Copy checkpoint tensors into an existing model's parameters by name.
inline void restore_tensors(const json& ckpt,
                            const std::vector<std::pair<std::string, Var>>& tensors) {
    std::map<std::string, const json*> by_name;
    for (const auto& t : ckpt.at("tensors")) by_name[t.at("name").get<std::string>()] = &t;
    for (const auto& [name, v] : tensors) {
        auto it = by_name.find(name);
        if (it == by_name.end())
            throw StageError(2, "checkpoint", "missing tensor " + name);
        const json& t = *it->second;
        if (t.at("rows").get<std::size_t>() != v->rows ||
            t.at("cols").get<std::size_t>() != v->cols)
            throw StageError(2, "checkpoint", "shape mismatch for tensor " + name);
        v->data = t.at("data").get<std::vector<double>>();
    }
}

// ---------------------------------------------------------------------------
// Experiment configuration

struct Ablations {
    bool rcg = true, uci = true, tfi = true;
};

struct SearchRange {
    double lo = 0.0, hi = 0.0;
    bool log_scale = false;
};

struct SearchConfig {
    int n_trials = 8;
    std::uint64_t seed = 7;
    std::map<std::string, SearchRange> ranges = {
        {"lr", {1e-4, 1e-2, true}},
        {"beta", {0.1, 1.0, false}},
        {"gamma", {1e-4, 1e-2, true}},
    };
};

struct ExperimentConfig {
    GenConfig data;
    std::string data_path;  // non-empty: load instead of generating
    int k_groups = 6;
    RegressorHyper grouping;
    std::string model_kind = "umlc";  // or a baseline name
    UpliftConfig model;
    BaselineConfig baseline;
    SearchConfig search;
    std::vector<std::uint64_t> seeds = {1, 2, 3};
    Ablations ablations;

    void validate() const {
        if (seeds.empty()) throw StageError(2, "config", "seeds must be non-empty");
        if (ablations.rcg && k_groups < 2)
            throw StageError(2, "config", "k_groups must be >= 2 when grouping is enabled");
        if (model_kind != "umlc") baseline_from_name(model_kind);
    }
};

inline GenConfig gen_config_from_json(const json& j) {
    GenConfig c;
    c.n_users = j.value("n_users", c.n_users);
    c.pool_multiplier = j.value("pool_multiplier", c.pool_multiplier);
    c.ctx_min = j.value("ctx_min", c.ctx_min);
    c.ctx_max = j.value("ctx_max", c.ctx_max);
    c.p_b = j.value("p_b", c.p_b);
    c.p_c = j.value("p_c", c.p_c);
    c.q_b = j.value("q_b", c.q_b);
    c.q_c = j.value("q_c", c.q_c);
    c.q_m = j.value("q_m", c.q_m);
    c.k_true = j.value("k_true", c.k_true);
    c.group_probs = j.value("group_probs", c.group_probs);
    c.seed = j.value("seed", c.seed);
    c.group_observable = j.value("group_observable", c.group_observable);
    c.shared_z = j.value("shared_z", c.shared_z);
    c.validate();
    return c;
}

inline json gen_config_to_json(const GenConfig& c) { return schema_json(c); }

inline RegressorHyper regressor_hyper_from_json(const json& j) {
    RegressorHyper h;
    h.widths = j.value("widths", h.widths);
    h.embed_dim = j.value("embed_dim", h.embed_dim);
    h.lr = j.value("lr", h.lr);
    h.alpha = j.value("alpha", h.alpha);
    h.max_epochs = j.value("max_epochs", h.max_epochs);
    h.patience = j.value("patience", h.patience);
    h.batch_size = j.value("batch_size", h.batch_size);
    h.max_train_samples = j.value("max_train_samples", h.max_train_samples);
    return h;
}

inline json regressor_hyper_to_json(const RegressorHyper& h) {
    return json{{"widths", h.widths},
                {"embed_dim", h.embed_dim},
                {"lr", h.lr},
                {"alpha", h.alpha},
                {"max_epochs", h.max_epochs},
                {"patience", h.patience},
                {"batch_size", h.batch_size},
                {"max_train_samples", h.max_train_samples}};
}

inline UpliftConfig uplift_config_from_json(const json& j) {
    UpliftConfig c;
    c.d = j.value("d", c.d);
    c.d_t = j.value("d_t", c.d_t);
    c.h = j.value("h", c.h);
    c.k_d = j.value("k_d", c.k_d);
    c.hidden = j.value("hidden", c.hidden);
    c.beta = j.value("beta", c.beta);
    c.gamma = j.value("gamma", c.gamma);
    c.lr = j.value("lr", c.lr);
    c.mmd_lambda = j.value("mmd_lambda", c.mmd_lambda);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.patience = j.value("patience", c.patience);
    c.base = base_kind_from_name(j.value("base", std::string(base_kind_name(c.base))));
    c.tied_tau_heads = j.value("tied_tau_heads", c.tied_tau_heads);
    c.max_train_records = j.value("max_train_records", c.max_train_records);
    return c;
}

inline json uplift_config_to_json(const UpliftConfig& c) {
    return json{{"d", c.d},
                {"d_t", c.d_t},
                {"h", c.h},
                {"k_d", c.k_d},
                {"hidden", c.hidden},
                {"beta", c.beta},
                {"gamma", c.gamma},
                {"lr", c.lr},
                {"mmd_lambda", c.mmd_lambda},
                {"batch_size", c.batch_size},
                {"max_epochs", c.max_epochs},
                {"patience", c.patience},
                {"base", base_kind_name(c.base)},
                {"tied_tau_heads", c.tied_tau_heads},
                {"max_train_records", c.max_train_records}};
}

inline BaselineConfig baseline_config_from_json(const json& j) {
    BaselineConfig c;
    c.hidden = j.value("hidden", c.hidden);
    c.lr = j.value("lr", c.lr);
    c.mmd_lambda = j.value("mmd_lambda", c.mmd_lambda);
    c.batch_size = j.value("batch_size", c.batch_size);
    c.max_epochs = j.value("max_epochs", c.max_epochs);
    c.patience = j.value("patience", c.patience);
    c.max_train_samples = j.value("max_train_samples", c.max_train_samples);
    return c;
}

inline json baseline_config_to_json(const BaselineConfig& c) {
    return json{{"hidden", c.hidden},
                {"lr", c.lr},
                {"mmd_lambda", c.mmd_lambda},
                {"batch_size", c.batch_size},
                {"max_epochs", c.max_epochs},
                {"patience", c.patience},
                {"max_train_samples", c.max_train_samples}};
}

inline ExperimentConfig experiment_config_from_json(const json& j) {
    ExperimentConfig c;
    try {
        if (j.contains("data")) {
            if (j["data"].contains("path"))
                c.data_path = j["data"]["path"].get<std::string>();
            else
                c.data = gen_config_from_json(j["data"]);
        }
        c.k_groups = j.value("k", c.k_groups);
        if (j.contains("grouping")) c.grouping = regressor_hyper_from_json(j["grouping"]);
        if (j.contains("model")) {
            c.model_kind = j["model"].value("kind", c.model_kind);
            c.model = uplift_config_from_json(j["model"]);
            c.baseline = baseline_config_from_json(j["model"]);
            if (c.model_kind != "umlc") c.baseline.kind = baseline_from_name(c.model_kind);
        }
        if (j.contains("search")) {
            const json& s = j["search"];
            c.search.n_trials = s.value("n_trials", c.search.n_trials);
            c.search.seed = s.value("seed", c.search.seed);
            if (s.contains("ranges")) {
                c.search.ranges.clear();
                for (auto it = s["ranges"].begin(); it != s["ranges"].end(); ++it) {
                    SearchRange r;
                    r.lo = it.value().at(0).get<double>();
                    r.hi = it.value().at(1).get<double>();
                    r.log_scale = it.value().size() > 2 && it.value().at(2).get<bool>();
                    c.search.ranges[it.key()] = r;
                }
            }
        }
        c.seeds = j.value("seeds", c.seeds);
        if (j.contains("ablations")) {
            c.ablations.rcg = j["ablations"].value("rcg", true);
            c.ablations.uci = j["ablations"].value("uci", true);
            c.ablations.tfi = j["ablations"].value("tfi", true);
        }
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError(2, "config", e.what());
    }
    if (auto s = env_seed_override()) c.seeds = {*s};
    c.validate();
    return c;
}

inline json experiment_config_to_json(const ExperimentConfig& c) {
    json j;
    if (!c.data_path.empty())
        j["data"] = json{{"path", c.data_path}};
    else
        j["data"] = gen_config_to_json(c.data);
    j["k"] = c.k_groups;
    j["grouping"] = regressor_hyper_to_json(c.grouping);
    j["model"] = uplift_config_to_json(c.model);
    j["model"]["kind"] = c.model_kind;
    json base = baseline_config_to_json(c.baseline);
    for (auto& [k, v] : base.items())
        if (!j["model"].contains(k)) j["model"][k] = v;
    json ranges = json::object();
    for (const auto& [name, r] : c.search.ranges) ranges[name] = json{r.lo, r.hi, r.log_scale};
    j["search"] = json{{"n_trials", c.search.n_trials}, {"seed", c.search.seed}, {"ranges", ranges}};
    j["seeds"] = c.seeds;
    j["ablations"] =
        json{{"rcg", c.ablations.rcg}, {"uci", c.ablations.uci}, {"tfi", c.ablations.tfi}};
    return j;
}

inline ExperimentConfig load_experiment_config(const std::string& path) {
    json j;
    try {
        j = json::parse(read_file(path));
    } catch (const std::exception& e) {
        throw StageError(2, "config", std::string("failed to read ") + path + ": " + e.what());
    }
    return experiment_config_from_json(j);
}

// ---------------------------------------------------------------------------
// Grouped dataset serialization (output of the `group` stage)

struct UserMatrix {
    std::size_t n = 0, p = 0;
    std::vector<double> x;
    std::vector<std::int8_t> t, split;
    const double* row(std::size_t u) const { return x.data() + u * p; }
};

inline void save_grouped(const std::string& dir, const Dataset& ds, const GroupedDataset& gds) {
    std::filesystem::create_directories(dir);
    std::ostringstream os;
    os << "user_id,g,split,t,y_bar,y0_bar,y1_bar,n_merged";
    for (std::size_t j = 0; j < ds.p(); ++j) os << ",xu_" << j;
    os << "\n";
    for (const GroupedRec& r : gds.recs) {
        os << r.user << "," << r.g << "," << split_name(Split(r.split)) << "," << int(r.t) << ","
           << fmt_double(r.y_bar) << "," << fmt_double(r.y0_bar) << "," << fmt_double(r.y1_bar)
           << "," << r.n_merged;
        const double* xu = ds.user_row(std::size_t(r.user));
        for (std::size_t j = 0; j < ds.p(); ++j) os << "," << fmt_double(xu[j]);
        os << "\n";
    }
    write_file(dir + "/grouped.csv", os.str());
    json meta{{"k", gds.K}, {"p", ds.p()}, {"n_users", ds.cfg.n_users}};
    write_file(dir + "/grouped.json", meta.dump(2) + "\n");
}

inline std::pair<GroupedDataset, UserMatrix> load_grouped(const std::string& dir) {
    json meta = json::parse(read_file(dir + "/grouped.json"));
    GroupedDataset gds;
    gds.K = meta.at("k").get<int>();
    UserMatrix um;
    um.p = meta.at("p").get<std::size_t>();
    um.n = meta.at("n_users").get<std::size_t>();
    um.x.assign(um.n * um.p, 0.0);
    um.t.assign(um.n, 0);
    um.split.assign(um.n, kTrain);
    std::istringstream is(read_file(dir + "/grouped.csv"));
    std::string line;
    std::getline(is, line);  // header
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        auto cells = split_csv_line(line);
        GroupedRec r;
        r.user = std::int32_t(std::stol(cells[0]));
        r.g = std::stoi(cells[1]);
        r.split = cells[2] == "train" ? kTrain : cells[2] == "val" ? kVal : kTest;
        r.t = std::int8_t(std::stoi(cells[3]));
        r.y_bar = std::stod(cells[4]);
        r.y0_bar = std::stod(cells[5]);
        r.y1_bar = std::stod(cells[6]);
        r.n_merged = std::stoi(cells[7]);
        for (std::size_t j = 0; j < um.p; ++j)
            um.x[std::size_t(r.user) * um.p + j] = std::stod(cells[8 + j]);
        um.t[std::size_t(r.user)] = r.t;
        um.split[std::size_t(r.user)] = r.split;
        gds.recs.push_back(r);
    }
    return {std::move(gds), std::move(um)};
}

inline std::vector<UpliftSample> samples_from_user_matrix(const GroupedDataset& gds,
                                                          const UserMatrix& um) {
    std::vector<UpliftSample> out;
    out.reserve(gds.recs.size());
    for (const GroupedRec& r : gds.recs) {
        UpliftSample s;
        s.user = r.user;
        s.xu = um.row(std::size_t(r.user));
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

inline FlatData flat_from_user_matrix(const GroupedDataset& gds, const UserMatrix& um) {
    FlatData fd;
    fd.n = gds.recs.size();
    fd.dim = um.p + std::size_t(gds.K);
    fd.x.assign(fd.n * fd.dim, 0.0);
    fd.t.resize(fd.n);
    fd.split.resize(fd.n);
    fd.y.resize(fd.n);
    fd.y0.resize(fd.n);
    fd.y1.resize(fd.n);
    for (std::size_t i = 0; i < fd.n; ++i) {
        const GroupedRec& r = gds.recs[i];
        double* dst = fd.x.data() + i * fd.dim;
        std::copy(um.row(std::size_t(r.user)), um.row(std::size_t(r.user)) + um.p, dst);
        dst[um.p + std::size_t(r.g)] = 1.0;
        fd.t[i] = r.t;
        fd.split[i] = r.split;
        fd.y[i] = r.y_bar;
        fd.y0[i] = r.y0_bar;
        fd.y1[i] = r.y1_bar;
    }
    return fd;
}

// ---------------------------------------------------------------------------
// Prediction dumps and evaluation reports

struct PredRow {
    std::int64_t user = 0;
    int g = -1;
    int t = 0;
    double y_bar = 0.0, tau_hat = 0.0, tau_tilde = 0.0, mu0 = 0.0;
    std::optional<double> y0_bar, y1_bar;
};

inline std::string preds_csv(const std::vector<PredRow>& rows, bool include_tau_tilde) {
    std::ostringstream os;
    os << "user_id,g,t,y_bar,tau_hat" << (include_tau_tilde ? ",tau_tilde" : "") << ",mu0\n";
    for (const PredRow& r : rows) {
        os << r.user << "," << r.g << "," << r.t << "," << fmt_double(r.y_bar) << ","
           << fmt_double(r.tau_hat);
        if (include_tau_tilde) os << "," << fmt_double(r.tau_tilde);
        os << "," << fmt_double(r.mu0) << "\n";
    }
    return os.str();
}

inline std::vector<PredRow> parse_preds_csv(const std::string& content) {
    std::istringstream is(content);
    std::string line;
    if (!std::getline(is, line)) throw StageError(4, "eval", "empty predictions file");
    auto header = split_csv_line(line);
    std::map<std::string, std::size_t> col;
    for (std::size_t i = 0; i < header.size(); ++i) col[header[i]] = i;
    for (const char* need : {"user_id", "g", "t", "y_bar", "tau_hat", "mu0"})
        if (!col.count(need))
            throw StageError(4, "eval", std::string("predictions missing column ") + need);
    std::vector<PredRow> out;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        auto cells = split_csv_line(line);
        PredRow r;
        r.user = std::stoll(cells[col["user_id"]]);
        r.g = std::stoi(cells[col["g"]]);
        r.t = std::stoi(cells[col["t"]]);
        r.y_bar = std::stod(cells[col["y_bar"]]);
        r.tau_hat = std::stod(cells[col["tau_hat"]]);
        r.tau_tilde = col.count("tau_tilde") ? std::stod(cells[col["tau_tilde"]]) : r.tau_hat;
        r.mu0 = std::stod(cells[col["mu0"]]);
        out.push_back(r);
    }
    return out;
}

inline std::vector<ScoredRecord> scored_from_preds(const std::vector<PredRow>& rows) {
    std::vector<ScoredRecord> recs(rows.size());
    for (std::size_t i = 0; i < rows.size(); ++i) {
        recs[i].pred = rows[i].tau_hat;
        recs[i].t = std::int8_t(rows[i].t);
        recs[i].y = rows[i].y_bar;
        recs[i].y0 = rows[i].y0_bar;
        recs[i].y1 = rows[i].y1_bar;
        recs[i].stable_index = i;
    }
    return recs;
}

struct EvalResult {
    double auuc_v = 0.0, qini_v = 0.0;
    double kendall_v = std::numeric_limits<double>::quiet_NaN();
    std::optional<double> eps_ate_v, eps_pehe_v;
    std::size_t n = 0;
};

inline EvalResult evaluate_scored(const std::vector<ScoredRecord>& recs) {
    EvalResult r;
    r.n = recs.size();
    if (recs.empty()) throw StageError(4, "eval", "no records to evaluate");
    r.auuc_v = auuc(recs);
    r.qini_v = qini(recs);
    try {
        r.kendall_v = kendall_bins(recs);
    } catch (const std::exception&) {
        // a bin with an empty arm leaves kendall undefined for this sample
    }
    bool truth = true;
    for (const auto& rec : recs)
        if (!rec.y0 || !rec.y1) truth = false;
    if (truth) {
        r.eps_ate_v = epsilon_ate(recs);
        r.eps_pehe_v = epsilon_pehe(recs);
    }
    return r;
}

inline json eval_result_to_json(const EvalResult& r, std::uint64_t seed) {
    json j;
    j["auuc"] = r.auuc_v;
    j["qini"] = r.qini_v;
    j["kendall"] = std::isnan(r.kendall_v) ? json() : json(r.kendall_v);
    if (r.eps_ate_v) j["eps_ate"] = *r.eps_ate_v;
    if (r.eps_pehe_v) j["eps_pehe"] = *r.eps_pehe_v;
    j["n"] = r.n;
    j["seed"] = seed;
    return j;
}

inline std::string curve_csv(const std::vector<CurvePoint>& pts, const std::string& xname,
                             const std::string& yname) {
    std::ostringstream os;
    os << xname << "," << yname << "\n";
    for (const CurvePoint& p : pts) os << fmt_double(p.x) << "," << fmt_double(p.value) << "\n";
    return os.str();
}

inline void write_curves(const std::string& dir, const std::vector<ScoredRecord>& recs) {
    std::filesystem::create_directories(dir);
    write_file(dir + "/uplift.csv", curve_csv(uplift_curve(recs), "k", "value"));
    write_file(dir + "/qini.csv", curve_csv(qini_curve(recs), "k", "value"));
    bool truth = !recs.empty();
    for (const auto& r : recs)
        if (!r.y0 || !r.y1) truth = false;
    if (truth) write_file(dir + "/gain.csv", curve_csv(gain_curve(recs), "s_pct", "gain_pct"));
}

// ---------------------------------------------------------------------------
// Pipeline

struct SeedRun {
    std::uint64_t seed = 0;
    EvalResult test;
    double val_qini = 0.0;
    double purity_v = std::numeric_limits<double>::quiet_NaN();
    double alignment_v = std::numeric_limits<double>::quiet_NaN();
    std::map<std::string, double> timing_sec;
};

struct RunReport {
    json config;
    std::vector<SeedRun> runs;
};

namespace detail {

inline double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / double(v.size());
}

inline double stddev_of(const std::vector<double>& v) {
    if (v.size() < 2) return 0.0;
    double m = mean_of(v), s = 0.0;
    for (double x : v) s += (x - m) * (x - m);
    return std::sqrt(s / double(v.size() - 1));
}

}  // namespace detail

// Sample mean and (n-1)-denominator std per metric across seed runs.
inline json aggregate_seeds(const std::vector<std::map<std::string, double>>& per_seed) {
    if (per_seed.empty()) throw StageError(4, "report", "no runs to aggregate");
    for (const auto& m : per_seed)
        if (m.size() != per_seed[0].size())
            throw StageError(4, "report", "mismatched metric keys across seeds");
    json out = json::object();
    for (const auto& [key, unused] : per_seed[0]) {
        std::vector<double> vals;
        for (const auto& m : per_seed) {
            auto it = m.find(key);
            if (it == m.end()) throw StageError(4, "report", "mismatched metric keys across seeds");
            vals.push_back(it->second);
        }
        bool any_nan = false;
        for (double v : vals)
            if (std::isnan(v)) any_nan = true;
        json cell;
        cell["mean"] = any_nan ? json() : json(detail::mean_of(vals));
        cell["std"] = any_nan ? json() : json(detail::stddev_of(vals));
        out[key] = cell;
    }
    return out;
}

inline std::map<std::string, double> run_metric_map(const SeedRun& r) {
    std::map<std::string, double> m;
    m["auuc"] = r.test.auuc_v;
    m["qini"] = r.test.qini_v;
    m["kendall"] = r.test.kendall_v;
    m["val_qini"] = r.val_qini;
    if (r.test.eps_ate_v) m["eps_ate"] = *r.test.eps_ate_v;
    if (r.test.eps_pehe_v) m["eps_pehe"] = *r.test.eps_pehe_v;
    if (!std::isnan(r.purity_v)) m["purity"] = r.purity_v;
    if (!std::isnan(r.alignment_v)) m["alignment"] = r.alignment_v;
    return m;
}

// Report without timings; timings vary run to run and live in a separate
// artifact so that reruns stay byte-identical.
inline json report_json(const RunReport& rep) {
    json out;
    out["config"] = rep.config;
    json per_seed = json::array();
    std::vector<std::map<std::string, double>> maps;
    for (const SeedRun& r : rep.runs) {
        json j;
        j["seed"] = r.seed;
        j["metrics"] = json::object();
        for (const auto& [k, v] : run_metric_map(r))
            j["metrics"][k] = std::isnan(v) ? json() : json(v);
        per_seed.push_back(std::move(j));
        maps.push_back(run_metric_map(r));
    }
    out["per_seed"] = std::move(per_seed);
    out["aggregate"] = aggregate_seeds(maps);
    return out;
}

inline json timings_json(const RunReport& rep) {
    json arr = json::array();
    for (const SeedRun& r : rep.runs) {
        json j;
        j["seed"] = r.seed;
        for (const auto& [k, v] : r.timing_sec) j[k] = v;
        arr.push_back(std::move(j));
    }
    return json{{"per_seed", std::move(arr)}};
}

// Markdown table: one row per metric, mean +/- std.
inline std::string report_markdown(const json& report) {
    std::ostringstream os;
    os << "| metric | mean | std |\n|---|---|---|\n";
    const json& agg = report.at("aggregate");
    for (auto it = agg.begin(); it != agg.end(); ++it) {
        auto cell = [&](const json& v) {
            return v.is_null() ? std::string("n/a") : fmt_double(v.get<double>());
        };
        os << "| " << it.key() << " | " << cell(it.value()["mean"]) << " | "
           << cell(it.value()["std"]) << " |\n";
    }
    return os.str();
}

struct PipelineArtifacts {
    // set to write checkpoints/preds/curves under <out_dir>/seed_<s>/
    std::string out_dir;
};

namespace detail {

inline double elapsed(const std::chrono::steady_clock::time_point& t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

inline std::vector<ScoredRecord> scored_from_samples(
    const std::vector<const UpliftSample*>& samples, const std::vector<double>& preds) {
    std::vector<ScoredRecord> recs(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        recs[i].pred = preds[i];
        recs[i].t = samples[i]->t;
        recs[i].y = samples[i]->y;
        recs[i].y0 = samples[i]->y0;
        recs[i].y1 = samples[i]->y1;
        recs[i].stable_index = i;
    }
    return recs;
}

}  // namespace detail

// One full pipeline pass for one seed. Stages: data, grouping (unless the
// rcg ablation disables it), model training, evaluation on the test split.
inline SeedRun run_pipeline_seed(const ExperimentConfig& cfg, std::uint64_t seed,
                                 const PipelineArtifacts& art = {}) {
    SeedRun run;
    run.seed = seed;
    auto t0 = std::chrono::steady_clock::now();

    Dataset ds;
    try {
        if (!cfg.data_path.empty()) {
            ds = load_dataset(cfg.data_path);
        } else {
            GenConfig gc = cfg.data;
            gc.seed = seed;
            ds = generate_dataset(gc);
        }
    } catch (const std::exception& e) {
        throw StageError(2, "data", e.what());
    }
    run.timing_sec["data"] = detail::elapsed(t0);

    std::vector<UpliftSample> samples;
    GroupedDataset gds;
    GroupingModel grouping_model;
    std::vector<int> assign;
    try {
        t0 = std::chrono::steady_clock::now();
        if (cfg.ablations.rcg) {
            grouping_model = train_regressor(ds, cfg.grouping, Rng(seed).derive("grouping"));
            fit_groups(grouping_model, ds, cfg.k_groups, seed);
            assign = assign_groups(grouping_model, ds);
            gds = aggregate(ds, assign, cfg.k_groups);
            run.purity_v = purity(assign, ds.ctx_group, cfg.k_groups, ds.cfg.k_true);
            run.alignment_v = alignment(ds, gds);
            samples = build_grouped_samples(ds, gds);
        } else {
            samples = build_raw_samples(ds);
        }
        run.timing_sec["grouping"] = detail::elapsed(t0);
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError(3, "grouping", e.what());
    }

    std::vector<const UpliftSample*> val, test;
    for (const UpliftSample& s : samples) {
        if (s.split == kVal) val.push_back(&s);
        else if (s.split == kTest) test.push_back(&s);
    }

    try {
        t0 = std::chrono::steady_clock::now();
        if (cfg.model_kind == "umlc") {
            UpliftConfig mc = cfg.model;
            mc.use_grouping = cfg.ablations.rcg;
            mc.use_coattention = cfg.ablations.uci;
            mc.use_tfi = cfg.ablations.tfi;
            UpliftModel model = make_uplift_model(mc, ds, cfg.k_groups, Rng(seed).derive("model"));
            UpliftTrainReport tr = train_uplift(model, samples, Rng(seed).derive("train"));
            run.val_qini = tr.best_val_qini;
            run.timing_sec["train"] = detail::elapsed(t0);

            t0 = std::chrono::steady_clock::now();
            std::vector<UpliftPrediction> preds = predict_uplift_full(model, test);
            std::vector<double> taus(preds.size());
            for (std::size_t i = 0; i < preds.size(); ++i) taus[i] = preds[i].tau;
            std::vector<ScoredRecord> recs;
            if (cfg.ablations.rcg) {
                // Score every raw test record via its (user, group) prediction
                // so reported metrics are comparable across model kinds, which
                // all see the same raw test rows.
                std::map<std::pair<std::int32_t, int>, double> by_cell;
                for (std::size_t i = 0; i < test.size(); ++i)
                    by_cell[{test[i]->user, test[i]->g}] = taus[i];
                for (const SampleRec& r : ds.recs) {
                    if (ds.rec_split(r) != kTest) continue;
                    ScoredRecord sr;
                    sr.pred = by_cell.at({r.user, assign[std::size_t(r.ctx)]});
                    sr.t = ds.user_t[std::size_t(r.user)];
                    sr.y = r.y;
                    sr.y0 = r.y0;
                    sr.y1 = r.y1;
                    sr.stable_index = recs.size();
                    recs.push_back(sr);
                }
            } else {
                recs = detail::scored_from_samples(test, taus);
            }
            run.test = evaluate_scored(recs);
            if (!art.out_dir.empty()) {
                std::string sd = art.out_dir + "/seed_" + std::to_string(seed);
                std::filesystem::create_directories(sd);
                json manifest{{"type", "umlc"},
                              {"seed", seed},
                              {"k", cfg.k_groups},
                              {"model", uplift_config_to_json(mc)},
                              {"ablations",
                               json{{"rcg", cfg.ablations.rcg},
                                    {"uci", cfg.ablations.uci},
                                    {"tfi", cfg.ablations.tfi}}}};
                save_checkpoint(sd + "/checkpoint.json", manifest, model.named_params());
                std::vector<PredRow> rows(test.size());
                for (std::size_t i = 0; i < test.size(); ++i) {
                    rows[i].user = test[i]->user;
                    rows[i].g = test[i]->g;
                    rows[i].t = test[i]->t;
                    rows[i].y_bar = test[i]->y;
                    rows[i].tau_hat = preds[i].tau;
                    rows[i].tau_tilde = preds[i].tau2;
                    rows[i].mu0 = preds[i].mu0;
                }
                write_file(sd + "/preds.csv", preds_csv(rows, mc.use_tfi));
                write_curves(sd + "/curves", recs);
            }
        } else {
            BaselineConfig bc = cfg.baseline;
            bc.kind = baseline_from_name(cfg.model_kind);
            FlatData fd = cfg.ablations.rcg ? build_grouped_flat(ds, gds) : build_raw_flat(ds);
            BaselineModel model = fit_baseline(bc, fd, Rng(seed).derive("baseline"));
            std::vector<std::size_t> val_rows, test_rows;
            for (std::size_t i = 0; i < fd.n; ++i) {
                if (fd.split[i] == kVal) val_rows.push_back(i);
                else if (fd.split[i] == kTest) test_rows.push_back(i);
            }
            run.val_qini = detail::baseline_val_qini(model, fd, val_rows);
            run.timing_sec["train"] = detail::elapsed(t0);

            t0 = std::chrono::steady_clock::now();
            std::vector<double> taus = model.predict(fd, test_rows);
            std::vector<ScoredRecord> recs(test_rows.size());
            for (std::size_t i = 0; i < test_rows.size(); ++i) {
                recs[i].pred = taus[i];
                recs[i].t = fd.t[test_rows[i]];
                recs[i].y = fd.y[test_rows[i]];
                recs[i].y0 = fd.y0[test_rows[i]];
                recs[i].y1 = fd.y1[test_rows[i]];
                recs[i].stable_index = i;
            }
            run.test = evaluate_scored(recs);
            if (!art.out_dir.empty()) {
                std::string sd = art.out_dir + "/seed_" + std::to_string(seed);
                std::filesystem::create_directories(sd);
                json manifest{{"type", cfg.model_kind},
                              {"seed", seed},
                              {"model", baseline_config_to_json(bc)}};
                save_checkpoint(sd + "/checkpoint.json", manifest, model.named_params());
                write_curves(sd + "/curves", recs);
            }
        }
        run.timing_sec["eval"] = detail::elapsed(t0);
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError(3, "train", e.what());
    }
    return run;
}

inline RunReport run_pipeline(const ExperimentConfig& cfg, const PipelineArtifacts& art = {}) {
    RunReport rep;
    rep.config = experiment_config_to_json(cfg);
    for (std::uint64_t seed : cfg.seeds) rep.runs.push_back(run_pipeline_seed(cfg, seed, art));
    return rep;
}

// ---------------------------------------------------------------------------
// Random hyperparameter search, objective: validation qini of the first seed.

struct Trial {
    int index = 0;
    std::map<std::string, double> values;
    double val_qini = -std::numeric_limits<double>::infinity();
};

struct SearchResult {
    std::vector<Trial> trials;
    int best_index = -1;
    ExperimentConfig best_config;
};

inline void apply_search_values(ExperimentConfig& cfg, const std::map<std::string, double>& vals) {
    for (const auto& [name, v] : vals) {
        if (name == "lr") {
            cfg.model.lr = v;
            cfg.baseline.lr = v;
        } else if (name == "beta") {
            cfg.model.beta = v;
        } else if (name == "gamma") {
            cfg.model.gamma = v;
        } else if (name == "hidden") {
            cfg.model.hidden = std::size_t(std::llround(v));
            cfg.baseline.hidden = std::size_t(std::llround(v));
        } else if (name == "d") {
            cfg.model.d = int(std::llround(v));
        } else if (name == "h") {
            cfg.model.h = int(std::llround(v));
        } else if (name == "k_d") {
            cfg.model.k_d = int(std::llround(v));
        } else if (name == "mmd_lambda") {
            cfg.model.mmd_lambda = v;
            cfg.baseline.mmd_lambda = v;
        } else {
            throw StageError(2, "search", "unknown search parameter " + name);
        }
    }
}

inline SearchResult random_search(const ExperimentConfig& cfg) {
    if (cfg.search.n_trials < 1) throw StageError(2, "search", "n_trials must be >= 1");
    Rng rng = Rng(cfg.search.seed).derive("search");
    SearchResult res;
    double best = -std::numeric_limits<double>::infinity();
    for (int trial = 0; trial < cfg.search.n_trials; ++trial) {
        Rng tr = rng.derive("trial", std::uint64_t(trial));
        Trial t;
        t.index = trial;
        for (const auto& [name, r] : cfg.search.ranges) {
            Rng pr = tr.derive(name);
            double v = r.log_scale
                           ? std::exp(pr.uniform(std::log(r.lo), std::log(r.hi)))
                           : pr.uniform(r.lo, r.hi);
            t.values[name] = v;
        }
        ExperimentConfig trial_cfg = cfg;
        apply_search_values(trial_cfg, t.values);
        SeedRun run = run_pipeline_seed(trial_cfg, cfg.seeds.front());
        t.val_qini = run.val_qini;
        res.trials.push_back(t);
        if (t.val_qini > best) {
            best = t.val_qini;
            res.best_index = trial;
            res.best_config = trial_cfg;
        }
    }
    return res;
}

inline json search_result_to_json(const SearchResult& res) {
    json trials = json::array();
    for (const Trial& t : res.trials) {
        json j{{"index", t.index}, {"val_qini", t.val_qini}};
        for (const auto& [k, v] : t.values) j["values"][k] = v;
        trials.push_back(std::move(j));
    }
    return json{{"trials", std::move(trials)},
                {"best_index", res.best_index},
                {"best_config", experiment_config_to_json(res.best_config)}};
}

}  // namespace uplift
