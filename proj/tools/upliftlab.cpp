// upliftlab command line tool: synthetic data generation, context grouping,
// uplift model training, evaluation, and the end-to-end pipeline.

#include <cstdio>
#include <filesystem>
#include <iostream>
#include <sstream>
#include <string>

#include <CLI11.hpp>
#include <json.hpp>

#include "upliftlab/harness.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace uplift;

namespace {

std::uint64_t effective_seed(std::uint64_t cli_seed) {
    if (auto s = env_seed_override()) return *s;
    return cli_seed;
}

// Discriminate a generated dataset directory from a grouped one.
bool is_gen_dir(const std::string& dir) { return fs::exists(dir + "/schema.json"); }
bool is_grouped_dir(const std::string& dir) { return fs::exists(dir + "/grouped.json"); }

struct GroupOutputs {
    GroupingModel model;
    std::vector<int> assignment;
    GroupedDataset gds;
    double purity_v = 0.0, alignment_v = 0.0;
};

GroupOutputs run_grouping(const Dataset& ds, const RegressorHyper& hyper, int k,
                          std::uint64_t seed) {
    GroupOutputs out;
    out.model = train_regressor(ds, hyper, Rng(seed).derive("grouping"));
    fit_groups(out.model, ds, k, seed);
    out.assignment = assign_groups(out.model, ds);
    out.gds = aggregate(ds, out.assignment, k);
    out.purity_v = purity(out.assignment, ds.ctx_group, k, ds.cfg.k_true);
    out.alignment_v = alignment(ds, out.gds);
    return out;
}

void write_group_artifacts(const std::string& dir, const Dataset& ds, const GroupOutputs& g,
                           std::uint64_t seed) {
    fs::create_directories(dir);
    save_grouped(dir, ds, g.gds);

    std::size_t ed = g.model.embed.out_dim();
    std::ostringstream cent;
    cent << "cluster";
    for (std::size_t j = 0; j < ed; ++j) cent << ",e_" << j;
    cent << "\n";
    for (int c = 0; c < g.model.K; ++c) {
        cent << c;
        for (std::size_t j = 0; j < ed; ++j)
            cent << "," << fmt_double(g.model.centroids[std::size_t(c) * ed + j]);
        cent << "\n";
    }
    write_file(dir + "/centroids.csv", cent.str());

    std::vector<double> emb = embed_all_contexts(g.model, ds);
    std::ostringstream ec;
    ec << "ctx_id,g,latent_group";
    for (std::size_t j = 0; j < ed; ++j) ec << ",e_" << j;
    ec << "\n";
    for (std::size_t c = 0; c < ds.ctx_group.size(); ++c) {
        ec << c << "," << g.assignment[c] << "," << ds.ctx_group[c];
        for (std::size_t j = 0; j < ed; ++j) ec << "," << fmt_double(emb[c * ed + j]);
        ec << "\n";
    }
    write_file(dir + "/embeddings.csv", ec.str());

    const TrainHistory& h = g.model.history;
    json rep{{"final_l_pred", h.val_pred_loss.empty() ? json() : json(h.val_pred_loss.back())},
             {"final_l_lip", h.final_lip},
             {"lipschitz_bound", lipschitz_bound(g.model)},
             {"best_epoch", h.best_epoch},
             {"k", g.model.K},
             {"purity", g.purity_v},
             {"alignment", g.alignment_v},
             {"seed", seed}};
    write_file(dir + "/group_report.json", rep.dump(2) + "\n");

    std::vector<std::pair<std::string, Var>> named;
    auto ps = g.model.params();
    for (std::size_t i = 0; i < ps.size(); ++i)
        named.emplace_back("param." + std::to_string(i), ps[i]);
    json manifest{{"type", "grouping"}, {"seed", seed}, {"k", g.model.K}};
    save_checkpoint(dir + "/regressor.json", manifest, named);
}

int cmd_gen(const std::string& config_path, const std::string& out, std::uint64_t seed,
            bool seed_set) {
    GenConfig cfg;
    if (!config_path.empty()) {
        json j = json::parse(read_file(config_path));
        cfg = gen_config_from_json(j.contains("data") ? j["data"] : j);
    }
    if (seed_set) cfg.seed = seed;
    if (auto s = env_seed_override()) cfg.seed = *s;
    Dataset ds = generate_dataset(cfg);
    save_dataset(ds, out);
    std::cout << "wrote " << ds.recs.size() << " samples for " << cfg.n_users << " users to "
              << out << "\n";
    return 0;
}

int cmd_group(const std::string& data, int k, const std::string& out,
              const std::string& config_path, std::uint64_t seed) {
    if (k < 2) throw StageError(2, "config", "k must be >= 2");
    RegressorHyper hyper;
    if (!config_path.empty()) {
        json j = json::parse(read_file(config_path));
        hyper = regressor_hyper_from_json(j.contains("grouping") ? j["grouping"] : j);
    }
    Dataset ds = load_dataset(data);
    GroupOutputs g;
    try {
        g = run_grouping(ds, hyper, k, seed);
    } catch (const std::exception& e) {
        throw StageError(3, "grouping", e.what());
    }
    write_group_artifacts(out, ds, g, seed);
    std::cout << "k=" << k << " purity=" << fmt_double(g.purity_v)
              << " alignment=" << fmt_double(g.alignment_v) << "\n";
    return 0;
}

int cmd_group_sweep(const std::string& data, int k_min, int k_max, const std::string& out,
                    const std::string& config_path, std::uint64_t seed) {
    if (k_min < 2 || k_min > k_max) throw StageError(2, "config", "need 2 <= k-min <= k-max");
    RegressorHyper hyper;
    if (!config_path.empty()) {
        json j = json::parse(read_file(config_path));
        hyper = regressor_hyper_from_json(j.contains("grouping") ? j["grouping"] : j);
    }
    Dataset ds = load_dataset(data);
    GroupingModel model;
    try {
        model = train_regressor(ds, hyper, Rng(seed).derive("grouping"));
    } catch (const std::exception& e) {
        throw StageError(3, "grouping", e.what());
    }
    std::ostringstream os;
    os << "k,purity,alignment\n";
    for (int k = k_min; k <= k_max; ++k) {
        fit_groups(model, ds, k, seed);
        std::vector<int> assign = assign_groups(model, ds);
        GroupedDataset gds = aggregate(ds, assign, k);
        os << k << "," << fmt_double(purity(assign, ds.ctx_group, k, ds.cfg.k_true)) << ","
           << fmt_double(alignment(ds, gds)) << "\n";
    }
    if (out.empty())
        std::cout << os.str();
    else
        write_file(out, os.str());
    return 0;
}

int cmd_train(const std::string& data, const std::string& model_kind, const std::string& base,
              const std::string& config_path, const std::string& out, const std::string& preds_out,
              bool no_rcg, bool no_uci, bool no_tfi, int k, std::uint64_t seed) {
    json cfg_json;
    if (!config_path.empty()) cfg_json = json::parse(read_file(config_path));
    json model_json = cfg_json.contains("model") ? cfg_json["model"] : cfg_json;

    bool grouped_input = is_grouped_dir(data);
    if (!grouped_input && !is_gen_dir(data))
        throw StageError(2, "config", data + " is neither a dataset nor a grouped directory");
    if (no_rcg && grouped_input)
        throw StageError(2, "config", "--no-rcg needs a raw dataset directory");

    if (model_kind == "umlc") {
        UpliftConfig mc = uplift_config_from_json(model_json);
        if (!base.empty()) mc.base = base_kind_from_name(base);
        mc.use_grouping = !no_rcg;
        mc.use_coattention = !no_uci;
        mc.use_tfi = !no_tfi;

        std::vector<UpliftSample> samples;
        UpliftModel model;
        json manifest{{"type", "umlc"}, {"seed", seed}};
        try {
            if (grouped_input) {
                auto [gds, um] = load_grouped(data);
                static std::pair<GroupedDataset, UserMatrix> hold;  // keep row storage alive
                hold = {std::move(gds), std::move(um)};
                samples = samples_from_user_matrix(hold.first, hold.second);
                model = make_uplift_model(mc, hold.second.p, nullptr, hold.first.K,
                                          Rng(seed).derive("model"));
                manifest["k"] = hold.first.K;
            } else {
                static Dataset ds;  // keep row storage alive
                ds = load_dataset(data);
                if (mc.use_grouping) {
                    RegressorHyper hyper;
                    if (cfg_json.contains("grouping"))
                        hyper = regressor_hyper_from_json(cfg_json["grouping"]);
                    GroupOutputs g = run_grouping(ds, hyper, k, seed);
                    static GroupedDataset gds;
                    gds = std::move(g.gds);
                    samples = build_grouped_samples(ds, gds);
                    manifest["k"] = k;
                } else {
                    samples = build_raw_samples(ds);
                }
                model = make_uplift_model(mc, ds, k, Rng(seed).derive("model"));
            }
            UpliftTrainReport tr = train_uplift(model, samples, Rng(seed).derive("train"));
            manifest["model"] = uplift_config_to_json(mc);
            manifest["best_val_qini"] = tr.best_val_qini;
            manifest["best_epoch"] = tr.best_epoch;
            save_checkpoint(out, manifest, model.named_params());
            std::cout << "best_val_qini=" << fmt_double(tr.best_val_qini) << " epochs="
                      << tr.train_loss.size() << "\n";
        } catch (const StageError&) {
            throw;
        } catch (const std::exception& e) {
            throw StageError(3, "train", e.what());
        }
        if (!preds_out.empty()) {
            std::vector<const UpliftSample*> test;
            for (const UpliftSample& s : samples)
                if (s.split == kTest) test.push_back(&s);
            std::vector<UpliftPrediction> preds = predict_uplift_full(model, test);
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
            write_file(preds_out, preds_csv(rows, mc.use_tfi));
        }
        return 0;
    }

    // Standalone baseline.
    BaselineConfig bc = baseline_config_from_json(model_json);
    bc.kind = baseline_from_name(model_kind);
    FlatData fd;
    try {
        if (grouped_input) {
            auto [gds, um] = load_grouped(data);
            fd = flat_from_user_matrix(gds, um);
        } else {
            Dataset ds = load_dataset(data);
            fd = build_raw_flat(ds);
        }
        BaselineModel model = fit_baseline(bc, fd, Rng(seed).derive("baseline"));
        json manifest{{"type", model_kind}, {"seed", seed}, {"model", baseline_config_to_json(bc)}};
        save_checkpoint(out, manifest, model.named_params());
        if (!preds_out.empty()) {
            std::vector<std::size_t> test_rows;
            for (std::size_t i = 0; i < fd.n; ++i)
                if (fd.split[i] == kTest) test_rows.push_back(i);
            std::vector<double> taus = model.predict(fd, test_rows);
            std::vector<PredRow> rows(test_rows.size());
            for (std::size_t i = 0; i < test_rows.size(); ++i) {
                rows[i].user = std::int64_t(test_rows[i]);
                rows[i].g = -1;
                rows[i].t = fd.t[test_rows[i]];
                rows[i].y_bar = fd.y[test_rows[i]];
                rows[i].tau_hat = taus[i];
                rows[i].tau_tilde = taus[i];
                rows[i].mu0 = 0.0;
            }
            write_file(preds_out, preds_csv(rows, false));
        }
        std::cout << "trained " << model_kind << "\n";
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError(3, "train", e.what());
    }
    return 0;
}

int cmd_eval(const std::string& preds_path, const std::string& out, const std::string& curves_dir,
             std::uint64_t seed) {
    try {
        std::vector<PredRow> rows = parse_preds_csv(read_file(preds_path));
        std::vector<ScoredRecord> recs = scored_from_preds(rows);
        EvalResult r = evaluate_scored(recs);
        write_file(out, eval_result_to_json(r, seed).dump(2) + "\n");
        if (!curves_dir.empty()) write_curves(curves_dir, recs);
        std::cout << "auuc=" << fmt_double(r.auuc_v) << " qini=" << fmt_double(r.qini_v) << "\n";
    } catch (const StageError&) {
        throw;
    } catch (const std::exception& e) {
        throw StageError(4, "eval", e.what());
    }
    return 0;
}

int cmd_pipeline(const std::string& config_path, const std::string& out) {
    ExperimentConfig cfg = load_experiment_config(config_path);
    fs::create_directories(out);
    PipelineArtifacts art;
    art.out_dir = out;
    RunReport rep = run_pipeline(cfg, art);
    write_file(out + "/report.json", report_json(rep).dump(2) + "\n");
    write_file(out + "/timings.json", timings_json(rep).dump(2) + "\n");
    std::cout << "pipeline done, " << rep.runs.size() << " seed(s), report at " << out
              << "/report.json\n";
    return 0;
}

int cmd_search(const std::string& config_path, const std::string& out) {
    ExperimentConfig cfg = load_experiment_config(config_path);
    SearchResult res = random_search(cfg);
    fs::create_directories(out);
    write_file(out + "/search.json", search_result_to_json(res).dump(2) + "\n");
    std::cout << "best trial " << res.best_index << " val_qini="
              << fmt_double(res.trials[std::size_t(res.best_index)].val_qini) << "\n";
    return 0;
}

int cmd_report(const std::string& in, const std::string& out) {
    json rep;
    try {
        rep = json::parse(read_file(in));
    } catch (const std::exception& e) {
        throw StageError(2, "config", e.what());
    }
    std::string md;
    try {
        md = report_markdown(rep);
    } catch (const std::exception& e) {
        throw StageError(4, "report", e.what());
    }
    if (out.empty())
        std::cout << md;
    else
        write_file(out, md);
    return 0;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"uplift modeling with context grouping"};
    app.require_subcommand(1);

    std::string config_path, data, out, base, preds_out, curves_dir, model_kind = "umlc", in;
    int k = 6, k_min = 2, k_max = 12;
    std::uint64_t seed = 1;
    bool no_rcg = false, no_uci = false, no_tfi = false;

    auto* gen = app.add_subcommand("gen", "generate a synthetic RCT dataset");
    gen->add_option("--config", config_path, "config file (JSON)");
    auto* gen_seed = gen->add_option("--seed", seed, "seed override");
    gen->add_option("--out", out, "output directory")->required();

    auto* group = app.add_subcommand("group", "train the grouping regressor and cluster contexts");
    group->add_option("--data", data, "dataset directory")->required();
    group->add_option("--k", k, "number of groups");
    group->add_option("--config", config_path, "config file (JSON)");
    group->add_option("--seed", seed, "seed");
    group->add_option("--out", out, "output directory")->required();

    auto* sweep = app.add_subcommand("group-sweep", "purity/alignment across K values");
    sweep->add_option("--data", data, "dataset directory")->required();
    sweep->add_option("--k-min", k_min, "smallest K");
    sweep->add_option("--k-max", k_max, "largest K");
    sweep->add_option("--config", config_path, "config file (JSON)");
    sweep->add_option("--seed", seed, "seed");
    sweep->add_option("--out", out, "output CSV (stdout when omitted)");

    auto* train = app.add_subcommand("train", "train an uplift model");
    train->add_option("--data", data, "dataset or grouped directory")->required();
    train->add_option("--model", model_kind, "umlc, s-learner, t-learner, tarnet, cfrnet-mmd");
    train->add_option("--base", base, "umlc base head: mlp, tarnet, cfrnet-mmd");
    train->add_option("--config", config_path, "config file (JSON)");
    train->add_option("--k", k, "groups when grouping runs inside train");
    train->add_option("--seed", seed, "seed");
    train->add_option("--out", out, "checkpoint path")->required();
    train->add_option("--preds", preds_out, "test-split prediction dump CSV");
    train->add_flag("--no-rcg", no_rcg, "skip grouping, use raw [x_u, x_c]");
    train->add_flag("--no-uci", no_uci, "replace co-attention with mean pooling");
    train->add_flag("--no-tfi", no_tfi, "disable the treatment interaction branch");

    auto* eval = app.add_subcommand("eval", "evaluate a prediction dump");
    eval->add_option("--preds", preds_out, "prediction CSV")->required();
    eval->add_option("--out", out, "report JSON path")->required();
    eval->add_option("--curves", curves_dir, "curve CSV directory");
    eval->add_option("--seed", seed, "seed recorded in the report");

    auto* pipeline = app.add_subcommand("pipeline", "end-to-end run over all seeds");
    pipeline->add_option("--config", config_path, "experiment config (JSON)")->required();
    pipeline->add_option("--out", out, "output directory")->required();

    auto* search = app.add_subcommand("search", "random hyperparameter search");
    search->add_option("--config", config_path, "experiment config (JSON)")->required();
    search->add_option("--out", out, "output directory")->required();

    auto* report = app.add_subcommand("report", "render a report as markdown");
    report->add_option("--in", in, "report JSON")->required();
    report->add_option("--out", out, "markdown path (stdout when omitted)");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        int rc = app.exit(e);
        return rc == 0 ? 0 : 2;
    }

    try {
        std::uint64_t s = effective_seed(seed);
        if (gen->parsed()) return cmd_gen(config_path, out, seed, !gen_seed->empty());
        if (group->parsed()) return cmd_group(data, k, out, config_path, s);
        if (sweep->parsed()) return cmd_group_sweep(data, k_min, k_max, out, config_path, s);
        if (train->parsed())
            return cmd_train(data, model_kind, base, config_path, out, preds_out, no_rcg, no_uci,
                             no_tfi, k, s);
        if (eval->parsed()) return cmd_eval(preds_out, out, curves_dir, s);
        if (pipeline->parsed()) return cmd_pipeline(config_path, out);
        if (search->parsed()) return cmd_search(config_path, out);
        if (report->parsed()) return cmd_report(in, out);
    } catch (const StageError& e) {
        std::cerr << "error [" << e.exit_code << "] " << e.what() << "\n";
        return e.exit_code;
    } catch (const nlohmann::json::exception& e) {
        std::cerr << "error [2] config: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error [3] " << e.what() << "\n";
        return 3;
    }
    return 0;
}
