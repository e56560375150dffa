#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <string>
#include <vector>

#include "upliftlab/harness.hpp"

using namespace uplift;
namespace fs = std::filesystem;

namespace {

ExperimentConfig tiny_experiment() {
    ExperimentConfig cfg;
    cfg.data.n_users = 60;
    cfg.data.pool_multiplier = 3.0;
    cfg.data.ctx_min = 5;
    cfg.data.ctx_max = 10;
    cfg.data.p_b = 2;
    cfg.data.p_c = 3;
    cfg.data.q_b = 2;
    cfg.data.q_c = 3;
    cfg.data.q_m = 1;
    cfg.k_groups = 3;
    cfg.grouping.widths = {8};
    cfg.grouping.max_epochs = 2;
    cfg.grouping.detrend_max_rows = 500;
    cfg.model.d = 3;
    cfg.model.d_t = 3;
    cfg.model.h = 4;
    cfg.model.k_d = 4;
    cfg.model.hidden = 8;
    cfg.model.max_epochs = 2;
    cfg.model.batch_size = 64;
    cfg.baseline.hidden = 8;
    cfg.baseline.max_epochs = 2;
    cfg.baseline.batch_size = 64;
    cfg.search.n_trials = 2;
    cfg.seeds = {1};
    return cfg;
}

std::string tmp_dir(const std::string& name) {
    std::string d = "/tmp/upliftlab_harness_test/" + name;
    fs::remove_all(d);
    fs::create_directories(d);
    return d;
}

}  // namespace

TEST_CASE("checkpoints round-trip named tensors and reject bad input") {
    std::string dir = tmp_dir("ckpt");
    Var a = make_var(2, 3, {1.0, -2.5, 0.0, 4.0, 1e-12, 3.25}, true);
    Var b = make_var(1, 1, {42.0}, true);
    std::vector<std::pair<std::string, Var>> tensors = {{"layer.w", a}, {"layer.b", b}};
    json manifest{{"type", "test"}, {"seed", 9}};
    save_checkpoint(dir + "/c.json", manifest, tensors);

    std::vector<double> want_a = a->data, want_b = b->data;
    for (double& v : a->data) v = 99.0;
    for (double& v : b->data) v = 99.0;

    json ckpt = load_checkpoint(dir + "/c.json");
    CHECK(ckpt["manifest"]["seed"] == 9);
    restore_tensors(ckpt, tensors);
    CHECK(a->data == want_a);
    CHECK(b->data == want_b);

    // unknown tensor name
    std::vector<std::pair<std::string, Var>> missing = {{"nope", a}};
    CHECK_THROWS_AS(restore_tensors(ckpt, missing), StageError);

    // shape mismatch
    Var wrong = make_var(3, 2, true);
    std::vector<std::pair<std::string, Var>> bad_shape = {{"layer.w", wrong}};
    CHECK_THROWS_AS(restore_tensors(ckpt, bad_shape), StageError);

    // unrecognised format
    write_file(dir + "/bad.json", "{\"format\":\"other\"}\n");
    try {
        load_checkpoint(dir + "/bad.json");
        FAIL("expected StageError");
    } catch (const StageError& e) {
        CHECK(e.exit_code == 2);
    }
}

TEST_CASE("seed aggregation: fixtures and key mismatch") {
    std::vector<std::map<std::string, double>> same = {{{"qini", 0.5}}, {{"qini", 0.5}}};
    json agg = aggregate_seeds(same);
    CHECK(agg["qini"]["mean"].get<double>() == doctest::Approx(0.5).epsilon(1e-15));
    CHECK(agg["qini"]["std"].get<double>() == 0.0);

    std::vector<std::map<std::string, double>> spread = {
        {{"qini", 1.0}}, {{"qini", 2.0}}, {{"qini", 3.0}}};
    agg = aggregate_seeds(spread);
    CHECK(agg["qini"]["mean"].get<double>() == doctest::Approx(2.0).epsilon(1e-15));
    CHECK(agg["qini"]["std"].get<double>() == doctest::Approx(1.0).epsilon(1e-12));

    // single run: std defined as 0
    agg = aggregate_seeds({{{"auuc", 0.25}}});
    CHECK(agg["auuc"]["std"].get<double>() == 0.0);

    // NaN metric turns into nulls rather than NaN in JSON
    double nan = std::numeric_limits<double>::quiet_NaN();
    agg = aggregate_seeds({{{"kendall", nan}}, {{"kendall", 0.5}}});
    CHECK(agg["kendall"]["mean"].is_null());

    std::vector<std::map<std::string, double>> mismatched = {{{"qini", 1.0}},
                                                             {{"auuc", 1.0}}};
    CHECK_THROWS_AS(aggregate_seeds(mismatched), StageError);
    std::vector<std::map<std::string, double>> empty;
    CHECK_THROWS_AS(aggregate_seeds(empty), StageError);
}

TEST_CASE("report json and markdown") {
    RunReport rep;
    rep.config = json{{"note", "test"}};
    SeedRun r1;
    r1.seed = 1;
    r1.test.auuc_v = 0.2;
    r1.test.qini_v = 0.1;
    r1.test.kendall_v = 0.5;
    r1.val_qini = 0.05;
    SeedRun r2 = r1;
    r2.seed = 2;
    r2.test.qini_v = 0.3;
    rep.runs = {r1, r2};

    json j = report_json(rep);
    CHECK(j["per_seed"].size() == 2);
    CHECK(j["per_seed"][0]["seed"] == 1);
    CHECK(j["aggregate"]["qini"]["mean"].get<double>() == doctest::Approx(0.2).epsilon(1e-15));

    std::string md = report_markdown(j);
    CHECK(md.find("| metric | mean | std |") == 0);
    CHECK(md.find("| qini |") != std::string::npos);
    CHECK(md.find("0.2") != std::string::npos);

    // identical reports serialize to identical bytes
    CHECK(report_json(rep).dump(2) == j.dump(2));
}

TEST_CASE("experiment config json round-trip") {
    ExperimentConfig cfg = tiny_experiment();
    cfg.model_kind = "umlc";
    cfg.ablations.tfi = false;
    cfg.seeds = {4, 5};
    json j = experiment_config_to_json(cfg);
    ExperimentConfig back = experiment_config_from_json(j);
    CHECK(experiment_config_to_json(back).dump(2) == j.dump(2));
    CHECK(back.seeds == cfg.seeds);
    CHECK(back.ablations.tfi == false);
    CHECK(back.data.n_users == 60);

    // data path variant skips the generator schema
    cfg.data_path = "/somewhere/data";
    j = experiment_config_to_json(cfg);
    back = experiment_config_from_json(j);
    CHECK(back.data_path == "/somewhere/data");

    // invalid configs map to exit code 2
    json bad = j;
    bad["seeds"] = json::array();
    try {
        experiment_config_from_json(bad);
        FAIL("expected StageError");
    } catch (const StageError& e) {
        CHECK(e.exit_code == 2);
    }
    bad = j;
    bad["model"]["kind"] = "nonsense";
    CHECK_THROWS_AS(experiment_config_from_json(bad), StageError);
    bad = j;
    bad["k"] = 1;
    CHECK_THROWS_AS(experiment_config_from_json(bad), StageError);
}

TEST_CASE("environment seed override") {
    json j = experiment_config_to_json(tiny_experiment());
    j["seeds"] = std::vector<std::uint64_t>{1, 2, 3};

    setenv("UPLIFTLAB_SEED", "42", 1);
    ExperimentConfig cfg = experiment_config_from_json(j);
    CHECK(cfg.seeds == std::vector<std::uint64_t>{42});

    setenv("UPLIFTLAB_SEED", "not-a-number", 1);
    try {
        experiment_config_from_json(j);
        FAIL("expected StageError");
    } catch (const StageError& e) {
        CHECK(e.exit_code == 2);
    }

    unsetenv("UPLIFTLAB_SEED");
    cfg = experiment_config_from_json(j);
    CHECK(cfg.seeds.size() == 3);
}

TEST_CASE("grouped dataset csv round-trip") {
    GenConfig gc = tiny_experiment().data;
    gc.seed = 11;
    Dataset ds = generate_dataset(gc);
    GroupedDataset gds = aggregate(ds, ds.ctx_group, gc.k_true);

    std::string dir = tmp_dir("grouped");
    save_grouped(dir, ds, gds);
    auto [back, um] = load_grouped(dir);

    CHECK(back.K == gds.K);
    REQUIRE(back.recs.size() == gds.recs.size());
    for (std::size_t i = 0; i < gds.recs.size(); ++i) {
        CHECK(back.recs[i].user == gds.recs[i].user);
        CHECK(back.recs[i].g == gds.recs[i].g);
        CHECK(back.recs[i].t == gds.recs[i].t);
        CHECK(back.recs[i].split == gds.recs[i].split);
        CHECK(back.recs[i].y_bar == gds.recs[i].y_bar);
        CHECK(back.recs[i].y0_bar == gds.recs[i].y0_bar);
        CHECK(back.recs[i].y1_bar == gds.recs[i].y1_bar);
        CHECK(back.recs[i].n_merged == gds.recs[i].n_merged);
    }
    CHECK(um.n == gc.n_users);
    CHECK(um.p == ds.p());
    for (const GroupedRec& r : gds.recs) {
        std::size_t u = std::size_t(r.user);
        for (std::size_t j = 0; j < um.p; ++j) CHECK(um.row(u)[j] == ds.user_row(u)[j]);
        CHECK(um.t[u] == ds.user_t[u]);
        CHECK(um.split[u] == ds.user_split[u]);
    }

    // samples built from disk match samples built in memory
    auto mem = build_grouped_samples(ds, gds);
    auto disk = samples_from_user_matrix(back, um);
    REQUIRE(disk.size() == mem.size());
    for (std::size_t i = 0; i < mem.size(); ++i) {
        CHECK(disk[i].g == mem[i].g);
        CHECK(disk[i].y == mem[i].y);
        CHECK(disk[i].t == mem[i].t);
    }

    // and the flat encoding agrees too
    FlatData fa = build_grouped_flat(ds, gds);
    FlatData fb = flat_from_user_matrix(back, um);
    CHECK(fb.dim == fa.dim);
    CHECK(fb.x == fa.x);
    CHECK(fb.y == fa.y);
}

TEST_CASE("prediction csv round-trip") {
    std::vector<PredRow> rows(3);
    for (std::size_t i = 0; i < 3; ++i) {
        rows[i].user = std::int64_t(i + 10);
        rows[i].g = int(i % 2);
        rows[i].t = int(i % 2);
        rows[i].y_bar = 0.25 * double(i) - 1.0;
        rows[i].tau_hat = 0.1 * double(i);
        rows[i].tau_tilde = 0.1 * double(i) + 0.01;
        rows[i].mu0 = -0.5 + double(i);
    }

    std::string with = preds_csv(rows, true);
    CHECK(with.rfind("user_id,g,t,y_bar,tau_hat,tau_tilde,mu0\n", 0) == 0);
    auto back = parse_preds_csv(with);
    REQUIRE(back.size() == 3);
    for (std::size_t i = 0; i < 3; ++i) {
        CHECK(back[i].user == rows[i].user);
        CHECK(back[i].g == rows[i].g);
        CHECK(back[i].y_bar == rows[i].y_bar);
        CHECK(back[i].tau_hat == rows[i].tau_hat);
        CHECK(back[i].tau_tilde == rows[i].tau_tilde);
        CHECK(back[i].mu0 == rows[i].mu0);
    }

    // without tau_tilde the parser falls back to tau_hat
    std::string without = preds_csv(rows, false);
    CHECK(without.rfind("user_id,g,t,y_bar,tau_hat,mu0\n", 0) == 0);
    back = parse_preds_csv(without);
    CHECK(back[1].tau_tilde == rows[1].tau_hat);

    CHECK_THROWS_AS(parse_preds_csv("user_id,g\n"), StageError);
    CHECK_THROWS_AS(parse_preds_csv(""), StageError);
}

TEST_CASE("curve csv format") {
    std::vector<CurvePoint> pts = {{0.0, 0.0}, {1.0, 0.5}, {2.0, -0.25}};
    std::string csv = curve_csv(pts, "k", "value");
    CHECK(csv == "k,value\n0,0\n1,0.5\n2,-0.25\n");
}

TEST_CASE("pipeline seed run produces metrics and byte-identical artifacts") {
    ExperimentConfig cfg = tiny_experiment();
    std::string da = tmp_dir("pipe_a"), db = tmp_dir("pipe_b");

    SeedRun ra = run_pipeline_seed(cfg, 1, {da});
    CHECK(std::isfinite(ra.test.qini_v));
    CHECK(std::isfinite(ra.test.auuc_v));
    CHECK(ra.test.eps_ate_v.has_value());
    CHECK(ra.test.eps_pehe_v.has_value());
    CHECK(ra.test.n > 0);
    CHECK(!std::isnan(ra.purity_v));
    CHECK(!std::isnan(ra.alignment_v));
    CHECK(ra.timing_sec.count("train") == 1);

    for (const char* f : {"/seed_1/checkpoint.json", "/seed_1/preds.csv",
                          "/seed_1/curves/uplift.csv", "/seed_1/curves/qini.csv",
                          "/seed_1/curves/gain.csv"})
        CHECK(fs::exists(da + f));

    SeedRun rb = run_pipeline_seed(cfg, 1, {db});
    CHECK(rb.test.qini_v == ra.test.qini_v);
    CHECK(rb.val_qini == ra.val_qini);
    for (const char* f : {"/seed_1/checkpoint.json", "/seed_1/preds.csv",
                          "/seed_1/curves/uplift.csv", "/seed_1/curves/qini.csv",
                          "/seed_1/curves/gain.csv"})
        CHECK(read_file(da + f) == read_file(db + f));

    // reports built from identical runs serialize identically, and timings
    // stay out of the report document
    RunReport rep_a = run_pipeline(cfg, {});
    RunReport rep_b = run_pipeline(cfg, {});
    CHECK(report_json(rep_a).dump(2) == report_json(rep_b).dump(2));
    CHECK(report_json(rep_a).dump().find("timing") == std::string::npos);
    CHECK(timings_json(rep_a)["per_seed"].size() == 1);
}

TEST_CASE("pipeline runs baselines and ablations") {
    ExperimentConfig cfg = tiny_experiment();
    cfg.model_kind = "s-learner";
    SeedRun run = run_pipeline_seed(cfg, 2);
    CHECK(std::isfinite(run.test.qini_v));
    CHECK(run.test.n > 0);

    // raw-context ablation path (no grouping)
    ExperimentConfig raw = tiny_experiment();
    raw.ablations.rcg = false;
    raw.model.max_epochs = 1;
    SeedRun rr = run_pipeline_seed(raw, 2);
    CHECK(std::isfinite(rr.test.qini_v));
    CHECK(std::isnan(rr.purity_v));  // no grouping stage ran

    ExperimentConfig bad = tiny_experiment();
    bad.data.ctx_min = 0;
    try {
        run_pipeline_seed(bad, 1);
        FAIL("expected StageError");
    } catch (const StageError& e) {
        CHECK(e.exit_code == 2);
    }
}

TEST_CASE("random search: determinism, ranges, argmax") {
    ExperimentConfig cfg = tiny_experiment();
    cfg.search.n_trials = 2;
    cfg.search.seed = 5;

    SearchResult a = random_search(cfg);
    REQUIRE(int(a.trials.size()) == 2);
    CHECK(a.best_index >= 0);

    double best = -std::numeric_limits<double>::infinity();
    int arg = -1;
    for (const Trial& t : a.trials) {
        for (const auto& [name, v] : t.values) {
            const SearchRange& r = cfg.search.ranges.at(name);
            CHECK(v >= r.lo);
            CHECK(v <= r.hi);
        }
        if (t.val_qini > best) {
            best = t.val_qini;
            arg = t.index;
        }
    }
    CHECK(a.best_index == arg);
    CHECK(a.trials[std::size_t(arg)].val_qini == best);

    SearchResult b = random_search(cfg);
    CHECK(b.best_index == a.best_index);
    for (std::size_t i = 0; i < a.trials.size(); ++i) {
        CHECK(b.trials[i].values == a.trials[i].values);
        CHECK(b.trials[i].val_qini == a.trials[i].val_qini);
    }
    CHECK(search_result_to_json(a).dump(2) == search_result_to_json(b).dump(2));

    // applied values land in the model config
    ExperimentConfig applied = tiny_experiment();
    apply_search_values(applied, {{"lr", 0.005}, {"beta", 0.7}});
    CHECK(applied.model.lr == 0.005);
    CHECK(applied.baseline.lr == 0.005);
    CHECK(applied.model.beta == 0.7);
    CHECK_THROWS_AS(apply_search_values(applied, {{"bogus", 1.0}}), StageError);

    ExperimentConfig none = tiny_experiment();
    none.search.n_trials = 0;
    CHECK_THROWS_AS(random_search(none), StageError);
}
