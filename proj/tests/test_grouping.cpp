#include <doctest.h>

#include <cmath>
#include <numeric>
#include <vector>

#include "upliftlab/datagen.hpp"
#include "upliftlab/grouping.hpp"

using namespace uplift;

namespace {

GenConfig tiny_cfg(std::uint64_t seed) {
    GenConfig cfg;
    cfg.n_users = 300;
    cfg.pool_multiplier = 3.0;
    cfg.ctx_min = 20;
    cfg.ctx_max = 40;
    cfg.p_b = 4;
    cfg.p_c = 6;
    cfg.q_b = 4;
    cfg.q_c = 6;
    cfg.q_m = 2;
    cfg.seed = seed;
    return cfg;
}

RegressorHyper tiny_hyper() {
    RegressorHyper h;
    h.widths = {16, 16};
    h.max_epochs = 8;
    h.patience = 3;
    h.lr = 3e-3;
    h.detrend_max_rows = 5000;
    return h;
}

double max_abs_diff(const double* a, const double* b, std::size_t n) {
    double m = 0.0;
    for (std::size_t i = 0; i < n; ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

}  // namespace

TEST_CASE("certified bound is softplus(c) and multiplies across layers") {
    Rng r(1);
    LipschitzLayer l1(4, 3, true, r), l2(3, 1, false, r);
    l1.c->data[0] = 0.0;
    l2.c->data[0] = 0.0;
    double ln2 = std::log(2.0);
    CHECK(l1.certified_bound() == doctest::Approx(ln2).epsilon(1e-12));

    GroupingModel m;
    m.layers = {l1, l2};
    CHECK(lipschitz_bound(m) == doctest::Approx(ln2 * ln2).epsilon(1e-12));

    l1.c->data[0] = 2.5;
    CHECK(l1.certified_bound() == doctest::Approx(std::log1p(std::exp(2.5))).epsilon(1e-12));
    l1.c->data[0] = -40.0;  // stays positive and finite for very negative c
    CHECK(l1.certified_bound() > 0.0);
    CHECK(std::isfinite(l1.certified_bound()));
    // monotone in c
    l1.c->data[0] = 1.0;
    double b1 = l1.certified_bound();
    l1.c->data[0] = 1.5;
    CHECK(l1.certified_bound() > b1);
}

TEST_CASE("layer forward never exceeds the certified max-norm bound") {
    Rng r(7);
    LipschitzLayer layer(5, 4, true, r);
    // inflate weights so the row-sum rescaling has to kick in
    for (auto& v : layer.w->data) v *= 10.0;
    double bound = layer.certified_bound();
    Rng xr(13);
    for (int trial = 0; trial < 200; ++trial) {
        Var x1 = make_var(1, 5), x2 = make_var(1, 5);
        for (std::size_t j = 0; j < 5; ++j) {
            x1->data[j] = xr.normal(0.0, 3.0);
            x2->data[j] = xr.normal(0.0, 3.0);
        }
        Tape tape;
        Var y1 = layer.forward(tape, x1);
        Var y2 = layer.forward(tape, x2);
        double dx = max_abs_diff(x1->data.data(), x2->data.data(), 5);
        double dy = max_abs_diff(y1->data.data(), y2->data.data(), 4);
        CHECK(dy <= bound * dx + 1e-9);
    }
}

TEST_CASE("ridge solver matches hand-computed solutions") {
    // identity gram, lam = 0: x == rhs
    auto x = detail::ridge_solve({1.0, 0.0, 0.0, 1.0}, {3.0, -2.0}, 2, 0.0);
    CHECK(x[0] == doctest::Approx(3.0).epsilon(1e-12));
    CHECK(x[1] == doctest::Approx(-2.0).epsilon(1e-12));

    // [[2,1],[1,2]] x = [1,0] has inverse-based solution [2/3, -1/3]
    x = detail::ridge_solve({2.0, 1.0, 1.0, 2.0}, {1.0, 0.0}, 2, 0.0);
    CHECK(x[0] == doctest::Approx(2.0 / 3.0).epsilon(1e-10));
    CHECK(x[1] == doctest::Approx(-1.0 / 3.0).epsilon(1e-10));

    // with lam > 0 the diagonal shift is lam * (mean diag + 1)
    // G = I (1x1), rhs = 1, lam = 1: (1 + 2) x = 1
    x = detail::ridge_solve({1.0}, {1.0}, 1, 1.0);
    CHECK(x[0] == doctest::Approx(1.0 / 3.0).epsilon(1e-10));
}

TEST_CASE("bilinear fit recovers an exact low-rank response") {
    GenConfig cfg;
    cfg.n_users = 40;
    cfg.pool_multiplier = 1.0;
    cfg.ctx_min = 1;
    cfg.ctx_max = 4;
    cfg.p_b = 0;
    cfg.p_c = 2;
    cfg.q_b = 0;
    cfg.q_c = 2;
    cfg.q_m = 0;
    cfg.group_observable = false;
    cfg.k_true = 1;
    cfg.group_probs = {1.0};

    Dataset ds;
    ds.cfg = cfg;
    Rng r(5);
    ds.user_x.resize(cfg.n_users * 2);
    for (auto& v : ds.user_x) v = r.normal();
    std::size_t pool = cfg.pool_size();
    ds.ctx_x.resize(pool * 2);
    for (auto& v : ds.ctx_x) v = r.normal();
    ds.ctx_group.assign(pool, 0);
    ds.user_t.assign(cfg.n_users, 1);
    ds.user_split.assign(cfg.n_users, kTrain);

    const double a[3] = {1.0, -2.0, 0.5}, b[3] = {0.3, 1.1, -0.7};
    for (std::size_t u = 0; u < cfg.n_users; ++u) {
        for (std::size_t c = u; c < std::min(u + 3, pool); ++c) {
            const double* xu = ds.user_row(u);
            const double* xc = ds.ctx_row(c);
            double s = a[0] * xu[0] + a[1] * xu[1] + a[2];
            double t = b[0] * xc[0] + b[1] * xc[1] + b[2];
            SampleRec rec;
            rec.user = std::int32_t(u);
            rec.ctx = std::int32_t(c);
            rec.y = s * t;
            ds.recs.push_back(rec);
        }
    }

    std::vector<std::size_t> rows(ds.recs.size());
    std::iota(rows.begin(), rows.end(), 0);
    for (int rank : {1, 2}) {
        BilinearArm arm = detail::fit_bilinear_arm(ds, rows, rank, 8, 0.0, 1.0, Rng(11));
        CHECK(arm.active);
        double worst = 0.0;
        for (const auto& rec : ds.recs) {
            double pred = arm.predict(ds.user_row(std::size_t(rec.user)),
                                      ds.ctx_row(std::size_t(rec.ctx)));
            worst = std::max(worst, std::abs(pred - rec.y));
        }
        CHECK(worst < 1e-4);
    }

    // inactive arm (no rows) predicts zero
    BilinearArm empty = detail::fit_bilinear_arm(ds, {}, 2, 8, 0.0, 1.0, Rng(1));
    CHECK(!empty.active);
    CHECK(empty.predict(ds.user_row(0), ds.ctx_row(0)) == 0.0);
}

TEST_CASE("kmeans separates two blobs and handles edge cases") {
    Rng r(3);
    std::vector<double> data;
    for (int i = 0; i < 10; ++i) {
        data.push_back(r.normal(0.0, 0.1));
        data.push_back(r.normal(0.0, 0.1));
    }
    for (int i = 0; i < 10; ++i) {
        data.push_back(100.0 + r.normal(0.0, 0.1));
        data.push_back(100.0 + r.normal(0.0, 0.1));
    }

    KMeansResult two = kmeans(data, 20, 2, 2, 42);
    for (int i = 1; i < 10; ++i) CHECK(two.assignments[std::size_t(i)] == two.assignments[0]);
    for (int i = 11; i < 20; ++i) CHECK(two.assignments[std::size_t(i)] == two.assignments[10]);
    CHECK(two.assignments[0] != two.assignments[10]);
    CHECK(two.inertia < 1.0);

    // K = 1: centroid is the mean, inertia the total squared deviation
    KMeansResult one = kmeans(data, 20, 2, 1, 42);
    double mx = 0.0, my = 0.0;
    for (int i = 0; i < 20; ++i) {
        mx += data[std::size_t(2 * i)];
        my += data[std::size_t(2 * i + 1)];
    }
    mx /= 20.0;
    my /= 20.0;
    CHECK(one.centroids[0] == doctest::Approx(mx).epsilon(1e-9));
    CHECK(one.centroids[1] == doctest::Approx(my).epsilon(1e-9));
    double tot = 0.0;
    for (int i = 0; i < 20; ++i) {
        double dx = data[std::size_t(2 * i)] - mx, dy = data[std::size_t(2 * i + 1)] - my;
        tot += dx * dx + dy * dy;
    }
    CHECK(one.inertia == doctest::Approx(tot).epsilon(1e-9));
    CHECK(two.inertia <= one.inertia);

    // determinism and the n < k guard
    KMeansResult again = kmeans(data, 20, 2, 2, 42);
    CHECK(again.assignments == two.assignments);
    CHECK(again.centroids == two.centroids);
    CHECK_THROWS_AS(kmeans(data, 1, 2, 2, 42), std::invalid_argument);
}

TEST_CASE("purity fixture and perfect-assignment case") {
    std::vector<int> assign = {0, 0, 1, 1, 2};
    std::vector<int> latent = {0, 0, 1, 0, 1};
    CHECK(purity(assign, latent, 3, 2) == doctest::Approx(0.8).epsilon(1e-12));
    CHECK(purity(latent, latent, 2, 2) == doctest::Approx(1.0).epsilon(1e-12));
    // relabeled clusters keep purity 1
    std::vector<int> relabel = {1, 1, 0, 1, 0};
    CHECK(purity(relabel, latent, 2, 2) == doctest::Approx(1.0).epsilon(1e-12));
}

TEST_CASE("aggregation merges by (user, group, treatment) with mean responses") {
    GenConfig cfg = tiny_cfg(1);
    cfg.n_users = 2;
    Dataset ds;
    ds.cfg = cfg;
    ds.user_x.assign(2 * ds.p(), 0.0);
    ds.ctx_x.assign(3 * ds.q(), 0.0);
    ds.ctx_group = {0, 0, 1};
    ds.user_t = {1, 0};
    ds.user_split = {kTrain, kVal};
    auto rec = [](int u, int c, double y, double y0, double y1) {
        SampleRec r;
        r.user = u;
        r.ctx = c;
        r.y = y;
        r.y0 = y0;
        r.y1 = y1;
        return r;
    };
    ds.recs = {rec(0, 0, 1.0, 1.0, 2.0), rec(0, 1, 3.0, 2.0, 4.0), rec(0, 2, 5.0, 4.0, 6.0),
               rec(1, 0, 7.0, 7.0, 8.0)};
    std::vector<int> ctx_to_group = {0, 0, 1};

    GroupedDataset gds = aggregate(ds, ctx_to_group, 2);
    REQUIRE(gds.recs.size() == 3);
    CHECK(gds.K == 2);

    const GroupedRec& r0 = gds.recs[0];  // user 0, group 0: mean of two samples
    CHECK(r0.user == 0);
    CHECK(r0.g == 0);
    CHECK(r0.t == 1);
    CHECK(r0.split == kTrain);
    CHECK(r0.n_merged == 2);
    CHECK(r0.y_bar == doctest::Approx(2.0).epsilon(1e-15));
    CHECK(r0.y0_bar == doctest::Approx(1.5).epsilon(1e-15));
    CHECK(r0.y1_bar == doctest::Approx(3.0).epsilon(1e-15));

    const GroupedRec& r1 = gds.recs[1];
    CHECK(r1.user == 0);
    CHECK(r1.g == 1);
    CHECK(r1.y_bar == doctest::Approx(5.0).epsilon(1e-15));
    CHECK(r1.n_merged == 1);

    const GroupedRec& r2 = gds.recs[2];
    CHECK(r2.user == 1);
    CHECK(r2.t == 0);
    CHECK(r2.split == kVal);
    CHECK(r2.y_bar == doctest::Approx(7.0).epsilon(1e-15));

    // records never outnumber the raw samples
    CHECK(gds.recs.size() <= ds.recs.size());

    // re-aggregating a grouped dataset is the identity
    GroupedDataset twice = aggregate_grouped(gds);
    REQUIRE(twice.recs.size() == gds.recs.size());
    for (std::size_t i = 0; i < gds.recs.size(); ++i) {
        CHECK(twice.recs[i].user == gds.recs[i].user);
        CHECK(twice.recs[i].g == gds.recs[i].g);
        CHECK(twice.recs[i].y_bar == gds.recs[i].y_bar);
        CHECK(twice.recs[i].n_merged == gds.recs[i].n_merged);
    }
}

TEST_CASE("alignment fixtures") {
    GenConfig cfg;
    cfg.n_users = 4;
    cfg.p_b = 0;
    cfg.p_c = 1;
    Dataset ds;
    ds.cfg = cfg;
    ds.user_x = {0.0, 10.0, 0.1, 9.9};  // nearest control of u0 is u2, of u1 is u3
    ds.user_t = {1, 1, 0, 0};
    ds.user_split.assign(4, kTrain);

    GroupedDataset gds;
    gds.K = 3;
    auto grec = [](int u, int g) {
        GroupedRec r;
        r.user = u;
        r.g = g;
        return r;
    };
    // u0 and u2 share {0}; u1 has {1}, u3 has {2}
    gds.recs = {grec(0, 0), grec(1, 1), grec(2, 0), grec(3, 2)};
    CHECK(alignment(ds, gds) == doctest::Approx(0.5).epsilon(1e-12));

    // make every treated set match its neighbor: alignment 1
    gds.recs = {grec(0, 0), grec(1, 2), grec(2, 0), grec(3, 2)};
    CHECK(alignment(ds, gds) == doctest::Approx(1.0).epsilon(1e-12));

    // no overlap at all: alignment 0
    gds.recs = {grec(0, 1), grec(1, 1), grec(2, 0), grec(3, 2)};
    CHECK(alignment(ds, gds) == doctest::Approx(0.0).epsilon(1e-12));

    // one arm empty
    ds.user_t = {1, 1, 1, 1};
    CHECK_THROWS_AS(alignment(ds, gds), std::invalid_argument);
}

TEST_CASE("trained regressor: history, certificate, prediction quality, purity") {
    Dataset ds = generate_dataset(tiny_cfg(2));
    GroupingModel model = train_regressor(ds, tiny_hyper(), Rng(9));

    REQUIRE(!model.history.train_loss.empty());
    CHECK(model.history.val_pred_loss.size() == model.history.train_loss.size());
    CHECK(model.history.best_epoch >= 0);
    for (double v : model.history.train_loss) CHECK(std::isfinite(v));
    CHECK(model.history.final_lip == doctest::Approx(lipschitz_bound(model)).epsilon(1e-12));
    CHECK(model.history.final_lip > 0.0);

    // the certified inequality holds pair by pair
    Proposition1Report rep = check_proposition1(model, ds, 3000, 17);
    CHECK(rep.n_pairs == 3000);
    CHECK(rep.violations == 0);
    CHECK(rep.worst_margin >= 0.0);
    CHECK(rep.lipschitz_c == doctest::Approx(lipschitz_bound(model)).epsilon(1e-12));
    CHECK(rep.mu_hat > 0.0);

    // raw-unit predictions beat the constant-mean baseline on the val split
    auto val_rows = detail::split_rows(ds, kVal);
    REQUIRE(!val_rows.empty());
    double mean = 0.0;
    for (std::size_t i : val_rows) mean += ds.recs[i].y;
    mean /= double(val_rows.size());
    double var = 0.0, mse_pred = 0.0;
    for (std::size_t i : val_rows) {
        double d = ds.recs[i].y - mean;
        var += d * d;
        double e = predict_response(model, ds, ds.recs[i]) - ds.recs[i].y;
        mse_pred += e * e;
    }
    var /= double(val_rows.size());
    mse_pred /= double(val_rows.size());
    CHECK(mse_pred < var);

    // grouping on the trained embeddings recovers latent structure well
    // above the ~0.21 chance level
    fit_groups(model, ds, ds.cfg.k_true, 33);
    CHECK(model.trained);
    CHECK(model.K == ds.cfg.k_true);
    std::vector<int> g = assign_groups(model, ds);
    CHECK(g.size() == ds.ctx_group.size());
    for (int v : g) {
        CHECK(v >= 0);
        CHECK(v < ds.cfg.k_true);
    }
    CHECK(purity(g, ds.ctx_group, ds.cfg.k_true, ds.cfg.k_true) > 0.5);
}

TEST_CASE("untrained network still satisfies its certificate") {
    Dataset ds = generate_dataset(tiny_cfg(3));
    RegressorHyper h = tiny_hyper();
    h.max_epochs = 0;  // initialization only
    GroupingModel model = train_regressor(ds, h, Rng(9));
    Proposition1Report rep = check_proposition1(model, ds, 3000, 23);
    CHECK(rep.violations == 0);
    CHECK(rep.worst_margin >= 0.0);
}

TEST_CASE("training is deterministic and assign_groups requires centroids") {
    Dataset ds = generate_dataset(tiny_cfg(4));
    RegressorHyper h = tiny_hyper();
    h.max_epochs = 2;
    GroupingModel a = train_regressor(ds, h, Rng(5));
    GroupingModel b = train_regressor(ds, h, Rng(5));
    auto pa = a.params(), pb = b.params();
    REQUIRE(pa.size() == pb.size());
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i]->data == pb[i]->data);
    CHECK(a.history.train_loss == b.history.train_loss);
    CHECK(a.base.arm[0].a == b.base.arm[0].a);

    CHECK_THROWS_AS(assign_groups(a, ds), std::runtime_error);
}

TEST_CASE("degenerate all-zero response trains without blowing up") {
    Dataset ds = generate_dataset(tiny_cfg(6));
    for (auto& r : ds.recs) r.y = r.y0 = r.y1 = 0.0;
    RegressorHyper h = tiny_hyper();
    h.max_epochs = 2;
    GroupingModel model = train_regressor(ds, h, Rng(1));
    CHECK(model.y_sd == 1.0);  // variance-zero fallback
    for (double v : model.history.train_loss) CHECK(std::isfinite(v));
    for (double v : model.history.val_pred_loss) CHECK(std::isfinite(v));
}

TEST_CASE("empty train split is rejected") {
    Dataset ds = generate_dataset(tiny_cfg(7));
    for (auto& s : ds.user_split) s = kTest;
    CHECK_THROWS_WITH_AS(train_regressor(ds, tiny_hyper(), Rng(1)),
                         doctest::Contains("empty train split"), std::runtime_error);
}
