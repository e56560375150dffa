#include <cmath>
#include <vector>

#define UPLIFT_CHECK_FINITE 1
#include "doctest.h"
#include "upliftlab/rng.hpp"
#include "upliftlab/tensor.hpp"

using namespace uplift;

TEST_CASE("matmul fixtures") {
    Tape tape;
    Var eye = make_var(2, 2, {1, 0, 0, 1});
    Var a = make_var(2, 2, {1, 2, 3, 4});
    Var r = matmul(tape, eye, a);
    CHECK(r->data == std::vector<double>({1, 2, 3, 4}));

    Var b = make_var(2, 1, {5, 6});
    Var hand = matmul(tape, a, b);
    CHECK(hand->data[0] == doctest::Approx(17.0));
    CHECK(hand->data[1] == doctest::Approx(39.0));

    Var zero = make_var(2, 2);
    Var z = matmul(tape, zero, a);
    for (double v : z->data) CHECK(v == 0.0);

    Var bad = make_var(3, 1, {1, 2, 3});
    CHECK_THROWS(matmul(tape, a, bad));
}

TEST_CASE("activation fixtures") {
    Tape tape;
    Var x = make_var(1, 3, {0.0, 50.0, -2.0}, true);
    Var t = tanh_op(tape, x);
    CHECK(t->data[0] == doctest::Approx(0.0));
    Var s = softplus_op(tape, x);
    CHECK(s->data[0] == doctest::Approx(std::log(2.0)).epsilon(1e-12));
    // extended-precision oracle for ln(1 + e^50)
    long double oracle = logl(1.0L + expl(50.0L));
    CHECK(std::isfinite(s->data[1]));
    CHECK(s->data[1] == doctest::Approx(double(oracle)).epsilon(1e-12));
    Var r = relu(tape, x);
    CHECK(r->data[2] == 0.0);
    CHECK(r->data[1] == 50.0);
}

TEST_CASE("softmax fixtures and properties") {
    Tape tape;
    Var two = make_var(1, 2, {0.0, 0.0});
    Var s = softmax(tape, two);
    CHECK(s->data[0] == doctest::Approx(0.5).epsilon(1e-12));
    CHECK(s->data[1] == doctest::Approx(0.5).epsilon(1e-12));

    Var x = make_var(1, 3, {1.0, 2.0, 3.0});
    Var sx = softmax(tape, x);
    double z = std::exp(1.0) + std::exp(2.0) + std::exp(3.0);
    for (int i = 0; i < 3; ++i) CHECK(sx->data[std::size_t(i)] == doctest::Approx(std::exp(1.0 + i) / z).epsilon(1e-12));

    // shift invariance, including values large enough to overflow naively
    Var shifted = make_var(1, 3, {1001.0, 1002.0, 1003.0});
    Var ss = softmax(tape, shifted);
    for (std::size_t i = 0; i < 3; ++i) CHECK(ss->data[i] == doctest::Approx(sx->data[i]).epsilon(1e-12));

    Rng rng(42);
    Var rand = make_var(4, 6);
    for (auto& v : rand->data) v = rng.normal();
    Var sr = softmax(tape, rand);
    for (std::size_t r = 0; r < 4; ++r) {
        double rowsum = 0.0;
        for (std::size_t c = 0; c < 6; ++c) {
            CHECK(sr->at(r, c) >= 0.0);
            rowsum += sr->at(r, c);
        }
        CHECK(rowsum == doctest::Approx(1.0).epsilon(1e-12));
    }
}

TEST_CASE("mse and frobenius fixtures") {
    Tape tape;
    Var x = make_var(1, 2, {1.0, 1.0});
    CHECK(mse(tape, x, x)->data[0] == 0.0);
    Var zero = make_var(1, 2);
    CHECK(mse(tape, x, zero)->data[0] == doctest::Approx(1.0));
    Var y = make_var(1, 2, {1.0, 3.0});
    CHECK(mse(tape, y, zero)->data[0] == doctest::Approx(5.0));
    Var bad = make_var(1, 3);
    CHECK_THROWS(mse(tape, x, bad));

    CHECK(frob_norm_sq(tape, zero)->data[0] == 0.0);
    Var v34 = make_var(1, 2, {3.0, 4.0});
    CHECK(frob_norm_sq(tape, v34)->data[0] == doctest::Approx(25.0));
    Rng rng(1);
    Var r = make_var(2, 2);
    double acc = 0.0;
    for (auto& e : r->data) {
        e = rng.normal();
        acc += e * e;
    }
    CHECK(frob_norm_sq(tape, r)->data[0] == doctest::Approx(acc).epsilon(1e-12));
}

TEST_CASE("backward basics") {
    {
        Tape tape;
        Var x = make_var(2, 3, {1, 2, 3, 4, 5, 6}, true);
        Var s = sum(tape, x);
        tape.backward(s);
        for (double g : x->grad) CHECK(g == doctest::Approx(1.0));
    }
    {
        Tape tape;
        Var x = make_var(1, 1, {0.0}, true);
        Var t = tanh_op(tape, x);
        tape.backward(t);
        CHECK(x->grad[0] == doctest::Approx(1.0));
    }
    {
        // two consumers accumulate additively: loss = sum(x) + sum(x*x)
        Tape tape;
        Var x = make_var(1, 2, {2.0, -1.0}, true);
        Var loss = add(tape, sum(tape, x), sum(tape, mul(tape, x, x)));
        tape.backward(loss);
        CHECK(x->grad[0] == doctest::Approx(1.0 + 2.0 * 2.0));
        CHECK(x->grad[1] == doctest::Approx(1.0 - 2.0));
    }
    {
        Tape tape;
        Var x = make_var(1, 2, {1.0, 2.0}, true);
        Var two = add(tape, x, x);  // non-scalar
        CHECK_THROWS(tape.backward(two));
    }
}

TEST_CASE("gradient check: linear layer under 1e-6") {
    Rng rng(3);
    Var w = make_var(4, 3, true), b = make_var(4, 1, true), x = make_var(2, 3);
    for (auto* v : {&w->data, &b->data, &x->data})
        for (auto& e : *v) e = rng.normal();
    auto fn = [&](Tape& tape) { return sum(tape, tanh_op(tape, linear(tape, x, w, b))); };
    CHECK(grad_check(fn, {w, b}) < 1e-6);
}

TEST_CASE("gradient check: softmax attention block under 1e-5") {
    Rng rng(5);
    Var q = make_var(2, 4, true), k = make_var(3, 4, true), v = make_var(3, 2, true);
    for (auto* p : {&q->data, &k->data, &v->data})
        for (auto& e : *p) e = rng.normal();
    auto fn = [&](Tape& tape) {
        Var scores = matmul(tape, q, transpose(tape, k));
        Var att = softmax(tape, scale(tape, scores, 0.5));
        return sum(tape, matmul(tape, att, v));
    };
    CHECK(grad_check(fn, {q, k, v}) < 1e-5);
}

TEST_CASE("gradient check: every primitive composite under 1e-4") {
    Rng rng(9);
    Var a = make_var(3, 3, true), b = make_var(3, 3, true), t = make_var(3, 1, true);
    for (auto* p : {&a->data, &b->data, &t->data})
        for (auto& e : *p) e = rng.normal() + 0.2;  // keep relu away from the kink
    auto fn = [&](Tape& tape) {
        Var m = matmul(tape, a, b);
        Var act = add(tape, tanh_op(tape, m), softplus_op(tape, m));
        Var rl = relu(tape, sub(tape, act, b));
        Var sm = softmax(tape, rl);
        Var cat = hconcat(tape, sm, tanh_op(tape, matmul(tape, b, transpose(tape, a))));
        Var col = vconcat(tape, t, lookup_row(tape, cat, 1));
        Var sc = mul_scalar(tape, mean_cols(tape, cat), select_elem(tape, col, 0));
        Var parts = affine_combine(tape, {sum(tape, sc), frob_norm_sq(tape, sm)}, {0.7, 0.3});
        return add(tape, parts, mse(tape, col, make_var(col->rows, col->cols)));
    };
    CHECK(grad_check(fn, {a, b, t}) < 1e-4);
}

TEST_CASE("gradient check: lipschitz-style row rescaling ops") {
    Rng rng(13);
    Var w = make_var(3, 4, true), c = scalar_var(0.3, true);
    for (auto& e : w->data) e = rng.normal();
    auto fn = [&](Tape& tape) {
        Var s = softplus_op(tape, c);
        Var sigma = row_abs_sum(tape, w);
        Var factor = min_const(tape, scalar_div_vec(tape, s, sigma), 1.0);
        return sum(tape, scale_rows(tape, w, factor));
    };
    CHECK(grad_check(fn, {w, c}) < 1e-4);
}

TEST_CASE("gradient check: stack_rows") {
    Rng rng(17);
    Var r1 = make_var(1, 3, true), r2 = make_var(1, 3, true);
    for (auto* p : {&r1->data, &r2->data})
        for (auto& e : *p) e = rng.normal();
    auto fn = [&](Tape& tape) {
        Var m = stack_rows(tape, {r1, r2});
        return frob_norm_sq(tape, tanh_op(tape, m));
    };
    CHECK(grad_check(fn, {r1, r2}) < 1e-6);
}

TEST_CASE("adam: zero gradient leaves parameters unchanged") {
    Var p = make_var(2, 2, {1, 2, 3, 4}, true);
    p->ensure_grad();
    std::vector<Var> params = {p};
    AdamState st;
    adam_step(params, st);
    CHECK(p->data == std::vector<double>({1, 2, 3, 4}));
}

TEST_CASE("adam: bias-corrected first step matches hand evaluation") {
    Var p = make_var(1, 1, {0.5}, true);
    p->ensure_grad();
    p->grad[0] = 3.0;
    std::vector<Var> params = {p};
    AdamState st;
    adam_step(params, st);
    // m_hat = g, v_hat = g^2 after bias correction at step 1
    double expected = 0.5 - st.lr * 3.0 / (std::sqrt(9.0) + st.eps);
    CHECK(p->data[0] == doctest::Approx(expected).epsilon(1e-15));
}

TEST_CASE("adam: identical runs are bitwise identical") {
    auto run = [] {
        Rng rng(21);
        Var w = make_var(3, 3, true);
        for (auto& e : w->data) e = rng.normal();
        std::vector<Var> params = {w};
        AdamState st;
        Var x = make_var(2, 3);
        for (auto& e : x->data) e = rng.normal();
        for (int i = 0; i < 20; ++i) {
            Tape tape;
            Var loss = frob_norm_sq(tape, tanh_op(tape, matmul(tape, x, w)));
            zero_grads(params);
            tape.backward(loss);
            adam_step(params, st);
        }
        return w->data;
    };
    auto a = run(), b = run();
    CHECK(a == b);
}

TEST_CASE("forward ops reject non-finite values") {
    Tape tape;
    Var x = make_var(1, 1, std::vector<double>{1e308});
    CHECK_THROWS(matmul(tape, x, x));
}
