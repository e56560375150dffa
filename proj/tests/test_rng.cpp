#include <cmath>
#include <set>
#include <vector>

#include "doctest.h"
#include "upliftlab/rng.hpp"

using namespace uplift;

TEST_CASE("rng determinism and substream independence") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) CHECK(a.next_u64() == b.next_u64());

    // same seed, different tags -> different streams
    Rng base(7);
    Rng s1 = base.derive("one"), s2 = base.derive("two");
    CHECK(s1.next_u64() != s2.next_u64());
    Rng i0 = base.derive("user", 0), i1 = base.derive("user", 1);
    CHECK(i0.next_u64() != i1.next_u64());

    // derive is pure: does not consume parent state
    Rng p(9);
    (void)p.derive("x");
    Rng q(9);
    CHECK(p.next_u64() == q.next_u64());
}

TEST_CASE("uniform stays in [0,1) with plausible mean") {
    Rng r(1);
    double acc = 0.0;
    for (int i = 0; i < 100000; ++i) {
        double u = r.uniform();
        CHECK(u >= 0.0);
        CHECK(u < 1.0);
        acc += u;
    }
    CHECK(acc / 100000.0 == doctest::Approx(0.5).epsilon(0.01));
}

TEST_CASE("uniform_int covers the closed range") {
    Rng r(2);
    std::set<std::int64_t> seen;
    for (int i = 0; i < 2000; ++i) {
        std::int64_t v = r.uniform_int(-2, 3);
        CHECK(v >= -2);
        CHECK(v <= 3);
        seen.insert(v);
    }
    CHECK(seen.size() == 6);
}

TEST_CASE("normal moments match N(0,1)") {
    Rng r(3);
    double m = 0.0, v = 0.0;
    const int n = 200000;
    std::vector<double> xs(n);
    for (auto& x : xs) x = r.normal();
    for (double x : xs) m += x;
    m /= n;
    for (double x : xs) v += (x - m) * (x - m);
    v /= n;
    CHECK(m == doctest::Approx(0.0).epsilon(1).scale(0.01));
    CHECK(v == doctest::Approx(1.0).epsilon(0.02));

    Rng r2(4);
    double shifted = 0.0;
    for (int i = 0; i < 50000; ++i) shifted += r2.normal(3.0, 0.5);
    CHECK(shifted / 50000.0 == doctest::Approx(3.0).epsilon(0.01));
}

TEST_CASE("categorical frequencies track the probability vector") {
    Rng r(5);
    std::vector<double> probs = {0.2, 0.16, 0.16, 0.16, 0.16, 0.16};
    std::vector<int> counts(6, 0);
    const int n = 100000;
    for (int i = 0; i < n; ++i) ++counts[std::size_t(r.categorical(probs))];
    for (std::size_t g = 0; g < 6; ++g)
        CHECK(double(counts[g]) / n == doctest::Approx(probs[g]).epsilon(1).scale(0.01));
}

TEST_CASE("bernoulli respects p") {
    Rng r(6);
    int hits = 0;
    for (int i = 0; i < 100000; ++i) hits += r.bernoulli(0.3) ? 1 : 0;
    CHECK(double(hits) / 100000.0 == doctest::Approx(0.3).epsilon(0.03));
}
