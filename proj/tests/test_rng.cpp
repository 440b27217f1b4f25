#include <algorithm>
#include <cmath>
#include <cstdint>
#include <vector>

#include "canvit/common.hpp"
#include "doctest.h"

using canvit::Rng;

TEST_CASE("same seed reproduces the same stream") {
    Rng a(42), b(42);
    for (int i = 0; i < 100; ++i) {
        CHECK(a.next_u64() == b.next_u64());
        CHECK(a.uniform() == b.uniform());
        CHECK(a.normal() == b.normal());
    }
}

TEST_CASE("uniform stays in [0,1) with sane first moments") {
    Rng r(1);
    double sum = 0.0;
    const int n = 100000;
    for (int i = 0; i < n; ++i) {
        const double u = r.uniform();
        REQUIRE(u >= 0.0);
        REQUIRE(u < 1.0);
        sum += u;
    }
    CHECK(sum / n == doctest::Approx(0.5).epsilon(0.01));
}

TEST_CASE("normal has mean 0 and variance 1") {
    Rng r(2);
    double sum = 0.0, sq = 0.0;
    const int n = 200000;
    for (int i = 0; i < n; ++i) {
        const double x = r.normal();
        sum += x;
        sq += x * x;
    }
    const double mean = sum / n;
    CHECK(std::abs(mean) < 0.01);
    CHECK(sq / n - mean * mean == doctest::Approx(1.0).epsilon(0.02));
}

TEST_CASE("uniform_int covers [0,n) roughly uniformly") {
    Rng r(3);
    std::vector<int> counts(7, 0);
    const int n = 70000;
    for (int i = 0; i < n; ++i) {
        const std::int64_t v = r.uniform_int(7);
        REQUIRE(v >= 0);
        REQUIRE(v < 7);
        ++counts[static_cast<std::size_t>(v)];
    }
    for (int c : counts) CHECK(std::abs(c - 10000) < 500);
    CHECK_THROWS_AS((void)r.uniform_int(0), std::invalid_argument);
}

TEST_CASE("shuffle permutes without losing elements") {
    Rng r(4);
    std::vector<int> v(50);
    for (int i = 0; i < 50; ++i) v[static_cast<std::size_t>(i)] = i;
    std::vector<int> shuffled = v;
    r.shuffle(shuffled);
    CHECK(shuffled != v);  // 50! makes identity astronomically unlikely
    std::sort(shuffled.begin(), shuffled.end());
    CHECK(shuffled == v);
}

TEST_CASE("forked stream differs from the parent continuation") {
    Rng parent(5);
    Rng child = parent.fork();
    int agree = 0;
    for (int i = 0; i < 64; ++i)
        if (parent.next_u64() == child.next_u64()) ++agree;
    CHECK(agree == 0);
}
