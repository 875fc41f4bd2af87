#include "kercnn/tensor.hpp"

#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>
#include <set>

using namespace kercnn;

TEST_CASE("Shape basics") {
    Shape s{2, 3, 4};
    REQUIRE(s.rank == 3);
    REQUIRE(s.count() == 24);
    REQUIRE(s.str() == "[2,3,4]");
    REQUIRE(s == Shape({2, 3, 4}));
    REQUIRE(s != Shape({2, 3, 4, 1}));
    REQUIRE_THROWS_AS(Shape({1, 2, 3, 4, 5}), std::invalid_argument);
    REQUIRE_THROWS_AS(Shape({-1, 2}), std::invalid_argument);
}

TEST_CASE("Tensor is row-major with innermost last index") {
    auto t = Tensor<double>::from({2, 3}, {1, 2, 3, 4, 5, 6});
    REQUIRE(t(0, 0) == 1);
    REQUIRE(t(0, 2) == 3);
    REQUIRE(t(1, 0) == 4);
    REQUIRE(t(1, 2) == 6);
    REQUIRE(t.flat(5) == 6);

    Tensor<double> u{Shape{2, 3, 4, 5}};
    u(1, 2, 3, 4) = 7.5;
    // linear index ((1*3 + 2)*4 + 3)*5 + 4 = 119
    REQUIRE(u.flat(119) == 7.5);
}

TEST_CASE("Tensor construction and reshape") {
    auto z = Tensor<float>::zeros({3, 3});
    REQUIRE(z.size() == 9);
    REQUIRE(z(2, 2) == 0.0f);

    auto f = Tensor<float>::full({2, 2}, 1.5f);
    REQUIRE(f(1, 1) == 1.5f);

    REQUIRE_THROWS_AS(Tensor<float>::from({2, 2}, {1.0f, 2.0f}), std::invalid_argument);

    auto r = f.reshaped(Shape{4});
    REQUIRE(r.rank() == 1);
    REQUIRE(r(3) == 1.5f);
    REQUIRE_THROWS_AS(f.reshaped(Shape{5}), std::invalid_argument);
}

TEST_CASE("Tensor finite checks and diffs") {
    auto t = Tensor<double>::from({2}, {1.0, 2.0});
    REQUIRE_NOTHROW(t.check_finite("t"));
    t(1) = std::numeric_limits<double>::quiet_NaN();
    REQUIRE_FALSE(t.all_finite());
    REQUIRE_THROWS_AS(t.check_finite("t"), std::runtime_error);

    auto a = Tensor<double>::from({3}, {1.0, 2.0, 3.0});
    auto b = Tensor<double>::from({3}, {1.0, 2.5, 2.0});
    REQUIRE(a.max_abs_diff(b) == 1.0);
    REQUIRE_THROWS_AS(a.max_abs_diff(Tensor<double>::zeros({2})), std::invalid_argument);
}

TEST_CASE("Tensor cast between scalar types") {
    auto d = Tensor<double>::from({2}, {0.5, -1.25});
    auto f = d.cast<float>();
    REQUIRE(f(0) == 0.5f);
    REQUIRE(f(1) == -1.25f);
    auto d2 = f.cast<double>();
    REQUIRE(d2 == d);
}

TEST_CASE("Rng determinism and ranges") {
    Rng a(42), b(42), c(43);
    bool all_equal = true, any_differ = false;
    for (int i = 0; i < 256; ++i) {
        const double x = a.uniform01(), y = b.uniform01(), z = c.uniform01();
        all_equal = all_equal && (x == y);
        any_differ = any_differ || (x != z);
        REQUIRE(x >= 0.0);
        REQUIRE(x < 1.0);
    }
    REQUIRE(all_equal);
    REQUIRE(any_differ);
}

TEST_CASE("Rng uniform_int is inclusive and in range") {
    Rng r(7);
    std::set<std::int64_t> seen;
    for (int i = 0; i < 400; ++i) {
        const auto v = r.uniform_int(0, 3);
        REQUIRE(v >= 0);
        REQUIRE(v <= 3);
        seen.insert(v);
    }
    REQUIRE(seen.size() == 4);
    REQUIRE(r.uniform_int(5, 5) == 5);
    REQUIRE_THROWS_AS(r.uniform_int(2, 1), std::invalid_argument);
}

TEST_CASE("Rng helpers") {
    Rng r(11);
    for (int i = 0; i < 32; ++i) {
        const int s = r.sign();
        REQUIRE((s == 1 || s == -1));
    }
    Rng p0(3), p1(3);
    for (int i = 0; i < 64; ++i) REQUIRE_FALSE(p0.bernoulli(0.0));
    for (int i = 0; i < 64; ++i) REQUIRE(p1.bernoulli(1.0));

    std::vector<int> v{0, 1, 2, 3, 4, 5, 6, 7};
    auto sorted = v;
    Rng s1(5), s2(5);
    auto v2 = v;
    s1.shuffle(v);
    s2.shuffle(v2);
    REQUIRE(v == v2);  // same seed, same permutation
    std::sort(v.begin(), v.end());
    REQUIRE(v == sorted);  // still a permutation
}

TEST_CASE("mix_seed decorrelates salts") {
    std::set<std::uint64_t> outs;
    for (std::uint64_t salt = 0; salt < 100; ++salt) outs.insert(mix_seed(123, salt));
    REQUIRE(outs.size() == 100);
    REQUIRE(mix_seed(123, 7) == mix_seed(123, 7));
    REQUIRE(mix_seed(123, 7) != mix_seed(124, 7));
}

TEST_CASE("fnv1a matches published reference values") {
    // Reference digests for the 64-bit FNV-1a test vectors.
    REQUIRE(fnv1a("", 0) == 0xcbf29ce484222325ull);
    REQUIRE(fnv1a("a", 1) == 0xaf63dc4c8601ec8cull);
    REQUIRE(fnv1a("foobar", 6) == 0x85944171f73967e8ull);
}

TEST_CASE("hex64 formatting") {
    REQUIRE(hex64(0xdeadbeefull) == "00000000deadbeef");
    REQUIRE(hex64(0) == "0000000000000000");
    REQUIRE(hex64(0xffffffffffffffffull) == "ffffffffffffffff");
}
