#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "hf2vad/memaddr.hpp"

using namespace hf2vad;

TEST_CASE("identical slots give uniform weights and retrieve the slot itself") {
    int64_t n = 5, c = 3;
    Tensor slots({n, c});
    for (int64_t k = 0; k < n; ++k) {
        slots[k * c + 0] = 0.2f;
        slots[k * c + 1] = -0.7f;
        slots[k * c + 2] = 1.1f;
    }
    MemoryBank bank(slots);
    Tensor q({c});
    q[0] = 3.0f;
    q[1] = -1.0f;
    q[2] = 0.5f;
    auto res = address(q, bank);
    for (int64_t k = 0; k < n; ++k) CHECK(res.weights[k] == Catch::Approx(1.0 / 5.0).margin(1e-6));
    CHECK(res.retrieved[0] == Catch::Approx(0.2f).margin(1e-6));
    CHECK(res.retrieved[1] == Catch::Approx(-0.7f).margin(1e-6));
    CHECK(res.retrieved[2] == Catch::Approx(1.1f).margin(1e-6));
}

TEST_CASE("orthonormal two-slot bank matches the hand-evaluated softmax") {
    Tensor slots({2, 2});
    slots[0] = 1.0f;  // row 0 = [1,0]
    slots[3] = 1.0f;  // row 1 = [0,1]
    MemoryBank bank(slots);
    Tensor q({2});
    q[0] = 1.0f;
    auto res = address(q, bank);
    // sims [1,0] -> softmax = [e/(e+1), 1/(e+1)]
    const double w0 = std::exp(1.0) / (std::exp(1.0) + 1.0);  // 0.7310585786
    CHECK(res.weights[0] == Catch::Approx(w0).margin(1e-6));
    CHECK(res.weights[1] == Catch::Approx(1.0 - w0).margin(1e-6));
    CHECK(res.retrieved[0] == Catch::Approx(w0).margin(1e-6));
    CHECK(res.retrieved[1] == Catch::Approx(1.0 - w0).margin(1e-6));
}

TEST_CASE("addressing weights are a probability vector and retrieval stays in the hull") {
    Rng rng(11);
    for (int iter = 0; iter < 30; ++iter) {
        int64_t n = 1 + static_cast<int64_t>(rng.index(8));
        int64_t c = 1 + static_cast<int64_t>(rng.index(6));
        MemoryBank bank(n, c, rng);
        Tensor q = Tensor::normal({c}, 0.0f, 2.0f, rng);
        auto res = address(q, bank);
        double sum = 0.0;
        for (int64_t k = 0; k < n; ++k) {
            CHECK(res.weights[k] >= 0.0f);
            sum += res.weights[k];
        }
        CHECK(sum == Catch::Approx(1.0).margin(1e-6));
        // convex combination: per-coordinate bounds by slot extrema
        for (int64_t i = 0; i < c; ++i) {
            float lo = bank.slots[i], hi = bank.slots[i];
            for (int64_t k = 1; k < n; ++k) {
                lo = std::min(lo, bank.slots[k * c + i]);
                hi = std::max(hi, bank.slots[k * c + i]);
            }
            CHECK(res.retrieved[i] >= lo - 1e-5f);
            CHECK(res.retrieved[i] <= hi + 1e-5f);
        }
        // independent matmul oracle for retrieved = sum_k w_k m_k
        for (int64_t i = 0; i < c; ++i) {
            double acc = 0.0;
            for (int64_t k = 0; k < n; ++k)
                acc += static_cast<double>(res.weights[k]) * bank.slots[k * c + i];
            CHECK(res.retrieved[i] == Catch::Approx(acc).margin(1e-6));
        }
    }
}

TEST_CASE("permuting slot rows permutes weights and keeps the retrieval") {
    Rng rng(5);
    int64_t n = 6, c = 4;
    MemoryBank bank(n, c, rng);
    Tensor q = Tensor::normal({c}, 0.0f, 1.0f, rng);
    auto base = address(q, bank);

    std::vector<int64_t> perm = {3, 0, 5, 1, 4, 2};
    Tensor permuted({n, c});
    for (int64_t k = 0; k < n; ++k)
        for (int64_t i = 0; i < c; ++i) permuted[k * c + i] = bank.slots[perm[k] * c + i];
    auto res = address(q, MemoryBank(permuted));
    for (int64_t k = 0; k < n; ++k)
        CHECK(res.weights[k] == Catch::Approx(base.weights[perm[k]]).margin(1e-6));
    for (int64_t i = 0; i < c; ++i)
        CHECK(res.retrieved[i] == Catch::Approx(base.retrieved[i]).margin(1e-6));
}

TEST_CASE("zero-norm queries and slots use similarity zero") {
    Tensor slots({2, 2});
    slots[0] = 1.0f;           // [1,0]
    slots[2] = slots[3] = 0.0f;  // zero slot
    MemoryBank bank(slots);

    Tensor zq({2});
    auto rz = address(zq, bank);  // zero query: all sims 0 -> uniform
    CHECK(rz.weights[0] == Catch::Approx(0.5).margin(1e-6));
    CHECK(rz.weights[1] == Catch::Approx(0.5).margin(1e-6));

    Tensor q({2});
    q[0] = 2.0f;
    auto r = address(q, bank);  // sims [1, 0]
    const double w0 = std::exp(1.0) / (std::exp(1.0) + 1.0);
    CHECK(r.weights[0] == Catch::Approx(w0).margin(1e-6));
}

TEST_CASE("non-finite queries are rejected") {
    Rng rng(1);
    MemoryBank bank(3, 2, rng);
    Tensor q({2});
    q[0] = std::numeric_limits<float>::infinity();
    CHECK_THROWS_AS(address(q, bank), ValueError);
}

TEST_CASE("hard shrinkage drops small weights and renormalizes") {
    Rng rng(9);
    MemoryBank bank(8, 4, rng);
    Tensor q = Tensor::normal({4}, 0.0f, 1.0f, rng);
    auto soft = address(q, bank, 0.0f);
    auto hard = address(q, bank, 0.125f);
    double sum = 0.0;
    for (int64_t k = 0; k < 8; ++k) {
        if (soft.weights[k] < 0.125f) CHECK(hard.weights[k] == 0.0f);
        sum += hard.weights[k];
    }
    CHECK(sum == Catch::Approx(1.0).margin(1e-6));
}

TEST_CASE("entropy matches the hand-derived values") {
    // one-hot -> 0
    Tensor onehot({1, 4});
    onehot[2] = 1.0f;
    CHECK(entropy_of_weights(onehot, 1, 4) == Catch::Approx(0.0).margin(1e-9));
    // uniform over 2 -> ln 2
    Tensor uni({1, 2}, 0.5f);
    CHECK(entropy_of_weights(uni, 1, 2) == Catch::Approx(std::log(2.0)).margin(1e-7));
    // [0.9, 0.1] -> 0.3250829...
    Tensor w({1, 2});
    w[0] = 0.9f;
    w[1] = 0.1f;
    CHECK(entropy_of_weights(w, 1, 2) == Catch::Approx(0.32508297).margin(1e-6));
    // negative weight rejected
    Tensor bad({1, 2});
    bad[0] = -0.1f;
    bad[1] = 1.1f;
    CHECK_THROWS_AS(entropy_of_weights(bad, 1, 2), ValueError);
}

TEST_CASE("entropy of a single weight vector is within [0, ln N]") {
    Rng rng(21);
    for (int iter = 0; iter < 50; ++iter) {
        int64_t n = 2 + static_cast<int64_t>(rng.index(16));
        Tensor w({1, n});
        double sum = 0.0;
        for (int64_t k = 0; k < n; ++k) {
            w[k] = rng.uniform();
            sum += w[k];
        }
        for (int64_t k = 0; k < n; ++k) w[k] = static_cast<float>(w[k] / sum);
        double h = entropy_of_weights(w, 1, n);
        CHECK(h >= -1e-9);
        CHECK(h <= std::log(static_cast<double>(n)) + 1e-6);
    }
}

TEST_CASE("map addressing with a 1x1 map reduces exactly to vector addressing") {
    Rng rng(33);
    MemoryBank bank(6, 5, rng);
    Tensor q = Tensor::normal({5}, 0.0f, 1.0f, rng);
    auto scalar = address(q, bank);
    auto mapres = address_map(q.reshaped({5, 1, 1}), bank);
    for (int64_t i = 0; i < 5; ++i)
        CHECK(mapres.out[i] == Catch::Approx(scalar.retrieved[i]).margin(1e-6));
    for (int64_t k = 0; k < 6; ++k)
        CHECK(mapres.weight_map[k] == Catch::Approx(scalar.weights[k]).margin(1e-6));
}

TEST_CASE("map addressing applies the scalar rule independently per location") {
    Rng rng(34);
    MemoryBank bank(4, 3, rng);
    Tensor fmap = Tensor::normal({3, 2, 2}, 0.0f, 1.5f, rng);
    auto mapres = address_map(fmap, bank);
    REQUIRE(mapres.out.shape() == Shape{3, 2, 2});
    REQUIRE(mapres.weight_map.shape() == Shape{4, 2, 2});
    for (int64_t y = 0; y < 2; ++y)
        for (int64_t x = 0; x < 2; ++x) {
            Tensor q({3});
            for (int64_t ch = 0; ch < 3; ++ch) q[ch] = fmap.at({ch, y, x});
            auto ref = address(q, bank);
            for (int64_t ch = 0; ch < 3; ++ch)
                CHECK(mapres.out.at({ch, y, x}) ==
                      Catch::Approx(ref.retrieved[ch]).margin(1e-6));
            for (int64_t k = 0; k < 4; ++k)
                CHECK(mapres.weight_map.at({k, y, x}) ==
                      Catch::Approx(ref.weights[k]).margin(1e-6));
        }
}

TEST_CASE("constant feature maps produce constant outputs") {
    Rng rng(35);
    MemoryBank bank(5, 4, rng);
    Tensor fmap({4, 3, 3});
    for (int64_t ch = 0; ch < 4; ++ch)
        for (int64_t s = 0; s < 9; ++s) fmap[ch * 9 + s] = 0.3f * static_cast<float>(ch) - 0.5f;
    auto mapres = address_map(fmap, bank);
    for (int64_t ch = 0; ch < 4; ++ch)
        for (int64_t s = 1; s < 9; ++s)
            CHECK(mapres.out[ch * 9 + s] == Catch::Approx(mapres.out[ch * 9]).margin(1e-7));
}

TEST_CASE("channel mismatch between features and bank is a shape error") {
    Rng rng(36);
    MemoryBank bank(5, 4, rng);
    Tensor fmap({3, 2, 2});
    CHECK_THROWS_AS(address_map(fmap, bank), ShapeError);
}

TEST_CASE("entropy loss averages within a module and sums across modules") {
    // module 1: two rows with entropies ln2 and 0 -> mean = ln2/2
    Tensor w1({2, 2});
    w1[0] = w1[1] = 0.5f;
    w1[2] = 1.0f;
    w1[3] = 0.0f;
    // module 2: one row, uniform over 4 -> ln4
    Tensor w2({1, 4}, 0.25f);
    Value v1 = make_leaf(w1), v2 = make_leaf(w2);
    Value total = entropy_loss({v1, v2});
    double expect = 0.5 * std::log(2.0) + std::log(4.0);
    CHECK(total->value[0] == Catch::Approx(expect).margin(1e-6));
}

TEST_CASE("memory bank construction validates its invariants") {
    Rng rng(2);
    CHECK_THROWS_AS(MemoryBank(0, 4, rng), ConfigError);
    Tensor bad({2, 2});
    bad[0] = std::nanf("");
    CHECK_THROWS_AS(MemoryBank(bad), ValueError);
    MemoryBank ok(2000, 16, rng);  // paper-scale slot count constructs fine
    CHECK(ok.n() == 2000);
}
