#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "support/grad_check.hpp"
#include "support/oracles.hpp"
#include "voxfuse/tensor.hpp"

using namespace voxfuse;
using testsupport::max_grad_error;
using testsupport::random_tensor;

namespace {

// Random values bounded away from zero, for ops with a kink at the origin.
Tensor random_nonzero(Shape shape, DetRng& rng, double min_mag = 0.05) {
    std::vector<double> d(numel(shape));
    for (auto& v : d) {
        double x = rng.normal();
        v = x + (x >= 0.0 ? min_mag : -min_mag);
    }
    return Tensor(std::move(shape), std::move(d), true);
}

Tensor weighted_sum(const Tensor& t, const std::vector<double>& w) {
    Tensor weights(t.shape(), w);
    return sum(mul(t, weights));
}

std::vector<double> fixed_weights(std::size_t n, DetRng& rng) {
    std::vector<double> w(n);
    for (auto& v : w) v = rng.normal();
    return w;
}

}  // namespace

TEST_CASE("matmul identity and hand product", "[tensor]") {
    Tensor eye({2, 2}, {1, 0, 0, 1});
    Tensor x({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor prod = matmul(eye, x);
    REQUIRE(prod.data() == x.data());

    Tensor a({2, 2}, {1, 2, 3, 4});
    Tensor ones({2, 1}, {1, 1});
    Tensor r = matmul(a, ones);
    REQUIRE(r.at({0, 0}) == 3.0);
    REQUIRE(r.at({1, 0}) == 7.0);

    REQUIRE_THROWS_AS(matmul(a, Tensor({3, 1}, {1, 1, 1})), ShapeError);
    REQUIRE_THROWS_AS(matmul(Tensor({2, 3}, {0, 0, 0, 0, 0, 0}), a), ShapeError);
}

TEST_CASE("matmul gradient check", "[tensor]") {
    DetRng rng(11);
    Tensor a = random_tensor({3, 4}, rng);
    Tensor b = random_tensor({4, 2}, rng);
    auto w = fixed_weights(6, rng);
    double err = max_grad_error([&] { return weighted_sum(matmul(a, b), w); }, {a, b});
    REQUIRE(err < 1e-6);
}

TEST_CASE("softmax values and stabilization", "[tensor]") {
    Tensor sym = softmax(Tensor({2}, {0.0, 0.0}), 0);
    REQUIRE(sym.data()[0] == Catch::Approx(0.5).margin(1e-15));

    Tensor hand = softmax(Tensor({2}, {std::log(2.0), 0.0}), 0);
    REQUIRE(std::abs(hand.data()[0] - 2.0 / 3.0) < 1e-12);
    REQUIRE(std::abs(hand.data()[1] - 1.0 / 3.0) < 1e-12);

    Tensor big = softmax(Tensor({2}, {1000.0, 0.0}), 0);
    REQUIRE(std::isfinite(big.data()[0]));
    REQUIRE(big.data()[0] == Catch::Approx(1.0).margin(1e-12));
    REQUIRE(big.data()[1] >= 0.0);
    REQUIRE(big.data()[1] < 1e-300);

    REQUIRE_THROWS_AS(softmax(Tensor({2}, {std::nan(""), 0.0}), 0), ValueError);
}

TEST_CASE("softmax rows sum to one", "[tensor]") {
    DetRng rng(5);
    for (int trial = 0; trial < 50; ++trial) {
        Tensor x = random_tensor({4, 5}, rng, false, 10.0);
        Tensor s = softmax(x, 1);
        for (std::size_t i = 0; i < 4; ++i) {
            double row = 0.0;
            for (std::size_t j = 0; j < 5; ++j) row += s.at({i, j});
            REQUIRE(std::abs(row - 1.0) <= 1e-12);
        }
    }
}

TEST_CASE("sigmoid values and gradient", "[tensor]") {
    REQUIRE(sigmoid(Tensor::scalar(0.0)).item() == 0.5);
    REQUIRE(sigmoid(Tensor::scalar(-1e4)).item() == Catch::Approx(0.0).margin(1e-300));
    REQUIRE(sigmoid(Tensor::scalar(-1e4)).item() >= 0.0);

    DetRng rng(21);
    Tensor x = random_tensor({6}, rng);
    auto w = fixed_weights(6, rng);
    double err = max_grad_error([&] { return weighted_sum(sigmoid(x), w); }, {x});
    REQUIRE(err < 1e-6);
}

TEST_CASE("relu and l2_normalize", "[tensor]") {
    Tensor r = relu(Tensor({4}, {-1.0, 0.0, 2.0, -0.5}));
    REQUIRE(r.data() == std::vector<double>{0.0, 0.0, 2.0, 0.0});

    Tensor n = l2_normalize(Tensor({2}, {3.0, 4.0}), 0);
    REQUIRE(n.data()[0] == Catch::Approx(0.6).margin(1e-12));
    REQUIRE(n.data()[1] == Catch::Approx(0.8).margin(1e-12));

    Tensor z = l2_normalize(Tensor({3}, {0.0, 0.0, 0.0}), 0);
    for (double v : z.data()) REQUIRE(v == 0.0);
}

TEST_CASE("rms normalization", "[tensor]") {
    DetRng rng(67);
    Tensor x = random_tensor({3, 4}, rng, false);
    Tensor y = rms_normalize(x);
    double mean_sq = 0.0;
    for (double v : y.data()) mean_sq += v * v;
    REQUIRE(mean_sq / 12.0 == Catch::Approx(1.0).margin(1e-6));

    // scale invariance: the output ignores a global gain
    std::vector<double> doubled = x.data();
    for (auto& v : doubled) v *= 2.0;
    Tensor y2 = rms_normalize(Tensor({3, 4}, doubled));
    for (std::size_t i = 0; i < y.size(); ++i)
        REQUIRE(y2.data()[i] == Catch::Approx(y.data()[i]).margin(1e-12));

    Tensor xg = random_tensor({6}, rng);
    auto w = fixed_weights(6, rng);
    REQUIRE(max_grad_error([&] { return weighted_sum(rms_normalize(xg), w); }, {xg}) <= 1e-4);
}

TEST_CASE("mse l1 concat basics", "[tensor]") {
    DetRng rng(3);
    Tensor x = random_tensor({3, 2}, rng, false);
    REQUIRE(mse(x, x).item() == 0.0);
    REQUIRE(l1(x, x).item() == 0.0);

    Tensor a = Tensor::zeros({2, 3, 4});
    Tensor b = Tensor::zeros({5, 3, 4});
    Tensor c = concat({a, b}, 0);
    REQUIRE(c.shape() == Shape{7, 3, 4});
    REQUIRE_THROWS_AS(concat({a, Tensor::zeros({2, 3, 5})}, 0), ShapeError);
}

TEST_CASE("cross entropy values", "[tensor]") {
    // confidently correct: scaled one-hot logits
    Tensor confident({2, 3}, {1e3, 0, 0, 0, 1e3, 0});
    REQUIRE(cross_entropy(confident, {0, 1}).item() == Catch::Approx(0.0).margin(1e-12));

    Tensor uniform = Tensor::zeros({3, 4});
    REQUIRE(cross_entropy(uniform, {0, 1, 3}).item() ==
            Catch::Approx(std::log(4.0)).margin(1e-12));

    Tensor two = Tensor::zeros({2, 2});
    REQUIRE_THROWS_AS(cross_entropy(two, {-1, -1}), ValueError);
    REQUIRE_THROWS_AS(cross_entropy(two, {0, 5}), ValueError);

    // ignored rows are excluded from the mean
    Tensor mix({2, 2}, {std::log(3.0), 0.0, 50.0, 0.0});
    double expect = -std::log(3.0 / 4.0);
    REQUIRE(cross_entropy(mix, {0, -1}).item() == Catch::Approx(expect).margin(1e-12));
}

TEST_CASE("cross entropy gradient check", "[tensor]") {
    DetRng rng(31);
    Tensor logits = random_tensor({5, 3}, rng);
    std::vector<int> labels{0, 2, 1, 2, 0};
    double err = max_grad_error([&] { return cross_entropy(logits, labels); }, {logits});
    REQUIRE(err < 1e-5);
}

TEST_CASE("lovasz softmax exact cases", "[tensor]") {
    // perfect one-hot prediction
    Tensor perfect({3, 2}, {1, 0, 0, 1, 1, 0});
    REQUIRE(lovasz_softmax(perfect, {0, 1, 0}).item() == 0.0);

    // tiny instance against the explicit-interpolation oracle
    Tensor probs({3, 2}, {0.7, 0.3, 0.4, 0.6, 0.2, 0.8});
    std::vector<int> labels{0, 0, 1};
    double expect = testsupport::lovasz_softmax_oracle({{0.7, 0.3}, {0.4, 0.6}, {0.2, 0.8}},
                                                       labels);
    REQUIRE(lovasz_softmax(probs, labels).item() == Catch::Approx(expect).margin(1e-12));

    // uniform probabilities, all labels class 0
    Tensor uni({2, 2}, {0.5, 0.5, 0.5, 0.5});
    double expect_uni = testsupport::lovasz_softmax_oracle({{0.5, 0.5}, {0.5, 0.5}}, {0, 0});
    REQUIRE(lovasz_softmax(uni, {0, 0}).item() == Catch::Approx(expect_uni).margin(1e-12));

    Tensor bad({1, 2}, {0.6, 0.6});
    REQUIRE_THROWS_AS(lovasz_softmax(bad, {0}), ValueError);
}

TEST_CASE("lovasz softmax matches oracle on random instances", "[tensor]") {
    DetRng rng(47);
    for (int trial = 0; trial < 1000; ++trial) {
        std::size_t n = 1 + rng.below(6);
        std::size_t cls = 2 + rng.below(2);
        std::vector<std::vector<double>> rows(n, std::vector<double>(cls));
        std::vector<double> flat;
        std::vector<int> labels(n);
        for (std::size_t i = 0; i < n; ++i) {
            double total = 0.0;
            for (auto& v : rows[i]) {
                v = rng.uniform() + 1e-3;
                total += v;
            }
            for (auto& v : rows[i]) v /= total;
            flat.insert(flat.end(), rows[i].begin(), rows[i].end());
            labels[i] = static_cast<int>(rng.below(cls));
        }
        Tensor probs({n, cls}, flat);
        double got = lovasz_softmax(probs, labels).item();
        double expect = testsupport::lovasz_softmax_oracle(rows, labels);
        REQUIRE(std::abs(got - expect) <= 1e-10);
        REQUIRE(got >= -1e-12);
        REQUIRE(got <= 1.0 + 1e-12);
    }
}

TEST_CASE("lovasz softmax gradient through softmax", "[tensor]") {
    DetRng rng(59);
    std::vector<int> labels{0, 1, 2, 0};
    for (int trial = 0; trial < 20; ++trial) {
        Tensor logits = random_tensor({4, 3}, rng);
        double err = max_grad_error(
            [&] { return lovasz_softmax(softmax(logits, 1), labels); }, {logits});
        REQUIRE(err <= 1e-4);
    }
}

TEST_CASE("value used twice accumulates both path gradients", "[tensor]") {
    DetRng rng(77);
    Tensor x = random_tensor({4}, rng);
    x.zero_grad();
    sum(mul(x, x)).backward();
    auto shared = x.grad();

    // single-use refactoring: two distinct leaves holding the same values
    Tensor x1(x.shape(), x.data(), true);
    Tensor x2(x.shape(), x.data(), true);
    sum(mul(x1, x2)).backward();
    for (std::size_t i = 0; i < x.size(); ++i)
        REQUIRE(shared[i] == Catch::Approx(x1.grad()[i] + x2.grad()[i]).margin(1e-14));
}

TEST_CASE("backward accumulates across calls and zero_grad resets", "[tensor]") {
    Tensor x({2}, {1.0, 2.0}, true);
    sum(x).backward();
    sum(x).backward();
    REQUIRE(x.grad()[0] == 2.0);
    x.zero_grad();
    sum(x).backward();
    REQUIRE(x.grad()[0] == 1.0);
}

TEST_CASE("gradient sweep over tensor ops", "[tensor][grad]") {
    for (std::uint64_t seed = 0; seed < 100; ++seed) {
        DetRng rng(1000 + seed);
        {
            Tensor a = random_tensor({2, 3}, rng);
            Tensor b = random_tensor({3, 2}, rng);
            auto w = fixed_weights(4, rng);
            REQUIRE(max_grad_error([&] { return weighted_sum(matmul(a, b), w); }, {a, b}) <= 1e-4);
        }
        {
            Tensor x = random_tensor({2, 4}, rng, true, 2.0);
            auto w = fixed_weights(8, rng);
            REQUIRE(max_grad_error([&] { return weighted_sum(softmax(x, 1), w); }, {x}) <= 1e-4);
        }
        {
            Tensor x = random_tensor({5}, rng);
            auto w = fixed_weights(5, rng);
            REQUIRE(max_grad_error([&] { return weighted_sum(sigmoid(x), w); }, {x}) <= 1e-4);
        }
        {
            Tensor x = random_nonzero({5}, rng);
            auto w = fixed_weights(5, rng);
            REQUIRE(max_grad_error([&] { return weighted_sum(relu(x), w); }, {x}) <= 1e-4);
        }
        {
            Tensor x = random_nonzero({4}, rng, 0.3);
            auto w = fixed_weights(4, rng);
            REQUIRE(max_grad_error([&] { return weighted_sum(l2_normalize(x, 0), w); }, {x}) <=
                    1e-4);
        }
        {
            Tensor a = random_tensor({3, 2}, rng);
            Tensor b = random_tensor({3, 2}, rng);
            REQUIRE(max_grad_error([&] { return mse(a, b); }, {a, b}) <= 1e-4);
        }
        {
            // keep |a-b| away from the L1 kink
            Tensor a = random_nonzero({6}, rng, 1.0);
            Tensor b = Tensor::zeros({6}, true);
            REQUIRE(max_grad_error([&] { return l1(a, b); }, {a, b}) <= 1e-4);
        }
        {
            Tensor a = random_tensor({2, 2}, rng);
            Tensor b = random_tensor({3, 2}, rng);
            auto w = fixed_weights(10, rng);
            REQUIRE(max_grad_error([&] { return weighted_sum(concat({a, b}, 0), w); }, {a, b}) <=
                    1e-4);
        }
        {
            Tensor logits = random_tensor({4, 3}, rng);
            std::vector<int> labels{1, 0, 2, 1};
            REQUIRE(max_grad_error([&] { return cross_entropy(logits, labels); }, {logits}) <=
                    1e-4);
        }
        {
            Tensor logits = random_tensor({3, 3}, rng);
            std::vector<int> labels{2, 0, 1};
            REQUIRE(max_grad_error(
                        [&] { return lovasz_softmax(softmax(logits, 1), labels); }, {logits}) <=
                    1e-4);
        }
        {
            Tensor x = random_tensor({2, 3, 4}, rng);
            auto w = fixed_weights(2 * 3 * 3, rng);
            REQUIRE(max_grad_error([&] { return weighted_sum(forward_diff(x, 2), w); }, {x}) <=
                    1e-4);
        }
        {
            Tensor x = random_tensor({3, 4}, rng);
            Tensor s = random_tensor({3}, rng);
            auto w = fixed_weights(12, rng);
            REQUIRE(max_grad_error([&] { return weighted_sum(scale_rows(x, s), w); }, {x, s}) <=
                    1e-4);
        }
        {
            Tensor x = random_tensor({2, 2, 2}, rng);
            auto w = fixed_weights(4, rng);
            REQUIRE(max_grad_error(
                        [&] {
                            auto slices = slice_mean_groups(x, 2, 2);
                            return add(weighted_sum(slices[0], w),
                                       weighted_sum(slices[1], w));
                        },
                        {x}) <= 1e-4);
        }
        {
            Tensor x = random_tensor({2, 2, 2, 2}, rng);
            Tensor k = random_tensor({2, 2, 3, 3, 3}, rng, true, 0.3);
            auto w = fixed_weights(16, rng);
            REQUIRE(max_grad_error([&] { return weighted_sum(conv3d(x, k), w); }, {x, k}) <=
                    1e-4);
        }
    }
}
