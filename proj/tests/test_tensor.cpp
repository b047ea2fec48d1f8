#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <limits>
#include <vector>

#include "cmtmae/rng.hpp"
#include "cmtmae/tensor.hpp"
#include "fd_check.hpp"

using namespace cmtmae;

namespace {

Tensor random_tensor(Shape shape, Rng& rng, bool requires_grad = true, double scl = 1.0) {
    std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
    for (double& x : v) x = rng.next_normal() * scl;
    return Tensor::from_values(std::move(shape), std::move(v), requires_grad);
}

}  // namespace

TEST_CASE("matmul values") {
    auto a = Tensor::from_values({2, 2}, {1, 2, 3, 4});
    auto eye = Tensor::from_values({2, 2}, {1, 0, 0, 1});
    auto c = matmul(a, eye);
    REQUIRE(c.values() == std::vector<double>{1, 2, 3, 4});

    auto row = Tensor::from_values({1, 2}, {1, 2});
    auto col = Tensor::from_values({2, 1}, {3, 4});
    REQUIRE(matmul(row, col).item() == 11.0);

    auto b = Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
    auto ab = matmul(a, b);
    REQUIRE(ab.shape() == Shape{2, 3});
    REQUIRE(ab.values() == std::vector<double>{9, 12, 15, 19, 26, 33});
}

TEST_CASE("matmul shape mismatch names both shapes") {
    auto a = Tensor::zeros({2, 3});
    auto b = Tensor::zeros({4, 5});
    REQUIRE_THROWS_MATCHES(matmul(a, b), DimensionError,
                           Catch::Matchers::MessageMatches(
                               Catch::Matchers::ContainsSubstring("[2,3]") &&
                               Catch::Matchers::ContainsSubstring("[4,5]")));
}

TEST_CASE("softmax values and properties") {
    auto x = Tensor::from_values({1, 2}, {0.0, std::log(3.0)});
    auto y = softmax(x);
    REQUIRE_THAT(y.values()[0], Catch::Matchers::WithinAbs(0.25, 1e-12));
    REQUIRE_THAT(y.values()[1], Catch::Matchers::WithinAbs(0.75, 1e-12));

    Rng rng(7);
    auto m = random_tensor({5, 9}, rng, false, 3.0);
    auto s = softmax(m);
    for (int i = 0; i < 5; ++i) {
        double row_sum = 0.0;
        for (int j = 0; j < 9; ++j) {
            const double v = s.values()[i * 9 + j];
            REQUIRE(v > 0.0);
            REQUIRE(v < 1.0);
            row_sum += v;
        }
        REQUIRE_THAT(row_sum, Catch::Matchers::WithinAbs(1.0, 1e-12));
    }

    // Stability: large magnitudes must not overflow.
    auto big = Tensor::from_values({1, 3}, {1000.0, 1001.0, 999.0});
    REQUIRE(std::isfinite(softmax(big).values()[1]));
}

TEST_CASE("layer_norm values") {
    auto flat = Tensor::from_values({1, 4}, {1, 1, 1, 1});
    auto y = layer_norm(flat, 1e-6);
    for (double v : y.values()) REQUIRE_THAT(v, Catch::Matchers::WithinAbs(0.0, 1e-12));

    auto two = Tensor::from_values({1, 2}, {1.0, 3.0});
    auto z = layer_norm(two, 1e-6);
    REQUIRE_THAT(z.values()[0], Catch::Matchers::WithinAbs(-1.0, 1e-6));
    REQUIRE_THAT(z.values()[1], Catch::Matchers::WithinAbs(1.0, 1e-6));

    Rng rng(11);
    auto m = random_tensor({6, 16}, rng, false, 2.5);
    auto n = layer_norm(m, 1e-6);
    for (int i = 0; i < 6; ++i) {
        double mean = 0.0, var = 0.0;
        for (int j = 0; j < 16; ++j) mean += n.values()[i * 16 + j];
        mean /= 16;
        for (int j = 0; j < 16; ++j) {
            const double d = n.values()[i * 16 + j] - mean;
            var += d * d;
        }
        var /= 16;
        REQUIRE_THAT(mean, Catch::Matchers::WithinAbs(0.0, 1e-9));
        REQUIRE_THAT(var, Catch::Matchers::WithinAbs(1.0, 1e-6));
    }
}

TEST_CASE("backward of sum gives ones") {
    Rng rng(3);
    auto x = random_tensor({3, 4}, rng);
    backward(sum(x));
    for (double g : x.grad()) REQUIRE(g == 1.0);
}

TEST_CASE("mse against own detach has zero gradient") {
    Rng rng(4);
    auto x = random_tensor({3, 4}, rng);
    auto loss = mse(x, x.detach());
    REQUIRE_THAT(loss.item(), Catch::Matchers::WithinAbs(0.0, 1e-15));
    backward(loss);
    for (double g : x.grad()) REQUIRE(g == 0.0);
}

TEST_CASE("detach blocks gradient flow and copies values") {
    Rng rng(5);
    auto x = random_tensor({2, 2}, rng);
    auto d = x.detach();
    REQUIRE_FALSE(d.requires_grad());
    REQUIRE(d.values() == x.values());
    REQUIRE_FALSE(d.same_node(x));
}

TEST_CASE("requires_grad propagates through ops") {
    auto frozen = Tensor::full({2, 2}, 1.0, false);
    auto live = Tensor::full({2, 2}, 2.0, true);
    REQUIRE_FALSE(add(frozen, frozen).requires_grad());
    REQUIRE(add(frozen, live).requires_grad());
    REQUIRE(matmul(live, frozen).requires_grad());
}

TEST_CASE("fanout accumulates gradients once per path") {
    auto x = Tensor::scalar(3.0, true);
    // y = x*x + x*x: dy/dx = 4x = 12.
    auto y = add(mul(x, x), mul(x, x));
    backward(y);
    REQUIRE(x.grad()[0] == 12.0);
}

TEST_CASE("backward requires scalar loss") {
    auto x = Tensor::full({2, 2}, 1.0, true);
    REQUIRE_THROWS_AS(backward(add(x, x)), ContractError);
}

TEST_CASE("finite checks flag non-finite op outputs") {
    const bool saved = finite_checks_enabled();
    auto x = Tensor::from_values({1, 2}, {1.0, 2.0}, true);
    const double inf = std::numeric_limits<double>::infinity();

    set_finite_checks(true);
    REQUIRE_THROWS_AS(scale(x, inf), NumericError);

    set_finite_checks(false);
    REQUIRE_NOTHROW(scale(x, inf));

    set_finite_checks(saved);
}

TEST_CASE("gather and scatter round trip") {
    auto base = Tensor::from_values({4, 2}, {0, 0, 1, 1, 2, 2, 3, 3}, true);
    auto rows = gather_rows(base, {2, 0});
    REQUIRE(rows.values() == std::vector<double>{2, 2, 0, 0});

    auto repl = Tensor::from_values({2, 2}, {9, 9, 8, 8}, true);
    auto out = scatter_rows(base, {1, 3}, repl);
    REQUIRE(out.values() == std::vector<double>{0, 0, 9, 9, 2, 2, 8, 8});
}

TEST_CASE("scatter_rows gradients split between base and rows") {
    auto base = Tensor::from_values({3, 1}, {1, 2, 3}, true);
    auto rows = Tensor::from_values({1, 1}, {10}, true);
    auto out = scatter_rows(base, {1}, rows);
    backward(sum(out));
    REQUIRE(base.grad() == std::vector<double>{1, 0, 1});
    REQUIRE(rows.grad() == std::vector<double>{1});
}

TEST_CASE("transpose and reshape round trips") {
    auto a = Tensor::from_values({2, 3}, {1, 2, 3, 4, 5, 6});
    auto t = transpose(a);
    REQUIRE(t.shape() == Shape{3, 2});
    REQUIRE(transpose(t).values() == a.values());
    auto r = reshape(a, {3, 2});
    REQUIRE(r.values() == a.values());
    REQUIRE_THROWS_AS(reshape(a, {4, 2}), DimensionError);
}

TEST_CASE("concat and slice") {
    auto a = Tensor::from_values({1, 2}, {1, 2}, true);
    auto b = Tensor::from_values({2, 2}, {3, 4, 5, 6}, true);
    auto cat = concat_rows({a, b});
    REQUIRE(cat.values() == std::vector<double>{1, 2, 3, 4, 5, 6});
    REQUIRE(slice_rows(cat, 1, 3).values() == std::vector<double>{3, 4, 5, 6});

    auto cc = concat_cols({b, b});
    REQUIRE(cc.shape() == Shape{2, 4});
    REQUIRE(cc.values() == std::vector<double>{3, 4, 3, 4, 5, 6, 5, 6});
    REQUIRE(slice_cols(cc, 1, 3).values() == std::vector<double>{4, 3, 6, 5});
}

TEST_CASE("tile_rows broadcasts and sums gradients") {
    auto row = Tensor::from_values({1, 3}, {1, 2, 3}, true);
    auto tiled = tile_rows(row, 4);
    REQUIRE(tiled.shape() == Shape{4, 3});
    backward(sum(tiled));
    REQUIRE(row.grad() == std::vector<double>{4, 4, 4});
}

TEST_CASE("values_mut rejected on op results") {
    auto x = Tensor::full({2}, 1.0, true);
    auto y = scale(x, 2.0);
    REQUIRE_THROWS_AS(y.values_mut(), ContractError);
}

// Finite differences are the ground truth for every backward implementation.
TEST_CASE("gradient oracle per op") {
    Rng rng(42);
    const double tol = 1e-4;

    SECTION("add/sub/mul/scale") {
        auto a = random_tensor({3, 4}, rng);
        auto b = random_tensor({3, 4}, rng);
        auto w = random_tensor({3, 4}, rng, false);
        auto fwd = [&] { return sum(mul(w, add(mul(a, b), sub(scale(a, 0.7), b)))); };
        REQUIRE(fd::check_gradients(fwd, {a, b}).max_rel_err < tol);
    }

    SECTION("matmul") {
        auto a = random_tensor({3, 5}, rng);
        auto b = random_tensor({5, 2}, rng);
        auto w = random_tensor({3, 2}, rng, false);
        auto fwd = [&] { return sum(mul(w, matmul(a, b))); };
        REQUIRE(fd::check_gradients(fwd, {a, b}).max_rel_err < tol);
    }

    SECTION("softmax") {
        auto x = random_tensor({4, 6}, rng, true, 2.0);
        auto w = random_tensor({4, 6}, rng, false);
        auto fwd = [&] { return sum(mul(w, softmax(x))); };
        REQUIRE(fd::check_gradients(fwd, {x}).max_rel_err < tol);
    }

    SECTION("layer_norm") {
        auto x = random_tensor({4, 8}, rng, true, 1.5);
        auto w = random_tensor({4, 8}, rng, false);
        auto fwd = [&] { return sum(mul(w, layer_norm(x, 1e-6))); };
        REQUIRE(fd::check_gradients(fwd, {x}).max_rel_err < tol);
    }

    SECTION("layer_norm_affine") {
        auto x = random_tensor({3, 8}, rng, true, 1.5);
        auto g = random_tensor({8}, rng);
        auto b = random_tensor({8}, rng);
        auto w = random_tensor({3, 8}, rng, false);
        auto fwd = [&] { return sum(mul(w, layer_norm_affine(x, g, b, 1e-6))); };
        REQUIRE(fd::check_gradients(fwd, {x, g, b}).max_rel_err < tol);
    }

    SECTION("gelu") {
        auto x = random_tensor({2, 9}, rng, true, 2.0);
        auto w = random_tensor({2, 9}, rng, false);
        auto fwd = [&] { return sum(mul(w, gelu(x))); };
        REQUIRE(fd::check_gradients(fwd, {x}).max_rel_err < tol);
    }

    SECTION("transpose/reshape/slice/concat/tile/gather/scatter") {
        auto a = random_tensor({3, 4}, rng);
        auto row = random_tensor({1, 4}, rng);
        auto w = random_tensor({6, 2}, rng, false);
        auto fwd = [&] {
            auto stack = concat_rows({a, tile_rows(row, 3)});          // [6,4]
            auto mixed = scatter_rows(stack, {0, 5}, gather_rows(stack, {2, 1}));
            auto cut = slice_cols(mixed, 1, 3);                        // [6,2]
            return sum(mul(w, reshape(transpose(cut), {6, 2})));
        };
        REQUIRE(fd::check_gradients(fwd, {a, row}).max_rel_err < tol);
    }

    SECTION("mse") {
        auto a = random_tensor({4, 3}, rng);
        auto b = random_tensor({4, 3}, rng);
        auto fwd = [&] { return mse(a, b); };
        REQUIRE(fd::check_gradients(fwd, {a, b}).max_rel_err < tol);
    }

    SECTION("composite reuse graph") {
        auto x = random_tensor({2, 6}, rng);
        auto target = x.detach();  // fixed target; must not track FD perturbations
        auto fwd = [&] {
            auto h = gelu(x);
            auto s = softmax(h);
            return add(mse(s, target), mean(mul(h, h)));
        };
        REQUIRE(fd::check_gradients(fwd, {x}).max_rel_err < tol);
    }
}

TEST_CASE("determinism: identical graphs give bit-identical grads") {
    auto run = [] {
        Rng rng(99);
        auto a = random_tensor({8, 8}, rng);
        auto b = random_tensor({8, 8}, rng);
        auto loss = mse(gelu(matmul(a, softmax(b))), layer_norm(a, 1e-6).detach());
        backward(loss);
        std::vector<double> out = a.grad();
        out.insert(out.end(), b.grad().begin(), b.grad().end());
        out.push_back(loss.item());
        return out;
    };
    REQUIRE(run() == run());
}
