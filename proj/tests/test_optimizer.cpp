#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "cmtmae/optimizer.hpp"
#include "cmtmae/rng.hpp"
#include "cmtmae/tensor.hpp"

using namespace cmtmae;

TEST_CASE("adamw first step on unit gradient moves by about -lr") {
    AdamWConfig cfg;
    cfg.lr = 0.1;  // passed per step; cfg.lr unused by step()
    cfg.beta1 = 0.9;
    cfg.beta2 = 0.999;
    cfg.weight_decay = 0.0;
    AdamW opt(cfg);

    auto theta = Tensor::zeros({1}, true);
    opt.add_param("theta", theta);
    backward(sum(theta));  // gradient 1
    opt.step(0.1);
    REQUIRE_THAT(theta.values()[0], Catch::Matchers::WithinAbs(-0.1, 1e-6));
}

TEST_CASE("zero gradient leaves only weight decay") {
    AdamWConfig cfg;
    cfg.weight_decay = 0.05;
    AdamW opt(cfg);
    auto theta = Tensor::from_values({2}, {4.0, -2.0}, true);
    opt.add_param("theta", theta);
    // No backward ran; grads are absent and treated as zero.
    opt.step(0.1);
    REQUIRE(theta.values()[0] == 4.0 * (1.0 - 0.1 * 0.05));
    REQUIRE(theta.values()[1] == -2.0 * (1.0 - 0.1 * 0.05));
}

TEST_CASE("adamw matches a scalar reference over a random trajectory") {
    AdamWConfig cfg;
    cfg.beta1 = 0.9;
    cfg.beta2 = 0.95;
    cfg.eps = 1e-8;
    cfg.weight_decay = 0.05;
    AdamW opt(cfg);

    Rng rng(11);
    std::vector<double> start(5);
    for (double& v : start) v = rng.next_normal();
    auto theta = Tensor::from_values({5}, start, true);
    opt.add_param("theta", theta);

    // Independent reference state.
    std::vector<double> ref = start, m(5, 0.0), v(5, 0.0);

    for (int t = 1; t <= 40; ++t) {
        std::vector<double> g(5);
        for (double& x : g) x = rng.next_normal();

        auto weights = Tensor::from_values({5}, g);
        backward(sum(mul(weights, theta)));  // d/dtheta = g
        const double lr = 0.01 * (1.0 + 0.1 * t);
        opt.step(lr);
        opt.zero_grad();

        const double bc1 = 1.0 - std::pow(cfg.beta1, t);
        const double bc2 = 1.0 - std::pow(cfg.beta2, t);
        for (int i = 0; i < 5; ++i) {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            ref[i] -= lr * ((m[i] / bc1) / (std::sqrt(v[i] / bc2) + cfg.eps) +
                            cfg.weight_decay * ref[i]);
        }
    }
    for (int i = 0; i < 5; ++i)
        REQUIRE_THAT(theta.values()[i], Catch::Matchers::WithinAbs(ref[i], 1e-15));
}

TEST_CASE("registry audits membership and rejects bad registrations") {
    AdamW opt(AdamWConfig{});
    auto a = Tensor::zeros({3}, true);
    auto frozen = Tensor::zeros({3}, false);
    opt.add_param("a", a);
    REQUIRE(opt.contains(a));
    REQUIRE_FALSE(opt.contains(frozen));
    REQUIRE(opt.size() == 1);
    REQUIRE_THROWS_AS(opt.add_param("a_again", a), ContractError);
    REQUIRE_THROWS_AS(opt.add_param("frozen", frozen), ContractError);
}

TEST_CASE("config validation") {
    AdamWConfig bad;
    bad.beta1 = 1.0;
    REQUIRE_THROWS_AS(AdamW(bad), ConfigError);
    bad = AdamWConfig{};
    bad.eps = 0.0;
    REQUIRE_THROWS_AS(AdamW(bad), ConfigError);
    bad = AdamWConfig{};
    bad.weight_decay = -1.0;
    REQUIRE_THROWS_AS(AdamW(bad), ConfigError);
}

TEST_CASE("lr schedule: linear warmup then cosine to zero") {
    const double base = 2.0;
    // Warmup ramps to base over warmup_steps, reaching it on the last
    // warmup step.
    REQUIRE_THAT(lr_schedule(0, 10, 110, base), Catch::Matchers::WithinAbs(0.2, 1e-15));
    REQUIRE_THAT(lr_schedule(4, 10, 110, base), Catch::Matchers::WithinAbs(1.0, 1e-15));
    REQUIRE_THAT(lr_schedule(9, 10, 110, base), Catch::Matchers::WithinAbs(2.0, 1e-15));
    // Cosine starts at base and halves at the midpoint.
    REQUIRE_THAT(lr_schedule(10, 10, 110, base), Catch::Matchers::WithinAbs(2.0, 1e-15));
    REQUIRE_THAT(lr_schedule(60, 10, 110, base), Catch::Matchers::WithinAbs(1.0, 1e-12));
    // Tail reaches zero.
    REQUIRE(lr_schedule(109, 10, 110, base) > 0.0);
    REQUIRE(lr_schedule(109, 10, 110, base) < 0.002);
    REQUIRE(lr_schedule(110, 10, 110, base) == 0.0);

    // Monotone decreasing after warmup.
    double prev = lr_schedule(10, 10, 110, base);
    for (int s = 11; s < 110; ++s) {
        const double cur = lr_schedule(s, 10, 110, base);
        REQUIRE(cur < prev);
        prev = cur;
    }

    REQUIRE_THROWS_AS(lr_schedule(0, -1, 100, base), ConfigError);
    REQUIRE_THROWS_AS(lr_schedule(0, 200, 100, base), ConfigError);
    REQUIRE_THROWS_AS(lr_schedule(0, 10, 0, base), ConfigError);
}
