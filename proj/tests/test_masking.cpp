#include <catch2/catch_amalgamated.hpp>

#include <algorithm>
#include <map>
#include <numeric>
#include <vector>

#include "cmtmae/masking.hpp"
#include "cmtmae/rng.hpp"

using namespace cmtmae;

namespace {

AttentionMap random_map(int n, Rng& rng) {
    AttentionMap m;
    m.scores.resize(n);
    double s = 0.0;
    for (double& v : m.scores) {
        v = rng.next_double() + 1e-9;
        s += v;
    }
    for (double& v : m.scores) v /= s;
    return m;
}

// Independent selection oracle: full stable sort by descending score (stable
// sort of ascending indices = lower index wins ties), take k, sort ascending.
std::vector<int> brute_force_topk(const std::vector<double>& scores, int k) {
    std::vector<int> order(scores.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(),
                     [&](int a, int b) { return scores[a] > scores[b]; });
    order.resize(k);
    std::sort(order.begin(), order.end());
    return order;
}

}  // namespace

TEST_CASE("topk selection worked example") {
    AttentionMap m{{0.1, 0.4, 0.3, 0.2}};
    auto mask = select_mask_topk(m, 0.5);
    REQUIRE(mask.indices == std::vector<int>{1, 2});
    REQUIRE(mask.total == 4);
    REQUIRE(mask.complement() == std::vector<int>{0, 3});
}

TEST_CASE("topk ties break toward lower index") {
    AttentionMap m{{0.25, 0.25, 0.25, 0.25}};
    REQUIRE(select_mask_topk(m, 0.5).indices == std::vector<int>{0, 1});

    AttentionMap mixed{{0.2, 0.3, 0.2, 0.3}};
    REQUIRE(select_mask_topk(mixed, 0.5).indices == std::vector<int>{1, 3});
    REQUIRE(select_mask_topk(mixed, 0.75).indices == std::vector<int>{0, 1, 3});
}

TEST_CASE("least_attended polarity flips the selection") {
    AttentionMap m{{0.1, 0.4, 0.3, 0.2}};
    auto mask = select_mask_topk(m, 0.5, MaskPolarity::least_attended);
    REQUIRE(mask.indices == std::vector<int>{0, 3});
}

TEST_CASE("mask_count matches exact ceil") {
    REQUIRE(mask_count(0.75, 64) == 48);
    REQUIRE(mask_count(0.75, 196) == 147);
    REQUIRE(mask_count(0.101, 10) == 2);
    // 0.1*80 is 8.000000000000002 in doubles; must not round up to 9.
    REQUIRE(mask_count(0.1, 80) == 8);
    REQUIRE(mask_count(0.5, 3) == 2);
    REQUIRE_THROWS_AS(mask_count(0.0, 64), ConfigError);
    REQUIRE_THROWS_AS(mask_count(1.0, 64), ConfigError);
    REQUIRE_THROWS_AS(mask_count(0.99, 2), ConfigError);  // would mask everything
}

TEST_CASE("topk against brute-force sort oracle") {
    Rng rng(1234);
    for (int trial = 0; trial < 1000; ++trial) {
        const int n = 2 + static_cast<int>(rng.next_below(63));
        auto m = random_map(n, rng);
        // Inject ties on some trials, then renormalize.
        if (trial % 3 == 0 && n >= 4) {
            m.scores[1] = m.scores[0];
            m.scores[3] = m.scores[2];
            const double s = std::accumulate(m.scores.begin(), m.scores.end(), 0.0);
            for (double& v : m.scores) v /= s;
        }
        double ratio = 0.05 + 0.9 * rng.next_double();
        int k;
        try {
            k = mask_count(ratio, n);
        } catch (const ConfigError&) {
            continue;  // ratio leaves no unmasked patch at this n
        }
        auto mask = select_mask_topk(m, ratio);
        REQUIRE(mask.indices == brute_force_topk(m.scores, k));
    }
}

TEST_CASE("random selection is uniform-ish, distinct and deterministic") {
    Rng rng(77);
    auto a = select_mask_random(64, 0.75, rng);
    REQUIRE(a.count() == 48);
    REQUIRE(std::is_sorted(a.indices.begin(), a.indices.end()));
    REQUIRE(std::adjacent_find(a.indices.begin(), a.indices.end()) == a.indices.end());
    for (int i : a.indices) {
        REQUIRE(i >= 0);
        REQUIRE(i < 64);
    }

    Rng rng2(77);
    auto b = select_mask_random(64, 0.75, rng2);
    REQUIRE(a.indices == b.indices);

    // Coverage: over many draws every index should appear.
    std::vector<int> hits(16, 0);
    for (int t = 0; t < 500; ++t) {
        auto m = select_mask_random(16, 0.5, rng);
        for (int i : m.indices) ++hits[i];
    }
    for (int h : hits) REQUIRE(h > 150);  // expectation 250
}

TEST_CASE("stochastic selection tracks score weights (Monte Carlo)") {
    AttentionMap m{{0.7, 0.1, 0.1, 0.1}};
    Rng rng(5);
    const int trials = 20000;
    int hit0 = 0;
    for (int t = 0; t < trials; ++t) {
        auto mask = select_mask_stochastic(m, 0.26, rng);  // k=2 of 4
        REQUIRE(mask.count() == 2);
        if (mask.contains(0)) ++hit0;
    }
    // P(0 in first two E-S draws) for w=(.7,.1,.1,.1) is about 0.96.
    const double freq = static_cast<double>(hit0) / trials;
    REQUIRE(freq > 0.93);
    REQUIRE(freq < 0.99);
}

TEST_CASE("aggregate_attention worked example") {
    AttentionMap s{{0.2, 0.8}};
    AttentionMap t{{0.6, 0.4}};
    auto c = aggregate_attention(s, t, 0.3);
    REQUIRE_THAT(c.scores[0], Catch::Matchers::WithinAbs(0.48, 1e-12));
    REQUIRE_THAT(c.scores[1], Catch::Matchers::WithinAbs(0.52, 1e-12));
}

TEST_CASE("aggregate_attention endpoints are bit-exact") {
    Rng rng(9);
    auto s = random_map(32, rng);
    auto t = random_map(32, rng);
    REQUIRE(aggregate_attention(s, t, 0.0).scores == t.scores);
    REQUIRE(aggregate_attention(s, t, 1.0).scores == s.scores);
}

TEST_CASE("aggregate_attention against scalar oracle") {
    Rng rng(10);
    double worst = 0.0;
    for (int trial = 0; trial < 10000; ++trial) {
        const int n = 2 + static_cast<int>(rng.next_below(31));
        auto s = random_map(n, rng);
        auto t = random_map(n, rng);
        const double alpha = rng.next_double();
        auto c = aggregate_attention(s, t, alpha);
        for (int i = 0; i < n; ++i) {
            const double expect = alpha * s.scores[i] + (1.0 - alpha) * t.scores[i];
            worst = std::max(worst, std::fabs(c.scores[i] - expect));
        }
    }
    REQUIRE(worst <= 1e-12);
}

TEST_CASE("aggregate_attention validates inputs") {
    AttentionMap s{{0.5, 0.5}};
    AttentionMap t{{0.3, 0.3, 0.4}};
    REQUIRE_THROWS_AS(aggregate_attention(s, t, 0.5), DimensionError);
    AttentionMap t2{{0.6, 0.4}};
    REQUIRE_THROWS_AS(aggregate_attention(s, t2, 1.5), ConfigError);
    REQUIRE_THROWS_AS(aggregate_attention(s, t2, -0.1), ConfigError);
}

TEST_CASE("attention map validation") {
    AttentionMap neg{{0.5, 0.6, -0.1}};
    REQUIRE_THROWS_AS(neg.validate(), ContractError);
    AttentionMap off{{0.5, 0.6}};
    REQUIRE_THROWS_AS(off.validate(), ContractError);
    AttentionMap ok{{0.5, 0.5}};
    REQUIRE_NOTHROW(ok.validate());
}

TEST_CASE("mode and polarity parsing") {
    REQUIRE(parse_mask_polarity("most") == MaskPolarity::most_attended);
    REQUIRE(parse_mask_polarity("least") == MaskPolarity::least_attended);
    REQUIRE_THROWS_AS(parse_mask_polarity("sideways"), ConfigError);
    REQUIRE(parse_selection_mode("topk") == SelectionMode::topk);
    REQUIRE(parse_selection_mode("stochastic") == SelectionMode::stochastic);
    REQUIRE(parse_selection_mode("random") == SelectionMode::random);
    REQUIRE_THROWS_AS(parse_selection_mode("always"), ConfigError);
    REQUIRE(to_string(MaskPolarity::least_attended) == "least");
    REQUIRE(to_string(SelectionMode::stochastic) == "stochastic");
}
