#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "cmtmae/momentum.hpp"
#include "cmtmae/rng.hpp"
#include "cmtmae/vit.hpp"

using namespace cmtmae;

namespace {

ViTConfig tiny_config() {
    ViTConfig cfg;
    cfg.image_size = 8;
    cfg.patch_size = 4;
    cfg.embed_dim = 8;
    cfg.depth = 2;
    cfg.heads = 2;
    cfg.decoder_dim = 8;
    cfg.decoder_depth = 1;
    cfg.decoder_heads = 2;
    cfg.teacher_dim = 8;
    return cfg;
}

void fill_params(EncoderParams& p, double value) {
    for_each_param(p, "", [&](const std::string&, Tensor& t) {
        for (double& v : t.values_mut()) v = value;
    });
}

std::vector<double> flatten(const EncoderParams& p) {
    std::vector<double> out;
    for_each_param(const_cast<EncoderParams&>(p), "", [&](const std::string&, Tensor& t) {
        out.insert(out.end(), t.values().begin(), t.values().end());
    });
    return out;
}

}  // namespace

TEST_CASE("init_momentum copies exactly and decouples storage") {
    ViTConfig cfg = tiny_config();
    Rng rng(1);
    auto online = init_encoder_params(cfg, rng);
    auto state = init_momentum(online, 0.999);
    REQUIRE(flatten(state.shadow) == flatten(online));
    // Shadow is frozen and storage-independent.
    for_each_param(state.shadow, "", [&](const std::string&, Tensor& t) {
        REQUIRE_FALSE(t.requires_grad());
    });
    online.cls_token.values_mut()[0] += 1.0;
    REQUIRE(state.shadow.cls_token.values()[0] != online.cls_token.values()[0]);

    REQUIRE_THROWS_AS(init_momentum(online, 1.5), ConfigError);
    REQUIRE_THROWS_AS(init_momentum(online, -0.1), ConfigError);
}

TEST_CASE("ema worked example and endpoints") {
    ViTConfig cfg = tiny_config();
    Rng rng(2);
    auto online = init_encoder_params(cfg, rng);
    auto state = init_momentum(online, 0.999);
    fill_params(state.shadow, 1.0);
    fill_params(online, 0.0);

    ema_update(state, online);
    for (double v : flatten(state.shadow)) REQUIRE(v == 0.999);

    // m=0 copies the online weights bit-exactly in one update.
    auto copy_state = init_momentum(online, 0.0);
    fill_params(copy_state.shadow, 7.0);
    Rng rng2(3);
    auto online2 = init_encoder_params(cfg, rng2);
    ema_update(copy_state, online2);
    REQUIRE(flatten(copy_state.shadow) == flatten(online2));

    // m=1 freezes the shadow bit-exactly.
    auto frozen = init_momentum(online2, 1.0);
    auto before = flatten(frozen.shadow);
    for (int i = 0; i < 5; ++i) ema_update(frozen, online);
    REQUIRE(flatten(frozen.shadow) == before);
}

TEST_CASE("ema converges geometrically toward a fixed online value") {
    ViTConfig cfg = tiny_config();
    Rng rng(4);
    auto online = init_encoder_params(cfg, rng);
    for (double m : {0.0, 0.9, 0.999}) {
        auto state = init_momentum(online, m);
        Rng rng2(5);
        auto start_params = init_encoder_params(cfg, rng2);
        state.shadow = clone_params(start_params, false);
        const auto s0 = flatten(state.shadow);
        const auto target = flatten(online);
        const int k = 50;
        for (int i = 0; i < k; ++i) ema_update(state, online);
        const double mk = std::pow(m, k);
        const auto got = flatten(state.shadow);
        for (size_t i = 0; i < got.size(); ++i) {
            const double expect = mk * s0[i] + (1.0 - mk) * target[i];
            REQUIRE_THAT(got[i], Catch::Matchers::WithinAbs(expect, 1e-12));
        }
    }
}

TEST_CASE("additive variant is not a convex combination") {
    ViTConfig cfg = tiny_config();
    Rng rng(6);
    auto online = init_encoder_params(cfg, rng);
    auto state = init_momentum(online, 0.9);
    fill_params(state.shadow, 1.0);
    fill_params(online, 1.0);
    // shadow + (1-m)*online = 1.1, drifting away from the online value.
    ema_update_additive(state, online);
    for (double v : flatten(state.shadow)) REQUIRE_THAT(v, Catch::Matchers::WithinAbs(1.1, 1e-15));
    // Repeated updates diverge instead of converging.
    for (int i = 0; i < 20; ++i) ema_update_additive(state, online);
    REQUIRE(flatten(state.shadow)[0] > 2.0);
}

TEST_CASE("ema rejects mismatched shapes") {
    ViTConfig cfg = tiny_config();
    Rng rng(7);
    auto online = init_encoder_params(cfg, rng);
    auto state = init_momentum(online, 0.9);

    ViTConfig other = cfg;
    other.embed_dim = 16;
    Rng rng2(8);
    auto online_other = init_encoder_params(other, rng2);
    REQUIRE_THROWS_AS(ema_update(state, online_other), DataError);
}

TEST_CASE("momentum_forward yields normalized detached features and a valid map") {
    ViTConfig cfg = tiny_config();
    Rng rng(9);
    auto online = init_encoder_params(cfg, rng);
    auto state = init_momentum(online, 0.999);

    std::vector<double> chw(static_cast<size_t>(cfg.channels) * 64);
    for (double& v : chw) v = rng.next_double();
    auto patches = patchify(chw, cfg);

    auto out = momentum_forward(patches, state, cfg);
    REQUIRE(out.features.shape() == Shape{4, 8});
    REQUIRE_FALSE(out.features.requires_grad());
    REQUIRE_NOTHROW(out.attention.validate());
    REQUIRE(out.attention.size() == 4);

    for (int r = 0; r < 4; ++r) {
        double mean = 0.0, var = 0.0;
        for (int j = 0; j < 8; ++j) mean += out.features.values()[r * 8 + j];
        mean /= 8;
        for (int j = 0; j < 8; ++j) {
            const double d = out.features.values()[r * 8 + j] - mean;
            var += d * d;
        }
        var /= 8;
        REQUIRE_THAT(mean, Catch::Matchers::WithinAbs(0.0, 1e-9));
        // Output variance is v/(v+eps): off 1 by eps/v, so ~1e-5 for v >= 0.1.
        REQUIRE_THAT(var, Catch::Matchers::WithinAbs(1.0, 1e-5));
    }

    // Identical to a direct forward through the shadow weights.
    auto enc = encode(patches, MaskSet{}, state.shadow, cfg);
    auto expect = layer_norm(slice_rows(enc.tokens, 1, 5), kLayerNormEps);
    REQUIRE(out.features.values() == expect.values());
}
