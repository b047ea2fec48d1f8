#include <catch2/catch_amalgamated.hpp>

#include <cmath>
#include <vector>

#include "cmtmae/rng.hpp"
#include "cmtmae/tensor.hpp"
#include "cmtmae/vit.hpp"
#include "fd_check.hpp"

using namespace cmtmae;

namespace {

ViTConfig tiny_config() {
    ViTConfig cfg;
    cfg.image_size = 8;
    cfg.patch_size = 4;  // 4 patches
    cfg.embed_dim = 8;
    cfg.depth = 2;
    cfg.heads = 2;
    cfg.decoder_dim = 8;
    cfg.decoder_depth = 1;
    cfg.decoder_heads = 2;
    cfg.teacher_dim = 8;
    return cfg;
}

ViTConfig desk_config() { return ViTConfig{}; }

std::vector<double> random_image(const ViTConfig& cfg, Rng& rng) {
    std::vector<double> chw(static_cast<size_t>(cfg.channels) * cfg.image_size * cfg.image_size);
    for (double& v : chw) v = rng.next_double();
    return chw;
}

std::vector<Tensor> collect_params(EncoderParams& e, DecoderParams& d) {
    std::vector<Tensor> out;
    for_each_param(e, "", [&](const std::string&, Tensor& t) { out.push_back(t); });
    for_each_param(d, "", [&](const std::string&, Tensor& t) { out.push_back(t); });
    return out;
}

// Analytic parameter counts, written independently of the traversal.
int64_t encoder_param_formula(const ViTConfig& c) {
    const int64_t d = c.embed_dim, h = c.mlp_hidden(), pd = c.patch_dim();
    const int64_t block = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * h + h) + (h * d + d);
    return (pd * d + d) + d + (1 + c.num_patches()) * d + c.depth * block + 2 * d;
}

int64_t decoder_param_formula(const ViTConfig& c) {
    const int64_t d = c.decoder_dim, h = c.decoder_mlp_hidden();
    const int64_t block = 2 * d + (d * 3 * d + 3 * d) + (d * d + d) + 2 * d + (d * h + h) + (h * d + d);
    const int64_t heads = (d * c.teacher_dim + c.teacher_dim) + (d * c.embed_dim + c.embed_dim) +
                          (d * c.patch_dim() + c.patch_dim());
    return (c.embed_dim * d + d) + d + (1 + c.num_patches()) * d + c.decoder_depth * block + 2 * d + heads;
}

}  // namespace

TEST_CASE("patchify layout and round trip") {
    ViTConfig cfg;
    cfg.image_size = 4;
    cfg.patch_size = 2;
    cfg.channels = 1;
    // 4x4 single channel, values 0..15 row-major.
    std::vector<double> chw(16);
    for (int i = 0; i < 16; ++i) chw[i] = i;
    auto p = patchify(chw, cfg);
    REQUIRE(p.shape() == Shape{4, 4});
    // Patch (0,0) covers rows 0-1, cols 0-1.
    REQUIRE(gather_rows(p, {0}).values() == std::vector<double>{0, 1, 4, 5});
    // Patch (1,0) covers rows 2-3, cols 0-1 (row-major grid scan).
    REQUIRE(gather_rows(p, {2}).values() == std::vector<double>{8, 9, 12, 13});
    REQUIRE(unpatchify(p.values(), cfg) == chw);

    Rng rng(2);
    ViTConfig desk = desk_config();
    auto img = random_image(desk, rng);
    REQUIRE(unpatchify(patchify(img, desk).values(), desk) == img);
}

TEST_CASE("parameter counts match analytic formula") {
    Rng rng(1);
    ViTConfig desk = desk_config();
    auto enc = init_encoder_params(desk, rng);
    auto dec = init_decoder_params(desk, rng);
    REQUIRE(count_params(enc) == encoder_param_formula(desk));
    REQUIRE(count_params(dec) == decoder_param_formula(desk));
    // Frozen values for the default config.
    REQUIRE(count_params(enc) == 207424);
    REQUIRE(count_params(dec) == 35472);

    ViTConfig tiny = tiny_config();
    auto enc2 = init_encoder_params(tiny, rng);
    auto dec2 = init_decoder_params(tiny, rng);
    REQUIRE(count_params(enc2) == encoder_param_formula(tiny));
    REQUIRE(count_params(dec2) == decoder_param_formula(tiny));
}

TEST_CASE("init is deterministic per seed") {
    ViTConfig cfg = tiny_config();
    Rng a(5), b(5), c(6);
    auto pa = init_encoder_params(cfg, a);
    auto pb = init_encoder_params(cfg, b);
    auto pc = init_encoder_params(cfg, c);
    REQUIRE(pa.patch_embed.w.values() == pb.patch_embed.w.values());
    REQUIRE(pa.pos_embed.values() == pb.pos_embed.values());
    REQUIRE(pa.patch_embed.w.values() != pc.patch_embed.w.values());
    // Truncated normal init stays within two standard deviations.
    for (double v : pa.patch_embed.w.values()) REQUIRE(std::fabs(v) <= 2.0 * kInitStd);
    // LN starts at identity.
    REQUIRE(pa.blocks[0].ln1.g.values() == std::vector<double>(8, 1.0));
    REQUIRE(pa.blocks[0].ln1.b.values() == std::vector<double>(8, 0.0));
}

TEST_CASE("encode shapes and attention row sums") {
    ViTConfig cfg = tiny_config();
    Rng rng(3);
    auto params = init_encoder_params(cfg, rng);
    auto patches = patchify(random_image(cfg, rng), cfg);

    auto full = encode(patches, MaskSet{}, params, cfg);
    REQUIRE(full.full_image);
    REQUIRE(full.tokens.shape() == Shape{5, 8});
    REQUIRE(full.attention_last.size() == 2);
    for (const auto& head : full.attention_last) {
        REQUIRE(head.size() == 25);
        for (int i = 0; i < 5; ++i) {
            double s = 0.0;
            for (int j = 0; j < 5; ++j) s += head[i * 5 + j];
            REQUIRE_THAT(s, Catch::Matchers::WithinAbs(1.0, 1e-9));
        }
    }

    MaskSet mask{4, {1, 3}};
    auto part = encode(patches, mask, params, cfg);
    REQUIRE_FALSE(part.full_image);
    REQUIRE(part.tokens.shape() == Shape{3, 8});
    REQUIRE(part.patch_rows == std::vector<int>{0, 2});
}

TEST_CASE("masked patch content cannot influence the encoder") {
    ViTConfig cfg = tiny_config();
    Rng rng(4);
    auto params = init_encoder_params(cfg, rng);
    auto img = random_image(cfg, rng);
    MaskSet mask{4, {0, 2}};

    auto before = encode(patchify(img, cfg), mask, params, cfg);
    // Scribble over patch 0 (rows 0-3, cols 0-3) and patch 2 (rows 4-7, cols 0-3).
    for (int c = 0; c < cfg.channels; ++c)
        for (int y = 0; y < 8; ++y)
            for (int x = 0; x < 4; ++x) img[(c * 8 + y) * 8 + x] = 0.123 + y + x + c;
    auto after = encode(patchify(img, cfg), mask, params, cfg);

    REQUIRE(before.tokens.values() == after.tokens.values());
    REQUIRE(before.attention_last == after.attention_last);
}

TEST_CASE("encode validates mask") {
    ViTConfig cfg = tiny_config();
    Rng rng(5);
    auto params = init_encoder_params(cfg, rng);
    auto patches = patchify(random_image(cfg, rng), cfg);
    REQUIRE_THROWS_AS(encode(patches, MaskSet{16, {1, 3}}, params, cfg), DimensionError);
    REQUIRE_THROWS_AS(encode(patches, MaskSet{4, {3, 1}}, params, cfg), ContractError);
    REQUIRE_THROWS_AS(encode(patches, MaskSet{4, {0, 1, 2, 3}}, params, cfg), ContractError);
}

TEST_CASE("extract_attention worked examples") {
    EncoderOutput enc;
    enc.full_image = true;
    enc.total_patches = 2;
    // Two heads, T=3. CLS rows [0, .6, .4] and [0, .2, .8].
    enc.attention_last = {{0.0, 0.6, 0.4, 0, 1, 0, 0, 0, 1},
                          {0.0, 0.2, 0.8, 0, 1, 0, 0, 0, 1}};
    auto map = extract_attention(enc);
    REQUIRE_THAT(map.scores[0], Catch::Matchers::WithinAbs(0.4, 1e-12));
    REQUIRE_THAT(map.scores[1], Catch::Matchers::WithinAbs(0.6, 1e-12));

    // CLS self-attention is dropped and the rest renormalized.
    enc.attention_last = {{0.5, 0.3, 0.2, 0, 1, 0, 0, 0, 1}};
    map = extract_attention(enc);
    REQUIRE_THAT(map.scores[0], Catch::Matchers::WithinAbs(0.6, 1e-12));
    REQUIRE_THAT(map.scores[1], Catch::Matchers::WithinAbs(0.4, 1e-12));

    // cls_max takes the per-patch max over heads before renormalizing.
    enc.attention_last = {{0.0, 0.6, 0.4, 0, 1, 0, 0, 0, 1},
                          {0.0, 0.2, 0.8, 0, 1, 0, 0, 0, 1}};
    map = extract_attention(enc, "cls_max");
    REQUIRE_THAT(map.scores[0], Catch::Matchers::WithinAbs(0.6 / 1.4, 1e-12));
    REQUIRE_THAT(map.scores[1], Catch::Matchers::WithinAbs(0.8 / 1.4, 1e-12));

    REQUIRE_THROWS_AS(extract_attention(enc, "diagonal"), ConfigError);
}

TEST_CASE("extract_attention on real encode is a valid distribution") {
    ViTConfig cfg = tiny_config();
    Rng rng(6);
    auto params = init_encoder_params(cfg, rng);
    auto patches = patchify(random_image(cfg, rng), cfg);
    auto enc = encode(patches, MaskSet{}, params, cfg);
    for (const char* mode : {"cls_mean", "cls_max", "rows_mean"}) {
        auto map = extract_attention(enc, mode);
        REQUIRE(map.size() == 4);
        REQUIRE_NOTHROW(map.validate());
    }
    // Masked encode cannot produce a map.
    auto part = encode(patches, MaskSet{4, {1}}, params, cfg);
    REQUIRE_THROWS_AS(extract_attention(part), ContractError);
}

TEST_CASE("decode shapes and partition validation") {
    ViTConfig cfg = tiny_config();
    Rng rng(7);
    auto enc_p = init_encoder_params(cfg, rng);
    auto dec_p = init_decoder_params(cfg, rng);
    auto patches = patchify(random_image(cfg, rng), cfg);

    MaskSet mask{4, {1, 3}};
    auto enc = encode(patches, mask, enc_p, cfg);
    auto dec = decode(enc, mask, dec_p, cfg);
    REQUIRE(dec.pred_teacher.shape() == Shape{4, 8});
    REQUIRE(dec.pred_student.shape() == Shape{4, 8});
    REQUIRE(dec.pred_pixel.shape() == Shape{4, cfg.patch_dim()});

    // Mismatched mask does not partition the patches.
    MaskSet wrong{4, {0, 1}};
    REQUIRE_THROWS_AS(decode(enc, wrong, dec_p, cfg), ContractError);
    MaskSet overlap{4, {0, 3}};
    REQUIRE_THROWS_AS(decode(enc, overlap, dec_p, cfg), ContractError);

    // Full-image encode decodes only with an empty mask.
    auto full = encode(patches, MaskSet{}, enc_p, cfg);
    REQUIRE_NOTHROW(decode(full, MaskSet{}, dec_p, cfg));
    REQUIRE_THROWS_AS(decode(full, mask, dec_p, cfg), ContractError);
}

TEST_CASE("mask position determines which rows are mask-token derived") {
    // With depth 0 on both sides every sequence row is processed
    // independently, so swapping the masked set must change predictions
    // exactly at positions whose masked status changed.
    ViTConfig cfg = tiny_config();
    cfg.depth = 0;
    cfg.decoder_depth = 0;
    Rng rng(8);
    auto enc_p = init_encoder_params(cfg, rng);
    auto dec_p = init_decoder_params(cfg, rng);
    auto patches = patchify(random_image(cfg, rng), cfg);

    MaskSet mask_a{4, {0, 1}};
    MaskSet mask_b{4, {1, 2}};
    auto pred_a = decode(encode(patches, mask_a, enc_p, cfg), mask_a, dec_p, cfg);
    auto pred_b = decode(encode(patches, mask_b, enc_p, cfg), mask_b, dec_p, cfg);

    auto row = [&](const Tensor& t, int r) {
        return std::vector<double>(t.values().begin() + r * t.cols(),
                                   t.values().begin() + (r + 1) * t.cols());
    };
    // Patch 1 masked in both, patch 3 visible in both: identical rows.
    REQUIRE(row(pred_a.pred_teacher, 1) == row(pred_b.pred_teacher, 1));
    REQUIRE(row(pred_a.pred_teacher, 3) == row(pred_b.pred_teacher, 3));
    // Patches 0 and 2 changed status: rows must differ.
    REQUIRE(row(pred_a.pred_teacher, 0) != row(pred_b.pred_teacher, 0));
    REQUIRE(row(pred_a.pred_teacher, 2) != row(pred_b.pred_teacher, 2));
}

TEST_CASE("encoder-decoder gradients match finite differences") {
    ViTConfig cfg = tiny_config();
    Rng rng(9);
    auto enc_p = init_encoder_params(cfg, rng);
    auto dec_p = init_decoder_params(cfg, rng);
    auto patches = patchify(random_image(cfg, rng), cfg);
    MaskSet mask{4, {1, 2}};

    Tensor target_t = Tensor::from_values({2, 8}, [&] {
        std::vector<double> v(16);
        for (double& x : v) x = rng.next_normal();
        return v;
    }());
    Tensor target_s = Tensor::from_values({2, 8}, [&] {
        std::vector<double> v(16);
        for (double& x : v) x = rng.next_normal();
        return v;
    }());

    auto fwd = [&] {
        auto enc = encode(patches, mask, enc_p, cfg);
        auto dec = decode(enc, mask, dec_p, cfg);
        auto pt = gather_rows(dec.pred_teacher, mask.indices);
        auto ps = gather_rows(dec.pred_student, mask.indices);
        return add(scale(mse(ps, target_s), 0.3), scale(mse(pt, target_t), 0.7));
    };

    auto leaves = collect_params(enc_p, dec_p);
    auto rep = fd::check_gradients(fwd, leaves);
    INFO("checked " << rep.checked << " elements, worst ad=" << rep.worst_ad
                    << " fd=" << rep.worst_fd);
    REQUIRE(rep.max_rel_err < 1e-4);
}

TEST_CASE("frozen params build no graph") {
    ViTConfig cfg = tiny_config();
    Rng rng(10);
    auto params = init_encoder_params(cfg, rng, /*trainable=*/false);
    auto patches = patchify(random_image(cfg, rng), cfg);
    auto enc = encode(patches, MaskSet{}, params, cfg);
    REQUIRE_FALSE(enc.tokens.requires_grad());
}

TEST_CASE("mean_patch_tokens averages final tokens") {
    EncoderOutput enc;
    enc.full_image = true;
    enc.total_patches = 2;
    enc.tokens = Tensor::from_values({3, 2}, {9, 9, 1, 2, 3, 4});  // CLS row ignored
    auto pooled = mean_patch_tokens(enc);
    REQUIRE(pooled == std::vector<double>{2, 3});
}
