#pragma once

// Vision transformer encoder/decoder for masked pretraining. The encoder
// consumes CLS plus unmasked patch tokens only; the decoder rebuilds the full
// sequence with a learned mask token and predicts per-patch targets through
// independent linear heads. All forwards operate on a single image; batching
// is a caller-side loop so each image can carry its own mask.

#include <cstdint>
#include <string>
#include <vector>

#include "cmtmae/errors.hpp"
#include "cmtmae/masking.hpp"
#include "cmtmae/rng.hpp"
#include "cmtmae/tensor.hpp"

namespace cmtmae {

inline constexpr double kLayerNormEps = 1e-6;
inline constexpr double kInitStd = 0.02;

struct ViTConfig {
    int image_size = 32;
    int channels = 3;
    int patch_size = 4;
    int embed_dim = 64;
    int depth = 4;
    int heads = 4;
    int decoder_dim = 32;
    int decoder_depth = 2;
    int decoder_heads = 4;
    double mlp_ratio = 4.0;
    int teacher_dim = 64;  // output width of the decoder's teacher head

    int grid() const { return image_size / patch_size; }
    int num_patches() const { return grid() * grid(); }
    int patch_dim() const { return channels * patch_size * patch_size; }
    int mlp_hidden() const { return static_cast<int>(embed_dim * mlp_ratio); }
    int decoder_mlp_hidden() const { return static_cast<int>(decoder_dim * mlp_ratio); }

    void validate() const {
        if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0)
            throw ConfigError("image_size " + std::to_string(image_size) +
                              " not divisible by patch_size " + std::to_string(patch_size));
        if (channels <= 0) throw ConfigError("channels must be positive");
        if (num_patches() < 2) throw ConfigError("model needs at least 2 patches");
        if (embed_dim <= 0 || heads <= 0 || embed_dim % heads != 0)
            throw ConfigError("embed_dim " + std::to_string(embed_dim) +
                              " not divisible by heads " + std::to_string(heads));
        if (decoder_dim <= 0 || decoder_heads <= 0 || decoder_dim % decoder_heads != 0)
            throw ConfigError("decoder_dim " + std::to_string(decoder_dim) +
                              " not divisible by decoder_heads " + std::to_string(decoder_heads));
        if (depth < 0 || decoder_depth < 0) throw ConfigError("depth must be non-negative");
        if (mlp_ratio <= 0.0) throw ConfigError("mlp_ratio must be positive");
        if (teacher_dim <= 0) throw ConfigError("teacher_dim must be positive");
    }
};

// ---- parameters ----

struct LinearParams {
    Tensor w;  // [in, out]
    Tensor b;  // [1, out]
};

struct LayerNormParams {
    Tensor g;  // [dim]
    Tensor b;  // [dim]
};

struct BlockParams {
    LayerNormParams ln1;
    LinearParams qkv;   // [dim, 3*dim]
    LinearParams proj;  // [dim, dim]
    LayerNormParams ln2;
    LinearParams fc1;   // [dim, hidden]
    LinearParams fc2;   // [hidden, dim]
};

struct EncoderParams {
    LinearParams patch_embed;  // [patch_dim, embed_dim]
    Tensor cls_token;          // [1, embed_dim]
    Tensor pos_embed;          // [1+num_patches, embed_dim]
    std::vector<BlockParams> blocks;
    LayerNormParams norm;
};

struct DecoderParams {
    LinearParams embed;  // [embed_dim, decoder_dim]
    Tensor mask_token;   // [1, decoder_dim]
    Tensor pos_embed;    // [1+num_patches, decoder_dim]
    std::vector<BlockParams> blocks;
    LayerNormParams norm;
    LinearParams head_teacher;  // [decoder_dim, teacher_dim]
    LinearParams head_student;  // [decoder_dim, embed_dim]
    LinearParams head_pixel;    // [decoder_dim, patch_dim]
};

namespace detail {

inline Tensor trunc_normal(Shape shape, Rng& rng, bool trainable, double std = kInitStd) {
    std::vector<double> v(static_cast<size_t>(shape_numel(shape)));
    for (double& x : v) x = rng.next_trunc_normal(std);
    return Tensor::from_values(std::move(shape), std::move(v), trainable);
}

inline LinearParams init_linear(int in, int out, Rng& rng, bool trainable) {
    return {trunc_normal({in, out}, rng, trainable), Tensor::zeros({1, out}, trainable)};
}

inline LayerNormParams init_layer_norm(int dim, Rng& rng, bool trainable) {
    (void)rng;
    return {Tensor::full({dim}, 1.0, trainable), Tensor::zeros({dim}, trainable)};
}

inline BlockParams init_block(int dim, int hidden, Rng& rng, bool trainable) {
    BlockParams b;
    b.ln1 = init_layer_norm(dim, rng, trainable);
    b.qkv = init_linear(dim, 3 * dim, rng, trainable);
    b.proj = init_linear(dim, dim, rng, trainable);
    b.ln2 = init_layer_norm(dim, rng, trainable);
    b.fc1 = init_linear(dim, hidden, rng, trainable);
    b.fc2 = init_linear(hidden, dim, rng, trainable);
    return b;
}

}  // namespace detail

inline EncoderParams init_encoder_params(const ViTConfig& cfg, Rng& rng, bool trainable = true) {
    cfg.validate();
    EncoderParams p;
    p.patch_embed = detail::init_linear(cfg.patch_dim(), cfg.embed_dim, rng, trainable);
    p.cls_token = detail::trunc_normal({1, cfg.embed_dim}, rng, trainable);
    p.pos_embed = detail::trunc_normal({1 + cfg.num_patches(), cfg.embed_dim}, rng, trainable);
    for (int i = 0; i < cfg.depth; ++i)
        p.blocks.push_back(detail::init_block(cfg.embed_dim, cfg.mlp_hidden(), rng, trainable));
    p.norm = detail::init_layer_norm(cfg.embed_dim, rng, trainable);
    return p;
}

inline DecoderParams init_decoder_params(const ViTConfig& cfg, Rng& rng, bool trainable = true) {
    cfg.validate();
    DecoderParams p;
    p.embed = detail::init_linear(cfg.embed_dim, cfg.decoder_dim, rng, trainable);
    p.mask_token = detail::trunc_normal({1, cfg.decoder_dim}, rng, trainable);
    p.pos_embed = detail::trunc_normal({1 + cfg.num_patches(), cfg.decoder_dim}, rng, trainable);
    for (int i = 0; i < cfg.decoder_depth; ++i)
        p.blocks.push_back(detail::init_block(cfg.decoder_dim, cfg.decoder_mlp_hidden(), rng, trainable));
    p.norm = detail::init_layer_norm(cfg.decoder_dim, rng, trainable);
    p.head_teacher = detail::init_linear(cfg.decoder_dim, cfg.teacher_dim, rng, trainable);
    p.head_student = detail::init_linear(cfg.decoder_dim, cfg.embed_dim, rng, trainable);
    p.head_pixel = detail::init_linear(cfg.decoder_dim, cfg.patch_dim(), rng, trainable);
    return p;
}

// Fixed traversal order; checkpoint and optimizer enumeration both rely on it.
template <typename ParamFn>
void for_each_param(EncoderParams& p, const std::string& prefix, ParamFn&& fn) {
    fn(prefix + "patch_embed.w", p.patch_embed.w);
    fn(prefix + "patch_embed.b", p.patch_embed.b);
    fn(prefix + "cls_token", p.cls_token);
    fn(prefix + "pos_embed", p.pos_embed);
    for (size_t i = 0; i < p.blocks.size(); ++i) {
        const std::string bp = prefix + "blocks." + std::to_string(i) + ".";
        BlockParams& b = p.blocks[i];
        fn(bp + "ln1.g", b.ln1.g);
        fn(bp + "ln1.b", b.ln1.b);
        fn(bp + "qkv.w", b.qkv.w);
        fn(bp + "qkv.b", b.qkv.b);
        fn(bp + "proj.w", b.proj.w);
        fn(bp + "proj.b", b.proj.b);
        fn(bp + "ln2.g", b.ln2.g);
        fn(bp + "ln2.b", b.ln2.b);
        fn(bp + "fc1.w", b.fc1.w);
        fn(bp + "fc1.b", b.fc1.b);
        fn(bp + "fc2.w", b.fc2.w);
        fn(bp + "fc2.b", b.fc2.b);
    }
    fn(prefix + "norm.g", p.norm.g);
    fn(prefix + "norm.b", p.norm.b);
}

template <typename ParamFn>
void for_each_param(DecoderParams& p, const std::string& prefix, ParamFn&& fn) {
    fn(prefix + "embed.w", p.embed.w);
    fn(prefix + "embed.b", p.embed.b);
    fn(prefix + "mask_token", p.mask_token);
    fn(prefix + "pos_embed", p.pos_embed);
    for (size_t i = 0; i < p.blocks.size(); ++i) {
        const std::string bp = prefix + "blocks." + std::to_string(i) + ".";
        BlockParams& b = p.blocks[i];
        fn(bp + "ln1.g", b.ln1.g);
        fn(bp + "ln1.b", b.ln1.b);
        fn(bp + "qkv.w", b.qkv.w);
        fn(bp + "qkv.b", b.qkv.b);
        fn(bp + "proj.w", b.proj.w);
        fn(bp + "proj.b", b.proj.b);
        fn(bp + "ln2.g", b.ln2.g);
        fn(bp + "ln2.b", b.ln2.b);
        fn(bp + "fc1.w", b.fc1.w);
        fn(bp + "fc1.b", b.fc1.b);
        fn(bp + "fc2.w", b.fc2.w);
        fn(bp + "fc2.b", b.fc2.b);
    }
    fn(prefix + "norm.g", p.norm.g);
    fn(prefix + "norm.b", p.norm.b);
    fn(prefix + "head_teacher.w", p.head_teacher.w);
    fn(prefix + "head_teacher.b", p.head_teacher.b);
    fn(prefix + "head_student.w", p.head_student.w);
    fn(prefix + "head_student.b", p.head_student.b);
    fn(prefix + "head_pixel.w", p.head_pixel.w);
    fn(prefix + "head_pixel.b", p.head_pixel.b);
}

template <typename Params>
Params clone_params(const Params& src, bool trainable) {
    Params dst = src;
    for_each_param(dst, "", [&](const std::string&, Tensor& t) { t = t.copy(trainable); });
    return dst;
}

template <typename Params>
int64_t count_params(const Params& p) {
    int64_t n = 0;
    for_each_param(const_cast<Params&>(p), "",
                   [&](const std::string&, Tensor& t) { n += t.numel(); });
    return n;
}

// ---- patchify ----

// Pixels are CHW row-major in [0,1] (or standardized). Patches are scanned
// row-major over the grid; within a patch, layout is channel-major then row
// then column, so unpatchify is an exact inverse.
inline Tensor patchify(const std::vector<double>& chw, const ViTConfig& cfg) {
    const int C = cfg.channels, H = cfg.image_size, W = cfg.image_size, P = cfg.patch_size;
    if (static_cast<int64_t>(chw.size()) != static_cast<int64_t>(C) * H * W)
        throw DimensionError("patchify: " + std::to_string(chw.size()) + " pixels for " +
                             std::to_string(C) + "x" + std::to_string(H) + "x" + std::to_string(W));
    const int G = cfg.grid();
    std::vector<double> out(static_cast<size_t>(cfg.num_patches()) * cfg.patch_dim());
    size_t o = 0;
    for (int gy = 0; gy < G; ++gy)
        for (int gx = 0; gx < G; ++gx)
            for (int c = 0; c < C; ++c)
                for (int py = 0; py < P; ++py)
                    for (int px = 0; px < P; ++px) {
                        const int y = gy * P + py;
                        const int x = gx * P + px;
                        out[o++] = chw[(static_cast<size_t>(c) * H + y) * W + x];
                    }
    return Tensor::from_values({cfg.num_patches(), cfg.patch_dim()}, std::move(out));
}

inline std::vector<double> unpatchify(const std::vector<double>& patches, const ViTConfig& cfg) {
    const int C = cfg.channels, H = cfg.image_size, W = cfg.image_size, P = cfg.patch_size;
    const int G = cfg.grid();
    if (static_cast<int64_t>(patches.size()) !=
        static_cast<int64_t>(cfg.num_patches()) * cfg.patch_dim())
        throw DimensionError("unpatchify: " + std::to_string(patches.size()) + " values for " +
                             std::to_string(cfg.num_patches()) + "x" + std::to_string(cfg.patch_dim()));
    std::vector<double> chw(static_cast<size_t>(C) * H * W);
    size_t o = 0;
    for (int gy = 0; gy < G; ++gy)
        for (int gx = 0; gx < G; ++gx)
            for (int c = 0; c < C; ++c)
                for (int py = 0; py < P; ++py)
                    for (int px = 0; px < P; ++px) {
                        const int y = gy * P + py;
                        const int x = gx * P + px;
                        chw[(static_cast<size_t>(c) * H + y) * W + x] = patches[o++];
                    }
    return chw;
}

// ---- forward ----

struct EncoderOutput {
    Tensor tokens;                 // [1+u, embed_dim]; row 0 is CLS
    std::vector<int> patch_rows;   // patch index of token row r+1, ascending
    int total_patches = 0;
    bool full_image = false;
    // Softmax maps of the final block, one [T*T] buffer per head, row-major
    // over (query, key). Plain values; reading them never touches the graph.
    std::vector<std::vector<double>> attention_last;
};

namespace detail {

inline Tensor linear(const Tensor& x, const LinearParams& p) {
    return add(matmul(x, p.w), tile_rows(p.b, x.shape()[0]));
}

inline Tensor attention(const Tensor& x, const BlockParams& p, int heads,
                        std::vector<std::vector<double>>* record) {
    const int dim = x.shape()[1];
    const int dh = dim / heads;
    const double inv_sqrt_dh = 1.0 / std::sqrt(static_cast<double>(dh));
    Tensor qkv = linear(x, p.qkv);
    if (record) record->clear();
    std::vector<Tensor> head_outs;
    head_outs.reserve(heads);
    for (int h = 0; h < heads; ++h) {
        Tensor q = slice_cols(qkv, h * dh, (h + 1) * dh);
        Tensor k = slice_cols(qkv, dim + h * dh, dim + (h + 1) * dh);
        Tensor v = slice_cols(qkv, 2 * dim + h * dh, 2 * dim + (h + 1) * dh);
        Tensor scores = scale(matmul(q, transpose(k)), inv_sqrt_dh);
        Tensor attn = softmax(scores);  // [t, t]
        if (record) record->push_back(attn.values());
        head_outs.push_back(matmul(attn, v));
    }
    Tensor merged = heads == 1 ? head_outs[0] : concat_cols(head_outs);
    return linear(merged, p.proj);
}

inline Tensor mlp(const Tensor& x, const BlockParams& p) {
    return linear(gelu(linear(x, p.fc1)), p.fc2);
}

// Pre-LN block: x + attn(ln(x)), then x + mlp(ln(x)).
inline Tensor block_forward(const Tensor& x, const BlockParams& p, int heads,
                            std::vector<std::vector<double>>* record) {
    Tensor a = attention(layer_norm_affine(x, p.ln1.g, p.ln1.b, kLayerNormEps), p, heads, record);
    Tensor x1 = add(x, a);
    Tensor m = mlp(layer_norm_affine(x1, p.ln2.g, p.ln2.b, kLayerNormEps), p);
    return add(x1, m);
}

}  // namespace detail

// Encoder forward. Only CLS and unmasked patch tokens enter the sequence;
// masked patches are invisible, so their pixel content cannot influence the
// output. An empty mask encodes the full image.
inline EncoderOutput encode(const Tensor& patches, const MaskSet& mask, const EncoderParams& p,
                            const ViTConfig& cfg) {
    const int n = cfg.num_patches();
    if (patches.rank() != 2 || patches.shape()[0] != n || patches.shape()[1] != cfg.patch_dim())
        throw DimensionError("encode: patches " + shape_str(patches.shape()) + ", expected [" +
                             std::to_string(n) + "," + std::to_string(cfg.patch_dim()) + "]");
    if (!mask.indices.empty()) {
        if (mask.total != n)
            throw DimensionError("encode: mask drawn from " + std::to_string(mask.total) +
                                 " patches, model has " + std::to_string(n));
        check_row_indices("encode", mask.indices, n);
        for (size_t i = 1; i < mask.indices.size(); ++i)
            if (mask.indices[i] <= mask.indices[i - 1])
                throw ContractError("encode: mask indices not sorted/distinct");
    }

    EncoderOutput out;
    out.total_patches = n;
    out.full_image = mask.indices.empty();
    out.patch_rows = MaskSet{n, mask.indices}.complement();
    if (out.patch_rows.empty()) throw ContractError("encode: mask leaves no visible patches");

    Tensor visible = detail::linear(gather_rows(patches, out.patch_rows), p.patch_embed);
    std::vector<int> pos_rows;
    pos_rows.reserve(out.patch_rows.size() + 1);
    pos_rows.push_back(0);
    for (int r : out.patch_rows) pos_rows.push_back(1 + r);
    Tensor seq = add(concat_rows({p.cls_token, visible}), gather_rows(p.pos_embed, pos_rows));

    for (size_t i = 0; i < p.blocks.size(); ++i) {
        const bool last = i + 1 == p.blocks.size();
        seq = detail::block_forward(seq, p.blocks[i], cfg.heads, last ? &out.attention_last : nullptr);
    }
    out.tokens = layer_norm_affine(seq, p.norm.g, p.norm.b, kLayerNormEps);
    return out;
}

struct DecoderOutput {
    Tensor pred_teacher;  // [num_patches, teacher_dim]
    Tensor pred_student;  // [num_patches, embed_dim]
    Tensor pred_pixel;    // [num_patches, patch_dim]
};

// Decoder forward. Encoder tokens are projected into the decoder width and
// scattered back into a full-length sequence; every masked position holds the
// shared mask token. Heads predict for all patch positions; losses select the
// masked rows.
inline DecoderOutput decode(const EncoderOutput& enc, const MaskSet& mask, const DecoderParams& p,
                            const ViTConfig& cfg) {
    const int n = cfg.num_patches();
    if (enc.total_patches != n)
        throw DimensionError("decode: encoder ran on " + std::to_string(enc.total_patches) +
                             " patches, model has " + std::to_string(n));
    // Visible rows and mask must partition the patch set exactly.
    {
        size_t vi = 0, mi = 0;
        for (int i = 0; i < n; ++i) {
            if (vi < enc.patch_rows.size() && enc.patch_rows[vi] == i) {
                ++vi;
            } else if (mi < mask.indices.size() && mask.indices[mi] == i) {
                ++mi;
            } else {
                throw ContractError("decode: mask and visible set do not partition the patches");
            }
        }
        if (vi != enc.patch_rows.size() || mi != mask.indices.size())
            throw ContractError("decode: mask and visible set do not partition the patches");
    }

    Tensor embedded = detail::linear(enc.tokens, p.embed);
    std::vector<int> dst_rows;
    dst_rows.reserve(enc.patch_rows.size() + 1);
    dst_rows.push_back(0);
    for (int r : enc.patch_rows) dst_rows.push_back(1 + r);
    Tensor base = tile_rows(p.mask_token, n + 1);
    Tensor seq = add(scatter_rows(base, dst_rows, embedded), p.pos_embed);

    for (const BlockParams& b : p.blocks)
        seq = detail::block_forward(seq, b, cfg.decoder_heads, nullptr);
    seq = layer_norm_affine(seq, p.norm.g, p.norm.b, kLayerNormEps);

    Tensor patch_tokens = slice_rows(seq, 1, n + 1);
    DecoderOutput out;
    out.pred_teacher = detail::linear(patch_tokens, p.head_teacher);
    out.pred_student = detail::linear(patch_tokens, p.head_student);
    out.pred_pixel = detail::linear(patch_tokens, p.head_pixel);
    return out;
}

// ---- attention map export ----

// Reduces the final block's softmax maps to one score per patch. Default
// cls_mean: the CLS query row averaged over heads, CLS self-attention entry
// dropped, renormalized to sum 1.
inline AttentionMap extract_attention(const EncoderOutput& enc, const std::string& mode = "cls_mean") {
    if (!enc.full_image)
        throw ContractError("extract_attention requires a full-image encode");
    if (enc.attention_last.empty())
        throw ContractError("extract_attention: no attention recorded (depth 0?)");
    const int n = enc.total_patches;
    const int t = n + 1;
    const int heads = static_cast<int>(enc.attention_last.size());
    AttentionMap map;
    map.scores.assign(n, 0.0);

    if (mode == "cls_mean") {
        for (int h = 0; h < heads; ++h)
            for (int j = 0; j < n; ++j) map.scores[j] += enc.attention_last[h][1 + j];
        for (double& v : map.scores) v /= heads;
    } else if (mode == "cls_max") {
        for (int j = 0; j < n; ++j) {
            double best = 0.0;
            for (int h = 0; h < heads; ++h) best = std::max(best, enc.attention_last[h][1 + j]);
            map.scores[j] = best;
        }
    } else if (mode == "rows_mean") {
        for (int h = 0; h < heads; ++h)
            for (int i = 0; i < t; ++i)
                for (int j = 0; j < n; ++j)
                    map.scores[j] += enc.attention_last[h][static_cast<size_t>(i) * t + 1 + j];
        for (double& v : map.scores) v /= static_cast<double>(heads) * t;
    } else {
        throw ConfigError("attn_map_mode must be cls_mean, cls_max or rows_mean, got '" + mode + "'");
    }

    double s = 0.0;
    for (double v : map.scores) s += v;
    if (!(s > 0.0)) throw NumericError("extract_attention: degenerate score mass");
    for (double& v : map.scores) v /= s;
    return map;
}

// Mean over the final patch tokens of a full-image encode; the linear-probe
// feature. Plain values, no graph.
inline std::vector<double> mean_patch_tokens(const EncoderOutput& enc) {
    if (!enc.full_image) throw ContractError("mean_patch_tokens requires a full-image encode");
    const int d = enc.tokens.shape()[1];
    const int u = enc.tokens.shape()[0] - 1;
    std::vector<double> out(d, 0.0);
    for (int r = 1; r <= u; ++r)
        for (int j = 0; j < d; ++j) out[j] += enc.tokens.values()[static_cast<size_t>(r) * d + j];
    for (double& v : out) v /= u;
    return out;
}

}  // namespace cmtmae
