#pragma once

// EMA momentum encoder. The shadow starts as an exact copy of the online
// encoder and tracks it as shadow <- m*shadow + (1-m)*online after every
// optimizer step. m=1 freezes the shadow, m=0 copies the online weights.
//
// ema_update_additive is the unstable additive variant
// (shadow <- shadow + (1-m)*online); it exists for side-by-side inspection
// behind a debug flag and is excluded from training and acceptance.

#include <string>
#include <utility>
#include <vector>

#include "cmtmae/errors.hpp"
#include "cmtmae/masking.hpp"
#include "cmtmae/tensor.hpp"
#include "cmtmae/vit.hpp"

namespace cmtmae {

struct MomentumState {
    EncoderParams shadow;  // frozen copies; never trainable
    double m = 0.999;
    bool initialized = false;
};

inline MomentumState init_momentum(const EncoderParams& online, double m) {
    if (!(m >= 0.0 && m <= 1.0))
        throw ConfigError("ema momentum " + std::to_string(m) + " outside [0,1]");
    MomentumState s;
    s.shadow = clone_params(online, /*trainable=*/false);
    s.m = m;
    s.initialized = true;
    return s;
}

namespace detail {

template <typename UpdateFn>
void zip_params(EncoderParams& shadow, const EncoderParams& online, UpdateFn&& fn) {
    std::vector<std::pair<std::string, Tensor*>> shadow_list;
    for_each_param(shadow, "", [&](const std::string& name, Tensor& t) {
        shadow_list.emplace_back(name, &t);
    });
    size_t i = 0;
    for_each_param(const_cast<EncoderParams&>(online), "", [&](const std::string& name, Tensor& t) {
        if (i >= shadow_list.size() || shadow_list[i].first != name)
            throw DataError("momentum update: parameter name mismatch at '" + name + "'");
        Tensor* sh = shadow_list[i].second;
        if (sh->shape() != t.shape())
            throw DataError("momentum update: shape mismatch for '" + name + "': " +
                            shape_str(sh->shape()) + " vs " + shape_str(t.shape()));
        fn(*sh, t);
        ++i;
    });
    if (i != shadow_list.size()) throw DataError("momentum update: parameter count mismatch");
}

}  // namespace detail

inline void ema_update(MomentumState& state, const EncoderParams& online) {
    if (!state.initialized) throw ContractError("ema_update before init_momentum");
    const double m = state.m;
    detail::zip_params(state.shadow, online, [m](Tensor& shadow, const Tensor& onl) {
        auto& s = shadow.values_mut();
        const auto& o = onl.values();
        for (size_t i = 0; i < s.size(); ++i) s[i] = m * s[i] + (1.0 - m) * o[i];
    });
}

inline void ema_update_additive(MomentumState& state, const EncoderParams& online) {
    if (!state.initialized) throw ContractError("ema_update before init_momentum");
    const double m = state.m;
    detail::zip_params(state.shadow, online, [m](Tensor& shadow, const Tensor& onl) {
        auto& s = shadow.values_mut();
        const auto& o = onl.values();
        for (size_t i = 0; i < s.size(); ++i) s[i] = s[i] + (1.0 - m) * o[i];
    });
}

struct MomentumForwardResult {
    AttentionMap attention;
    Tensor features;  // [num_patches, embed_dim], row-normalized, no graph
};

// Full-image forward through the shadow encoder: per-patch final tokens,
// layer-normalized per row without affine, plus the shadow's attention map.
// The shadow is frozen, so nothing here ever carries gradients.
inline MomentumForwardResult momentum_forward(const Tensor& patches, const MomentumState& state,
                                              const ViTConfig& cfg,
                                              const std::string& attn_mode = "cls_mean",
                                              double eps = kLayerNormEps) {
    if (!state.initialized) throw ContractError("momentum_forward before init_momentum");
    EncoderOutput enc = encode(patches, MaskSet{}, state.shadow, cfg);
    MomentumForwardResult out;
    out.attention = extract_attention(enc, attn_mode);
    Tensor patch_tokens = slice_rows(enc.tokens, 1, 1 + cfg.num_patches());
    out.features = layer_norm(patch_tokens, eps).detach();
    return out;
}

}  // namespace cmtmae
