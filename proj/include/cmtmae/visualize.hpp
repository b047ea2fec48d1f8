#pragma once

// Attention and mask rendering. Heatmaps blend the image (as grayscale) with
// a red-yellow intensity ramp over the per-patch scores; mask overlays dim
// the masked patches. Output is plain binary PPM.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <string>
#include <vector>

#include "cmtmae/errors.hpp"
#include "cmtmae/image_files.hpp"
#include "cmtmae/masking.hpp"
#include "cmtmae/vit.hpp"

namespace cmtmae {

namespace viz_detail {

inline std::vector<double> grayscale(const std::vector<double>& chw_raw, int channels, int plane) {
    std::vector<double> g(plane, 0.0);
    for (int c = 0; c < channels; ++c)
        for (int k = 0; k < plane; ++k) g[k] += chw_raw[static_cast<size_t>(c) * plane + k];
    for (double& v : g) v /= channels;
    return g;
}

inline uint8_t to_byte(double v) {
    return static_cast<uint8_t>(std::lround(std::min(1.0, std::max(0.0, v)) * 255.0));
}

}  // namespace viz_detail

// chw_raw: [0,1] pixels of the image the scores belong to.
inline void write_attention_heatmap(const std::string& path, const std::vector<double>& chw_raw,
                                    const AttentionMap& map, const ViTConfig& cfg) {
    map.validate();
    if (map.size() != cfg.num_patches())
        throw DimensionError("heatmap: " + std::to_string(map.size()) + " scores for " +
                             std::to_string(cfg.num_patches()) + " patches");
    const int s = cfg.image_size, g = cfg.grid(), p = cfg.patch_size;
    const int plane = s * s;
    const auto gray = viz_detail::grayscale(chw_raw, cfg.channels, plane);

    double peak = 0.0;
    for (double v : map.scores) peak = std::max(peak, v);
    if (peak <= 0.0) peak = 1.0;

    std::vector<uint8_t> rgb(3 * static_cast<size_t>(plane));
    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
            const int patch = (y / p) * g + (x / p);
            const double heat = map.scores[patch] / peak;  // 0..1
            const double base = 0.25 * gray[static_cast<size_t>(y) * s + x];
            // Ramp: black -> red -> yellow with rising heat, over dim grayscale.
            const double r = base + 0.75 * heat;
            const double gr = base + 0.75 * std::max(0.0, heat * 2.0 - 1.0);
            const double b = base;
            rgb[0 * plane + y * s + x] = viz_detail::to_byte(r);
            rgb[1 * plane + y * s + x] = viz_detail::to_byte(gr);
            rgb[2 * plane + y * s + x] = viz_detail::to_byte(b);
        }
    save_ppm(path, static_cast<uint32_t>(s), static_cast<uint32_t>(s), rgb);
}

inline void write_mask_overlay(const std::string& path, const std::vector<double>& chw_raw,
                               const MaskSet& mask, const ViTConfig& cfg) {
    if (mask.total != cfg.num_patches())
        throw DimensionError("mask overlay: mask over " + std::to_string(mask.total) +
                             " patches for " + std::to_string(cfg.num_patches()));
    const int s = cfg.image_size, g = cfg.grid(), p = cfg.patch_size;
    const int plane = s * s;
    std::vector<uint8_t> rgb(3 * static_cast<size_t>(plane));
    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
            const int patch = (y / p) * g + (x / p);
            const double dim = mask.contains(patch) ? 0.25 : 1.0;
            for (int c = 0; c < 3; ++c) {
                const int src = cfg.channels == 3 ? c : 0;
                rgb[c * plane + y * s + x] = viz_detail::to_byte(
                    dim * chw_raw[static_cast<size_t>(src) * plane + y * s + x]);
            }
        }
    save_ppm(path, static_cast<uint32_t>(s), static_cast<uint32_t>(s), rgb);
}

// Plain grayscale rendering of a patch-score map, one cell per patch.
inline void write_attention_pgm(const std::string& path, const AttentionMap& map,
                                const ViTConfig& cfg, int cell = 8) {
    map.validate();
    if (map.size() != cfg.num_patches())
        throw DimensionError("attention pgm: " + std::to_string(map.size()) + " scores for " +
                             std::to_string(cfg.num_patches()) + " patches");
    const int g = cfg.grid();
    double peak = 0.0;
    for (double v : map.scores) peak = std::max(peak, v);
    if (peak <= 0.0) peak = 1.0;
    const int s = g * cell;
    std::vector<uint8_t> gray(static_cast<size_t>(s) * s);
    for (int y = 0; y < s; ++y)
        for (int x = 0; x < s; ++x) {
            const int patch = (y / cell) * g + (x / cell);
            gray[static_cast<size_t>(y) * s + x] = viz_detail::to_byte(map.scores[patch] / peak);
        }
    save_pgm(path, static_cast<uint32_t>(s), static_cast<uint32_t>(s), gray);
}

}  // namespace cmtmae
